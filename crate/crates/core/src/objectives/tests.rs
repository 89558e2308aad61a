use super::*;
use crate::discriminator::{CnnClassifier, CnnConfig, Discriminator, LmConfig};
use crate::model::tests::{copy_model, tiny};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V: usize = 14;

fn model(seed: u64) -> Seq2Seq<f64> {
    Seq2Seq::init(tiny(V, 8, 2, 1), seed).unwrap()
}

fn disc(seed: u64) -> Discriminator<f64> {
    let cfg = LmConfig {
        vocab_size: V,
        n_layers: 1,
        n_heads: 2,
        embed_dim: 8,
        ffn_dim: 16,
        dropout: 0.0,
        max_positions: 16,
        length_normalize: true,
    };
    let mut d = Discriminator::new(cfg, seed).unwrap();
    d.mark_pretrained();
    d.freeze().unwrap();
    d
}

fn seq(ids: &[u32]) -> TokenSeq {
    TokenSeq(ids.to_vec())
}

fn random_sentences(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<u32>> {
    (0..n).map(|_| (0..rng.random_range(1..6)).map(|_| rng.random_range(6..V as u32)).collect()).collect()
}

struct Data {
    pairs: Vec<(Vec<u32>, Vec<u32>)>,
    unl: Vec<(Vec<u32>, StyleLabel)>,
}

impl Data {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = random_sentences(&mut rng, 3);
        let ys = random_sentences(&mut rng, 3);
        let us = random_sentences(&mut rng, 4);
        Data {
            pairs: xs.into_iter().zip(ys).collect(),
            unl: us.into_iter().enumerate().map(|(i, u)| (u, StyleLabel::ALL[i % 2])).collect(),
        }
    }

    fn pairs(&self) -> Vec<PairRef<'_>> {
        self.pairs.iter().map(|(x, y)| (x.as_slice(), y.as_slice())).collect()
    }

    fn unl(&self) -> Vec<UnlabeledRef<'_>> {
        self.unl.iter().map(|(x, s)| (x.as_slice(), *s)).collect()
    }
}

#[test]
fn mmi_loss_mixes_both_directions() {
    let m = model(1);
    let (x, y) = (seq(&[6, 7, 8]), seq(&[9, 10]));
    let f = -m.log_prob(&x, &y, StyleLabel::Target).unwrap() / 3.0;
    let b = -m.log_prob(&y, &x, StyleLabel::Source).unwrap() / 4.0;
    assert!((translation_loss(&m, &x, &y, StyleLabel::Target).unwrap() - f).abs() < 1e-12);
    for lambda in [0.0, 0.3, 0.8, 1.0] {
        let got = mmi_translation_loss(&m, &x, &y, lambda).unwrap();
        assert!((got - (lambda * f + (1.0 - lambda) * b)).abs() < 1e-12);
    }
    assert!(matches!(mmi_translation_loss(&m, &x, &y, 1.2), Err(Error::LambdaOutOfRange(_))));
    assert!(matches!(translation_loss(&m, &x, &seq(&[]), StyleLabel::Target), Err(Error::Empty(_))));
}

#[test]
fn batch_terms_equal_single_example_losses() {
    let (m, d) = (model(2), disc(3));
    let data = Data::new(4);
    let w = LossWeights::semi_supervised();
    let bd = total_loss(&m, Some(&d), w, &data.pairs(), &data.unl()).unwrap();
    let mut want = LossBreakdown::default();
    for (x, y) in &data.pairs {
        let (x, y) = (seq(x), seq(y));
        want.trans_fwd += translation_loss(&m, &x, &y, StyleLabel::Target).unwrap();
        want.trans_bwd += translation_loss(&m, &y, &x, StyleLabel::Source).unwrap();
        want.mmi_trans += mmi_translation_loss(&m, &x, &y, w.lambda_forward).unwrap();
    }
    for (x, s) in &data.unl {
        want.disc += discriminator_loss(&m, &d, &seq(x), *s).unwrap();
        want.cycle += cycle_loss(&m, &seq(x), *s).unwrap().unwrap();
    }
    for (got, want) in [
        (bd.trans_fwd, want.trans_fwd),
        (bd.trans_bwd, want.trans_bwd),
        (bd.mmi_trans, want.mmi_trans),
        (bd.disc, want.disc),
        (bd.cycle, want.cycle),
    ] {
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
    assert_eq!((bd.n_parallel, bd.n_unlabeled, bd.n_cycle_skipped), (3, 4, 0));
}

#[test]
fn discriminator_loss_recomposes_from_the_soft_classifier() {
    let (m, d) = (model(5), disc(6));
    for (x, style) in [(vec![6u32, 7, 8, 9], StyleLabel::Source), (vec![12, 13], StyleLabel::Target)] {
        let to = style.opposite();
        let r = m.rollout_distributions(&seq(&x), to, rollout_budget(x.len(), m.max_len())).unwrap();
        let p_t = d.classifier_prob_soft(&r.probs).unwrap();
        let want = -(if to == StyleLabel::Target { p_t } else { 1.0 - p_t }).ln();
        let got = discriminator_loss(&m, &d, &seq(&x), style).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

fn stub_cnn(out_bias: f64) -> CnnClassifier<f64> {
    let cfg = CnnConfig {
        embed_dim: 4,
        channels: 4,
        n_layers: 1,
        ..CnnConfig::desk(V)
    };
    let mut params: ParamSet<f64> = CnnClassifier::<f64>::new(cfg.clone(), 0).unwrap().params;
    for (name, t) in params.names.iter().zip(params.tensors.iter_mut()) {
        let v = if name == "cnn.out.b" { out_bias } else { 0.0 };
        t.data.iter_mut().for_each(|x| *x = v);
    }
    CnnClassifier::from_parts(cfg, params, true, true).unwrap()
}

#[test]
fn discriminator_loss_on_stub_classifiers() {
    let m = model(7);
    let x = seq(&[6, 7, 8]);
    // always TARGET: free when transferring to TARGET
    let sure = stub_cnn(1000.0);
    assert!(discriminator_loss(&m, &sure, &x, StyleLabel::Source).unwrap() < 1e-12);
    assert!((discriminator_loss(&m, &sure, &x, StyleLabel::Target).unwrap() - 1000.0).abs() < 1e-9);
    // undecided: ln 2 either way
    let coin = stub_cnn(0.0);
    for s in StyleLabel::ALL {
        let l = discriminator_loss(&m, &coin, &x, s).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!((l - 0.6931).abs() < 1e-4);
    }
}

#[test]
fn unfrozen_discriminator_is_rejected() {
    let m = model(1);
    let mut d = Discriminator::<f64>::new(disc(1).config().clone(), 1).unwrap();
    d.mark_pretrained();
    let r = discriminator_loss(&m, &d, &seq(&[6]), StyleLabel::Source);
    assert!(matches!(r, Err(Error::NotFrozen)));
}

#[test]
fn cycle_through_a_copy_model_reconstructs_the_input() {
    let m = copy_model(12, 10);
    for x in [vec![6u32, 7, 8], vec![11, 9], vec![10]] {
        let x = seq(&x);
        let want = translation_loss(&m, &x, &x, StyleLabel::Source).unwrap();
        let got = cycle_loss(&m, &x, StyleLabel::Source).unwrap().unwrap();
        assert_eq!(got, want);
        assert!(got < 1e-3);
    }
}

#[test]
fn cycle_matches_back_translation_of_the_greedy_rollout() {
    let m = model(11);
    for (x, s) in [(vec![6u32, 9, 9, 13], StyleLabel::Source), (vec![7, 8], StyleLabel::Target)] {
        let budget = rollout_budget(x.len(), m.max_len());
        let y = m.greedy(&[&x], &[s.opposite()], &[budget]).unwrap().remove(0).tokens;
        let got = cycle_loss(&m, &seq(&x), s).unwrap();
        if y.is_empty() {
            assert_eq!(got, None);
        } else {
            let want = translation_loss(&m, &y, &seq(&x), s).unwrap();
            assert!((got.unwrap() - want).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_batches_and_bad_weights_are_errors() {
    let m = model(1);
    let w = LossWeights::semi_supervised();
    let r = total_loss::<f64, Discriminator<f64>>(&m, None, w, &[], &[]);
    assert!(matches!(r, Err(Error::Empty(_))));
    let bad = LossWeights { lambda_forward: -0.1, ..w };
    let x = [6u32];
    let r = total_loss::<f64, Discriminator<f64>>(&m, None, bad, &[(&x, &x)], &[]);
    assert!(matches!(r, Err(Error::LambdaOutOfRange(_))));
    let bad = LossWeights { w_cycle: -1.0, ..w };
    assert!(matches!(bad.validate(), Err(Error::Negative("w_cycle", _))));
}

#[test]
fn lambda_one_equals_plain_translation_bit_for_bit() {
    let (m, d) = (model(3), disc(4));
    let data = Data::new(9);
    let plan = DropoutPlan { p: 0.1, seed: 5, step: 17 };
    let run = |translation| {
        let mut obj = Objective::new(&m, Some(&d), LossWeights { lambda_forward: 1.0, ..LossWeights::semi_supervised() });
        obj.translation = translation;
        obj.dropout = plan;
        let mut g = Graph::new();
        let v = m.bind(&mut g, true);
        let (loss, bd) = obj.build(&mut g, &v, &data.pairs(), &data.unl()).unwrap();
        g.backward(loss);
        (bd.total, m.params.grads(&g, &v))
    };
    let (a, ga) = run(Translation::Mmi);
    let (b, gb) = run(Translation::Plain);
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}

#[test]
fn every_term_reaches_the_generator_and_never_the_discriminator() {
    let (m, d) = (model(12), disc(13));
    let data = Data::new(14);
    let only = |f: f64, w_disc: f64, w_cycle: f64| LossWeights {
        lambda_forward: f,
        w_disc,
        w_cycle,
    };
    for (w, parallel) in [(only(1.0, 0.0, 0.0), true), (only(0.0, 0.0, 0.0), true), (only(1.0, 1.0, 0.0), false), (only(1.0, 0.0, 1.0), false)] {
        let obj = Objective::new(&m, Some(&d), w);
        let mut g = Graph::new();
        let v = m.bind(&mut g, true);
        let pairs = if parallel { data.pairs() } else { Vec::new() };
        let unl = if parallel { Vec::new() } else { data.unl() };
        let (loss, _) = obj.build(&mut g, &v, &pairs, &unl).unwrap();
        g.backward(loss);
        let norm: f64 = m.params.grads(&g, &v).iter().flat_map(|t| t.data.iter()).map(|x| x * x).sum();
        assert!(norm > 1e-12, "{w:?}");
    }
    let mut g = Graph::new();
    let dv = d.bind_frozen(&mut g);
    let probs = g.param_owned(Tensor::from_vec(2, V, vec![1.0 / V as f64; 2 * V]));
    let z = d.soft_logit(&mut g, &dv, probs, 2, &[2]).unwrap();
    let s = g.sum(z);
    g.backward(s);
    assert!(dv.iter().all(|&v| g.grad(v).is_none()));
    assert!(g.grad(probs).is_some());
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let (m, d) = (model(21), disc(22));
    let data = Data::new(23);
    let obj = Objective::new(&m, Some(&d), LossWeights::semi_supervised());
    let rollouts = obj.rollouts(&data.unl()).unwrap();
    let eval = |params: &ParamSet<f64>, with_grad: bool| {
        let mm = Seq2Seq::from_params(m.config.clone(), params.clone()).unwrap();
        let o = Objective::new(&mm, Some(&d), LossWeights::semi_supervised());
        let mut g = Graph::new();
        let v = mm.bind(&mut g, with_grad);
        let (loss, bd) = o.build_with_rollouts(&mut g, &v, &data.pairs(), &data.unl(), &rollouts).unwrap();
        let grads = if with_grad {
            g.backward(loss);
            mm.params.grads(&g, &v)
        } else {
            Vec::new()
        };
        (bd.total, grads)
    };
    let (_, analytic) = eval(&m.params, true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let mut idx: Vec<usize> = (0..a.data.len()).collect();
        idx.sort_by(|&i, &j| a.data[j].abs().total_cmp(&a.data[i].abs()));
        idx.truncate(5);
        idx.extend((0..5).map(|_| rng.random_range(0..a.data.len())));
        let (mut an, mut nu) = (Vec::new(), Vec::new());
        for i in idx {
            let mut p = m.params.clone();
            p.tensors[k].data[i] += h;
            let up = eval(&p, false).0;
            p.tensors[k].data[i] -= 2.0 * h;
            let down = eval(&p, false).0;
            an.push(a.data[i]);
            nu.push((up - down) / (2.0 * h));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = an.iter().zip(&nu).map(|(a, n)| a - n).collect();
        let scale = norm(&an).max(norm(&nu));
        if scale > 1e-9 {
            let rel = norm(&diff) / scale;
            worst = worst.max(rel);
            assert!(rel < 1e-5, "{}: {rel}", m.params.names[k]);
        }
    }
    assert!(worst < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn total_is_the_weighted_sum_of_its_terms(
        lambda in 0.0f64..=1.0,
        w_disc in 0.0f64..3.0,
        w_cycle in 0.0f64..3.0,
        seed in 0u64..1000,
    ) {
        let (m, d) = (model(seed % 7), disc(seed % 5));
        let data = Data::new(seed);
        let w = LossWeights { lambda_forward: lambda, w_disc, w_cycle };
        let bd = total_loss(&m, Some(&d), w, &data.pairs(), &data.unl()).unwrap();
        let want = bd.mmi_trans + w_disc * bd.disc + w_cycle * bd.cycle;
        prop_assert!((bd.total - want).abs() < 1e-9 * (1.0 + want.abs()));
        prop_assert!(bd.disc >= 0.0 && bd.cycle >= 0.0 && bd.mmi_trans >= 0.0);
    }
}
