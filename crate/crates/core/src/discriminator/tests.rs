use super::*;
use crate::optim::AdamConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(vocab: usize, normalize: bool) -> LmConfig {
    LmConfig {
        vocab_size: vocab,
        n_layers: 1,
        n_heads: 2,
        embed_dim: 8,
        ffn_dim: 16,
        dropout: 0.0,
        max_positions: 16,
        length_normalize: normalize,
    }
}

/// An LM whose every next-token distribution is `softmax(bias)`.
fn constant_lm(bias: &[f64], normalize: bool) -> LanguageModel<f64> {
    let mut lm = LanguageModel::<f64>::init(small(bias.len(), normalize), "lm", 0).unwrap();
    for t in lm.params.tensors.iter_mut() {
        t.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let i = lm.params.names.iter().position(|n| n == "lm.out.b").unwrap();
    lm.params.tensors[i].data.copy_from_slice(bias);
    lm
}

#[test]
fn single_and_product_factors() {
    // vocab 10: P(6) = 0.5, P(7) = 0.25, the other eight share 0.25
    let mut bias = vec![(0.25f64 / 8.0).ln(); 10];
    bias[6] = 0.5f64.ln();
    bias[7] = 0.25f64.ln();
    let lm = constant_lm(&bias, false);
    assert!((lm.lm_score(&[6]).unwrap() - (-0.6931)).abs() < 1e-4);
    assert!((lm.lm_score(&[6]).unwrap() - 0.5f64.ln()).abs() < 1e-12);
    assert!((lm.lm_score(&[6, 7]).unwrap() - 0.125f64.ln()).abs() < 1e-12);
    assert!((lm.lm_score(&[6, 7]).unwrap() - (-2.0794)).abs() < 1e-4);
}

#[test]
fn uniform_lm_scores_minus_len_log_v() {
    for v in [7usize, 12, 50] {
        let lm = constant_lm(&vec![0.0; v], false);
        for len in [1usize, 2, 5, 9] {
            let x: Vec<u32> = (0..len).map(|i| 6 + (i % (v - 6)) as u32).collect();
            let want = -(len as f64) * (v as f64).ln();
            assert!((lm.lm_score(&x).unwrap() - want).abs() < 1e-10);
        }
        let normalized = constant_lm(&vec![0.0; v], true);
        assert!((normalized.lm_score(&[6, 6, 6]).unwrap() + (v as f64).ln()).abs() < 1e-10);
    }
}

#[test]
fn two_way_softmax_values() {
    assert_eq!(two_way_softmax(-3.0, -3.0), [0.5, 0.5]);
    let want = (-1.0f64).exp() / ((-1.0f64).exp() + (-2.0f64).exp());
    let [_, p_t] = two_way_softmax(-2.0, -1.0);
    assert!((p_t - want).abs() < 1e-15);
    assert!((p_t - 0.7311).abs() < 1e-4);
    let mut last = 0.0;
    for i in 0..50 {
        let [ps, pt] = two_way_softmax(-4.0, -10.0 + i as f64 * 0.3);
        assert!((ps + pt - 1.0).abs() < 1e-12);
        assert!(pt > last);
        last = pt;
    }
}

fn random_disc(seed: u64) -> Discriminator<f64> {
    let mut d = Discriminator::new(small(15, true), seed).unwrap();
    d.mark_pretrained();
    d
}

#[test]
fn posteriors_sum_to_one_on_random_sentences() {
    let d = random_disc(4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs: Vec<Vec<u32>> = (0..40).map(|_| (0..rng.random_range(1..9)).map(|_| rng.random_range(6..15)).collect()).collect();
    let refs: Vec<&[u32]> = xs.iter().map(Vec::as_slice).collect();
    let scores = d.sentence_scores(&refs).unwrap();
    let probs = d.target_probs(&refs).unwrap();
    for ([s, t], p) in scores.iter().zip(probs) {
        let [ps, pt] = two_way_softmax(*s, *t);
        assert!((ps + pt - 1.0).abs() < 1e-9);
        assert!((pt - p).abs() < 1e-12);
    }
}

#[test]
fn one_hot_soft_scoring_equals_hard_scoring() {
    let d = random_disc(8);
    for x in [vec![6u32], vec![9, 10, 14, 6], vec![7; 6]] {
        let full = with_eos(&x);
        let mut probs = Tensor::<f64>::zeros(full.len(), 15);
        for (t, &tok) in full.iter().enumerate() {
            probs.row_mut(t)[tok as usize] = 1.0;
        }
        let soft = d.classifier_prob_soft(&probs).unwrap();
        let hard = d.classifier_prob(&TokenSeq(x.clone())).unwrap();
        assert_eq!(soft, hard);
    }
}

#[test]
fn batched_soft_scores_match_single_rows() {
    let d = random_disc(3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let lens = [3usize, 1, 5];
    let width = 5;
    let mut data = vec![0.0f64; lens.len() * width * 15];
    for row in data.chunks_mut(15) {
        let raw: Vec<f64> = (0..15).map(|_| rng.random::<f64>()).collect();
        let z: f64 = raw.iter().sum();
        row.iter_mut().zip(raw).for_each(|(o, r)| *o = r / z);
    }
    let mut g = Graph::new();
    let v = d.bind_frozen(&mut g);
    let probs = g.constant(Tensor::from_vec(lens.len() * width, 15, data.clone()));
    let z = d.soft_logit(&mut g, &v, probs, width, &lens).unwrap();
    let batched = g.value(z).data.clone();
    for (b, &k) in lens.iter().enumerate() {
        let rows = Tensor::from_vec(k, 15, data[b * width * 15..(b * width + k) * 15].to_vec());
        let p = d.classifier_prob_soft(&rows).unwrap();
        assert!((sigmoid(batched[b]) - p).abs() < 1e-12);
    }
}

#[test]
fn soft_scores_differentiate_through_the_distributions() {
    let d = random_disc(6);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (k, vocab) = (4usize, 15usize);
    let base: Vec<f64> = (0..k * vocab).map(|_| rng.random::<f64>() + 0.1).collect();
    let eval = |x: &[f64]| {
        let mut g = Graph::new();
        let v = d.bind_frozen(&mut g);
        let p = g.param_owned(Tensor::from_vec(k, vocab, x.to_vec()));
        let z = d.soft_logit(&mut g, &v, p, k, &[k]).unwrap();
        let s = g.sum(z);
        g.backward(s);
        (g.value(s).item(), g.grad(p).unwrap().to_vec())
    };
    let (_, grad) = eval(&base);
    let h = 1e-6;
    for j in [0usize, 7, 20, 33, 59] {
        let mut plus = base.clone();
        plus[j] += h;
        let mut minus = base.clone();
        minus[j] -= h;
        let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
        assert!((grad[j] - numeric).abs() < 1e-7 * (1.0 + numeric.abs()), "{j}: {} vs {numeric}", grad[j]);
    }
}

fn pools() -> Vec<(Vec<u32>, StyleLabel)> {
    // SOURCE sentences use tokens 6..9, TARGET sentences 9..12
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    (0..64)
        .map(|i| {
            let style = if i % 2 == 0 { StyleLabel::Source } else { StyleLabel::Target };
            let lo = if style == StyleLabel::Source { 6 } else { 9 };
            ((0..rng.random_range(2..6)).map(|_| rng.random_range(lo..lo + 3)).collect(), style)
        })
        .collect()
}

#[test]
fn pretraining_learns_and_freezing_locks() {
    let mut d = Discriminator::<f32>::new(small(12, true), 1).unwrap();
    assert!(matches!(d.classifier_prob(&TokenSeq(vec![6])), Err(Error::NotPretrained)));
    assert!(matches!(d.freeze(), Err(Error::NotPretrained)));
    let cfg = AdamConfig {
        lr: 1e-2,
        warmup_updates: 0,
        clip_norm: 0.0,
        ..AdamConfig::default()
    };
    let mut opts = [Adam::new(cfg.clone(), &d.lms[0].params), Adam::new(cfg, &d.lms[1].params)];
    let data = pools();
    let batch: Vec<(&[u32], StyleLabel)> = data.iter().map(|(x, s)| (x.as_slice(), *s)).collect();
    let first = d.pretrain_step(&batch, &mut opts, &mut Dropout::none()).unwrap();
    let mut last = first;
    for _ in 0..60 {
        last = d.pretrain_step(&batch, &mut opts, &mut Dropout::none()).unwrap();
    }
    assert!(last < first * 0.7, "{first} -> {last}");
    let correct = data
        .iter()
        .filter(|(x, s)| (d.classifier_prob(&TokenSeq(x.clone())).unwrap() > 0.5) == (*s == StyleLabel::Target))
        .count();
    assert!(correct >= 60, "{correct}/64");
    d.freeze().unwrap();
    let h = d.hash();
    d.freeze().unwrap();
    assert!(matches!(d.pretrain_step(&batch, &mut opts, &mut Dropout::none()), Err(Error::Frozen)));
    assert_eq!(h, d.hash());
}

#[test]
fn cnn_variant_trains_and_scores_softly() {
    let mut c = CnnClassifier::<f64>::new(
        CnnConfig {
            embed_dim: 8,
            channels: 8,
            ..CnnConfig::desk(12)
        },
        2,
    )
    .unwrap();
    let mut opt = Adam::new(
        AdamConfig {
            lr: 1e-2,
            warmup_updates: 0,
            clip_norm: 0.0,
            ..AdamConfig::default()
        },
        &c.params,
    );
    let data = pools();
    let batch: Vec<(&[u32], StyleLabel)> = data.iter().map(|(x, s)| (x.as_slice(), *s)).collect();
    let first = c.pretrain_step(&batch, &mut opt).unwrap();
    let mut last = first;
    for _ in 0..40 {
        last = c.pretrain_step(&batch, &mut opt).unwrap();
    }
    assert!(last < first * 0.5, "{first} -> {last}");
    c.freeze().unwrap();
    let x = [9u32, 10, 11];
    let full = with_eos(&x);
    let mut probs = Tensor::<f64>::zeros(full.len(), 12);
    for (t, &tok) in full.iter().enumerate() {
        probs.row_mut(t)[tok as usize] = 1.0;
    }
    let mut g = Graph::new();
    let v = c.bind_frozen(&mut g);
    let p = g.constant(probs);
    let z = c.soft_logit(&mut g, &v, p, full.len(), &[full.len()]).unwrap();
    let hard = c.logits(&[&x]).unwrap()[0];
    assert!((g.value(z).item() - hard).abs() < 1e-12);
    assert!(hard > 0.0);
}
