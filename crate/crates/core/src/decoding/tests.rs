use super::*;
use crate::model::tests::tiny;
use proptest::prelude::*;

/// Vocab 9 leaves three content tokens plus `</s>` as outputs.
fn sharp_model(seed: u64) -> Seq2Seq<f64> {
    let mut m = Seq2Seq::<f64>::init(tiny(9, 8, 2, 1), seed).unwrap();
    for t in m.params.tensors.iter_mut() {
        t.data.iter_mut().for_each(|v| *v *= 3.0);
    }
    m
}

/// Every finished output of at most `max_len` steps.
fn all_outputs(max_len: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 1..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for tok in 6..9u32 {
                let mut s: Vec<u32> = p.clone();
                s.push(tok);
                next.push(s);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn exhaustive_best(m: &Seq2Seq<f64>, x: &[u32], c: StyleLabel, max_len: usize, alpha: f64) -> (Vec<u32>, f64) {
    let ys = all_outputs(max_len);
    let pairs: Vec<(&[u32], &[u32])> = ys.iter().map(|y| (x, y.as_slice())).collect();
    let lps = m.log_probs(&pairs, &vec![c; ys.len()]).unwrap();
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for (y, lp) in ys.into_iter().zip(lps) {
        let s = penalized(lp, y.len() + 1, alpha);
        if s > best.1 {
            best = (y, s);
        }
    }
    best
}

#[test]
fn saturating_beam_matches_exhaustive_enumeration() {
    assert_eq!(all_outputs(4).len(), 1 + 3 + 9 + 27);
    for seed in 0..50u64 {
        let m = sharp_model(seed);
        let x = [6 + (seed % 3) as u32, 7, 8];
        for alpha in [0.0, 1.0, 2.0] {
            let cfg = DecodeConfig {
                beam_size: 256,
                length_penalty: alpha,
                max_len: 4,
                mmi_lambda: None,
                n_best: 1,
            };
            let got = beam_search(&m, &TokenSeq(x.to_vec()), StyleLabel::Target, &cfg).unwrap().remove(0);
            let (want, score) = exhaustive_best(&m, &x, StyleLabel::Target, 4, alpha);
            assert!(got.finished);
            assert_eq!(got.tokens.ids(), want.as_slice(), "seed {seed} alpha {alpha}");
            assert!((got.score - score).abs() < 1e-9);
        }
    }
}

#[test]
fn beam_of_one_without_penalty_is_greedy() {
    for seed in 0..10u64 {
        let m = Seq2Seq::<f64>::init(tiny(14, 8, 2, 1), seed).unwrap();
        let x = [6u32, 9, 13, 7];
        for max_len in [1usize, 3, 10] {
            let cfg = DecodeConfig {
                beam_size: 1,
                length_penalty: 0.0,
                max_len,
                mmi_lambda: None,
                n_best: 1,
            };
            let b = beam_search(&m, &TokenSeq(x.to_vec()), StyleLabel::Source, &cfg).unwrap().remove(0);
            let g = m.greedy(&[&x], &[StyleLabel::Source], &[max_len]).unwrap().remove(0);
            assert_eq!((b.tokens, b.finished), (g.tokens, g.finished));
        }
    }
}

#[test]
fn hypothesis_log_probs_are_step_sums() {
    let m = sharp_model(3);
    let x = TokenSeq(vec![6, 8]);
    let cfg = DecodeConfig {
        max_len: 6,
        ..DecodeConfig::default()
    };
    let hyps = beam_search(&m, &x, StyleLabel::Target, &cfg).unwrap();
    assert!(!hyps.is_empty() && hyps.len() <= cfg.n_best);
    for w in hyps.windows(2) {
        assert!(w[0].score >= w[1].score);
    }
    for h in &hyps {
        assert!(h.finished);
        let lp = m.log_prob(&x, &h.tokens, StyleLabel::Target).unwrap();
        assert!((h.logp - lp).abs() < 1e-10);
        assert!((h.score - lp / ((h.tokens.len() + 1) as f64).powi(2)).abs() < 1e-10);
    }
}

#[test]
fn unfinished_fallback_is_flagged() {
    // a model that never wants </s>
    let mut m = sharp_model(0);
    let i = m.params.names.iter().position(|n| n == "out.b").unwrap();
    m.params.tensors[i].data[special::EOS as usize] = -1e4;
    let cfg = DecodeConfig {
        beam_size: 3,
        n_best: 3,
        max_len: 3,
        ..DecodeConfig::default()
    };
    let hyps = beam_search(&m, &TokenSeq(vec![6]), StyleLabel::Target, &cfg).unwrap();
    assert_eq!(hyps.len(), 1);
    assert!(!hyps[0].finished);
    assert_eq!(hyps[0].tokens.len(), 3);
    assert_eq!(hyps[0].steps(), 3);
}

#[test]
fn mixed_argmax_arithmetic() {
    // (fwd, bwd) = (-2, -10) and (-3, -4): lambda 0.5 gives -6 vs -3.5
    assert_eq!(argmax_mixed(&[-2.0, -3.0], &[-10.0, -4.0], 0.5), 1);
    assert_eq!(argmax_mixed(&[-2.0, -3.0], &[-10.0, -4.0], 1.0), 0);
    assert_eq!(argmax_mixed(&[-1.0, -1.0], &[-1.0, -1.0], 0.3), 0);
}

#[test]
fn rerank_matches_independent_rescoring() {
    let mut m = Seq2Seq::<f64>::init(tiny(14, 8, 2, 1), 5).unwrap();
    // make </s> likely enough to finish several hypotheses
    let i = m.params.names.iter().position(|n| n == "out.b").unwrap();
    m.params.tensors[i].data[special::EOS as usize] += 2.5;
    let x = TokenSeq(vec![7, 9, 11]);
    let cfg = DecodeConfig {
        max_len: 6,
        ..DecodeConfig::default()
    };
    let cands: Vec<TokenSeq> = beam_search(&m, &x, StyleLabel::Target, &cfg).unwrap().into_iter().map(|h| h.tokens).collect();
    assert!(cands.len() > 1);
    for lambda in [0.0, 0.3, 0.8, 1.0] {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, y) in cands.iter().enumerate() {
            let s = lambda * m.log_prob(&x, y, StyleLabel::Target).unwrap() + (1.0 - lambda) * m.log_prob(y, &x, StyleLabel::Source).unwrap();
            if s > best.1 {
                best = (i, s);
            }
        }
        assert_eq!(mmi_rerank(&m, &x, StyleLabel::Target, &cands, lambda).unwrap(), best.0);
    }
    assert!(matches!(mmi_rerank(&m, &x, StyleLabel::Target, &[], 0.5), Err(Error::Empty(_))));
}

#[test]
fn rerank_with_lambda_one_and_no_penalty_keeps_the_beam_top() {
    for seed in 0..5 {
        let m = sharp_model(seed);
        let x = TokenSeq(vec![6, 7]);
        let cfg = DecodeConfig {
            length_penalty: 0.0,
            max_len: 5,
            ..DecodeConfig::default()
        };
        let top = beam_search(&m, &x, StyleLabel::Target, &cfg).unwrap().remove(0);
        let with = decode(&m, &x, StyleLabel::Target, &DecodeConfig { mmi_lambda: Some(1.0), ..cfg }).unwrap();
        assert_eq!(top, with);
    }
}

#[test]
fn config_validation() {
    let ok = DecodeConfig::default();
    assert_eq!((ok.beam_size, ok.length_penalty), (10, 2.0));
    ok.validate().unwrap();
    assert!(DecodeConfig { beam_size: 0, ..ok.clone() }.validate().is_err());
    assert!(DecodeConfig { n_best: 11, ..ok.clone() }.validate().is_err());
    assert!(DecodeConfig { length_penalty: -1.0, ..ok.clone() }.validate().is_err());
    assert!(DecodeConfig { mmi_lambda: Some(2.0), ..ok }.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// The saturating beam is optimal, so no narrower beam beats it; and
    /// decoding is deterministic.
    #[test]
    fn no_beam_beats_the_saturating_beam(seed in 0u64..500, beam in 1usize..12, alpha in 0.0f64..3.0) {
        let m = sharp_model(seed);
        let x = TokenSeq(vec![6 + (seed % 3) as u32, 8]);
        let cfg = |beam_size| DecodeConfig { beam_size, length_penalty: alpha, max_len: 4, mmi_lambda: None, n_best: 1 };
        let full = beam_search(&m, &x, StyleLabel::Source, &cfg(256)).unwrap().remove(0);
        let narrow = beam_search(&m, &x, StyleLabel::Source, &cfg(beam)).unwrap().remove(0);
        prop_assert!(!narrow.finished || narrow.score <= full.score + 1e-12);
        prop_assert_eq!(narrow.clone(), beam_search(&m, &x, StyleLabel::Source, &cfg(beam)).unwrap().remove(0));
    }
}
