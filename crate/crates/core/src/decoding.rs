//! Beam search with a length penalty, and test-time MMI reranking.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::bpe::{special, TokenSeq};
use crate::error::{Error, Result};
use crate::model::{generatable, Seq2Seq};
use crate::style::StyleLabel;
use crate::tensor::Float;
use crate::transformer::KvCache;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Exponent α of the length normaliser `len^α`.
    pub length_penalty: f64,
    /// Step limit counting `</s>`; capped by the model.
    pub max_len: usize,
    /// Rerank the n-best list by `λ·fwd + (1−λ)·bwd` when set.
    pub mmi_lambda: Option<f64>,
    pub n_best: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 10,
            length_penalty: 2.0,
            max_len: 64,
            mmi_lambda: None,
            n_best: 10,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if !(self.length_penalty >= 0.0) {
            return Err(Error::Negative("length_penalty", self.length_penalty));
        }
        if self.n_best == 0 || self.n_best > self.beam_size {
            return Err(Error::Config(format!("n_best {} must be in 1..={}", self.n_best, self.beam_size)));
        }
        if let Some(l) = self.mmi_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::LambdaOutOfRange(l));
            }
        }
        Ok(())
    }
}

/// A decoded sequence. `tokens` never contains `</s>`; a finished
/// hypothesis ends with it implicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: TokenSeq,
    /// Sum of step log-probabilities, including `</s>` when finished.
    pub logp: f64,
    /// `logp / len^α` with `len` counting `</s>`.
    pub score: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    pub fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }
}

pub fn penalized(logp: f64, steps: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        logp
    } else {
        logp / (steps.max(1) as f64).powf(alpha)
    }
}

struct Live<T> {
    tokens: Vec<u32>,
    logp: f64,
    cache: KvCache<T>,
}

/// Beam search for one source. Returns up to `n_best` finished hypotheses
/// best first; when none finished, the best unfinished one alone.
pub fn beam_search<T: Float>(model: &Seq2Seq<T>, x: &TokenSeq, c: StyleLabel, config: &DecodeConfig) -> Result<Vec<BeamHypothesis>> {
    config.validate()?;
    let max_len = config.max_len.min(model.max_len());
    let alpha = config.length_penalty;
    let mems = model.memories(&[x.ids()], &[c])?;
    let mem = &mems[0];
    let vsize = model.config.vocab_size;
    let mut live = vec![Live {
        tokens: Vec::new(),
        logp: 0.0,
        cache: model.new_cache(),
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for step in 0..max_len {
        if live.is_empty() || finished.len() >= config.beam_size {
            break;
        }
        let toks: Vec<u32> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(c.token())).collect();
        let m = vec![mem; live.len()];
        let logp = {
            let mut cs: Vec<&mut KvCache<T>> = live.iter_mut().map(|h| &mut h.cache).collect();
            model.step(&m, &mut cs, &toks)?
        };
        // (cumulative, parent rank, token)
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * vsize);
        for (r, h) in live.iter().enumerate() {
            for (tok, &lp) in logp[r * vsize..(r + 1) * vsize].iter().enumerate() {
                if generatable(tok as u32) {
                    cands.push((h.logp + lp.as_f64(), r, tok as u32));
                }
            }
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        // `</s>` ranked within the first `beam_size` candidates finishes a
        // hypothesis; the best `beam_size` others stay live
        let mut next = Vec::with_capacity(config.beam_size);
        for (rank, (lp, r, tok)) in cands.into_iter().enumerate() {
            if next.len() == config.beam_size && rank >= config.beam_size {
                break;
            }
            let parent = &live[r];
            if tok == special::EOS {
                if rank >= config.beam_size {
                    continue;
                }
                finished.push(BeamHypothesis {
                    tokens: TokenSeq(parent.tokens.clone()),
                    logp: lp,
                    score: penalized(lp, parent.tokens.len() + 1, alpha),
                    finished: true,
                });
            } else if next.len() == config.beam_size {
                continue;
            } else if step + 1 < max_len {
                let mut tokens = parent.tokens.clone();
                tokens.push(tok);
                next.push(Live {
                    tokens,
                    logp: lp,
                    cache: parent.cache.clone(),
                });
            } else {
                // out of steps: keep only as an unfinished fallback
                next.push(Live {
                    tokens: parent.tokens.iter().copied().chain([tok]).collect(),
                    logp: lp,
                    cache: KvCache::default(),
                });
            }
        }
        live = next;
    }
    if finished.is_empty() {
        let best = live
            .into_iter()
            .map(|h| BeamHypothesis {
                score: penalized(h.logp, h.tokens.len(), alpha),
                tokens: TokenSeq(h.tokens),
                logp: h.logp,
                finished: false,
            })
            .fold(None::<BeamHypothesis>, |best, h| match best {
                Some(b) if b.score >= h.score => Some(b),
                _ => Some(h),
            });
        return Ok(best.into_iter().collect());
    }
    // stable: equal scores keep finishing order
    finished.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    finished.truncate(config.n_best);
    Ok(finished)
}

/// Index of the candidate maximising `λ·log P(y | x, c) + (1−λ)·log P(x | y, c̄)`;
/// ties go to the earlier candidate.
pub fn mmi_rerank<T: Float>(model: &Seq2Seq<T>, x: &TokenSeq, c: StyleLabel, candidates: &[TokenSeq], lambda: f64) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    let fwd_pairs: Vec<(&[u32], &[u32])> = candidates.iter().map(|y| (x.ids(), y.ids())).collect();
    let fwd = model.log_probs(&fwd_pairs, &vec![c; candidates.len()])?;
    let bwd = if lambda < 1.0 {
        let pairs: Vec<(&[u32], &[u32])> = candidates.iter().map(|y| (y.ids(), x.ids())).collect();
        model.log_probs(&pairs, &vec![c.opposite(); candidates.len()])?
    } else {
        vec![0.0; candidates.len()]
    };
    Ok(argmax_mixed(&fwd, &bwd, lambda))
}

/// First index of the maximum of `λ·f + (1−λ)·b`.
pub fn argmax_mixed(fwd: &[f64], bwd: &[f64], lambda: f64) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, (f, b)) in fwd.iter().zip(bwd).enumerate() {
        let s = lambda * f + (1.0 - lambda) * b;
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// Beam search followed by MMI reranking when configured.
pub fn decode<T: Float>(model: &Seq2Seq<T>, x: &TokenSeq, c: StyleLabel, config: &DecodeConfig) -> Result<BeamHypothesis> {
    let mut beam = beam_search(model, x, c, config)?;
    let pick = match config.mmi_lambda {
        Some(l) if beam.len() > 1 => {
            let cands: Vec<TokenSeq> = beam.iter().map(|h| h.tokens.clone()).collect();
            mmi_rerank(model, x, c, &cands, l)?
        }
        _ => 0,
    };
    Ok(beam.swap_remove(pick))
}

#[cfg(test)]
mod tests;
