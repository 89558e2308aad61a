//! Corpus BLEU, style accuracy, G-score and perplexity.

use std::collections::HashMap;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bpe::{MergeTable, TokenSeq};
use crate::decoding::{decode as decode_one, DecodeConfig};
use crate::corpus::ParallelExample;
use crate::discriminator::StyleClassifier;
use crate::error::{format_err, Error, Result};
use crate::model::Seq2Seq;
use crate::style::{Direction, StyleLabel};
use crate::tensor::Float;

pub const MAX_ORDER: usize = 4;

/// Pooled n-gram statistics; shards can be summed before scoring.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    /// Clipped matches per order.
    pub matches: [u64; MAX_ORDER],
    /// Hypothesis n-grams per order.
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

fn ngram_counts<W: Eq + Hash>(words: &[W], n: usize) -> HashMap<&[W], u64> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

impl BleuStats {
    pub fn of_pair<W: Eq + Hash>(hyp: &[W], reference: &[W]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len() as u64,
            ref_len: reference.len() as u64,
            ..BleuStats::default()
        };
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1) as u64;
            s.matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    pub fn add(&mut self, o: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    pub fn precision(&self, n: usize) -> f64 {
        if self.totals[n - 1] == 0 {
            0.0
        } else {
            self.matches[n - 1] as f64 / self.totals[n - 1] as f64
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// BLEU in `[0, 100]`, unsmoothed: any order without matches gives 0.
    pub fn score(&self) -> f64 {
        if self.matches.iter().any(|&m| m == 0) {
            return 0.0;
        }
        let log_mean = (1..=MAX_ORDER).map(|n| self.precision(n).ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * self.brevity_penalty() * log_mean.exp()
    }
}

/// Corpus BLEU-4 with one reference per hypothesis.
pub fn corpus_bleu<W: Eq + Hash>(hyps: &[Vec<W>], refs: &[Vec<W>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::LineCountMismatch(hyps.len(), refs.len()));
    }
    if hyps.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        stats.add(&BleuStats::of_pair(h, r));
    }
    Ok(stats.score())
}

/// Corpus BLEU on whitespace-separated words.
pub fn text_bleu<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<f64> {
    corpus_bleu(&split_words(hyps), &split_words(refs))
}

fn split_words<S: AsRef<str>>(v: &[S]) -> Vec<Vec<&str>> {
    v.iter().map(|s| s.as_ref().split_whitespace().collect()).collect()
}

/// Percentage of `hyps` the classifier places in `target` with probability
/// strictly above one half.
pub fn style_accuracy<T: Float, C: StyleClassifier<T>>(hyps: &[TokenSeq], target: StyleLabel, classifier: &C) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Empty("hypothesis set"));
    }
    let xs: Vec<&[u32]> = hyps.iter().map(TokenSeq::ids).collect();
    let p_target = classifier.target_probs(&xs)?;
    let hits = p_target
        .iter()
        .filter(|&&p| match target {
            StyleLabel::Target => p > 0.5,
            StyleLabel::Source => 1.0 - p > 0.5,
        })
        .count();
    Ok(100.0 * hits as f64 / hyps.len() as f64)
}

pub fn g_score(accuracy: f64, bleu: f64) -> Result<f64> {
    for (name, v) in [("accuracy", accuracy), ("bleu", bleu)] {
        if v < 0.0 || v.is_nan() {
            return Err(Error::Negative(name, v));
        }
    }
    Ok((accuracy * bleu).sqrt())
}

/// `exp(total NLL / total predicted tokens)` under teacher forcing; `</s>`
/// counts as a predicted token.
pub fn perplexity<T: Float>(model: &Seq2Seq<T>, data: &[ParallelExample], direction: Direction) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let (mut nll, mut tokens) = (0.0, 0usize);
    for chunk in data.chunks(32) {
        let pairs: Vec<(&[u32], &[u32])> = chunk
            .iter()
            .map(|e| match direction {
                Direction::SourceToTarget => (e.src.ids(), e.tgt.ids()),
                Direction::TargetToSource => (e.tgt.ids(), e.src.ids()),
            })
            .collect();
        let lps = model.log_probs(&pairs, &vec![direction.to(); pairs.len()])?;
        nll -= lps.iter().sum::<f64>();
        tokens += pairs.iter().map(|p| p.1.len() + 1).sum::<usize>();
    }
    Ok((nll / tokens as f64).exp())
}

/// Decodes every source of `data` in `direction`.
pub fn transfer_corpus<T: Float>(model: &Seq2Seq<T>, data: &[ParallelExample], direction: Direction, decode: &DecodeConfig) -> Result<Vec<TokenSeq>> {
    data.iter()
        .map(|e| {
            let x = match direction {
                Direction::SourceToTarget => &e.src,
                Direction::TargetToSource => &e.tgt,
            };
            Ok(decode_one(model, x, direction.to(), decode)?.tokens)
        })
        .collect()
}

/// Word-level BLEU of `hyps` against the reference side of `data`, both
/// detokenized with `table`.
pub fn detok_bleu(table: &MergeTable, hyps: &[TokenSeq], data: &[ParallelExample], direction: Direction) -> Result<f64> {
    let hyp_text: Vec<String> = hyps.iter().map(|h| table.decode(h)).collect::<Result<_>>()?;
    let ref_text: Vec<String> = data
        .iter()
        .map(|e| match direction {
            Direction::SourceToTarget => table.decode(&e.tgt),
            Direction::TargetToSource => table.decode(&e.src),
        })
        .collect::<Result<_>>()?;
    text_bleu(&hyp_text, &ref_text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub accuracy: Option<f64>,
    pub g_score: Option<f64>,
    pub perplexity: Option<f64>,
    pub direction: Direction,
    pub n_sentences: usize,
    pub config_hash: String,
}

impl EvalReport {
    /// Fills in the G-score when accuracy is known.
    pub fn new(bleu: f64, accuracy: Option<f64>, perplexity: Option<f64>, direction: Direction, n_sentences: usize, config_hash: String) -> Result<Self> {
        let g_score = accuracy.map(|a| g_score(a, bleu)).transpose()?;
        let r = EvalReport {
            bleu,
            accuracy,
            g_score,
            perplexity,
            direction,
            n_sentences,
            config_hash,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let values = [Some(self.bleu), self.accuracy, self.g_score, self.perplexity];
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(format_err("eval report", "non-finite value"));
        }
        if self.g_score.is_some() != self.accuracy.is_some() {
            return Err(format_err("eval report", "g_score requires accuracy"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
