//! Style discriminators.
//!
//! The main discriminator is a pair of decoder-only language models, one per
//! style. A sentence's style posterior is the two-way softmax of their
//! log-likelihood scores. Generated text is scored softly: each step's input
//! embedding is the expectation of the LM's embeddings under the generator's
//! distribution, and each step's log-likelihood is the expectation of the
//! LM's log-probabilities under that same distribution.

use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, AttnMask, Graph, Var};
use crate::bpe::{special, TokenSeq};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{Block, Builder, Dropout, Lin, Ln, ParamSet};
use crate::style::StyleLabel;
use crate::tensor::{Float, Tensor};
use crate::transformer::{block, lin, ln};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_positions: usize,
    /// Divide scores by the number of scored tokens.
    pub length_normalize: bool,
}

impl LmConfig {
    pub fn desk(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            n_layers: 2,
            n_heads: 4,
            embed_dim: 64,
            ffn_dim: 128,
            dropout: 0.1,
            max_positions: 66,
            length_normalize: true,
        }
    }

    /// 4 layers, 8 heads.
    pub fn full_scale(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            n_layers: 4,
            n_heads: 8,
            embed_dim: 512,
            ffn_dim: 2048,
            dropout: 0.1,
            max_positions: 1026,
            length_normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size <= special::COUNT {
            return bad(format!("vocab_size {} leaves no content tokens", self.vocab_size));
        }
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!("embed_dim {} not divisible by n_heads {}", self.embed_dim, self.n_heads));
        }
        if self.n_layers == 0 || self.ffn_dim == 0 || self.max_positions < 2 {
            return bad("n_layers, ffn_dim must be positive and max_positions >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LmLayout {
    tok: usize,
    pos: usize,
    blocks: Vec<Block>,
    ln: Ln,
    out_b: usize,
}

fn build_lm<T: Float>(c: &LmConfig, prefix: &str, seed: Option<u64>) -> (LmLayout, ParamSet<T>) {
    let d = c.embed_dim;
    let std = 1.0 / (d as f64).sqrt();
    let mut b = Builder::new(seed);
    let tok = b.normal(format!("{prefix}.tok"), c.vocab_size, d, std);
    let pos = b.normal(format!("{prefix}.pos"), c.max_positions, d, std);
    let blocks = (0..c.n_layers).map(|i| b.block(&format!("{prefix}.{i}"), d, c.ffn_dim, false)).collect();
    let ln = b.ln(&format!("{prefix}.ln"), d);
    let out_b = b.constant(format!("{prefix}.out.b"), 1, c.vocab_size, 0.0);
    (LmLayout { tok, pos, blocks, ln, out_b }, b.set)
}

/// Decoder-only transformer language model with tied output embeddings.
#[derive(Clone, Debug)]
pub struct LanguageModel<T> {
    pub config: LmConfig,
    pub params: ParamSet<T>,
    layout: LmLayout,
}

impl<T: Float> LanguageModel<T> {
    pub fn init(config: LmConfig, prefix: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, params) = build_lm(&config, prefix, Some(seed));
        Ok(LanguageModel { config, params, layout })
    }

    pub fn from_params(config: LmConfig, prefix: &str, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let (layout, mut template) = build_lm::<T>(&config, prefix, None);
        template.assign(params)?;
        Ok(LanguageModel {
            config,
            params: template,
            layout,
        })
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width > self.config.max_positions {
            return Err(Error::TooLong {
                len: width,
                max: self.config.max_positions,
            });
        }
        Ok(())
    }

    /// Next-token log-distributions for input embeddings `[batch*width, dim]`.
    fn log_dists(&self, g: &mut Graph<T>, v: &[Var], input: Var, width: usize, lens: &[usize], drop: &mut Dropout) -> Var {
        let positions: Vec<usize> = (0..lens.len() * width).map(|i| i % width).collect();
        let p = g.embedding(v[self.layout.pos], &positions);
        let h = g.add(input, p);
        let mut h = drop.apply(g, h);
        let mask = AttnMask {
            batch: lens.len(),
            q_len: width,
            k_len: width,
            k_valid: lens.to_vec(),
            causal: true,
        };
        for b in &self.layout.blocks {
            h = block(g, v, b, h, self.config.n_heads, mask.clone(), None, drop);
        }
        let h = ln(g, v, self.layout.ln, h);
        let logits = g.matmul(h, v[self.layout.tok], true);
        let logits = g.add_bias(logits, v[self.layout.out_b]);
        g.log_softmax(logits)
    }

    fn row_weights(lens: &[usize], width: usize, normalize: bool) -> (Vec<usize>, Vec<T>) {
        let mut seg = Vec::with_capacity(lens.len() * width);
        let mut w = Vec::with_capacity(lens.len() * width);
        for (b, &n) in lens.iter().enumerate() {
            let scale = if normalize { T::one() / T::f(n as f64) } else { T::one() };
            for t in 0..width {
                seg.push(b);
                w.push(if t < n { scale } else { T::zero() });
            }
        }
        (seg, w)
    }

    /// `Σ_i log P(x_i | <s>, x_<i)` for each non-empty row, `[batch, 1]`.
    pub fn score_rows(&self, g: &mut Graph<T>, v: &[Var], rows: &[&[u32]], normalize: bool, drop: &mut Dropout) -> Result<Var> {
        if rows.iter().any(|r| r.is_empty()) {
            return Err(Error::Empty("sentence to score"));
        }
        let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        self.check_width(width)?;
        let mut ids = Vec::with_capacity(rows.len() * width);
        let mut targets = Vec::with_capacity(rows.len() * width);
        for r in rows {
            ids.push(special::BOS as usize);
            ids.extend(r[..r.len() - 1].iter().map(|&t| t as usize));
            targets.extend(r.iter().map(|&t| t as usize));
            for _ in r.len()..width {
                ids.push(special::PAD as usize);
                targets.push(special::PAD as usize);
            }
        }
        let lens: Vec<usize> = rows.iter().map(|r| r.len()).collect();
        let e = g.embedding(v[self.layout.tok], &ids);
        let logq = self.log_dists(g, v, e, width, &lens, drop);
        let picked = g.pick(logq, targets);
        let (seg, w) = Self::row_weights(&lens, width, normalize);
        Ok(g.segment_sum(picked, seg, w, rows.len()))
    }

    /// Soft counterpart of [`LanguageModel::score_rows`]: row `b*width + t`
    /// of `probs` is the distribution over token `t` of sequence `b`, which
    /// has `lens[b]` steps.
    pub fn soft_scores(&self, g: &mut Graph<T>, v: &[Var], probs: Var, width: usize, lens: &[usize], normalize: bool) -> Result<Var> {
        self.check_width(width)?;
        let vocab = self.config.vocab_size;
        let n = lens.len();
        let mut idx = Vec::with_capacity(n * width);
        let mut bos = vec![T::zero(); n * width * vocab];
        let mut mask = vec![T::zero(); n * width * vocab];
        for (b, &k) in lens.iter().enumerate() {
            for t in 0..width {
                let r = b * width + t;
                idx.push((t >= 1 && t < k).then(|| r - 1));
                if t == 0 {
                    bos[r * vocab + special::BOS as usize] = T::one();
                }
                if t < k {
                    mask[r * vocab..(r + 1) * vocab].iter_mut().for_each(|m| *m = T::one());
                }
            }
        }
        let shifted = g.gather_rows(probs, idx);
        let bos = g.constant(Tensor::from_vec(n * width, vocab, bos));
        let inputs = g.add(shifted, bos);
        let e = g.matmul(inputs, v[self.layout.tok], false);
        let logq = self.log_dists(g, v, e, width, lens, &mut Dropout::none());
        let p = g.mul_const(probs, mask);
        let terms = g.mul(p, logq);
        let per_step = g.row_sum(terms);
        let (seg, w) = Self::row_weights(lens, width, normalize);
        Ok(g.segment_sum(per_step, seg, w, n))
    }

    /// Log-score of `x` (no gradient), normalized per the config.
    pub fn lm_score(&self, x: &[u32]) -> Result<f64> {
        let mut g = Graph::new();
        let v = self.params.bind(&mut g, false);
        let s = self.score_rows(&mut g, &v, &[x], self.config.length_normalize, &mut Dropout::none())?;
        Ok(g.value(s).item().as_f64())
    }
}

/// Sentence form scored by the classifiers: tokens followed by `</s>`.
pub fn with_eos(x: &[u32]) -> Vec<u32> {
    x.iter().copied().chain(std::iter::once(special::EOS)).collect()
}

/// Binary style classifier usable inside a differentiable loss.
pub trait StyleClassifier<T: Float> {
    fn is_pretrained(&self) -> bool;
    fn is_frozen(&self) -> bool;
    /// Puts the parameters on the tape as constants.
    fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var>;
    /// Log-odds of TARGET for soft sequences, `[batch, 1]`.
    fn soft_logit(&self, g: &mut Graph<T>, v: &[Var], probs: Var, width: usize, lens: &[usize]) -> Result<Var>;
    /// Log-odds of TARGET for sentences.
    fn logits(&self, xs: &[&[u32]]) -> Result<Vec<f64>>;
    fn hash(&self) -> String;

    /// `P(TARGET | x)` for each sentence.
    fn target_probs(&self, xs: &[&[u32]]) -> Result<Vec<f64>> {
        if !self.is_pretrained() {
            return Err(Error::NotPretrained);
        }
        Ok(self.logits(xs)?.into_iter().map(sigmoid).collect())
    }
}

/// Two language models, indexed by [`StyleLabel::index`].
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub lms: [LanguageModel<T>; 2],
    pretrained: bool,
    frozen: bool,
}

const LM_PREFIX: [&str; 2] = ["lm_source", "lm_target"];

impl<T: Float> Discriminator<T> {
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        Ok(Discriminator {
            lms: [
                LanguageModel::init(config.clone(), LM_PREFIX[0], seed)?,
                LanguageModel::init(config, LM_PREFIX[1], seed.wrapping_add(1))?,
            ],
            pretrained: false,
            frozen: false,
        })
    }

    pub fn from_parts(config: LmConfig, params: [ParamSet<T>; 2], pretrained: bool, frozen: bool) -> Result<Self> {
        let [s, t] = params;
        Ok(Discriminator {
            lms: [
                LanguageModel::from_params(config.clone(), LM_PREFIX[0], s)?,
                LanguageModel::from_params(config, LM_PREFIX[1], t)?,
            ],
            pretrained,
            frozen,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.lms[0].config
    }

    fn normalize(&self) -> bool {
        self.config().length_normalize
    }

    pub fn lm(&self, style: StyleLabel) -> &LanguageModel<T> {
        &self.lms[style.index()]
    }

    /// Log-score of `x` under the LM of `style`.
    pub fn lm_score(&self, x: &[u32], style: StyleLabel) -> Result<f64> {
        self.lm(style).lm_score(x)
    }

    /// Sentence scores `[s_S, s_T]`.
    pub fn sentence_scores(&self, xs: &[&[u32]]) -> Result<Vec<[f64; 2]>> {
        let rows: Vec<Vec<u32>> = xs.iter().map(|x| with_eos(x)).collect();
        let refs: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
        let mut out = vec![[0.0; 2]; xs.len()];
        for style in StyleLabel::ALL {
            let lm = self.lm(style);
            let mut g = Graph::new();
            let v = lm.params.bind(&mut g, false);
            let s = lm.score_rows(&mut g, &v, &refs, self.normalize(), &mut Dropout::none())?;
            for (o, &val) in out.iter_mut().zip(&g.value(s).data) {
                o[style.index()] = val.as_f64();
            }
        }
        Ok(out)
    }

    /// `P(TARGET | x)` for one sentence.
    pub fn classifier_prob(&self, x: &TokenSeq) -> Result<f64> {
        Ok(self.target_probs(&[x.ids()])?[0])
    }

    /// `P(TARGET | ·)` of a soft sequence given as `[steps, vocab]`.
    pub fn classifier_prob_soft(&self, probs: &Tensor<T>) -> Result<f64> {
        if !self.pretrained {
            return Err(Error::NotPretrained);
        }
        let mut g = Graph::new();
        let v = self.bind_frozen(&mut g);
        let p = g.constant(probs.clone());
        let z = self.soft_logit(&mut g, &v, p, probs.rows, &[probs.rows])?;
        Ok(sigmoid(g.value(z).item().as_f64()))
    }

    /// One next-token cross-entropy step of each LM on its own style's
    /// sentences; returns the mean loss per token.
    pub fn pretrain_step(&mut self, batch: &[(&[u32], StyleLabel)], opts: &mut [Adam<T>; 2], drop: &mut Dropout) -> Result<f64> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        let (mut total, mut tokens) = (0.0, 0usize);
        for style in StyleLabel::ALL {
            let rows: Vec<Vec<u32>> = batch.iter().filter(|(_, s)| *s == style).map(|(x, _)| with_eos(x)).collect();
            if rows.is_empty() {
                continue;
            }
            let n_tok: usize = rows.iter().map(Vec::len).sum();
            let refs: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
            let lm = &mut self.lms[style.index()];
            let mut g = Graph::new();
            let v = lm.params.bind(&mut g, true);
            let s = lm.score_rows(&mut g, &v, &refs, false, drop)?;
            let sum = g.sum(s);
            let loss = g.scale(sum, -T::one() / T::f(n_tok as f64));
            g.backward(loss);
            total += -g.value(sum).item().as_f64();
            tokens += n_tok;
            let grads = lm.params.grads(&g, &v);
            opts[style.index()].update(&mut lm.params, &grads);
        }
        if tokens == 0 {
            return Err(Error::Empty("pretraining batch"));
        }
        self.pretrained = true;
        Ok(total / tokens as f64)
    }

    pub fn mark_pretrained(&mut self) {
        self.pretrained = true;
    }

    /// Makes the parameters immutable. Calling it again is a no-op.
    pub fn freeze(&mut self) -> Result<()> {
        if !self.pretrained {
            return Err(Error::NotPretrained);
        }
        self.frozen = true;
        Ok(())
    }
}

impl<T: Float> StyleClassifier<T> for Discriminator<T> {
    fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        let mut v = self.lms[0].params.bind(g, false);
        v.extend(self.lms[1].params.bind(g, false));
        v
    }

    fn soft_logit(&self, g: &mut Graph<T>, v: &[Var], probs: Var, width: usize, lens: &[usize]) -> Result<Var> {
        let n0 = self.lms[0].params.len();
        let (vs, vt) = v.split_at(n0);
        let s = self.lms[0].soft_scores(g, vs, probs, width, lens, self.normalize())?;
        let t = self.lms[1].soft_scores(g, vt, probs, width, lens, self.normalize())?;
        Ok(g.sub(t, s))
    }

    fn logits(&self, xs: &[&[u32]]) -> Result<Vec<f64>> {
        Ok(self.sentence_scores(xs)?.into_iter().map(|[s, t]| t - s).collect())
    }

    fn hash(&self) -> String {
        let mut joined = self.lms[0].params.clone();
        joined.names.extend(self.lms[1].params.names.iter().cloned());
        joined.tensors.extend(self.lms[1].params.tensors.iter().cloned());
        joined.hash()
    }
}

/// Two-way softmax over log-scores: `P(T) = e^{s_T} / (e^{s_T} + e^{s_S})`.
pub fn two_way_softmax(s_source: f64, s_target: f64) -> [f64; 2] {
    let p_t = sigmoid(s_target - s_source);
    [sigmoid(s_source - s_target), p_t]
}

// ---- convolutional variant -------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub channels: usize,
    pub n_layers: usize,
    /// Odd convolution width.
    pub kernel: usize,
    pub max_positions: usize,
}

impl CnnConfig {
    pub fn desk(vocab_size: usize) -> Self {
        CnnConfig {
            vocab_size,
            embed_dim: 64,
            channels: 64,
            n_layers: 3,
            kernel: 3,
            max_positions: 66,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.n_layers == 0 || self.channels == 0 || self.embed_dim == 0 {
            return Err(Error::Config("cnn needs an odd kernel and positive sizes".into()));
        }
        if self.vocab_size <= special::COUNT {
            return Err(Error::Config(format!("vocab_size {} leaves no content tokens", self.vocab_size)));
        }
        Ok(())
    }
}

/// Convolutional binary style classifier over (soft) token embeddings with
/// mean pooling over time.
#[derive(Clone, Debug)]
pub struct CnnClassifier<T> {
    pub config: CnnConfig,
    pub params: ParamSet<T>,
    tok: usize,
    convs: Vec<Lin>,
    out: Lin,
    pretrained: bool,
    frozen: bool,
}

impl<T: Float> CnnClassifier<T> {
    fn build(config: CnnConfig, seed: Option<u64>) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(seed);
        let tok = b.normal("cnn.tok".into(), config.vocab_size, config.embed_dim, 1.0 / (config.embed_dim as f64).sqrt());
        let mut convs = Vec::new();
        let mut width = config.embed_dim;
        for i in 0..config.n_layers {
            convs.push(b.lin(&format!("cnn.conv{i}"), width * config.kernel, config.channels));
            width = config.channels;
        }
        let out = b.lin("cnn.out", config.channels, 1);
        Ok(CnnClassifier {
            config,
            params: b.set,
            tok,
            convs,
            out,
            pretrained: false,
            frozen: false,
        })
    }

    pub fn new(config: CnnConfig, seed: u64) -> Result<Self> {
        Self::build(config, Some(seed))
    }

    pub fn from_parts(config: CnnConfig, params: ParamSet<T>, pretrained: bool, frozen: bool) -> Result<Self> {
        let mut c = Self::build(config, None)?;
        c.params.assign(params)?;
        c.pretrained = pretrained;
        c.frozen = frozen;
        Ok(c)
    }

    fn logit_from(&self, g: &mut Graph<T>, v: &[Var], emb: Var, width: usize, lens: &[usize]) -> Var {
        let mut h = emb;
        for c in &self.convs {
            let u = g.unfold(h, self.config.kernel, width, lens.to_vec());
            let z = lin(g, v, *c, u);
            h = g.relu(z);
        }
        let (seg, w): (Vec<usize>, Vec<T>) = lens
            .iter()
            .enumerate()
            .flat_map(|(b, &k)| (0..width).map(move |t| (b, if t < k { T::one() / T::f(k as f64) } else { T::zero() })))
            .unzip();
        let pooled = g.segment_sum(h, seg, w, lens.len());
        lin(g, v, self.out, pooled)
    }

    fn hard_logits(&self, g: &mut Graph<T>, v: &[Var], xs: &[&[u32]]) -> Var {
        let rows: Vec<Vec<u32>> = xs.iter().map(|x| with_eos(x)).collect();
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * width);
        for r in &rows {
            ids.extend(r.iter().map(|&t| t as usize));
            ids.resize(ids.len() + width - r.len(), special::PAD as usize);
        }
        let lens: Vec<usize> = rows.iter().map(Vec::len).collect();
        let e = g.embedding(v[self.tok], &ids);
        self.logit_from(g, v, e, width, &lens)
    }

    /// One logistic-loss step on labeled sentences; returns the mean loss.
    pub fn pretrain_step(&mut self, batch: &[(&[u32], StyleLabel)], opt: &mut Adam<T>) -> Result<f64> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        if batch.is_empty() {
            return Err(Error::Empty("pretraining batch"));
        }
        let mut g = Graph::new();
        let v = self.params.bind(&mut g, true);
        let xs: Vec<&[u32]> = batch.iter().map(|b| b.0).collect();
        let z = self.hard_logits(&mut g, &v, &xs);
        // softplus(-z) for TARGET rows, softplus(z) for SOURCE rows
        let sign = batch.iter().map(|b| if b.1 == StyleLabel::Target { -T::one() } else { T::one() }).collect();
        let signed = g.mul_const(z, sign);
        let l = g.softplus(signed);
        let sum = g.sum(l);
        let loss = g.scale(sum, T::one() / T::f(batch.len() as f64));
        g.backward(loss);
        let grads = self.params.grads(&g, &v);
        opt.update(&mut self.params, &grads);
        self.pretrained = true;
        Ok(g.value(loss).item().as_f64())
    }

    pub fn freeze(&mut self) -> Result<()> {
        if !self.pretrained {
            return Err(Error::NotPretrained);
        }
        self.frozen = true;
        Ok(())
    }
}

impl<T: Float> StyleClassifier<T> for CnnClassifier<T> {
    fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.bind(g, false)
    }

    fn soft_logit(&self, g: &mut Graph<T>, v: &[Var], probs: Var, width: usize, lens: &[usize]) -> Result<Var> {
        let e = g.matmul(probs, v[self.tok], false);
        Ok(self.logit_from(g, v, e, width, lens))
    }

    fn logits(&self, xs: &[&[u32]]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = self.params.bind(&mut g, false);
        let z = self.hard_logits(&mut g, &v, xs);
        Ok(g.value(z).data.iter().map(|x| x.as_f64()).collect())
    }

    fn hash(&self) -> String {
        self.params.hash()
    }
}

#[cfg(test)]
mod tests;
