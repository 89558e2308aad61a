//! Style-conditioned transformer encoder-decoder.
//!
//! One parameter set serves both transfer directions. The encoder reads
//! `[c, x_1 .. x_n, </s>]` where `c` is the control token of the requested
//! output style; the decoder reads `[c, y_1 .. y_m]` and predicts
//! `[y_1 .. y_m, </s>]`.

use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Graph, Var};
use crate::bpe::{special, TokenSeq};
use crate::error::{Error, Result};
use crate::params::{Block, Builder, Dropout, Ln, ParamSet};
use crate::style::StyleLabel;
use crate::tensor::{argmax, log_softmax_in_place, matmul, Float, Tensor};
use crate::transformer::{block, ln, lin_rows, ln_rows, step_blocks, KvCache, Memory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub tie_weights: bool,
}

impl ModelConfig {
    /// 2+2 layers, 4 heads, width 128.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            enc_layers: 2,
            dec_layers: 2,
            n_heads: 4,
            embed_dim: 128,
            ffn_dim: 256,
            dropout: 0.1,
            max_positions: 66,
            tie_weights: true,
        }
    }

    /// 12+12 layers, 16 heads, width 1024.
    pub fn full_scale(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            enc_layers: 12,
            dec_layers: 12,
            n_heads: 16,
            embed_dim: 1024,
            ffn_dim: 4096,
            dropout: 0.1,
            max_positions: 1026,
            tie_weights: true,
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
        if self.enc_layers == 0 || self.dec_layers == 0 || self.ffn_dim == 0 {
            return bad("layer counts and ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_positions < 3 {
            return bad(format!("max_positions {} < 3", self.max_positions));
        }
        Ok(())
    }

    /// Longest sentence (in tokens) the model accepts on either side.
    pub fn max_len(&self) -> usize {
        self.max_positions - 2
    }
}

#[derive(Clone, Debug)]
struct Layout {
    tok: usize,
    pos_enc: usize,
    pos_dec: usize,
    enc: Vec<Block>,
    enc_ln: Ln,
    dec: Vec<Block>,
    dec_ln: Ln,
    out_w: Option<usize>,
    out_b: usize,
}

fn build<T: Float>(c: &ModelConfig, seed: Option<u64>) -> (Layout, ParamSet<T>) {
    let d = c.embed_dim;
    let std = 1.0 / (d as f64).sqrt();
    let mut b = Builder::new(seed);
    let tok = b.normal("embed.tok".into(), c.vocab_size, d, std);
    let pos_enc = b.normal("embed.pos_enc".into(), c.max_positions, d, std);
    let pos_dec = b.normal("embed.pos_dec".into(), c.max_positions, d, std);
    let enc = (0..c.enc_layers).map(|i| b.block(&format!("enc.{i}"), d, c.ffn_dim, false)).collect();
    let enc_ln = b.ln("enc.ln", d);
    let dec = (0..c.dec_layers).map(|i| b.block(&format!("dec.{i}"), d, c.ffn_dim, true)).collect();
    let dec_ln = b.ln("dec.ln", d);
    let out_w = (!c.tie_weights).then(|| b.normal("out.w".into(), c.vocab_size, d, std));
    let out_b = b.constant("out.b".into(), 1, c.vocab_size, 0.0);
    let layout = Layout {
        tok,
        pos_enc,
        pos_dec,
        enc,
        enc_ln,
        dec,
        dec_ln,
        out_w,
        out_b,
    };
    (layout, b.set)
}

/// Whether the decoder may emit `id`. Padding, unknown, BOS and the style
/// control tokens are never generated.
pub fn generatable(id: u32) -> bool {
    id == special::EOS || id as usize >= special::COUNT
}

/// Encoder output on the tape.
pub struct Encoded {
    pub out: Var,
    pub width: usize,
    pub valid: Vec<usize>,
}

/// Teacher-forced log-distributions `[batch*width, vocab]`.
pub struct Forced {
    pub logp: Var,
    pub width: usize,
    /// Gold next token per row position (PAD past the end).
    pub targets: Vec<usize>,
    /// Predicted positions per row, including the final `</s>`.
    pub lens: Vec<usize>,
}

/// Output of greedy decoding for one sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generated {
    pub tokens: TokenSeq,
    /// `false` when the length limit was hit before `</s>`.
    pub finished: bool,
}

impl Generated {
    /// Number of decoding steps taken, counting `</s>`.
    pub fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }
}

/// Per-step distributions of a greedy rollout, in plain values.
#[derive(Clone, Debug)]
pub struct Rollout<T> {
    /// One row per step, `[steps, vocab]`.
    pub probs: Tensor<T>,
    pub generated: Generated,
}

/// Per-step distributions of batched rollouts on the tape.
pub struct SoftRollout {
    pub probs: Var,
    pub width: usize,
    pub lens: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Seq2Seq<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    layout: Layout,
}

// the layout is derived from the config
impl<T: PartialEq> PartialEq for Seq2Seq<T> {
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config && self.params == o.params
    }
}

impl<T: Float> Seq2Seq<T> {
    /// Seeded initialization: normal weights with std `1/sqrt(fan_in)`,
    /// embeddings with std `1/sqrt(embed_dim)`, zero biases, unit norms.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, params) = build(&config, Some(seed));
        Ok(Seq2Seq { config, params, layout })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let (layout, mut template) = build::<T>(&config, None);
        template.assign(params)?;
        Ok(Seq2Seq {
            config,
            params: template,
            layout,
        })
    }

    pub fn cast<U: Float>(&self) -> Seq2Seq<U> {
        Seq2Seq {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.max_len() {
            return Err(Error::TooLong {
                len,
                max: self.max_len(),
            });
        }
        Ok(())
    }

    // ---- tape forward ------------------------------------------------------

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    pub fn encode(
        &self,
        g: &mut Graph<T>,
        v: &[Var],
        srcs: &[&[u32]],
        styles: &[StyleLabel],
        drop: &mut Dropout,
    ) -> Result<Encoded> {
        assert_eq!(srcs.len(), styles.len());
        for s in srcs {
            self.check_len(s.len())?;
        }
        let width = srcs.iter().map(|s| s.len()).max().unwrap_or(0) + 2;
        let mut ids = Vec::with_capacity(srcs.len() * width);
        let mut valid = Vec::with_capacity(srcs.len());
        for (s, c) in srcs.iter().zip(styles) {
            ids.push(c.token() as usize);
            ids.extend(s.iter().map(|&t| t as usize));
            ids.push(special::EOS as usize);
            ids.resize(ids.len() + width - s.len() - 2, special::PAD as usize);
            valid.push(s.len() + 2);
        }
        let l = &self.layout;
        let h = self.embed(g, v, l.pos_enc, &ids, width, drop);
        let mask = AttnMask {
            batch: srcs.len(),
            q_len: width,
            k_len: width,
            k_valid: valid.clone(),
            causal: false,
        };
        let mut h = h;
        for b in &l.enc {
            h = block(g, v, b, h, self.config.n_heads, mask.clone(), None, drop);
        }
        let out = ln(g, v, l.enc_ln, h);
        Ok(Encoded { out, width, valid })
    }

    fn embed(&self, g: &mut Graph<T>, v: &[Var], pos_table: usize, ids: &[usize], width: usize, drop: &mut Dropout) -> Var {
        let e = g.embedding(v[self.layout.tok], ids);
        let positions: Vec<usize> = (0..ids.len()).map(|i| i % width).collect();
        let p = g.embedding(v[pos_table], &positions);
        let h = g.add(e, p);
        drop.apply(g, h)
    }

    /// Decoder logits `[batch*width, vocab]` for the given input rows.
    pub fn decode(&self, g: &mut Graph<T>, v: &[Var], enc: &Encoded, inputs: &[Vec<u32>], drop: &mut Dropout) -> Result<Var> {
        assert_eq!(inputs.len(), enc.valid.len());
        let width = inputs.iter().map(Vec::len).max().unwrap_or(0);
        if width == 0 || inputs.iter().any(Vec::is_empty) {
            return Err(Error::Empty("decoder input"));
        }
        if width > self.config.max_positions {
            return Err(Error::TooLong {
                len: width,
                max: self.config.max_positions,
            });
        }
        let mut ids = Vec::with_capacity(inputs.len() * width);
        for row in inputs {
            ids.extend(row.iter().map(|&t| t as usize));
            ids.resize(ids.len() + width - row.len(), special::PAD as usize);
        }
        let l = &self.layout;
        let mut h = self.embed(g, v, l.pos_dec, &ids, width, drop);
        let self_mask = AttnMask {
            batch: inputs.len(),
            q_len: width,
            k_len: width,
            k_valid: inputs.iter().map(Vec::len).collect(),
            causal: true,
        };
        let cross_mask = AttnMask {
            batch: inputs.len(),
            q_len: width,
            k_len: enc.width,
            k_valid: enc.valid.clone(),
            causal: false,
        };
        for b in &l.dec {
            h = block(g, v, b, h, self.config.n_heads, self_mask.clone(), Some((enc.out, cross_mask.clone())), drop);
        }
        let h = ln(g, v, l.dec_ln, h);
        let w = v[l.out_w.unwrap_or(l.tok)];
        let logits = g.matmul(h, w, true);
        Ok(g.add_bias(logits, v[l.out_b]))
    }

    /// Teacher-forced pass: `log P(y_t | y_<t, x, c)` for every position.
    pub fn teacher_forced(
        &self,
        g: &mut Graph<T>,
        v: &[Var],
        srcs: &[&[u32]],
        tgts: &[&[u32]],
        styles: &[StyleLabel],
        drop: &mut Dropout,
    ) -> Result<Forced> {
        assert_eq!(srcs.len(), tgts.len());
        for t in tgts {
            self.check_len(t.len())?;
        }
        let enc = self.encode(g, v, srcs, styles, drop)?;
        let inputs: Vec<Vec<u32>> = tgts
            .iter()
            .zip(styles)
            .map(|(t, c)| std::iter::once(c.token()).chain(t.iter().copied()).collect())
            .collect();
        let logits = self.decode(g, v, &enc, &inputs, drop)?;
        let width = inputs.iter().map(Vec::len).max().unwrap_or(0);
        let mut targets = Vec::with_capacity(tgts.len() * width);
        for t in tgts {
            targets.extend(t.iter().map(|&x| x as usize));
            targets.push(special::EOS as usize);
            targets.resize(targets.len() + width - t.len() - 1, special::PAD as usize);
        }
        let logp = g.log_softmax(logits);
        Ok(Forced {
            logp,
            width,
            targets,
            lens: tgts.iter().map(|t| t.len() + 1).collect(),
        })
    }

    /// Negative log-likelihood per row, `[batch, 1]`; divided by the number
    /// of predicted tokens when `per_token`.
    pub fn row_nll(g: &mut Graph<T>, f: &Forced, per_token: bool) -> Var {
        let picked = g.pick(f.logp, f.targets.clone());
        let n = f.lens.len();
        let mut seg = Vec::with_capacity(n * f.width);
        let mut w = Vec::with_capacity(n * f.width);
        for (b, &len) in f.lens.iter().enumerate() {
            let scale = if per_token { -T::one() / T::f(len as f64) } else { -T::one() };
            for t in 0..f.width {
                seg.push(b);
                w.push(if t < len { scale } else { T::zero() });
            }
        }
        g.segment_sum(picked, seg, w, n)
    }

    /// `Σ_t log P(y_t | y_<t, x, c)` including the final `</s>`.
    pub fn log_prob(&self, x: &TokenSeq, y: &TokenSeq, c: StyleLabel) -> Result<f64> {
        Ok(self.log_probs(&[(x.ids(), y.ids())], &[c])?[0])
    }

    /// Batched, gradient-free [`Seq2Seq::log_prob`].
    pub fn log_probs(&self, pairs: &[(&[u32], &[u32])], styles: &[StyleLabel]) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let srcs: Vec<&[u32]> = pairs.iter().map(|p| p.0).collect();
        let tgts: Vec<&[u32]> = pairs.iter().map(|p| p.1).collect();
        let f = self.teacher_forced(&mut g, &v, &srcs, &tgts, styles, &mut Dropout::none())?;
        let nll = Self::row_nll(&mut g, &f, false);
        Ok(g.value(nll).data.iter().map(|&x| -x.as_f64()).collect())
    }

    /// Distributions of every step of a given rollout, recomputed on the tape
    /// by feeding `[c, ŷ_1 .. ŷ_{k-1}]` for a rollout of `k` steps.
    pub fn soft_rollout(
        &self,
        g: &mut Graph<T>,
        v: &[Var],
        srcs: &[&[u32]],
        styles: &[StyleLabel],
        gens: &[&Generated],
        drop: &mut Dropout,
    ) -> Result<SoftRollout> {
        let enc = self.encode(g, v, srcs, styles, drop)?;
        let lens: Vec<usize> = gens.iter().map(|r| r.steps()).collect();
        let inputs: Vec<Vec<u32>> = gens
            .iter()
            .zip(styles)
            .zip(&lens)
            .map(|((r, c), &k)| std::iter::once(c.token()).chain(r.tokens.ids()[..k - 1].iter().copied()).collect())
            .collect();
        let logits = self.decode(g, v, &enc, &inputs, drop)?;
        let probs = g.softmax(logits);
        Ok(SoftRollout {
            probs,
            width: lens.iter().copied().max().unwrap_or(0),
            lens,
        })
    }

    /// Greedy rollout of one sentence with its per-step distributions.
    pub fn rollout_distributions(&self, x: &TokenSeq, c: StyleLabel, max_len: usize) -> Result<Rollout<T>> {
        let generated = self.greedy(&[x.ids()], &[c], &[max_len])?.remove(0);
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let soft = self.soft_rollout(&mut g, &v, &[x.ids()], &[c], &[&generated], &mut Dropout::none())?;
        Ok(Rollout {
            probs: g.value(soft.probs).clone(),
            generated,
        })
    }

    // ---- cached inference --------------------------------------------------

    /// Encodes sources and precomputes cross-attention keys and values.
    pub(crate) fn memories(&self, srcs: &[&[u32]], styles: &[StyleLabel]) -> Result<Vec<Memory<T>>> {
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let enc = self.encode(&mut g, &v, srcs, styles, &mut Dropout::none())?;
        let out = g.value(enc.out);
        let d = self.config.embed_dim;
        let p = &self.params.tensors;
        Ok(enc
            .valid
            .iter()
            .enumerate()
            .map(|(b, &len)| {
                let rows = &out.data[b * enc.width * d..(b * enc.width + len) * d];
                let (mut keys, mut values) = (Vec::new(), Vec::new());
                for blk in &self.layout.dec {
                    let (_, cross) = blk.cross.expect("decoder blocks attend to the encoder");
                    keys.push(lin_rows(p, cross.k, rows, len));
                    values.push(lin_rows(p, cross.v, rows, len));
                }
                Memory { keys, values, len }
            })
            .collect())
    }

    pub(crate) fn new_cache(&self) -> KvCache<T> {
        KvCache::new(self.layout.dec.len())
    }

    /// Feeds one token to each sequence and returns next-token
    /// log-distributions `[n, vocab]`.
    pub(crate) fn step(&self, mems: &[&Memory<T>], caches: &mut [&mut KvCache<T>], tokens: &[u32]) -> Result<Vec<T>> {
        let d = self.config.embed_dim;
        let p = &self.params.tensors;
        let l = &self.layout;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (c, &t) in caches.iter().zip(tokens) {
            if c.len >= self.config.max_positions {
                return Err(Error::TooLong {
                    len: c.len + 1,
                    max: self.config.max_positions,
                });
            }
            let e = p[l.tok].row(t as usize);
            let pos = p[l.pos_dec].row(c.len);
            x.extend(e.iter().zip(pos).map(|(&a, &b)| a + b));
        }
        let h = step_blocks(p, &l.dec, self.config.n_heads, x, caches, Some(mems));
        let h = ln_rows(p, l.dec_ln, &h);
        let w = &p[l.out_w.unwrap_or(l.tok)];
        let v = self.config.vocab_size;
        let mut logits = matmul(&h, &w.data, tokens.len(), d, v, true);
        for row in logits.chunks_mut(v) {
            for (o, &b) in row.iter_mut().zip(&p[l.out_b].data) {
                *o += b;
            }
            log_softmax_in_place(row);
        }
        Ok(logits)
    }

    /// Greedy decoding. `max_len[i]` bounds the number of steps of row `i`,
    /// counting `</s>`.
    pub fn greedy(&self, srcs: &[&[u32]], styles: &[StyleLabel], max_len: &[usize]) -> Result<Vec<Generated>> {
        let n = srcs.len();
        let mems = self.memories(srcs, styles)?;
        let mut caches: Vec<KvCache<T>> = (0..n).map(|_| self.new_cache()).collect();
        let mut out: Vec<Generated> = (0..n)
            .map(|_| Generated {
                tokens: TokenSeq::default(),
                finished: false,
            })
            .collect();
        let mut last: Vec<u32> = styles.iter().map(|c| c.token()).collect();
        let mut active: Vec<usize> = (0..n).filter(|&i| max_len[i] > 0).collect();
        let vsize = self.config.vocab_size;
        while !active.is_empty() {
            let m: Vec<&Memory<T>> = active.iter().map(|&i| &mems[i]).collect();
            let toks: Vec<u32> = active.iter().map(|&i| last[i]).collect();
            let mut cs: Vec<&mut KvCache<T>> = caches
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| active.binary_search(i).is_ok())
                .map(|(_, c)| c)
                .collect();
            let logp = self.step(&m, &mut cs, &toks)?;
            let mut next = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                let tok = best_allowed(&logp[r * vsize..(r + 1) * vsize]);
                if tok == special::EOS {
                    out[i].finished = true;
                    continue;
                }
                out[i].tokens.0.push(tok);
                last[i] = tok;
                if out[i].tokens.len() < max_len[i] {
                    next.push(i);
                }
            }
            active = next;
        }
        Ok(out)
    }
}

/// Highest-scoring generatable token; ties go to the lowest id.
pub(crate) fn best_allowed<T: Float>(logp: &[T]) -> u32 {
    let mut masked: Vec<T> = logp.to_vec();
    for (i, v) in masked.iter_mut().enumerate() {
        if !generatable(i as u32) {
            *v = T::neg_infinity();
        }
    }
    argmax(&masked) as u32
}

/// Default rollout length budget for a source of `len` tokens, counting
/// `</s>`.
pub fn rollout_budget(len: usize, max_len: usize) -> usize {
    (len + len / 2 + 4).min(max_len)
}
