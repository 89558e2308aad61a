//! Named parameter storage shared by the generator and the language models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::bpe::hex_digest;
use crate::error::{format_err, Result};
use crate::tensor::{Float, Tensor};

/// An ordered list of named tensors. Order is part of the format: layouts
/// address tensors by position.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Float> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Float> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect()
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Puts every tensor on the tape, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Gradients of the bound leaves `vars`, zero where none flowed.
    pub fn grads(&self, g: &Graph<T>, vars: &[Var]) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| match g.grad(v) {
                Some(d) => Tensor::from_vec(t.rows, t.cols, d.to_vec()),
                None => Tensor::zeros(t.rows, t.cols),
            })
            .collect()
    }

    /// Little-endian bytes of every tensor in order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.count() * T::DTYPE.size());
        for t in &self.tensors {
            for &v in &t.data {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn hash(&self) -> String {
        let mut buf = Vec::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            buf.extend_from_slice(n.as_bytes());
            buf.extend_from_slice(&(t.rows as u64).to_le_bytes());
            buf.extend_from_slice(&(t.cols as u64).to_le_bytes());
        }
        buf.extend(self.to_bytes());
        hex_digest(&buf)
    }

    /// Replaces all values, checking names and shapes against `self`.
    pub fn assign(&mut self, other: ParamSet<T>) -> Result<()> {
        if other.names != self.names {
            return Err(format_err("params", "parameter names do not match the layout"));
        }
        for (n, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if (a.rows, a.cols) != (b.rows, b.cols) {
                return Err(format_err(
                    "params",
                    format!("{n}: shape {}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols),
                ));
            }
        }
        self.tensors = other.tensors;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Lin {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Ln {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Attn {
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
}

/// Pre-LN transformer block; `cross` is present in decoder blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Block {
    pub ln1: Ln,
    pub attn: Attn,
    pub cross: Option<(Ln, Attn)>,
    pub ln2: Ln,
    pub ff1: Lin,
    pub ff2: Lin,
}

/// Allocates tensors in declaration order. Without an rng every tensor is
/// zero, which is how layouts are rebuilt before loading stored values.
pub(crate) struct Builder<T> {
    pub set: ParamSet<T>,
    rng: Option<ChaCha8Rng>,
}

impl<T: Float> Builder<T> {
    pub fn new(seed: Option<u64>) -> Self {
        Builder {
            set: ParamSet::default(),
            rng: seed.map(ChaCha8Rng::seed_from_u64),
        }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.set.names.push(name);
        self.set.tensors.push(t);
        self.set.tensors.len() - 1
    }

    pub fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> usize {
        let t = match &mut self.rng {
            Some(rng) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| T::f(dist.sample(rng))).collect())
            }
            None => Tensor::zeros(rows, cols),
        };
        self.push(name, t)
    }

    pub fn constant(&mut self, name: String, rows: usize, cols: usize, v: f64) -> usize {
        let fill = if self.rng.is_some() { T::f(v) } else { T::zero() };
        self.push(name, Tensor::full(rows, cols, fill))
    }

    pub fn lin(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Lin {
        Lin {
            w: self.normal(format!("{name}.w"), fan_in, fan_out, 1.0 / (fan_in as f64).sqrt()),
            b: self.constant(format!("{name}.b"), 1, fan_out, 0.0),
        }
    }

    pub fn ln(&mut self, name: &str, dim: usize) -> Ln {
        Ln {
            g: self.constant(format!("{name}.g"), 1, dim, 1.0),
            b: self.constant(format!("{name}.b"), 1, dim, 0.0),
        }
    }

    pub fn attn(&mut self, name: &str, dim: usize) -> Attn {
        Attn {
            q: self.lin(&format!("{name}.q"), dim, dim),
            k: self.lin(&format!("{name}.k"), dim, dim),
            v: self.lin(&format!("{name}.v"), dim, dim),
            o: self.lin(&format!("{name}.o"), dim, dim),
        }
    }

    pub fn block(&mut self, name: &str, dim: usize, ffn: usize, cross: bool) -> Block {
        let ln1 = self.ln(&format!("{name}.ln1"), dim);
        let attn = self.attn(&format!("{name}.self"), dim);
        let cross = cross.then(|| (self.ln(&format!("{name}.lnc"), dim), self.attn(&format!("{name}.cross"), dim)));
        let ln2 = self.ln(&format!("{name}.ln2"), dim);
        let ff1 = self.lin(&format!("{name}.ff1"), dim, ffn);
        let ff2 = self.lin(&format!("{name}.ff2"), ffn, dim);
        Block {
            ln1,
            attn,
            cross,
            ln2,
            ff1,
            ff2,
        }
    }
}

/// Per-pass dropout. Masks come from an rng keyed by `(seed, step, tag)` so
/// that extra or missing passes never shift the masks of other passes.
pub struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn none() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn new(p: f64, seed: u64, step: u64, tag: u64) -> Self {
        if p <= 0.0 {
            return Dropout::none();
        }
        let mut key = seed ^ 0x5151_7a7a_0101_2323;
        for part in [step, tag] {
            key = splitmix(key ^ part);
        }
        Dropout {
            p,
            rng: Some(ChaCha8Rng::seed_from_u64(key)),
        }
    }

    pub fn active(&self) -> bool {
        self.rng.is_some()
    }

    pub(crate) fn apply<T: Float>(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        let Some(rng) = &mut self.rng else { return x };
        use rand::Rng;
        let keep = T::f(1.0 / (1.0 - self.p));
        let n = g.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < self.p { T::zero() } else { keep })
            .collect();
        g.mul_const(x, mask)
    }
}

/// Dropout settings for one optimizer step; each forward pass draws its own
/// independent mask stream from its tag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutPlan {
    pub p: f64,
    pub seed: u64,
    pub step: u64,
}

impl DropoutPlan {
    pub fn off() -> Self {
        DropoutPlan { p: 0.0, seed: 0, step: 0 }
    }

    pub fn pass(&self, tag: u64) -> Dropout {
        Dropout::new(self.p, self.seed, self.step, tag)
    }
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
