//! Pre-LN transformer blocks, on the tape and as cached inference kernels.
//!
//! The inference path mirrors the tape path operation for operation so that
//! incremental decoding reproduces teacher-forced distributions.

use crate::autograd::{gelu, AttnMask, Graph, Var};
use crate::params::{Attn, Block, Dropout, Lin, Ln};
use crate::tensor::{matmul, softmax_in_place, Float, Tensor};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn ln<T: Float>(g: &mut Graph<T>, v: &[Var], p: Ln, x: Var) -> Var {
    g.layer_norm(x, v[p.g], v[p.b], T::f(LN_EPS))
}

pub(crate) fn lin<T: Float>(g: &mut Graph<T>, v: &[Var], p: Lin, x: Var) -> Var {
    g.linear(x, v[p.w], v[p.b])
}

fn attn<T: Float>(g: &mut Graph<T>, v: &[Var], p: &Attn, xq: Var, xkv: Var, heads: usize, mask: AttnMask) -> Var {
    let q = lin(g, v, p.q, xq);
    let k = lin(g, v, p.k, xkv);
    let vv = lin(g, v, p.v, xkv);
    let o = g.attention(q, k, vv, heads, mask);
    lin(g, v, p.o, o)
}

/// One block over a `[batch*len, dim]` activation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block<T: Float>(
    g: &mut Graph<T>,
    v: &[Var],
    b: &Block,
    x: Var,
    heads: usize,
    self_mask: AttnMask,
    memory: Option<(Var, AttnMask)>,
    drop: &mut Dropout,
) -> Var {
    let h = ln(g, v, b.ln1, x);
    let a = attn(g, v, &b.attn, h, h, heads, self_mask);
    let a = drop.apply(g, a);
    let mut x = g.add(x, a);
    if let (Some((lnc, cross)), Some((mem, mask))) = (&b.cross, memory) {
        let h = ln(g, v, *lnc, x);
        let a = attn(g, v, cross, h, mem, heads, mask);
        let a = drop.apply(g, a);
        x = g.add(x, a);
    }
    let h = ln(g, v, b.ln2, x);
    let f = lin(g, v, b.ff1, h);
    let f = g.gelu(f);
    let f = lin(g, v, b.ff2, f);
    let f = drop.apply(g, f);
    g.add(x, f)
}

// ---- inference kernels -----------------------------------------------------

pub(crate) fn lin_rows<T: Float>(p: &[Tensor<T>], l: Lin, x: &[T], n: usize) -> Vec<T> {
    let w = &p[l.w];
    let mut out = matmul(x, &w.data, n, w.rows, w.cols, false);
    let bias = &p[l.b].data;
    for r in out.chunks_mut(w.cols) {
        for (o, &b) in r.iter_mut().zip(bias) {
            *o += b;
        }
    }
    out
}

pub(crate) fn ln_rows<T: Float>(p: &[Tensor<T>], l: Ln, x: &[T]) -> Vec<T> {
    let (gamma, beta) = (&p[l.g].data, &p[l.b].data);
    let d = gamma.len();
    let dn = T::f(d as f64);
    let eps = T::f(LN_EPS);
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + eps).sqrt();
        for j in 0..d {
            o[j] = (row[j] - mean) * rs * gamma[j] + beta[j];
        }
    }
    out
}

/// Attention of one query row over `n_keys` cached key/value rows.
pub(crate) fn attend_one<T: Float>(q: &[T], keys: &[T], values: &[T], n_keys: usize, heads: usize, out: &mut [T]) {
    let d = q.len();
    let dh = d / heads;
    let scale = T::one() / T::f(dh as f64).sqrt();
    let mut scores = vec![T::zero(); n_keys];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
            *s = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<T>() * scale;
        }
        softmax_in_place(&mut scores);
        let oh = &mut out[h * dh..(h + 1) * dh];
        oh.iter_mut().for_each(|o| *o = T::zero());
        for (j, &p) in scores.iter().enumerate() {
            let vh = &values[j * d + h * dh..j * d + (h + 1) * dh];
            for (o, &v) in oh.iter_mut().zip(vh) {
                *o += p * v;
            }
        }
    }
}

/// Self-attention cache of one sequence: keys and values per block.
#[derive(Clone, Debug, Default)]
pub(crate) struct KvCache<T> {
    pub keys: Vec<Vec<T>>,
    pub values: Vec<Vec<T>>,
    pub len: usize,
}

impl<T: Float> KvCache<T> {
    pub fn new(n_blocks: usize) -> Self {
        KvCache {
            keys: vec![Vec::new(); n_blocks],
            values: vec![Vec::new(); n_blocks],
            len: 0,
        }
    }
}

/// Precomputed cross-attention keys and values of one encoded source.
#[derive(Clone, Debug)]
pub(crate) struct Memory<T> {
    pub keys: Vec<Vec<T>>,
    pub values: Vec<Vec<T>>,
    pub len: usize,
}

/// Advances `n` sequences by one position. `x` holds the new input rows;
/// `memory[i]` is the cross-attention source of row `i`.
pub(crate) fn step_blocks<T: Float>(
    p: &[Tensor<T>],
    blocks: &[Block],
    heads: usize,
    mut x: Vec<T>,
    caches: &mut [&mut KvCache<T>],
    memory: Option<&[&Memory<T>]>,
) -> Vec<T> {
    let n = caches.len();
    let d = x.len() / n;
    let mut att = vec![T::zero(); n * d];
    for (li, b) in blocks.iter().enumerate() {
        let h = ln_rows(p, b.ln1, &x);
        let q = lin_rows(p, b.attn.q, &h, n);
        let k = lin_rows(p, b.attn.k, &h, n);
        let v = lin_rows(p, b.attn.v, &h, n);
        for (i, c) in caches.iter_mut().enumerate() {
            c.keys[li].extend_from_slice(&k[i * d..(i + 1) * d]);
            c.values[li].extend_from_slice(&v[i * d..(i + 1) * d]);
            let len = c.keys[li].len() / d;
            attend_one(&q[i * d..(i + 1) * d], &c.keys[li], &c.values[li], len, heads, &mut att[i * d..(i + 1) * d]);
        }
        let o = lin_rows(p, b.attn.o, &att, n);
        add_in_place(&mut x, &o);
        if let (Some((lnc, cross)), Some(mem)) = (&b.cross, memory) {
            let h = ln_rows(p, *lnc, &x);
            let q = lin_rows(p, cross.q, &h, n);
            for i in 0..n {
                let m = mem[i];
                attend_one(&q[i * d..(i + 1) * d], &m.keys[li], &m.values[li], m.len, heads, &mut att[i * d..(i + 1) * d]);
            }
            let o = lin_rows(p, cross.o, &att, n);
            add_in_place(&mut x, &o);
        }
        let h = ln_rows(p, b.ln2, &x);
        let mut f = lin_rows(p, b.ff1, &h, n);
        f.iter_mut().for_each(|v| *v = gelu(*v));
        let f = lin_rows(p, b.ff2, &f, n);
        add_in_place(&mut x, &f);
    }
    for c in caches.iter_mut() {
        c.len += 1;
    }
    x
}

fn add_in_place<T: Float>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}
