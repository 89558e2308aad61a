//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order; `backward` walks
//! the tape in reverse. Nodes that do not depend on a trainable leaf carry no
//! gradient, which is how frozen networks are evaluated inside a
//! differentiable expression without ever receiving updates.

use crate::tensor::{log_softmax_in_place, softmax_in_place, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Masking layout for fused multi-head attention.
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// Number of valid (non-PAD) keys per batch row.
    pub k_valid: Vec<usize>,
    pub causal: bool,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulConst { x: Var, c: Vec<T> },
    Scale { x: Var, s: T },
    Gelu { x: Var },
    Softplus { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, idx: Vec<Option<usize>> },
    Attention { q: Var, k: Var, v: Var, heads: usize, mask: AttnMask, probs: Vec<T> },
    LogSoftmax { x: Var },
    Softmax { x: Var },
    Pick { x: Var, idx: Vec<usize> },
    RowSum { x: Var },
    SegmentSum { x: Var, seg: Vec<usize>, w: Vec<T> },
    Unfold { x: Var, width: usize, len: usize, valid: Vec<usize> },
    Relu { x: Var },
    Sum { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after `mark` (as returned by [`Graph::len`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), true, Op::Leaf)
    }

    pub fn param_owned(&mut self, t: Tensor<T>) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- forward ops -------------------------------------------------------

    /// `a[n,k] * b[k,m]`, or `a[n,k] * b[m,k]^T` with `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k) = (av.rows, av.cols);
        let m = if trans_b {
            assert_eq!(bv.cols, k, "matmul inner dims");
            bv.rows
        } else {
            assert_eq!(bv.rows, k, "matmul inner dims");
            bv.cols
        };
        let data = crate::tensor::matmul(&av.data, &bv.data, n, k, m, trans_b);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_vec(n, m, data), rg, Op::MatMul { a, b, trans_b })
    }

    /// Adds a `1 x cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(bv.len(), xv.cols, "bias width");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(out, rg, Op::AddBias { x, b })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w, false);
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, rg, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, rg, Op::Mul { a, b })
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "elementwise shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.rows, av.cols, data)
    }

    /// Elementwise product with a constant of the same shape (masks, dropout).
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), c.len());
        let data = xv.data.iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let out = Tensor::from_vec(xv.rows, xv.cols, data);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::MulConst { x, c })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = Tensor::from_vec(xv.rows, xv.cols, xv.data.iter().map(|&a| a * s).collect());
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Scale { x, s })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = Tensor::from_vec(xv.rows, xv.cols, xv.data.iter().map(|&a| gelu(a)).collect());
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = Tensor::from_vec(xv.rows, xv.cols, xv.data.iter().map(|&a| a.max(T::zero())).collect());
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Relu { x })
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = Tensor::from_vec(xv.rows, xv.cols, xv.data.iter().map(|&a| softplus(a)).collect());
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Softplus { x })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = &self.nodes[x.0].value;
        let (g, b) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let d = xv.cols;
        assert_eq!(g.len(), d);
        assert_eq!(b.len(), d);
        let dn = T::f(d as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); xv.rows];
        let mut out = Tensor::zeros(xv.rows, d);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let xh = &mut xhat[r * d..(r + 1) * d];
            let o = out.row_mut(r);
            for j in 0..d {
                xh[j] = (row[j] - mean) * rs;
                o[j] = xh[j] * g.data[j] + b.data[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(out, rg, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Row lookup into a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = &self.nodes[table.0].value;
        let mut out = Tensor::zeros(ids.len(), tv.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(&[table]);
        self.push(out, rg, Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Builds a new matrix whose row `i` is `x[idx[i]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<Option<usize>>) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut out = Tensor::zeros(idx.len(), xv.cols);
        for (r, src) in idx.iter().enumerate() {
            if let Some(s) = src {
                out.row_mut(r).copy_from_slice(xv.row(*s));
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::GatherRows { x, idx })
    }

    /// Fused scaled dot-product multi-head attention. `q` is
    /// `[batch*q_len, dim]`, `k` and `v` are `[batch*k_len, dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Var {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let d = qv.cols;
        assert_eq!(d % heads, 0, "dim must divide into heads");
        assert_eq!(qv.rows, mask.batch * mask.q_len);
        assert_eq!(kv.rows, mask.batch * mask.k_len);
        assert_eq!(vv.rows, kv.rows);
        let dh = d / heads;
        let (lq, lk) = (mask.q_len, mask.k_len);
        let scale = T::one() / T::f(dh as f64).sqrt();
        let mut probs = vec![T::zero(); mask.batch * heads * lq * lk];
        let mut out: Tensor<T> = Tensor::zeros(qv.rows, d);
        for b in 0..mask.batch {
            let valid = mask.k_valid[b].min(lk);
            assert!(valid > 0, "attention over an empty key set");
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * lq * lk..(b * heads + h + 1) * lq * lk];
                let q_off = b * lq * d + h * dh;
                let k_off = b * lk * d + h * dh;
                unsafe {
                    T::gemm(
                        lq,
                        dh,
                        lk,
                        scale,
                        qv.data.as_ptr().add(q_off),
                        d as isize,
                        1,
                        kv.data.as_ptr().add(k_off),
                        1,
                        d as isize,
                        T::zero(),
                        p.as_mut_ptr(),
                        lk as isize,
                        1,
                    );
                }
                for i in 0..lq {
                    let row = &mut p[i * lk..(i + 1) * lk];
                    let limit = if mask.causal { valid.min(i + 1) } else { valid };
                    for s in row[limit..].iter_mut() {
                        *s = T::neg_infinity();
                    }
                    softmax_in_place(row);
                }
                unsafe {
                    T::gemm(
                        lq,
                        lk,
                        dh,
                        T::one(),
                        p.as_ptr(),
                        lk as isize,
                        1,
                        vv.data.as_ptr().add(k_off),
                        d as isize,
                        1,
                        T::zero(),
                        out.data.as_mut_ptr().add(q_off),
                        d as isize,
                        1,
                    );
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(out, rg, Op::Attention { q, k, v, heads, mask, probs })
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        for r in 0..out.rows {
            log_softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::LogSoftmax { x })
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Softmax { x })
    }

    /// `out[i] = x[i, idx[i]]`, shape `[n, 1]`.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(idx.len(), xv.rows);
        let data = idx.iter().enumerate().map(|(r, &c)| xv.data[r * xv.cols + c]).collect();
        let out = Tensor::from_vec(xv.rows, 1, data);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Pick { x, idx })
    }

    /// Sum of each row, shape `[n, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = (0..xv.rows).map(|r| xv.row(r).iter().copied().sum()).collect();
        let out = Tensor::from_vec(xv.rows, 1, data);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::RowSum { x })
    }

    /// Weighted scatter of rows into `n_seg` segments:
    /// `out[seg[r]] += w[r] * x[r]`.
    pub fn segment_sum(&mut self, x: Var, seg: Vec<usize>, w: Vec<T>, n_seg: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(seg.len(), xv.rows);
        assert_eq!(w.len(), xv.rows);
        let mut out = Tensor::zeros(n_seg, xv.cols);
        for r in 0..xv.rows {
            if w[r] == T::zero() {
                continue;
            }
            let wr = w[r];
            let dst = seg[r];
            for (o, &v) in out.row_mut(dst).iter_mut().zip(xv.row(r)) {
                *o += wr * v;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::SegmentSum { x, seg, w })
    }

    /// Sliding-window concatenation along time for a `[batch*len, dim]`
    /// input: row `(b,t)` becomes `[x(b,t-h) .. x(b,t+h)]` with zeros outside
    /// `0..valid[b]`. `width` must be odd.
    pub fn unfold(&mut self, x: Var, width: usize, len: usize, valid: Vec<usize>) -> Var {
        assert!(width % 2 == 1, "unfold width must be odd");
        let xv = &self.nodes[x.0].value;
        let d = xv.cols;
        let batch = valid.len();
        assert_eq!(xv.rows, batch * len);
        let half = width / 2;
        let mut out = Tensor::zeros(xv.rows, d * width);
        for b in 0..batch {
            for t in 0..valid[b].min(len) {
                let o = out.row_mut(b * len + t);
                for w in 0..width {
                    let src = t as isize + w as isize - half as isize;
                    if src >= 0 && (src as usize) < valid[b].min(len) {
                        o[w * d..(w + 1) * d].copy_from_slice(xv.row(b * len + src as usize));
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Unfold { x, width, len, valid })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.nodes[x.0].value.data.iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), rg, Op::Sum { x })
    }

    // ---- reverse pass ------------------------------------------------------

    /// Backpropagates from a scalar `loss`. Gradients accumulate on every
    /// node that depends on a trainable leaf.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward from a non-scalar");
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = node.grad.as_deref() else {
                continue;
            };
            let contributions = backward_op(&node.op, &node.value, dy, before);
            for (var, g) in contributions {
                let target = &mut before[var.0];
                match &mut target.grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
    }
}

#[inline]
pub(crate) fn gelu<T: Float>(x: T) -> T {
    let c = T::f((2.0 / std::f64::consts::PI).sqrt());
    let a = T::f(0.044715);
    let half = T::f(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::f((2.0 / std::f64::consts::PI).sqrt());
    let a = T::f(0.044715);
    let half = T::f(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::f(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

#[inline]
pub(crate) fn softplus<T: Float>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn needs<T>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backward_op<T: Float>(op: &Op<T>, out: &Tensor<T>, dy: &[T], nodes: &[Node<T>]) -> Vec<(Var, Vec<T>)> {
    let mut grads = Vec::new();
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (n, k) = (av.rows, av.cols);
            let m = out.cols;
            if needs(nodes, *a) {
                // dA[n,k] = dY[n,m] * B^T  (B is [k,m]) or dY * B (B is [m,k])
                let mut ga = vec![T::zero(); n * k];
                let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, m as isize) };
                unsafe {
                    T::gemm(n, m, k, T::one(), dy.as_ptr(), m as isize, 1, bv.data.as_ptr(), rsb, csb, T::zero(), ga.as_mut_ptr(), k as isize, 1);
                }
                grads.push((*a, ga));
            }
            if needs(nodes, *b) {
                let mut gb = vec![T::zero(); bv.len()];
                if *trans_b {
                    // dB[m,k] = dY^T[m,n] * A[n,k]
                    unsafe {
                        T::gemm(m, n, k, T::one(), dy.as_ptr(), 1, m as isize, av.data.as_ptr(), k as isize, 1, T::zero(), gb.as_mut_ptr(), k as isize, 1);
                    }
                } else {
                    // dB[k,m] = A^T[k,n] * dY[n,m]
                    unsafe {
                        T::gemm(k, n, m, T::one(), av.data.as_ptr(), 1, k as isize, dy.as_ptr(), m as isize, 1, T::zero(), gb.as_mut_ptr(), m as isize, 1);
                    }
                }
                grads.push((*b, gb));
            }
        }
        Op::AddBias { x, b } => {
            if needs(nodes, *x) {
                grads.push((*x, dy.to_vec()));
            }
            if needs(nodes, *b) {
                let cols = out.cols;
                let mut gb = vec![T::zero(); cols];
                for r in 0..out.rows {
                    for (g, &d) in gb.iter_mut().zip(&dy[r * cols..(r + 1) * cols]) {
                        *g += d;
                    }
                }
                grads.push((*b, gb));
            }
        }
        Op::Add { a, b } => {
            if needs(nodes, *a) {
                grads.push((*a, dy.to_vec()));
            }
            if needs(nodes, *b) {
                grads.push((*b, dy.to_vec()));
            }
        }
        Op::Sub { a, b } => {
            if needs(nodes, *a) {
                grads.push((*a, dy.to_vec()));
            }
            if needs(nodes, *b) {
                grads.push((*b, dy.iter().map(|&d| -d).collect()));
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if needs(nodes, *a) {
                grads.push((*a, dy.iter().zip(&bv.data).map(|(&d, &y)| d * y).collect()));
            }
            if needs(nodes, *b) {
                grads.push((*b, dy.iter().zip(&av.data).map(|(&d, &x)| d * x).collect()));
            }
        }
        Op::MulConst { x, c } => {
            grads.push((*x, dy.iter().zip(c).map(|(&d, &m)| d * m).collect()));
        }
        Op::Scale { x, s } => {
            grads.push((*x, dy.iter().map(|&d| d * *s).collect()));
        }
        Op::Gelu { x } => {
            let xv = &nodes[x.0].value;
            grads.push((*x, dy.iter().zip(&xv.data).map(|(&d, &v)| d * gelu_grad(v)).collect()));
        }
        Op::Relu { x } => {
            let xv = &nodes[x.0].value;
            grads.push((
                *x,
                dy.iter().zip(&xv.data).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect(),
            ));
        }
        Op::Softplus { x } => {
            let xv = &nodes[x.0].value;
            grads.push((*x, dy.iter().zip(&xv.data).map(|(&d, &v)| d * sigmoid(v)).collect()));
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let g = &nodes[gamma.0].value.data;
            let d = out.cols;
            let dn = T::f(d as f64);
            if needs(nodes, *x) {
                let mut gx = vec![T::zero(); out.len()];
                for r in 0..out.rows {
                    let dyr = &dy[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = dyr[j] * g[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= dn;
                    mean_dxh_xh /= dn;
                    let gr = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        gr[j] = rstd[r] * (dyr[j] * g[j] - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                grads.push((*x, gx));
            }
            if needs(nodes, *gamma) {
                let mut gg = vec![T::zero(); d];
                for r in 0..out.rows {
                    for j in 0..d {
                        gg[j] += dy[r * d + j] * xhat[r * d + j];
                    }
                }
                grads.push((*gamma, gg));
            }
            if needs(nodes, *beta) {
                let mut gb = vec![T::zero(); d];
                for r in 0..out.rows {
                    for j in 0..d {
                        gb[j] += dy[r * d + j];
                    }
                }
                grads.push((*beta, gb));
            }
        }
        Op::Embedding { table, ids } => {
            let tv = &nodes[table.0].value;
            let d = tv.cols;
            let mut gt = vec![T::zero(); tv.len()];
            for (r, &id) in ids.iter().enumerate() {
                for (g, &v) in gt[id * d..(id + 1) * d].iter_mut().zip(&dy[r * d..(r + 1) * d]) {
                    *g += v;
                }
            }
            grads.push((*table, gt));
        }
        Op::GatherRows { x, idx } => {
            let xv = &nodes[x.0].value;
            let d = xv.cols;
            let mut gx = vec![T::zero(); xv.len()];
            for (r, src) in idx.iter().enumerate() {
                if let Some(s) = src {
                    for (g, &v) in gx[s * d..(s + 1) * d].iter_mut().zip(&dy[r * d..(r + 1) * d]) {
                        *g += v;
                    }
                }
            }
            grads.push((*x, gx));
        }
        Op::Attention { q, k, v, heads, mask, probs } => {
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let d = qv.cols;
            let dh = d / heads;
            let (lq, lk) = (mask.q_len, mask.k_len);
            let scale = T::one() / T::f(dh as f64).sqrt();
            let mut gq = vec![T::zero(); qv.len()];
            let mut gk = vec![T::zero(); kv.len()];
            let mut gv = vec![T::zero(); vv.len()];
            let mut dp = vec![T::zero(); lq * lk];
            for b in 0..mask.batch {
                for h in 0..*heads {
                    let p = &probs[(b * heads + h) * lq * lk..(b * heads + h + 1) * lq * lk];
                    let q_off = b * lq * d + h * dh;
                    let k_off = b * lk * d + h * dh;
                    unsafe {
                        // dV += P^T dO
                        T::gemm(lk, lq, dh, T::one(), p.as_ptr(), 1, lk as isize, dy.as_ptr().add(q_off), d as isize, 1, T::one(), gv.as_mut_ptr().add(k_off), d as isize, 1);
                        // dP = dO V^T
                        T::gemm(lq, dh, lk, T::one(), dy.as_ptr().add(q_off), d as isize, 1, vv.data.as_ptr().add(k_off), 1, d as isize, T::zero(), dp.as_mut_ptr(), lk as isize, 1);
                    }
                    for i in 0..lq {
                        let pr = &p[i * lk..(i + 1) * lk];
                        let dr = &mut dp[i * lk..(i + 1) * lk];
                        let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                        for (dv, &pv) in dr.iter_mut().zip(pr) {
                            *dv = pv * (*dv - dot) * scale;
                        }
                    }
                    unsafe {
                        // dQ += dS K
                        T::gemm(lq, lk, dh, T::one(), dp.as_ptr(), lk as isize, 1, kv.data.as_ptr().add(k_off), d as isize, 1, T::one(), gq.as_mut_ptr().add(q_off), d as isize, 1);
                        // dK += dS^T Q
                        T::gemm(lk, lq, dh, T::one(), dp.as_ptr(), 1, lk as isize, qv.data.as_ptr().add(q_off), d as isize, 1, T::one(), gk.as_mut_ptr().add(k_off), d as isize, 1);
                    }
                }
            }
            if needs(nodes, *q) {
                grads.push((*q, gq));
            }
            if needs(nodes, *k) {
                grads.push((*k, gk));
            }
            if needs(nodes, *v) {
                grads.push((*v, gv));
            }
        }
        Op::LogSoftmax { x } => {
            let c = out.cols;
            let mut gx = vec![T::zero(); out.len()];
            for r in 0..out.rows {
                let dyr = &dy[r * c..(r + 1) * c];
                let total: T = dyr.iter().copied().sum();
                for j in 0..c {
                    gx[r * c + j] = dyr[j] - out.data[r * c + j].exp() * total;
                }
            }
            grads.push((*x, gx));
        }
        Op::Softmax { x } => {
            let c = out.cols;
            let mut gx = vec![T::zero(); out.len()];
            for r in 0..out.rows {
                let y = out.row(r);
                let dyr = &dy[r * c..(r + 1) * c];
                let dot: T = y.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    gx[r * c + j] = y[j] * (dyr[j] - dot);
                }
            }
            grads.push((*x, gx));
        }
        Op::Pick { x, idx } => {
            let xv = &nodes[x.0].value;
            let mut gx = vec![T::zero(); xv.len()];
            for (r, &c) in idx.iter().enumerate() {
                gx[r * xv.cols + c] += dy[r];
            }
            grads.push((*x, gx));
        }
        Op::RowSum { x } => {
            let xv = &nodes[x.0].value;
            let mut gx = vec![T::zero(); xv.len()];
            for r in 0..xv.rows {
                for g in &mut gx[r * xv.cols..(r + 1) * xv.cols] {
                    *g = dy[r];
                }
            }
            grads.push((*x, gx));
        }
        Op::SegmentSum { x, seg, w } => {
            let xv = &nodes[x.0].value;
            let c = xv.cols;
            let mut gx = vec![T::zero(); xv.len()];
            for r in 0..xv.rows {
                if w[r] == T::zero() {
                    continue;
                }
                let src = &dy[seg[r] * c..(seg[r] + 1) * c];
                for (g, &v) in gx[r * c..(r + 1) * c].iter_mut().zip(src) {
                    *g = w[r] * v;
                }
            }
            grads.push((*x, gx));
        }
        Op::Unfold { x, width, len, valid } => {
            let xv = &nodes[x.0].value;
            let d = xv.cols;
            let half = width / 2;
            let mut gx = vec![T::zero(); xv.len()];
            for (b, &vb) in valid.iter().enumerate() {
                let vb = vb.min(*len);
                for t in 0..vb {
                    let row = &dy[(b * len + t) * d * width..(b * len + t + 1) * d * width];
                    for w in 0..*width {
                        let src = t as isize + w as isize - half as isize;
                        if src >= 0 && (src as usize) < vb {
                            let dst = (b * len + src as usize) * d;
                            for (g, &v) in gx[dst..dst + d].iter_mut().zip(&row[w * d..(w + 1) * d]) {
                                *g += v;
                            }
                        }
                    }
                }
            }
            grads.push((*x, gx));
        }
        Op::Sum { x } => {
            let n = nodes[x.0].value.len();
            grads.push((*x, vec![dy[0]; n]));
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(w * f(inputs)))/d(inputs) against central differences.
    fn check(build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, shapes: &[(usize, usize)], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|&(r, c)| rand_tensor(&mut rng, r, c)).collect();
        let eval = |inputs: &[Tensor<f64>], grads: bool| -> (f64, Vec<Vec<f64>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
            let out = build(&mut g, &vars);
            let ov = g.value(out).clone();
            // fixed pseudo-random projection so every output entry matters
            let w: Vec<f64> = (0..ov.len()).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 6.0).collect();
            let wv = g.constant(Tensor::from_vec(ov.rows, ov.cols, w));
            let prod = g.mul(out, wv);
            let loss = g.sum(prod);
            let value = g.value(loss).item();
            if grads {
                g.backward(loss);
                let gs = vars.iter().map(|v| g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(*v).len()])).collect();
                (value, gs)
            } else {
                (value, vec![])
            }
        };
        let (_, analytic) = eval(&inputs, true);
        let h = 1e-6;
        for (i, t) in inputs.iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[i].data[j] += h;
                let mut minus = inputs.clone();
                minus[i].data[j] -= h;
                let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
                let a = analytic[i][j];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
                assert!(err < 1e-5 || (a - numeric).abs() < 1e-8, "input {i} entry {j}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn grad_matmul_both_layouts() {
        check(|g, v| g.matmul(v[0], v[1], false), &[(3, 4), (4, 5)], 1);
        check(|g, v| g.matmul(v[0], v[1], true), &[(3, 4), (5, 4)], 2);
    }

    #[test]
    fn grad_elementwise() {
        check(|g, v| g.add_bias(v[0], v[1]), &[(3, 4), (1, 4)], 3);
        check(|g, v| { let s = g.sub(v[0], v[1]); g.mul(s, v[0]) }, &[(2, 3), (2, 3)], 4);
        check(|g, v| g.gelu(v[0]), &[(3, 3)], 5);
        check(|g, v| g.softplus(v[0]), &[(3, 3)], 6);
        check(|g, v| g.scale(v[0], 0.3), &[(2, 2)], 7);
    }

    #[test]
    fn grad_layer_norm() {
        check(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), &[(4, 6), (1, 6), (1, 6)], 8);
    }

    #[test]
    fn grad_softmaxes_and_reductions() {
        check(|g, v| g.log_softmax(v[0]), &[(3, 5)], 9);
        check(|g, v| g.softmax(v[0]), &[(3, 5)], 10);
        check(|g, v| { let l = g.log_softmax(v[0]); g.pick(l, vec![0, 4, 2]) }, &[(3, 5)], 11);
        check(|g, v| g.row_sum(v[0]), &[(3, 5)], 12);
        check(|g, v| g.segment_sum(v[0], vec![1, 0, 1, 1], vec![0.5, 1.0, 0.0, 2.0], 2), &[(4, 3)], 13);
    }

    #[test]
    fn grad_lookups() {
        check(|g, v| g.embedding(v[0], &[2, 0, 2, 1]), &[(3, 4)], 14);
        check(|g, v| g.gather_rows(v[0], vec![Some(1), None, Some(1), Some(0)]), &[(2, 3)], 15);
        check(|g, v| g.unfold(v[0], 3, 4, vec![4, 2]), &[(8, 2)], 16);
    }

    #[test]
    fn grad_attention_masked() {
        let mask = AttnMask { batch: 2, q_len: 3, k_len: 4, k_valid: vec![4, 2], causal: false };
        check(move |g, v| g.attention(v[0], v[1], v[2], 2, mask.clone()), &[(6, 4), (8, 4), (8, 4)], 17);
        let causal = AttnMask { batch: 2, q_len: 3, k_len: 3, k_valid: vec![3, 2], causal: true };
        check(move |g, v| g.attention(v[0], v[1], v[2], 2, causal.clone()), &[(6, 4), (6, 4), (6, 4)], 18);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(&Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let c = g.constant(Tensor::from_vec(1, 2, vec![3.0, 4.0]));
        let p = g.mul(a, c);
        let s = g.sum(p);
        g.backward(s);
        assert_eq!(g.grad(a).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::full(2, 2, 1.0));
        let kv = g.constant(Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 100.0, 100.0]));
        let mask = AttnMask { batch: 1, q_len: 2, k_len: 3, k_valid: vec![2], causal: false };
        let out = g.attention(q, kv, kv, 1, mask);
        for v in &g.value(out).data {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }
}
