//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and `backward` is a single reverse sweep. A node
//! keeps its backward state only when at least one input requires a
//! gradient; graphs built purely from constants cost no more than a plain
//! forward pass.

use std::sync::Arc;

use super::scalar::{gemm, Float, Strides};
use super::{Mask, Tensor};
use crate::error::{contract_err, shape_err, NovaError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Large negative logit standing in for −∞ at masked positions.
const MASK_FILL: f64 = -1e30;

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    MulRow {
        x: Var,
        row: Var,
    },
    Affine {
        x: Var,
        scale: T,
    },
    Silu(Var),
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<T>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone, Copy)]
struct AttnGeom {
    batch: usize,
    heads: usize,
    lq: usize,
    lk: usize,
    dim: usize,
    scale: f64,
}

impl AttnGeom {
    fn dh(&self) -> usize {
        self.dim / self.heads
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<'a, T> {
    tape: &'a Tape<T>,
}

impl<T: Float> Gradients<'_, T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.tape.grad(v)
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any has been produced.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an op node, dropping its backward state when no input needs it.
    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if rg {
            self.push_raw(value, op, true)
        } else {
            self.push_raw(value, Op::Leaf, false)
        }
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    // ---- forward ops ------------------------------------------------------

    /// `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul {sa:?} × {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.val(a).data(),
            Strides::row_major(k),
            self.val(b).data(),
            Strides::row_major(n),
            T::zero(),
            &mut out,
            Strides::row_major(n),
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// `x·w + b` over the last axis of `x`; `w` is `[in × out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        let din = *xs.last().ok_or_else(|| shape_err!("linear on a scalar"))?;
        if ws.len() != 2 || ws[0] != din {
            return Err(shape_err!("linear input {xs:?} with weight {ws:?}"));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err!(
                    "linear bias {:?}, expected [{dout}]",
                    self.shape(b)
                ));
            }
        }
        let rows = self.val(x).rows();
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bias = self.val(b).data();
            for r in out.chunks_mut(dout) {
                r.copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            din,
            dout,
            T::one(),
            self.val(x).data(),
            Strides::row_major(din),
            self.val(w).data(),
            Strides::row_major(dout),
            if b.is_some() { T::one() } else { T::zero() },
            &mut out,
            Strides::row_major(dout),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(&shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    fn zip_same(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("{what} {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    fn zip_row(&self, x: Var, row: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (tx, tr) = (self.val(x), self.val(row));
        let d = tx.last_dim();
        if tr.shape() != [d] {
            return Err(shape_err!("{what}: row {:?} against {:?}", tr.shape(), tx.shape()));
        }
        let r = tr.data();
        let data = tx
            .data()
            .chunks(d)
            .flat_map(|c| c.iter().zip(r).map(|(&a, &b)| f(a, b)))
            .collect();
        Tensor::new(tx.shape(), data)
    }

    /// Adds a `[d]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let value = self.zip_row(x, row, "add_row", |a, b| a + b)?;
        Ok(self.push(value, Op::AddRow { x, row }, &[x, row]))
    }

    /// Multiplies every row of `x` by a `[d]` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let value = self.zip_row(x, row, "mul_row", |a, b| a * b)?;
        Ok(self.push(value, Op::MulRow { x, row }, &[x, row]))
    }

    /// `scale·x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::lit(scale), T::lit(shift));
        let value = self.val(x).map(|v| s * v + c);
        self.push(value, Op::Affine { x, scale: s }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `x·σ(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.val(x).map(|v| v / (T::one() + (-v).exp()));
        self.push(value, Op::Silu(x), &[x])
    }

    /// Normalizes every row of the last axis to zero mean and unit variance,
    /// then applies the optional affine `gain`/`bias`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(contract_err!("layer_norm eps must be positive, got {eps}"));
        }
        let tx = self.val(x);
        let d = tx.last_dim();
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(shape_err!("layer_norm affine {:?}, expected [{d}]", self.shape(p)));
            }
        }
        let rows = tx.rows();
        let inv_d = T::lit(1.0 / d as f64);
        let e = T::lit(eps);
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(rows);
        for r in tx.data().chunks(d) {
            let mean = r.iter().copied().sum::<T>() * inv_d;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + e).sqrt();
            rstd.push(rs);
            xhat.extend(r.iter().map(|&v| (v - mean) * rs));
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let g = self.val(g).data();
            for r in out.chunks_mut(d) {
                r.iter_mut().zip(g).for_each(|(o, &gv)| *o *= gv);
            }
        }
        if let Some(b) = bias {
            let b = self.val(b).data();
            for r in out.chunks_mut(d) {
                r.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        let inputs: Vec<Var> = [Some(x), gain, bias].into_iter().flatten().collect();
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &inputs,
        ))
    }

    /// Softmax over the last axis with masked-out entries forced to exactly 0.
    pub fn softmax_masked(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let tx = self.val(x);
        if mask.shape() != tx.shape() {
            return Err(shape_err!("softmax mask {:?} for input {:?}", mask.shape(), tx.shape()));
        }
        if let Some(r) = mask.first_empty_row() {
            return Err(NovaError::Domain(format!("softmax row {r} is fully masked")));
        }
        let d = tx.last_dim();
        let mut out = tx.data().to_vec();
        for (row, keep) in out.chunks_mut(d).zip(mask.data().chunks(d)) {
            softmax_row(row, keep);
        }
        let value = Tensor::new(tx.shape(), out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences. `q` is `[batch·lq × dim]`, `k`/`v` are `[batch·lk × dim]`,
    /// `dim = heads·d_head`, and the optional `[lq × lk]` mask is shared by
    /// every sequence and head.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        mask: Option<&Arc<Mask>>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            return Err(shape_err!("attention q {sq:?} k {sk:?} v {sv:?}"));
        }
        let dim = sq[1];
        if heads == 0 || dim % heads != 0 || batch == 0 {
            return Err(contract_err!("{dim} channels over {heads} heads, batch {batch}"));
        }
        if sq[0] % batch != 0 || sk[0] % batch != 0 {
            return Err(shape_err!("rows {} / {} not divisible by batch {batch}", sq[0], sk[0]));
        }
        let (lq, lk) = (sq[0] / batch, sk[0] / batch);
        if let Some(m) = mask {
            if m.shape() != [lq, lk] {
                return Err(shape_err!("attention mask {:?}, expected [{lq}, {lk}]", m.shape()));
            }
            if let Some(r) = m.first_empty_row() {
                return Err(NovaError::Domain(format!("attention row {r} is fully masked")));
            }
        }
        let geom = AttnGeom {
            batch,
            heads,
            lq,
            lk,
            dim,
            scale: 1.0 / ((dim / heads) as f64).sqrt(),
        };
        let (out, probs) = attention_forward(
            &geom,
            self.val(q).data(),
            self.val(k).data(),
            self.val(v).data(),
            mask.map(|m| m.data()),
        );
        let value = Tensor::new(&[batch * lq, dim], out)?;
        let rg = [q, k, v].iter().any(|x| self.requires_grad(*x));
        let probs = if rg { probs } else { Vec::new() };
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.val(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.val(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Leading-axis rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.val(x).slice_rows(start, end)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// Last-axis columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.val(x);
        let d = tx.last_dim();
        if tx.rank() == 0 || start > end || end > d {
            return Err(shape_err!("column range {start}..{end} of {:?}", tx.shape()));
        }
        let data = tx
            .data()
            .chunks(d)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Leading-axis rows selected by index; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = self.val(x).gather_rows(idx)?;
        Ok(self.push(
            value,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding into the gradients of
    /// every leaf that requires one. Gradients accumulate across calls until
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<'_, T>> {
        if self.val(loss).numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { tape: self })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        Strides::row_major(n),
                        self.val(*b).data(),
                        Strides::transposed(n),
                        T::zero(),
                        &mut ga,
                        Strides::row_major(k),
                    );
                    accumulate(grads, *a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.val(*a).data(),
                        Strides::transposed(k),
                        g,
                        Strides::row_major(n),
                        T::zero(),
                        &mut gb,
                        Strides::row_major(n),
                    );
                    accumulate(grads, *b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = self.val(*x).rows();
                if rg(*x) {
                    let mut gx = vec![T::zero(); rows * din];
                    gemm(
                        rows,
                        dout,
                        din,
                        T::one(),
                        g,
                        Strides::row_major(dout),
                        self.val(*w).data(),
                        Strides::transposed(dout),
                        T::zero(),
                        &mut gx,
                        Strides::row_major(din),
                    );
                    accumulate(grads, *x, gx);
                }
                if rg(*w) {
                    let mut gw = vec![T::zero(); din * dout];
                    gemm(
                        din,
                        rows,
                        dout,
                        T::one(),
                        self.val(*x).data(),
                        Strides::transposed(din),
                        g,
                        Strides::row_major(dout),
                        T::zero(),
                        &mut gw,
                        Strides::row_major(dout),
                    );
                    accumulate(grads, *w, gw);
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    accumulate(grads, b, col_sums(g, dout));
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                if rg(*a) {
                    accumulate(grads, *a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::AddRow { x, row } => {
                if rg(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if rg(*row) {
                    let d = self.val(*row).numel();
                    accumulate(grads, *row, col_sums(g, d));
                }
            }
            Op::MulRow { x, row } => {
                let r = self.val(*row).data();
                let d = r.len();
                if rg(*x) {
                    let gx = g
                        .chunks(d)
                        .flat_map(|c| c.iter().zip(r).map(|(&a, &b)| a * b))
                        .collect();
                    accumulate(grads, *x, gx);
                }
                if rg(*row) {
                    let xv = self.val(*x).data();
                    let mut gr = vec![T::zero(); d];
                    for (gc, xc) in g.chunks(d).zip(xv.chunks(d)) {
                        for j in 0..d {
                            gr[j] += gc[j] * xc[j];
                        }
                    }
                    accumulate(grads, *row, gr);
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                accumulate(grads, *x, g.iter().map(|&v| v * s).collect());
            }
            Op::Silu(x) => {
                let gx = g
                    .iter()
                    .zip(self.val(*x).data())
                    .map(|(&gv, &xv)| {
                        let s = T::one() / (T::one() + (-xv).exp());
                        gv * s * (T::one() + xv * (T::one() - s))
                    })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.val(*x).last_dim();
                let inv_d = T::lit(1.0 / d as f64);
                let gvals = gain.map(|gn| self.val(gn).data());
                if let Some(b) = bias.filter(|b| rg(*b)) {
                    accumulate(grads, b, col_sums(g, d));
                }
                if let Some(gn) = gain.filter(|gn| rg(*gn)) {
                    let mut gg = vec![T::zero(); d];
                    for (gc, xc) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gc[j] * xc[j];
                        }
                    }
                    accumulate(grads, gn, gg);
                }
                if rg(*x) {
                    let mut gx = Vec::with_capacity(g.len());
                    let mut dxh = vec![T::zero(); d];
                    for ((gc, xc), &rs) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        for j in 0..d {
                            dxh[j] = match gvals {
                                Some(gv) => gc[j] * gv[j],
                                None => gc[j],
                            };
                        }
                        let m1 = dxh.iter().copied().sum::<T>() * inv_d;
                        let m2 = dxh.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        gx.extend((0..d).map(|j| rs * (dxh[j] - m1 - xc[j] * m2)));
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut gx = Vec::with_capacity(g.len());
                for (gc, yc) in g.chunks(d).zip(y.chunks(d)) {
                    let dot = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum::<T>();
                    gx.extend(gc.iter().zip(yc).map(|(&a, &b)| b * (a - dot)));
                }
                accumulate(grads, *x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            } => {
                let (gq, gk, gv) = attention_backward(
                    geom,
                    g,
                    self.val(*q).data(),
                    self.val(*k).data(),
                    self.val(*v).data(),
                    probs,
                );
                if rg(*q) {
                    accumulate(grads, *q, gq);
                }
                if rg(*k) {
                    accumulate(grads, *k, gk);
                }
                if rg(*v) {
                    accumulate(grads, *v, gv);
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.val(*p).numel();
                    if rg(*p) {
                        accumulate(grads, *p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let tx = self.val(*x);
                let inner = tx.numel() / tx.shape()[0].max(1);
                let mut gx = vec![T::zero(); tx.numel()];
                let off = start * inner;
                gx[off..off + g.len()].copy_from_slice(g);
                accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let tx = self.val(*x);
                let d = tx.last_dim();
                let w = node.value.last_dim();
                let mut gx = vec![T::zero(); tx.numel()];
                for (dst, src) in gx.chunks_mut(d).zip(g.chunks(w.max(1))) {
                    dst[*start..*start + w].copy_from_slice(src);
                }
                accumulate(grads, *x, gx);
            }
            Op::Gather { x, idx } => {
                let tx = self.val(*x);
                let inner = tx.numel() / tx.shape()[0].max(1);
                let mut gx = vec![T::zero(); tx.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut gx[i * inner..(i + 1) * inner];
                    dst.iter_mut()
                        .zip(&g[r * inner..(r + 1) * inner])
                        .for_each(|(a, &b)| *a += b);
                }
                accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                accumulate(grads, *x, vec![g[0]; self.val(*x).numel()]);
            }
            Op::Mean(x) => {
                let n = self.val(*x).numel();
                accumulate(grads, *x, vec![g[0] / T::lit(n as f64); n]);
            }
        }
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn col_sums<T: Float>(g: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d];
    for c in g.chunks(d) {
        out.iter_mut().zip(c).for_each(|(o, &v)| *o += v);
    }
    out
}

/// In-place masked softmax of one row; masked entries end at exactly 0.
fn softmax_row<T: Float>(row: &mut [T], keep: &[bool]) {
    let fill = T::lit(MASK_FILL);
    let mut max = T::neg_infinity();
    for (v, &k) in row.iter_mut().zip(keep) {
        if !k {
            *v = fill;
        } else if *v > max {
            max = *v;
        }
    }
    let mut total = T::zero();
    for (v, &k) in row.iter_mut().zip(keep) {
        *v = if k { (*v - max).exp() } else { T::zero() };
        total += *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

fn attention_forward<T: Float>(
    geom: &AttnGeom,
    q: &[T],
    k: &[T],
    v: &[T],
    mask: Option<&[bool]>,
) -> (Vec<T>, Vec<T>) {
    let AttnGeom {
        batch,
        heads,
        lq,
        lk,
        dim,
        ..
    } = *geom;
    let dh = geom.dh();
    let scale = T::lit(geom.scale);
    let mut out = vec![T::zero(); batch * lq * dim];
    let mut probs = vec![T::zero(); batch * heads * lq * lk];
    let all_keep = vec![true; lk];
    for b in 0..batch {
        for h in 0..heads {
            let qo = b * lq * dim + h * dh;
            let ko = b * lk * dim + h * dh;
            let p = &mut probs[(b * heads + h) * lq * lk..][..lq * lk];
            gemm(
                lq,
                dh,
                lk,
                scale,
                &q[qo..],
                Strides::row_major(dim),
                &k[ko..],
                Strides::transposed(dim),
                T::zero(),
                p,
                Strides::row_major(lk),
            );
            for (i, row) in p.chunks_mut(lk).enumerate() {
                let keep = mask.map_or(&all_keep[..], |m| &m[i * lk..(i + 1) * lk]);
                softmax_row(row, keep);
            }
            gemm(
                lq,
                lk,
                dh,
                T::one(),
                p,
                Strides::row_major(lk),
                &v[ko..],
                Strides::row_major(dim),
                T::zero(),
                &mut out[qo..],
                Strides::row_major(dim),
            );
        }
    }
    (out, probs)
}

fn attention_backward<T: Float>(
    geom: &AttnGeom,
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnGeom {
        batch,
        heads,
        lq,
        lk,
        dim,
        ..
    } = *geom;
    let dh = geom.dh();
    let scale = T::lit(geom.scale);
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); lq * lk];
    for b in 0..batch {
        for h in 0..heads {
            let qo = b * lq * dim + h * dh;
            let ko = b * lk * dim + h * dh;
            let p = &probs[(b * heads + h) * lq * lk..][..lq * lk];
            // dV = Pᵀ·dO
            gemm(
                lk,
                lq,
                dh,
                T::one(),
                p,
                Strides::transposed(lk),
                &g[qo..],
                Strides::row_major(dim),
                T::zero(),
                &mut gv[ko..],
                Strides::row_major(dim),
            );
            // dP = dO·Vᵀ
            gemm(
                lq,
                dh,
                lk,
                T::one(),
                &g[qo..],
                Strides::row_major(dim),
                &v[ko..],
                Strides::transposed(dim),
                T::zero(),
                &mut ds,
                Strides::row_major(lk),
            );
            for (drow, prow) in ds.chunks_mut(lk).zip(p.chunks(lk)) {
                let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
                drow.iter_mut()
                    .zip(prow)
                    .for_each(|(d, &pv)| *d = pv * (*d - dot));
            }
            // dQ = scale·dS·K, dK = scale·dSᵀ·Q
            gemm(
                lq,
                lk,
                dh,
                scale,
                &ds,
                Strides::row_major(lk),
                &k[ko..],
                Strides::row_major(dim),
                T::zero(),
                &mut gq[qo..],
                Strides::row_major(dim),
            );
            gemm(
                lk,
                lq,
                dh,
                scale,
                &ds,
                Strides::transposed(lk),
                &q[qo..],
                Strides::row_major(dim),
                T::zero(),
                &mut gk[ko..],
                Strides::row_major(dim),
            );
        }
    }
    (gq, gk, gv)
}
