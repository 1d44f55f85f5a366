//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every operation appends one node whose inputs precede it, so node order
//! is a topological order and the reverse sweep is a single backwards pass
//! over the node list.

use crate::error::{Error, Result};

use super::kernels::gemm;
use super::tensor::{axis_split, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// sqrt(2/pi), the GELU tanh-approximation constant.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    SwapAxes01(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        denom: f64,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record: values, the ops that produced them, and the
/// gradients accumulated by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            0.0,
        );
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a vector along the last axis, broadcasting over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().expect("rank ≥ 1");
        if self.shape(bias) != [n] {
            return Err(self.shape_err("add_bias", x, bias));
        }
        let b = self.value(bias).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// GELU, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Normalizes over the last axis then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().expect("rank ≥ 1");
        if self.shape(gain) != [d] {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.shape(bias) != [d] {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = super::tensor::softmax(self.value(x), axis)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Gathers rows of a `[V×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::InvalidTensor(format!(
                "embedding table must be 2-D, got {shape:?}"
            )));
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::TokenRange {
                id: bad,
                size: vocab,
            });
        }
        if ids.is_empty() {
            return Err(Error::InvalidTensor("embedding of zero ids".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.requires_grad(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of nothing".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidTensor(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(self.shape_err("concat", first, v));
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// The slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidTensor(format!(
                "narrow(axis={axis}, start={start}, len={len}) out of range for {shape:?}"
            )));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let at = o * full * inner + start * inner;
            out.extend_from_slice(&src[at..at + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let value = Tensor::new(new_shape, out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[a×b×c] → [b×a×c]`.
    pub fn swap_axes01(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 3 {
            return Err(Error::InvalidTensor(format!(
                "swap_axes01 needs a 3-D tensor, got {shape:?}"
            )));
        }
        let (a, b, c) = (shape[0], shape[1], shape[2]);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for i in 0..a {
            for j in 0..b {
                let s = (i * b + j) * c;
                let d = (j * a + i) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let value = Tensor::new(vec![b, a, c], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::SwapAxes01(x), rg))
    }

    /// Scaled dot-product attention per head. Query `i` attends to key `j`
    /// iff `j < causal_offset + i + 1`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal_offset: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
            return Err(self.shape_err("attention", q, k));
        }
        if sk != sv {
            return Err(self.shape_err("attention (keys vs values)", k, v));
        }
        if sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(self.shape_err("attention (queries vs keys)", q, k));
        }
        let (heads, tq, dh) = (sq[0], sq[1], sq[2]);
        let tk = sk[1];
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; heads * tq * dh];
        for h in 0..heads {
            let qh = &qd[h * tq * dh..(h + 1) * tq * dh];
            let kh = &kd[h * tk * dh..(h + 1) * tk * dh];
            let vh = &vd[h * tk * dh..(h + 1) * tk * dh];
            let ph = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            gemm(tq, dh, tk, qh, false, kh, true, ph, 0.0);
            for i in 0..tq {
                let visible = (causal_offset + i + 1).min(tk);
                let row = &mut ph[i * tk..(i + 1) * tk];
                let max = row[..visible]
                    .iter()
                    .fold(f64::NEG_INFINITY, |m, &s| m.max(s * scale));
                let mut total = 0.0;
                for s in &mut row[..visible] {
                    *s = (*s * scale - max).exp();
                    total += *s;
                }
                for s in &mut row[..visible] {
                    *s /= total;
                }
                row[visible..].iter_mut().for_each(|s| *s = 0.0);
            }
            gemm(
                tq,
                tk,
                dh,
                ph,
                false,
                vh,
                false,
                &mut out[h * tq * dh..(h + 1) * tq * dh],
                0.0,
            );
        }
        let value = Tensor::new(vec![heads, tq, dh], out)?;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                probs,
            },
            rg,
        ))
    }

    /// Mean over masked rows of `−log softmax(logits)[target]`.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        self.masked_cross_entropy_with_denominator(logits, targets, mask, count as f64)
    }

    /// Sum over masked rows of `−log softmax(logits)[target]`, divided by
    /// `denom`. Lets several sequences share one batch-level mean.
    pub fn masked_cross_entropy_with_denominator(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        denom: f64,
    ) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || targets.len() != shape[0] || mask.len() != shape[0] {
            return Err(Error::Shape {
                op: "masked_cross_entropy",
                lhs: shape.to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyLoss);
        }
        let (rows, vocab) = (shape[0], shape[1]);
        if let Some(&bad) = targets
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| t)
            .find(|&&t| t >= vocab)
        {
            return Err(Error::TokenRange {
                id: bad,
                size: vocab,
            });
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        for r in (0..rows).filter(|&r| mask[r]) {
            let row = &x[r * vocab..(r + 1) * vocab];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut z = 0.0;
            for (pj, &xj) in p.iter_mut().zip(row) {
                *pj = (xj - max).exp();
                z += *pj;
            }
            p.iter_mut().for_each(|pj| *pj /= z);
            total += max + z.ln() - row[targets[r]];
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                denom,
                probs,
            },
            rg,
        ))
    }

    // ── reverse sweep ────────────────────────────────────────────────

    /// Accumulates `∂loss/∂v` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad
                && matches!(self.nodes[i].op, Op::Leaf)
                && self.grads[i].is_none()
            {
                self.grads[i] = Some(vec![0.0; self.nodes[i].value.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Ops are matched by reference; the temporaries below copy only the
        // input values needed while a gradient slot is mutably borrowed.
        let nodes = std::mem::take(&mut self.nodes);
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = node.value.shape()[1];
                if let Some(da) = self.slot_with(&nodes, a) {
                    // da += g · op(b)ᵀ
                    gemm(m, n, k, g, false, val(b), !trans_b, da, 1.0);
                }
                if let Some(db) = self.slot_with(&nodes, b) {
                    if trans_b {
                        // db[n×k] += gᵀ · a
                        gemm(n, m, k, g, true, val(a), false, db, 1.0);
                    } else {
                        // db[k×n] += aᵀ · g
                        gemm(k, m, n, val(a), true, g, false, db, 1.0);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot_with(&nodes, v) {
                        add_into(d, g);
                    }
                }
            }
            &Op::AddBias(x, bias) => {
                if let Some(dx) = self.slot_with(&nodes, x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.slot_with(&nodes, bias) {
                    let n = db.len();
                    for (j, gv) in g.iter().enumerate() {
                        db[j % n] += gv;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(da) = self.slot_with(&nodes, a) {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(val(b)) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = self.slot_with(&nodes, b) {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(val(a)) {
                        *d += gv * av;
                    }
                }
            }
            &Op::Scale(x, f) => {
                if let Some(dx) = self.slot_with(&nodes, x) {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv * f;
                    }
                }
            }
            &Op::Gelu(x) => {
                if let Some(dx) = self.slot_with(&nodes, x) {
                    for ((d, gv), &v) in dx.iter_mut().zip(g).zip(val(x)) {
                        let u = GELU_C * (v + GELU_K * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        *d += gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                }
            }
            &Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(dx) = self.slot_with(&nodes, x) {
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = self.slot_with(&nodes, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = xhat.len() / rstd.len();
                let gw = val(*gain);
                if let Some(dg) = self.slot_with(&nodes, *gain) {
                    for (j, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        dg[j % d] += gv * h;
                    }
                }
                if let Some(db) = self.slot_with(&nodes, *bias) {
                    for (j, gv) in g.iter().enumerate() {
                        db[j % d] += gv;
                    }
                }
                if let Some(dx) = self.slot_with(&nodes, *x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gw[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gw[j];
                            dx[r * d + j] += rs * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), axis);
                if let Some(dx) = self.slot_with(&nodes, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = shp(*table)[1];
                if let Some(dt) = self.slot_with(&nodes, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                let total = node.value.numel() / outer;
                for &v in inputs {
                    let len = shp(v)[*axis] * inner;
                    if let Some(dv) = self.slot_with(&nodes, v) {
                        for o in 0..outer {
                            let src = o * total + offset;
                            add_into(&mut dv[o * len..(o + 1) * len], &g[src..src + len]);
                        }
                    }
                    offset += len;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = axis_split(shp(x), axis);
                let len = node.value.shape()[axis];
                if let Some(dx) = self.slot_with(&nodes, x) {
                    for o in 0..outer {
                        let at = o * full * inner + start * inner;
                        let src = o * len * inner;
                        add_into(&mut dx[at..at + len * inner], &g[src..src + len * inner]);
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(dx) = self.slot_with(&nodes, x) {
                    add_into(dx, g);
                }
            }
            &Op::SwapAxes01(x) => {
                let s = shp(x);
                let (a, b, c) = (s[0], s[1], s[2]);
                if let Some(dx) = self.slot_with(&nodes, x) {
                    for i in 0..a {
                        for j in 0..b {
                            let dst = (i * b + j) * c;
                            let src = (j * a + i) * c;
                            add_into(&mut dx[dst..dst + c], &g[src..src + c]);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
            } => {
                let (q, k, v) = (*q, *k, *v);
                let (heads, tq, dh) = (shp(q)[0], shp(q)[1], shp(q)[2]);
                let tk = shp(k)[1];
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(q), val(k), val(v));
                let mut dp = vec![0.0; tq * tk];
                for h in 0..heads {
                    let gh = &g[h * tq * dh..(h + 1) * tq * dh];
                    let ph = &probs[h * tq * tk..(h + 1) * tq * tk];
                    let qs = h * tq * dh..(h + 1) * tq * dh;
                    let ks = h * tk * dh..(h + 1) * tk * dh;
                    if let Some(dv) = self.slot_with(&nodes, v) {
                        gemm(tk, tq, dh, ph, true, gh, false, &mut dv[ks.clone()], 1.0);
                    }
                    if !(nodes[q.0].requires_grad || nodes[k.0].requires_grad) {
                        continue;
                    }
                    gemm(tq, dh, tk, gh, false, &vd[ks.clone()], true, &mut dp, 0.0);
                    for i in 0..tq {
                        let prow = &ph[i * tk..(i + 1) * tk];
                        let drow = &mut dp[i * tk..(i + 1) * tk];
                        let dot: f64 = prow.iter().zip(drow.iter()).map(|(p, d)| p * d).sum();
                        for (d, p) in drow.iter_mut().zip(prow) {
                            *d = p * (*d - dot) * scale;
                        }
                    }
                    if let Some(dq) = self.slot_with(&nodes, q) {
                        gemm(tq, tk, dh, &dp, false, &kd[ks.clone()], false, &mut dq[qs.clone()], 1.0);
                    }
                    if let Some(dk) = self.slot_with(&nodes, k) {
                        gemm(tk, tq, dh, &dp, true, &qd[qs], false, &mut dk[ks], 1.0);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                denom,
                probs,
            } => {
                let vocab = shp(*logits)[1];
                let coef = g[0] / denom;
                if let Some(dl) = self.slot_with(&nodes, *logits) {
                    for r in (0..mask.len()).filter(|&r| mask[r]) {
                        let row = &mut dl[r * vocab..(r + 1) * vocab];
                        for (d, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *d += coef * p;
                        }
                        row[targets[r]] -= coef;
                    }
                }
            }
        }
        self.nodes = nodes;
    }

    /// `slot` for use while `self.nodes` is temporarily moved out.
    fn slot_with<'a>(&'a mut self, nodes: &[Node], v: Var) -> Option<&'a mut [f64]> {
        if !nodes[v.0].requires_grad {
            return None;
        }
        let n = nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
