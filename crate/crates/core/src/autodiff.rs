//! Tensor-level reverse-mode differentiation.
//!
//! A [`GradientTape`] records each operation together with the values it
//! produced. [`GradientTape::backward`] walks the records in reverse and
//! accumulates adjoints; every leaf created with `requires_grad` gets exactly
//! one adjoint slot. A tape can be differentiated once; a second call is a
//! contract error because the forward values belong to a finished step.
//!
//! Operations are coarse (a whole linear layer, a whole batch of rays) so the
//! tape stays short and the kernels stay cache friendly.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{contract, Result};
use crate::nn::Activation;
use crate::renderer::{composite_backward, composite_forward, CompositeRecord};
use crate::sparse::SparseMix;
use crate::tensor::{axpy, linear_row, Tensor};
use crate::volume::{conv3d_backward, conv3d_forward};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Activation {
        x: Var,
        act: Activation,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Mix {
        x: Var,
        mix: Arc<SparseMix>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        dims: [usize; 3],
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    RoundF32 {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Encode {
        x: Var,
        bands: usize,
    },
    Composite {
        sdf: Var,
        color: Var,
        sem: Option<Var>,
        log_s: Var,
        record: Box<CompositeRecord>,
    },
    WeightedL1 {
        pred: Var,
        target: Tensor,
        weight: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct GradientTape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

/// Adjoints of every `requires_grad` leaf, keyed by its [`Var`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Moves a leaf's adjoint out; `None` if the leaf did not require grad.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}

impl Default for GradientTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradientTape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(contract("variable is detached from this tape"));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `x W^T + b` with `W: out x in`, `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.cols() || bv.shape() != (1, wv.rows()) {
            return Err(contract(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut y = Tensor::zeros(xv.rows(), wv.rows());
        for i in 0..xv.rows() {
            linear_row(xv.row(i), wv, bv.data(), y.row_mut(i));
        }
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        self.check(x)?;
        if act == Activation::Linear {
            return Ok(x);
        }
        let mut y = self.value(x).clone();
        for v in y.data_mut() {
            *v = act.apply(*v);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(y, Op::Activation { x, act }, rg))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(contract("concat of nothing"));
        };
        for &p in parts {
            self.check(p)?;
        }
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(contract("concat: row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut y = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let r = self.value(p).row(i);
                y.row_mut(i)[off..off + r.len()].copy_from_slice(r);
                off += r.len();
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(contract("slice_cols out of range"));
        }
        let mut y = Tensor::zeros(xv.rows(), len);
        for i in 0..xv.rows() {
            y.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(y, Op::Slice { x, start }, rg))
    }

    pub fn mix(&mut self, x: Var, mix: Arc<SparseMix>) -> Result<Var> {
        self.check(x)?;
        let y = mix.apply(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(y, Op::Mix { x, mix }, rg))
    }

    /// Zero-padded 3x3x3 convolution over an x-major voxel grid.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, dims: [usize; 3]) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let y = conv3d_forward(self.value(x), dims, self.value(w), self.value(b).data())?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(y, Op::Conv3d { x, w, b, dims }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(contract("add: shapes differ"));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let rg = self.needs(&[a, b]);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.check(x)?;
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v *= k);
        let rg = self.needs(&[x]);
        Ok(self.push(y, Op::Scale { x, k }, rg))
    }

    /// Rounds every entry to the nearest `f32`. The gradient passes through
    /// unchanged (straight-through).
    pub fn round_f32(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        let rg = self.needs(&[x]);
        Ok(self.push(y, Op::RoundF32 { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, rg))
    }

    /// Row-wise positional encoding of `n x 3` points.
    pub fn encode_positions(&mut self, x: Var, bands: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if xv.cols() != 3 {
            return Err(contract("positional encoding expects n x 3 input"));
        }
        let dim = crate::nn::pe_dim(bands);
        let mut data = Vec::with_capacity(xv.rows() * dim);
        for i in 0..xv.rows() {
            let r = xv.row(i);
            crate::nn::positional_encoding(&[r[0], r[1], r[2]], bands, &mut data);
        }
        let y = Tensor::from_vec(xv.rows(), dim, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(y, Op::Encode { x, bands }, rg))
    }

    /// Alpha compositing of `rays x samples_per_ray` samples (ray-major).
    ///
    /// Output columns: color (3), depth, weight sum, then semantic features.
    pub fn composite(
        &mut self,
        sdf: Var,
        color: Var,
        sem: Option<Var>,
        log_s: Var,
        t: Vec<f64>,
        samples_per_ray: usize,
    ) -> Result<Var> {
        for v in [sdf, color, log_s].into_iter().chain(sem) {
            self.check(v)?;
        }
        let n = self.value(sdf).rows();
        if self.value(sdf).cols() != 1
            || self.value(color).shape() != (n, 3)
            || t.len() != n
            || self.value(log_s).shape() != (1, 1)
            || samples_per_ray == 0
            || !n.is_multiple_of(samples_per_ray)
            || sem.is_some_and(|s| self.value(s).rows() != n)
        {
            return Err(contract("composite: inconsistent shapes"));
        }
        let sem_t = sem.map(|s| self.value(s));
        let (out, record) = composite_forward(
            self.value(sdf).data(),
            self.value(color),
            sem_t,
            self.value(log_s).data()[0].exp(),
            &t,
            samples_per_ray,
        )?;
        let mut inputs = vec![sdf, color, log_s];
        inputs.extend(sem);
        let rg = self.needs(&inputs);
        Ok(self.push(
            out,
            Op::Composite {
                sdf,
                color,
                sem,
                log_s,
                record: Box::new(record),
            },
            rg,
        ))
    }

    /// The composite bookkeeping (alphas, transmittances, weights) of a
    /// node created by [`GradientTape::composite`].
    pub fn composite_record(&self, v: Var) -> Option<&CompositeRecord> {
        match &self.nodes.get(v.index)?.op {
            Op::Composite { record, .. } if v.tape == self.id => Some(record),
            _ => None,
        }
    }

    /// `sum(weight * |pred - target|)` as a `1 x 1` node. The subgradient of
    /// `|x|` at zero is taken as zero.
    ///
    /// Each row is reduced left to right, then the row totals are added in
    /// ascending order, so permuting rows leaves the result bit-identical.
    pub fn weighted_l1(&mut self, pred: Var, target: Tensor, weight: Tensor) -> Result<Var> {
        self.check(pred)?;
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape() != weight.shape() {
            return Err(contract("weighted_l1: shapes differ"));
        }
        let mut rows: Vec<f64> = (0..p.rows())
            .map(|r| {
                let mut s = 0.0;
                for ((a, b), w) in p.row(r).iter().zip(target.row(r)).zip(weight.row(r)) {
                    s += w * (a - b).abs();
                }
                s
            })
            .collect();
        rows.sort_by(f64::total_cmp);
        let s = rows.iter().sum();
        let rg = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedL1 {
                pred,
                target,
                weight,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.consumed {
            return Err(contract(
                "tape already differentiated; record a new forward pass",
            ));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(contract("backward needs a scalar (1 x 1) node"));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut adj: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        adj[loss.index] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.index).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
        }
        let grads = adj
            .into_iter()
            .zip(&self.nodes)
            .map(|(a, node)| match node.op {
                Op::Leaf if node.requires_grad => {
                    Some(a.unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols())))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        let node = &self.nodes[v.index];
        if !node.requires_grad {
            return None;
        }
        let (r, c) = node.value.shape();
        Some(adj[v.index].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if let Some(gx) = self.slot(adj, *x) {
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let out = gx.row_mut(r);
                        for (o, &go) in gr.iter().enumerate() {
                            if go != 0.0 {
                                axpy(go, wv.row(o), out);
                            }
                        }
                    }
                }
                if let Some(gw) = self.slot(adj, *w) {
                    for r in 0..g.rows() {
                        let xr = xv.row(r);
                        for (o, &go) in g.row(r).iter().enumerate() {
                            if go != 0.0 {
                                axpy(go, xr, gw.row_mut(o));
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(adj, *b) {
                    for r in 0..g.rows() {
                        axpy(1.0, g.row(r), gb.data_mut());
                    }
                }
            }
            Op::Activation { x, act } => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(adj, *x) {
                    for ((gxi, &gi), &xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *gxi += gi * act.derivative(xi);
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(gp) = self.slot(adj, p) {
                        for r in 0..g.rows() {
                            axpy(1.0, &g.row(r)[off..off + c], gp.row_mut(r));
                        }
                    }
                    off += c;
                }
            }
            Op::Slice { x, start } => {
                if let Some(gx) = self.slot(adj, *x) {
                    for r in 0..g.rows() {
                        let dst = &mut gx.row_mut(r)[*start..*start + g.cols()];
                        axpy(1.0, g.row(r), dst);
                    }
                }
            }
            Op::Mix { x, mix } => {
                if let Some(gx) = self.slot(adj, *x) {
                    mix.apply_transpose_add(g, gx);
                }
            }
            Op::Conv3d { x, w, b, dims } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut gw = Tensor::zeros(wv.rows(), wv.cols());
                let mut gb = vec![0.0; wv.rows()];
                let mut gx = self.nodes[x.index]
                    .requires_grad
                    .then(|| Tensor::zeros(xv.rows(), xv.cols()));
                conv3d_backward(xv, *dims, wv, g, gx.as_mut(), &mut gw, &mut gb);
                if let (Some(gx), Some(slot)) = (gx, self.slot(adj, *x)) {
                    slot.add_assign(&gx);
                }
                if let Some(slot) = self.slot(adj, *w) {
                    slot.add_assign(&gw);
                }
                if let Some(slot) = self.slot(adj, *b) {
                    axpy(1.0, &gb, slot.data_mut());
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(adj, v) {
                        s.add_assign(g);
                    }
                }
            }
            Op::Scale { x, k } => {
                if let Some(gx) = self.slot(adj, *x) {
                    axpy(*k, g.data(), gx.data_mut());
                }
            }
            Op::RoundF32 { x } => {
                if let Some(gx) = self.slot(adj, *x) {
                    gx.add_assign(g);
                }
            }
            Op::Sum { x } => {
                let gs = g.data()[0];
                if let Some(gx) = self.slot(adj, *x) {
                    gx.data_mut().iter_mut().for_each(|v| *v += gs);
                }
            }
            Op::Encode { x, bands } => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(adj, *x) {
                    for r in 0..xv.rows() {
                        let p = xv.row(r);
                        let gr = g.row(r);
                        let mut acc = [gr[0], gr[1], gr[2]];
                        for k in 0..*bands {
                            let freq = (1u64 << k) as f64 * std::f64::consts::PI;
                            let base = 3 + 6 * k;
                            for a in 0..3 {
                                let (s, c) = (freq * p[a]).sin_cos();
                                acc[a] += gr[base + a] * freq * c - gr[base + 3 + a] * freq * s;
                            }
                        }
                        axpy(1.0, &acc, gx.row_mut(r));
                    }
                }
            }
            Op::Composite {
                sdf,
                color,
                sem,
                log_s,
                record,
            } => {
                let sharp = self.value(*log_s).data()[0].exp();
                let grads = composite_backward(
                    record,
                    self.value(*sdf).data(),
                    self.value(*color),
                    sem.map(|s| self.value(s)),
                    sharp,
                    g,
                );
                if let Some(s) = self.slot(adj, *sdf) {
                    axpy(1.0, &grads.sdf, s.data_mut());
                }
                if let Some(s) = self.slot(adj, *color) {
                    axpy(1.0, grads.color.data(), s.data_mut());
                }
                if let (Some(sv), Some(gs)) = (sem, grads.sem.as_ref()) {
                    if let Some(s) = self.slot(adj, *sv) {
                        axpy(1.0, gs.data(), s.data_mut());
                    }
                }
                if let Some(s) = self.slot(adj, *log_s) {
                    // d/d(log s) = s * d/ds
                    s.data_mut()[0] += grads.sharpness * sharp;
                }
            }
            Op::WeightedL1 {
                pred,
                target,
                weight,
            } => {
                let gs = g.data()[0];
                let pv = self.value(*pred);
                if let Some(gp) = self.slot(adj, *pred) {
                    for (((gpi, a), b), w) in gp
                        .data_mut()
                        .iter_mut()
                        .zip(pv.data())
                        .zip(target.data())
                        .zip(weight.data())
                    {
                        let d = a - b;
                        let sign = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *gpi += gs * w * sign;
                    }
                }
            }
        }
        Ok(())
    }
}
