//! Reverse-mode differentiation over a linear tape of tensor primitives.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and [`Tape::backward`] is a single reverse sweep.
//! Model parameters enter through [`Tape::param`], which records the
//! parameter-set version; replaying a tape after the parameters changed is
//! an error.

use std::sync::Arc;

use crate::capsule::{squash_in_place, ModelParams, ParamKind, ParamSet, NORM_EPS};
use crate::error::{Error, Result};
use crate::sparse::{spmm_values, SparseMatrix};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Margin-loss targets: supervised `(node, class)` pairs and hinge settings.
#[derive(Clone, Debug)]
pub struct MarginTargets {
    pub targets: Vec<(usize, usize)>,
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamKind),
    MatMulT { x: NodeId, w: NodeId },
    AddBias { x: NodeId, b: NodeId },
    Relu { x: NodeId },
    MulConst { x: NodeId, factor: Tensor },
    GroupNormalize { x: NodeId, group: usize },
    Squash { x: NodeId, group: usize },
    Softmax { x: NodeId, outer: usize, axis: usize, inner: usize },
    CapsuleTransform { h: NodeId, w: NodeId, k: usize, c: usize, fc: usize, fp: usize },
    CouplingSum { c: NodeId, uhat: NodeId, k: usize, cl: usize, fc: usize },
    Agreement { v: NodeId, uhat: NodeId, k: usize, cl: usize, fc: usize },
    SpMM { pattern: Arc<SparseMatrix>, values: Option<NodeId>, x: NodeId },
    LinComb { coeffs: NodeId, basis: Arc<Tensor> },
    Add { a: NodeId, b: NodeId },
    Square { x: NodeId },
    Sum { x: NodeId },
    MarginLoss { v: NodeId, fc: usize, spec: MarginTargets },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients for every tape node reached from the loss.
pub struct NodeGrads(Vec<Option<Tensor>>);

impl NodeGrads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params_version: Option<u64>,
    squash_fault: Option<f64>,
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scales every squash adjoint by `factor`. Negative control for
    /// gradient checking; never set in normal use.
    #[doc(hidden)]
    pub fn inject_squash_adjoint_fault(&mut self, factor: f64) {
        self.squash_fault = Some(factor);
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs_grad = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, &[])
    }

    /// Differentiable leaf bound to one tensor of `params`.
    pub fn param(&mut self, params: &ModelParams, kind: ParamKind) -> Result<NodeId> {
        let current = params.version();
        match self.params_version {
            Some(v) if v != current => {
                return Err(Error::StaleTape {
                    recorded: v,
                    current,
                })
            }
            _ => self.params_version = Some(current),
        }
        let value = params
            .get(kind)
            .ok_or_else(|| Error::Validation(format!("model has no {} tensor", kind.name())))?
            .clone();
        Ok(self.push(value, Op::Param(kind), &[]))
    }

    /// `x · wᵀ` for `x: (n, f)`, `w: (m, f)`. Zero entries of `x` are skipped.
    pub fn matmul_t(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(dim_err(format!(
                "matmul_t {:?} x {:?}ᵀ",
                xv.shape(),
                wv.shape()
            )));
        }
        let (n, f, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let wt = wv.transpose()?;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for (p, &a) in xv.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(&wt.data()[p * m..(p + 1) * m]) {
                    *o += a * b;
                }
            }
        }
        debug_assert_eq!(wt.shape(), &[f, m]);
        let value = Tensor::matrix(n, m, out)?;
        Ok(self.push(value, Op::MatMulT { x, w }, &[x, w]))
    }

    /// Adds `b` to every row of `x` (`b.len() == x.row_len()`).
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        let w = xv.row_len();
        if bv.len() != w {
            return Err(dim_err(format!(
                "bias of {} values for rows of {w}",
                bv.len()
            )));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, bb) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(value, Op::AddBias { x, b }, &[x, b]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: NodeId, factor: Tensor) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.len() != factor.len() {
            return Err(dim_err(format!(
                "mask of {} values for tensor of {}",
                factor.len(),
                xv.len()
            )));
        }
        let mut value = xv.clone();
        for (o, f) in value.data_mut().iter_mut().zip(factor.data()) {
            *o *= f;
        }
        Ok(self.push(value, Op::MulConst { x, factor }, &[x]))
    }

    /// Normalizes consecutive chunks of `group` values to unit length,
    /// dividing by `max(‖chunk‖, NORM_EPS)`.
    pub fn group_normalize(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if group == 0 || !xv.len().is_multiple_of(group) {
            return Err(dim_err(format!("group {group} does not divide {}", xv.len())));
        }
        let mut value = xv.clone();
        for chunk in value.data_mut().chunks_mut(group) {
            let n = chunk.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            chunk.iter_mut().for_each(|v| *v /= n);
        }
        Ok(self.push(value, Op::GroupNormalize { x, group }, &[x]))
    }

    /// Capsule squash over consecutive chunks of `group` values.
    pub fn squash(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if group == 0 || !xv.len().is_multiple_of(group) {
            return Err(dim_err(format!("group {group} does not divide {}", xv.len())));
        }
        let mut value = xv.clone();
        value.data_mut().chunks_mut(group).for_each(squash_in_place);
        Ok(self.push(value, Op::Squash { x, group }, &[x]))
    }

    /// Softmax along `axis` of `x` viewed as `(outer, axis, inner)`.
    pub fn softmax(&mut self, x: NodeId, outer: usize, axis: usize, inner: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if outer * axis * inner != xv.len() || axis == 0 {
            return Err(dim_err(format!(
                "softmax view ({outer}, {axis}, {inner}) of {} values",
                xv.len()
            )));
        }
        let mut value = xv.clone();
        let d = value.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * axis + a) * inner + i;
                let max = (0..axis).map(|a| d[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for a in 0..axis {
                    let e = (d[idx(a)] - max).exp();
                    d[idx(a)] = e;
                    sum += e;
                }
                for a in 0..axis {
                    d[idx(a)] /= sum;
                }
            }
        }
        Ok(self.push(value, Op::Softmax { x, outer, axis, inner }, &[x]))
    }

    /// Prediction vectors `û[j,k,l] = W_kl h_j^(k)`.
    ///
    /// `h: (n, k·fp)`, `w: (k, c, fc, fp)` → `(n, k, c, fc)`.
    pub fn capsule_transform(&mut self, h: NodeId, w: NodeId, k: usize, c: usize, fc: usize, fp: usize) -> Result<NodeId> {
        let (hv, wv) = (self.value(h), self.value(w));
        if hv.row_len() != k * fp || wv.len() != k * c * fc * fp {
            return Err(dim_err(format!(
                "capsule transform h {:?}, w {:?} for k={k} c={c} fc={fc} fp={fp}",
                hv.shape(),
                wv.shape()
            )));
        }
        let n = hv.rows();
        let mut out = vec![0.0; n * k * c * fc];
        for j in 0..n {
            let hrow = hv.row(j);
            for kk in 0..k {
                let hk = &hrow[kk * fp..(kk + 1) * fp];
                for l in 0..c {
                    let base = ((j * k + kk) * c + l) * fc;
                    for o in 0..fc {
                        let wrow = &wv.data()[(((kk * c + l) * fc) + o) * fp..][..fp];
                        out[base + o] = wrow.iter().zip(hk).map(|(a, b)| a * b).sum();
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, k, c, fc], out)?;
        Ok(self.push(value, Op::CapsuleTransform { h, w, k, c, fc, fp }, &[h, w]))
    }

    /// `p[j,l] = Σ_k c[j,k,l] û[j,k,l]` → `(n, c, fc)`.
    pub fn coupling_sum(&mut self, c: NodeId, uhat: NodeId) -> Result<NodeId> {
        let (cv, uv) = (self.value(c), self.value(uhat));
        let [n, k, cl, fc] = match *uv.shape() {
            [n, k, cl, fc] => [n, k, cl, fc],
            _ => return Err(dim_err(format!("û has shape {:?}", uv.shape()))),
        };
        if cv.len() != n * k * cl {
            return Err(dim_err(format!("couplings {:?} for û {:?}", cv.shape(), uv.shape())));
        }
        let mut out = vec![0.0; n * cl * fc];
        for j in 0..n {
            for kk in 0..k {
                for l in 0..cl {
                    let w = cv.data()[(j * k + kk) * cl + l];
                    let src = &uv.data()[((j * k + kk) * cl + l) * fc..][..fc];
                    let dst = &mut out[(j * cl + l) * fc..][..fc];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, cl, fc], out)?;
        Ok(self.push(value, Op::CouplingSum { c, uhat, k, cl, fc }, &[c, uhat]))
    }

    /// Routing agreement `a[j,k,l] = v[j,l] · û[j,k,l]` → `(n, k, c)`.
    pub fn agreement(&mut self, v: NodeId, uhat: NodeId) -> Result<NodeId> {
        let (vv, uv) = (self.value(v), self.value(uhat));
        let [n, k, cl, fc] = match *uv.shape() {
            [n, k, cl, fc] => [n, k, cl, fc],
            _ => return Err(dim_err(format!("û has shape {:?}", uv.shape()))),
        };
        if vv.len() != n * cl * fc {
            return Err(dim_err(format!("v {:?} for û {:?}", vv.shape(), uv.shape())));
        }
        let mut out = vec![0.0; n * k * cl];
        for j in 0..n {
            for kk in 0..k {
                for l in 0..cl {
                    let a = &uv.data()[((j * k + kk) * cl + l) * fc..][..fc];
                    let b = &vv.data()[(j * cl + l) * fc..][..fc];
                    out[(j * k + kk) * cl + l] = a.iter().zip(b).map(|(x, y)| x * y).sum();
                }
            }
        }
        let value = Tensor::new(vec![n, k, cl], out)?;
        Ok(self.push(value, Op::Agreement { v, uhat, k, cl, fc }, &[v, uhat]))
    }

    /// Sparse-dense product with the matrix's own (constant) values.
    pub fn spmm_const(&mut self, pattern: Arc<SparseMatrix>, x: NodeId) -> Result<NodeId> {
        let value = spmm_values(&pattern, pattern.values(), self.value(x))?;
        Ok(self.push(value, Op::SpMM { pattern, values: None, x }, &[x]))
    }

    /// Sparse-dense product whose stored values come from tape node `values`.
    pub fn spmm(&mut self, pattern: Arc<SparseMatrix>, values: NodeId, x: NodeId) -> Result<NodeId> {
        let value = spmm_values(&pattern, self.value(values).data(), self.value(x))?;
        Ok(self.push(
            value,
            Op::SpMM {
                pattern,
                values: Some(values),
                x,
            },
            &[values, x],
        ))
    }

    /// `Σ_h coeffs[h] · basis[h, :]`.
    pub fn lin_comb(&mut self, coeffs: NodeId, basis: Arc<Tensor>) -> Result<NodeId> {
        let cv = self.value(coeffs);
        if basis.shape().len() != 2 || basis.rows() != cv.len() {
            return Err(dim_err(format!(
                "{} coefficients for basis {:?}",
                cv.len(),
                basis.shape()
            )));
        }
        let mut out = vec![0.0; basis.row_len()];
        for (h, &w) in cv.data().iter().enumerate() {
            for (o, b) in out.iter_mut().zip(basis.row(h)) {
                *o += w * b;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::LinComb { coeffs, basis }, &[coeffs]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let mut value = av.clone();
        value.add_assign(bv);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square { x }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    /// Mean over `spec.targets` of the summed per-class hinge-squared terms
    /// on capsule lengths of `v: (n, c, fc)`.
    pub fn margin_loss(&mut self, v: NodeId, spec: MarginTargets) -> Result<NodeId> {
        let vv = self.value(v);
        let [n, c, fc] = match *vv.shape() {
            [n, c, fc] => [n, c, fc],
            _ => return Err(dim_err(format!("class capsules have shape {:?}", vv.shape()))),
        };
        if spec.targets.is_empty() {
            return Err(Error::Validation("margin loss over an empty mask".into()));
        }
        let mut total = 0.0;
        for &(node, label) in &spec.targets {
            if node >= n || label >= c {
                return Err(Error::OutOfRange {
                    index: if node >= n { node } else { label },
                    len: if node >= n { n } else { c },
                });
            }
            for l in 0..c {
                let len = norm(&vv.data()[(node * c + l) * fc..][..fc]);
                total += margin_term(len, l == label, &spec);
            }
        }
        let value = Tensor::scalar(total / spec.targets.len() as f64);
        Ok(self.push(value, Op::MarginLoss { v, fc, spec }, &[v]))
    }

    /// Reverse sweep from the scalar `loss`, returning per-node gradients.
    pub fn backward_nodes(&self, loss: NodeId) -> Result<NodeGrads> {
        if self.value(loss).len() != 1 {
            return Err(dim_err(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(NodeGrads(grads))
    }

    /// Gradients of `loss` with respect to every tensor of `params`.
    /// Tensors the loss does not reach get zero gradients.
    pub fn backward(&self, loss: NodeId, params: &ModelParams) -> Result<ParamSet> {
        if let Some(recorded) = self.params_version {
            if recorded != params.version() {
                return Err(Error::StaleTape {
                    recorded,
                    current: params.version(),
                });
            }
        }
        let node_grads = self.backward_nodes(loss)?;
        let mut out = params.tensors().zeros_like();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(kind) = node.op {
                if let (Some(g), Some(slot)) = (node_grads.0[idx].as_ref(), out.get_mut(kind)) {
                    slot.add_assign(g);
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMulT { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, f, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if self.wants(*w) {
                    // Accumulate gwᵀ (f × m) row-contiguously, skipping zero inputs.
                    let mut gwt = vec![0.0; f * m];
                    for i in 0..n {
                        let grow = g.row(i);
                        for (p, &a) in xv.row(i).iter().enumerate() {
                            if a == 0.0 {
                                continue;
                            }
                            for (o, gg) in gwt[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += a * gg;
                            }
                        }
                    }
                    let gw = Tensor::matrix(f, m, gwt)?.transpose()?;
                    self.accumulate(grads, *w, gw);
                }
                if self.wants(*x) {
                    let gx = g.matmul(wv)?;
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::AddBias { x, b } => {
                if self.wants(*b) {
                    let w = g.row_len();
                    let mut gb = vec![0.0; w];
                    for r in 0..g.rows() {
                        for (o, v) in gb.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    let gb = Tensor::new(self.value(*b).shape().to_vec(), gb)?;
                    self.accumulate(grads, *b, gb);
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (o, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *o = 0.0;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MulConst { x, factor } => {
                let mut gx = g.clone();
                for (o, f) in gx.data_mut().iter_mut().zip(factor.data()) {
                    *o *= f;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GroupNormalize { x, group } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                for ((gxc, xc), (yc, gc)) in gx
                    .data_mut()
                    .chunks_mut(*group)
                    .zip(xv.data().chunks(*group))
                    .zip(out.data().chunks(*group).zip(g.data().chunks(*group)))
                {
                    let n = norm(xc);
                    if n > NORM_EPS {
                        let dot: f64 = yc.iter().zip(gc).map(|(a, b)| a * b).sum();
                        for i in 0..*group {
                            gxc[i] = (gc[i] - yc[i] * dot) / n;
                        }
                    } else {
                        for i in 0..*group {
                            gxc[i] = gc[i] / NORM_EPS;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Squash { x, group } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                for ((gxc, uc), gc) in gx
                    .data_mut()
                    .chunks_mut(*group)
                    .zip(xv.data().chunks(*group))
                    .zip(g.data().chunks(*group))
                {
                    squash_adjoint(uc, gc, gxc);
                }
                if let Some(f) = self.squash_fault {
                    gx = gx.scale(f);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax {
                x,
                outer,
                axis,
                inner,
            } => {
                let (outer, axis, inner) = (*outer, *axis, *inner);
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * axis + a) * inner + i;
                        let dot: f64 = (0..axis).map(|a| y[idx(a)] * g.data()[idx(a)]).sum();
                        for a in 0..axis {
                            gx[idx(a)] = y[idx(a)] * (g.data()[idx(a)] - dot);
                        }
                    }
                }
                let gx = Tensor::new(self.value(*x).shape().to_vec(), gx)?;
                self.accumulate(grads, *x, gx);
            }
            Op::CapsuleTransform { h, w, k, c, fc, fp } => {
                let (k, c, fc, fp) = (*k, *c, *fc, *fp);
                let (hv, wv) = (self.value(*h), self.value(*w));
                let n = hv.rows();
                let mut gh = Tensor::zeros(hv.shape());
                let mut gw = Tensor::zeros(wv.shape());
                let want_h = self.wants(*h);
                let want_w = self.wants(*w);
                for j in 0..n {
                    for kk in 0..k {
                        for l in 0..c {
                            let gbase = ((j * k + kk) * c + l) * fc;
                            for o in 0..fc {
                                let go = g.data()[gbase + o];
                                if go == 0.0 {
                                    continue;
                                }
                                let woff = ((kk * c + l) * fc + o) * fp;
                                if want_h {
                                    let ghk = &mut gh.row_mut(j)[kk * fp..(kk + 1) * fp];
                                    for (t, wvv) in ghk.iter_mut().zip(&wv.data()[woff..woff + fp]) {
                                        *t += go * wvv;
                                    }
                                }
                                if want_w {
                                    let hk = &hv.row(j)[kk * fp..(kk + 1) * fp];
                                    for (t, hh) in gw.data_mut()[woff..woff + fp].iter_mut().zip(hk) {
                                        *t += go * hh;
                                    }
                                }
                            }
                        }
                    }
                }
                if want_h {
                    self.accumulate(grads, *h, gh);
                }
                if want_w {
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::CouplingSum { c, uhat, k, cl, fc } => {
                let (k, cl, fc) = (*k, *cl, *fc);
                let (cv, uv) = (self.value(*c), self.value(*uhat));
                let n = uv.rows();
                let mut gc = Tensor::zeros(cv.shape());
                let mut gu = Tensor::zeros(uv.shape());
                for j in 0..n {
                    for kk in 0..k {
                        for l in 0..cl {
                            let ci = (j * k + kk) * cl + l;
                            let gp = &g.data()[(j * cl + l) * fc..][..fc];
                            let u = &uv.data()[ci * fc..][..fc];
                            gc.data_mut()[ci] = gp.iter().zip(u).map(|(a, b)| a * b).sum();
                            let w = cv.data()[ci];
                            for (t, gg) in gu.data_mut()[ci * fc..][..fc].iter_mut().zip(gp) {
                                *t = w * gg;
                            }
                        }
                    }
                }
                self.accumulate(grads, *c, gc);
                self.accumulate(grads, *uhat, gu);
            }
            Op::Agreement { v, uhat, k, cl, fc } => {
                let (k, cl, fc) = (*k, *cl, *fc);
                let (vv, uv) = (self.value(*v), self.value(*uhat));
                let n = uv.rows();
                let mut gv = Tensor::zeros(vv.shape());
                let mut gu = Tensor::zeros(uv.shape());
                for j in 0..n {
                    for kk in 0..k {
                        for l in 0..cl {
                            let ai = (j * k + kk) * cl + l;
                            let ga = g.data()[ai];
                            if ga == 0.0 {
                                continue;
                            }
                            let vo = (j * cl + l) * fc;
                            let uo = ai * fc;
                            for o in 0..fc {
                                gv.data_mut()[vo + o] += ga * uv.data()[uo + o];
                                gu.data_mut()[uo + o] = ga * vv.data()[vo + o];
                            }
                        }
                    }
                }
                self.accumulate(grads, *v, gv);
                self.accumulate(grads, *uhat, gu);
            }
            Op::SpMM { pattern, values, x } => {
                let xv = self.value(*x);
                let vals: &[f64] = match values {
                    Some(id) => self.value(*id).data(),
                    None => pattern.values(),
                };
                let w = xv.row_len();
                let offsets = pattern.row_offsets();
                let cols = pattern.col_indices();
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(xv.shape());
                    for r in 0..pattern.n_rows() {
                        let grow = &g.data()[r * w..(r + 1) * w];
                        for e in offsets[r]..offsets[r + 1] {
                            let a = vals[e];
                            for (t, gg) in gx.row_mut(cols[e]).iter_mut().zip(grow) {
                                *t += a * gg;
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if let Some(id) = values {
                    if self.wants(*id) {
                        let mut gvals = vec![0.0; vals.len()];
                        for r in 0..pattern.n_rows() {
                            let grow = &g.data()[r * w..(r + 1) * w];
                            for e in offsets[r]..offsets[r + 1] {
                                gvals[e] = grow.iter().zip(xv.row(cols[e])).map(|(a, b)| a * b).sum();
                            }
                        }
                        self.accumulate(grads, *id, Tensor::vector(gvals));
                    }
                }
            }
            Op::LinComb { coeffs, basis } => {
                let gc: Vec<f64> = (0..basis.rows())
                    .map(|h| basis.row(h).iter().zip(g.data()).map(|(a, b)| a * b).sum())
                    .collect();
                let gc = Tensor::new(self.value(*coeffs).shape().to_vec(), gc)?;
                self.accumulate(grads, *coeffs, gc);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Square { x } => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (o, v) in gx.data_mut().iter_mut().zip(xv.data()) {
                    *o *= 2.0 * v;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum { x } => {
                let gx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                self.accumulate(grads, *x, gx);
            }
            Op::MarginLoss { v, fc, spec } => {
                let vv = self.value(*v);
                let c = vv.shape()[1];
                let fc = *fc;
                let scale = g.data()[0] / spec.targets.len() as f64;
                let mut gv = Tensor::zeros(vv.shape());
                for &(node, label) in &spec.targets {
                    for l in 0..c {
                        let off = (node * c + l) * fc;
                        let vec = &vv.data()[off..off + fc];
                        let len = norm(vec);
                        let dlen = margin_term_grad(len, l == label, spec) * scale;
                        if dlen == 0.0 {
                            continue;
                        }
                        let denom = len.max(NORM_EPS);
                        for (t, x) in gv.data_mut()[off..off + fc].iter_mut().zip(vec) {
                            *t += dlen * x / denom;
                        }
                    }
                }
                self.accumulate(grads, *v, gv);
            }
        }
        Ok(())
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn margin_term(len: f64, positive: bool, spec: &MarginTargets) -> f64 {
    if positive {
        (spec.m_plus - len).max(0.0).powi(2)
    } else {
        spec.lambda * (len - spec.m_minus).max(0.0).powi(2)
    }
}

fn margin_term_grad(len: f64, positive: bool, spec: &MarginTargets) -> f64 {
    if positive {
        -2.0 * (spec.m_plus - len).max(0.0)
    } else {
        2.0 * spec.lambda * (len - spec.m_minus).max(0.0)
    }
}

/// Vector-Jacobian product of squash at `u` with cotangent `g`.
fn squash_adjoint(u: &[f64], g: &[f64], out: &mut [f64]) {
    let n = norm(u);
    let n2 = n * n;
    let dot: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
    let (scale, radial) = if n > NORM_EPS {
        // v = s(n)·u with s(n) = n / (1 + n²).
        let s = n / (1.0 + n2);
        let ds = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
        (s, ds / n)
    } else {
        // v = q·u with q = n² / ((1 + n²)·eps).
        let q = n2 / ((1.0 + n2) * NORM_EPS);
        (q, 2.0 / ((1.0 + n2) * (1.0 + n2) * NORM_EPS))
    };
    for i in 0..u.len() {
        out[i] = scale * g[i] + radial * dot * u[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsule::{ModelDims, ModelParams};

    fn tiny_params() -> ModelParams {
        ModelParams::init(
            ModelDims {
                n_features: 3,
                n_primary: 2,
                primary_dim: 2,
                n_classes: 2,
                class_dim: 2,
                n_hops: 2,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let params = tiny_params();
        let mut tape = Tape::new();
        let mut terms = Vec::new();
        for kind in params.kinds() {
            let p = tape.param(&params, kind).unwrap();
            let sq = tape.square(p);
            terms.push(tape.sum(sq));
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t).unwrap();
        }
        let grads = tape.backward(loss, &params).unwrap();
        for kind in params.kinds() {
            let want = params.get(kind).unwrap().scale(2.0);
            assert_eq!(grads.get(kind).unwrap(), &want);
        }
    }

    #[test]
    fn unused_params_get_zero_gradients() {
        let params = tiny_params();
        let mut tape = Tape::new();
        let b = tape.param(&params, ParamKind::ClassBias).unwrap();
        let sq = tape.square(b);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss, &params).unwrap();
        let z = grads.get(ParamKind::Zeta).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(z.len(), 2);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut params = tiny_params();
        let mut tape = Tape::new();
        let b = tape.param(&params, ParamKind::ClassBias).unwrap();
        let loss = tape.sum(b);
        params.get_mut(ParamKind::ClassBias).unwrap().data_mut()[0] += 1.0;
        assert!(matches!(tape.backward(loss, &params), Err(Error::StaleTape { .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let params = tiny_params();
        let mut tape = Tape::new();
        let b = tape.param(&params, ParamKind::ClassBias).unwrap();
        assert!(tape.backward(b, &params).is_err());
    }

    #[test]
    fn squash_adjoint_matches_finite_difference() {
        let u = [0.3, -1.2, 0.7];
        let g = [0.5, 0.25, -1.0];
        let mut analytic = [0.0; 3];
        squash_adjoint(&u, &g, &mut analytic);
        let f = |x: &[f64]| {
            let mut v = x.to_vec();
            squash_in_place(&mut v);
            v.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
        };
        for i in 0..3 {
            let mut up = u;
            let mut dn = u;
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn squash_adjoint_at_zero_is_zero() {
        let mut out = [1.0; 2];
        squash_adjoint(&[0.0, 0.0], &[1.0, -1.0], &mut out);
        assert_eq!(out, [0.0, 0.0]);
    }
}
