use std::rc::Rc;

use super::macs;
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, gemm_nt, gemm_tn, transpose, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which leaves participate in gradient computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GradMode {
    /// Only trainable parameters and explicit leaves.
    #[default]
    Trainable,
    /// Every parameter, frozen or not. Used by gradient checks.
    All,
    /// Forward only; nothing is differentiated.
    Off,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxMasked(Var, Rc<[bool]>),
    MeanMasked {
        x: Var,
        weights: Vec<f64>,
        denom: f64,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    BceWithLogits {
        x: Var,
        target: Vec<f64>,
    },
    /// Local gradient of the loss w.r.t. the four offsets, fixed at forward time.
    GiouLoss {
        x: Var,
        local: [f64; 4],
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of primitive applications for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so replaying indices in reverse
/// visits every node after all of its consumers.
pub struct Tape {
    nodes: Vec<Node>,
    mode: GradMode,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_mode(GradMode::Trainable)
    }

    pub fn with_mode(mode: GradMode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            grads: Vec::new(),
        }
    }

    pub fn mode(&self) -> GradMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.mode != GradMode::Off,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` took part.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a stored parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let rg = match self.mode {
            GradMode::Trainable => p.trainable,
            GradMode::All => true,
            GradMode::Off => false,
        };
        self.push(p.value.clone(), Op::Param(id), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rank() > 2 || ta.rank() > 2 || tb.rows() != k {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        macs::add((m * k * n) as u64);
        let out = Tensor::new(vec![m, n], gemm(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let out = Tensor::new(vec![c, r], transpose(t.data(), r, c))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`d` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.cols();
        if tb.len() != d {
            return Err(Error::shape("add_row", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Multiplies every element of `x` by the single element of `c`.
    pub fn scale_by(&mut self, x: Var, c: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(c));
        if tc.len() != 1 {
            return Err(Error::shape("scale_by", tx.shape(), tc.shape()));
        }
        let s = tc.item();
        let out = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|v| v * s).collect(),
        )?;
        let rg = self.rg(x) || self.rg(c);
        Ok(self.push(out, Op::ScaleBy(x, c), rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    /// Row-wise layer normalization with affine `gain` and `bias` of length `d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise softmax restricted to `allowed` positions (same length as `x`).
    /// Disallowed positions come out exactly zero.
    pub fn softmax_masked(&mut self, x: Var, allowed: Rc<[bool]>) -> Result<Var> {
        let tx = self.value(x);
        if allowed.len() != tx.len() {
            return Err(Error::shape("softmax_masked", tx.shape(), &[allowed.len()]));
        }
        let out = Tensor::new(
            tx.shape().to_vec(),
            softmax_rows(tx.data(), &allowed, tx.cols())?,
        )?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxMasked(x, allowed), rg))
    }

    /// `Σⱼ xⱼ·mⱼ / (Σⱼ mⱼ + eps)` over the rows of `x`; returns a length-`d` vector.
    pub fn mean_masked(&mut self, x: Var, mask: &[bool], eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = (tx.rows(), tx.cols());
        if mask.len() != n {
            return Err(Error::shape("mean_masked", tx.shape(), &[mask.len()]));
        }
        let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let denom = weights.iter().sum::<f64>() + eps;
        let mut acc = vec![0.0; d];
        for (j, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            for (a, v) in acc.iter_mut().zip(tx.row(j)) {
                *a += v * w;
            }
        }
        acc.iter_mut().for_each(|a| *a /= denom);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::vector(acc),
            Op::MeanMasked { x, weights, denom },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Layout("concat_rows of nothing".into()))?;
        let d = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != d {
                return Err(Error::shape(
                    "concat_rows",
                    self.value(*first).shape(),
                    t.shape(),
                ));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
            rg |= self.rg(p);
        }
        let out = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Layout("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        let mut rg = false;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(*first).shape(),
                    t.shape(),
                ));
            }
            cols += t.cols();
            rg |= self.rg(p);
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if start + len > t.rows() {
            return Err(Error::shape("slice_rows", t.shape(), &[start, len]));
        }
        let out = Tensor::new(
            vec![len, d],
            t.data()[start * d..(start + len) * d].to_vec(),
        )?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = (t.rows(), t.cols());
        if start + len > d {
            return Err(Error::shape("slice_cols", t.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `out[i] = x[indices[i]]`, row-wise; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::shape("gather_rows", t.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![indices.len(), d], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, indices.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean binary cross-entropy between `σ(x)` and `target`, in the
    /// overflow-free logit form.
    pub fn bce_with_logits(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.len() != target.len() {
            return Err(Error::shape("bce_with_logits", t.shape(), &[target.len()]));
        }
        let loss = t
            .data()
            .iter()
            .zip(target)
            .map(|(&z, &y)| bce_logit(z, y))
            .sum::<f64>()
            / t.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                x,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// `1 − GIoU` between the box `(cx − l, cy − t, cx + r, cy + b)` built from
    /// the four offsets in `ltrb` and the corner-form box `gt`.
    pub fn giou_loss(&mut self, ltrb: Var, center: (f64, f64), gt: [f64; 4]) -> Result<Var> {
        let t = self.value(ltrb);
        if t.len() != 4 {
            return Err(Error::shape("giou_loss", t.shape(), &[4]));
        }
        let o = t.data();
        let pred = [
            center.0 - o[0],
            center.1 - o[1],
            center.0 + o[2],
            center.1 + o[3],
        ];
        let (loss, dpred) = giou_loss_corners(pred, gt)?;
        // x1 = cx - l, y1 = cy - t, x2 = cx + r, y2 = cy + b
        let local = [-dpred[0], -dpred[1], dpred[2], dpred[3]];
        let rg = self.rg(ltrb);
        Ok(self.push(Tensor::scalar(loss), Op::GiouLoss { x: ltrb, local }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are kept on the tape
    /// (see [`Tape::grad`]) and added into `store` for every parameter leaf.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward_only(loss)?;
        self.accumulate_into(store);
        Ok(())
    }

    /// Reverse sweep without touching any parameter store.
    pub fn backward_only(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate(*id, g);
            }
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    send(*a, gemm_nt(g, tb.data(), m, n, k));
                }
                if self.rg(*b) {
                    send(*b, gemm_tn(ta.data(), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (c, r) = (node.value.rows(), node.value.cols());
                send(*a, transpose(g, c, r));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::AddRow(x, b) => {
                send(*x, g.to_vec());
                if self.rg(*b) {
                    let d = node.value.cols();
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    send(*b, db);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    send(*a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                }
                if self.rg(*b) {
                    send(*b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(x, s) => send(*x, g.iter().map(|v| v * s).collect()),
            Op::ScaleBy(x, c) => {
                let s = self.value(*c).item();
                if self.rg(*x) {
                    send(*x, g.iter().map(|v| v * s).collect());
                }
                if self.rg(*c) {
                    let dc = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(a, b)| a * b)
                        .sum();
                    send(*c, vec![dc]);
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                send(
                    *x,
                    g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                );
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                send(
                    *x,
                    g.iter().zip(xv).map(|(g, x)| g * gelu_grad(*x)).collect(),
                );
            }
            Op::Exp(x) => {
                let y = node.value.data();
                send(*x, g.iter().zip(y).map(|(g, y)| g * y).collect());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gv = self.value(*gain).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            dx[r * d + c] = is / d as f64 * (d as f64 * dh[c] - s1 - hr[c] * s2);
                        }
                    }
                    send(*x, dx);
                }
                if self.rg(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                    send(*gain, dg);
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                    }
                    send(*bias, db);
                }
            }
            Op::SoftmaxMasked(x, allowed) => {
                let d = node.value.cols();
                let y = node.value.data();
                let mut dx = vec![0.0; g.len()];
                for r in 0..node.value.rows() {
                    let span = r * d..(r + 1) * d;
                    let dot: f64 = g[span.clone()]
                        .iter()
                        .zip(&y[span.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for j in span {
                        if allowed[j] {
                            dx[j] = y[j] * (g[j] - dot);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::MeanMasked { x, weights, denom } => {
                let d = node.value.len();
                let mut dx = vec![0.0; weights.len() * d];
                for (j, w) in weights.iter().enumerate() {
                    if *w == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        dx[j * d + c] = g[c] * w / denom;
                    }
                }
                send(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    send(*p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for p in parts {
                    let t = self.value(*p);
                    let c = t.cols();
                    if self.rg(*p) {
                        let mut dp = Vec::with_capacity(t.len());
                        for row in g.chunks(total) {
                            dp.extend_from_slice(&row[col..col + c]);
                        }
                        send(*p, dp);
                    }
                    col += c;
                }
            }
            Op::SliceRows { x, start } => {
                let t = self.value(*x);
                let d = t.cols();
                let mut dx = vec![0.0; t.len()];
                dx[start * d..start * d + g.len()].copy_from_slice(g);
                send(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let t = self.value(*x);
                let d = t.cols();
                let len = node.value.cols();
                let mut dx = vec![0.0; t.len()];
                for (r, row) in g.chunks(len).enumerate() {
                    dx[r * d + start..r * d + start + len].copy_from_slice(row);
                }
                send(*x, dx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::GatherRows(x, indices) => {
                let t = self.value(*x);
                let d = t.cols();
                let mut dx = vec![0.0; t.len()];
                for (row, &i) in g.chunks(d).zip(indices) {
                    dx[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, v)| *a += v);
                }
                send(*x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::BceWithLogits { x, target } => {
                let n = target.len() as f64;
                let z = self.value(*x).data();
                send(
                    *x,
                    z.iter()
                        .zip(target)
                        .map(|(z, y)| g[0] * (sigmoid(*z) - y) / n)
                        .collect(),
                );
            }
            Op::GiouLoss { x, local } => send(*x, local.iter().map(|v| v * g[0]).collect()),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Row-wise masked softmax over `cols`-wide rows, max-subtracted.
pub(crate) fn softmax_rows(x: &[f64], allowed: &[bool], cols: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    for (r, (row, mask)) in x.chunks(cols).zip(allowed.chunks(cols)).enumerate() {
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::AllMasked { row: r });
        }
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for ((dst, v), m) in o.iter_mut().zip(row).zip(mask) {
            if *m {
                *dst = (v - max).exp();
                total += *dst;
            }
        }
        o.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// `1 − GIoU` for corner-form boxes and its gradient w.r.t. the predicted
/// corners. At exact ties between min/max arguments the subgradient favors
/// the ground-truth side.
pub(crate) fn giou_loss_corners(p: [f64; 4], t: [f64; 4]) -> Result<(f64, [f64; 4])> {
    let (pw, ph) = (p[2] - p[0], p[3] - p[1]);
    let (tw, th) = (t[2] - t[0], t[3] - t[1]);
    if !(tw > 0.0 && th > 0.0) {
        return Err(Error::DegenerateBox(format!("target {t:?}")));
    }
    if pw < 0.0 || ph < 0.0 {
        return Err(Error::DegenerateBox(format!("prediction {p:?}")));
    }
    let ap = pw * ph;
    let at = tw * th;
    let ix1 = p[0].max(t[0]);
    let iy1 = p[1].max(t[1]);
    let ix2 = p[2].min(t[2]);
    let iy2 = p[3].min(t[3]);
    let (iw, ih) = ((ix2 - ix1).max(0.0), (iy2 - iy1).max(0.0));
    let inter = iw * ih;
    let union = ap + at - inter;
    let cw = p[2].max(t[2]) - p[0].min(t[0]);
    let ch = p[3].max(t[3]) - p[1].min(t[1]);
    let hull = cw * ch;
    let loss = 2.0 - inter / union - union / hull;

    let dl_di = -(union + inter) / (union * union) + 1.0 / hull;
    let dl_dap = inter / (union * union) - 1.0 / hull;
    let dl_dc = union / (hull * hull);

    let mut d = [0.0; 4];
    // area of prediction
    d[0] += dl_dap * -ph;
    d[2] += dl_dap * ph;
    d[1] += dl_dap * -pw;
    d[3] += dl_dap * pw;
    // intersection
    if iw > 0.0 && ih > 0.0 {
        if p[0] > t[0] {
            d[0] += dl_di * -ih;
        }
        if p[2] < t[2] {
            d[2] += dl_di * ih;
        }
        if p[1] > t[1] {
            d[1] += dl_di * -iw;
        }
        if p[3] < t[3] {
            d[3] += dl_di * iw;
        }
    }
    // enclosing hull
    if p[0] < t[0] {
        d[0] += dl_dc * -ch;
    }
    if p[2] > t[2] {
        d[2] += dl_dc * ch;
    }
    if p[1] < t[1] {
        d[1] += dl_dc * -cw;
    }
    if p[3] > t[3] {
        d[3] += dl_dc * cw;
    }
    Ok((loss, d))
}
