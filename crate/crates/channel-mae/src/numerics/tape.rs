//! Wengert-tape reverse-mode differentiation over [`Tensor`] values.
//!
//! Ops execute eagerly and append one node per result, so the tape order is
//! already topological. `backward` sweeps the tape once in reverse, which
//! makes gradient accumulation order fixed and runs bit-identical across
//! repeats. Forward/backward on one tape is single-threaded by contract;
//! independent tapes may run concurrently.

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_raw, Tensor};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Row-broadcast bias add: (t,d) + (d).
    AddBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Gelu(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    SumAll(NodeId),
    MeanRows(NodeId),
    SumRows(NodeId),
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    /// Places `visible` rows at `idx` positions of a (total_rows, d) output and
    /// fills every other row with the broadcast `fill` vector.
    ScatterRestore {
        visible: NodeId,
        fill: NodeId,
        idx: Vec<usize>,
        total_rows: usize,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    /// Elementwise multiply by a broadcast one-element node.
    MulScalar(NodeId, NodeId),
    /// Per-row log-sum-exp over entries where `mask` is true, max-stabilized.
    MaskedLogSumExpRows {
        x: NodeId,
        mask: Vec<bool>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    /// Op-specific cached forward quantities used by the backward rule.
    aux: Vec<f64>,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
///
/// Only leaf nodes retain gradients after the sweep; interior gradients are
/// consumed as soon as their node is processed. Leaves off every path to the
/// loss report zeros.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given leaf, zeros if unreached.
    pub fn get(&self, tape: &Tape, id: NodeId) -> Tensor {
        match &self.by_node[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.nodes[id.0].value.shape().to_vec()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.push_aux(op, value, Vec::new())
    }

    fn push_aux(&mut self, op: Op, value: Tensor, aux: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value, aux });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input tensor (constant or trainable parameter).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, "add")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, "sub")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| c * x).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("shape preserved");
        self.push(Op::Scale(a, c), value)
    }

    /// (t,d) + broadcast (d) bias.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = vx.cols();
        if vb.shape().len() != 1 || vb.numel() != d {
            return Err(Error::Shape {
                op: "add_bias",
                left: vx.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(Op::AddBias(x, bias), value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul_raw(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(Error::contract(format!(
                "transpose requires a matrix, got shape {:?}",
                va.shape()
            )));
        }
        let value = transpose_raw(va);
        Ok(self.push(Op::Transpose(a), value))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(Error::contract(format!(
                "softmax_rows requires a matrix, got shape {:?}",
                vx.shape()
            )));
        }
        let d = vx.cols();
        let mut data = vec![0.0; vx.numel()];
        for (r, row) in vx.data().chunks(d).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * d..(r + 1) * d];
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(Op::SoftmaxRows(x), value))
    }

    /// Per-row standardization followed by the learnable affine map.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = vx.cols();
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive".to_string()));
        }
        if vg.numel() != d || vb.numel() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                left: vx.shape().to_vec(),
                right: vg.shape().to_vec(),
            });
        }
        let t = vx.rows();
        let mut data = vec![0.0; vx.numel()];
        // aux = [invstd per row, normalized values]
        let mut aux = vec![0.0; t + t * d];
        for (r, row) in vx.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let invstd = 1.0 / (var + eps).sqrt();
            aux[r] = invstd;
            for (c, &v) in row.iter().enumerate() {
                let norm = (v - mean) * invstd;
                aux[t + r * d + c] = norm;
                data[r * d + c] = vg.data()[c] * norm + vb.data()[c];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push_aux(Op::LayerNorm { x, gain, bias }, value, aux))
    }

    /// Exact GELU: x * Phi(x) with the erf-based normal CDF.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * normal_cdf(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("shape preserved");
        self.push(Op::Gelu(x), value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("shape preserved");
        self.push(Op::Relu(x), value)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.exp()).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("shape preserved");
        self.push(Op::Exp(x), value)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.sqrt()).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("shape preserved");
        self.push(Op::Sqrt(x), value)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| 1.0 / v).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("shape preserved");
        self.push(Op::Recip(x), value)
    }

    /// Sum of all elements, left-to-right, as a 1-element tensor.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    /// Column means over rows: (t,d) -> (1,d).
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(Error::contract(format!(
                "mean_rows requires a matrix, got shape {:?}",
                vx.shape()
            )));
        }
        let (t, d) = (vx.rows(), vx.cols());
        let mut out = vec![0.0; d];
        for row in vx.data().chunks(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= t as f64;
        }
        let value = Tensor::matrix(1, d, out)?;
        Ok(self.push(Op::MeanRows(x), value))
    }

    /// Row sums: (m,n) -> (m,1).
    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(Error::contract(format!(
                "sum_rows requires a matrix, got shape {:?}",
                vx.shape()
            )));
        }
        let (m, n) = (vx.rows(), vx.cols());
        let out: Vec<f64> = vx.data().chunks(n).map(|row| row.iter().sum()).collect();
        let value = Tensor::matrix(m, 1, out)?;
        Ok(self.push(Op::SumRows(x), value))
    }

    /// Selects rows of `x` by index, in order.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        let d = vx.cols();
        let rows = vx.rows();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(Error::contract(format!(
                    "gather_rows index {i} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&vx.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::matrix(idx.len(), d, data)?;
        Ok(self.push(Op::GatherRows { x: x, idx: idx.to_vec() }, value))
    }

    /// Rebuilds a full (total_rows, d) sequence: row `idx[j]` takes `visible`
    /// row j, every other row takes the shared `fill` vector.
    pub fn scatter_restore(
        &mut self,
        visible: NodeId,
        fill: NodeId,
        idx: &[usize],
        total_rows: usize,
    ) -> Result<NodeId> {
        let (vv, vf) = (self.value(visible), self.value(fill));
        let d = vv.cols();
        if vf.numel() != d {
            return Err(Error::Shape {
                op: "scatter_restore",
                left: vv.shape().to_vec(),
                right: vf.shape().to_vec(),
            });
        }
        if idx.len() != vv.rows() {
            return Err(Error::contract(format!(
                "scatter_restore: {} indices for {} visible rows",
                idx.len(),
                vv.rows()
            )));
        }
        let mut data = Vec::with_capacity(total_rows * d);
        for _ in 0..total_rows {
            data.extend_from_slice(vf.data());
        }
        for (j, &i) in idx.iter().enumerate() {
            if i >= total_rows {
                return Err(Error::contract(format!(
                    "scatter_restore index {i} out of range for {total_rows} rows"
                )));
            }
            data[i * d..(i + 1) * d].copy_from_slice(&vv.data()[j * d..(j + 1) * d]);
        }
        let value = Tensor::matrix(total_rows, d, data)?;
        Ok(self.push(
            Op::ScatterRestore { visible, fill, idx: idx.to_vec(), total_rows },
            value,
        ))
    }

    /// Vertical stack; every part must share the column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of zero parts".to_string()));
        }
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != d {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: vec![rows, d],
                    right: vp.shape().to_vec(),
                });
            }
            rows += vp.rows();
            data.extend_from_slice(vp.data());
        }
        let value = Tensor::matrix(rows, d, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    /// Horizontal stack; every part must share the row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero parts".to_string()));
        }
        let t = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != t {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; t * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let vp = self.value(p);
            for r in 0..t {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&vp.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::matrix(t, total, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    /// Elementwise multiply by a one-element node, broadcast over `x`.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (vx, vs) = (self.value(x), self.value(s));
        if !vs.is_scalar() {
            return Err(Error::contract(format!(
                "mul_scalar: scalar operand has shape {:?}",
                vs.shape()
            )));
        }
        let c = vs.item();
        let data = vx.data().iter().map(|&v| c * v).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(Op::MulScalar(x, s), value))
    }

    /// Per-row log(sum over masked entries of exp), stabilized by the row max
    /// over masked entries. Each row must keep at least one masked-in entry.
    pub fn masked_logsumexp_rows(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let vx = self.value(x);
        let (m, n) = (vx.rows(), vx.cols());
        if mask.len() != m * n {
            return Err(Error::contract(format!(
                "masked_logsumexp_rows: mask length {} for {}x{} matrix",
                mask.len(),
                m,
                n
            )));
        }
        let mut data = vec![0.0; m];
        let mut aux = vec![0.0; 2 * m]; // per-row [max, sum]
        for r in 0..m {
            let row = &vx.data()[r * n..(r + 1) * n];
            let rmask = &mask[r * n..(r + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (v, &keep) in row.iter().zip(rmask) {
                if keep && *v > max {
                    max = *v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::contract(format!(
                    "masked_logsumexp_rows: row {r} has no masked-in entries"
                )));
            }
            let mut sum = 0.0;
            for (v, &keep) in row.iter().zip(rmask) {
                if keep {
                    sum += (v - max).exp();
                }
            }
            aux[2 * r] = max;
            aux[2 * r + 1] = sum;
            data[r] = sum.ln() + max;
        }
        let value = Tensor::matrix(m, 1, data)?;
        Ok(self.push_aux(Op::MaskedLogSumExpRows { x, mask: mask.to_vec() }, value, aux))
    }

    /// Reverse sweep from a scalar loss node. Returns gradients for leaves;
    /// leaves with no path to the loss get zeros via [`Gradients::get`].
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_val = self.value(loss);
        if !loss_val.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(loss_val.shape().to_vec(), vec![1.0]).unwrap());

        for i in (0..=loss.0).rev() {
            let g = match &self.nodes[i].op {
                Op::Leaf => continue, // keep the accumulated gradient
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { by_node: grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum(grads, *a, self.value(*a).shape(), |d| add_assign(d, g.data()));
                accum(grads, *b, self.value(*b).shape(), |d| add_assign(d, g.data()));
            }
            Op::Sub(a, b) => {
                accum(grads, *a, self.value(*a).shape(), |d| add_assign(d, g.data()));
                accum(grads, *b, self.value(*b).shape(), |d| {
                    for (o, &v) in d.iter_mut().zip(g.data()) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                accum(grads, *a, self.value(*a).shape(), |d| {
                    for ((o, &gv), &bv) in d.iter_mut().zip(g.data()).zip(&vb) {
                        *o += gv * bv;
                    }
                });
                accum(grads, *b, self.value(*b).shape(), |d| {
                    for ((o, &gv), &av) in d.iter_mut().zip(g.data()).zip(&va) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                accum(grads, *a, self.value(*a).shape(), |d| {
                    for (o, &gv) in d.iter_mut().zip(g.data()) {
                        *o += c * gv;
                    }
                });
            }
            Op::AddBias(x, b) => {
                let d_cols = self.value(*x).cols();
                accum(grads, *x, self.value(*x).shape(), |d| add_assign(d, g.data()));
                accum(grads, *b, self.value(*b).shape(), |db| {
                    for row in g.data().chunks(d_cols) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let bt = transpose_raw(vb);
                let da = matmul_raw(g, &bt).expect("backward matmul shapes");
                let at = transpose_raw(va);
                let db = matmul_raw(&at, g).expect("backward matmul shapes");
                accum(grads, *a, va.shape(), |d| add_assign(d, da.data()));
                accum(grads, *b, vb.shape(), |d| add_assign(d, db.data()));
            }
            Op::Transpose(a) => {
                let gt = transpose_raw(g);
                accum(grads, *a, self.value(*a).shape(), |d| add_assign(d, gt.data()));
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum();
                    for c in 0..n {
                        dx[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                accum(grads, *x, self.value(*x).shape(), |d| add_assign(d, &dx));
            }
            Op::LayerNorm { x, gain, bias } => {
                let vx = self.value(*x);
                let vg = self.value(*gain);
                let (t, dcols) = (vx.rows(), vx.cols());
                let invstd = &node.aux[..t];
                let norm = &node.aux[t..];
                let mut dx = vec![0.0; vx.numel()];
                let mut dgain = vec![0.0; dcols];
                let mut dbias = vec![0.0; dcols];
                for r in 0..t {
                    let gr = &g.data()[r * dcols..(r + 1) * dcols];
                    let nr = &norm[r * dcols..(r + 1) * dcols];
                    let mut mean_gy = 0.0;
                    let mut mean_gyn = 0.0;
                    for c in 0..dcols {
                        let gy = gr[c] * vg.data()[c];
                        mean_gy += gy;
                        mean_gyn += gy * nr[c];
                        dgain[c] += gr[c] * nr[c];
                        dbias[c] += gr[c];
                    }
                    mean_gy /= dcols as f64;
                    mean_gyn /= dcols as f64;
                    for c in 0..dcols {
                        let gy = gr[c] * vg.data()[c];
                        dx[r * dcols + c] = invstd[r] * (gy - mean_gy - nr[c] * mean_gyn);
                    }
                }
                accum(grads, *x, vx.shape(), |d| add_assign(d, &dx));
                accum(grads, *gain, vg.shape(), |d| add_assign(d, &dgain));
                accum(grads, *bias, self.value(*bias).shape(), |d| add_assign(d, &dbias));
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let dx: Vec<f64> = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv * (normal_cdf(v) + v * normal_pdf(v)))
                    .collect();
                accum(grads, *x, vx.shape(), |d| add_assign(d, &dx));
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let dx: Vec<f64> = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accum(grads, *x, vx.shape(), |d| add_assign(d, &dx));
            }
            Op::Exp(x) => {
                let y = &node.value;
                let dx: Vec<f64> = y.data().iter().zip(g.data()).map(|(&y, &gv)| gv * y).collect();
                accum(grads, *x, self.value(*x).shape(), |d| add_assign(d, &dx));
            }
            Op::Sqrt(x) => {
                let y = &node.value;
                let dx: Vec<f64> =
                    y.data().iter().zip(g.data()).map(|(&y, &gv)| gv * 0.5 / y).collect();
                accum(grads, *x, self.value(*x).shape(), |d| add_assign(d, &dx));
            }
            Op::Recip(x) => {
                let y = &node.value;
                let dx: Vec<f64> =
                    y.data().iter().zip(g.data()).map(|(&y, &gv)| -gv * y * y).collect();
                accum(grads, *x, self.value(*x).shape(), |d| add_assign(d, &dx));
            }
            Op::SumAll(x) => {
                let gv = g.item();
                accum(grads, *x, self.value(*x).shape(), |d| {
                    for o in d.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::MeanRows(x) => {
                let vx = self.value(*x);
                let (t, dcols) = (vx.rows(), vx.cols());
                let inv_t = 1.0 / t as f64;
                accum(grads, *x, vx.shape(), |d| {
                    for row in d.chunks_mut(dcols) {
                        for (o, &gv) in row.iter_mut().zip(g.data()) {
                            *o += gv * inv_t;
                        }
                    }
                });
            }
            Op::SumRows(x) => {
                let vx = self.value(*x);
                let n = vx.cols();
                accum(grads, *x, vx.shape(), |d| {
                    for (r, row) in d.chunks_mut(n).enumerate() {
                        let gv = g.data()[r];
                        for o in row.iter_mut() {
                            *o += gv;
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let vx = self.value(*x);
                let d_cols = vx.cols();
                accum(grads, *x, vx.shape(), |d| {
                    for (j, &i) in idx.iter().enumerate() {
                        let src = &g.data()[j * d_cols..(j + 1) * d_cols];
                        for (o, &v) in d[i * d_cols..(i + 1) * d_cols].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ScatterRestore { visible, fill, idx, total_rows } => {
                let vv = self.value(*visible);
                let d_cols = vv.cols();
                accum(grads, *visible, vv.shape(), |d| {
                    for (j, &i) in idx.iter().enumerate() {
                        let src = &g.data()[i * d_cols..(i + 1) * d_cols];
                        for (o, &v) in d[j * d_cols..(j + 1) * d_cols].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                });
                let mut visible_rows = vec![false; *total_rows];
                for &i in idx {
                    visible_rows[i] = true;
                }
                accum(grads, *fill, self.value(*fill).shape(), |d| {
                    for r in 0..*total_rows {
                        if !visible_rows[r] {
                            let src = &g.data()[r * d_cols..(r + 1) * d_cols];
                            for (o, &v) in d.iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let d_cols = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let slice = &g.data()[off * d_cols..(off + rows) * d_cols];
                    accum(grads, p, self.value(p).shape(), |d| add_assign(d, slice));
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let t = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = vec![0.0; t * w];
                    for r in 0..t {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    accum(grads, p, self.value(p).shape(), |d| add_assign(d, &dp));
                    off += w;
                }
            }
            Op::MulScalar(x, s) => {
                let vx = self.value(*x);
                let c = self.value(*s).item();
                accum(grads, *x, vx.shape(), |d| {
                    for (o, &gv) in d.iter_mut().zip(g.data()) {
                        *o += c * gv;
                    }
                });
                let ds: f64 = g.data().iter().zip(vx.data()).map(|(gv, xv)| gv * xv).sum();
                accum(grads, *s, self.value(*s).shape(), |d| d[0] += ds);
            }
            Op::MaskedLogSumExpRows { x, mask } => {
                let vx = self.value(*x);
                let (m, n) = (vx.rows(), vx.cols());
                let mut dx = vec![0.0; vx.numel()];
                for r in 0..m {
                    let max = node.aux[2 * r];
                    let sum = node.aux[2 * r + 1];
                    let gv = g.data()[r];
                    for c in 0..n {
                        if mask[r * n + c] {
                            dx[r * n + c] = gv * (vx.data()[r * n + c] - max).exp() / sum;
                        }
                    }
                }
                accum(grads, *x, vx.shape(), |d| add_assign(d, &dx));
            }
        }
    }
}

fn accum<F: FnOnce(&mut [f64])>(
    grads: &mut [Option<Tensor>],
    id: NodeId,
    shape: &[usize],
    write: F,
) {
    let slot = &mut grads[id.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape.to_vec()));
    }
    write(slot.as_mut().unwrap().data_mut());
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

pub(crate) fn transpose_raw(t: &Tensor) -> Tensor {
    let (m, n) = (t.rows(), t.cols());
    let mut data = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            data[c * m + r] = t.data()[r * n + c];
        }
    }
    Tensor::matrix(n, m, data).expect("transpose shape")
}

/// Standard normal CDF via erf.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}
