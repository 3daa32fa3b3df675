//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output, and
//! [`Graph::backward`] walks the tape in reverse accumulating gradients for
//! nodes that (transitively) depend on a `requires_grad` leaf. Graphs are
//! rebuilt for every forward pass.

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, grad_check_detailed, GradCheckReport};

use crate::entangle::ConvKernel;
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;
use kernels::{Conv1dDims, Conv2dDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Zero,
    Circular,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddBroadcast(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    BatchMatMul(NodeId, NodeId),
    TransposeLast2(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        padding: Padding,
        dims: Conv2dDims,
    },
    Conv1d {
        x: NodeId,
        kernel: NodeId,
        padding: Padding,
        dims: Conv1dDims,
    },
    AvgPool2(NodeId),
    MeanAxis1(NodeId),
    Reshape(NodeId),
    SliceLast {
        x: NodeId,
        start: usize,
    },
    ConcatOuter(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient or zeros if the node did not influence the loss.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Leaf node; differentiable iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn param(&mut self, tensor: Tensor) -> NodeId {
        self.leaf(tensor.with_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.leaf(tensor.with_grad(false))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect());
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("add", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias, positional table).
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.shape().ends_with(vb.shape()) {
            return Err(mismatch("add_broadcast", va, vb));
        }
        let inner = vb.len();
        let bd = vb.data();
        let data = va
            .data()
            .chunks(inner)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("mul", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    /// `a[..., k] x b[k, n] -> [..., n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.rank() != 2 || va.last_dim() != vb.shape()[0] {
            return Err(mismatch("matmul", va, vb));
        }
        let (k, n) = (vb.shape()[0], vb.shape()[1]);
        let m = va.len() / k;
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(va.data(), vb.data(), &mut out, m, k, n);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg))
    }

    /// `a[b, m, k] x b[b, k, n] -> [b, m, n]`; rank-2 operands are a batch of one.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ba, m, k) = bmm_dims(va.shape()).ok_or_else(|| mismatch("batch_matmul", va, vb))?;
        let (bb, k2, n) = bmm_dims(vb.shape()).ok_or_else(|| mismatch("batch_matmul", va, vb))?;
        if ba != bb || k != k2 || va.rank() != vb.rank() {
            return Err(mismatch("batch_matmul", va, vb));
        }
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            kernels::matmul_acc(
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = va.shape().to_vec();
        let r = shape.len();
        shape[r - 1] = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::BatchMatMul(a, b), rg))
    }

    pub fn transpose_last2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let (b, m, n) = bmm_dims(v.shape()).ok_or_else(|| mismatch("transpose", v, v))?;
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for i in 0..b {
            for r in 0..m {
                for c in 0..n {
                    out[i * m * n + c * m + r] = src[i * m * n + r * n + c];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::TransposeLast2(x), rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Normalizes the last axis to zero mean and unit variance (eps 1e-5),
    /// then applies `scale` and `shift`.
    pub fn layernorm(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-5;
        let v = self.value(x);
        let d = v.last_dim();
        let (vs, vb) = (self.value(scale), self.value(shift));
        if vs.shape() != [d] || vb.shape() != [d] {
            return Err(mismatch("layernorm", v, vs));
        }
        let rows = v.len() / d;
        let mut xhat = vec![0.0; v.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vs.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Stride-1 SAME cross-correlation of `[n, h, w, c_in]` (or `[h, w, c_in]`)
    /// features with a `[k, k, c_in, c_out]` kernel node.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, padding: Padding) -> Result<NodeId> {
        let (vx, vk) = (self.value(x), self.value(kernel));
        let dims = conv2d_dims(vx, vk)?;
        let out = kernels::conv2d_forward(vx.data(), vk.data(), dims, padding);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = dims.cout;
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                x,
                kernel,
                padding,
                dims,
            },
            rg,
        ))
    }

    /// Stride-1 SAME 1D cross-correlation of `[n, l, c_in]` (or `[l, c_in]`)
    /// sequences with a `[k, c_in, c_out]` kernel node.
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId, padding: Padding) -> Result<NodeId> {
        let (vx, vk) = (self.value(x), self.value(kernel));
        let dims = conv1d_dims(vx, vk)?;
        let out = kernels::conv1d_forward(vx.data(), vk.data(), dims, padding);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = dims.cout;
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv1d {
                x,
                kernel,
                padding,
                dims,
            },
            rg,
        ))
    }

    /// Non-overlapping 2x2 mean pooling of `[n, h, w, c]`, `h` and `w` even.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let &[n, h, w, c] = v.shape() else {
            return Err(mismatch("avg_pool2", v, v));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(mismatch("avg_pool2", v, v));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * ho * wo * c];
        let src = v.data();
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let ib = ((b * h + y) * w + xx) * c;
                    let ob = ((b * ho + y / 2) * wo + xx / 2) * c;
                    for ch in 0..c {
                        out[ob + ch] += 0.25 * src[ib + ch];
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, ho, wo, c], out), Op::AvgPool2(x), rg))
    }

    /// `[a, b, c] -> [a, c]`, mean over the middle axis.
    pub fn mean_axis1(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let &[a, b, c] = v.shape() else {
            return Err(mismatch("mean_axis1", v, v));
        };
        let mut out = vec![0.0; a * c];
        let src = v.data();
        let inv = 1.0 / b as f64;
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    out[i * c + k] += src[(i * b + j) * c + k] * inv;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![a, c], out), Op::MeanAxis1(x), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).reshape(shape)?.with_grad(false);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x);
        let d = v.last_dim();
        if len == 0 || start + len > d {
            return Err(Error::InvalidArgument(format!("slice {start}+{len} exceeds last dim {d}")));
        }
        let data = v.data().chunks(d).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceLast { x, start }, rg))
    }

    /// Concatenation along the leading axis.
    pub fn concat_outer(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = xs.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut outer = 0;
        let mut data = Vec::new();
        for &id in xs {
            let v = self.value(id);
            if v.shape()[1..] != tail[..] {
                return Err(mismatch("concat_outer", self.value(*first), v));
            }
            outer += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![outer];
        shape.extend(tail);
        let rg = self.rg(xs);
        Ok(self.push(Tensor::from_parts(shape, data), Op::ConcatOuter(xs.to_vec()), rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean softmax cross-entropy of `[rows, classes]` logits against class
    /// indices.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        let k = v.last_dim();
        let rows = v.len() / k;
        if targets.len() != rows || targets.iter().any(|&t| t >= k) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: {} targets for {rows} rows of {k} classes",
                targets.len()
            )));
        }
        let mut probs = v.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(k).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
            softmax_in_place(row);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / rows as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse accumulation from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.wants(id) {
                        accumulate(grads, id, g.iter().copied());
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().copied());
                }
                if self.wants(*b) {
                    let inner = self.value(*b).len();
                    let mut gb = vec![0.0; inner];
                    for chunk in g.chunks(inner) {
                        for (d, s) in gb.iter_mut().zip(chunk) {
                            *d += s;
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().zip(vb).map(|(x, y)| x * y));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().zip(va).map(|(x, y)| x * y));
                }
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.iter().map(|v| v * s)),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.len() / k;
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nt_acc(g, vb.data(), &mut ga, m, k, n);
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_tn_acc(va.data(), g, &mut gb, m, k, n);
                    accumulate(grads, *b, gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = bmm_dims(va.shape()).unwrap();
                let n = vb.last_dim();
                if self.wants(*a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        kernels::matmul_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        kernels::matmul_tn_acc(
                            &va.data()[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::TransposeLast2(x) => {
                // out is [b, n, m]; transpose back
                let (b, n, m) = bmm_dims(out.shape()).unwrap();
                let mut gx = vec![0.0; g.len()];
                for i in 0..b {
                    for r in 0..n {
                        for c in 0..m {
                            gx[i * m * n + c * n + r] = g[i * m * n + r * m + c];
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                accumulate(grads, *x, g.iter().zip(vx).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }));
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                accumulate(grads, *x, g.iter().zip(vx).map(|(gv, &xv)| gv * kernels::gelu_grad(xv)));
            }
            Op::Sigmoid(x) => {
                accumulate(grads, *x, g.iter().zip(out.data()).map(|(gv, &y)| gv * y * (1.0 - y)));
            }
            Op::Tanh(x) => {
                accumulate(grads, *x, g.iter().zip(out.data()).map(|(gv, &y)| gv * (1.0 - y * y)));
            }
            Op::Softmax(x) => {
                let d = out.last_dim();
                let mut gx = vec![0.0; g.len()];
                for ((grow, yrow), dst) in g.chunks(d).zip(out.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dst[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let sv = self.value(*scale).data();
                if self.wants(*scale) {
                    let mut gs = vec![0.0; d];
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gs[j] += grow[j] * hrow[j];
                        }
                    }
                    accumulate(grads, *scale, gs);
                }
                if self.wants(*shift) {
                    let mut gb = vec![0.0; d];
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += grow[j];
                        }
                    }
                    accumulate(grads, *shift, gb);
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, ((grow, hrow), dst)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let gh: Vec<f64> = grow.iter().zip(sv).map(|(a, b)| a * b).collect();
                        let mean_gh = gh.iter().sum::<f64>() / d as f64;
                        let mean_ghh = gh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dst[j] = inv_std[r] * (gh[j] - mean_gh - hrow[j] * mean_ghh);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Conv2d {
                x,
                kernel,
                padding,
                dims,
            } => {
                if self.wants(*x) {
                    let gx = kernels::conv2d_backward_input(g, self.value(*kernel).data(), *dims, *padding);
                    accumulate(grads, *x, gx);
                }
                if self.wants(*kernel) {
                    let gk = kernels::conv2d_backward_kernel(g, self.value(*x).data(), *dims, *padding);
                    accumulate(grads, *kernel, gk);
                }
            }
            Op::Conv1d {
                x,
                kernel,
                padding,
                dims,
            } => {
                if self.wants(*x) {
                    let gx = kernels::conv1d_backward_input(g, self.value(*kernel).data(), *dims, *padding);
                    accumulate(grads, *x, gx);
                }
                if self.wants(*kernel) {
                    let gk = kernels::conv1d_backward_kernel(g, self.value(*x).data(), *dims, *padding);
                    accumulate(grads, *kernel, gk);
                }
            }
            Op::AvgPool2(x) => {
                let &[n, h, w, c] = self.value(*x).shape() else { unreachable!() };
                let (ho, wo) = (h / 2, w / 2);
                let mut gx = vec![0.0; n * h * w * c];
                for b in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let ib = ((b * h + y) * w + xx) * c;
                            let ob = ((b * ho + y / 2) * wo + xx / 2) * c;
                            for ch in 0..c {
                                gx[ib + ch] = 0.25 * g[ob + ch];
                            }
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::MeanAxis1(x) => {
                let &[a, b, c] = self.value(*x).shape() else { unreachable!() };
                let inv = 1.0 / b as f64;
                let mut gx = vec![0.0; a * b * c];
                for i in 0..a {
                    for j in 0..b {
                        for k in 0..c {
                            gx[(i * b + j) * c + k] = g[i * c + k] * inv;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.iter().copied()),
            Op::SliceLast { x, start } => {
                let d = self.value(*x).last_dim();
                let len = out.last_dim();
                let mut gx = vec![0.0; self.value(*x).len()];
                for (dst, src) in gx.chunks_mut(d).zip(g.chunks(len)) {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatOuter(xs) => {
                let mut offset = 0;
                for &id in xs {
                    let len = self.value(id).len();
                    if self.wants(id) {
                        accumulate(grads, id, g[offset..offset + len].iter().copied());
                    }
                    offset += len;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, std::iter::repeat_n(g[0] / n as f64, n));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.value(*logits).last_dim();
                let rows = targets.len();
                let s = g[0] / rows as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * k + t] -= s;
                }
                accumulate(grads, *logits, gl);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: impl IntoIterator<Item = f64>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contrib.into_iter().collect()),
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn bmm_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [m, n] => Some((1, m, n)),
        [b, m, n] => Some((b, m, n)),
        _ => None,
    }
}

fn conv2d_dims(x: &Tensor, k: &Tensor) -> Result<Conv2dDims> {
    let (n, h, w, cin) = match *x.shape() {
        [h, w, c] => (1, h, w, c),
        [n, h, w, c] => (n, h, w, c),
        _ => return Err(mismatch("conv2d", x, k)),
    };
    match *k.shape() {
        [kh, kw, ci, co] if kh == kw && kh % 2 == 1 && ci == cin => Ok(Conv2dDims {
            n,
            h,
            w,
            cin,
            cout: co,
            k: kh,
        }),
        _ => Err(mismatch("conv2d", x, k)),
    }
}

fn conv1d_dims(x: &Tensor, k: &Tensor) -> Result<Conv1dDims> {
    let (n, l, cin) = match *x.shape() {
        [l, c] => (1, l, c),
        [n, l, c] => (n, l, c),
        _ => return Err(mismatch("conv1d", x, k)),
    };
    match *k.shape() {
        [kk, ci, co] if kk % 2 == 1 && ci == cin => Ok(Conv1dDims {
            n,
            l,
            cin,
            cout: co,
            k: kk,
        }),
        _ => Err(mismatch("conv1d", x, k)),
    }
}

/// Query/key/value/output projections for single-head self-attention.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

/// `softmax(Q K^T / sqrt(D)) V W_o` over `[L, D]` or `[B, L, D]` tokens.
/// Returns the output and the attention weights.
pub fn attention(g: &mut Graph, x: NodeId, p: AttentionNodes) -> Result<(NodeId, NodeId)> {
    let d = g.value(x).last_dim();
    for w in [p.wq, p.wk, p.wv, p.wo] {
        if g.shape(w) != [d, d] {
            return Err(mismatch("attention", g.value(x), g.value(w)));
        }
    }
    let q = g.matmul(x, p.wq)?;
    let k = g.matmul(x, p.wk)?;
    let v = g.matmul(x, p.wv)?;
    let kt = g.transpose_last2(k)?;
    let scores = g.batch_matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax(scores);
    let mixed = g.batch_matmul(weights, v)?;
    let out = g.matmul(mixed, p.wo)?;
    Ok((out, weights))
}

/// Forward-only convolution of a tensor with a constant kernel.
pub fn conv2d(x: &Tensor, kernel: &ConvKernel, padding: Padding) -> Result<Tensor> {
    let dims = conv2d_dims(x, kernel.tensor())?;
    let out = kernels::conv2d_forward(x.data(), kernel.tensor().data(), dims, padding);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dims.cout;
    Ok(Tensor::from_parts(shape, out))
}

pub fn conv1d(x: &Tensor, kernel: &ConvKernel, padding: Padding) -> Result<Tensor> {
    let dims = conv1d_dims(x, kernel.tensor())?;
    let out = kernels::conv1d_forward(x.data(), kernel.tensor().data(), dims, padding);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dims.cout;
    Ok(Tensor::from_parts(shape, out))
}

/// Operator norm of a 2D kernel acting on `h x w` maps with circular padding,
/// by matrix-free power iteration.
pub fn conv_operator_norm(kernel: &ConvKernel, h: usize, w: usize) -> Result<f64> {
    if !kernel.is_2d() {
        return Err(Error::InvalidArgument("expected a 2D kernel".into()));
    }
    let dims = Conv2dDims {
        n: 1,
        h,
        w,
        cin: kernel.channels_in(),
        cout: kernel.channels_out(),
        k: kernel.kernel_size(),
    };
    let kd = kernel.tensor().data();
    Ok(linalg::power_iteration_gram(h * w * dims.cin, 10_000, 1e-14, |v| {
        let y = kernels::conv2d_forward(v, kd, dims, Padding::Circular);
        kernels::conv2d_backward_input(&y, kd, dims, Padding::Circular)
    }))
}
