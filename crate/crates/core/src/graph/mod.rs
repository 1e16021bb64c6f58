//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! Every operation appends a node whose inputs already exist, so insertion
//! order is a topological order and [`Graph::backward`] is a single reverse
//! sweep. Gradients reaching a node along several paths are summed.

mod kernels;

pub(crate) use kernels::sigmoid;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::{ConvGeom, LstmSaved};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves spatial extent.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    Unary {
        kind: UnaryKind,
        x: NodeId,
    },
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    MulConst {
        x: NodeId,
        mask: Vec<f64>,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormInfer {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    Pick {
        x: NodeId,
        index: usize,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Stack {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Select {
        x: NodeId,
        axis: usize,
        index: usize,
    },
    LstmGates {
        z: NodeId,
        c_prev: Option<NodeId>,
        hidden: usize,
        saved: LstmSaved,
    },
    Bce {
        pred: NodeId,
        target: Vec<f64>,
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    retain: bool,
}

/// Per-channel batch statistics observed by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&[f64]> {
        self.grads.get(node.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when no path reached the node.
    pub fn tensor(&self, node: NodeId) -> Tensor {
        let shape = &self.shapes[node.0];
        match self.get(node) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn prod(s: &[usize]) -> usize {
    s.iter().product()
}

/// (outer, extent, inner) around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (prod(&shape[..axis]), shape[axis], prod(&shape[axis + 1..]))
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
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

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        self.nodes[node.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            retain: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    /// A trainable leaf; its gradient is always kept.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        let id = self.push(t, Op::Leaf, true);
        self.nodes[id.0].retain = true;
        id
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Keep this intermediate node's gradient after backward.
    pub fn retain_grad(&mut self, node: NodeId) {
        self.nodes[node.0].retain = true;
    }

    /// Convolution over `[n, h, w, cin]` (or `[h, w, cin]`) with a
    /// `[k, k, cin, cout]` kernel and optional `[cout]` bias.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: Option<NodeId>, padding: Padding) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (n, h, w, cin) = match xs.as_slice() {
            &[h, w, c] => (1, h, w, c),
            &[n, h, w, c] => (n, h, w, c),
            _ => return Err(Error::dim("conv2d", format!("input must be rank 3 or 4, got {xs:?}"))),
        };
        let &[k, k2, kcin, cout] = ks.as_slice() else {
            return Err(Error::dim("conv2d", format!("kernel must be rank 4, got {ks:?}")));
        };
        if k != k2 {
            return Err(Error::dim("conv2d", format!("kernel axes 0/1 differ: {k} vs {k2}")));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel extent must be odd, got {k}")));
        }
        if kcin != cin {
            return Err(Error::dim(
                "conv2d",
                format!("input channels (axis {}) = {cin} but kernel axis 2 = {kcin}", xs.len() - 1),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim("conv2d", format!("bias {:?} vs cout {cout}", self.shape(b))));
            }
        }
        let (pad, oh, ow) = match padding {
            Padding::Same => (k / 2, h, w),
            Padding::Valid => {
                if h < k || w < k {
                    return Err(Error::dim("conv2d", format!("valid {k}x{k} kernel larger than {h}x{w}")));
                }
                (0, h - k + 1, w - k + 1)
            }
        };
        let geom = ConvGeom { n, h, w, cin, k, cout, pad, oh, ow };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = if xs.len() == 3 { vec![oh, ow, cout] } else { vec![n, oh, ow, cout] };
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let ng = self.ng(&deps);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv2d { input, kernel, bias, geom }, ng))
    }

    pub fn unary(&mut self, kind: UnaryKind, x: NodeId) -> NodeId {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Relu => |v| v.max(0.0),
        };
        let out = self.value(x).map(f);
        let ng = self.ng(&[x]);
        self.push(out, Op::Unary { kind, x }, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryKind::Relu, x)
    }

    /// Elementwise op; shapes must match exactly.
    pub fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "binary",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = match kind {
            BinaryKind::Add => va.iter().zip(vb).map(|(x, y)| x + y).collect(),
            BinaryKind::Sub => va.iter().zip(vb).map(|(x, y)| x - y).collect(),
            BinaryKind::Mul => va.iter().zip(vb).map(|(x, y)| x * y).collect(),
        };
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Binary { kind, a, b }, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale { x, factor }, ng)
    }

    /// Multiply by a fixed, non-differentiable mask (dropout).
    pub fn mul_const(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        if mask.len() != self.value(x).len() {
            return Err(Error::dim("mul_const", format!("mask len {} vs {}", mask.len(), self.value(x).len())));
        }
        let data = self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::MulConst { x, mask }, ng))
    }

    /// 2×2 stride-2 max pool over the two axes before the channel axis.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::dim("max_pool2", format!("need [.., h, w, c], got {s:?}")));
        }
        let r = s.len();
        let (h, w, c) = (s[r - 3], s[r - 2], s[r - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("max_pool2", format!("spatial extent {h}x{w} must be even")));
        }
        let n = prod(&s[..r - 3]);
        let (out, argmax) = kernels::max_pool2(self.value(x).data(), n, h, w, c);
        let mut shape = s.clone();
        shape[r - 3] = h / 2;
        shape[r - 2] = w / 2;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaxPool2 { x, argmax }, ng))
    }

    /// Batch normalization using statistics of this batch, pooled over every
    /// axis but the last. Returns the output and the observed statistics.
    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<(NodeId, BatchStats)> {
        let c = self.check_bn(x, gamma, beta)?;
        let xv = self.value(x).data();
        let (mean, var) = kernels::channel_moments(xv, c);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        for (row, src) in xhat.chunks_exact_mut(c).zip(xv.chunks_exact(c)) {
            for j in 0..c {
                row[j] = (src[j] - mean[j]) * inv_std[j];
            }
        }
        let out = affine_channels(&xhat, self.value(gamma).data(), self.value(beta).data(), c);
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, gamma, beta]);
        let id = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std },
            ng,
        );
        Ok((id, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_infer(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mean: &[f64], var: &[f64], eps: f64) -> Result<NodeId> {
        let c = self.check_bn(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batch_norm", "moving statistics length".to_string()));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; xv.len()];
        for (row, src) in xhat.chunks_exact_mut(c).zip(xv.chunks_exact(c)) {
            for j in 0..c {
                row[j] = (src[j] - mean[j]) * inv_std[j];
            }
        }
        let out = affine_channels(&xhat, self.value(gamma).data(), self.value(beta).data(), c);
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNormInfer { x, gamma, beta, mean: mean.to_vec(), inv_std },
            ng,
        ))
    }

    fn check_bn(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<usize> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(
                "batch_norm",
                format!("gamma {:?} / beta {:?} vs {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok(c)
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[m, k], &[k2, n]) = (sa.as_slice(), sb.as_slice()) else {
            return Err(Error::dim("matmul", format!("need rank-2 operands, got {sa:?} and {sb:?}")));
        };
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b }, ng))
    }

    /// Add a `[c]` bias along the last axis.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(bias) != [c] {
            return Err(Error::dim("add_bias", format!("bias {:?} vs last axis {c}", self.shape(bias))));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, bias]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddBias { x, bias }, ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape { x }, ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// The single element at flat `index`, as a scalar node.
    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let v = *self
            .value(x)
            .data()
            .get(index)
            .ok_or_else(|| Error::Usage(format!("pick index {index} out of range")))?;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, ng))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::EmptyInput("concat".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} on {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::dim("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * d..(o + 1) * d]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dim("slice", format!("{start}+{len} on axis {axis} of {s:?}")));
        }
        let (outer, ext, inner) = axis_split(&s, axis);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, axis, start }, ng))
    }

    /// Stack equally shaped nodes along a new `axis`.
    pub fn stack(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::EmptyInput("stack".into()))?)
            .to_vec();
        if axis > first.len() {
            return Err(Error::dim("stack", format!("axis {axis} on {first:?}")));
        }
        if let Some(bad) = parts.iter().find(|&&p| self.shape(p) != first.as_slice()) {
            return Err(Error::dim("stack", format!("{:?} vs {first:?}", self.shape(*bad))));
        }
        let outer = prod(&first[..axis]);
        let inner = prod(&first[axis..]);
        let mut out = Vec::with_capacity(outer * parts.len() * inner);
        for o in 0..outer {
            for &p in parts {
                out.extend_from_slice(&self.value(p).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = first;
        shape.insert(axis, parts.len());
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Stack { parts: parts.to_vec(), axis }, ng))
    }

    /// Index `index` along `axis`, dropping the axis.
    pub fn select(&mut self, x: NodeId, axis: usize, index: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || index >= s[axis] || s.len() < 2 {
            return Err(Error::dim("select", format!("index {index} on axis {axis} of {s:?}")));
        }
        let (outer, ext, inner) = axis_split(&s, axis);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * ext + index) * inner;
            out.extend_from_slice(&v[base..base + inner]);
        }
        let mut shape = s;
        shape.remove(axis);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Select { x, axis, index }, ng))
    }

    /// Fused convolutional-LSTM gate nonlinearity.
    ///
    /// `z` holds the four gate pre-activations `[.., 4·hidden]` in the order
    /// input, forget, candidate, output; `c_prev` is `[.., hidden]` (`None`
    /// is a zero cell). The output is `[.., 2·hidden]`: the new hidden state
    /// followed by the new cell state.
    pub fn lstm_gates(&mut self, z: NodeId, c_prev: Option<NodeId>, hidden: usize) -> Result<NodeId> {
        let zs = self.shape(z).to_vec();
        if *zs.last().unwrap() != 4 * hidden {
            return Err(Error::dim("lstm_gates", format!("z last axis {:?} vs 4x{hidden}", zs.last())));
        }
        let mut cs = zs.clone();
        *cs.last_mut().unwrap() = hidden;
        if let Some(c) = c_prev {
            if self.shape(c) != cs.as_slice() {
                return Err(Error::dim("lstm_gates", format!("cell {:?} vs {cs:?}", self.shape(c))));
            }
        }
        let (out, saved) = kernels::lstm_gates_forward(
            self.value(z).data(),
            c_prev.map(|c| self.value(c).data()),
            hidden,
        );
        let mut shape = zs;
        *shape.last_mut().unwrap() = 2 * hidden;
        let mut deps = vec![z];
        deps.extend(c_prev);
        let ng = self.ng(&deps);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LstmGates { z, c_prev, hidden, saved }, ng))
    }

    /// Mean binary cross-entropy against a fixed target, with predictions
    /// clamped to `[lo, hi]` before the logarithms.
    pub fn bce(&mut self, pred: NodeId, target: &Tensor, clamp: f64) -> Result<NodeId> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim(
                "bce",
                format!("pred {:?} vs target {:?}", self.shape(pred), target.shape()),
            ));
        }
        let (lo, hi) = (clamp, 1.0 - clamp);
        let p = self.value(pred).data();
        let n = p.len() as f64;
        let loss = p
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| {
                let p = p.clamp(lo, hi);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let ng = self.ng(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce { pred, target: target.data().to_vec(), lo, hi },
            ng,
        ))
    }

    /// Reverse sweep from a scalar root. Leaf gradients and those of nodes
    /// marked with [`Graph::retain_grad`] are returned.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = (if node.retain { grads[idx].clone() } else { grads[idx].take() }) else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                let (dx, dk, db) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    gout,
                    geom,
                    self.wants(*input),
                    self.wants(*kernel),
                    bias.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = dx {
                    add_into(&mut grads[input.0], &dx);
                }
                if let Some(dk) = dk {
                    add_into(&mut grads[kernel.0], &dk);
                }
                if let (Some(db), Some(b)) = (db, bias) {
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Unary { kind, x } => {
                let y = node.value.data();
                let xv = self.value(*x).data();
                let d: Vec<f64> = match kind {
                    UnaryKind::Sigmoid => gout.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect(),
                    UnaryKind::Tanh => gout.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect(),
                    UnaryKind::Relu => gout
                        .iter()
                        .zip(xv)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                };
                add_into(&mut grads[x.0], &d);
            }
            Op::Binary { kind, a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gout.to_vec(),
                        BinaryKind::Mul => gout.iter().zip(vb).map(|(g, y)| g * y).collect(),
                    };
                    add_into(&mut grads[a.0], &d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = match kind {
                        BinaryKind::Add => gout.to_vec(),
                        BinaryKind::Sub => gout.iter().map(|g| -g).collect(),
                        BinaryKind::Mul => gout.iter().zip(va).map(|(g, x)| g * x).collect(),
                    };
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::Scale { x, factor } => {
                let d: Vec<f64> = gout.iter().map(|g| g * factor).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::MulConst { x, mask } => {
                let d: Vec<f64> = gout.iter().zip(mask).map(|(g, m)| g * m).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (g, &i) in gout.iter().zip(argmax) {
                    d[i] += g;
                }
                add_into(&mut grads[x.0], &d);
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let c = inv_std.len();
                let p = (xhat.len() / c) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (grow, xrow) in gout.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        sum_g[j] += grow[j];
                        sum_gx[j] += grow[j] * xrow[j];
                    }
                }
                if self.wants(*gamma) {
                    add_into(&mut grads[gamma.0], &sum_gx);
                }
                if self.wants(*beta) {
                    add_into(&mut grads[beta.0], &sum_g);
                }
                if self.wants(*x) {
                    let gm = self.value(*gamma).data();
                    let mut d = vec![0.0; xhat.len()];
                    for ((drow, grow), xrow) in d.chunks_exact_mut(c).zip(gout.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            drow[j] = gm[j] * inv_std[j] / p * (p * grow[j] - sum_g[j] - xrow[j] * sum_gx[j]);
                        }
                    }
                    add_into(&mut grads[x.0], &d);
                }
            }
            Op::BatchNormInfer { x, gamma, beta, mean, inv_std } => {
                let c = inv_std.len();
                let xv = self.value(*x).data();
                if self.wants(*gamma) {
                    let mut d = vec![0.0; c];
                    for (grow, xrow) in gout.chunks_exact(c).zip(xv.chunks_exact(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * (xrow[j] - mean[j]) * inv_std[j];
                        }
                    }
                    add_into(&mut grads[gamma.0], &d);
                }
                if self.wants(*beta) {
                    let mut d = vec![0.0; c];
                    for grow in gout.chunks_exact(c) {
                        d.iter_mut().zip(grow).for_each(|(a, g)| *a += g);
                    }
                    add_into(&mut grads[beta.0], &d);
                }
                if self.wants(*x) {
                    let gm = self.value(*gamma).data();
                    let mut d = gout.to_vec();
                    for row in d.chunks_exact_mut(c) {
                        for j in 0..c {
                            row[j] *= gm[j] * inv_std[j];
                        }
                    }
                    add_into(&mut grads[x.0], &d);
                }
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut d = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gout, false, self.value(*b).data(), true, 0.0, &mut d);
                    add_into(&mut grads[a.0], &d);
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.value(*a).data(), true, gout, false, 0.0, &mut d);
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], gout);
                }
                if self.wants(*bias) {
                    let c = self.value(*bias).len();
                    let mut d = vec![0.0; c];
                    for row in gout.chunks_exact(c) {
                        d.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    add_into(&mut grads[bias.0], &d);
                }
            }
            Op::Reshape { x } => add_into(&mut grads[x.0], gout),
            Op::Sum { x } => {
                let d = vec![gout[0]; self.value(*x).len()];
                add_into(&mut grads[x.0], &d);
            }
            Op::Pick { x, index } => {
                let mut d = vec![0.0; self.value(*x).len()];
                d[*index] = gout[0];
                add_into(&mut grads[x.0], &d);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gout[base..base + ext * inner]);
                        }
                        add_into(&mut grads[p.0], &d);
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, ext, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&gout[(o * len) * inner..(o + 1) * len * inner]);
                }
                add_into(&mut grads[x.0], &d);
            }
            Op::Stack { parts, axis } => {
                let s = self.shape(parts[0]);
                let outer = prod(&s[..*axis]);
                let inner = prod(&s[*axis..]);
                let k = parts.len();
                for (j, &p) in parts.iter().enumerate() {
                    if !self.wants(p) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        let base = (o * k + j) * inner;
                        d.extend_from_slice(&gout[base..base + inner]);
                    }
                    add_into(&mut grads[p.0], &d);
                }
            }
            Op::Select { x, axis, index } => {
                let (outer, ext, inner) = axis_split(self.shape(*x), *axis);
                let mut d = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let base = (o * ext + index) * inner;
                    d[base..base + inner].copy_from_slice(&gout[o * inner..(o + 1) * inner]);
                }
                add_into(&mut grads[x.0], &d);
            }
            Op::LstmGates { z, c_prev, hidden, saved } => {
                let (dz, dc) = kernels::lstm_gates_backward(
                    saved,
                    c_prev.map(|c| self.value(c).data()),
                    gout,
                    *hidden,
                );
                if self.wants(*z) {
                    add_into(&mut grads[z.0], &dz);
                }
                if let Some(c) = c_prev {
                    if self.wants(*c) {
                        add_into(&mut grads[c.0], &dc);
                    }
                }
            }
            Op::Bce { pred, target, lo, hi } => {
                let p = self.value(*pred).data();
                let n = p.len() as f64;
                let g = gout[0];
                let d: Vec<f64> = p
                    .iter()
                    .zip(target)
                    .map(|(&p, &y)| {
                        if p < *lo || p > *hi {
                            0.0
                        } else {
                            g * (-y / p + (1.0 - y) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                add_into(&mut grads[pred.0], &d);
            }
        }
    }
}

fn affine_channels(xhat: &[f64], gamma: &[f64], beta: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; xhat.len()];
    for (o, x) in out.chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
        for j in 0..c {
            o[j] = gamma[j] * x[j] + beta[j];
        }
    }
    out
}

#[cfg(test)]
mod tests;
