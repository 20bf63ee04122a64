use std::collections::HashMap;

use super::{numel, ParamId, ParamStore, Tensor, TensorError};

/// Probabilities below this are clamped before `ln` in [`Graph::cross_entropy`].
pub const CLAMP_FLOOR: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Reshape(NodeId),
    Transpose(NodeId),
    Softmax { x: NodeId, axis: usize },
    Mean { x: NodeId, axis: usize },
    Sum(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BroadcastSpatial(NodeId),
    CrossEntropy {
        probs: NodeId,
        labels: Vec<usize>,
        clamped: Vec<bool>,
    },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Sum(x)
            | Op::BroadcastSpatial(x) => vec![*x],
            Op::Slice { x, .. } | Op::Softmax { x, .. } | Op::Mean { x, .. } => vec![*x],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { probs, .. } => vec![*probs],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Record of one forward pass.
///
/// Operations are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_leaves: HashMap<ParamId, NodeId>,
    backward_done: bool,
    clamp_events: usize,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last backward root with respect to `id`, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Number of cross-entropy probabilities clamped at [`CLAMP_FLOOR`] so far.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    /// Clears node gradients so that backward may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op) -> Result<NodeId, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = node_op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Constant input (no gradient is tracked for it).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Input whose gradient is tracked but which is not a stored parameter.
    pub fn input_with_grad(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf holding the current value of a stored parameter. Reuses the same
    /// leaf when a parameter is referenced more than once in a pass.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_leaves.get(&id) {
            return n;
        }
        let t = store.get(id);
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("stored shape");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_leaves.insert(id, n);
        n
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: NodeId, axis: usize) -> Result<(), TensorError> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(TensorError::BadAxis {
                op,
                axis,
                shape: shape.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", t, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * factor).collect())?;
        self.push("scale", t, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.max(0.0)).collect())?;
        self.push("relu", t, Op::Relu(x))
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, bv) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b))
    }

    /// Fully connected layer `x W^T + b` for `x` of shape `(in)` or `(N, in)` and
    /// `W` of shape `(out, in)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (rows, fan_in) = match sx.as_slice() {
            [i] => (1, *i),
            [n, i] => (*n, *i),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    left: sx,
                    right: sw,
                })
            }
        };
        if sw.len() != 2 || sw[1] != fan_in {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: sx,
                right: sw,
            });
        }
        let fan_out = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    left: vec![fan_out],
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let dx = self.value(x).data();
        let dw = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; rows * fan_out];
        for r in 0..rows {
            let xr = &dx[r * fan_in..(r + 1) * fan_in];
            for o in 0..fan_out {
                let wr = &dw[o * fan_in..(o + 1) * fan_in];
                let mut acc: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                if let Some(bias) = bias {
                    acc += bias[o];
                }
                out[r * fan_out + o] = acc;
            }
        }
        let shape = if sx.len() == 1 { vec![fan_out] } else { vec![rows, fan_out] };
        let t = Tensor::new(shape, out)?;
        self.push("linear", t, Op::Linear { x, w, b })
    }

    /// 2-D convolution of a `(C_in, H, W)` input with `(C_out, C_in, k, k)`
    /// weights, zero padding `pad` and step `stride`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            left: sx.clone(),
            right: sw.clone(),
        };
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(mismatch());
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    left: vec![cout],
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geo = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            k,
            ho,
            wo,
            stride,
            pad,
        };
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let mut out = vec![0.0; cout * ho * wo];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for co in 0..cout {
                out[co * ho * wo..(co + 1) * ho * wo].fill(bias[co]);
            }
        }
        geo.forward(xin, wt, &mut out);
        let t = Tensor::new(vec![cout, ho, wo], out)?;
        self.push("conv2d", t, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push("concat", t, Op::Concat {
            parts: parts.to_vec(),
            axis,
        })
    }

    /// Channel-wise concatenation of `(C, H, W)` feature maps.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        self.concat(parts, 0)
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId, TensorError> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if start + len > shape[axis] || len == 0 {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} outside axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let t = Tensor::new(oshape, out)?;
        self.push("slice", t, Op::Slice { x, axis, start })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        if numel(shape) != v.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: v.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let t = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        self.push("reshape", t, Op::Reshape(x))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected 2-D tensor, got {shape:?}"),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        self.push("transpose", t, Op::Transpose(x))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        if shape[axis] == 0 {
            return Err(TensorError::EmptyAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * ext + a) * inner + i;
                let max = (0..ext).map(|a| src[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for a in 0..ext {
                    let e = (src[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    sum += e;
                }
                for a in 0..ext {
                    out[idx(a)] /= sum;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push("softmax", t, Op::Softmax { x, axis })
    }

    /// Softmax over the channel axis of a `(C, H, W)` map.
    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.softmax(x, 0)
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.check_axis("mean", x, axis)?;
        let shape = self.shape(x).to_vec();
        if shape[axis] == 0 {
            return Err(TensorError::EmptyAxis { op: "mean", axis, shape });
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        // Shifted by the first entry so that constant inputs come back exactly.
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let first = &src[o * ext * inner..(o * ext + 1) * inner];
            for a in 1..ext {
                let row = &src[(o * ext + a) * inner..(o * ext + a + 1) * inner];
                for ((d, s), f) in out[o * inner..(o + 1) * inner].iter_mut().zip(row).zip(first) {
                    *d += s - f;
                }
            }
            for (d, f) in out[o * inner..(o + 1) * inner].iter_mut().zip(first) {
                *d = f + *d / ext as f64;
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let t = Tensor::new(oshape, out)?;
        self.push("mean", t, Op::Mean { x, axis })
    }

    /// Global average pool of a `(C, H, W)` map to a `(C)` vector.
    pub fn global_mean_pool(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(TensorError::Invalid {
                op: "global_mean_pool",
                msg: format!("expected (C, H, W), got {s:?}"),
            });
        }
        let flat = self.reshape(x, &[s[0], s[1] * s[2]])?;
        self.mean(flat, 1)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    /// Layer normalization over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::Invalid {
            op: "layer_norm",
            msg: "scalar input".into(),
        })?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: shape.clone(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d.max(1);
        let mut normed = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let n = (row[j] - mu) * inv;
                normed[r * d + j] = n;
                out[r * d + j] = g[j] * n + b[j];
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push("layer_norm", t, Op::LayerNorm {
            x,
            gamma,
            beta,
            normed,
            inv_std,
        })
    }

    /// Copies a `(C)` vector to every location of a `(C, H, W)` map.
    pub fn broadcast_spatial(&mut self, v: NodeId, h: usize, w: usize) -> Result<NodeId, TensorError> {
        let s = self.shape(v).to_vec();
        if s.len() != 1 || h == 0 || w == 0 {
            return Err(TensorError::Invalid {
                op: "broadcast_spatial",
                msg: format!("expected a vector and positive extents, got {s:?} -> ({h}, {w})"),
            });
        }
        let src = self.value(v).data();
        let mut out = Vec::with_capacity(s[0] * h * w);
        for &c in src {
            out.extend(std::iter::repeat_n(c, h * w));
        }
        let t = Tensor::new(vec![s[0], h, w], out)?;
        self.push("broadcast_spatial", t, Op::BroadcastSpatial(v))
    }

    /// Mean negative log-likelihood of `labels` under row-wise probabilities
    /// `(B, n)`. Probabilities are clamped below at [`CLAMP_FLOOR`].
    pub fn cross_entropy(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId, TensorError> {
        let shape = self.shape(probs).to_vec();
        let (b, n) = match shape.as_slice() {
            [n] => (1, *n),
            [b, n] => (*b, *n),
            _ => {
                return Err(TensorError::Invalid {
                    op: "cross_entropy",
                    msg: format!("expected (B, n) probabilities, got {shape:?}"),
                })
            }
        };
        if labels.len() != b || b == 0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("{} labels for batch of {b}", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("label {bad} out of range for {n} classes"),
            });
        }
        let p = self.value(probs).data();
        let mut clamped = Vec::with_capacity(b);
        let mut total = 0.0;
        for (j, &l) in labels.iter().enumerate() {
            let q = p[j * n + l];
            let c = q < CLAMP_FLOOR;
            clamped.push(c);
            total -= q.max(CLAMP_FLOOR).ln();
        }
        let n_clamped = clamped.iter().filter(|&&c| c).count();
        if n_clamped > 0 {
            self.clamp_events += n_clamped;
            log::warn!("cross_entropy: clamped {n_clamped} probabilities at {CLAMP_FLOOR:e}");
        }
        let t = Tensor::scalar(total / b as f64);
        self.push("cross_entropy", t, Op::CrossEntropy {
            probs,
            labels: labels.to_vec(),
            clamped,
        })
    }

    /// Reverse sweep from a scalar node. Node gradients stay queryable via
    /// [`Graph::grad`]; stored parameters are not touched.
    pub fn backward_node(&mut self, root: NodeId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(TensorError::NotScalar(rv.shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Backpropagates a scalar loss and accumulates `d loss / d param` into `store`.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<(), TensorError> {
        self.backward_node(loss)?;
        for (&pid, &node) in &self.param_leaves {
            if let Some(g) = self.grads[node.0].as_deref() {
                store.accumulate(pid, g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |id: NodeId| nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let buf = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.numel()]);
            f(buf);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    acc(p, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += f * g)),
            Op::Relu(x) => {
                let v = nodes[x.0].value.data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if v[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * vb[p * n + j];
                            }
                            d[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = va[i * k + p];
                            for j in 0..n {
                                d[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let sw = nodes[w.0].value.shape();
                let (fan_out, fan_in) = (sw[0], sw[1]);
                let rows = nodes[x.0].value.numel() / fan_in;
                let (vx, vw) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                acc(*x, &mut |d| {
                    for r in 0..rows {
                        for o in 0..fan_out {
                            let go = g[r * fan_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &vw[o * fan_in..(o + 1) * fan_in];
                            for (dd, wv) in d[r * fan_in..(r + 1) * fan_in].iter_mut().zip(wr) {
                                *dd += go * wv;
                            }
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for r in 0..rows {
                        let xr = &vx[r * fan_in..(r + 1) * fan_in];
                        for o in 0..fan_out {
                            let go = g[r * fan_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            for (dd, xv) in d[o * fan_in..(o + 1) * fan_in].iter_mut().zip(xr) {
                                *dd += go * xv;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for r in 0..rows {
                            for o in 0..fan_out {
                                d[o] += g[r * fan_out + o];
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let sx = nodes[x.0].value.shape();
                let sw = nodes[w.0].value.shape();
                let so = out.shape();
                let geo = ConvGeom {
                    cin: sx[0],
                    h: sx[1],
                    w: sx[2],
                    cout: sw[0],
                    k: sw[2],
                    ho: so[1],
                    wo: so[2],
                    stride: *stride,
                    pad: *pad,
                };
                let (vx, vw) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                if needs(*x) {
                    acc(*x, &mut |d| geo.backward_input(g, vw, d));
                }
                acc(*w, &mut |d| geo.backward_weight(g, vx, d));
                if let Some(b) = b {
                    let plane = geo.ho * geo.wo;
                    acc(*b, &mut |d| {
                        for (co, dv) in d.iter_mut().enumerate() {
                            *dv += g[co * plane..(co + 1) * plane].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let ext = nodes[p.0].value.shape()[*axis];
                    acc(*p, &mut |d| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ext * inner;
                            for k in 0..ext * inner {
                                d[dst + k] += g[src + k];
                            }
                        }
                    });
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, ext, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let len = out.shape()[*axis];
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let dst = (o * ext + start) * inner;
                        let src = o * len * inner;
                        for k in 0..len * inner {
                            d[dst + k] += g[src + k];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::Transpose(x) => {
                let s = nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, ext, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| (o * ext + a) * inner + i;
                            let dot: f64 = (0..ext).map(|a| y[idx(a)] * g[idx(a)]).sum();
                            for a in 0..ext {
                                d[idx(a)] += y[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Mean { x, axis } => {
                let (outer, ext, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let scale = 1.0 / ext as f64;
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for a in 0..ext {
                            for i in 0..inner {
                                d[(o * ext + a) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let dim = nodes[gamma.0].value.numel();
                let rows = inv_std.len();
                let gm = nodes[gamma.0].value.data();
                acc(*x, &mut |d| {
                    for r in 0..rows {
                        let gr = &g[r * dim..(r + 1) * dim];
                        let nr = &normed[r * dim..(r + 1) * dim];
                        let dxhat: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(nr).map(|(a, b)| a * b).sum();
                        let f = inv_std[r] / dim as f64;
                        for j in 0..dim {
                            d[r * dim + j] += f * (dim as f64 * dxhat[j] - s1 - nr[j] * s2);
                        }
                    }
                });
                acc(*gamma, &mut |d| {
                    for r in 0..rows {
                        for j in 0..dim {
                            d[j] += g[r * dim + j] * normed[r * dim + j];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for r in 0..rows {
                        for j in 0..dim {
                            d[j] += g[r * dim + j];
                        }
                    }
                });
            }
            Op::BroadcastSpatial(v) => {
                let plane = out.numel() / nodes[v.0].value.numel();
                acc(*v, &mut |d| {
                    for (c, dv) in d.iter_mut().enumerate() {
                        *dv += g[c * plane..(c + 1) * plane].iter().sum::<f64>();
                    }
                });
            }
            Op::CrossEntropy { probs, labels, clamped } => {
                let p = nodes[probs.0].value.data();
                let n = p.len() / labels.len();
                let b = labels.len() as f64;
                acc(*probs, &mut |d| {
                    for (j, (&l, &c)) in labels.iter().zip(clamped).enumerate() {
                        if !c {
                            d[j * n + l] -= g[0] / (b * p[j * n + l]);
                        }
                    }
                });
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    /// Output columns `ox` for which `ox * stride + kx - pad` lands inside the input.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        // ox*stride + kx - pad <= w - 1
        let hi = if self.w + self.pad < kx + 1 {
            0
        } else {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo)
        };
        (lo, hi.max(lo))
    }

    fn row_in(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy * self.stride + ky;
        (iy >= self.pad && iy - self.pad < self.h).then(|| iy - self.pad)
    }

    fn forward(&self, x: &[f64], wt: &[f64], out: &mut [f64]) {
        let (k, s) = (self.k, self.stride);
        for co in 0..self.cout {
            let oplane = &mut out[co * self.ho * self.wo..(co + 1) * self.ho * self.wo];
            for ci in 0..self.cin {
                let xplane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wt[((co * self.cin + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = self.col_range(kx);
                        if lo >= hi {
                            continue;
                        }
                        let x0 = lo * s + kx - self.pad;
                        for oy in 0..self.ho {
                            let Some(iy) = self.row_in(oy, ky) else { continue };
                            let xrow = &xplane[iy * self.w + x0..(iy + 1) * self.w];
                            let orow = &mut oplane[oy * self.wo + lo..oy * self.wo + hi];
                            for (o, xv) in orow.iter_mut().zip(xrow.iter().step_by(s)) {
                                *o += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_input(&self, g: &[f64], wt: &[f64], dx: &mut [f64]) {
        let (k, s) = (self.k, self.stride);
        for co in 0..self.cout {
            let gplane = &g[co * self.ho * self.wo..(co + 1) * self.ho * self.wo];
            for ci in 0..self.cin {
                let dplane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wt[((co * self.cin + ci) * k + ky) * k + kx];
                        let (lo, hi) = self.col_range(kx);
                        if lo >= hi || wv == 0.0 {
                            continue;
                        }
                        let x0 = lo * s + kx - self.pad;
                        for oy in 0..self.ho {
                            let Some(iy) = self.row_in(oy, ky) else { continue };
                            let grow = &gplane[oy * self.wo + lo..oy * self.wo + hi];
                            let drow = &mut dplane[iy * self.w + x0..(iy + 1) * self.w];
                            for (d, gv) in drow.iter_mut().step_by(s).zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_weight(&self, g: &[f64], x: &[f64], dw: &mut [f64]) {
        let (k, s) = (self.k, self.stride);
        for co in 0..self.cout {
            let gplane = &g[co * self.ho * self.wo..(co + 1) * self.ho * self.wo];
            for ci in 0..self.cin {
                let xplane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
                for ky in 0..k {
                    for kx in 0..k {
                        let (lo, hi) = self.col_range(kx);
                        if lo >= hi {
                            continue;
                        }
                        let x0 = lo * s + kx - self.pad;
                        let mut acc = 0.0;
                        for oy in 0..self.ho {
                            let Some(iy) = self.row_in(oy, ky) else { continue };
                            let grow = &gplane[oy * self.wo + lo..oy * self.wo + hi];
                            let xrow = &xplane[iy * self.w + x0..(iy + 1) * self.w];
                            acc += grow.iter().zip(xrow.iter().step_by(s)).map(|(a, b)| a * b).sum::<f64>();
                        }
                        dw[((co * self.cin + ci) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn channel_softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3, 1, 1]));
        let y = g.softmax_channels(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_softmax_of_ln2_logits() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 1, 1], &[0.0, 2f64.ln()]));
        let y = g.softmax_channels(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_empty_axis() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![0, 2], vec![]).unwrap());
        assert!(matches!(g.softmax(x, 0), Err(TensorError::EmptyAxis { .. })));
    }

    #[test]
    fn softmax_saturates_without_nan() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[1e300, -1e300, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::new();
        let p = g.input(t(&[1, 2], &[1.0, 0.0]));
        let l = g.cross_entropy(p, &[0]).unwrap();
        assert_eq!(g.value(l).item(), Some(0.0));

        let u = g.input(t(&[1, 2], &[0.5, 0.5]));
        for label in [0, 1] {
            let l = g.cross_entropy(u, &[label]).unwrap();
            assert!((g.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_clamps_and_counts() {
        let mut g = Graph::new();
        let p = g.input(t(&[1, 2], &[1.0, 0.0]));
        let l = g.cross_entropy(p, &[1]).unwrap();
        assert!((g.value(l).item().unwrap() + CLAMP_FLOOR.ln()).abs() < 1e-9);
        assert_eq!(g.clamp_events(), 1);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![0.3, -2.0, 5.0]));
        let mut g = Graph::new();
        let wn = g.param(&store, w);
        let l = g.sum(wn).unwrap();
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_half_square_gives_w() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![0.3, -2.0, 5.0]));
        let mut g = Graph::new();
        let wn = g.param(&store, w);
        let sq = g.mul(wn, wn).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[0.3, -2.0, 5.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let wn = g.param(&store, w);
        let r = g.relu(wn).unwrap();
        assert!(matches!(g.backward(r, &mut store), Err(TensorError::NotScalar(_))));
        let s = g.sum(r).unwrap();
        g.backward(s, &mut store).unwrap();
        assert!(matches!(g.backward(s, &mut store), Err(TensorError::BackwardTwice)));
        g.reset_grads();
        assert!(g.backward(s, &mut store).is_ok());
    }

    #[test]
    fn non_param_leaves_untouched() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![3.0, 4.0]));
        let wn = g.param(&store, w);
        let p = g.mul(x, wn).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s, &mut store).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(store.get(w).grad().unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn concat_then_slice_roundtrips() {
        let mut g = Graph::new();
        let a = g.input(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[3, 2, 2]);
        let sa = g.slice(c, 0, 0, 1).unwrap();
        let sb = g.slice(c, 0, 1, 2).unwrap();
        assert_eq!(g.value(sa), g.value(a));
        assert_eq!(g.value(sb), g.value(b));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.input(t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let y2 = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.value(y2).data(), &[1.0, 3.0, 7.0, 9.0]);
    }

    #[test]
    fn conv2d_box_filter_with_padding() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 3, 3], 1.0));
        let w = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn mean_pool_of_constant_is_exact() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 5, 7], 0.1));
        let m = g.global_mean_pool(x).unwrap();
        assert_eq!(g.shape(m), &[2]);
        assert!(g.value(m).data().iter().all(|&v| v == 0.1));
        let y = g.input(Tensor::full(&[3, 4, 4], 0.375));
        let m = g.global_mean_pool(y).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.375));
    }

    #[test]
    fn broadcast_spatial_fills_channels() {
        let mut g = Graph::new();
        let v = g.input(Tensor::from_vec(vec![1.0, 2.0]));
        let m = g.broadcast_spatial(v, 2, 2).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 9.0]));
        let ga = g.input(Tensor::full(&[4], 1.0));
        let be = g.input(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, ga, be).unwrap();
        for row in g.value(y).data().chunks(4) {
            let mu: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
