use crate::{Error, Result};

use super::params::{ParamId, ParamSet};

/// Handle to a tensor recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Operation recorded at a node.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Input tensor. `param` links it to a [`ParamSet`] entry so gradients
    /// can be pulled back out after `backward`.
    Leaf { param: Option<usize> },
    Add,
    Sub,
    Mul,
    Matmul,
    /// 3x3 convolution, zero padding 1, stride 1 or 2, channels-last.
    Conv2d { stride: usize },
    Relu,
    Sigmoid,
    SoftmaxLastDim,
    Mean,
    Sum,
    ConcatLastDim,
    Slice { axis: usize, start: usize, end: usize },
    /// Right-aligned broadcast; the target shape is the node's shape.
    Broadcast,
    // Ops below are not part of the generic `apply` surface; they exist for
    // the matcher and the loss, with hand-written adjoints covered by the
    // gradient-check suite.
    Reshape,
    Abs,
    /// Numerically stable binary cross-entropy on logits, elementwise.
    BceWithLogits,
    /// Bilinear 2x spatial upsampling of an `[h, w, c]` map.
    Upsample2x,
    /// Correlation cost volume: `out[v,u,d] = <L[v,u,:], R[v,u-d,:]> / sqrt(C)`.
    CostVolume { max_shift: usize },
}

/// One recorded tensor: the op that produced it, its parents, shape, values.
#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub parents: Vec<usize>,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Kind selector for the generic [`Graph::apply`] entry point.
///
/// Shape rules per kind:
/// - `Add`/`Sub`/`Mul`: two inputs of identical shape, elementwise.
/// - `Matmul`: `[m,k] x [k,n] -> [m,n]`, rank-2 only.
/// - `Conv2d`: input `[h,w,c_in]`, kernel `[3,3,c_in,c_out]`, zero padding 1,
///   stride 1 or 2 -> `[(h-1)/s+1, (w-1)/s+1, c_out]`.
/// - `Relu`/`Sigmoid`: one input, any shape.
/// - `SoftmaxLastDim`: one input, rank >= 1; normalizes along the last axis.
/// - `Mean`/`Sum`: one input, reduces all elements to shape `[1]`.
/// - `ConcatLastDim`: n >= 1 inputs, equal shapes except the last axis.
/// - `Slice`: one input; keeps `start..end` along `axis`.
/// - `Broadcast`: one input; right-aligned, each source dim equals the
///   target dim or is 1, source rank <= target rank.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Matmul,
    Conv2d { stride: usize },
    Relu,
    Sigmoid,
    SoftmaxLastDim,
    Mean,
    Sum,
    ConcatLastDim,
    Slice { axis: usize, start: usize, end: usize },
    Broadcast { shape: Vec<usize> },
}

/// Names of the ops accepted by [`Graph::apply`], in canonical order.
pub const PUBLIC_OP_NAMES: [&str; 13] = [
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d-3x3",
    "relu",
    "sigmoid",
    "softmax-lastdim",
    "mean",
    "sum",
    "concat-lastdim",
    "slice",
    "broadcast",
];

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Matmul => "matmul",
            OpKind::Conv2d { .. } => "conv2d-3x3",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::SoftmaxLastDim => "softmax-lastdim",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::ConcatLastDim => "concat-lastdim",
            OpKind::Slice { .. } => "slice",
            OpKind::Broadcast { .. } => "broadcast",
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A define-by-run computation graph.
///
/// Nodes only ever reference earlier nodes, so the node list is already a
/// topological order and backward is a single reverse scan that touches each
/// node exactly once.
pub struct Graph {
    nodes: Vec<Node>,
    /// Persistent accumulated gradients, parallel to `nodes`. Lazily
    /// allocated; repeated `backward` calls without `zero_grad` add up.
    grads: Vec<Option<Vec<f64>>>,
    strict: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), strict: false }
    }

    /// Like [`Graph::new`] but every op rejects NaN/Inf inputs.
    pub fn new_strict() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), strict: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Accumulated gradient of `id`, if any backward pass reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    fn push(&mut self, op: Op, parents: Vec<usize>, shape: Vec<usize>, values: Vec<f64>) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node { op, parents, shape, values });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn check_finite(&self, op: &'static str, ids: &[TensorId]) -> Result<()> {
        if !self.strict {
            return Ok(());
        }
        for id in ids {
            if self.nodes[id.0].values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op });
            }
        }
        Ok(())
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::ShapeMismatch { op, detail }
    }

    // ── inputs ──────────────────────────────────────────────────────────

    /// Records an input tensor.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>) -> Result<TensorId> {
        if numel(shape) != values.len() {
            return Err(Self::shape_err(
                "leaf",
                format!("shape {:?} holds {} elements, got {}", shape, numel(shape), values.len()),
            ));
        }
        Ok(self.push(Op::Leaf { param: None }, vec![], shape.to_vec(), values))
    }

    /// Records a `[1]`-shaped constant.
    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(Op::Leaf { param: None }, vec![], vec![1], vec![v])
    }

    /// Records a parameter as a leaf, remembering which [`ParamSet`] slot it
    /// came from so [`ParamSet::accumulate_grads`] can collect its gradient.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> TensorId {
        let p = params.get(id);
        self.push(Op::Leaf { param: Some(id.0) }, vec![], p.shape.clone(), p.values.clone())
    }

    // ── generic surface ─────────────────────────────────────────────────

    /// Applies one of the thirteen public op kinds to `inputs`.
    pub fn apply(&mut self, kind: &OpKind, inputs: &[TensorId]) -> Result<TensorId> {
        let want = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Self::shape_err("apply", format!("{} expects {} inputs, got {}", kind.name(), n, inputs.len())))
            }
        };
        match kind {
            OpKind::Add => {
                want(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                want(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                want(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Matmul => {
                want(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Conv2d { stride } => {
                want(2)?;
                self.conv2d(inputs[0], inputs[1], *stride)
            }
            OpKind::Relu => {
                want(1)?;
                self.relu(inputs[0])
            }
            OpKind::Sigmoid => {
                want(1)?;
                self.sigmoid(inputs[0])
            }
            OpKind::SoftmaxLastDim => {
                want(1)?;
                self.softmax_lastdim(inputs[0])
            }
            OpKind::Mean => {
                want(1)?;
                self.mean(inputs[0])
            }
            OpKind::Sum => {
                want(1)?;
                self.sum(inputs[0])
            }
            OpKind::ConcatLastDim => self.concat_lastdim(inputs),
            OpKind::Slice { axis, start, end } => {
                want(1)?;
                self.slice(inputs[0], *axis, *start, *end)
            }
            OpKind::Broadcast { shape } => {
                want(1)?;
                self.broadcast(inputs[0], shape)
            }
        }
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn elementwise_pair(&mut self, op: Op, name: &'static str, a: TensorId, b: TensorId, f: impl Fn(f64, f64) -> f64) -> Result<TensorId> {
        self.check_finite(name, &[a, b])?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            return Err(Self::shape_err(name, format!("{:?} vs {:?}", na.shape, nb.shape)));
        }
        let values = na.values.iter().zip(&nb.values).map(|(&x, &y)| f(x, y)).collect();
        let shape = na.shape.clone();
        Ok(self.push(op, vec![a.0, b.0], shape, values))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_pair(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_finite("relu", &[x])?;
        let n = &self.nodes[x.0];
        let values = n.values.iter().map(|&v| v.max(0.0)).collect();
        let shape = n.shape.clone();
        Ok(self.push(Op::Relu, vec![x.0], shape, values))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_finite("sigmoid", &[x])?;
        let n = &self.nodes[x.0];
        let values = n.values.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = n.shape.clone();
        Ok(self.push(Op::Sigmoid, vec![x.0], shape, values))
    }

    pub fn abs(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_finite("abs", &[x])?;
        let n = &self.nodes[x.0];
        let values = n.values.iter().map(|&v| v.abs()).collect();
        let shape = n.shape.clone();
        Ok(self.push(Op::Abs, vec![x.0], shape, values))
    }

    // ── matmul / conv ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_finite("matmul", &[a, b])?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(Self::shape_err("matmul", format!("{:?} x {:?}", na.shape, nb.shape)));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_accum(&na.values, &nb.values, &mut out, m, k, n);
        Ok(self.push(Op::Matmul, vec![a.0, b.0], vec![m, n], out))
    }

    /// 3x3 convolution over a channels-last `[h, w, c_in]` input with kernel
    /// `[3, 3, c_in, c_out]`, zero padding 1, stride 1 or 2.
    pub fn conv2d(&mut self, x: TensorId, kernel: TensorId, stride: usize) -> Result<TensorId> {
        self.check_finite("conv2d-3x3", &[x, kernel])?;
        let (nx, nk) = (&self.nodes[x.0], &self.nodes[kernel.0]);
        if !(stride == 1 || stride == 2) {
            return Err(Error::Config(format!("conv2d-3x3 stride must be 1 or 2, got {stride}")));
        }
        if nx.shape.len() != 3 || nk.shape.len() != 4 || nk.shape[0] != 3 || nk.shape[1] != 3 || nk.shape[2] != nx.shape[2] {
            return Err(Self::shape_err(
                "conv2d-3x3",
                format!("input {:?} kernel {:?} (want [h,w,ci] and [3,3,ci,co])", nx.shape, nk.shape),
            ));
        }
        let (h, w, ci) = (nx.shape[0], nx.shape[1], nx.shape[2]);
        let co = nk.shape[3];
        let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let mut out = vec![0.0; oh * ow * co];
        conv2d_forward(&nx.values, &nk.values, &mut out, h, w, ci, co, oh, ow, stride);
        Ok(self.push(Op::Conv2d { stride }, vec![x.0, kernel.0], vec![oh, ow, co], out))
    }

    // ── normalization / reduction ───────────────────────────────────────

    pub fn softmax_lastdim(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_finite("softmax-lastdim", &[x])?;
        let n = &self.nodes[x.0];
        if n.shape.is_empty() {
            return Err(Self::shape_err("softmax-lastdim", "rank-0 input".to_string()));
        }
        let last = *n.shape.last().unwrap();
        let mut values = n.values.clone();
        for row in values.chunks_exact_mut(last) {
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
        let shape = n.shape.clone();
        Ok(self.push(Op::SoftmaxLastDim, vec![x.0], shape, values))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_finite("mean", &[x])?;
        let n = &self.nodes[x.0];
        let v = n.values.iter().sum::<f64>() / n.values.len() as f64;
        Ok(self.push(Op::Mean, vec![x.0], vec![1], vec![v]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_finite("sum", &[x])?;
        let n = &self.nodes[x.0];
        let v = n.values.iter().sum::<f64>();
        Ok(self.push(Op::Sum, vec![x.0], vec![1], vec![v]))
    }

    // ── layout ──────────────────────────────────────────────────────────

    pub fn concat_lastdim(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Self::shape_err("concat-lastdim", "no inputs".to_string()));
        }
        self.check_finite("concat-lastdim", inputs)?;
        let first = &self.nodes[inputs[0].0].shape;
        let rank = first.len();
        if rank == 0 {
            return Err(Self::shape_err("concat-lastdim", "rank-0 input".to_string()));
        }
        let lead_shape = &first[..rank - 1];
        let mut last_total = 0;
        for id in inputs {
            let s = &self.nodes[id.0].shape;
            if s.len() != rank || &s[..rank - 1] != lead_shape {
                return Err(Self::shape_err("concat-lastdim", format!("{:?} vs {:?}", first, s)));
            }
            last_total += s[rank - 1];
        }
        let lead: usize = lead_shape.iter().product();
        let mut values = vec![0.0; lead * last_total];
        let mut offset = 0;
        for id in inputs {
            let n = &self.nodes[id.0];
            let l = n.shape[rank - 1];
            for row in 0..lead {
                values[row * last_total + offset..row * last_total + offset + l]
                    .copy_from_slice(&n.values[row * l..(row + 1) * l]);
            }
            offset += l;
        }
        let mut shape = lead_shape.to_vec();
        shape.push(last_total);
        Ok(self.push(Op::ConcatLastDim, inputs.iter().map(|t| t.0).collect(), shape, values))
    }

    /// Keeps `start..end` along `axis`.
    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, end: usize) -> Result<TensorId> {
        self.check_finite("slice", &[x])?;
        let n = &self.nodes[x.0];
        if axis >= n.shape.len() || start >= end || end > n.shape[axis] {
            return Err(Self::shape_err(
                "slice",
                format!("range {start}..{end} on axis {axis} of {:?}", n.shape),
            ));
        }
        let lead: usize = n.shape[..axis].iter().product();
        let mid = n.shape[axis];
        let trail: usize = n.shape[axis + 1..].iter().product();
        let out_mid = end - start;
        let mut values = vec![0.0; lead * out_mid * trail];
        for l in 0..lead {
            for m in 0..out_mid {
                let src = (l * mid + start + m) * trail;
                let dst = (l * out_mid + m) * trail;
                values[dst..dst + trail].copy_from_slice(&n.values[src..src + trail]);
            }
        }
        let mut shape = n.shape.clone();
        shape[axis] = out_mid;
        Ok(self.push(Op::Slice { axis, start, end }, vec![x.0], shape, values))
    }

    /// Right-aligned broadcast of `x` to `target`.
    pub fn broadcast(&mut self, x: TensorId, target: &[usize]) -> Result<TensorId> {
        self.check_finite("broadcast", &[x])?;
        let n = &self.nodes[x.0];
        let src = &n.shape;
        if src.len() > target.len() {
            return Err(Self::shape_err("broadcast", format!("{:?} -> {:?}", src, target)));
        }
        let off = target.len() - src.len();
        for (j, &s) in src.iter().enumerate() {
            if s != target[off + j] && s != 1 {
                return Err(Self::shape_err("broadcast", format!("{:?} -> {:?}", src, target)));
            }
        }
        let out_n = numel(target);
        let mut values = vec![0.0; out_n];
        let t_strides = strides(target);
        let s_strides = strides(src);
        for (i, v) in values.iter_mut().enumerate() {
            let mut rem = i;
            let mut si = 0;
            for (ax, &st) in t_strides.iter().enumerate() {
                let coord = rem / st;
                rem %= st;
                if ax >= off && src[ax - off] != 1 {
                    si += coord * s_strides[ax - off];
                }
            }
            *v = n.values[si];
        }
        Ok(self.push(Op::Broadcast, vec![x.0], target.to_vec(), values))
    }

    /// Metadata-only reshape; element count must match.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let n = &self.nodes[x.0];
        if numel(shape) != n.values.len() {
            return Err(Self::shape_err("reshape", format!("{:?} -> {:?}", n.shape, shape)));
        }
        let values = n.values.clone();
        Ok(self.push(Op::Reshape, vec![x.0], shape.to_vec(), values))
    }

    // ── matcher-specific ops ────────────────────────────────────────────

    /// Elementwise binary cross-entropy of `logits` against `targets`
    /// (same shape, targets in `[0,1]`), in the numerically stable form
    /// `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: TensorId, targets: TensorId) -> Result<TensorId> {
        self.elementwise_pair(Op::BceWithLogits, "bce-with-logits", logits, targets, |z, y| {
            z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
        })
    }

    /// Bilinear 2x upsampling of an `[h, w, c]` map (half-pixel centers,
    /// clamped borders).
    pub fn upsample2x(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_finite("upsample2x", &[x])?;
        let n = &self.nodes[x.0];
        if n.shape.len() != 3 {
            return Err(Self::shape_err("upsample2x", format!("{:?} (want [h,w,c])", n.shape)));
        }
        let (h, w, c) = (n.shape[0], n.shape[1], n.shape[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut values = vec![0.0; oh * ow * c];
        for oy in 0..oh {
            let (y0, y1, fy) = upsample_taps(oy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = upsample_taps(ox, w);
                let dst = (oy * ow + ox) * c;
                let w00 = (1.0 - fy) * (1.0 - fx);
                let w01 = (1.0 - fy) * fx;
                let w10 = fy * (1.0 - fx);
                let w11 = fy * fx;
                for ch in 0..c {
                    values[dst + ch] = w00 * n.values[(y0 * w + x0) * c + ch]
                        + w01 * n.values[(y0 * w + x1) * c + ch]
                        + w10 * n.values[(y1 * w + x0) * c + ch]
                        + w11 * n.values[(y1 * w + x1) * c + ch];
                }
            }
        }
        Ok(self.push(Op::Upsample2x, vec![x.0], vec![oh, ow, c], values))
    }

    /// Correlation cost volume between `[h, w, c]` feature maps:
    /// `out[v,u,d] = <left[v,u,:], right[v,u-d,:]> / sqrt(c)` for
    /// `d in 0..=max_shift`, zero where `u < d`.
    pub fn cost_volume(&mut self, left: TensorId, right: TensorId, max_shift: usize) -> Result<TensorId> {
        self.check_finite("cost-volume", &[left, right])?;
        let (nl, nr) = (&self.nodes[left.0], &self.nodes[right.0]);
        if nl.shape.len() != 3 || nl.shape != nr.shape {
            return Err(Self::shape_err("cost-volume", format!("{:?} vs {:?}", nl.shape, nr.shape)));
        }
        let (h, w, c) = (nl.shape[0], nl.shape[1], nl.shape[2]);
        let bins = max_shift + 1;
        let scale = 1.0 / (c as f64).sqrt();
        let mut values = vec![0.0; h * w * bins];
        for v in 0..h {
            for u in 0..w {
                let l = &nl.values[(v * w + u) * c..(v * w + u + 1) * c];
                for d in 0..=max_shift.min(u) {
                    let r = &nr.values[(v * w + u - d) * c..(v * w + u - d + 1) * c];
                    let dot: f64 = l.iter().zip(r).map(|(&a, &b)| a * b).sum();
                    values[(v * w + u) * bins + d] = dot * scale;
                }
            }
        }
        Ok(self.push(Op::CostVolume { max_shift }, vec![left.0, right.0], vec![h, w, bins], values))
    }

    // ── convenience compositions ────────────────────────────────────────

    /// Multiplies by a scalar constant (broadcast + mul).
    pub fn scale(&mut self, x: TensorId, k: f64) -> Result<TensorId> {
        let s = self.scalar(k);
        let shape = self.nodes[x.0].shape.clone();
        let b = self.broadcast(s, &shape)?;
        self.mul(x, b)
    }

    /// Clamps to `[0, hi]` as `relu(x) - relu(relu(x) - hi)`.
    pub fn clamp_non_negative(&mut self, x: TensorId, hi: f64) -> Result<TensorId> {
        let lo = self.relu(x)?;
        let shifted = self.scale_shift(lo, 1.0, -hi)?;
        let over = self.relu(shifted)?;
        self.sub(lo, over)
    }

    /// Affine map of every element: `k*x + b` (broadcast constants).
    pub fn scale_shift(&mut self, x: TensorId, k: f64, b: f64) -> Result<TensorId> {
        let scaled = self.scale(x, k)?;
        let c = self.scalar(b);
        let shape = self.nodes[scaled.0].shape.clone();
        let cb = self.broadcast(c, &shape)?;
        self.add(scaled, cb)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Clears all accumulated gradients.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Reverse pass from a scalar root. Each call propagates an upstream
    /// seed of 1 through a fresh buffer set and then adds the result into
    /// the persistent gradients, so two calls without `zero_grad` yield
    /// exactly twice the gradient.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if numel(&self.nodes[root.0].shape) != 1 {
            return Err(Error::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        let mut seed: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        seed[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let (parent_seed, rest) = seed.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else { continue };
            self.propagate(i, g, parent_seed);
        }
        for (i, s) in seed.into_iter().enumerate() {
            if let Some(s) = s {
                let dst = self.grads[i].get_or_insert_with(|| vec![0.0; s.len()]);
                for (d, v) in dst.iter_mut().zip(&s) {
                    *d += v;
                }
            }
        }
        Ok(())
    }

    /// Applies node `i`'s adjoint, accumulating into `parent_seed`
    /// (which holds slots for all nodes with index `< i`).
    fn propagate(&self, i: usize, g: &[f64], parent_seed: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let parent = |p: usize| -> &Node { &self.nodes[node.parents[p]] };
        // Closure-free accumulation helper: ensures the buffer exists.
        macro_rules! grad_of {
            ($p:expr) => {{
                let idx = node.parents[$p];
                let len = self.nodes[idx].values.len();
                parent_seed[idx].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add => {
                for (d, &v) in grad_of!(0).iter_mut().zip(g) {
                    *d += v;
                }
                for (d, &v) in grad_of!(1).iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::Sub => {
                for (d, &v) in grad_of!(0).iter_mut().zip(g) {
                    *d += v;
                }
                for (d, &v) in grad_of!(1).iter_mut().zip(g) {
                    *d -= v;
                }
            }
            Op::Mul => {
                let bv = &parent(1).values;
                for ((d, &v), &b) in grad_of!(0).iter_mut().zip(g).zip(bv) {
                    *d += v * b;
                }
                let av = &parent(0).values;
                for ((d, &v), &a) in grad_of!(1).iter_mut().zip(g).zip(av) {
                    *d += v * a;
                }
            }
            Op::Matmul => {
                let a = parent(0);
                let b = parent(1);
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = b.shape[1];
                {
                    // dA[i,l] += <g[i,:], B[l,:]>
                    let da = grad_of!(0);
                    for row in 0..m {
                        let grow = &g[row * n..(row + 1) * n];
                        let darow = &mut da[row * k..(row + 1) * k];
                        for (l, d) in darow.iter_mut().enumerate() {
                            let brow = &b.values[l * n..(l + 1) * n];
                            let mut acc = 0.0;
                            for (gv, bv) in grow.iter().zip(brow) {
                                acc += gv * bv;
                            }
                            *d += acc;
                        }
                    }
                }
                {
                    // dB[l,:] += A[i,l] * g[i,:]
                    let db = grad_of!(1);
                    for row in 0..m {
                        let grow = &g[row * n..(row + 1) * n];
                        let arow = &a.values[row * k..(row + 1) * k];
                        for (l, &av) in arow.iter().enumerate() {
                            if av != 0.0 {
                                let dbrow = &mut db[l * n..(l + 1) * n];
                                for (d, gv) in dbrow.iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv2d { stride } => {
                let x = parent(0);
                let kern = parent(1);
                let (h, w, ci) = (x.shape[0], x.shape[1], x.shape[2]);
                let co = kern.shape[3];
                let (oh, ow) = (node.shape[0], node.shape[1]);
                conv2d_backward_input(g, &kern.values, grad_of!(0), h, w, ci, co, oh, ow, *stride);
                conv2d_backward_kernel(g, &x.values, grad_of!(1), h, w, ci, co, oh, ow, *stride);
            }
            Op::Relu => {
                let x = &parent(0).values;
                for ((d, &v), &xv) in grad_of!(0).iter_mut().zip(g).zip(x) {
                    if xv > 0.0 {
                        *d += v;
                    }
                }
            }
            Op::Sigmoid => {
                let y = &node.values;
                for ((d, &v), &yv) in grad_of!(0).iter_mut().zip(g).zip(y) {
                    *d += v * yv * (1.0 - yv);
                }
            }
            Op::SoftmaxLastDim => {
                let last = *node.shape.last().unwrap();
                let y = &node.values;
                let dx = grad_of!(0);
                for row in 0..y.len() / last {
                    let yr = &y[row * last..(row + 1) * last];
                    let gr = &g[row * last..(row + 1) * last];
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dx[row * last..(row + 1) * last].iter_mut().zip(yr).zip(gr) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::Mean => {
                let n = parent(0).values.len() as f64;
                let gv = g[0] / n;
                for d in grad_of!(0).iter_mut() {
                    *d += gv;
                }
            }
            Op::Sum => {
                let gv = g[0];
                for d in grad_of!(0).iter_mut() {
                    *d += gv;
                }
            }
            Op::ConcatLastDim => {
                let rank = node.shape.len();
                let total = node.shape[rank - 1];
                let lead: usize = node.shape[..rank - 1].iter().product();
                let mut offset = 0;
                for p in 0..node.parents.len() {
                    let l = *parent(p).shape.last().unwrap();
                    let dp = grad_of!(p);
                    for row in 0..lead {
                        let src = &g[row * total + offset..row * total + offset + l];
                        for (d, &v) in dp[row * l..(row + 1) * l].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                    offset += l;
                }
            }
            Op::Slice { axis, start, .. } => {
                let x = parent(0);
                let lead: usize = x.shape[..*axis].iter().product();
                let mid = x.shape[*axis];
                let trail: usize = x.shape[*axis + 1..].iter().product();
                let out_mid = node.shape[*axis];
                let dx = grad_of!(0);
                for l in 0..lead {
                    for m in 0..out_mid {
                        let dst = (l * mid + start + m) * trail;
                        let src = (l * out_mid + m) * trail;
                        for (d, &v) in dx[dst..dst + trail].iter_mut().zip(&g[src..src + trail]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Broadcast => {
                let src_shape = &parent(0).shape;
                let off = node.shape.len() - src_shape.len();
                let t_strides = strides(&node.shape);
                let s_strides = strides(src_shape);
                let dx = grad_of!(0);
                for (i, &v) in g.iter().enumerate() {
                    let mut rem = i;
                    let mut si = 0;
                    for (ax, &st) in t_strides.iter().enumerate() {
                        let coord = rem / st;
                        rem %= st;
                        if ax >= off && src_shape[ax - off] != 1 {
                            si += coord * s_strides[ax - off];
                        }
                    }
                    dx[si] += v;
                }
            }
            Op::Reshape => {
                for (d, &v) in grad_of!(0).iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::Abs => {
                let x = &parent(0).values;
                for ((d, &v), &xv) in grad_of!(0).iter_mut().zip(g).zip(x) {
                    // d|x|/dx taken as 0 at x == 0
                    *d += v * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 };
                }
            }
            Op::BceWithLogits => {
                let z = &parent(0).values;
                let y = &parent(1).values;
                {
                    let dz = grad_of!(0);
                    for i in 0..z.len() {
                        let sig = 1.0 / (1.0 + (-z[i]).exp());
                        dz[i] += g[i] * (sig - y[i]);
                    }
                }
                {
                    let dy = grad_of!(1);
                    for i in 0..z.len() {
                        dy[i] += g[i] * (-z[i]);
                    }
                }
            }
            Op::Upsample2x => {
                let x = parent(0);
                let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let dx = grad_of!(0);
                for oy in 0..oh {
                    let (y0, y1, fy) = upsample_taps(oy, h);
                    for ox in 0..ow {
                        let (x0, x1, fx) = upsample_taps(ox, w);
                        let src = (oy * ow + ox) * c;
                        let w00 = (1.0 - fy) * (1.0 - fx);
                        let w01 = (1.0 - fy) * fx;
                        let w10 = fy * (1.0 - fx);
                        let w11 = fy * fx;
                        for ch in 0..c {
                            let gv = g[src + ch];
                            dx[(y0 * w + x0) * c + ch] += w00 * gv;
                            dx[(y0 * w + x1) * c + ch] += w01 * gv;
                            dx[(y1 * w + x0) * c + ch] += w10 * gv;
                            dx[(y1 * w + x1) * c + ch] += w11 * gv;
                        }
                    }
                }
            }
            Op::CostVolume { max_shift } => {
                let l = parent(0);
                let r = parent(1);
                let (h, w, c) = (l.shape[0], l.shape[1], l.shape[2]);
                let bins = max_shift + 1;
                let scale = 1.0 / (c as f64).sqrt();
                {
                    let dl = grad_of!(0);
                    for v in 0..h {
                        for u in 0..w {
                            for d in 0..=max_shift.min(u) {
                                let gv = g[(v * w + u) * bins + d] * scale;
                                if gv != 0.0 {
                                    let rs = (v * w + u - d) * c;
                                    for ch in 0..c {
                                        dl[(v * w + u) * c + ch] += gv * r.values[rs + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                {
                    let dr = grad_of!(1);
                    for v in 0..h {
                        for u in 0..w {
                            for d in 0..=max_shift.min(u) {
                                let gv = g[(v * w + u) * bins + d] * scale;
                                if gv != 0.0 {
                                    let ls = (v * w + u) * c;
                                    for ch in 0..c {
                                        dr[(v * w + u - d) * c + ch] += gv * l.values[ls + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Indices of all transitive inputs of `id`, including `id` itself.
    pub fn ancestors(&self, id: TensorId) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        let mut stack = vec![id.0];
        while let Some(i) = stack.pop() {
            if mark[i] {
                continue;
            }
            mark[i] = true;
            stack.extend_from_slice(&self.nodes[i].parents);
        }
        mark
    }

    /// Param-set slots referenced by leaves in the ancestor set of `id`.
    pub fn ancestor_params(&self, id: TensorId) -> Vec<usize> {
        let mark = self.ancestors(id);
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if mark[i] {
                if let Op::Leaf { param: Some(p) } = node.op {
                    out.push(p);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    pub(crate) fn param_leaf_grads(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Leaf { param: Some(p) } => self.grads[i].as_deref().map(|g| (p, g)),
            _ => None,
        })
    }
}

/// Source taps and fraction for bilinear 2x upsampling with half-pixel
/// centers and clamped borders.
fn upsample_taps(o: usize, extent: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) * 0.5 - 0.5;
    let floor = s.floor();
    let f = s - floor;
    let i0 = floor.max(0.0) as usize;
    let i0 = i0.min(extent - 1);
    let i1 = (i0 + 1).min(extent - 1);
    if s < 0.0 {
        (0, 0, 0.0)
    } else {
        (i0, i1, f)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[i,j] += sum_l a[i,l] * b[l,j]`
fn matmul_accum(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(x: &[f64], k: &[f64], out: &mut [f64], h: usize, w: usize, ci: usize, co: usize, oh: usize, ow: usize, stride: usize) {
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = &mut out[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
            for dy in 0..3 {
                let y = (oy * stride + dy) as isize - 1;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let xx = (ox * stride + dx) as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let xbase = (y as usize * w + xx as usize) * ci;
                    let kbase = (dy * 3 + dx) * ci * co;
                    for c_in in 0..ci {
                        let a = x[xbase + c_in];
                        let krow = &k[kbase + c_in * co..kbase + (c_in + 1) * co];
                        for (o, &kv) in orow.iter_mut().zip(krow) {
                            *o += a * kv;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(g: &[f64], k: &[f64], dx: &mut [f64], h: usize, w: usize, ci: usize, co: usize, oh: usize, ow: usize, stride: usize) {
    for oy in 0..oh {
        for ox in 0..ow {
            let grow = &g[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
            for dy in 0..3 {
                let y = (oy * stride + dy) as isize - 1;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dxx in 0..3 {
                    let xx = (ox * stride + dxx) as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let xbase = (y as usize * w + xx as usize) * ci;
                    let kbase = (dy * 3 + dxx) * ci * co;
                    for c_in in 0..ci {
                        let krow = &k[kbase + c_in * co..kbase + (c_in + 1) * co];
                        let mut acc = 0.0;
                        for (gv, kv) in grow.iter().zip(krow) {
                            acc += gv * kv;
                        }
                        dx[xbase + c_in] += acc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_kernel(g: &[f64], x: &[f64], dk: &mut [f64], h: usize, w: usize, ci: usize, co: usize, oh: usize, ow: usize, stride: usize) {
    for oy in 0..oh {
        for ox in 0..ow {
            let grow = &g[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
            for dy in 0..3 {
                let y = (oy * stride + dy) as isize - 1;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dxx in 0..3 {
                    let xx = (ox * stride + dxx) as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let xbase = (y as usize * w + xx as usize) * ci;
                    let kbase = (dy * 3 + dxx) * ci * co;
                    for c_in in 0..ci {
                        let a = x[xbase + c_in];
                        if a != 0.0 {
                            let krow = &mut dk[kbase + c_in * co..kbase + (c_in + 1) * co];
                            for (d, &gv) in krow.iter_mut().zip(grow) {
                                *d += a * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}
