//! Recorded computation and its reverse sweep.

use super::kernels::{gemm, ConvGeom};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Input,
    Param { store: u64, name: String },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    AddRowBias(NodeId, NodeId),
    ScaleRows(NodeId, Vec<f64>),
    MatMul(NodeId, NodeId),
    Conv2d { x: NodeId, w: NodeId, geom: ConvGeom, out_ch: usize },
    ConvT2d { x: NodeId, w: NodeId, geom: ConvGeom, out_ch: usize },
    AddChannelBias(NodeId, NodeId),
    AddChannels(NodeId, NodeId),
    BroadcastSpatial(NodeId, usize, usize),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Silu(NodeId),
    Tanh(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumSquares(NodeId),
    MaxAbs(NodeId, usize),
    RowSumSquares(NodeId),
    RowSmoothMaxAbs(NodeId, f64),
    RowMaxAbs(NodeId, Vec<usize>),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    Reshape(NodeId),
    Stack { inputs: Vec<NodeId>, picks: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddRowBias(..) => "add_row_bias",
            Op::ScaleRows(..) => "scale_rows",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT2d { .. } => "conv_transpose2d",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::AddChannels(..) => "add_channels",
            Op::BroadcastSpatial(..) => "broadcast_spatial",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Silu(_) => "silu",
            Op::Tanh(_) => "tanh",
            Op::Sqrt(_) => "sqrt",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumSquares(_) => "sum_squares",
            Op::MaxAbs(..) => "max_abs",
            Op::RowSumSquares(_) => "row_sum_squares",
            Op::RowSmoothMaxAbs(..) => "row_smooth_max_abs",
            Op::RowMaxAbs(..) => "row_max_abs",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Stack { .. } => "stack",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Nodes are appended in
/// evaluation order, so every op's inputs precede it.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// (store id, store version) for every parameter store read.
    bindings: Vec<(u64, u64)>,
}

/// Run `f` on a fresh tape and return the output value with the tape.
pub fn eval<F>(f: F) -> Result<(Tensor, Tape)>
where
    F: FnOnce(&mut Tape) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape)?;
    Ok((tape.value(out).clone(), tape))
}

/// Standard transformer-style sinusoidal features of integer timesteps,
/// `[sin(t·ω_j), cos(t·ω_j)]` with `ω_j = 10000^{-j/(dim/2)}`.
pub fn sinusoidal_embedding(timesteps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; timesteps.len() * dim];
    for (i, &t) in timesteps.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            data[i * dim + j] = arg.sin();
            data[i * dim + half + j] = arg.cos();
        }
    }
    Tensor {
        shape: vec![timesteps.len(), dim],
        data,
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, &a.shape, &b.shape));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::Numerical { op: op.name(), node: id });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Constant, false)
    }

    /// Differentiable leaf that is not a parameter (its adjoint is
    /// available from [`Gradients::get`]).
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Input, true)
    }

    /// Leaf holding a copy of the named parameter. It requires a gradient
    /// only if the parameter is trainable in `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let value = store
            .value(name)
            .ok_or_else(|| Error::config(name, "unknown parameter"))?
            .clone();
        let binding = (store.id(), store.version());
        match self.bindings.iter().find(|(id, _)| *id == binding.0) {
            Some(&(_, v)) if v != binding.1 => return Err(Error::StaleTape),
            Some(_) => {}
            None => self.bindings.push(binding),
        }
        let trainable = store.is_trainable(name);
        self.push(
            value,
            Op::Param {
                store: store.id(),
                name: name.to_string(),
            },
            trainable,
        )
    }

    pub fn sinusoidal(&mut self, timesteps: &[usize], dim: usize) -> Result<NodeId> {
        self.constant(sinusoidal_embedding(timesteps, dim))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        make: fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(op, va, vb)?;
        let v = va.zip_map(vb, f)?;
        let rg = self.rg(&[a, b]);
        self.push(v, make(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.nodes[a.0].value.scale(c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// `a·α + b·β`, a common pattern in sampler updates.
    pub fn axpby(&mut self, a: NodeId, alpha: f64, b: NodeId, beta: f64) -> Result<NodeId> {
        let sa = self.scale(a, alpha)?;
        let sb = self.scale(b, beta)?;
        self.add(sa, sb)
    }

    /// `[n, m] + [m]`, adding the bias to every row.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let m = vb.len();
        if vb.rank() != 1 || va.rank() != 2 || va.shape[1] != m {
            return Err(Error::shape("add_row_bias", &va.shape, &vb.shape));
        }
        let mut v = va.clone();
        for row in v.data.chunks_mut(m) {
            row.iter_mut().zip(&vb.data).for_each(|(x, b)| *x += b);
        }
        let rg = self.rg(&[a, bias]);
        self.push(v, Op::AddRowBias(a, bias), rg)
    }

    /// Multiply leading-axis row `i` by the constant `s[i]`.
    pub fn scale_rows(&mut self, a: NodeId, s: Vec<f64>) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.rows() != s.len() {
            return Err(Error::shape("scale_rows", &va.shape, &[s.len()]));
        }
        let w = va.row_len();
        let mut v = va.clone();
        for (row, &c) in v.data.chunks_mut(w.max(1)).zip(&s) {
            row.iter_mut().for_each(|x| *x *= c);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::ScaleRows(a, s), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0] {
            return Err(Error::shape("matmul", &va.shape, &vb.shape));
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &va.data, false, &vb.data, false, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg)
    }

    /// `x: [N, C, H, W]`, `w: [O, C, K, K]`, zero padding `pad`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if vx.rank() != 4 || vw.rank() != 4 || vw.shape[1] != vx.shape[1] || vw.shape[2] != vw.shape[3] {
            return Err(Error::shape("conv2d", &vx.shape, &vw.shape));
        }
        let (n, c, h, wd) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let (o, k) = (vw.shape[0], vw.shape[2]);
        let geom = ConvGeom::new(c, h, wd, k, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", &vx.shape, &vw.shape))?;
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut buf = vec![0.0; rows * cols];
        let mut out = vec![0.0; n * o * cols];
        let img = c * h * wd;
        for s in 0..n {
            geom.im2col(&vx.data[s * img..(s + 1) * img], &mut buf);
            gemm(o, rows, cols, &vw.data, false, &buf, false, &mut out[s * o * cols..(s + 1) * o * cols], false);
        }
        let rg = self.rg(&[x, w]);
        self.push(
            Tensor { shape: vec![n, o, geom.oh, geom.ow], data: out },
            Op::Conv2d { x, w, geom, out_ch: o },
            rg,
        )
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`] with the
    /// same stride and padding. `x: [N, Cin, H, W]`, `w: [Cin, Cout, K, K]`,
    /// output extent `(H−1)·stride − 2·pad + K`.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if vx.rank() != 4 || vw.rank() != 4 || vw.shape[0] != vx.shape[1] || vw.shape[2] != vw.shape[3] || stride == 0 {
            return Err(Error::shape("conv_transpose2d", &vx.shape, &vw.shape));
        }
        let (n, cin, h, wd) = (vx.shape[0], vx.shape[1], vx.shape[2], vx.shape[3]);
        let (cout, k) = (vw.shape[1], vw.shape[2]);
        let oh = ((h - 1) * stride + k).checked_sub(2 * pad);
        let ow = ((wd - 1) * stride + k).checked_sub(2 * pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape("conv_transpose2d", &vx.shape, &vw.shape));
        };
        let geom = ConvGeom::new(cout, oh, ow, k, stride, pad)
            .filter(|g| g.oh == h && g.ow == wd)
            .ok_or_else(|| Error::shape("conv_transpose2d", &vx.shape, &vw.shape))?;
        let rows = geom.col_rows();
        let hw = h * wd;
        let mut buf = vec![0.0; rows * hw];
        let out_img = cout * oh * ow;
        let mut out = vec![0.0; n * out_img];
        for s in 0..n {
            gemm(rows, cin, hw, &vw.data, true, &vx.data[s * cin * hw..(s + 1) * cin * hw], false, &mut buf, false);
            geom.col2im(&buf, &mut out[s * out_img..(s + 1) * out_img]);
        }
        let rg = self.rg(&[x, w]);
        self.push(
            Tensor { shape: vec![n, cout, oh, ow], data: out },
            Op::ConvT2d { x, w, geom, out_ch: cout },
            rg,
        )
    }

    /// `[N, C, H, W] + [C]`.
    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if vx.rank() != 4 || vb.rank() != 1 || vb.len() != vx.shape[1] {
            return Err(Error::shape("add_channel_bias", &vx.shape, &vb.shape));
        }
        let plane = vx.shape[2] * vx.shape[3];
        let c = vx.shape[1];
        let mut v = vx.clone();
        for (i, chunk) in v.data.chunks_mut(plane).enumerate() {
            let bias = vb.data[i % c];
            chunk.iter_mut().for_each(|z| *z += bias);
        }
        let rg = self.rg(&[x, b]);
        self.push(v, Op::AddChannelBias(x, b), rg)
    }

    /// `[N, C, H, W] + [N, C]`, a per-sample channel offset.
    pub fn add_channels(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if vx.rank() != 4 || vb.shape != vx.shape[..2] {
            return Err(Error::shape("add_channels", &vx.shape, &vb.shape));
        }
        let plane = vx.shape[2] * vx.shape[3];
        let mut v = vx.clone();
        for (i, chunk) in v.data.chunks_mut(plane).enumerate() {
            let bias = vb.data[i];
            chunk.iter_mut().for_each(|z| *z += bias);
        }
        let rg = self.rg(&[x, b]);
        self.push(v, Op::AddChannels(x, b), rg)
    }

    /// `[N, D] → [N, D, H, W]` by repeating each value over the plane.
    pub fn broadcast_spatial(&mut self, a: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 {
            return Err(Error::shape("broadcast_spatial", &va.shape, &[h, w]));
        }
        let mut data = Vec::with_capacity(va.len() * h * w);
        for &x in &va.data {
            data.extend(std::iter::repeat_n(x, h * w));
        }
        let shape = vec![va.shape[0], va.shape[1], h, w];
        let rg = self.rg(&[a]);
        self.push(Tensor { shape, data }, Op::BroadcastSpatial(a, h, w), rg)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(f);
        let rg = self.rg(&[a]);
        self.push(v, op, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Elementwise square root; negative inputs fail as non-finite.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.nodes[a.0].value.sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        if va.is_empty() {
            return Err(Error::shape("mean", &va.shape, &[]));
        }
        let v = Tensor::scalar(va.mean());
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// Squared L2 norm over all elements.
    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.nodes[a.0].value.data.iter().map(|x| x * x).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::SumSquares(a), rg)
    }

    /// True ℓ∞ norm; the gradient flows to the first arg-max.
    pub fn max_abs(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, &x) in va.data.iter().enumerate() {
            if x.abs() > best.1 {
                best = (i, x.abs());
            }
        }
        let v = Tensor::scalar(best.1.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::MaxAbs(a, best.0), rg)
    }

    /// Per-row squared L2 norm, `[n, ...] → [n]`.
    pub fn row_sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let w = va.row_len();
        let data = (0..va.rows())
            .map(|i| va.data[i * w..(i + 1) * w].iter().map(|x| x * x).sum())
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::vector(data), Op::RowSumSquares(a), rg)
    }

    /// Per-row log-sum-exp of `|x|` with sharpness `beta`:
    /// `max|x| ≤ out ≤ max|x| + ln(m)/beta`.
    pub fn row_smooth_max_abs(&mut self, a: NodeId, beta: f64) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let w = va.row_len();
        let data = (0..va.rows())
            .map(|i| {
                let row = &va.data[i * w..(i + 1) * w];
                let m = row.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let s: f64 = row.iter().map(|x| (beta * (x.abs() - m)).exp()).sum();
                m + s.ln() / beta
            })
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::vector(data), Op::RowSmoothMaxAbs(a, beta), rg)
    }

    /// Per-row true max of `|x|`.
    pub fn row_max_abs(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let w = va.row_len();
        let mut arg = Vec::with_capacity(va.rows());
        let mut data = Vec::with_capacity(va.rows());
        for i in 0..va.rows() {
            let row = &va.data[i * w..(i + 1) * w];
            let (j, m) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, x)| if x.abs() > b.1 { (j, x.abs()) } else { b });
            arg.push(j);
            data.push(m.max(0.0));
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::vector(data), Op::RowMaxAbs(a, arg), rg)
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = &self.nodes[inputs[0].0].value;
        if axis >= first.rank() {
            return Err(Error::shape("concat", &first.shape, &[axis]));
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut total = 0;
        for id in inputs {
            let s = &self.nodes[id.0].value.shape;
            if s.len() != first.rank() || s[..axis] != first.shape[..axis] || s[axis + 1..] != first.shape[axis + 1..] {
                return Err(Error::shape("concat", &first.shape, s));
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for id in inputs {
                let v = &self.nodes[id.0].value;
                let blk = v.shape[axis] * inner;
                data.extend_from_slice(&v.data[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        let rg = self.rg(inputs);
        self.push(Tensor { shape, data }, Op::Concat { inputs: inputs.to_vec(), axis }, rg)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if axis >= v.rank() || start + len > v.shape[axis] {
            return Err(Error::shape("slice", &v.shape, &[axis, start, len]));
        }
        let outer: usize = v.shape[..axis].iter().product();
        let inner: usize = v.shape[axis + 1..].iter().product();
        let blk = v.shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&v.data[o * blk + start * inner..o * blk + (start + len) * inner]);
        }
        let mut shape = v.shape.clone();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, Op::Slice { x, axis, start }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.nodes[x.0].value.reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(v, Op::Reshape(x), rg)
    }

    /// Row `r` of the output is `inputs[picks[r]]`; all inputs share a shape.
    /// Used as the embedding-table lookup.
    pub fn stack(&mut self, inputs: &[NodeId], picks: &[usize]) -> Result<NodeId> {
        let first = &self.nodes[inputs[0].0].value;
        for id in inputs {
            same_shape("stack", first, &self.nodes[id.0].value)?;
        }
        let w = first.len();
        let mut data = Vec::with_capacity(picks.len() * w);
        for &p in picks {
            let src = inputs
                .get(p)
                .ok_or_else(|| Error::shape("stack", &[inputs.len()], &[p]))?;
            data.extend_from_slice(&self.nodes[src.0].value.data);
        }
        let mut shape = vec![picks.len()];
        shape.extend_from_slice(&first.shape);
        let rg = self.rg(inputs);
        self.push(
            Tensor { shape, data },
            Op::Stack { inputs: inputs.to_vec(), picks: picks.to_vec() },
            rg,
        )
    }

    /// Reverse sweep from `output` seeded with `seed` (same shape).
    pub fn backward(&self, output: NodeId, seed: Tensor) -> Result<Gradients> {
        same_shape("backward", &self.nodes[output.0].value, &seed)?;
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    /// Backward from a scalar output with seed 1, accumulated into `store`.
    pub fn backward_into(&self, output: NodeId, store: &mut ParamStore) -> Result<Gradients> {
        let seed = Tensor::full(self.shape(output), 1.0);
        let grads = self.backward(output, seed)?;
        grads.accumulate(self, store)?;
        Ok(grads)
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let slot = adj[id.0].get_or_insert_with(|| Tensor::zeros(&self.nodes[id.0].value.shape));
            f(&mut slot.data);
        };
        match &node.op {
            Op::Constant | Op::Input | Op::Param { .. } => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(&g.data).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((x, gi), bi) in d.iter_mut().zip(&g.data).zip(&vb.data) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, gi), ai) in d.iter_mut().zip(&g.data).zip(&va.data) {
                        *x += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(&g.data).for_each(|(x, y)| *x += c * y)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, &mut |d| d.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y))
            }
            Op::AddRowBias(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y));
                let m = val(*b).len();
                acc(*b, &mut |d| {
                    for row in g.data.chunks(m) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::ScaleRows(a, s) => {
                let w = val(*a).row_len().max(1);
                acc(*a, &mut |d| {
                    for ((drow, grow), c) in d.chunks_mut(w).zip(g.data.chunks(w)).zip(s) {
                        drow.iter_mut().zip(grow).for_each(|(x, y)| *x += c * y);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                acc(*a, &mut |d| gemm(m, n, k, &g.data, false, &vb.data, true, d, true));
                acc(*b, &mut |d| gemm(k, m, n, &va.data, true, &g.data, false, d, true));
            }
            Op::Conv2d { x, w, geom, out_ch } => {
                let (vx, vw) = (val(*x), val(*w));
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let n = vx.shape[0];
                let img = geom.channels * geom.h * geom.w;
                let o = *out_ch;
                let mut buf = vec![0.0; rows * cols];
                if wants(*w) {
                    acc(*w, &mut |d| {
                        for s in 0..n {
                            geom.im2col(&vx.data[s * img..(s + 1) * img], &mut buf);
                            gemm(o, cols, rows, &g.data[s * o * cols..(s + 1) * o * cols], false, &buf, true, d, true);
                        }
                    });
                }
                if wants(*x) {
                    acc(*x, &mut |d| {
                        for s in 0..n {
                            gemm(rows, o, cols, &vw.data, true, &g.data[s * o * cols..(s + 1) * o * cols], false, &mut buf, false);
                            geom.col2im(&buf, &mut d[s * img..(s + 1) * img]);
                        }
                    });
                }
            }
            Op::ConvT2d { x, w, geom, out_ch } => {
                let (vx, vw) = (val(*x), val(*w));
                let rows = geom.col_rows();
                let hw = geom.col_cols();
                let n = vx.shape[0];
                let cin = vx.shape[1];
                let out_img = out_ch * geom.h * geom.w;
                let mut buf = vec![0.0; rows * hw];
                let need_w = wants(*w);
                let need_x = wants(*x);
                let mut gw = if need_w { vec![0.0; vw.len()] } else { Vec::new() };
                let mut gx = if need_x { vec![0.0; vx.len()] } else { Vec::new() };
                for s in 0..n {
                    geom.im2col(&g.data[s * out_img..(s + 1) * out_img], &mut buf);
                    if need_x {
                        gemm(cin, rows, hw, &vw.data, false, &buf, false, &mut gx[s * cin * hw..(s + 1) * cin * hw], true);
                    }
                    if need_w {
                        gemm(cin, hw, rows, &vx.data[s * cin * hw..(s + 1) * cin * hw], false, &buf, true, &mut gw, true);
                    }
                }
                if need_w {
                    acc(*w, &mut |d| d.iter_mut().zip(&gw).for_each(|(a, b)| *a += b));
                }
                if need_x {
                    acc(*x, &mut |d| d.iter_mut().zip(&gx).for_each(|(a, b)| *a += b));
                }
            }
            Op::AddChannelBias(x, b) => {
                acc(*x, &mut |d| d.iter_mut().zip(&g.data).for_each(|(a, y)| *a += y));
                let vx = val(*x);
                let plane = vx.shape[2] * vx.shape[3];
                let c = vx.shape[1];
                acc(*b, &mut |d| {
                    for (i, chunk) in g.data.chunks(plane).enumerate() {
                        d[i % c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::AddChannels(x, b) => {
                acc(*x, &mut |d| d.iter_mut().zip(&g.data).for_each(|(a, y)| *a += y));
                let vx = val(*x);
                let plane = vx.shape[2] * vx.shape[3];
                acc(*b, &mut |d| {
                    for (i, chunk) in g.data.chunks(plane).enumerate() {
                        d[i] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::BroadcastSpatial(a, h, w) => {
                let plane = h * w;
                acc(*a, &mut |d| {
                    for (i, chunk) in g.data.chunks(plane).enumerate() {
                        d[i] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for ((x, gi), ai) in d.iter_mut().zip(&g.data).zip(&va.data) {
                        if *ai > 0.0 {
                            *x += gi;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for ((x, gi), ai) in d.iter_mut().zip(&g.data).zip(&va.data) {
                        *x += if *ai > 0.0 { *gi } else { slope * gi };
                    }
                });
            }
            Op::Silu(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for ((x, gi), &ai) in d.iter_mut().zip(&g.data).zip(&va.data) {
                        let s = sigmoid(ai);
                        *x += gi * (s + ai * s * (1.0 - s));
                    }
                });
            }
            Op::Tanh(a) => {
                let out = &node.value;
                acc(*a, &mut |d| {
                    for ((x, gi), yi) in d.iter_mut().zip(&g.data).zip(&out.data) {
                        *x += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Sqrt(a) => {
                let out = &node.value;
                acc(*a, &mut |d| {
                    for ((x, gi), yi) in d.iter_mut().zip(&g.data).zip(&out.data) {
                        *x += gi * 0.5 / yi;
                    }
                });
            }
            Op::Sum(a) => {
                let s = g.data[0];
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += s));
            }
            Op::Mean(a) => {
                let s = g.data[0] / val(*a).len() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += s));
            }
            Op::SumSquares(a) => {
                let va = val(*a);
                let s = g.data[0];
                acc(*a, &mut |d| d.iter_mut().zip(&va.data).for_each(|(x, ai)| *x += 2.0 * s * ai));
            }
            Op::MaxAbs(a, j) => {
                let v = val(*a).data.get(*j).copied().unwrap_or(0.0);
                let s = g.data[0] * v.signum() * (v != 0.0) as u8 as f64;
                acc(*a, &mut |d| {
                    if let Some(x) = d.get_mut(*j) {
                        *x += s;
                    }
                });
            }
            Op::RowSumSquares(a) => {
                let va = val(*a);
                let w = va.row_len().max(1);
                acc(*a, &mut |d| {
                    for ((drow, arow), gi) in d.chunks_mut(w).zip(va.data.chunks(w)).zip(&g.data) {
                        drow.iter_mut().zip(arow).for_each(|(x, ai)| *x += 2.0 * gi * ai);
                    }
                });
            }
            Op::RowSmoothMaxAbs(a, beta) => {
                let va = val(*a);
                let w = va.row_len().max(1);
                let out = &node.value;
                acc(*a, &mut |d| {
                    for (i, (drow, arow)) in d.chunks_mut(w).zip(va.data.chunks(w)).enumerate() {
                        for (x, &ai) in drow.iter_mut().zip(arow) {
                            let p = (beta * (ai.abs() - out.data[i])).exp();
                            let sgn = if ai > 0.0 { 1.0 } else if ai < 0.0 { -1.0 } else { 0.0 };
                            *x += g.data[i] * p * sgn;
                        }
                    }
                });
            }
            Op::RowMaxAbs(a, arg) => {
                let va = val(*a);
                let w = va.row_len().max(1);
                acc(*a, &mut |d| {
                    for (i, &j) in arg.iter().enumerate() {
                        let v = va.data[i * w + j];
                        let sgn = if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
                        d[i * w + j] += g.data[i] * sgn;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = &node.value.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for id in inputs {
                    let blk = val(*id).shape[*axis] * inner;
                    acc(*id, &mut |d| {
                        for o in 0..outer {
                            let src = &g.data[o * total + offset..o * total + offset + blk];
                            d[o * blk..(o + 1) * blk].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += blk;
                }
            }
            Op::Slice { x, axis, start } => {
                let vx = val(*x);
                let outer: usize = vx.shape[..*axis].iter().product();
                let inner: usize = vx.shape[axis + 1..].iter().product();
                let blk = vx.shape[*axis] * inner;
                let len = node.value.shape[*axis] * inner;
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let dst = &mut d[o * blk + start * inner..o * blk + start * inner + len];
                        dst.iter_mut().zip(&g.data[o * len..(o + 1) * len]).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Stack { inputs, picks } => {
                let w = val(inputs[0]).len();
                for (k, id) in inputs.iter().enumerate() {
                    acc(*id, &mut |d| {
                        for (r, &p) in picks.iter().enumerate() {
                            if p == k {
                                d.iter_mut().zip(&g.data[r * w..(r + 1) * w]).for_each(|(a, b)| *a += b);
                            }
                        }
                    });
                }
            }
        }
    }
}

/// Adjoints of every node reached by a backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `id`, or `None` if the node does not influence the output
    /// or does not require a gradient.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }

    /// Add adjoints of `store`'s parameter leaves into its gradient slots.
    /// Fails with [`Error::StaleTape`] if the store changed since recording.
    pub fn accumulate(&self, tape: &Tape, store: &mut ParamStore) -> Result<()> {
        let Some(&(_, version)) = tape.bindings.iter().find(|(id, _)| *id == store.id()) else {
            return Ok(());
        };
        if version != store.version() {
            return Err(Error::StaleTape);
        }
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Param { store: sid, name } = &node.op {
                if *sid != store.id() {
                    continue;
                }
                if let Some(g) = self.adjoints.get(i).and_then(Option::as_ref) {
                    store.add_grad(name, g)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, relative_error};
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_and_identity_cases() {
        let (v, _) = eval(|tp| {
            let a = tp.constant(Tensor::vector(vec![1.0, 2.0]))?;
            let b = tp.constant(Tensor::vector(vec![3.0, 4.0]))?;
            tp.add(a, b)
        })
        .unwrap();
        assert_eq!(v.data(), &[4.0, 6.0]);

        let a = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let (v, _) = eval(|tp| {
            let i = tp.constant(eye.clone())?;
            let x = tp.constant(a.clone())?;
            tp.matmul(i, x)
        })
        .unwrap();
        assert_eq!(v, a);

        let (v, _) = eval(|tp| {
            let x = tp.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]))?;
            tp.relu(x)
        })
        .unwrap();
        assert_eq!(v.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn simple_gradients() {
        let mut tp = Tape::new();
        let x = tp.input(Tensor::vector(vec![0.3, -1.0, 2.0, 5.0])).unwrap();
        let s = tp.sum(x).unwrap();
        let g = tp.backward(s, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);

        let mut tp = Tape::new();
        let x = tp.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = tp.mul(x, x).unwrap();
        let s = tp.sum(y).unwrap();
        let g = tp.backward(s, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn weight_gradient_against_finite_differences() {
        let mut store = ParamStore::new();
        store.insert("w", t(&[2, 2], &[0.5, -0.3, 1.2, 0.7]));
        let xv = t(&[2, 1], &[1.0, 0.0]);
        let f = |p: &ParamStore| -> Result<f64> {
            let (v, _) = eval(|tp| {
                let w = tp.param(p, "w")?;
                let x = tp.constant(xv.clone())?;
                let y = tp.matmul(w, x)?;
                tp.sum(y)
            })?;
            Ok(v.data()[0])
        };
        let mut tp = Tape::new();
        let w = tp.param(&store, "w").unwrap();
        let x = tp.constant(xv.clone()).unwrap();
        let y = tp.matmul(w, x).unwrap();
        let s = tp.sum(y).unwrap();
        tp.backward_into(s, &mut store).unwrap();
        let fd = finite_difference_gradient(f, &store, 1e-6).unwrap();
        let g = store.grad("w").unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 1.0, 0.0]);
        assert!(relative_error(g.data(), fd["w"].data()) < 1e-9);
    }

    #[test]
    fn stale_tape_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0]));
        let mut tp = Tape::new();
        let w = tp.param(&store, "w").unwrap();
        let s = tp.sum(w).unwrap();
        store.set_value("w", Tensor::vector(vec![2.0])).unwrap();
        let g = tp.backward(s, Tensor::scalar(1.0)).unwrap();
        assert!(matches!(g.accumulate(&tp, &mut store), Err(Error::StaleTape)));
        assert!(matches!(tp.param(&store, "w"), Err(Error::StaleTape)));
    }

    #[test]
    fn errors_name_op_and_node() {
        let mut tp = Tape::new();
        let a = tp.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = tp.constant(Tensor::vector(vec![1.0])).unwrap();
        match tp.add(a, b) {
            Err(Error::Shape { op, left, right }) => {
                assert_eq!(op, "add");
                assert_eq!((left, right), (vec![2], vec![1]));
            }
            other => panic!("{other:?}"),
        }
        let big = tp.constant(Tensor::vector(vec![1e200])).unwrap();
        let sq = tp.mul(big, big);
        assert!(matches!(sq, Err(Error::Numerical { op: "mul", node: 3 })));
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::vector(vec![1.0, 2.0]));
        store.insert("b", Tensor::vector(vec![3.0, 4.0]));
        store.set_trainable("b", false);
        let mut tp = Tape::new();
        let a = tp.param(&store, "a").unwrap();
        let b = tp.param(&store, "b").unwrap();
        let p = tp.mul(a, b).unwrap();
        let s = tp.sum(p).unwrap();
        tp.backward_into(s, &mut store).unwrap();
        assert_eq!(store.grad("a").unwrap().data(), &[3.0, 4.0]);
        assert_eq!(store.grad("b").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn sinusoidal_layout() {
        let e = sinusoidal_embedding(&[0, 3], 4);
        assert_eq!(e.shape(), &[2, 4]);
        assert_eq!(e.row(0), &[0.0, 0.0, 1.0, 1.0]);
        assert!((e.row(1)[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e.row(1)[1] - (3.0 * 0.01f64).sin()).abs() < 1e-15);
    }

    fn vectors(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (prop::collection::vec(-3.0f64..3.0, n), prop::collection::vec(-3.0f64..3.0, n))
    }

    proptest! {
        #[test]
        fn eval_is_bitwise_pure((x, y) in vectors(17)) {
            let run = || {
                eval(|tp| {
                    let a = tp.constant(Tensor::vector(x.clone()))?;
                    let b = tp.constant(Tensor::vector(y.clone()))?;
                    let c = tp.mul(a, b)?;
                    let d = tp.silu(c)?;
                    let e = tp.tanh(d)?;
                    tp.sum_squares(e)
                })
                .unwrap()
                .0
            };
            prop_assert_eq!(run().data()[0].to_bits(), run().data()[0].to_bits());
        }

        #[test]
        fn adjoints_are_linear_in_the_output((x, y) in vectors(9)) {
            let grads = |first: bool, second: bool| {
                let mut tp = Tape::new();
                let a = tp.input(Tensor::vector(x.clone())).unwrap();
                let b = tp.input(Tensor::vector(y.clone())).unwrap();
                let ab = tp.mul(a, b).unwrap();
                let th = tp.tanh(ab).unwrap();
                let f = tp.sum(th).unwrap();
                let sa = tp.silu(a).unwrap();
                let g = tp.sum_squares(sa).unwrap();
                let zero = tp.scale(f, 0.0).unwrap();
                let out = match (first, second) {
                    (true, true) => tp.add(f, g).unwrap(),
                    (true, false) => tp.add(f, zero).unwrap(),
                    _ => tp.add(g, zero).unwrap(),
                };
                let gr = tp.backward(out, Tensor::full(&[1], 1.0)).unwrap();
                let get = |id| gr.get(id).map_or(vec![0.0; 9], |t: &Tensor| t.data().to_vec());
                (get(a), get(b))
            };
            let (both_a, both_b) = grads(true, true);
            let (fa, fb) = grads(true, false);
            let (ga, gb) = grads(false, true);
            for i in 0..9 {
                prop_assert!((both_a[i] - (fa[i] + ga[i])).abs() <= 1e-12 * (1.0 + both_a[i].abs()));
                prop_assert!((both_b[i] - (fb[i] + gb[i])).abs() <= 1e-12 * (1.0 + both_b[i].abs()));
            }
        }
    }
}
