use super::kernels::{self, ConvGeom};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    SmoothLeaky(f64),
    Clamp(f64, f64),
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Relu => "relu",
            Unary::SmoothLeaky(_) => "smooth_leaky",
            Unary::Clamp(..) => "clamp",
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// `log(1 + e^z)` with linear and exponential tails outside `|z| > 30`.
#[inline]
pub(crate) fn softplus<T: Real>(z: T) -> T {
    let thirty = T::from_f64(30.0);
    if z > thirty {
        z
    } else if z < -thirty {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

impl Unary {
    fn apply_all<T: Real>(self, x: &[T]) -> Vec<T> {
        match self {
            Unary::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
            Unary::Exp => x.iter().map(|&v| v.exp()).collect(),
            _ => x.iter().map(|&v| self.apply(v)).collect(),
        }
    }

    /// `g · dy/dx` elementwise.
    fn backward_all<T: Real>(self, g: &[T], x: &[T], y: &[T]) -> Vec<T> {
        match self {
            Unary::Relu => g
                .iter()
                .zip(x)
                .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                .collect(),
            Unary::Exp => g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect(),
            _ => g
                .iter()
                .zip(x.iter().zip(y))
                .map(|(&gv, (&xv, &yv))| gv * self.derivative(xv, yv))
                .collect(),
        }
    }

    #[inline]
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Relu => x.max(T::zero()),
            Unary::SmoothLeaky(a) => {
                let a = T::from_f64(a);
                a * x + (T::one() - a) * x * sigmoid(x)
            }
            Unary::Clamp(lo, hi) => x.max(T::from_f64(lo)).min(T::from_f64(hi)),
        }
    }

    /// dy/dx given the input `x` and output `y`.
    #[inline]
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            Unary::Exp => y,
            Unary::Log => one / x,
            Unary::Tanh => one - y * y,
            Unary::Sigmoid => y * (one - y),
            Unary::Softplus => sigmoid(x),
            Unary::Relu => {
                if x > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            Unary::SmoothLeaky(a) => {
                let a = T::from_f64(a);
                let s = sigmoid(x);
                a + (one - a) * (s + x * s * (one - s))
            }
            Unary::Clamp(lo, hi) => {
                if x >= T::from_f64(lo) && x <= T::from_f64(hi) {
                    one
                } else {
                    T::zero()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Conv2d(NodeId, NodeId, ConvGeom),
    MaxPool2d(NodeId, Vec<u32>),
    MeanPoolSpatial(NodeId),
    Binary(Binary, NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Unary(Unary, NodeId),
    Softmax(NodeId),
    LogSumExp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumLast(NodeId),
    Slice(NodeId, usize, usize),
    Concat(Vec<NodeId>),
    Reshape(NodeId),
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Define-by-run record of primitive operations. Build a fresh tape for every
/// forward pass, then call [`Tape::backward`] on a scalar loss.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn checked<T: Real>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Records data that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    /// Records a leaf whose gradient is tracked (a parameter or a probe input).
    pub fn var(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                shapes: vec![sa.to_vec(), sb.to_vec()],
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = checked("matmul", Tensor::new(vec![m, n], out)?)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    /// 2-D cross-correlation of `x: (B, H, W, Cin)` (or `(H, W, Cin)`) with
    /// `w: (k, k, Cin, Cout)`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            shapes: vec![sx.clone(), sw.clone()],
        };
        let (batch, h, wd, cin) = match sx.len() {
            4 => (sx[0], sx[1], sx[2], sx[3]),
            3 => (1, sx[0], sx[1], sx[2]),
            _ => return Err(mismatch()),
        };
        if sw.len() != 4 || sw[0] != sw[1] {
            return Err(mismatch());
        }
        let (k, cout) = (sw[0], sw[3]);
        if sw[2] != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d: channel mismatch",
                shapes: vec![sx.clone(), sw.clone()],
            });
        }
        if k % 2 == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("kernel size must be odd, got {k}"),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be >= 1".into(),
            });
        }
        let (ho, wo, pad_top, pad_left) = match padding {
            Padding::Same => {
                let ho = h.div_ceil(stride);
                let wo = wd.div_ceil(stride);
                let ph = ((ho - 1) * stride + k).saturating_sub(h);
                let pw = ((wo - 1) * stride + k).saturating_sub(wd);
                (ho, wo, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if h < k || wd < k {
                    return Err(mismatch());
                }
                ((h - k) / stride + 1, (wd - k) / stride + 1, 0, 0)
            }
        };
        let geom = ConvGeom {
            batch,
            h,
            w: wd,
            cin,
            cout,
            k,
            stride,
            pad_top,
            pad_left,
            ho,
            wo,
        };
        let out = kernels::conv2d(self.value(x).data(), self.value(w).data(), &geom);
        let shape = if sx.len() == 4 {
            vec![batch, ho, wo, cout]
        } else {
            vec![ho, wo, cout]
        };
        let out = checked("conv2d", Tensor::new(shape, out)?)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Op::Conv2d(x, w, geom), out, rg))
    }

    /// Non-overlapping max pooling over `(B, H, W, C)`; odd trailing rows and
    /// columns are dropped.
    pub fn maxpool2d(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || size == 0 || s[1] < size || s[2] < size {
            return Err(TensorError::ShapeMismatch {
                op: "maxpool2d",
                shapes: vec![s],
            });
        }
        let (out, arg) = kernels::maxpool2d(self.value(x).data(), s[0], s[1], s[2], s[3], size);
        let out = Tensor::new(vec![s[0], s[1] / size, s[2] / size, s[3]], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::MaxPool2d(x, arg), out, rg))
    }

    /// Mean over the spatial axes: `(B, H, W, C) → (B, C)`.
    pub fn meanpool_spatial(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "meanpool_spatial",
                shapes: vec![s],
            });
        }
        let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c);
        let mut acc = vec![0f64; c];
        for bi in 0..b {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for p in 0..hw {
                let row = &xd[(bi * hw + p) * c..(bi * hw + p + 1) * c];
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v.as_f64();
                }
            }
            out.extend(acc.iter().map(|a| T::from_f64(a / hw as f64)));
        }
        let out = Tensor::new(vec![b, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::MeanPoolSpatial(x), out, rg))
    }

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcasts(sa, sb) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                shapes: vec![sa.to_vec(), sb.to_vec()],
            });
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[i % nb];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let out = checked(name, Tensor::new(av.shape().to_vec(), data)?)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Binary(kind, a, b), out, rg))
    }

    /// Elementwise `a + b`; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cc = T::from_f64(c);
        let out = checked("scale", self.value(a).map(|x| x * cc))?;
        let rg = self.rg(a);
        Ok(self.push(Op::Scale(a, c), out, rg))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cc = T::from_f64(c);
        let out = checked("add_scalar", self.value(a).map(|x| x + cc))?;
        let rg = self.rg(a);
        Ok(self.push(Op::AddScalar(a), out, rg))
    }

    fn unary(&mut self, u: Unary, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let data = u.apply_all(av.data());
        let out = checked(u.name(), Tensor::new(av.shape().to_vec(), data)?)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Unary(u, a), out, rg))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Log, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Softplus, a)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Relu, a)
    }

    /// `α·x + (1 − α)·x·σ(x)`.
    pub fn smooth_leaky(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        self.unary(Unary::SmoothLeaky(alpha), a)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(TensorError::InvalidArgument {
                op: "clamp",
                reason: format!("lo {lo} > hi {hi}"),
            });
        }
        self.unary(Unary::Clamp(lo, hi), a)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let n = last_dim(av.shape());
        let mut out = Vec::with_capacity(av.len());
        for row in av.data().chunks(n) {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let z: f64 = row.iter().map(|x| (x.as_f64() - m).exp()).sum();
            out.extend(row.iter().map(|x| T::from_f64((x.as_f64() - m).exp() / z)));
        }
        let out = checked("softmax", Tensor::new(av.shape().to_vec(), out)?)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Softmax(a), out, rg))
    }

    /// `log Σ exp` along the last axis, which is removed from the shape.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let n = last_dim(av.shape());
        let out: Vec<T> = av
            .data()
            .chunks(n)
            .map(|row| T::from_f64(lse_f64(row)))
            .collect();
        let shape = av.shape()[..av.ndim().saturating_sub(1)].to_vec();
        let out = checked("logsumexp", Tensor::new(shape, out)?)?;
        let rg = self.rg(a);
        Ok(self.push(Op::LogSumExp(a), out, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().map(|x| x.as_f64()).sum();
        let out = checked("sum", Tensor::scalar(T::from_f64(s)))?;
        let rg = self.rg(a);
        Ok(self.push(Op::Sum(a), out, rg))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s: f64 = v.data().iter().map(|x| x.as_f64()).sum();
        let out = checked("mean", Tensor::scalar(T::from_f64(s / v.len() as f64)))?;
        let rg = self.rg(a);
        Ok(self.push(Op::Mean(a), out, rg))
    }

    /// Sum along the last axis, which is removed from the shape.
    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let n = last_dim(av.shape());
        let out: Vec<T> = av
            .data()
            .chunks(n)
            .map(|row| T::from_f64(row.iter().map(|x| x.as_f64()).sum()))
            .collect();
        let shape = av.shape()[..av.ndim().saturating_sub(1)].to_vec();
        let out = checked("sum_last", Tensor::new(shape, out)?)?;
        let rg = self.rg(a);
        Ok(self.push(Op::SumLast(a), out, rg))
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let av = self.value(a);
        let n = last_dim(av.shape());
        if av.ndim() == 0 || start >= end || end > n {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                reason: format!("range {start}..{end} out of bounds for shape {:?}", av.shape()),
            });
        }
        let mut out = Vec::with_capacity(av.len() / n * (end - start));
        for row in av.data().chunks(n) {
            out.extend_from_slice(&row[start..end]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Slice(a, start, end), out, rg))
    }

    /// Concatenation along the last axis; leading shapes must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: "no inputs".into(),
            });
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    shapes: parts.iter().map(|&p| self.shape(p).to_vec()).collect(),
                });
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| last_dim(self.shape(p))).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::Concat(parts.to_vec()), out, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), out, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        if !lv.is_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = kernels::matmul_backward(
                    self.value(*a).data(),
                    self.value(*b).data(),
                    gd,
                    m,
                    k,
                    n,
                    self.rg(*a),
                    self.rg(*b),
                );
                if let Some(da) = da {
                    self.accumulate(grads, *a, Tensor::new(sa.to_vec(), da)?);
                }
                if let Some(db) = db {
                    self.accumulate(grads, *b, Tensor::new(sb.to_vec(), db)?);
                }
            }
            Op::Conv2d(x, w, geom) => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    geom,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw)?);
                }
            }
            Op::MaxPool2d(x, arg) => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (&i, &gv) in arg.iter().zip(gd) {
                    d[i as usize] = d[i as usize] + gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanPoolSpatial(x) => {
                let s = self.shape(*x);
                let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
                let inv = T::from_f64(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(b * hw * c);
                for bi in 0..b {
                    let row = &gd[bi * c..(bi + 1) * c];
                    for _ in 0..hw {
                        dx.extend(row.iter().map(|&v| v * inv));
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s.to_vec(), dx)?);
            }
            Op::Binary(kind, a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                if self.rg(*a) {
                    let da: Vec<T> = match kind {
                        Binary::Add | Binary::Sub => gd.to_vec(),
                        Binary::Mul => gd.iter().enumerate().map(|(i, &g)| g * bv[i % nb]).collect(),
                    };
                    self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), da)?);
                }
                if self.rg(*b) {
                    let mut acc = vec![0f64; nb];
                    for (i, &g) in gd.iter().enumerate() {
                        let v = match kind {
                            Binary::Add => g,
                            Binary::Sub => -g,
                            Binary::Mul => g * av[i],
                        };
                        acc[i % nb] += v.as_f64();
                    }
                    let db = acc.into_iter().map(T::from_f64).collect();
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?);
                }
            }
            Op::Scale(a, c) => {
                let cc = T::from_f64(*c);
                self.accumulate(grads, *a, g.map(|v| v * cc));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Unary(u, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let dx = u.backward_all(gd, x, y);
                self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), dx)?);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = last_dim(node.value.shape());
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(gd.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    let dot = T::from_f64(dot);
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), dx)?);
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a).data();
                let n = last_dim(self.shape(*a));
                let mut dx = Vec::with_capacity(x.len());
                for (row, (&gv, &l)) in x.chunks(n).zip(gd.iter().zip(node.value.data())) {
                    let l = l.as_f64();
                    dx.extend(row.iter().map(|v| gv * T::from_f64((v.as_f64() - l).exp())));
                }
                self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), dx)?);
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gd[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let v = T::from_f64(gd[0].as_f64() / n);
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), v));
            }
            Op::SumLast(a) => {
                let n = last_dim(self.shape(*a));
                let dx: Vec<T> = gd.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), dx)?);
            }
            Op::Slice(a, start, end) => {
                let n = last_dim(self.shape(*a));
                let w = end - start;
                let mut dx = Tensor::zeros(self.shape(*a));
                for (r, grow) in gd.chunks(w).enumerate() {
                    dx.data_mut()[r * n + start..r * n + end].copy_from_slice(grow);
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Concat(parts) => {
                let total = last_dim(node.value.shape());
                let mut offset = 0;
                for &p in parts {
                    let w = last_dim(self.shape(p));
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(self.value(p).len());
                        for grow in gd.chunks(total) {
                            dp.extend_from_slice(&grow[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), dp)?);
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.clone().reshape(self.shape(*a))?);
            }
        }
        Ok(())
    }
}

fn broadcasts(a: &[usize], b: &[usize]) -> bool {
    a == b || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
}

pub(crate) fn lse_f64<T: Real>(row: &[T]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|x| (x.as_f64() - m).exp()).sum::<f64>().ln()
}

/// Gradients from one reverse pass, indexed by [`NodeId`].
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of `id`, or zeros when it did not influence the loss.
    pub fn wrt(&self, id: NodeId) -> Tensor<T> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn collect(&self, ids: &[NodeId]) -> Vec<Tensor<T>> {
        ids.iter().map(|&id| self.wrt(id)).collect()
    }
}
