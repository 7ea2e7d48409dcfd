use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::autodiff::kernels::{self, ConvDims, SampleDims};
use crate::autodiff::tensor::numel;
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: one entry per input, `None` where `needs` is false.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, T),
    Sin(Var),
    Cos(Var),
    Scale(Var, T),
    Offset(Var),
    BroadcastTo(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    MaxPool(Var, Vec<u32>),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Softmax(Var),
    LogSoftmax(Var),
    Clamp(Var, T, T),
    Concat(Vec<Var>, usize),
    GridSample { image: Var, grid: Var, dims: SampleDims },
    L2Normalize(Var),
    Gather(Var, Vec<usize>),
    StraightThrough(Var),
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

/// Names of the built-in primitives, as used by gradient-check reports and
/// fault injection.
pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "pow",
    "sin",
    "cos",
    "scale",
    "offset",
    "broadcast_to",
    "reshape",
    "matmul",
    "transpose",
    "conv2d",
    "maxpool2",
    "relu",
    "sum",
    "mean",
    "sum_axis",
    "mean_axis",
    "softmax",
    "log_softmax",
    "clamp",
    "concat",
    "grid_sample",
    "l2_normalize",
    "gather",
    "straight_through",
];

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Pow(..) => "pow",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Reshape(..) => "reshape",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool(..) => "maxpool2",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Clamp(..) => "clamp",
            Op::Concat(..) => "concat",
            Op::GridSample { .. } => "grid_sample",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Gather(..) => "gather",
            Op::StraightThrough(..) => "straight_through",
            Op::Custom(_, op) => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Pow(a, _)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::BroadcastTo(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::MaxPool(a, _)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Clamp(a, _, _)
            | Op::L2Normalize(a)
            | Op::Gather(a, _)
            | Op::StraightThrough(a) => vec![*a],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Concat(vs, _) | Op::Custom(vs, _) => vs.clone(),
            Op::GridSample { image, grid, .. } => vec![*image, *grid],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

struct Inner<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Dynamic reverse-mode tape. Rebuilt per forward pass, consumed by one
/// call to [`Graph::backward`].
pub struct Graph<T: Real> {
    inner: RefCell<Inner<T>>,
    fault: Option<&'static str>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the requires-grad leaves that fed a loss.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf; zero if the leaf did not reach the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().unwrap_or(&1);
    let rows = if n == 0 { 0 } else { numel(shape) / n };
    (rows, n)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { inner: RefCell::new(Inner { nodes: Vec::new(), consumed: false }), fault: None }
    }

    /// A graph whose backward pass negates the gradients produced by the named
    /// primitive. Used to check that gradient suites catch broken rules.
    pub fn with_fault(primitive: &'static str) -> Self {
        Graph { fault: Some(primitive), ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.inner.borrow(), |i| &i.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].requires_grad
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = op.inputs().iter().any(|i| inner.nodes[i.0].requires_grad);
        inner.nodes.push(Node { value, op, requires_grad });
        Var(inner.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(inner.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(inner.nodes.len() - 1)
    }

    pub fn scalar(&self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = {
            let x = self.value(a);
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        };
        self.push(out, op)
    }

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            same_shape(name, x.shape(), y.shape())?;
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect())
        };
        Ok(self.push(out, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&q| q == T::zero()) {
            return Err(Error::domain("div", "zero divisor"));
        }
        self.binary("div", a, b, |p, q| p / q, Op::Div(a, b))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |v| -v, Op::Neg(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |v| v.exp(), Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= T::zero()) {
            return Err(Error::domain("log", format!("non-positive operand {bad}")));
        }
        Ok(self.unary(a, |v| v.ln(), Op::Log(a)))
    }

    /// Elementwise power with a constant exponent.
    pub fn pow(&self, a: Var, exponent: T) -> Result<Var> {
        let integral = exponent.fract() == T::zero();
        if let Some(bad) = self
            .value(a)
            .data()
            .iter()
            .find(|&&v| (v < T::zero() && !integral) || (v == T::zero() && exponent < T::one()))
        {
            return Err(Error::domain("pow", format!("operand {bad} with exponent {exponent}")));
        }
        Ok(self.unary(a, |v| v.powf(exponent), Op::Pow(a, exponent)))
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, |v| v.sin(), Op::Sin(a))
    }

    pub fn cos(&self, a: Var) -> Var {
        self.unary(a, |v| v.cos(), Op::Cos(a))
    }

    /// Multiply by a constant scalar.
    pub fn scale(&self, a: Var, c: T) -> Var {
        self.unary(a, |v| v * c, Op::Scale(a, c))
    }

    /// Add a constant scalar.
    pub fn offset(&self, a: Var, c: T) -> Var {
        self.unary(a, |v| v + c, Op::Offset(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |v| v.max(T::zero()), Op::Relu(a))
    }

    /// Clamp into `[lo, hi]`; the gradient passes inside the interval and is zero outside.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, |v| v.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// Broadcast to `shape` (right-aligned; size-1 and missing axes repeat).
    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = {
            let x = self.value(a);
            let s = x.shape();
            let ok = s.len() <= shape.len()
                && s.iter().rev().zip(shape.iter().rev()).all(|(&i, &o)| i == o || i == 1);
            if !ok {
                return Err(Error::shape("broadcast_to", format!("{s:?} -> {shape:?}")));
            }
            let idx = kernels::broadcast_index(s, shape);
            Tensor::from_parts(shape.to_vec(), idx.iter().map(|&i| x.data()[i]).collect())
        };
        Ok(self.push(out, Op::BroadcastTo(a)))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            let (xs, ys) = (x.shape(), y.shape());
            if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[0] {
                return Err(Error::shape("matmul", format!("{xs:?} x {ys:?}")));
            }
            let (m, k, n) = (xs[0], xs[1], ys[1]);
            let mut c = vec![T::zero(); m * n];
            T::gemm(m, k, n, T::one(), x.data(), (k, 1), y.data(), (n, 1), T::zero(), &mut c, (n, 1));
            Tensor::from_parts(vec![m, n], c)
        };
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = {
            let x = self.value(a);
            if x.rank() != 2 {
                return Err(Error::shape("transpose", format!("rank-2 operand expected, got {:?}", x.shape())));
            }
            transpose2(x.data(), x.shape()[0], x.shape()[1])
        };
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// Valid-padding, stride-1 convolution of `x: [B, C, H, W]` with
    /// `w: [O, C, k, k]` and optional bias `[O]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (out, dims) = {
            let (xv, wv) = (self.value(x), self.value(w));
            let (xs, ws) = (xv.shape(), wv.shape());
            if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || ws[2] > xs[2] || ws[3] > xs[3] {
                return Err(Error::shape("conv2d", format!("input {xs:?} kernel {ws:?}")));
            }
            let dims =
                ConvDims { batch: xs[0], in_ch: xs[1], height: xs[2], width: xs[3], out_ch: ws[0], kernel: ws[2] };
            let bv = b.map(|b| self.value(b));
            if let Some(bv) = &bv {
                if bv.shape() != [ws[0]] {
                    return Err(Error::shape("conv2d", format!("bias {:?} for {} filters", bv.shape(), ws[0])));
                }
            }
            let data = kernels::conv2d_forward(xv.data(), wv.data(), bv.as_ref().map(|b| b.data()), dims);
            (Tensor::from_parts(vec![dims.batch, dims.out_ch, dims.out_h(), dims.out_w()], data), dims)
        };
        Ok(self.push(out, Op::Conv2d { x, w, b, dims }))
    }

    /// 2x2 max pooling, stride 2, over the last two axes.
    pub fn maxpool2(&self, a: Var) -> Result<Var> {
        let (out, arg) = {
            let x = self.value(a);
            let s = x.shape();
            if s.len() < 2 || s[s.len() - 1] < 2 || s[s.len() - 2] < 2 {
                return Err(Error::shape("maxpool2", format!("{s:?}")));
            }
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let planes = numel(&s[..s.len() - 2]);
            let (vals, arg) = kernels::maxpool2_forward(x.data(), planes, h, w);
            let mut shape = s.to_vec();
            let r = shape.len();
            shape[r - 2] = h / 2;
            shape[r - 1] = w / 2;
            (Tensor::from_parts(shape, vals), arg)
        };
        Ok(self.push(out, Op::MaxPool(a, arg)))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let s = {
            let x = self.value(a);
            x.data().iter().copied().sum::<T>() / T::lit(x.numel().max(1) as f64)
        };
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    fn reduce_axis(&self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let out = {
            let x = self.value(a);
            if axis >= x.rank() {
                return Err(Error::shape(if mean { "mean_axis" } else { "sum_axis" }, format!("axis {axis} of {:?}", x.shape())));
            }
            let (outer, len, inner) = kernels::axis_split(x.shape(), axis);
            let norm = if mean { T::lit(len.max(1) as f64) } else { T::one() };
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &x.data()[(o * len + l) * inner..][..inner];
                    for (d, &s) in data[o * inner..][..inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            data.iter_mut().for_each(|d| *d /= norm);
            let mut shape = x.shape().to_vec();
            shape[axis] = 1;
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(out, if mean { Op::MeanAxis(a, axis) } else { Op::SumAxis(a, axis) }))
    }

    /// Sum over one axis, keeping it with extent 1.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over one axis, keeping it with extent 1.
    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    pub fn softmax(&self, a: Var) -> Var {
        let out = {
            let x = self.value(a);
            let (rows, n) = last_axis(x.shape());
            let mut data = x.data().to_vec();
            for r in 0..rows {
                softmax_row(&mut data[r * n..(r + 1) * n]);
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax(&self, a: Var) -> Var {
        let out = {
            let x = self.value(a);
            let (rows, n) = last_axis(x.shape());
            let mut data = x.data().to_vec();
            for r in 0..rows {
                let row = &mut data[r * n..(r + 1) * n];
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        self.push(out, Op::LogSoftmax(a))
    }

    /// Rows divided by their L2 norm (norm floored at 1e-12).
    pub fn l2_normalize(&self, a: Var) -> Var {
        let out = {
            let x = self.value(a);
            let (rows, n) = last_axis(x.shape());
            let mut data = x.data().to_vec();
            for r in 0..rows {
                let row = &mut data[r * n..(r + 1) * n];
                let norm = row_norm(row);
                row.iter_mut().for_each(|v| *v /= norm);
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        self.push(out, Op::L2Normalize(a))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let first = vals.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
            let base = first.shape().to_vec();
            if axis >= base.len() {
                return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
            }
            let mut total = 0;
            for v in &vals {
                let s = v.shape();
                if s.len() != base.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i]) {
                    return Err(Error::shape("concat", format!("{base:?} vs {s:?} along axis {axis}")));
                }
                total += s[axis];
            }
            let (outer, _, inner) = kernels::axis_split(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    /// Bilinear sampling of `image: [B, C, H, W]` at `grid: [B, Ho, Wo, 2]`
    /// holding (x, y) in normalized coordinates, zeros outside the image.
    pub fn grid_sample(&self, image: Var, grid: Var) -> Result<Var> {
        let (out, dims) = {
            let (iv, gv) = (self.value(image), self.value(grid));
            let (is, gs) = (iv.shape(), gv.shape());
            if is.len() != 4 || gs.len() != 4 || gs[3] != 2 || gs[0] != is[0] {
                return Err(Error::shape("grid_sample", format!("image {is:?} grid {gs:?}")));
            }
            let dims =
                SampleDims { batch: is[0], channels: is[1], height: is[2], width: is[3], out_h: gs[1], out_w: gs[2] };
            let data = kernels::grid_sample_forward(iv.data(), gv.data(), dims);
            (Tensor::from_parts(vec![is[0], is[1], gs[1], gs[2]], data), dims)
        };
        Ok(self.push(out, Op::GridSample { image, grid, dims }))
    }

    /// `out[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let out = {
            let x = self.value(a);
            if numel(shape) != index.len() {
                return Err(Error::shape("gather", format!("{} indices for shape {shape:?}", index.len())));
            }
            if let Some(&bad) = index.iter().find(|&&i| i >= x.numel()) {
                return Err(Error::shape("gather", format!("index {bad} out of {} elements", x.numel())));
            }
            Tensor::from_parts(shape.to_vec(), index.iter().map(|&i| x.data()[i]).collect())
        };
        Ok(self.push(out, Op::Gather(a, index)))
    }

    /// Forward value `output`, backward identity.
    pub fn straight_through(&self, a: Var, output: Tensor<T>) -> Result<Var> {
        same_shape("straight_through", self.value(a).shape(), output.shape())?;
        Ok(self.push(output, Op::StraightThrough(a)))
    }

    pub fn custom(&self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(output, Op::Custom(inputs.to_vec(), op))
    }

    /// Reverse sweep from a one-element loss. A graph supports one sweep.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_shape = inner.nodes[loss.0].value.shape().to_vec();
        if numel(&loss_shape) != 1 {
            return Err(Error::NonScalar(loss_shape));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut pending: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut grads = HashMap::new();
        // every requires-grad leaf gets an entry, zero if unreachable
        for (i, n) in nodes.iter().enumerate() {
            if n.requires_grad && matches!(n.op, Op::Leaf) {
                grads.insert(Var(i), Tensor::zeros(n.value.shape()));
            }
        }
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        pending[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = pending[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads.insert(Var(id), Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            let inputs = node.op.inputs();
            let needs: Vec<bool> = inputs.iter().map(|v| nodes[v.0].requires_grad).collect();
            let mut contribs = vjp(nodes, node, &g, &needs);
            if self.fault == Some(node.op.name()) {
                for c in contribs.iter_mut().flatten() {
                    c.iter_mut().for_each(|v| *v = -*v);
                }
            }
            for ((inp, need), c) in inputs.iter().zip(&needs).zip(contribs) {
                let (true, Some(c)) = (*need, c) else { continue };
                match &mut pending[inp.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn transpose2<T: Real>(data: &[T], rows: usize, cols: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    Tensor::from_parts(vec![cols, rows], out)
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    row.iter_mut().for_each(|v| *v = (*v - m).exp());
    let s: T = row.iter().copied().sum();
    row.iter_mut().for_each(|v| *v /= s);
}

fn row_norm<T: Real>(row: &[T]) -> T {
    row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::lit(1e-12))
}

fn map2<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Contribution of one node's output gradient `g` to each of its inputs.
fn vjp<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
    let val = |v: &Var| &nodes[v.0].value;
    let y = &node.value;
    let one = |f: &dyn Fn() -> Vec<T>| vec![needs[0].then(f)];
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(..) => vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())],
        Op::Sub(..) => vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.iter().map(|&v| -v).collect())],
        Op::Mul(a, b) => vec![
            needs[0].then(|| map2(g, val(b).data(), |g, q| g * q)),
            needs[1].then(|| map2(g, val(a).data(), |g, p| g * p)),
        ],
        Op::Div(a, b) => {
            let (p, q) = (val(a).data(), val(b).data());
            vec![
                needs[0].then(|| map2(g, q, |g, q| g / q)),
                needs[1].then(|| g.iter().zip(p).zip(q).map(|((&g, &p), &q)| -g * p / (q * q)).collect()),
            ]
        }
        Op::Neg(_) => one(&|| g.iter().map(|&v| -v).collect()),
        Op::Exp(_) => one(&|| map2(g, y.data(), |g, y| g * y)),
        Op::Log(a) => one(&|| map2(g, val(a).data(), |g, x| g / x)),
        Op::Pow(a, p) => one(&|| map2(g, val(a).data(), |g, x| g * *p * x.powf(*p - T::one()))),
        Op::Sin(a) => one(&|| map2(g, val(a).data(), |g, x| g * x.cos())),
        Op::Cos(a) => one(&|| map2(g, val(a).data(), |g, x| -g * x.sin())),
        Op::Scale(_, c) => one(&|| g.iter().map(|&v| v * *c).collect()),
        Op::Offset(_) | Op::Reshape(_) | Op::StraightThrough(_) => one(&|| g.to_vec()),
        Op::BroadcastTo(a) => one(&|| {
            let src = val(a);
            let mut out = vec![T::zero(); src.numel()];
            for (o, i) in kernels::broadcast_index(src.shape(), y.shape()).into_iter().enumerate() {
                out[i] += g[o];
            }
            out
        }),
        Op::MatMul(a, b) => {
            let (x, w) = (val(a), val(b));
            let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
            vec![
                needs[0].then(|| {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g, (n, 1), w.data(), (1, n), T::zero(), &mut da, (k, 1));
                    da
                }),
                needs[1].then(|| {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), x.data(), (1, k), g, (n, 1), T::zero(), &mut db, (n, 1));
                    db
                }),
            ]
        }
        Op::Transpose(_) => one(&|| transpose2(g, y.shape()[0], y.shape()[1]).into_data()),
        Op::Conv2d { x, w, b, dims } => {
            let need_b = b.is_some() && needs[2];
            let cg = kernels::conv2d_backward(val(x).data(), val(w).data(), g, *dims, (needs[0], needs[1], need_b));
            let mut v = vec![cg.dx, cg.dw];
            if b.is_some() {
                v.push(cg.db);
            }
            v
        }
        Op::MaxPool(a, arg) => one(&|| {
            let mut out = vec![T::zero(); val(a).numel()];
            for (&i, &gv) in arg.iter().zip(g) {
                out[i as usize] += gv;
            }
            out
        }),
        Op::Relu(a) => one(&|| map2(g, val(a).data(), |g, x| if x > T::zero() { g } else { T::zero() })),
        Op::Sum(a) => one(&|| vec![g[0]; val(a).numel()]),
        Op::Mean(a) => one(&|| {
            let n = val(a).numel();
            vec![g[0] / T::lit(n.max(1) as f64); n]
        }),
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => one(&|| {
            let src = val(a);
            let (outer, len, inner) = kernels::axis_split(src.shape(), *axis);
            let scale = if matches!(node.op, Op::MeanAxis(..)) { T::one() / T::lit(len.max(1) as f64) } else { T::one() };
            let mut out = vec![T::zero(); src.numel()];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            out
        }),
        Op::Softmax(_) => one(&|| {
            let (rows, n) = last_axis(y.shape());
            let mut out = vec![T::zero(); y.numel()];
            for r in 0..rows {
                let (yr, gr) = (&y.data()[r * n..][..n], &g[r * n..][..n]);
                let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for j in 0..n {
                    out[r * n + j] = yr[j] * (gr[j] - dot);
                }
            }
            out
        }),
        Op::LogSoftmax(_) => one(&|| {
            let (rows, n) = last_axis(y.shape());
            let mut out = vec![T::zero(); y.numel()];
            for r in 0..rows {
                let (yr, gr) = (&y.data()[r * n..][..n], &g[r * n..][..n]);
                let gs: T = gr.iter().copied().sum();
                for j in 0..n {
                    out[r * n + j] = gr[j] - yr[j].exp() * gs;
                }
            }
            out
        }),
        Op::Clamp(a, lo, hi) => {
            one(&|| map2(g, val(a).data(), |g, x| if x >= *lo && x <= *hi { g } else { T::zero() }))
        }
        Op::Concat(parts, axis) => {
            let (outer, _, inner) = kernels::axis_split(y.shape(), *axis);
            let total = y.shape()[*axis] * inner;
            let mut start = 0;
            parts
                .iter()
                .zip(needs)
                .map(|(p, &need)| {
                    let chunk = val(p).shape()[*axis] * inner;
                    let s = start;
                    start += chunk;
                    need.then(|| {
                        let mut out = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            out.extend_from_slice(&g[o * total + s..][..chunk]);
                        }
                        out
                    })
                })
                .collect()
        }
        Op::GridSample { image, grid, dims } => {
            let (di, dg) = kernels::grid_sample_backward(val(image).data(), val(grid).data(), g, *dims, needs[0], needs[1]);
            vec![di, dg]
        }
        Op::L2Normalize(a) => one(&|| {
            let x = val(a);
            let (rows, n) = last_axis(y.shape());
            let mut out = vec![T::zero(); y.numel()];
            for r in 0..rows {
                let norm = row_norm(&x.data()[r * n..][..n]);
                let (yr, gr) = (&y.data()[r * n..][..n], &g[r * n..][..n]);
                let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for j in 0..n {
                    out[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                }
            }
            out
        }),
        Op::Gather(a, index) => one(&|| {
            let mut out = vec![T::zero(); val(a).numel()];
            for (&i, &gv) in index.iter().zip(g) {
                out[i] += gv;
            }
            out
        }),
        Op::Custom(inputs, op) => {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(val).collect();
            op.backward(&vals, y, g, needs)
        }
    }
}
