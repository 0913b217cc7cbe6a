//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only arena. Every operation evaluates eagerly,
//! stores its output value and the recipe for its backward rule, and
//! returns a [`Var`] handle. Because nodes can only reference earlier
//! nodes, insertion order is already a topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Nodes that do not depend on any gradient-requiring leaf are never
//! visited during the sweep, and [`Tape::stop_gradient`] cuts a path
//! explicitly while leaving the forward value untouched.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    StopGrad,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    DivSafe(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumAxis(Var, usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Var, Var, usize),
    Softmax(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool(Var, usize),
    Upsample(Var),
    MulChannel(Var, Var),
    L2Normalize(Var, f64),
    BatchStandardize(Var, f64),
    NodeMean(Var),
    AdjMatmul(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Per-column mean and `1 / sqrt(var + eps)` of a row-major B×D matrix.
fn column_stats(x: &[f64], b: usize, d: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let mut var = vec![0.0; d];
    for row in x.chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv = var.iter().map(|s| 1.0 / (s / b as f64 + eps).sqrt()).collect();
    (mean, inv)
}

/// Recorded computation; see the module docs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient buffers produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; zeros when `var` does
    /// not lie on any path to the root.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Like [`Gradients::wrt`] but without the zero fill.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `data` (laid out as `shape`) into the axis order `perm`.
fn permute_data(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        if cfg!(debug_assertions) && !value.is_finite() {
            panic!("non-finite value produced by {op:?}");
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn tensor(&self, shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).expect("kernel output shape")
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Passes the value through unchanged but blocks gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, false, Op::StopGrad)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = self.tensor(va.shape(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise `a / b`, defined as 0 wherever `b == 0` (including 0/0).
    pub fn div_safe(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            "div_safe",
            |x, y| if y == 0.0 { 0.0 } else { x / y },
            Op::DivSafe(a, b),
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, rg, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Natural log; the input must be positive.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(invalid(format!("sum_axis: axis {axis} for shape {:?}", vx.shape())));
        }
        let (outer, len, inner) = outer_inner(vx.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let src = &vx.data()[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let value = self.tensor(&shape, out);
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::SumAxis(x, axis)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .value(x)
            .shape()
            .get(axis)
            .ok_or_else(|| invalid(format!("mean_axis: axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, 0.0);
        let value = self.tensor(&[m, n], out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// Adds `bias` (length n) along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = *vx.shape().last().unwrap_or(&1);
        if vb.rank() != 1 || vb.shape()[0] != n || vx.rank() == 0 {
            return Err(shape_err("add_bias", vx.shape(), vb.shape()));
        }
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(vb.data()).for_each(|(v, b)| *v += b);
        }
        let value = self.tensor(vx.shape(), out);
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, rg, Op::AddBias(x, bias)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..vx.rank()).collect::<Vec<_>>() {
            return Err(invalid(format!("permute: {perm:?} for shape {:?}", vx.shape())));
        }
        let (shape, data) = permute_data(vx.shape(), vx.data(), perm);
        let value = self.tensor(&shape, data);
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Permute(x, perm.to_vec())))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let compatible = va.rank() == vb.rank()
            && axis < va.rank()
            && va
                .shape()
                .iter()
                .zip(vb.shape())
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(shape_err("concat", va.shape(), vb.shape()));
        }
        let (outer, la, inner) = outer_inner(va.shape(), axis);
        let lb = vb.shape()[axis];
        let mut out = Vec::with_capacity(va.numel() + vb.numel());
        for o in 0..outer {
            out.extend_from_slice(&va.data()[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&vb.data()[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = la + lb;
        let value = self.tensor(&shape, out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Concat(a, b, axis)))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(invalid(format!("softmax: axis {axis} for shape {:?}", vx.shape())));
        }
        let (outer, len, inner) = outer_inner(vx.shape(), axis);
        let src = vx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = self.tensor(vx.shape(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Softmax(x, axis)))
    }

    /// 2-D cross-correlation (no kernel flip) of `x` (B×Cin×H×W) with
    /// `w` (Cout×Cin×kh×kw), zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 4 || vw.rank() != 4 || vx.shape()[1] != vw.shape()[1] {
            return Err(shape_err("conv2d", vx.shape(), vw.shape()));
        }
        let [batch, cin, h, wd] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let [cout, _, kh, kw] = [vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]];
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [cout] {
                return Err(shape_err("conv2d bias", vb.shape(), &[cout]));
            }
        }
        let (ho, wo) = match (
            kernels::conv_out_size(h, kh, stride, pad),
            kernels::conv_out_size(wd, kw, stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(invalid(format!(
                    "conv2d: zero-size output for input {:?}, kernel {kh}x{kw}, stride {stride}, pad {pad}",
                    vx.shape()
                )))
            }
        };
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(&geom, vx.data(), vw.data(), bias);
        let value = self.tensor(&[batch, cout, ho, wo], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(value, rg, Op::Conv2d { x, w, b, geom }))
    }

    /// k×k mean pooling with stride k over the last two axes of a 4-D
    /// tensor; a remainder that does not fill a window is dropped.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 4 || k == 0 || vx.shape()[2] < k || vx.shape()[3] < k {
            return Err(invalid(format!("avg_pool2d: k={k} for shape {:?}", vx.shape())));
        }
        let s = vx.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let out = kernels::avg_pool_forward(planes, h, w, k, vx.data());
        let value = self.tensor(&[s[0], s[1], h / k, w / k], out);
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::AvgPool(x, k)))
    }

    /// Halves height and width by 2×2 means.
    pub fn downsample_avg2(&mut self, x: Var) -> Result<Var> {
        self.avg_pool2d(x, 2)
    }

    /// Bilinear resize of the last two axes (align-corners=false; see
    /// [`super::bilinear_axis_weights`]).
    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 4 {
            return Err(invalid(format!("upsample_bilinear: shape {:?}", vx.shape())));
        }
        if oh < 1 || ow < 1 {
            return Err(invalid(format!("upsample_bilinear: target size {oh}x{ow}")));
        }
        let s = vx.shape();
        let out = kernels::bilinear_forward(s[0] * s[1], s[2], s[3], oh, ow, vx.data());
        let value = self.tensor(&[s[0], s[1], oh, ow], out);
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Upsample(x)))
    }

    /// Multiplies channel `c` of a B×C×H×W tensor by `scale[c]`.
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(scale));
        if vx.rank() != 4 || vs.shape() != [vx.shape()[1]] {
            return Err(shape_err("mul_channel", vx.shape(), vs.shape()));
        }
        let plane = vx.shape()[2] * vx.shape()[3];
        let c = vx.shape()[1];
        let mut out = vx.data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let s = vs.data()[i % c];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let value = self.tensor(vx.shape(), out);
        let rg = self.rg(&[x, scale]);
        Ok(self.push(value, rg, Op::MulChannel(x, scale)))
    }

    /// `x / ‖x‖₂` along the last axis; an all-zero row is divided by `eps` instead.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx
            .shape()
            .last()
            .ok_or_else(|| invalid("l2_normalize on a scalar"))?;
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                log::debug!("l2_normalize: zero-norm row, guarded by eps={eps}");
            }
            let s = if norm == 0.0 { eps } else { norm };
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = self.tensor(vx.shape(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::L2Normalize(x, eps)))
    }

    /// Standardizes each column of a B×D matrix over the batch:
    /// `(x − mean) / sqrt(var + eps)` with the biased variance.
    pub fn batch_standardize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(invalid(format!("batch_standardize: shape {:?}", vx.shape())));
        }
        let (b, d) = (vx.shape()[0], vx.shape()[1]);
        let (mean, inv) = column_stats(vx.data(), b, d, eps);
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&inv) {
                *v = (*v - m) * s;
            }
        }
        let value = self.tensor(vx.shape(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::BatchStandardize(x, eps)))
    }

    /// For x of shape B×N×F, replaces every node row by the mean over the
    /// N nodes of its batch element. Equals multiplying each block by J/N.
    pub fn node_mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 3 {
            return Err(invalid(format!("node_mean: shape {:?}", vx.shape())));
        }
        let [b, n, f] = [vx.shape()[0], vx.shape()[1], vx.shape()[2]];
        let mut out = vec![0.0; vx.numel()];
        for bi in 0..b {
            let block = &vx.data()[bi * n * f..(bi + 1) * n * f];
            let mut mean = vec![0.0; f];
            for row in block.chunks(f) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for row in out[bi * n * f..(bi + 1) * n * f].chunks_mut(f) {
                row.copy_from_slice(&mean);
            }
        }
        let value = self.tensor(vx.shape(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::NodeMean(x)))
    }

    /// Applies an N×N matrix to every N×F block of a B×N×F tensor.
    pub fn adj_matmul(&mut self, adj: Var, x: Var) -> Result<Var> {
        let (va, vx) = (self.value(adj), self.value(x));
        if va.rank() != 2 || vx.rank() != 3 || va.shape()[0] != va.shape()[1] || va.shape()[1] != vx.shape()[1] {
            return Err(shape_err("adj_matmul", va.shape(), vx.shape()));
        }
        let [b, n, f] = [vx.shape()[0], vx.shape()[1], vx.shape()[2]];
        let mut out = vec![0.0; vx.numel()];
        for bi in 0..b {
            let r = bi * n * f..(bi + 1) * n * f;
            kernels::gemm(n, n, f, va.data(), false, &vx.data()[r.clone()], false, &mut out[r], 0.0);
        }
        let value = self.tensor(vx.shape(), out);
        let rg = self.rg(&[adj, x]);
        Ok(self.push(value, rg, Op::AdjMatmul(adj, x)))
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(invalid(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot => *slot = Some(contrib),
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    acc(*a, g.iter().zip(vb).map(|(g, b)| g * b).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(va).map(|(g, a)| g * a).collect());
                }
            }
            Op::DivSafe(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    acc(
                        *a,
                        g.iter()
                            .zip(vb)
                            .map(|(g, &b)| if b == 0.0 { 0.0 } else { g / b })
                            .collect(),
                    );
                }
                if wants(*b) {
                    acc(
                        *b,
                        g.iter()
                            .zip(va.iter().zip(vb))
                            .map(|(g, (&a, &b))| if b == 0.0 { 0.0 } else { -g * a / (b * b) })
                            .collect(),
                    );
                }
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Relu(x) => acc(
                *x,
                g.iter().zip(val(*x)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
            ),
            Op::Sigmoid(x) => acc(*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Log(x) => acc(*x, g.iter().zip(val(*x)).map(|(g, x)| g / x).collect()),
            Op::Abs(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect(),
            ),
            Op::Clamp(x, lo, hi) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::SumAxis(x, axis) => {
                let (outer, len, inner) = outer_inner(shape(*x), *axis);
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..len {
                        dx[(o * len + i) * inner..(o * len + i + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*x, dx);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (shape(*a), shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, val(*b), true, &mut da, 0.0);
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a), true, g, false, &mut db, 0.0);
                    acc(*b, db);
                }
            }
            Op::AddBias(x, b) => {
                let n = shape(*b)[0];
                if wants(*b) {
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(*b, db);
                }
                acc(*x, g.to_vec());
            }
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, dx) = permute_data(node.value.shape(), g, &inverse);
                acc(*x, dx);
            }
            Op::Concat(a, b, axis) => {
                let (outer, la, inner) = outer_inner(shape(*a), *axis);
                let lb = shape(*b)[*axis];
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for o in 0..outer {
                    let base = o * (la + lb) * inner;
                    da.extend_from_slice(&g[base..base + la * inner]);
                    db.extend_from_slice(&g[base + la * inner..base + (la + lb) * inner]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = outer_inner(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Conv2d { x, w, b, geom } => {
                let need = (wants(*x), wants(*w), b.is_some_and(wants));
                let cg = kernels::conv2d_backward(geom, val(*x), val(*w), g, need);
                if let Some(dx) = cg.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = cg.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    acc(*b, db);
                }
            }
            Op::AvgPool(x, k) => {
                let s = shape(*x);
                acc(*x, kernels::avg_pool_backward(s[0] * s[1], s[2], s[3], *k, g));
            }
            Op::Upsample(x) => {
                let s = shape(*x);
                let o = node.value.shape();
                acc(*x, kernels::bilinear_backward(s[0] * s[1], s[2], s[3], o[2], o[3], g));
            }
            Op::MulChannel(x, s) => {
                let sx = shape(*x);
                let (c, plane) = (sx[1], sx[2] * sx[3]);
                let (vx, vs) = (val(*x), val(*s));
                if wants(*s) {
                    let mut ds = vec![0.0; c];
                    for (i, (gc, xc)) in g.chunks(plane).zip(vx.chunks(plane)).enumerate() {
                        ds[i % c] += gc.iter().zip(xc).map(|(g, x)| g * x).sum::<f64>();
                    }
                    acc(*s, ds);
                }
                if wants(*x) {
                    let mut dx = g.to_vec();
                    for (i, chunk) in dx.chunks_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|v| *v *= vs[i % c]);
                    }
                    acc(*x, dx);
                }
            }
            Op::L2Normalize(x, eps) => {
                let d = *shape(*x).last().expect("rank >= 1");
                let vx = val(*x);
                let mut dx = vec![0.0; vx.len()];
                for ((xr, gr), dr) in vx.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let s = if norm == 0.0 { *eps } else { norm };
                    let dot: f64 = xr.iter().zip(gr).map(|(x, g)| x * g).sum();
                    for ((dv, &xv), &gv) in dr.iter_mut().zip(xr).zip(gr) {
                        *dv = gv / s;
                        if norm > 0.0 {
                            *dv -= xv * dot / (norm * s * s);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::BatchStandardize(x, eps) => {
                let s = shape(*x);
                let (b, d) = (s[0], s[1]);
                let vx = val(*x);
                let (mean, inv) = column_stats(vx, b, d, *eps);
                let mut dx = vec![0.0; g.len()];
                for j in 0..d {
                    let y = |i: usize| (vx[i * d + j] - mean[j]) * inv[j];
                    let g_mean = (0..b).map(|i| g[i * d + j]).sum::<f64>() / b as f64;
                    let gy_mean = (0..b).map(|i| g[i * d + j] * y(i)).sum::<f64>() / b as f64;
                    for i in 0..b {
                        dx[i * d + j] = inv[j] * (g[i * d + j] - g_mean - y(i) * gy_mean);
                    }
                }
                acc(*x, dx);
            }
            Op::NodeMean(x) => {
                let s = shape(*x);
                let (n, f) = (s[1], s[2]);
                let mut dx = vec![0.0; g.len()];
                for (gb, db) in g.chunks(n * f).zip(dx.chunks_mut(n * f)) {
                    let mut mean = vec![0.0; f];
                    for row in gb.chunks(f) {
                        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                    }
                    mean.iter_mut().for_each(|m| *m /= n as f64);
                    for row in db.chunks_mut(f) {
                        row.copy_from_slice(&mean);
                    }
                }
                acc(*x, dx);
            }
            Op::AdjMatmul(adj, x) => {
                let s = shape(*x);
                let (b, n, f) = (s[0], s[1], s[2]);
                let (va, vx) = (val(*adj), val(*x));
                if wants(*adj) {
                    let mut da = vec![0.0; n * n];
                    for bi in 0..b {
                        let r = bi * n * f..(bi + 1) * n * f;
                        kernels::gemm(n, f, n, &g[r.clone()], false, &vx[r], true, &mut da, 1.0);
                    }
                    acc(*adj, da);
                }
                if wants(*x) {
                    let mut dx = vec![0.0; vx.len()];
                    for bi in 0..b {
                        let r = bi * n * f..(bi + 1) * n * f;
                        kernels::gemm(n, n, f, va, true, &g[r.clone()], false, &mut dx[r], 0.0);
                    }
                    acc(*x, dx);
                }
            }
        }
    }
}
