use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride and zero padding of a 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    StraightThrough(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// An eager computation record supporting one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

/// The logistic function; shared by the tape primitive and the quantizer so
/// both produce bitwise-identical values.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (ad, bd) = (a.data(), b.data());
    if ad.len() == bd.len() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if ad.len() == 1 {
        bd.iter().map(|&y| f(ad[0], y)).collect()
    } else {
        ad.iter().map(|&x| f(x, bd[0])).collect()
    }
}

/// `outer x axis x inner` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
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

    /// Records a leaf. Non-finite values are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", value.data())?;
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Result<Var> {
        check_finite(name, &data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Tensor::from_parts(shape, data), requires_grad, op))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(x);
        let shape = value.shape().to_vec();
        let data = value.data().iter().map(|&v| f(v)).collect();
        self.record(name, shape, data, &[x], op)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (ashape, bshape) = (at.shape(), bt.shape());
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ashape.to_vec(),
                rhs: bshape.to_vec(),
            });
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(at.data(), bt.data(), &mut out, m, k, n);
        self.record("matmul", vec![m, n], out, &[a, b], Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("add", self.value(a), self.value(b))?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.record("add", shape, data, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("sub", self.value(a), self.value(b))?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.record("sub", shape, data, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("mul", self.value(a), self.value(b))?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.record("mul", shape, data, &[a, b], Op::Mul(a, b))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    /// Adds a constant.
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("shift", x, |v| v + c, Op::Shift(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, libm::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, libm::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    /// `x * sigmoid(x)`, composed from primitives.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let s = self.sigmoid(x)?;
        self.mul(x, s)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.record("sum", vec![1], vec![total], &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.record("mean", vec![1], vec![mean], &[x], Op::Mean(x))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat axis out of range"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.record(
            "concat",
            shape,
            data,
            parts,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let src = self.value(x);
        let shape_in = src.shape().to_vec();
        if axis >= shape_in.len() || start >= end || end > shape_in[axis] {
            return Err(Error::invalid("slice range out of bounds"));
        }
        let (outer, len, inner) = split_axis(&shape_in, axis);
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = shape_in;
        shape[axis] = width;
        self.record("slice", shape, data, &[x], Op::Slice { input: x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if shape.iter().product::<usize>() != src.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: src.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = src.data().to_vec();
        self.record("reshape", shape.to_vec(), data, &[x], Op::Reshape(x))
    }

    /// Elementwise floor. Not differentiable: the result never requires
    /// gradients.
    pub fn floor(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| libm::floor(v)).collect());
        Ok(self.push(value, false, Op::Leaf))
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where the input was
    /// strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { input: x, lo, hi })
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        Ok(self.push(value, false, Op::Leaf))
    }

    /// `x + sg(target - x)` evaluated without rounding: the forward value is
    /// `target` bit for bit and the whole incoming gradient flows to `x`.
    pub fn straight_through(&mut self, x: Var, target: Var) -> Result<Var> {
        let (xs, ts) = (self.value(x), self.value(target));
        if xs.shape() != ts.shape() {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                lhs: xs.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let value = ts.clone();
        let requires_grad = self.requires_grad(x);
        Ok(self.push(value, requires_grad, Op::StraightThrough(x)))
    }

    /// `[B, C, H, W]` input, `[O, C, K, K]` kernel, optional `[O]` bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (xs, ks) = (self.value(input), self.value(kernel));
        let (xshape, kshape) = (xs.shape(), ks.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: xshape.to_vec(),
            rhs: kshape.to_vec(),
        };
        if xshape.len() != 4 || kshape.len() != 4 || kshape[1] != xshape[1] || kshape[2] != kshape[3] {
            return Err(mismatch());
        }
        if spec.stride == 0 || xshape[2] + 2 * spec.padding < kshape[2] || xshape[3] + 2 * spec.padding < kshape[3] {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if self.value(b).numel() != kshape[0] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: kshape.to_vec(),
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let geo = ConvGeometry::new(xshape, kshape, spec);
        let mut out = vec![0.0; geo.out_len()];
        geo.forward(xs.data(), ks.data(), bias.map(|b| self.value(b).data()), &mut out);
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.record(
            "conv2d",
            geo.out_shape(),
            out,
            &inputs,
            Op::Conv2d {
                input,
                kernel,
                bias,
                spec,
            },
        )
    }

    /// Propagates `d loss / d node` to every node that requires gradients.
    /// Runs at most once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardReplayed);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`; zeros when no
    /// gradient reached it (or backward has not run).
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.value(v).shape();
        match self.grads.as_ref().and_then(|g| g[v.0].as_ref()) {
            Some(g) => Tensor::from_parts(shape.to_vec(), g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, contribution: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.numel()]);
        contribution(slot);
    }

    /// Adds `g * factor` (elementwise, with scalar-operand reduction) into the
    /// gradient of `target`.
    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        g: &[f64],
        factor: impl Fn(usize) -> f64,
    ) {
        let scalar_target = self.nodes[target.0].value.numel() == 1 && g.len() != 1;
        self.accumulate(grads, target, |slot| {
            if scalar_target {
                slot[0] += g.iter().enumerate().map(|(j, &gj)| gj * factor(j)).sum::<f64>();
            } else {
                for (j, (s, &gj)) in slot.iter_mut().zip(g).enumerate() {
                    *s += gj * factor(j);
                }
            }
        });
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        let at = |v: Var| self.nodes[v.0].value.data();
        let pick = |d: &[f64], j: usize| if d.len() == 1 { d[0] } else { d[j] };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ashape, bshape) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
                let (ad, bd) = (at(*a), at(*b));
                self.accumulate(grads, *a, |ga| {
                    // ga[i, p] += sum_j g[i, j] * b[p, j]
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    // gb[p, j] += sum_i a[i, p] * g[i, j]
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let a_rp = ad[r * k + p];
                            if a_rp == 0.0 {
                                continue;
                            }
                            for (dst, &gj) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *dst += a_rp * gj;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate_broadcast(grads, *a, g, |_| 1.0);
                self.accumulate_broadcast(grads, *b, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(grads, *a, g, |_| 1.0);
                self.accumulate_broadcast(grads, *b, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (at(*a), at(*b));
                self.accumulate_broadcast(grads, *a, g, |j| pick(bd, j));
                self.accumulate_broadcast(grads, *b, g, |j| pick(ad, j));
            }
            Op::Scale(x, c) => self.accumulate_broadcast(grads, *x, g, |_| *c),
            Op::Shift(x) | Op::Reshape(x) | Op::StraightThrough(x) => self.accumulate_broadcast(grads, *x, g, |_| 1.0),
            Op::Sigmoid(x) => {
                let s = out.data();
                self.accumulate_broadcast(grads, *x, g, |j| s[j] * (1.0 - s[j]));
            }
            Op::Tanh(x) => {
                let y = out.data();
                self.accumulate_broadcast(grads, *x, g, |j| 1.0 - y[j] * y[j]);
            }
            Op::Exp(x) => {
                let y = out.data();
                self.accumulate_broadcast(grads, *x, g, |j| y[j]);
            }
            Op::Square(x) => {
                let xd = at(*x);
                self.accumulate_broadcast(grads, *x, g, |j| 2.0 * xd[j]);
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(grads, *x, |slot| slot.iter_mut().for_each(|s| *s += g0));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                let g0 = g[0] / n;
                self.accumulate(grads, *x, |slot| slot.iter_mut().for_each(|s| *s += g0));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let width = self.value(*p).shape()[*axis];
                    self.accumulate(grads, *p, |slot| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * width * inner;
                            for (d, s) in slot[dst..dst + width * inner]
                                .iter_mut()
                                .zip(&g[src..src + width * inner])
                            {
                                *d += s;
                            }
                        }
                    });
                    offset += width;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, len, inner) = split_axis(self.value(*input).shape(), *axis);
                let width = out.shape()[*axis];
                self.accumulate(grads, *input, |slot| {
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        let src = o * width * inner;
                        for (d, s) in slot[dst..dst + width * inner]
                            .iter_mut()
                            .zip(&g[src..src + width * inner])
                        {
                            *d += s;
                        }
                    }
                });
            }
            Op::Clamp { input, lo, hi } => {
                let xd = at(*input);
                self.accumulate_broadcast(grads, *input, g, |j| if xd[j] > *lo && xd[j] < *hi { 1.0 } else { 0.0 });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                spec,
            } => {
                let geo = ConvGeometry::new(self.value(*input).shape(), self.value(*kernel).shape(), *spec);
                let (xd, kd) = (at(*input), at(*kernel));
                self.accumulate(grads, *input, |gx| geo.grad_input(g, kd, gx));
                self.accumulate(grads, *kernel, |gk| geo.grad_kernel(g, xd, gk));
                if let Some(b) = bias {
                    self.accumulate(grads, *b, |gb| geo.grad_bias(g, gb));
                }
            }
        }
    }
}

/// `out += a[m, k] * b[k, n]` with an `i-k-j` loop order.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for p in 0..k {
            let a_rp = a[r * k + p];
            if a_rp == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_rp * bv;
            }
        }
    }
}

struct ConvGeometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], k: &[usize], spec: Conv2dSpec) -> Self {
        let oh = (x[2] + 2 * spec.padding - k[2]) / spec.stride + 1;
        let ow = (x[3] + 2 * spec.padding - k[3]) / spec.stride + 1;
        Self {
            batch: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: k[0],
            k: k[2],
            stride: spec.stride,
            pad: spec.padding,
            oh,
            ow,
        }
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.oh, self.ow]
    }

    fn out_len(&self) -> usize {
        self.batch * self.cout * self.oh * self.ow
    }

    /// Calls `f(out_index, in_index, kernel_index)` for every tap that lands
    /// inside the (unpadded) input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.batch {
            for o in 0..self.cout {
                for oy in 0..self.oh {
                    for ox in 0..self.ow {
                        let oi = ((b * self.cout + o) * self.oh + oy) * self.ow + ox;
                        for c in 0..self.cin {
                            for ky in 0..self.k {
                                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                if iy < 0 || iy >= self.h as isize {
                                    continue;
                                }
                                for kx in 0..self.k {
                                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                    if ix < 0 || ix >= self.w as isize {
                                        continue;
                                    }
                                    let ii = ((b * self.cin + c) * self.h + iy as usize) * self.w + ix as usize;
                                    let ki = ((o * self.cin + c) * self.k + ky) * self.k + kx;
                                    f(oi, ii, ki);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], k: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
        self.for_each_tap(|oi, ii, ki| out[oi] += x[ii] * k[ki]);
        if let Some(bias) = bias {
            let plane = self.oh * self.ow;
            for (chunk_idx, chunk) in out.chunks_mut(plane).enumerate() {
                let bo = bias[chunk_idx % self.cout];
                chunk.iter_mut().for_each(|v| *v += bo);
            }
        }
    }

    fn grad_input(&self, g: &[f64], k: &[f64], gx: &mut [f64]) {
        self.for_each_tap(|oi, ii, ki| gx[ii] += g[oi] * k[ki]);
    }

    fn grad_kernel(&self, g: &[f64], x: &[f64], gk: &mut [f64]) {
        self.for_each_tap(|oi, ii, ki| gk[ki] += g[oi] * x[ii]);
    }

    fn grad_bias(&self, g: &[f64], gb: &mut [f64]) {
        let plane = self.oh * self.ow;
        for (chunk_idx, chunk) in g.chunks(plane).enumerate() {
            gb[chunk_idx % self.cout] += chunk.iter().sum::<f64>();
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
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0)).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn floor_matches_definition() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.7, -0.2])).unwrap();
        let y = tape.floor(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);
        assert!(!tape.requires_grad(y));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        let err = tape.add(a, b).unwrap_err();
        assert_eq!(
            err,
            Error::ShapeMismatch {
                op: "add",
                lhs: vec![2, 3],
                rhs: vec![3, 2]
            }
        );
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"));
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn non_finite_inputs_and_results_are_rejected() {
        let mut tape = Tape::new();
        assert_eq!(
            tape.constant(Tensor::vector(vec![1.0, f64::NAN])).unwrap_err(),
            Error::NonFinite("leaf")
        );
        let x = tape.constant(Tensor::scalar(1000.0)).unwrap();
        assert_eq!(tape.exp(x).unwrap_err(), Error::NonFinite("exp"));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_replay() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = tape.square(x).unwrap();
        assert_eq!(tape.backward(y).unwrap_err(), Error::NonScalarLoss(vec![2]));
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss).unwrap_err(), Error::BackwardReplayed);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.3, -1.0])).unwrap();
        let sg = tape.stop_gradient(x).unwrap();
        assert_eq!(tape.value(sg).data(), tape.value(x).data());
        let loss = tape.sum(sg).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn stop_gradient_product_keeps_live_branch() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![2.0])).unwrap();
        let sg = tape.stop_gradient(x).unwrap();
        let prod = tape.mul(sg, x).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0]);
    }

    #[test]
    fn scalar_broadcast_reduces_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(3.0)).unwrap();
        let b = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let p = tape.mul(a, b).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).data(), &[10.0]);
        assert_eq!(tape.grad(b).data(), &[3.0; 4]);
    }

    #[test]
    fn concat_and_slice_round_trip_gradients() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 1], &[1.0, 2.0])).unwrap();
        let b = tape.param(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = tape.slice(c, 1, 1, 3).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 4.0, 5.0, 6.0]);
        let sq = tape.square(s).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).data(), &[0.0, 0.0]);
        assert_eq!(tape.grad(b).data(), &[6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn straight_through_forward_is_target_and_gradient_is_identity() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![3.3, -7.1])).unwrap();
        let q = tape.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let y = tape.straight_through(x, q).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
        let sq = tape.square(y).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 0.0]);
    }
}
