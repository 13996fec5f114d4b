use super::{is_grad_enabled, split_at_axis, Result, Tensor, TensorError};

/// A recorded operation. Inputs are held by value so the graph stays alive
/// as long as its outputs do.
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddConst(Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Conv2d { input: Tensor, kernel: Tensor },
    KernelGrad { input: Tensor, out_grad: Tensor },
    FlipKernel(Tensor),
    Tanh(Tensor),
    Sigmoid(Tensor),
    Softplus(Tensor),
    Exp(Tensor),
    Sqrt(Tensor),
    Recip(Tensor),
    Abs(Tensor),
    LogSoftmax(Tensor),
    Reshape(Tensor),
    SumOuterInner { a: Tensor, outer: usize, inner: usize },
    Tile { a: Tensor, outer: usize, inner: usize },
    Concat { parts: Vec<Tensor>, axis: usize },
    Slice { a: Tensor, axis: usize, start: usize },
    Pad { a: Tensor, axis: usize, start: usize },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![a, b],
            Conv2d { input, kernel } => vec![input, kernel],
            KernelGrad { input, out_grad } => vec![input, out_grad],
            Concat { parts, .. } => parts.iter().collect(),
            Scale(a, _) | AddConst(a) | Transpose(a) | FlipKernel(a) | Tanh(a) | Sigmoid(a)
            | Softplus(a) | Exp(a) | Sqrt(a) | Recip(a) | Abs(a) | LogSoftmax(a) | Reshape(a) => {
                vec![a]
            }
            SumOuterInner { a, .. } | Tile { a, .. } | Slice { a, .. } | Pad { a, .. } => vec![a],
        }
    }

    /// Vector-Jacobian products for each input selected by `needs`, built
    /// from public tensor operations only.
    pub(crate) fn backward(
        &self,
        g: &Tensor,
        needs: &dyn Fn(&Tensor) -> bool,
    ) -> Result<Vec<(Tensor, Tensor)>> {
        use Op::*;
        let mut out = Vec::with_capacity(2);
        match self {
            Add(a, b) => {
                if needs(a) {
                    out.push((a.clone(), g.clone()));
                }
                if needs(b) {
                    out.push((b.clone(), g.clone()));
                }
            }
            Sub(a, b) => {
                if needs(a) {
                    out.push((a.clone(), g.clone()));
                }
                if needs(b) {
                    out.push((b.clone(), g.neg()));
                }
            }
            Mul(a, b) => {
                if needs(a) {
                    out.push((a.clone(), g.mul(b)?));
                }
                if needs(b) {
                    out.push((b.clone(), g.mul(a)?));
                }
            }
            Scale(a, c) => out.push((a.clone(), g.scale(*c))),
            AddConst(a) => out.push((a.clone(), g.clone())),
            MatMul(a, b) => {
                if needs(a) {
                    out.push((a.clone(), g.matmul(&b.transpose()?)?));
                }
                if needs(b) {
                    out.push((b.clone(), a.transpose()?.matmul(g)?));
                }
            }
            Transpose(a) => out.push((a.clone(), g.transpose()?)),
            Conv2d { input, kernel } => {
                if needs(input) {
                    out.push((input.clone(), g.conv2d(&kernel.flip_kernel()?)?));
                }
                if needs(kernel) {
                    out.push((kernel.clone(), input.conv2d_kernel_grad(g)?));
                }
            }
            KernelGrad { input, out_grad } => {
                if needs(input) {
                    out.push((input.clone(), out_grad.conv2d(&g.flip_kernel()?)?));
                }
                if needs(out_grad) {
                    out.push((out_grad.clone(), input.conv2d(g)?));
                }
            }
            FlipKernel(a) => out.push((a.clone(), g.flip_kernel()?)),
            Tanh(a) => {
                let y = a.tanh();
                let dy = y.mul(&y)?.scale(-1.0).add_scalar(1.0);
                out.push((a.clone(), g.mul(&dy)?));
            }
            Sigmoid(a) => {
                let s = a.sigmoid();
                let ds = s.mul(&s.scale(-1.0).add_scalar(1.0))?;
                out.push((a.clone(), g.mul(&ds)?));
            }
            Softplus(a) => out.push((a.clone(), g.mul(&a.sigmoid())?)),
            Exp(a) => out.push((a.clone(), g.mul(&a.exp())?)),
            Sqrt(a) => {
                let d = a.sqrt()?.recip()?.scale(0.5);
                out.push((a.clone(), g.mul(&d)?));
            }
            Recip(a) => {
                let r = a.recip()?;
                out.push((a.clone(), g.mul(&r.mul(&r)?.neg())?));
            }
            Abs(a) => {
                let sign: Vec<f64> = a.data().iter().map(|v| sign(*v)).collect();
                let sign = Tensor::from_parts(a.shape().to_vec(), sign, false, None);
                out.push((a.clone(), g.mul(&sign)?));
            }
            LogSoftmax(a) => {
                let p = a.log_softmax()?.exp();
                let cols = a.shape()[1];
                let row_sums = g.sum_keep_axis(0)?.expand_axis(a.shape(), 0)?;
                debug_assert_eq!(row_sums.shape()[1], cols);
                out.push((a.clone(), g.sub(&p.mul(&row_sums)?)?));
            }
            Reshape(a) => out.push((a.clone(), g.reshape(a.shape())?)),
            SumOuterInner { a, outer, inner } => {
                out.push((a.clone(), g.tile(*outer, *inner, a.shape())?))
            }
            Tile { a, outer, inner } => {
                out.push((a.clone(), g.sum_outer_inner(*outer, *inner, a.shape())?))
            }
            Concat { parts, axis } => {
                let mut offset = 0;
                for p in parts {
                    let len = p.shape()[*axis];
                    if needs(p) {
                        out.push((p.clone(), g.slice(*axis, offset, len)?));
                    }
                    offset += len;
                }
            }
            Slice { a, axis, start } => {
                out.push((a.clone(), g.pad(*axis, *start, a.shape()[*axis])?))
            }
            Pad { a, axis, start } => {
                out.push((a.clone(), g.slice(*axis, *start, a.shape()[*axis])?))
            }
        }
        Ok(out)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Builds an op result, attaching history only when recording is on and an
/// input is tracked.
fn record(shape: Vec<usize>, data: Vec<f64>, inputs: &[&Tensor], op: impl FnOnce() -> Op) -> Tensor {
    let tracked = is_grad_enabled() && inputs.iter().any(|t| t.tracks_grad());
    let op = if tracked { Some(op()) } else { None };
    Tensor::from_parts(shape, data, tracked, op)
}

fn unary(a: &Tensor, f: impl Fn(f64) -> f64, op: impl FnOnce() -> Op) -> Tensor {
    let data = a.data().iter().map(|&v| f(v)).collect();
    record(a.shape().to_vec(), data, &[a], op)
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    /// Resolves scalar-tensor broadcasting for elementwise binary ops.
    fn broadcast_pair(&self, other: &Tensor, op: &'static str) -> Result<(Tensor, Tensor)> {
        if self.shape() == other.shape() {
            return Ok((self.clone(), other.clone()));
        }
        if other.numel() == 1 {
            return Ok((self.clone(), other.expand(self.shape())?));
        }
        if self.numel() == 1 {
            return Ok((self.expand(other.shape())?, other.clone()));
        }
        Err(shape_err(op, self, other))
    }

    fn zip_with(&self, other: &Tensor, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: impl FnOnce(Tensor, Tensor) -> Op) -> Result<Tensor> {
        let (a, b) = self.broadcast_pair(other, op_name)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(record(a.shape().to_vec(), data, &[&a, &b], || op(a.clone(), b.clone())))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |x, y| x * y, Op::Mul)
    }

    /// Elementwise quotient, composed as `self * recip(other)`.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.mul(&other.recip()?)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, |v| v * c, || Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, |v| v + c, || Op::AddConst(self.clone()))
    }

    /// Matrix product of `(n, k)` and `(k, m)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self, other);
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err("matmul", a, b));
        }
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                    *o += av * bv;
                }
            }
        }
        Ok(record(vec![n, m], out, &[a, b], || Op::MatMul(a.clone(), b.clone())))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected a matrix, got shape {:?}", self.shape()),
            });
        }
        let (n, m) = (self.shape()[0], self.shape()[1]);
        let d = self.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = d[i * m + j];
            }
        }
        Ok(record(vec![m, n], out, &[self], || Op::Transpose(self.clone())))
    }

    /// Same-size 2-D convolution (cross-correlation) with a 3x3 kernel,
    /// stride 1 and one pixel of zero padding.
    ///
    /// `self` is `(N, C, H, W)`, `kernel` is `(O, C, 3, 3)`; the result is
    /// `(N, O, H, W)`.
    pub fn conv2d(&self, kernel: &Tensor) -> Result<Tensor> {
        let (x, k) = (self, kernel);
        if x.rank() != 4 || k.rank() != 4 || k.shape()[2] != 3 || k.shape()[3] != 3 || k.shape()[1] != x.shape()[1] {
            return Err(shape_err("conv2d", x, k));
        }
        let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let o = k.shape()[0];
        let (xd, kd) = (x.data(), k.data());
        let mut out = vec![0.0; n * o * h * w];
        for b in 0..n {
            for oc in 0..o {
                let dst = &mut out[(b * o + oc) * h * w..(b * o + oc + 1) * h * w];
                for ic in 0..c {
                    let src = &xd[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                    for di in 0..3 {
                        for dj in 0..3 {
                            let kv = kd[((oc * c + ic) * 3 + di) * 3 + dj];
                            accumulate_shifted(dst, src, h, w, di, dj, kv);
                        }
                    }
                }
            }
        }
        Ok(record(vec![n, o, h, w], out, &[x, k], || Op::Conv2d {
            input: x.clone(),
            kernel: k.clone(),
        }))
    }

    /// Gradient of `conv2d` with respect to its kernel: given the input
    /// `(N, C, H, W)` and an output cotangent `(N, O, H, W)`, returns
    /// `(O, C, 3, 3)`.
    pub fn conv2d_kernel_grad(&self, out_grad: &Tensor) -> Result<Tensor> {
        let (x, g) = (self, out_grad);
        if x.rank() != 4 || g.rank() != 4 || x.shape()[0] != g.shape()[0] || x.shape()[2..] != g.shape()[2..] {
            return Err(shape_err("conv2d_kernel_grad", x, g));
        }
        let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let o = g.shape()[1];
        let (xd, gd) = (x.data(), g.data());
        let mut out = vec![0.0; o * c * 9];
        for b in 0..n {
            for oc in 0..o {
                let gp = &gd[(b * o + oc) * h * w..(b * o + oc + 1) * h * w];
                for ic in 0..c {
                    let xp = &xd[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                    for di in 0..3 {
                        for dj in 0..3 {
                            out[((oc * c + ic) * 3 + di) * 3 + dj] += shifted_dot(gp, xp, h, w, di, dj);
                        }
                    }
                }
            }
        }
        Ok(record(vec![o, c, 3, 3], out, &[x, g], || Op::KernelGrad {
            input: x.clone(),
            out_grad: g.clone(),
        }))
    }

    /// Swaps the channel axes of an `(O, C, 3, 3)` kernel and rotates each
    /// 3x3 slice by 180 degrees, giving the kernel of the adjoint
    /// convolution.
    pub fn flip_kernel(&self) -> Result<Tensor> {
        if self.rank() != 4 || self.shape()[2] != 3 || self.shape()[3] != 3 {
            return Err(TensorError::Invalid {
                op: "flip_kernel",
                msg: format!("expected (O, C, 3, 3), got {:?}", self.shape()),
            });
        }
        let (o, c) = (self.shape()[0], self.shape()[1]);
        let d = self.data();
        let mut out = vec![0.0; o * c * 9];
        for oc in 0..o {
            for ic in 0..c {
                for i in 0..3 {
                    for j in 0..3 {
                        out[((ic * o + oc) * 3 + (2 - i)) * 3 + (2 - j)] = d[((oc * c + ic) * 3 + i) * 3 + j];
                    }
                }
            }
        }
        Ok(record(vec![c, o, 3, 3], out, &[self], || Op::FlipKernel(self.clone())))
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, f64::tanh, || Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, stable_sigmoid, || Op::Sigmoid(self.clone()))
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&self) -> Tensor {
        unary(self, stable_softplus, || Op::Softplus(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, || Op::Exp(self.clone()))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        let t = unary(self, f64::sqrt, || Op::Sqrt(self.clone()));
        check_finite("sqrt", t.data())?;
        Ok(t)
    }

    pub fn recip(&self) -> Result<Tensor> {
        let t = unary(self, |v| 1.0 / v, || Op::Recip(self.clone()));
        check_finite("recip", t.data())?;
        Ok(t)
    }

    /// Elementwise absolute value; the derivative at zero is taken as zero.
    pub fn abs(&self) -> Tensor {
        unary(self, f64::abs, || Op::Abs(self.clone()))
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "log_softmax",
                msg: format!("expected a matrix, got shape {:?}", self.shape()),
            });
        }
        let m = self.shape()[1];
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data().chunks(m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        Ok(record(self.shape().to_vec(), out, &[self], || Op::LogSoftmax(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Ok(record(shape.to_vec(), self.to_vec(), &[self], || Op::Reshape(self.clone())))
    }

    /// Rank-1 view of all elements in row-major order.
    pub fn flatten(&self) -> Tensor {
        self.reshape(&[self.numel()]).expect("flatten preserves size")
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        self.sum_outer_inner(1, self.numel(), &[]).expect("full sum is always valid")
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Squared Euclidean norm over all elements.
    pub fn sq_norm(&self) -> Tensor {
        self.mul(self).expect("same shape").sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(shape_err("dot", self, other));
        }
        Ok(self.mul(other)?.sum())
    }

    /// Sums over every axis except `axis`, giving a rank-1 tensor of length
    /// `shape[axis]`.
    pub fn sum_keep_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::Invalid {
                op: "sum_keep_axis",
                msg: format!("axis {axis} out of range for shape {:?}", self.shape()),
            });
        }
        let (outer, mid, inner) = split_at_axis(self.shape(), axis);
        self.sum_outer_inner(outer, inner, &[mid])
    }

    /// Inverse of [`Tensor::sum_keep_axis`]: repeats a rank-1 tensor of
    /// length `shape[axis]` across all other axes of `shape`.
    pub fn expand_axis(&self, shape: &[usize], axis: usize) -> Result<Tensor> {
        if axis >= shape.len() || shape[axis] != self.numel() {
            return Err(TensorError::Shape {
                op: "expand_axis",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let (outer, _, inner) = split_at_axis(shape, axis);
        self.tile(outer, inner, shape)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if self.numel() != 1 {
            return Err(TensorError::Shape {
                op: "expand",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        self.tile(1, shape.iter().product(), shape)
    }

    /// Views `self` as `(outer, mid, inner)` and sums over `outer` and
    /// `inner`; the result is reshaped to `out_shape` (numel `mid`).
    pub(crate) fn sum_outer_inner(&self, outer: usize, inner: usize, out_shape: &[usize]) -> Result<Tensor> {
        let mid: usize = out_shape.iter().product();
        if outer * mid * inner != self.numel() {
            return Err(TensorError::Shape {
                op: "sum",
                lhs: self.shape().to_vec(),
                rhs: out_shape.to_vec(),
            });
        }
        let d = self.data();
        let mut out = vec![0.0; mid];
        for o in 0..outer {
            for (m, acc) in out.iter_mut().enumerate() {
                let base = (o * mid + m) * inner;
                *acc += d[base..base + inner].iter().sum::<f64>();
            }
        }
        Ok(record(out_shape.to_vec(), out, &[self], || Op::SumOuterInner {
            a: self.clone(),
            outer,
            inner,
        }))
    }

    /// Repeats `self` (numel `mid`) as `(outer, mid, inner)`, reshaped to
    /// `out_shape`.
    pub(crate) fn tile(&self, outer: usize, inner: usize, out_shape: &[usize]) -> Result<Tensor> {
        let mid = self.numel();
        if outer * mid * inner != out_shape.iter().product::<usize>() {
            return Err(TensorError::Shape {
                op: "tile",
                lhs: self.shape().to_vec(),
                rhs: out_shape.to_vec(),
            });
        }
        let d = self.data();
        let mut out = Vec::with_capacity(outer * mid * inner);
        for _ in 0..outer {
            for &v in d {
                out.extend(std::iter::repeat_n(v, inner));
            }
        }
        Ok(record(out_shape.to_vec(), out, &[self], || Op::Tile {
            a: self.clone(),
            outer,
            inner,
        }))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no tensors given".into(),
        })?;
        if axis >= first.rank() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {:?}", first.shape()),
            });
        }
        for p in &parts[1..] {
            let same_rest = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                return Err(shape_err("concat", first, p));
            }
        }
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for p in parts {
            let len = p.shape()[axis];
            let d = p.data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(record(shape, out, &refs, || Op::Concat {
            parts: parts.to_vec(),
            axis,
        }))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {:?}", start + len, self.shape()),
            });
        }
        let (outer, mid, inner) = split_at_axis(self.shape(), axis);
        let d = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * mid + start) * inner;
            out.extend_from_slice(&d[src..src + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(record(shape, out, &[self], || Op::Slice {
            a: self.clone(),
            axis,
            start,
        }))
    }

    /// Embeds `self` into zeros of extent `total` along `axis`, starting at
    /// `start`. Adjoint of [`Tensor::slice`].
    pub fn pad(&self, axis: usize, start: usize, total: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + self.shape()[axis] > total {
            return Err(TensorError::Invalid {
                op: "pad",
                msg: format!("cannot place {:?} at {start} within {total} on axis {axis}", self.shape()),
            });
        }
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let d = self.data();
        let mut out = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let dst = (o * total + start) * inner;
            out[dst..dst + len * inner].copy_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = total;
        Ok(record(shape, out, &[self], || Op::Pad {
            a: self.clone(),
            axis,
            start,
        }))
    }
}

/// `dst[i][j] += k * src[i + di - 1][j + dj - 1]` over the valid window.
fn accumulate_shifted(dst: &mut [f64], src: &[f64], h: usize, w: usize, di: usize, dj: usize, k: f64) {
    if k == 0.0 {
        return;
    }
    let (i0, i1) = valid_range(h, di);
    let (j0, j1) = valid_range(w, dj);
    for i in i0..i1 {
        let si = i + di - 1;
        let d = &mut dst[i * w + j0..i * w + j1];
        let s = &src[si * w + j0 + dj - 1..si * w + j1 + dj - 1];
        for (a, b) in d.iter_mut().zip(s) {
            *a += k * b;
        }
    }
}

/// `sum_ij g[i][j] * x[i + di - 1][j + dj - 1]` over the valid window.
fn shifted_dot(g: &[f64], x: &[f64], h: usize, w: usize, di: usize, dj: usize) -> f64 {
    let (i0, i1) = valid_range(h, di);
    let (j0, j1) = valid_range(w, dj);
    let mut acc = 0.0;
    for i in i0..i1 {
        let si = i + di - 1;
        let gr = &g[i * w + j0..i * w + j1];
        let xr = &x[si * w + j0 + dj - 1..si * w + j1 + dj - 1];
        acc += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
    }
    acc
}

/// Output indices `i` for which `i + d - 1` lies inside `0..n`.
fn valid_range(n: usize, d: usize) -> (usize, usize) {
    let lo = 1usize.saturating_sub(d);
    let hi = (n + 1 - d).min(n);
    (lo, hi)
}
