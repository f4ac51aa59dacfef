//! Forward rules and vector-Jacobian products of every recorded operation.
//!
//! Shape rules, per operation:
//! - `matmul`: `[m × k] · [k × n] → [m × n]`
//! - `add`, `mul`: identical shapes, elementwise
//! - `add_row`: `[.. × c] + [c]`, the vector added to every row
//! - `rms_norm`: normalizes along the last axis, gain has that axis' length
//! - `softmax`, `mean`, `max`: along one axis; `mean`/`max` drop the axis
//! - `conv1d_depthwise`: `[l × c]` or `[b × l × c]` with kernel `[c × k]`,
//!   zero padded so the output has the input's extents
//! - `concat`, `slice`: along one axis, other extents must agree
//! - `select`: mask over all elements, or over the leading axis (rows)
//! - `gather_rows` / `scatter_rows`: index the leading axis

use super::{Graph, Op, ScanRecord, Var};
use crate::error::{contract, ensure, Result};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::ssm::{selective_scan, selective_scan_backward, Discretization, ScanDims, ScanInputs};
use crate::tensor::{axis_split, Tensor};

/// Epsilon added to the root-mean-square in [`Graph::rms_norm`].
pub const RMS_EPS: f64 = 1e-6;

/// Operation kinds reachable through [`Graph::op_forward`], with their static
/// attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Exp,
    Softplus,
    RmsNorm,
    Softmax { axis: usize },
    DepthwiseDilatedConv1d { dilation: usize },
    ReduceMean { axis: usize },
    ReduceMax { axis: usize },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    SelectByMask { mask: Vec<bool> },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Exp => "exp",
            OpKind::Softplus => "softplus",
            OpKind::RmsNorm => "rms_norm",
            OpKind::Softmax { .. } => "softmax",
            OpKind::DepthwiseDilatedConv1d { .. } => "depthwise_dilated_conv1d",
            OpKind::ReduceMean { .. } => "reduce_mean",
            OpKind::ReduceMax { .. } => "reduce_max",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::SelectByMask { .. } => "elementwise_select_by_mask",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Mul | OpKind::RmsNorm => Some(2),
            OpKind::DepthwiseDilatedConv1d { .. } | OpKind::SelectByMask { .. } => Some(2),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

fn unary<T: Scalar>(g: &mut Graph<T>, x: Var, op: fn(Var) -> Op<T>, f: impl Fn(T) -> T) -> Var {
    let value = g.value(x).map(f);
    let needs = g.any_grad(&[x]);
    g.push(value, op(x), needs)
}

impl<T: Scalar> Graph<T> {
    /// Applies `kind` to `inputs`. Every kind is also available as a
    /// dedicated method.
    pub fn op_forward(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = kind.arity() {
            ensure!(inputs.len() == n, "{} takes {n} inputs, got {}", kind.name(), inputs.len());
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Exp => Ok(self.exp(inputs[0])),
            OpKind::Softplus => Ok(self.softplus(inputs[0])),
            OpKind::RmsNorm => self.rms_norm(inputs[0], inputs[1]),
            OpKind::Softmax { axis } => self.softmax(inputs[0], *axis),
            OpKind::DepthwiseDilatedConv1d { dilation } => self.conv1d_depthwise(inputs[0], inputs[1], *dilation),
            OpKind::ReduceMean { axis } => self.mean(inputs[0], *axis),
            OpKind::ReduceMax { axis } => self.max(inputs[0], *axis),
            OpKind::Concat { axis } => self.concat(inputs, *axis),
            OpKind::Slice { axis, start, len } => self.slice(inputs[0], *axis, *start, *len),
            OpKind::SelectByMask { mask } => self.select(mask, inputs[0], inputs[1]),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let dims = (va.dims2(), vb.dims2());
        let ((m, k), (k2, n)) = match dims {
            (Ok(x), Ok(y)) if x.1 == y.0 => (x, y),
            _ => return Err(contract!("matmul of {:?} by {:?}", va.shape(), vb.shape())),
        };
        debug_assert_eq!(k, k2);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, va.data(), false, vb.data(), false, T::zero(), &mut out);
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        ensure!(va.shape() == vb.shape(), "{name} of {:?} and {:?}", va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a vector to every row (the last axis) of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        let cols = vx.shape().last().copied().unwrap_or(1);
        ensure!(vr.numel() == cols && vx.rank() >= 1, "add_row of {:?} to {:?}", vr.shape(), vx.shape());
        let mut value = vx.clone();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (v, &b) in chunk.iter_mut().zip(vr.data()) {
                *v += b;
            }
        }
        let needs = self.any_grad(&[x, row]);
        Ok(self.push(value, Op::AddRow(x, row), needs))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, s), needs)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        unary(self, x, Op::Exp, |v| v.exp())
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        unary(self, x, Op::Softplus, softplus)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        unary(self, x, Op::Tanh, |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        unary(self, x, Op::Sigmoid, sigmoid)
    }

    /// `x / (rms(x) + 1e-6) ⊙ gain` along the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gain));
        let d = vx.shape().last().copied().unwrap_or(0);
        ensure!(d >= 1 && vg.numel() == d, "rms_norm of {:?} with gain {:?}", vx.shape(), vg.shape());
        let eps = T::lit(RMS_EPS);
        let mut out = vx.clone();
        let mut rms = Vec::with_capacity(vx.numel() / d);
        for row in out.data_mut().chunks_mut(d) {
            let r = (row.iter().map(|&v| v * v).sum::<T>() / T::lit(d as f64)).sqrt();
            let inv = T::one() / (r + eps);
            for (v, &g) in row.iter_mut().zip(vg.data()) {
                *v = *v * inv * g;
            }
            rms.push(r);
        }
        let needs = self.any_grad(&[x, gain]);
        Ok(self.push(out, Op::RmsNorm { x, gain, rms }, needs))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        ensure!(axis < vx.rank(), "softmax axis {axis} on shape {:?}", vx.shape());
        let (outer, len, inner) = axis_split(vx.shape(), axis);
        ensure!(len >= 1, "softmax over empty axis of shape {:?}", vx.shape());
        let mut out = vx.clone();
        let data = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| data[at(l)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for l in 0..len {
                    let e = (data[at(l)] - max).exp();
                    data[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    data[at(l)] /= total;
                }
            }
        }
        let needs = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, needs))
    }

    /// Per-channel 1D convolution along the length axis with dilation.
    pub fn conv1d_depthwise(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(kernel));
        let (batch, len, ch) = conv_dims(vx.shape())
            .ok_or_else(|| contract!("depthwise_dilated_conv1d input {:?} must be [l × c] or [b × l × c]", vx.shape()))?;
        let (kc, k) = vk
            .dims2()
            .map_err(|_| contract!("depthwise_dilated_conv1d kernel {:?} must be [c × k]", vk.shape()))?;
        ensure!(kc == ch && k >= 1, "depthwise_dilated_conv1d kernel {:?} for input {:?}", vk.shape(), vx.shape());
        ensure!(dilation >= 1, "depthwise_dilated_conv1d dilation must be ≥ 1");
        let mut out = vec![T::zero(); vx.numel()];
        conv_taps(batch, len, ch, k, dilation, |o, i, c, j| {
            out[o] += vk.data()[c * k + j] * vx.data()[i];
        });
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let needs = self.any_grad(&[x, kernel]);
        Ok(self.push(value, Op::Conv1d { x, kernel, dilation }, needs))
    }

    fn reduce(&mut self, name: &str, x: Var, axis: usize) -> Result<(Vec<usize>, (usize, usize, usize))> {
        let vx = self.value(x);
        ensure!(axis < vx.rank(), "{name} axis {axis} on shape {:?}", vx.shape());
        let split = axis_split(vx.shape(), axis);
        ensure!(split.1 >= 1, "{name} over empty axis of shape {:?}", vx.shape());
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        Ok((shape, split))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, (outer, len, inner)) = self.reduce("reduce_mean", x, axis)?;
        let vx = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let n = T::lit(len as f64);
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += vx[(o * len + l) * inner + i];
                }
            }
        }
        for v in out.iter_mut() {
            *v /= n;
        }
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mean { x, axis }, needs))
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, (outer, len, inner)) = self.reduce("reduce_max", x, axis)?;
        let vx = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for l in 1..len {
                    let at = (o * len + l) * inner + i;
                    if vx[at] > vx[best] {
                        best = at;
                    }
                }
                out.push(vx[best]);
                argmax.push(best);
            }
        }
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Max { x, argmax }, needs))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let needs = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        ensure!(!inputs.is_empty(), "concat of zero tensors");
        let first = self.value(inputs[0]).shape().to_vec();
        ensure!(axis < first.len(), "concat axis {axis} on shape {first:?}");
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            ensure!(compatible, "concat of {first:?} with {s:?} along axis {axis}");
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let vv = self.value(v);
                let len = vv.shape()[axis];
                out.extend_from_slice(&vv.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let needs = self.any_grad(inputs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis }, needs))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        ensure!(
            axis < vx.rank() && start + len <= vx.shape()[axis],
            "slice [{start}, {}) along axis {axis} of {:?}",
            start + len,
            vx.shape()
        );
        let (outer, full, inner) = axis_split(vx.shape(), axis);
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, needs))
    }

    /// `mask ? on : off`, elementwise. A mask with one entry per leading-axis
    /// row applies to whole rows.
    pub fn select(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        let (von, voff) = (self.value(on), self.value(off));
        ensure!(von.shape() == voff.shape(), "select between {:?} and {:?}", von.shape(), voff.shape());
        let mask = expand_mask(mask, von.shape())
            .ok_or_else(|| contract!("select mask of length {} for shape {:?}", mask.len(), von.shape()))?;
        let data = mask
            .iter()
            .zip(von.data().iter().zip(voff.data()))
            .map(|(&m, (&a, &b))| if m { a } else { b })
            .collect();
        let value = Tensor::new(von.shape().to_vec(), data)?;
        let needs = self.any_grad(&[on, off]);
        Ok(self.push(value, Op::Select { mask, on, off }, needs))
    }

    /// Rows of `x` (leading axis) at `index`, in order.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        ensure!(vx.rank() >= 1, "gather_rows on a rank-0 tensor");
        let rows = vx.shape()[0];
        let width = vx.numel() / rows.max(1);
        ensure!(index.iter().all(|&i| i < rows), "gather_rows index out of {rows} rows");
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            out.extend_from_slice(&vx.data()[i * width..(i + 1) * width]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = index.len();
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { x, index: index.to_vec() }, needs))
    }

    /// Places row `r` of `x` at row `index[r]` of a zero tensor with `rows` rows.
    pub fn scatter_rows(&mut self, x: Var, index: &[usize], rows: usize) -> Result<Var> {
        let vx = self.value(x);
        ensure!(vx.rank() >= 1 && vx.shape()[0] == index.len(), "scatter_rows of {:?} with {} indices", vx.shape(), index.len());
        let mut seen = vec![false; rows];
        for &i in index {
            ensure!(i < rows, "scatter_rows index {i} out of {rows} rows");
            ensure!(!seen[i], "scatter_rows duplicate index {i}");
            seen[i] = true;
        }
        let width = if index.is_empty() { vx.shape()[1..].iter().product() } else { vx.numel() / index.len() };
        let mut out = vec![T::zero(); rows * width];
        for (r, &i) in index.iter().enumerate() {
            out[i * width..(i + 1) * width].copy_from_slice(&vx.data()[r * width..(r + 1) * width]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = rows;
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scatter { x, index: index.to_vec() }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// `−log softmax(logits)[label]` for a logit vector of any shape.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let vl = self.value(logits);
        ensure!(label < vl.numel(), "label {label} outside {} classes", vl.numel());
        let max = vl.data().iter().copied().fold(T::neg_infinity(), T::max);
        let total: T = vl.data().iter().map(|&z| (z - max).exp()).sum();
        let lse = max + total.ln();
        let probs = vl.data().iter().map(|&z| (z - lse).exp()).collect();
        let loss = lse - vl.data()[label];
        let needs = self.any_grad(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label, probs }, needs))
    }

    /// Fused selective scan. `u: [len × channels]`, `delta: [len × groups]`,
    /// `a` negative rates, `b`, `c: [len × state_dim]`. Returns `[len × channels]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        mode: crate::ssm::SsmMode,
        method: Discretization,
        keep: Option<&[bool]>,
        exempt: Option<&[bool]>,
    ) -> Result<Var> {
        let (len, channels) = self.value(u).dims2()?;
        let (_, state_dim) = self.value(b).dims2()?;
        let dims = ScanDims { len, channels, state_dim, mode };
        let trace = selective_scan(&ScanInputs {
            dims,
            method,
            u: self.value(u).data(),
            delta: self.value(delta).data(),
            a: self.value(a).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            keep,
            exempt,
        })?;
        let value = Tensor::new(vec![len, channels], trace.outputs.clone())?;
        let record = ScanRecord {
            dims,
            method,
            keep: keep.map(<[bool]>::to_vec),
            exempt: exempt.map(<[bool]>::to_vec),
            trace,
        };
        let inputs = [u, delta, a, b, c];
        let needs = self.any_grad(&inputs);
        Ok(self.push(value, Op::Scan { inputs, record: Box::new(record) }, needs))
    }

    pub(super) fn propagate(&self, idx: usize, up: &[T], adj: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2()?;
                let n = vb.shape()[1];
                self.accumulate(adj, *a, |ga| T::gemm(m, n, k, up, false, vb.data(), true, T::one(), ga));
                self.accumulate(adj, *b, |gb| T::gemm(k, m, n, va.data(), true, up, false, T::one(), gb));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(adj, v, |g| add_into(g, up));
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(adj, *x, |g| add_into(g, up));
                let cols = self.value(*row).numel();
                self.accumulate(adj, *row, |g| {
                    for chunk in up.chunks(cols) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(adj, *a, |g| {
                    for ((g, &u), &y) in g.iter_mut().zip(up).zip(vb) {
                        *g += u * y;
                    }
                });
                self.accumulate(adj, *b, |g| {
                    for ((g, &u), &x) in g.iter_mut().zip(up).zip(va) {
                        *g += u * x;
                    }
                });
            }
            Op::Scale(x, s) => self.accumulate(adj, *x, |g| {
                for (g, &u) in g.iter_mut().zip(up) {
                    *g += u * *s;
                }
            }),
            Op::Exp(x) => self.elementwise_vjp(adj, *x, node.value.data(), up, |_, y| y),
            Op::Softplus(x) => self.elementwise_vjp(adj, *x, node.value.data(), up, |x, _| sigmoid(x)),
            Op::Tanh(x) => self.elementwise_vjp(adj, *x, node.value.data(), up, |_, y| T::one() - y * y),
            Op::Sigmoid(x) => self.elementwise_vjp(adj, *x, node.value.data(), up, |_, y| y * (T::one() - y)),
            Op::RmsNorm { x, gain, rms } => {
                let (vx, vg) = (self.value(*x).data(), self.value(*gain).data());
                let d = vg.len();
                let eps = T::lit(RMS_EPS);
                self.accumulate(adj, *x, |g| {
                    for (r, &rv) in rms.iter().enumerate() {
                        let s = rv + eps;
                        let row = r * d..(r + 1) * d;
                        let (xr, ur, gr) = (&vx[row.clone()], &up[row.clone()], &mut g[row]);
                        let dot: T = (0..d).map(|j| ur[j] * vg[j] * xr[j]).sum();
                        let coupling = if rv > T::zero() { dot / (s * s * rv * T::lit(d as f64)) } else { T::zero() };
                        for j in 0..d {
                            gr[j] += vg[j] * ur[j] / s - coupling * xr[j];
                        }
                    }
                });
                self.accumulate(adj, *gain, |g| {
                    for (r, &rv) in rms.iter().enumerate() {
                        let s = rv + eps;
                        for j in 0..d {
                            g[j] += up[r * d + j] * vx[r * d + j] / s;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                self.accumulate(adj, *x, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: T = (0..len).map(|l| up[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                g[at(l)] += y[at(l)] * (up[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, kernel, dilation } => {
                let (vx, vk) = (self.value(*x), self.value(*kernel));
                let (batch, len, ch) = conv_dims(vx.shape()).expect("checked in forward");
                let k = vk.shape()[1];
                self.accumulate(adj, *x, |g| {
                    conv_taps(batch, len, ch, k, *dilation, |o, i, c, j| g[i] += vk.data()[c * k + j] * up[o]);
                });
                self.accumulate(adj, *kernel, |g| {
                    conv_taps(batch, len, ch, k, *dilation, |o, i, c, j| g[c * k + j] += vx.data()[i] * up[o]);
                });
            }
            Op::Mean { x, axis } => {
                let (outer, len, inner) = axis_split(self.value(*x).shape(), *axis);
                let n = T::lit(len as f64);
                self.accumulate(adj, *x, |g| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                g[(o * len + l) * inner + i] += up[o * inner + i] / n;
                            }
                        }
                    }
                });
            }
            Op::Max { x, argmax, .. } => self.accumulate(adj, *x, |g| {
                for (&at, &u) in argmax.iter().zip(up) {
                    g[at] += u;
                }
            }),
            Op::Sum(x) => self.accumulate(adj, *x, |g| {
                for v in g.iter_mut() {
                    *v += up[0];
                }
            }),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.value(v).shape()[*axis];
                    self.accumulate(adj, v, |g| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut g[o * len * inner..(o + 1) * len * inner], &up[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = axis_split(self.value(*x).shape(), *axis);
                let len = node.value.shape()[*axis];
                self.accumulate(adj, *x, |g| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        add_into(&mut g[dst..dst + len * inner], &up[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Select { mask, on, off } => {
                self.accumulate(adj, *on, |g| {
                    for ((g, &u), &m) in g.iter_mut().zip(up).zip(mask) {
                        if m {
                            *g += u;
                        }
                    }
                });
                self.accumulate(adj, *off, |g| {
                    for ((g, &u), &m) in g.iter_mut().zip(up).zip(mask) {
                        if !m {
                            *g += u;
                        }
                    }
                });
            }
            Op::Gather { x, index } => {
                let width = node.value.numel() / index.len().max(1);
                self.accumulate(adj, *x, |g| {
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut g[i * width..(i + 1) * width], &up[r * width..(r + 1) * width]);
                    }
                });
            }
            Op::Scatter { x, index } => {
                let width = self.value(*x).numel() / index.len().max(1);
                self.accumulate(adj, *x, |g| {
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut g[r * width..(r + 1) * width], &up[i * width..(i + 1) * width]);
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(adj, *x, |g| add_into(g, up)),
            Op::CrossEntropy { logits, label, probs } => self.accumulate(adj, *logits, |g| {
                for (k, (g, &p)) in g.iter_mut().zip(probs).enumerate() {
                    let target = if k == *label { T::one() } else { T::zero() };
                    *g += up[0] * (p - target);
                }
            }),
            Op::Scan { inputs, record } => {
                let [u, delta, a, b, c] = *inputs;
                let inp = ScanInputs {
                    dims: record.dims,
                    method: record.method,
                    u: self.value(u).data(),
                    delta: self.value(delta).data(),
                    a: self.value(a).data(),
                    b: self.value(b).data(),
                    c: self.value(c).data(),
                    keep: record.keep.as_deref(),
                    exempt: record.exempt.as_deref(),
                };
                let grads = selective_scan_backward(&inp, &record.trace, up);
                self.accumulate(adj, u, |g| add_into(g, &grads.u));
                self.accumulate(adj, delta, |g| add_into(g, &grads.delta));
                self.accumulate(adj, a, |g| add_into(g, &grads.a));
                self.accumulate(adj, b, |g| add_into(g, &grads.b));
                self.accumulate(adj, c, |g| add_into(g, &grads.c));
            }
        }
        Ok(())
    }

    /// VJP of an elementwise map given `f'(x, y)` in terms of input and output.
    fn elementwise_vjp(&self, adj: &mut [Option<Vec<T>>], x: Var, y: &[T], up: &[T], deriv: impl Fn(T, T) -> T) {
        let vx = self.value(x).data();
        self.accumulate(adj, x, |g| {
            for (((g, &u), &xv), &yv) in g.iter_mut().zip(up).zip(vx).zip(y) {
                *g += u * deriv(xv, yv);
            }
        });
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn conv_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [l, c] => Some((1, l, c)),
        [b, l, c] => Some((b, l, c)),
        _ => None,
    }
}

/// Visits every in-range tap `(out_index, in_index, channel, tap)` of a
/// zero-padded dilated convolution centred at tap `(k − 1) / 2`.
fn conv_taps(batch: usize, len: usize, ch: usize, k: usize, dilation: usize, mut visit: impl FnMut(usize, usize, usize, usize)) {
    let centre = (k - 1) / 2;
    for b in 0..batch {
        for l in 0..len {
            for j in 0..k {
                let shift = (j as isize - centre as isize) * dilation as isize;
                let src = l as isize + shift;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let (o, i) = ((b * len + l) * ch, (b * len + src as usize) * ch);
                for c in 0..ch {
                    visit(o + c, i + c, c, j);
                }
            }
        }
    }
}

fn expand_mask(mask: &[bool], shape: &[usize]) -> Option<Vec<bool>> {
    let numel: usize = shape.iter().product();
    if mask.len() == numel {
        return Some(mask.to_vec());
    }
    let rows = *shape.first()?;
    if mask.len() != rows || rows == 0 {
        return None;
    }
    let width = numel / rows;
    Some(mask.iter().flat_map(|&m| std::iter::repeat_n(m, width)).collect())
}
