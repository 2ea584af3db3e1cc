use super::array::{broadcast_shape, for_each_broadcast};
use super::{AdError, Array};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv1d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize },
    ConvTranspose1d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize },
    GroupNorm { x: Var, weight: Var, bias: Var, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Mish(Var),
    Silu(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { x: Var, axis: usize, indices: Vec<usize> },
    Reshape(Var),
    Mean(Var),
    Sum(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, which is a topological order;
/// [`Tape::backward`] walks them once in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded value that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(msg: String) -> AdError {
    AdError::ShapeMismatch(msg)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

/// Unfolds `x: [batch, ch, len_in]` into rows `(batch, o)` for `o < len_out`
/// and columns `(ch, kk)`, holding `x[b, ch, o * stride + kk - padding]` or 0.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], bs: usize, ch: usize, len_in: usize, k: usize, stride: usize, padding: usize, len_out: usize) -> Vec<f64> {
    let cols = ch * k;
    let mut out = vec![0.0; bs * len_out * cols];
    for bi in 0..bs {
        for o in 0..len_out {
            let row = &mut out[(bi * len_out + o) * cols..(bi * len_out + o + 1) * cols];
            for c in 0..ch {
                let xrow = &x[(bi * ch + c) * len_in..(bi * ch + c + 1) * len_in];
                for kk in 0..k {
                    if let Some(i) = (o * stride + kk).checked_sub(padding).filter(|&i| i < len_in) {
                        row[c * k + kk] = xrow[i];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `[batch, ch, len_in]`.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], bs: usize, ch: usize, len_in: usize, k: usize, stride: usize, padding: usize, len_out: usize) -> Vec<f64> {
    let width = ch * k;
    let mut out = vec![0.0; bs * ch * len_in];
    for bi in 0..bs {
        for o in 0..len_out {
            let row = &cols[(bi * len_out + o) * width..(bi * len_out + o + 1) * width];
            for c in 0..ch {
                let orow = &mut out[(bi * ch + c) * len_in..(bi * ch + c + 1) * len_in];
                for kk in 0..k {
                    if let Some(i) = (o * stride + kk).checked_sub(padding).filter(|&i| i < len_in) {
                        orow[i] += row[c * k + kk];
                    }
                }
            }
        }
    }
    out
}

/// `[rows, cols]` to `[cols, rows]`.
fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `[batch, ch, len]` to `[batch * len, ch]`.
fn channels_last(a: &[f64], bs: usize, ch: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for bi in 0..bs {
        for c in 0..ch {
            for i in 0..len {
                out[(bi * len + i) * ch + c] = a[(bi * ch + c) * len + i];
            }
        }
    }
    out
}

/// Inverse of [`channels_last`].
fn channels_first(a: &[f64], bs: usize, ch: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for bi in 0..bs {
        for c in 0..ch {
            for i in 0..len {
                out[(bi * ch + c) * len + i] = a[(bi * len + i) * ch + c];
            }
        }
    }
    out
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], len: usize) {
    for (row, b) in out.chunks_mut(len).zip(bias.iter().cycle()) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(g: &[f64], co: usize, len: usize) -> Vec<f64> {
    let mut gb = vec![0.0; co];
    for (r, row) in g.chunks(len).enumerate() {
        gb[r % co] += row.iter().sum::<f64>();
    }
    gb
}

fn conv_out_len(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    (n + 2 * padding).checked_sub(k).map(|d| d / stride + 1)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, AdError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(va.shape(), vb.shape())?;
        let mut out = vec![0.0; shape.iter().product()];
        let (da, db) = (va.data(), vb.data());
        for_each_broadcast(va.shape(), vb.shape(), &shape, |o, i, j| out[o] = f(da[i], db[j]));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Array::new(shape, out)?, op, needs))
    }

    /// Elementwise sum with broadcasting over size-1 axes of equal-rank inputs.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product with broadcasting over size-1 axes of equal-rank inputs.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.scale(c);
        let needs = self.needs(a);
        self.push(v, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x + c);
        let needs = self.needs(a);
        self.push(v, Op::AddScalar(a), needs)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(mismatch(format!("matmul {:?} x {:?}", va.shape(), vb.shape())));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Array::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// 1-D convolution. `x: [batch, c_in, len]`, `w: [c_out, c_in, k]`, `b: [c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var, AdError> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if vx.ndim() != 3 || vw.ndim() != 3 || vx.shape()[1] != vw.shape()[1] || stride == 0 {
            return Err(mismatch(format!("conv1d x {:?} w {:?}", vx.shape(), vw.shape())));
        }
        let (bs, ci, n) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (co, k) = (vw.shape()[0], vw.shape()[2]);
        let no = conv_out_len(n, k, stride, padding)
            .ok_or_else(|| mismatch(format!("conv1d kernel {k} longer than padded input {n}")))?;
        let bias = match b {
            Some(b) => {
                let vb = &self.nodes[b.0].value;
                if vb.shape() != [co] {
                    return Err(mismatch(format!("conv1d bias {:?} for {co} channels", vb.shape())));
                }
                Some(vb.data())
            }
            None => None,
        };
        let cols = im2col(vx.data(), bs, ci, n, k, stride, padding, no);
        let yt = matmul_raw(&cols, &transpose(vw.data(), co, ci * k), bs * no, ci * k, co);
        let mut out = channels_first(&yt, bs, co, no);
        if let Some(bias) = bias {
            add_channel_bias(&mut out, bias, no);
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Array::new(vec![bs, co, no], out)?,
            Op::Conv1d { x, w, b, stride, padding },
            needs,
        ))
    }

    /// Transposed 1-D convolution. `x: [batch, c_in, len]`, `w: [c_in, c_out, k]`;
    /// output length `(len - 1) * stride - 2 * padding + k`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, AdError> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if vx.ndim() != 3 || vw.ndim() != 3 || vx.shape()[1] != vw.shape()[0] || stride == 0 {
            return Err(mismatch(format!("conv_transpose1d x {:?} w {:?}", vx.shape(), vw.shape())));
        }
        let (bs, ci, n) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (co, k) = (vw.shape()[1], vw.shape()[2]);
        let no = ((n - 1) * stride + k)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| mismatch("conv_transpose1d padding exceeds output".into()))?;
        let bias = match b {
            Some(b) => {
                let vb = &self.nodes[b.0].value;
                if vb.shape() != [co] {
                    return Err(mismatch(format!("conv_transpose1d bias {:?} for {co} channels", vb.shape())));
                }
                Some(vb.data())
            }
            None => None,
        };
        let xt = channels_last(vx.data(), bs, ci, n);
        let ycols = matmul_raw(&xt, vw.data(), bs * n, ci, co * k);
        let mut out = col2im(&ycols, bs, co, no, k, stride, padding, n);
        if let Some(bias) = bias {
            add_channel_bias(&mut out, bias, no);
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Array::new(vec![bs, co, no], out)?,
            Op::ConvTranspose1d { x, w, b, stride, padding },
            needs,
        ))
    }

    /// Group normalization over `[batch, channels, len]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, weight: Var, bias: Var, groups: usize, eps: f64) -> Result<Var, AdError> {
        let vx = &self.nodes[x.0].value;
        if vx.ndim() != 3 || groups == 0 || vx.shape()[1] % groups != 0 {
            return Err(mismatch(format!("group_norm {:?} with {groups} groups", vx.shape())));
        }
        let (bs, c, n) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (vw, vb) = (&self.nodes[weight.0].value, &self.nodes[bias.0].value);
        if vw.shape() != [c] || vb.shape() != [c] {
            return Err(mismatch(format!(
                "group_norm affine {:?}/{:?} for {c} channels",
                vw.shape(),
                vb.shape()
            )));
        }
        let cg = c / groups;
        let m = cg * n;
        let xd = vx.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; bs * groups];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..bs {
            for g in 0..groups {
                let start = (bi * c + g * cg) * n;
                let chunk = &xd[start..start + m];
                let mean = chunk.iter().sum::<f64>() / m as f64;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[bi * groups + g] = r;
                for (j, &v) in chunk.iter().enumerate() {
                    let ch = g * cg + j / n;
                    let xh = (v - mean) * r;
                    xhat[start + j] = xh;
                    out[start + j] = xh * vw.data()[ch] + vb.data()[ch];
                }
            }
        }
        let needs = self.needs(x) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            Array::new(vec![bs, c, n], out)?,
            Op::GroupNorm { x, weight, bias, groups, xhat, rstd },
            needs,
        ))
    }

    /// `x * tanh(softplus(x))`.
    pub fn mish(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(|v| v * softplus(v).tanh());
        let needs = self.needs(x);
        self.push(v, Op::Mish(x), needs)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(|v| v * sigmoid(v));
        let needs = self.needs(x);
        self.push(v, Op::Silu(x), needs)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AdError> {
        let first = self
            .nodes
            .get(inputs.first().ok_or_else(|| mismatch("concat of nothing".into()))?.0)
            .unwrap()
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(mismatch(format!("concat axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(mismatch(format!("concat {first:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let val = &self.nodes[v.0].value;
                let span = val.shape()[axis] * inner;
                out.extend_from_slice(&val.data()[o * span..(o + 1) * span]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let needs = inputs.iter().any(|v| self.needs(*v));
        Ok(self.push(Array::new(shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis }, needs))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, AdError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(mismatch(format!("slice {start}..{end} on axis {axis} of {shape:?}")));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let d = shape[axis];
        let data = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&data[(o * d + start) * inner..(o * d + end) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let needs = self.needs(x);
        Ok(self.push(Array::new(new_shape, out)?, Op::Slice { x, axis, start }, needs))
    }

    /// Selects `indices` (repeats allowed) along `axis`.
    pub fn gather(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var, AdError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(mismatch(format!("gather {indices:?} on axis {axis} of {shape:?}")));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let d = shape[axis];
        let data = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&data[(o * d + i) * inner..(o * d + i + 1) * inner]);
            }
        }
        let mut new_shape = shape;
        new_shape[axis] = indices.len();
        let needs = self.needs(x);
        Ok(self.push(
            Array::new(new_shape, out)?,
            Op::Gather { x, axis, indices: indices.to_vec() },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AdError> {
        let v = self.nodes[x.0].value.reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(v, Op::Reshape(x), needs))
    }

    /// Mean of all entries, as a one-element array.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let m = v.sum() / v.len() as f64;
        let needs = self.needs(x);
        self.push(Array::scalar(m), Op::Mean(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let needs = self.needs(x);
        self.push(Array::scalar(s), Op::Sum(x), needs)
    }

    /// Mean squared difference of two equal-shape arrays.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var, AdError> {
        let (p, t) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        if p.shape() != t.shape() {
            return Err(mismatch(format!("mse {:?} vs {:?}", p.shape(), t.shape())));
        }
        let n = p.len() as f64;
        let l = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Array::scalar(l), Op::Mse(pred, target), needs))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AdError> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(mismatch(format!("backward from non-scalar {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a broadcast gradient back down to `shape`.
    fn reduce_to(&self, g: &Array, shape: &[usize], scale: impl Fn(usize) -> f64) -> Array {
        let mut out = vec![0.0; shape.iter().product()];
        let gd = g.data();
        for_each_broadcast(shape, shape, g.shape(), |o, i, _| out[i] += gd[o] * scale(o));
        Array::new(shape.to_vec(), out).expect("reduced shape")
    }

    fn backprop(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) -> Result<(), AdError> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    let ga = self.reduce_to(g, val(*a).shape(), |_| 1.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = self.reduce_to(g, val(*b).shape(), |_| sign);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let out_shape = node.value.shape();
                let gd = g.data();
                if self.needs(*a) {
                    let mut ga = vec![0.0; va.len()];
                    for_each_broadcast(va.shape(), vb.shape(), out_shape, |o, i, j| ga[i] += gd[o] * vb.data()[j]);
                    self.accumulate(grads, *a, Array::new(va.shape().to_vec(), ga)?);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; vb.len()];
                    for_each_broadcast(va.shape(), vb.shape(), out_shape, |o, i, j| gb[j] += gd[o] * va.data()[i]);
                    self.accumulate(grads, *b, Array::new(vb.shape().to_vec(), gb)?);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.needs(*a) {
                    // dA = dC * B^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.data()[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                ga[i * k + kk] += gij * vb.data()[kk * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, *a, Array::new(vec![m, k], ga)?);
                }
                if self.needs(*b) {
                    // dB = A^T * dC
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = va.data()[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            let grow = &g.data()[i * n..(i + 1) * n];
                            for (dst, gv) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *dst += aik * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Array::new(vec![k, n], gb)?);
                }
            }
            Op::Conv1d { x, w, b, stride, padding } => {
                let (vx, vw) = (val(*x), val(*w));
                let (bs, ci, n) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let (co, k) = (vw.shape()[0], vw.shape()[2]);
                let no = node.value.shape()[2];
                let gt = channels_last(g.data(), bs, co, no);
                if self.needs(*x) {
                    let gcols = matmul_raw(&gt, vw.data(), bs * no, co, ci * k);
                    let gx = col2im(&gcols, bs, ci, n, k, *stride, *padding, no);
                    self.accumulate(grads, *x, Array::new(vx.shape().to_vec(), gx)?);
                }
                if self.needs(*w) {
                    let cols = im2col(vx.data(), bs, ci, n, k, *stride, *padding, no);
                    let gw = matmul_raw(&transpose(&gt, bs * no, co), &cols, co, bs * no, ci * k);
                    self.accumulate(grads, *w, Array::new(vw.shape().to_vec(), gw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.accumulate(grads, *b, Array::new(vec![co], bias_grad(g.data(), co, no))?);
                    }
                }
            }
            Op::ConvTranspose1d { x, w, b, stride, padding } => {
                let (vx, vw) = (val(*x), val(*w));
                let (bs, ci, n) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let (co, k) = (vw.shape()[1], vw.shape()[2]);
                let no = node.value.shape()[2];
                let gycols = im2col(g.data(), bs, co, no, k, *stride, *padding, n);
                if self.needs(*x) {
                    let gxt = matmul_raw(&gycols, &transpose(vw.data(), ci, co * k), bs * n, co * k, ci);
                    let gx = channels_first(&gxt, bs, ci, n);
                    self.accumulate(grads, *x, Array::new(vx.shape().to_vec(), gx)?);
                }
                if self.needs(*w) {
                    let xt = channels_last(vx.data(), bs, ci, n);
                    let gw = matmul_raw(&transpose(&xt, bs * n, ci), &gycols, ci, bs * n, co * k);
                    self.accumulate(grads, *w, Array::new(vw.shape().to_vec(), gw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.accumulate(grads, *b, Array::new(vec![co], bias_grad(g.data(), co, no))?);
                    }
                }
            }
            Op::GroupNorm { x, weight, bias, groups, xhat, rstd } => {
                let vx = val(*x);
                let (bs, c, n) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let cg = c / groups;
                let m = cg * n;
                let wd = val(*weight).data();
                let gd = g.data();
                let mut gx = vec![0.0; vx.len()];
                let mut gw = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let mut dxhat = vec![0.0; m];
                for bi in 0..bs {
                    for gi in 0..*groups {
                        let start = (bi * c + gi * cg) * n;
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..m {
                            let ch = gi * cg + j / n;
                            let dy = gd[start + j];
                            let xh = xhat[start + j];
                            gw[ch] += dy * xh;
                            gb[ch] += dy;
                            let d = dy * wd[ch];
                            dxhat[j] = d;
                            s1 += d;
                            s2 += d * xh;
                        }
                        let r = rstd[bi * groups + gi] / m as f64;
                        for j in 0..m {
                            gx[start + j] = r * (m as f64 * dxhat[j] - s1 - xhat[start + j] * s2);
                        }
                    }
                }
                self.accumulate(grads, *x, Array::new(vx.shape().to_vec(), gx)?);
                self.accumulate(grads, *weight, Array::new(vec![c], gw)?);
                self.accumulate(grads, *bias, Array::new(vec![c], gb)?);
            }
            Op::Mish(x) => {
                let d = val(*x).zip_map(g, |v, gv| {
                    let sp = softplus(v);
                    let t = sp.tanh();
                    gv * (t + v * (1.0 - t * t) * sigmoid(v))
                })?;
                self.accumulate(grads, *x, d);
            }
            Op::Silu(x) => {
                let d = val(*x).zip_map(g, |v, gv| {
                    let s = sigmoid(v);
                    gv * s * (1.0 + v * (1.0 - s))
                })?;
                self.accumulate(grads, *x, d);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, inner) = outer_inner(shape, *axis);
                let total = shape[*axis];
                let mut offset = 0;
                for v in inputs {
                    let vs = val(*v).shape();
                    let d = vs[*axis];
                    if self.needs(*v) {
                        let mut part = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            part.extend_from_slice(&g.data()[s..s + d * inner]);
                        }
                        self.accumulate(grads, *v, Array::new(vs.to_vec(), part)?);
                    }
                    offset += d;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape();
                let (outer, inner) = outer_inner(xs, *axis);
                let (d, len) = (xs[*axis], node.value.shape()[*axis]);
                let mut gx = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    gx[(o * d + start) * inner..(o * d + start + len) * inner].copy_from_slice(src);
                }
                self.accumulate(grads, *x, Array::new(xs.to_vec(), gx)?);
            }
            Op::Gather { x, axis, indices } => {
                let xs = val(*x).shape();
                let (outer, inner) = outer_inner(xs, *axis);
                let d = xs[*axis];
                let mut gx = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let src = &g.data()[(o * indices.len() + j) * inner..(o * indices.len() + j + 1) * inner];
                        for (dst, s) in gx[(o * d + i) * inner..(o * d + i + 1) * inner].iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                }
                self.accumulate(grads, *x, Array::new(xs.to_vec(), gx)?);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.reshape(val(*x).shape())?),
            Op::Mean(x) => {
                let v = val(*x);
                self.accumulate(grads, *x, Array::full(v.shape(), g.item() / v.len() as f64));
            }
            Op::Sum(x) => {
                let v = val(*x);
                self.accumulate(grads, *x, Array::full(v.shape(), g.item()));
            }
            Op::Mse(p, t) => {
                let (vp, vt) = (val(*p), val(*t));
                let c = 2.0 * g.item() / vp.len() as f64;
                let d = vp.zip_map(vt, |a, b| c * (a - b))?;
                if self.needs(*t) {
                    self.accumulate(grads, *t, d.scale(-1.0));
                }
                self.accumulate(grads, *p, d);
            }
        }
        Ok(())
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += aik * bv;
            }
        }
    }
    out
}
