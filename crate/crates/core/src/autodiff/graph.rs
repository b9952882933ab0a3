use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Shift(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    ChannelBias(Var, Var),
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    Relu(Var),
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    LogSoftmax(Var),
    Exp(Var),
    LogClamped(Var, f64),
    TotalVariation(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of operations for one forward pass, differentiated in reverse.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and `backward` simply walks it from the end. Leaves
/// created with `requires_grad = false` (constants, detached values, frozen
/// parameters) never receive a gradient.
///
/// `backward` may be called once per graph. A second call returns a
/// contract error until [`Graph::reset_grads`] is called; gradients are never
/// silently accumulated across calls.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    reject_nan: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// When enabled, `log_softmax` rejects NaN inputs with an
    /// [`Error::InvalidInput`] instead of propagating them.
    pub fn with_nan_check(mut self, enabled: bool) -> Self {
        self.reject_nan = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    /// Gradient of the last `backward` target with respect to `v`, if `v`
    /// was reachable and requires grad.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a).map(|v| v * factor);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, offset: f64) -> Var {
        let t = self.value(a).map(|v| v + offset);
        let rg = self.rg(&[a]);
        self.push(t, Op::Shift(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Row-wise bias add: `x[b×n] + bias[n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {sb:?} does not match rows of {sx:?}"),
            ));
        }
        let n = sx[1];
        let bv = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        let t = Tensor::from_parts(sx.to_vec(), data);
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    /// Per-channel bias add: `x[b×c×h×w] + bias[c]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 4 || sb != [sx[1]] {
            return Err(Error::dim(
                "add_channel_bias",
                format!("bias {sb:?} does not match channels of {sx:?}"),
            ));
        }
        let (c, hw) = (sx[1], sx[2] * sx[3]);
        let bv = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[(i / hw) % c])
            .collect();
        let t = Tensor::from_parts(sx.to_vec(), data);
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::ChannelBias(x, bias), rg))
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// `x` is `[b×c×h×w]`, `kernel` is `[o×c×kh×kw]`; the output is
    /// `[b×o×oh×ow]` with `oh = (h + 2·pad − kh) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input {sx:?} incompatible with kernel {sk:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be at least 1"));
        }
        let (h, w, kh, kw) = (sx[2], sx[3], sk[2], sk[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let geom = ConvGeometry {
            channels: sx[1],
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let (batch, out_c) = (sx[0], sk[0]);
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_size = geom.channels * h * w;
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![0.0; batch * out_c * cols];
        let mut col = vec![0.0; rows * cols];
        for b in 0..batch {
            kernels::im2col(&xv[b * in_size..(b + 1) * in_size], &geom, &mut col);
            kernels::matmul_acc(
                kv,
                &col,
                &mut out[b * out_c * cols..(b + 1) * out_c * cols],
                out_c,
                rows,
                cols,
            );
        }
        let t = Tensor::from_parts(vec![batch, out_c, geom.out_h, geom.out_w], out);
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(t, Op::Conv2d { x, kernel, geom }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// Non-overlapping max pooling with a square window of `size`.
    /// Ties resolve to the first element in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(Error::dim(
                "max_pool2d",
                format!("window {size} does not fit input {s:?}"),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / size, w / size);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = base + oi * size * w + oj * size;
                    for di in 0..size {
                        for dj in 0..size {
                            let idx = base + (oi * size + di) * w + oj * size + dj;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::from_parts(vec![s[0], s[1], oh, ow], out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaxPool2d { x, argmax }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(t, Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Collapses every axis after the first: `[b×...] → [b×rest]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let b = s[0];
        let rest = s[1..].iter().product();
        self.reshape(a, &[b, rest])
    }

    /// Stable row-wise `x − max(x) − log Σ exp(x − max(x))` on `[b×c]`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[1] < 2 {
            return Err(Error::dim(
                "log_softmax",
                format!("expected [batch, classes>=2], got {s:?}"),
            ));
        }
        let xv = self.value(a);
        if self.reject_nan && xv.data().iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("NaN in log_softmax input".into()));
        }
        let c = s[1];
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&v| v - m - lse));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(s, out), Op::LogSoftmax(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(t, Op::Exp(a), rg)
    }

    /// `log(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a).map(|v| v.max(floor).ln());
        let rg = self.rg(&[a]);
        self.push(t, Op::LogClamped(a, floor), rg)
    }

    /// Sum of squared differences between vertically and horizontally
    /// adjacent pixels of a `[b×c×h×w]` tensor.
    pub fn total_variation(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(
                "total_variation",
                format!("expected [b, c, h, w], got {s:?}"),
            ));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let xv = self.value(a).data();
        let mut acc = 0.0;
        for p in 0..planes {
            let img = &xv[p * h * w..(p + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let v = img[i * w + j];
                    if i + 1 < h {
                        let d = img[(i + 1) * w + j] - v;
                        acc += d * d;
                    }
                    if j + 1 < w {
                        let d = img[i * w + j + 1] - v;
                        acc += d * d;
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(acc), Op::TotalVariation(a), rg))
    }

    /// Copies `a` into a new leaf that never receives gradient.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.push(t, Op::Leaf, false)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice without reset_grads".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        let slot = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape));
        contribution(slot.data_mut());
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) {
        let gd = g.data();
        // Temporarily move the op out so node values can be borrowed while
        // gradient slots are mutated.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, |d| add_into(d, gd));
                self.accumulate(*b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |d| add_into(d, gd));
                self.accumulate(*b, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.data().to_vec();
                let av = self.nodes[a.0].value.data().to_vec();
                self.accumulate(*a, |d| {
                    for ((x, &gg), &bb) in d.iter_mut().zip(gd).zip(&bv) {
                        *x += gg * bb;
                    }
                });
                self.accumulate(*b, |d| {
                    for ((x, &gg), &aa) in d.iter_mut().zip(gd).zip(&av) {
                        *x += gg * aa;
                    }
                });
            }
            Op::Scale(a, f) => {
                let f = *f;
                self.accumulate(*a, |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += f * y));
            }
            Op::Shift(a) | Op::Reshape(a) => {
                self.accumulate(*a, |d| add_into(d, gd));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    self.accumulate(*a, |d| kernels::matmul_a_bt_acc(gd, &bv, d, m, k, n));
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data().to_vec();
                    self.accumulate(*b, |d| kernels::matmul_at_b_acc(&av, gd, d, m, k, n));
                }
            }
            Op::AddBias(x, bias) => {
                let n = self.shape(*bias)[0];
                self.accumulate(*x, |d| add_into(d, gd));
                self.accumulate(*bias, |d| {
                    for row in gd.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::ChannelBias(x, bias) => {
                let s = self.shape(*x).to_vec();
                let (c, hw) = (s[1], s[2] * s[3]);
                self.accumulate(*x, |d| add_into(d, gd));
                self.accumulate(*bias, |d| {
                    for (i, plane) in gd.chunks(hw).enumerate() {
                        d[i % c] += plane.iter().sum::<f64>();
                    }
                });
            }
            Op::Conv2d { x, kernel, geom } => {
                let geom = *geom;
                let batch = self.shape(*x)[0];
                let out_c = self.shape(*kernel)[0];
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let in_size = geom.channels * geom.height * geom.width;
                let x_rg = self.nodes[x.0].requires_grad;
                let k_rg = self.nodes[kernel.0].requires_grad;
                let mut dk = vec![0.0; out_c * rows];
                let mut dx = vec![0.0; if x_rg { batch * in_size } else { 0 }];
                {
                    let xv = self.nodes[x.0].value.data();
                    let kv = self.nodes[kernel.0].value.data();
                    let mut col = vec![0.0; rows * cols];
                    let mut dcol = vec![0.0; rows * cols];
                    for b in 0..batch {
                        let gb = &gd[b * out_c * cols..(b + 1) * out_c * cols];
                        if k_rg {
                            kernels::im2col(&xv[b * in_size..(b + 1) * in_size], &geom, &mut col);
                            kernels::matmul_a_bt_acc(gb, &col, &mut dk, out_c, rows, cols);
                        }
                        if x_rg {
                            dcol.iter_mut().for_each(|v| *v = 0.0);
                            kernels::matmul_at_b_acc(kv, gb, &mut dcol, out_c, rows, cols);
                            kernels::col2im_acc(
                                &dcol,
                                &geom,
                                &mut dx[b * in_size..(b + 1) * in_size],
                            );
                        }
                    }
                }
                self.accumulate(*kernel, |d| add_into(d, &dk));
                self.accumulate(*x, |d| add_into(d, &dx));
            }
            Op::Relu(a) => {
                let av = self.nodes[a.0].value.data().to_vec();
                self.accumulate(*a, |d| {
                    for ((x, &gg), &v) in d.iter_mut().zip(gd).zip(&av) {
                        if v > 0.0 {
                            *x += gg;
                        }
                    }
                });
            }
            Op::MaxPool2d { x, argmax } => {
                self.accumulate(*x, |d| {
                    for (&src, &gg) in argmax.iter().zip(gd) {
                        d[src] += gg;
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.accumulate(*a, |d| d.iter_mut().for_each(|x| *x += g0));
            }
            Op::Mean(a) => {
                let g0 = gd[0] / self.nodes[a.0].value.numel() as f64;
                self.accumulate(*a, |d| d.iter_mut().for_each(|x| *x += g0));
            }
            Op::LogSoftmax(a) => {
                // dx = g − softmax · Σ g   (row-wise)
                let out = self.nodes[idx].value.data().to_vec();
                let c = self.shape(*a)[1];
                self.accumulate(*a, |d| {
                    for ((drow, grow), orow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(out.chunks(c)) {
                        let gsum: f64 = grow.iter().sum();
                        for ((x, &gg), &o) in drow.iter_mut().zip(grow).zip(orow) {
                            *x += gg - o.exp() * gsum;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let out = self.nodes[idx].value.data().to_vec();
                self.accumulate(*a, |d| {
                    for ((x, &gg), &o) in d.iter_mut().zip(gd).zip(&out) {
                        *x += gg * o;
                    }
                });
            }
            Op::LogClamped(a, floor) => {
                let floor = *floor;
                let av = self.nodes[a.0].value.data().to_vec();
                self.accumulate(*a, |d| {
                    for ((x, &gg), &v) in d.iter_mut().zip(gd).zip(&av) {
                        if v > floor {
                            *x += gg / v;
                        }
                    }
                });
            }
            Op::TotalVariation(a) => {
                let s = self.shape(*a).to_vec();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let av = self.nodes[a.0].value.data().to_vec();
                let g0 = gd[0];
                self.accumulate(*a, |d| {
                    for p in 0..planes {
                        let off = p * h * w;
                        for i in 0..h {
                            for j in 0..w {
                                let here = off + i * w + j;
                                if i + 1 < h {
                                    let there = here + w;
                                    let diff = 2.0 * g0 * (av[there] - av[here]);
                                    d[there] += diff;
                                    d[here] -= diff;
                                }
                                if j + 1 < w {
                                    let there = here + 1;
                                    let diff = 2.0 * g0 * (av[there] - av[here]);
                                    d[there] += diff;
                                    d[here] -= diff;
                                }
                            }
                        }
                    }
                });
            }
        }
        self.nodes[idx].op = op;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
