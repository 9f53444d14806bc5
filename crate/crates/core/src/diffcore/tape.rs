use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the input already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct Lerp {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn lerp_table(src: usize, dst: usize) -> Vec<Lerp> {
    (0..dst)
        .map(|o| {
            let pos = if dst > 1 { o as f64 * (src - 1) as f64 / (dst - 1) as f64 } else { 0.0 };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Lerp { lo, hi, frac: pos - lo as f64 }
        })
        .collect()
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom, cols: Vec<T> },
    Linear { input: Var, weight: Var, bias: Var },
    LeakyRelu { input: Var, slope: T },
    Softmax { input: Var },
    Upsample { input: Var, rows: Vec<Lerp>, cols: Vec<Lerp> },
    NegLogPick { input: Var, picks: Vec<usize>, scale: T },
    ClassPool { input: Var, labels: Vec<u8>, counts: Vec<usize> },
    Row { input: Var, row: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Softmax { .. } => "softmax_channel",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::NegLogPick { .. } => "neg_log_pick",
            Op::ClassPool { .. } => "class_pool",
            Op::Row { .. } => "row",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient, kept only for leaves that require it.
    grad: Option<Tensor<T>>,
}

/// Record of executed operations, replayed in reverse by [`Tape::backward`].
///
/// Leaves are registered with [`Tape::leaf`]; every other method records one
/// operation and returns a handle to its output. A node requires a gradient
/// iff one of its inputs does, so constants and frozen parameters cost nothing
/// on the way back.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Handles of every recorded value, in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Accumulated gradient of a leaf; `None` until a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Cross-correlation of a `[cin, h, w]` input with a `[cout, cin, kh, kw]` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("conv2d input must be [cin,h,w], got {xs:?}")));
        }
        if ks.len() != 4 {
            return Err(Error::Shape(format!("conv2d kernel must be [cout,cin,kh,kw], got {ks:?}")));
        }
        if ks[1] != xs[0] {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {xs:?} has {} channels, kernel {ks:?} expects {}",
                xs[0], ks[1]
            )));
        }
        if bs != [ks[0]] {
            return Err(Error::Shape(format!("conv2d bias {bs:?} does not match cout {}", ks[0])));
        }
        let (h, w) = (xs[1], xs[2]);
        let (kh, kw) = (ks[2], ks[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
            )));
        }
        let geom = ConvGeom {
            cin: xs[0],
            h,
            w,
            cout: ks[0],
            kh,
            kw,
            stride,
            padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            im2col(self.value(input).data(), &geom)
        };
        let p = geom.positions();
        let mut out = vec![T::zero(); geom.cout * p];
        {
            let colmat = if geom.is_pointwise() { self.value(input).data() } else { &cols[..] };
            gemm(false, false, geom.cout, geom.patch(), p, self.value(kernel).data(), colmat, &mut out, false);
        }
        let b = self.value(bias).data();
        for (co, row) in out.chunks_exact_mut(p).enumerate() {
            let bv = b[co];
            row.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::new(vec![geom.cout, geom.ho, geom.wo], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom, cols }, &[input, kernel, bias]))
    }

    /// Affine map `weight * input + bias` for a vector input.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(Error::Shape(format!(
                "linear expects input [din] and weight [dout,din]; got input {xs:?}, weight {ws:?}"
            )));
        }
        if bs != [ws[0]] {
            return Err(Error::Shape(format!("linear bias {bs:?} does not match dout {}", ws[0])));
        }
        let mut out = self.value(bias).data().to_vec();
        gemm(false, false, ws[0], ws[1], 1, self.value(weight).data(), self.value(input).data(), &mut out, true);
        let value = Tensor::new(vec![ws[0]], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    /// Elementwise `max(x, slope * x)`; the derivative at exactly 0 is `slope`.
    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Result<Var> {
        if !(slope >= T::zero() && slope < T::one()) {
            return Err(Error::InvalidArgument(format!("leaky_relu slope {slope} outside [0,1)")));
        }
        let value = self.value(input).map(|x| if x > T::zero() { x } else { slope * x });
        Ok(self.push(value, Op::LeakyRelu { input, slope }, &[input]))
    }

    /// Softmax over the leading (channel) axis at every trailing location.
    pub fn softmax_channel(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        if shape.is_empty() || shape[0] == 0 {
            return Err(Error::Shape(format!("softmax_channel needs c >= 1, got {shape:?}")));
        }
        let c = shape[0];
        let l = x.numel() / c;
        let xd = x.data();
        let mut out = vec![T::zero(); xd.len()];
        for loc in 0..l {
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(xd[k * l + loc]);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (xd[k * l + loc] - m).exp();
                out[k * l + loc] = e;
                z += e;
            }
            for k in 0..c {
                out[k * l + loc] /= z;
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { input }, &[input]))
    }

    /// Bilinear resize of `[c, h, w]` to `[c, out_h, out_w]` with aligned corners.
    pub fn bilinear_upsample(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("bilinear_upsample expects [c,h,w], got {shape:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Shape("bilinear_upsample output size must be nonzero".into()));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if h == 0 || w == 0 {
            return Err(Error::Shape("bilinear_upsample input is empty".into()));
        }
        if out_h < h || out_w < w {
            return Err(Error::Shape(format!(
                "bilinear_upsample only enlarges: {h}x{w} -> {out_h}x{out_w}"
            )));
        }
        let rows = lerp_table(h, out_h);
        let cols = lerp_table(w, out_w);
        let xd = self.value(input).data();
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            let src = &xd[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (oy, ry) in rows.iter().enumerate() {
                let fy = T::lit(ry.frac);
                for (ox, rx) in cols.iter().enumerate() {
                    let fx = T::lit(rx.frac);
                    let a = src[ry.lo * w + rx.lo];
                    let b = src[ry.lo * w + rx.hi];
                    let cc = src[ry.hi * w + rx.lo];
                    let d = src[ry.hi * w + rx.hi];
                    let top = a + (b - a) * fx;
                    let bot = cc + (d - cc) * fx;
                    dst[oy * out_w + ox] = top + (bot - top) * fy;
                }
            }
        }
        let value = Tensor::new(vec![c, out_h, out_w], out)?;
        Ok(self.push(value, Op::Upsample { input, rows, cols }, &[input]))
    }

    /// `scale * sum_i -ln(max(x[picks[i]], LOG_EPS))` over flat indices of `input`.
    ///
    /// This is the common core of every cross-entropy style loss: the caller
    /// chooses which entries (channel, location) are scored and how the sum is
    /// normalized. An empty pick list yields zero.
    pub fn neg_log_pick(&mut self, input: Var, picks: Vec<usize>, scale: T) -> Result<Var> {
        let x = self.value(input);
        if let Some(&bad) = picks.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::Shape(format!(
                "neg_log_pick index {bad} out of range for {} values",
                x.numel()
            )));
        }
        let eps = T::lit(LOG_EPS);
        let xd = x.data();
        let total: T = picks.iter().map(|&i| -(if xd[i] < eps { eps } else { xd[i] }).ln()).sum();
        let value = Tensor::scalar(scale * total);
        Ok(self.push(value, Op::NegLogPick { input, picks, scale }, &[input]))
    }

    /// Per-class mean of `[n, h, w]` features over pixels labeled with that class.
    ///
    /// Returns a `[num_classes, n]` tensor and the pixel count of each class.
    /// Labels `>= num_classes` (the ignore index among them) select nothing;
    /// rows of classes with no pixels are zero.
    pub fn class_pool(&mut self, input: Var, labels: &[u8], num_classes: usize) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("class_pool expects [n,h,w], got {shape:?}")));
        }
        let (n, l) = (shape[0], shape[1] * shape[2]);
        if labels.len() != l {
            return Err(Error::Shape(format!(
                "class_pool label map has {} entries, feature map has {l} locations",
                labels.len()
            )));
        }
        let mut counts = vec![0usize; num_classes];
        for &y in labels {
            if (y as usize) < num_classes {
                counts[y as usize] += 1;
            }
        }
        let xd = self.value(input).data();
        let mut out = vec![T::zero(); num_classes * n];
        for (loc, &y) in labels.iter().enumerate() {
            let k = y as usize;
            if k >= num_classes {
                continue;
            }
            for ch in 0..n {
                out[k * n + ch] += xd[ch * l + loc];
            }
        }
        for k in 0..num_classes {
            if counts[k] > 0 {
                let inv = T::one() / T::lit(counts[k] as f64);
                out[k * n..(k + 1) * n].iter_mut().for_each(|v| *v *= inv);
            }
        }
        let value = Tensor::new(vec![num_classes, n], out)?;
        let var = self.push(
            value,
            Op::ClassPool { input, labels: labels.to_vec(), counts: counts.clone() },
            &[input],
        );
        Ok((var, counts))
    }

    /// Row `row` of a `[rows, n]` matrix as an `[n]` vector.
    pub fn row(&mut self, input: Var, row: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 || row >= shape[0] {
            return Err(Error::Shape(format!("row {row} of tensor {shape:?}")));
        }
        let n = shape[1];
        let data = self.value(input).data()[row * n..(row + 1) * n].to_vec();
        let value = Tensor::new(vec![n], data)?;
        Ok(self.push(value, Op::Row { input, row }, &[input]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let bd = self.value(b).data();
        let data = self.value(a).data().iter().zip(bd).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Sums scalars; an empty list yields a zero constant.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter();
        let Some(&first) = it.next() else {
            return Ok(self.constant(Tensor::scalar(T::zero())));
        };
        let mut acc = first;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    fn check_same(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op} operands differ in shape: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients of leaves created with `requires_grad` are added to whatever
    /// they already hold, so two calls accumulate. Returns the recorded
    /// operations in the order they were visited.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Var>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::InvalidArgument(
                "loss does not depend on any leaf that requires a gradient".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut visited = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                let shape = node.value.shape().to_vec();
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(Tensor::new(shape, g)?),
                }
                continue;
            }
            visited.push(Var(idx));
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(visited)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Conv2d { input, kernel, bias, geom, cols } => {
                let p = geom.positions();
                if self.wants(*bias) {
                    let gb = slot(grads, *bias, geom.cout);
                    for (co, row) in g.chunks_exact(p).enumerate() {
                        gb[co] += row.iter().copied().sum::<T>();
                    }
                }
                let colmat = if geom.is_pointwise() { self.value(*input).data() } else { &cols[..] };
                if self.wants(*kernel) {
                    let gk = slot(grads, *kernel, geom.cout * geom.patch());
                    gemm(false, true, geom.cout, p, geom.patch(), g, colmat, gk, true);
                }
                if self.wants(*input) {
                    let kd = self.value(*kernel).data();
                    if geom.is_pointwise() {
                        let gx = slot(grads, *input, geom.cin * p);
                        gemm(true, false, geom.patch(), geom.cout, p, kd, g, gx, true);
                    } else {
                        let mut dcols = vec![T::zero(); geom.patch() * p];
                        gemm(true, false, geom.patch(), geom.cout, p, kd, g, &mut dcols, false);
                        let gx = slot(grads, *input, geom.cin * geom.h * geom.w);
                        col2im_add(&dcols, geom, gx);
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let ws = self.shape(*weight);
                let (dout, din) = (ws[0], ws[1]);
                if self.wants(*bias) {
                    let gb = slot(grads, *bias, dout);
                    gb.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
                if self.wants(*weight) {
                    let x = self.value(*input).data();
                    let gw = slot(grads, *weight, dout * din);
                    gemm(false, false, dout, 1, din, g, x, gw, true);
                }
                if self.wants(*input) {
                    let wd = self.value(*weight).data();
                    let gx = slot(grads, *input, din);
                    gemm(true, false, din, dout, 1, wd, g, gx, true);
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input).data();
                let gx = slot(grads, *input, x.len());
                for ((a, &xv), &gv) in gx.iter_mut().zip(x).zip(g) {
                    *a += if xv > T::zero() { gv } else { *slope * gv };
                }
            }
            Op::Softmax { input } => {
                let y = node.value.data();
                let c = node.value.shape()[0];
                let l = y.len() / c;
                let gx = slot(grads, *input, y.len());
                for loc in 0..l {
                    let dot: T = (0..c).map(|k| y[k * l + loc] * g[k * l + loc]).sum();
                    for k in 0..c {
                        let i = k * l + loc;
                        gx[i] += y[i] * (g[i] - dot);
                    }
                }
            }
            Op::Upsample { input, rows, cols } => {
                let s = self.shape(*input);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (rows.len(), cols.len());
                let gx = slot(grads, *input, c * h * w);
                for ch in 0..c {
                    let src = &g[ch * oh * ow..(ch + 1) * oh * ow];
                    let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for (oy, ry) in rows.iter().enumerate() {
                        let fy = T::lit(ry.frac);
                        for (ox, rx) in cols.iter().enumerate() {
                            let fx = T::lit(rx.frac);
                            let gv = src[oy * ow + ox];
                            let top = gv * (T::one() - fy);
                            let bot = gv * fy;
                            dst[ry.lo * w + rx.lo] += top * (T::one() - fx);
                            dst[ry.lo * w + rx.hi] += top * fx;
                            dst[ry.hi * w + rx.lo] += bot * (T::one() - fx);
                            dst[ry.hi * w + rx.hi] += bot * fx;
                        }
                    }
                }
            }
            Op::NegLogPick { input, picks, scale } => {
                let x = self.value(*input).data();
                let eps = T::lit(LOG_EPS);
                let gx = slot(grads, *input, x.len());
                let gs = g[0] * *scale;
                for &i in picks {
                    if x[i] > eps {
                        gx[i] -= gs / x[i];
                    }
                }
            }
            Op::ClassPool { input, labels, counts } => {
                let s = self.shape(*input);
                let (n, l) = (s[0], s[1] * s[2]);
                let gx = slot(grads, *input, n * l);
                for (loc, &y) in labels.iter().enumerate() {
                    let k = y as usize;
                    if k >= counts.len() || counts[k] == 0 {
                        continue;
                    }
                    let inv = T::one() / T::lit(counts[k] as f64);
                    for ch in 0..n {
                        gx[ch * l + loc] += g[k * n + ch] * inv;
                    }
                }
            }
            Op::Row { input, row } => {
                let s = self.shape(*input);
                let n = s[1];
                let gx = slot(grads, *input, s[0] * n);
                gx[row * n..(row + 1) * n].iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let gx = slot(grads, v, g.len());
                        gx.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(v) {
                        let od = self.value(other).data();
                        let gx = slot(grads, v, g.len());
                        for ((x, &gv), &o) in gx.iter_mut().zip(g).zip(od) {
                            *x += gv * o;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                let gx = slot(grads, *a, g.len());
                gx.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                let gx = slot(grads, *a, n);
                gx.iter_mut().for_each(|x| *x += g[0]);
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let mut cols = vec![T::zero(); g.patch() * p];
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.cin {
        let plane = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}
