//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] is a define-by-run tape: every operation appends a node
//! holding its forward value, and [`Graph::backward`] walks the tape in
//! reverse to accumulate gradients. All values are owned, standard-layout
//! `ArrayD<f64>`, which keeps every kernel deterministic on CPU.
//!
//! Convolutions are lowered to a single matrix multiply per call (im2col),
//! so the heavy lifting goes through one dgemm and stays fast enough for
//! desk-scale training without an external ML framework.

use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};

use crate::error::{Error, Result};

pub type NodeId = usize;

enum Op {
    Leaf,
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Clamp(NodeId, f64, f64),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatChannels(Vec<NodeId>),
    UpsampleNearest2(NodeId),
    Reshape(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        // im2col buffer cached from the forward pass; reused for the
        // weight/input gradients.
        cols: Array2<f64>,
    },
    SumAll(NodeId),
    /// sum(|pred - target| * weight) / divisor
    MaskedL1 {
        pred: NodeId,
        target: ArrayD<f64>,
        weight: ArrayD<f64>,
        divisor: f64,
    },
    /// mean over elements of -(l*ln(p) + (1-l)*ln(1-p)), p clamped to
    /// [eps, 1-eps].
    BceWithLabel {
        pred: NodeId,
        label: f64,
        eps: f64,
    },
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Define-by-run computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, needs_grad: bool, op: Op) -> NodeId {
        // Kernels index node buffers directly, so every stored tensor is
        // standard layout. Some ndarray ops (e.g. dot with a transposed
        // single-column operand) hand back other layouts.
        self.nodes.push(Node {
            value: into_standard(value),
            grad: None,
            needs_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Constant input; gradients do not flow into it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Differentiable leaf (parameters, or inputs under a gradient check).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.len(), 1);
        v.iter().next().copied().unwrap()
    }

    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.nodes[id].grad.as_ref()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    // ---- elementwise ----

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| a.max(0.0));
        self.push(v, self.needs(x), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| if a > 0.0 { a } else { slope * a });
        self.push(v, self.needs(x), Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(f64::tanh);
        self.push(v, self.needs(x), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| 1.0 / (1.0 + (-a).exp()));
        self.push(v, self.needs(x), Op::Sigmoid(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| a.clamp(lo, hi));
        self.push(v, self.needs(x), Op::Clamp(x, lo, hi))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "add: shape mismatch"
        );
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, self.needs(a) || self.needs(b), Op::Add(a, b))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| a * k);
        self.push(v, self.needs(x), Op::Scale(x, k))
    }

    // ---- structural ----

    /// Concatenate along the channel axis (axis 1) of `[n, c, h, w]` tensors.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let views: Vec<_> = xs.iter().map(|&id| self.nodes[id].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_channels: shape mismatch");
        let needs = xs.iter().any(|&id| self.needs(id));
        self.push(v.as_standard_layout().to_owned(), needs, Op::ConcatChannels(xs.to_vec()))
    }

    /// Nearest-neighbour 2x spatial upsampling of `[n, c, h, w]`.
    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let (n, c, h, w) = xv.dim();
        let xs = xv.as_slice().expect("node values are standard layout");
        let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
        {
            let os = out.as_slice_mut().unwrap();
            let w2 = 2 * w;
            for plane in 0..n * c {
                let src = plane * h * w;
                let dst = plane * 4 * h * w;
                for i in 0..h {
                    let row = &xs[src + i * w..src + (i + 1) * w];
                    let carry = dst + 2 * i * w2;
                    for (j, &v) in row.iter().enumerate() {
                        os[carry + 2 * j] = v;
                        os[carry + 2 * j + 1] = v;
                    }
                    os.copy_within(carry..carry + w2, carry + w2);
                }
            }
        }
        self.push(out.into_dyn(), self.needs(x), Op::UpsampleNearest2(x))
    }

    /// Reinterpret the (standard-layout) value under a new shape.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[x]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, self.needs(x), Op::Reshape(x))
    }

    /// `[n, c, h, w]` -> `[n, c*h*w]`.
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].value.shape().to_vec();
        assert_eq!(s.len(), 4, "flatten expects a 4-d tensor");
        self.reshape(x, &[s[0], s[1] * s[2] * s[3]])
    }

    // ---- dense / conv ----

    /// `x [n, i] . w [i, o] + b [o]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = as2(&self.nodes[x].value);
        let wv = as2(&self.nodes[w].value);
        let bv = as1(&self.nodes[b].value);
        assert_eq!(xv.ncols(), wv.nrows(), "linear: inner dim mismatch");
        assert_eq!(wv.ncols(), bv.len(), "linear: bias dim mismatch");
        let mut out = xv.dot(&wv);
        out += &bv;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out.into_dyn(), needs, Op::Linear { x, w, b })
    }

    /// 2-d convolution, `x [n, ci, h, w]`, `w [co, ci, kh, kw]`, `b [co]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let wv = as4(&self.nodes[w].value);
        let bv = as1(&self.nodes[b].value);
        let (n, ci, h, wd) = xv.dim();
        let (co, ciw, kh, kw) = wv.dim();
        assert_eq!(ci, ciw, "conv2d: channel mismatch");
        assert_eq!(co, bv.len(), "conv2d: bias dim mismatch");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        // cols [k, n*oh*ow]; the kernel matrix is the weight tensor
        // reshaped row-major to [co, k], so out2 = wmat . cols is [co, M]
        // with each (bi, o) plane contiguous.
        let cols = im2col(&xv, kh, kw, stride, pad, oh, ow);
        let wmat = weight_matrix(&wv); // [co, ci*kh*kw]
        let out2 = wmat.dot(&cols); // [co, n*oh*ow]

        let plane = oh * ow;
        let mut out = Array4::<f64>::zeros((n, co, oh, ow));
        {
            let os = out.as_slice_mut().unwrap();
            let o2 = out2.as_slice().unwrap();
            for bi in 0..n {
                for o in 0..co {
                    let dst = (bi * co + o) * plane;
                    let src = o * (n * plane) + bi * plane;
                    let bias = bv[o];
                    for i in 0..plane {
                        os[dst + i] = o2[src + i] + bias;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            out.into_dyn(),
            needs,
            Op::Conv2d { x, w, b, stride, pad, cols },
        )
    }

    // ---- reductions / losses ----

    /// Sum of every element, as a 0-d node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].value.sum();
        self.push(ndarray::arr0(s).into_dyn(), self.needs(x), Op::SumAll(x))
    }

    /// Weighted L1: `sum(|pred - target| * weight) / divisor`.
    ///
    /// `target` and `weight` are constants with the same shape as `pred`.
    pub fn masked_l1(
        &mut self,
        pred: NodeId,
        target: ArrayD<f64>,
        weight: ArrayD<f64>,
        divisor: f64,
    ) -> NodeId {
        assert_eq!(self.nodes[pred].value.shape(), target.shape());
        assert_eq!(self.nodes[pred].value.shape(), weight.shape());
        let p = &self.nodes[pred].value;
        let mut acc = 0.0;
        ndarray::Zip::from(p).and(&target).and(&weight).for_each(|&pv, &tv, &wv| {
            acc += (pv - tv).abs() * wv;
        });
        let v = ndarray::arr0(acc / divisor).into_dyn();
        let needs = self.needs(pred);
        self.push(v, needs, Op::MaskedL1 { pred, target, weight, divisor })
    }

    /// Mean binary cross-entropy of `pred` (probabilities) against a fixed
    /// 0/1 label, with probabilities clamped to `[eps, 1-eps]`.
    pub fn bce_with_label(&mut self, pred: NodeId, label: f64, eps: f64) -> NodeId {
        let p = &self.nodes[pred].value;
        let count = p.len() as f64;
        let mut acc = 0.0;
        for &pv in p.iter() {
            let pc = pv.clamp(eps, 1.0 - eps);
            acc -= label * pc.ln() + (1.0 - label) * (1.0 - pc).ln();
        }
        let v = ndarray::arr0(acc / count).into_dyn();
        let needs = self.needs(pred);
        self.push(v, needs, Op::BceWithLabel { pred, label, eps })
    }

    // ---- backward ----

    /// Backpropagate from a scalar root. Gradients accumulate into every
    /// node with `needs_grad`.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        let shape = self.nodes[root].value.raw_dim();
        self.nodes[root].grad = Some(ArrayD::ones(shape));

        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let g = self.nodes[id].grad.clone().unwrap();
            // Op data is read out before mutating parent grads.
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Relu(x) => {
                    let x = *x;
                    let dv = self.nodes[id].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    self.accumulate(x, &(&g * &dv));
                }
                Op::LeakyRelu(x, slope) => {
                    let (x, slope) = (*x, *slope);
                    let dv = self.nodes[x].value.mapv(|v| if v > 0.0 { 1.0 } else { slope });
                    self.accumulate(x, &(&g * &dv));
                }
                Op::Tanh(x) => {
                    let x = *x;
                    let dv = self.nodes[id].value.mapv(|v| 1.0 - v * v);
                    self.accumulate(x, &(&g * &dv));
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let dv = self.nodes[id].value.mapv(|v| v * (1.0 - v));
                    self.accumulate(x, &(&g * &dv));
                }
                Op::Clamp(x, lo, hi) => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    let pass = self.nodes[x].value.mapv(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
                    self.accumulate(x, &(&g * &pass));
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Scale(x, k) => {
                    let (x, k) = (*x, *k);
                    self.accumulate(x, &g.mapv(|v| v * k));
                }
                Op::ConcatChannels(xs) => {
                    let xs = xs.clone();
                    let g4 = as4(&g);
                    let mut offset = 0;
                    for x in xs {
                        let c = self.nodes[x].value.shape()[1];
                        let part = g4
                            .slice(ndarray::s![.., offset..offset + c, .., ..])
                            .to_owned()
                            .into_dyn();
                        self.accumulate(x, &part);
                        offset += c;
                    }
                }
                Op::UpsampleNearest2(x) => {
                    let x = *x;
                    let g4 = as4(&g);
                    let (n, c, h2, w2) = g4.dim();
                    let (h, w) = (h2 / 2, w2 / 2);
                    let gs = g.as_slice().unwrap();
                    let mut gx = Array4::<f64>::zeros((n, c, h, w));
                    {
                        let out = gx.as_slice_mut().unwrap();
                        for plane in 0..n * c {
                            let src = plane * h2 * w2;
                            let dst = plane * h * w;
                            for i in 0..h {
                                let top = src + 2 * i * w2;
                                let bot = top + w2;
                                let orow = dst + i * w;
                                for j in 0..w {
                                    out[orow + j] = gs[top + 2 * j]
                                        + gs[top + 2 * j + 1]
                                        + gs[bot + 2 * j]
                                        + gs[bot + 2 * j + 1];
                                }
                            }
                        }
                    }
                    self.accumulate(x, &gx.into_dyn());
                }
                Op::Reshape(x) => {
                    let x = *x;
                    let shape = self.nodes[x].value.raw_dim();
                    let gx = g.clone().into_shape_with_order(shape).unwrap();
                    self.accumulate(x, &gx);
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let g2 = as2(&g);
                    if self.needs(x) {
                        let wv = as2(&self.nodes[w].value);
                        let gx = g2.dot(&wv.t());
                        self.accumulate(x, &gx.into_dyn());
                    }
                    if self.needs(w) {
                        let xv = as2(&self.nodes[x].value);
                        let gw = xv.t().dot(&g2);
                        self.accumulate(w, &gw.into_dyn());
                    }
                    if self.needs(b) {
                        let gb = g2.sum_axis(Axis(0));
                        self.accumulate(b, &gb.into_dyn());
                    }
                }
                Op::Conv2d { x, w, b, stride, pad, .. } => {
                    let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                    let g4 = as4(&g);
                    let (n, co, oh, ow) = g4.dim();
                    let plane = oh * ow;
                    // [co, n*oh*ow], planes rearranged from the grad layout
                    let mut gmat = Array2::<f64>::zeros((co, n * plane));
                    {
                        let gm = gmat.as_slice_mut().unwrap();
                        let gs = g.as_slice().unwrap();
                        for bi in 0..n {
                            for o in 0..co {
                                let src = (bi * co + o) * plane;
                                let dst = o * (n * plane) + bi * plane;
                                gm[dst..dst + plane].copy_from_slice(&gs[src..src + plane]);
                            }
                        }
                    }
                    if self.needs(b) {
                        let gb = gmat.sum_axis(Axis(1));
                        self.accumulate(b, &gb.into_dyn());
                    }
                    if self.needs(w) {
                        let cols = match &self.nodes[id].op {
                            Op::Conv2d { cols, .. } => cols.clone(),
                            _ => unreachable!(),
                        };
                        let gwmat = gmat.dot(&cols.t()); // [co, ci*kh*kw]
                        let wshape = self.nodes[w].value.raw_dim();
                        let gw = gwmat
                            .as_standard_layout()
                            .to_owned()
                            .into_shape_with_order(wshape)
                            .unwrap();
                        self.accumulate(w, &gw);
                    }
                    if self.needs(x) {
                        let wv = as4(&self.nodes[w].value);
                        let wmat = weight_matrix(&wv);
                        let gcols = wmat.t().dot(&gmat); // [ci*kh*kw, n*oh*ow]
                        let xdim = as4(&self.nodes[x].value).dim();
                        let (kh, kw) = (wv.dim().2, wv.dim().3);
                        let gx = col2im(&gcols, xdim, kh, kw, stride, pad, oh, ow);
                        self.accumulate(x, &gx.into_dyn());
                    }
                }
                Op::SumAll(x) => {
                    let x = *x;
                    let gv = g.iter().next().copied().unwrap();
                    let shape = self.nodes[x].value.raw_dim();
                    self.accumulate(x, &ArrayD::from_elem(shape, gv));
                }
                Op::MaskedL1 { pred, target, weight, divisor } => {
                    let predid = *pred;
                    let divisor = *divisor;
                    let gv = g.iter().next().copied().unwrap();
                    let p = &self.nodes[predid].value;
                    let mut gp = ArrayD::zeros(p.raw_dim());
                    ndarray::Zip::from(&mut gp).and(p).and(target).and(weight).for_each(
                        |o, &pv, &tv, &wv| {
                            // subgradient 0 at pred == target
                            let s = (pv - tv).signum() * if pv == tv { 0.0 } else { 1.0 };
                            *o = gv * s * wv / divisor;
                        },
                    );
                    self.accumulate(predid, &gp);
                }
                Op::BceWithLabel { pred, label, eps } => {
                    let (predid, label, eps) = (*pred, *label, *eps);
                    let gv = g.iter().next().copied().unwrap();
                    let p = &self.nodes[predid].value;
                    let count = p.len() as f64;
                    let gp = p.mapv(|pv| {
                        if pv <= eps || pv >= 1.0 - eps {
                            0.0
                        } else {
                            gv * (pv - label) / (pv * (1.0 - pv)) / count
                        }
                    });
                    self.accumulate(predid, &gp);
                }
            }
        }
    }

    fn accumulate(&mut self, id: NodeId, g: &ArrayD<f64>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(existing) => *existing += g,
            slot @ None => *slot = Some(into_standard(g.clone())),
        }
    }
}

fn into_standard(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        let shape = a.raw_dim();
        ArrayD::from_shape_vec(shape, a.iter().copied().collect()).unwrap()
    }
}

fn as1(a: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality().expect("expected 1-d tensor")
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("expected 2-d tensor")
}

fn as4(a: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality().expect("expected 4-d tensor")
}

/// Lower convolution input patches into a `[ci*kh*kw, n*oh*ow]` matrix
/// (column = output position, contiguous along the output row).
fn im2col(
    x: &ndarray::ArrayView4<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (n, ci, h, w) = x.dim();
    let k = ci * kh * kw;
    let m = n * oh * ow;
    let xs = x.as_slice().expect("node values are standard layout");
    let mut cols = Array2::<f64>::zeros((k, m));
    let cs = cols.as_slice_mut().unwrap();
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let rbase = row * m;
                if kx >= w + pad {
                    continue;
                }
                // ix = ox*stride + kx - pad must land in [0, w)
                let ox_lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
                let ox_hi_excl = ((w + pad - kx + stride - 1) / stride).min(ow);
                if ox_lo >= ox_hi_excl {
                    continue;
                }
                for bi in 0..n {
                    let xplane = (bi * ci + c) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xplane + iy as usize * w;
                        let crow = rbase + (bi * oh + oy) * ow;
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            let len = ox_hi_excl - ox_lo;
                            cs[crow + ox_lo..crow + ox_lo + len]
                                .copy_from_slice(&xs[xrow + ix0..xrow + ix0 + len]);
                        } else {
                            for ox in ox_lo..ox_hi_excl {
                                let ix = ox * stride + kx - pad;
                                cs[crow + ox] = xs[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add `[ci*kh*kw, n*oh*ow]` gradients back onto the input image.
fn col2im(
    gcols: &Array2<f64>,
    xdim: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<f64> {
    let (n, ci, h, w) = xdim;
    let m = n * oh * ow;
    let gs = gcols.as_slice().expect("gemm output is standard layout");
    let mut gx = Array4::<f64>::zeros((n, ci, h, w));
    let xs = gx.as_slice_mut().unwrap();
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let rbase = row * m;
                for bi in 0..n {
                    let xplane = (bi * ci + c) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xplane + iy as usize * w;
                        let crow = rbase + (bi * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                xs[xrow + ix as usize] += gs[crow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// `[co, ci, kh, kw]` -> `[co, ci*kh*kw]`: a row-major reshape.
fn weight_matrix(w: &ndarray::ArrayView4<'_, f64>) -> Array2<f64> {
    let (co, ci, kh, kw) = w.dim();
    w.to_owned()
        .into_shape_with_order((co, ci * kh * kw))
        .expect("weights are standard layout")
}

/// Validate that two shapes match, for user-facing entry points.
pub fn check_same_shape(what: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}
