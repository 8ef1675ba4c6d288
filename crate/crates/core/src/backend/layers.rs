//! Convolutional building blocks with explicit input-gradient passes.
//!
//! Only gradients with respect to the layer input are produced; weights are
//! frozen. Convolutions lower to GEMM through im2col, processed in bands of
//! output rows so that large inputs stay within a bounded scratch buffer.

/// Scratch budget for one im2col band, in `f64` elements.
const BAND_ELEMS: usize = 1 << 21;

/// Channel-major feature map without the nonnegativity invariant of
/// [`ActivationTensor`](crate::tensor::ActivationTensor).
#[derive(Debug, Clone)]
pub(crate) struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

fn out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let padded = input + 2 * pad;
    if padded < kernel {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out_c x (in_c * k * k)`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            out_len(h, self.k, self.stride, self.pad),
            out_len(w, self.k, self.stride, self.pad),
        )
    }

    fn cols_k(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn band_rows(&self, wo: usize) -> usize {
        (BAND_ELEMS / (self.cols_k() * wo).max(1)).max(1)
    }

    fn im2col(&self, x: &FeatureMap, r0: usize, r1: usize, wo: usize, cols: &mut [f64]) {
        let n = (r1 - r0) * wo;
        let (s, p, k) = (self.stride as isize, self.pad as isize, self.k);
        for ci in 0..self.in_c {
            let src = &x.data[ci * x.plane()..(ci + 1) * x.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * n;
                    let dst = &mut cols[row..row + n];
                    for (b, oy) in (r0..r1).enumerate() {
                        let iy = oy as isize * s + ky as isize - p;
                        let seg = &mut dst[b * wo..(b + 1) * wo];
                        if iy < 0 || iy >= x.h as isize {
                            seg.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let line = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        for (ox, v) in seg.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            *v = if ix < 0 || ix >= x.w as isize {
                                0.0
                            } else {
                                line[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], r0: usize, r1: usize, wo: usize, gx: &mut FeatureMap) {
        let n = (r1 - r0) * wo;
        let (s, p, k) = (self.stride as isize, self.pad as isize, self.k);
        let (h, w, plane) = (gx.h, gx.w, gx.plane());
        for ci in 0..self.in_c {
            let dst = &mut gx.data[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * n;
                    let src = &cols[row..row + n];
                    for (b, oy) in (r0..r1).enumerate() {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in src[b * wo..(b + 1) * wo].iter().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                line[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        debug_assert_eq!(x.c, self.in_c);
        let (ho, wo) = self.out_dims(x.h, x.w);
        let mut out = FeatureMap::zeros(self.out_c, ho, wo);
        if ho == 0 || wo == 0 {
            return out;
        }
        let kk = self.cols_k();
        let band = self.band_rows(wo);
        let mut cols = vec![0.0; kk * band.min(ho) * wo];
        let plane = ho * wo;
        let mut r0 = 0;
        while r0 < ho {
            let r1 = (r0 + band).min(ho);
            let n = (r1 - r0) * wo;
            self.im2col(x, r0, r1, wo, &mut cols);
            // SAFETY: all pointers address live buffers large enough for the
            // given dimensions and strides.
            unsafe {
                matrixmultiply::dgemm(
                    self.out_c,
                    kk,
                    n,
                    1.0,
                    self.weight.as_ptr(),
                    kk as isize,
                    1,
                    cols.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    out.data.as_mut_ptr().add(r0 * wo),
                    plane as isize,
                    1,
                );
            }
            r0 = r1;
        }
        for (o, b) in self.bias.iter().enumerate() {
            if *b != 0.0 {
                out.data[o * plane..(o + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += b);
            }
        }
        out
    }

    pub fn backward(&self, grad: &FeatureMap, in_h: usize, in_w: usize) -> FeatureMap {
        let mut gx = FeatureMap::zeros(self.in_c, in_h, in_w);
        let (ho, wo) = (grad.h, grad.w);
        if ho == 0 || wo == 0 {
            return gx;
        }
        let kk = self.cols_k();
        let band = self.band_rows(wo);
        let mut cols = vec![0.0; kk * band.min(ho) * wo];
        let plane = ho * wo;
        let mut r0 = 0;
        while r0 < ho {
            let r1 = (r0 + band).min(ho);
            let n = (r1 - r0) * wo;
            // cols = W^T * grad[:, band]
            // SAFETY: as in `forward`; W is read transposed through its strides.
            unsafe {
                matrixmultiply::dgemm(
                    kk,
                    self.out_c,
                    n,
                    1.0,
                    self.weight.as_ptr(),
                    1,
                    kk as isize,
                    grad.data.as_ptr().add(r0 * wo),
                    plane as isize,
                    1,
                    0.0,
                    cols.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            self.col2im(&cols[..kk * n], r0, r1, wo, &mut gx);
            r0 = r1;
        }
        gx
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MaxPool2d {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool2d {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            out_len(h, self.k, self.stride, self.pad),
            out_len(w, self.k, self.stride, self.pad),
        )
    }

    /// Returns the pooled map and, per output cell, the flat input index of
    /// the selected maximum (first one in scan order on ties).
    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, Vec<u32>) {
        let (ho, wo) = self.out_dims(x.h, x.w);
        let mut out = FeatureMap::zeros(x.c, ho, wo);
        let mut arg = vec![0u32; x.c * ho * wo];
        let (s, p) = (self.stride as isize, self.pad as isize);
        for c in 0..x.c {
            let base = c * x.plane();
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for ky in 0..self.k {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let i = base + iy as usize * x.w + ix as usize;
                            if x.data[i] > best {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (c * ho + oy) * wo + ox;
                    out.data[o] = best;
                    arg[o] = best_i as u32;
                }
            }
        }
        (out, arg)
    }

    pub fn backward(grad: &FeatureMap, arg: &[u32], c: usize, in_h: usize, in_w: usize) -> FeatureMap {
        let mut gx = FeatureMap::zeros(c, in_h, in_w);
        for (g, &i) in grad.data.iter().zip(arg) {
            gx.data[i as usize] += g;
        }
        gx
    }
}

/// In-place ReLU; returns the pass-through mask.
pub(crate) fn relu(x: &mut FeatureMap) -> Vec<bool> {
    x.data
        .iter_mut()
        .map(|v| {
            if *v > 0.0 {
                true
            } else {
                *v = 0.0;
                false
            }
        })
        .collect()
}

pub(crate) fn relu_backward(grad: &mut FeatureMap, mask: &[bool]) {
    for (g, &m) in grad.data.iter_mut().zip(mask) {
        if !m {
            *g = 0.0;
        }
    }
}

/// Residual block: `relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))`, with
/// batch norms folded into the convolutions.
#[derive(Debug, Clone)]
pub(crate) struct BasicBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub downsample: Option<Conv2d>,
}

#[derive(Debug)]
pub(crate) struct BlockTrace {
    in_h: usize,
    in_w: usize,
    mid_h: usize,
    mid_w: usize,
    mask1: Vec<bool>,
    mask2: Vec<bool>,
}

impl BasicBlock {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let (h, w) = self.conv1.out_dims(h, w);
        self.conv2.out_dims(h, w)
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, BlockTrace) {
        let mut a = self.conv1.forward(x);
        let mask1 = relu(&mut a);
        let mut y = self.conv2.forward(&a);
        match &self.downsample {
            Some(d) => {
                let sc = d.forward(x);
                y.data.iter_mut().zip(&sc.data).for_each(|(v, s)| *v += s);
            }
            None => y.data.iter_mut().zip(&x.data).for_each(|(v, s)| *v += s),
        }
        let mask2 = relu(&mut y);
        let trace = BlockTrace {
            in_h: x.h,
            in_w: x.w,
            mid_h: a.h,
            mid_w: a.w,
            mask1,
            mask2,
        };
        (y, trace)
    }

    pub fn backward(&self, grad: &FeatureMap, t: &BlockTrace) -> FeatureMap {
        let mut g = grad.clone();
        relu_backward(&mut g, &t.mask2);
        let mut ga = self.conv2.backward(&g, t.mid_h, t.mid_w);
        relu_backward(&mut ga, &t.mask1);
        let mut gx = self.conv1.backward(&ga, t.in_h, t.in_w);
        match &self.downsample {
            Some(d) => {
                let gs = d.backward(&g, t.in_h, t.in_w);
                gx.data.iter_mut().zip(&gs.data).for_each(|(v, s)| *v += s);
            }
            None => gx.data.iter_mut().zip(&g.data).for_each(|(v, s)| *v += s),
        }
        gx
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool(MaxPool2d),
    Block(BasicBlock),
}

#[derive(Debug)]
pub(crate) enum LayerTrace {
    Conv { in_h: usize, in_w: usize },
    Relu { mask: Vec<bool> },
    MaxPool { c: usize, in_h: usize, in_w: usize, arg: Vec<u32> },
    Block(BlockTrace),
}

impl Layer {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Layer::Conv(c) => c.out_dims(h, w),
            Layer::Relu => (h, w),
            Layer::MaxPool(p) => p.out_dims(h, w),
            Layer::Block(b) => b.out_dims(h, w),
        }
    }

    pub fn forward(&self, x: FeatureMap, keep_trace: bool) -> (FeatureMap, Option<LayerTrace>) {
        match self {
            Layer::Conv(c) => {
                let t = LayerTrace::Conv { in_h: x.h, in_w: x.w };
                (c.forward(&x), keep_trace.then_some(t))
            }
            Layer::Relu => {
                let mut x = x;
                let mask = relu(&mut x);
                (x, keep_trace.then_some(LayerTrace::Relu { mask }))
            }
            Layer::MaxPool(p) => {
                let (y, arg) = p.forward(&x);
                let t = LayerTrace::MaxPool {
                    c: x.c,
                    in_h: x.h,
                    in_w: x.w,
                    arg,
                };
                (y, keep_trace.then_some(t))
            }
            Layer::Block(b) => {
                let (y, t) = b.forward(&x);
                (y, keep_trace.then_some(LayerTrace::Block(t)))
            }
        }
    }

    pub fn backward(&self, grad: FeatureMap, trace: &LayerTrace) -> FeatureMap {
        match (self, trace) {
            (Layer::Conv(c), LayerTrace::Conv { in_h, in_w }) => c.backward(&grad, *in_h, *in_w),
            (Layer::Relu, LayerTrace::Relu { mask }) => {
                let mut g = grad;
                relu_backward(&mut g, mask);
                g
            }
            (Layer::MaxPool(_), LayerTrace::MaxPool { c, in_h, in_w, arg }) => {
                MaxPool2d::backward(&grad, arg, *c, *in_h, *in_w)
            }
            (Layer::Block(b), LayerTrace::Block(t)) => b.backward(&grad, t),
            _ => unreachable!("trace does not belong to this layer"),
        }
    }
}
