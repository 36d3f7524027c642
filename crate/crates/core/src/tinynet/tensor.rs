//! Minimal CHW tensor plus the differentiable building blocks of the
//! networks: 2D convolution, ReLU, fixed x2 upsampling (bilinear and
//! bicubic), channel concatenation, and per-pixel L2 normalization.
//!
//! Every operation comes with an explicit backward that is exercised by
//! finite-difference tests.

/// Dense CHW tensor; index `(c, y, x)` maps to `(c * h + y) * w + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Convolution geometry: odd kernel, same padding, stride 1 or 2.
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        match self.stride {
            1 => (h, w),
            2 => (h.div_ceil(2), w.div_ceil(2)),
            s => panic!("unsupported stride {s}"),
        }
    }
}

/// Forward convolution with zero padding `kernel / 2`.
pub fn conv2d(input: &Tensor, spec: &ConvSpec, weight: &[f64], bias: &[f64]) -> Tensor {
    assert_eq!(input.c, spec.in_c);
    assert_eq!(weight.len(), spec.weight_len());
    assert_eq!(bias.len(), spec.out_c);
    let (oh, ow) = spec.out_dims(input.h, input.w);
    let mut out = Tensor::zeros(spec.out_c, oh, ow);
    let k = spec.kernel;
    let pad = (k / 2) as isize;
    for oc in 0..spec.out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..spec.in_c {
                    let wbase = ((oc * spec.in_c + ic) * k) * k;
                    for ky in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - pad;
                        if iy < 0 || iy >= input.h as isize {
                            continue;
                        }
                        let irow = (ic * input.h + iy as usize) * input.w;
                        let wrow = wbase + ky * k;
                        for kx in 0..k {
                            let ix = (ox * spec.stride + kx) as isize - pad;
                            if ix < 0 || ix >= input.w as isize {
                                continue;
                            }
                            acc += weight[wrow + kx] * input.data[irow + ix as usize];
                        }
                    }
                }
                *out.at_mut(oc, oy, ox) = acc;
            }
        }
    }
    out
}

/// Backward convolution: gradients w.r.t. input, weights, and bias.
pub fn conv2d_backward(
    input: &Tensor,
    spec: &ConvSpec,
    weight: &[f64],
    d_out: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (oh, ow) = spec.out_dims(input.h, input.w);
    assert_eq!((d_out.c, d_out.h, d_out.w), (spec.out_c, oh, ow));
    let mut d_input = Tensor::zeros(input.c, input.h, input.w);
    let mut d_weight = vec![0.0; weight.len()];
    let mut d_bias = vec![0.0; spec.out_c];
    let k = spec.kernel;
    let pad = (k / 2) as isize;
    for oc in 0..spec.out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = d_out.at(oc, oy, ox);
                if g == 0.0 {
                    continue;
                }
                d_bias[oc] += g;
                for ic in 0..spec.in_c {
                    let wbase = ((oc * spec.in_c + ic) * k) * k;
                    for ky in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - pad;
                        if iy < 0 || iy >= input.h as isize {
                            continue;
                        }
                        let irow = (ic * input.h + iy as usize) * input.w;
                        let wrow = wbase + ky * k;
                        for kx in 0..k {
                            let ix = (ox * spec.stride + kx) as isize - pad;
                            if ix < 0 || ix >= input.w as isize {
                                continue;
                            }
                            let ii = irow + ix as usize;
                            d_weight[wrow + kx] += input.data[ii] * g;
                            d_input.data[ii] += weight[wrow + kx] * g;
                        }
                    }
                }
            }
        }
    }
    (d_input, d_weight, d_bias)
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        c: input.c,
        h: input.h,
        w: input.w,
        // f64::max would swallow NaN; it must propagate so divergence is
        // detected.
        data: input
            .data
            .iter()
            .map(|v| if *v > 0.0 || v.is_nan() { *v } else { 0.0 })
            .collect(),
    }
}

/// Backward through ReLU given the forward *output* (the mask is
/// `output > 0`).
pub fn relu_backward(output: &Tensor, d_out: &Tensor) -> Tensor {
    assert!(output.same_shape(d_out));
    Tensor {
        c: output.c,
        h: output.h,
        w: output.w,
        data: output
            .data
            .iter()
            .zip(&d_out.data)
            .map(|(o, g)| if *o > 0.0 { *g } else { 0.0 })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleKind {
    Bilinear,
    Bicubic,
}

/// Keys cubic convolution kernel with a = -0.5.
fn cubic_weight(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Per-axis interpolation taps for doubling a length-`n` axis. Sample
/// positions follow the half-pixel convention `src = (dst + 0.5)/2 - 0.5`,
/// with indices clamped at the border.
fn axis_taps(n: usize, kind: UpsampleKind) -> Vec<Vec<(usize, f64)>> {
    let mut all = Vec::with_capacity(2 * n);
    for o in 0..2 * n {
        let src = (o as f64 + 0.5) / 2.0 - 0.5;
        let base = src.floor();
        let frac = src - base;
        let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
        let mut push = |idx: isize, w: f64| {
            if w == 0.0 {
                return;
            }
            let clamped = idx.clamp(0, n as isize - 1) as usize;
            if let Some(slot) = taps.iter_mut().find(|(i, _)| *i == clamped) {
                slot.1 += w;
            } else {
                taps.push((clamped, w));
            }
        };
        match kind {
            UpsampleKind::Bilinear => {
                let b = base as isize;
                push(b, 1.0 - frac);
                push(b + 1, frac);
            }
            UpsampleKind::Bicubic => {
                let b = base as isize;
                for d in -1..=2isize {
                    push(b + d, cubic_weight(frac - d as f64));
                }
            }
        }
        all.push(taps);
    }
    all
}

/// Doubles both spatial dimensions with the given interpolation.
pub fn upsample2x(input: &Tensor, kind: UpsampleKind) -> Tensor {
    let tx = axis_taps(input.w, kind);
    let ty = axis_taps(input.h, kind);
    let mut mid = Tensor::zeros(input.c, input.h, 2 * input.w);
    for c in 0..input.c {
        for y in 0..input.h {
            for (ox, taps) in tx.iter().enumerate() {
                let mut acc = 0.0;
                for (ix, w) in taps {
                    acc += w * input.at(c, y, *ix);
                }
                *mid.at_mut(c, y, ox) = acc;
            }
        }
    }
    let mut out = Tensor::zeros(input.c, 2 * input.h, 2 * input.w);
    for c in 0..input.c {
        for (oy, taps) in ty.iter().enumerate() {
            for ox in 0..out.w {
                let mut acc = 0.0;
                for (iy, w) in taps {
                    acc += w * mid.at(c, *iy, ox);
                }
                *out.at_mut(c, oy, ox) = acc;
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: scatters the output gradient back through
/// the same taps.
pub fn upsample2x_backward(d_out: &Tensor, in_h: usize, in_w: usize, kind: UpsampleKind) -> Tensor {
    assert_eq!(d_out.h, 2 * in_h);
    assert_eq!(d_out.w, 2 * in_w);
    let tx = axis_taps(in_w, kind);
    let ty = axis_taps(in_h, kind);
    let mut mid = Tensor::zeros(d_out.c, in_h, 2 * in_w);
    for c in 0..d_out.c {
        for (oy, taps) in ty.iter().enumerate() {
            for ox in 0..d_out.w {
                let g = d_out.at(c, oy, ox);
                if g == 0.0 {
                    continue;
                }
                for (iy, w) in taps {
                    *mid.at_mut(c, *iy, ox) += w * g;
                }
            }
        }
    }
    let mut d_in = Tensor::zeros(d_out.c, in_h, in_w);
    for c in 0..d_out.c {
        for y in 0..in_h {
            for (ox, taps) in tx.iter().enumerate() {
                let g = mid.at(c, y, ox);
                if g == 0.0 {
                    continue;
                }
                for (ix, w) in taps {
                    *d_in.at_mut(c, y, *ix) += w * g;
                }
            }
        }
    }
    d_in
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity((a.c + b.c) * a.h * a.w);
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.c + b.c, a.h, a.w, data)
}

pub fn split_channels(d: &Tensor, c_first: usize) -> (Tensor, Tensor) {
    assert!(c_first <= d.c);
    let plane = d.h * d.w;
    let first = Tensor::from_vec(c_first, d.h, d.w, d.data[..c_first * plane].to_vec());
    let second = Tensor::from_vec(d.c - c_first, d.h, d.w, d.data[c_first * plane..].to_vec());
    (first, second)
}

pub const NORM_EPS: f64 = 1e-12;

/// Per-pixel L2 normalization across channels.
pub fn l2_normalize(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    let plane = input.h * input.w;
    for p in 0..plane {
        let mut sq = 0.0;
        for c in 0..input.c {
            let v = input.data[c * plane + p];
            sq += v * v;
        }
        let n = sq.sqrt().max(NORM_EPS);
        for c in 0..input.c {
            out.data[c * plane + p] = input.data[c * plane + p] / n;
        }
    }
    out
}

/// Backward through per-pixel L2 normalization given the forward input.
pub fn l2_normalize_backward(input: &Tensor, d_out: &Tensor) -> Tensor {
    assert!(input.same_shape(d_out));
    let mut d_in = Tensor::zeros(input.c, input.h, input.w);
    let plane = input.h * input.w;
    for p in 0..plane {
        let mut sq = 0.0;
        for c in 0..input.c {
            let v = input.data[c * plane + p];
            sq += v * v;
        }
        let n = sq.sqrt().max(NORM_EPS);
        let mut dot = 0.0;
        for c in 0..input.c {
            dot += input.data[c * plane + p] * d_out.data[c * plane + p];
        }
        // d_v = (d_u - u (u . d_u)) / n with u = v / n.
        for c in 0..input.c {
            let u = input.data[c * plane + p] / n;
            d_in.data[c * plane + p] = (d_out.data[c * plane + p] - u * dot / n) / n;
        }
    }
    d_in
}
