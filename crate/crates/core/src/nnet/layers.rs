//! Forward and backward kernels for the supported layer kinds.
//!
//! All spatial tensors are `[batch, channels, height, width]`, row-major.

use serde::{Deserialize, Serialize};

use super::tensor::{axpy, dot_f64, Scalar};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Flatten,
    L2Norm,
}

impl LayerSpec {
    /// 3×3, stride 1, "same" padding convolution.
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }

    pub fn pool2() -> Self {
        LayerSpec::MaxPool2d { size: 2, stride: 2 }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::L2Norm => "l2norm",
        }
    }

    pub(crate) fn validate(&self) -> Result<(), String> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if kernel == 0 {
                    return Err("conv2d kernel size must be >= 1".into());
                }
                if stride == 0 || in_channels == 0 || out_channels == 0 {
                    return Err("conv2d stride and channel counts must be >= 1".into());
                }
            }
            LayerSpec::MaxPool2d { size, stride } => {
                if size == 0 || stride == 0 {
                    return Err("maxpool2d size and stride must be >= 1".into());
                }
            }
            LayerSpec::Dense { inputs, outputs } => {
                if outputs == 0 || inputs == 0 {
                    return Err("dense widths must be >= 1".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Per-sample output shape for a per-sample input shape.
    pub(crate) fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = spatial(input)?;
                if c != in_channels {
                    return Err(format!("expected {in_channels} input channels, got {c}"));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(format!("input {h}x{w} smaller than kernel {kernel}"));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::MaxPool2d { size, stride } => {
                let [c, h, w] = spatial(input)?;
                if h < size || w < size {
                    return Err(format!("input {h}x{w} smaller than pool window {size}"));
                }
                Ok(vec![c, (h - size) / stride + 1, (w - size) / stride + 1])
            }
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(format!("expected input [{inputs}], got {input:?}"));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::L2Norm => {
                if input.len() != 1 {
                    return Err(format!("l2norm expects a flat input, got {input:?}"));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Shapes of (weight, bias) for parameterized layers.
    pub(crate) fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
                in_channels * kernel * kernel,
            )),
            LayerSpec::Dense { inputs, outputs } => {
                Some((vec![outputs, inputs], vec![outputs], inputs))
            }
            _ => None,
        }
    }
}

fn spatial(input: &[usize]) -> Result<[usize; 3], String> {
    match *input {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(format!("expected [channels, height, width], got {input:?}")),
    }
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output columns `ox` for which `ox*s + kx - p` lands inside the input row.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        // ox*s + kx >= p  and  ox*s + kx - p <= w - 1
        let lo = if kx >= self.p {
            0
        } else {
            (self.p - kx).div_ceil(self.s)
        };
        let hi = if self.w + self.p < kx + 1 {
            0
        } else {
            ((self.w - 1 + self.p - kx) / self.s + 1).min(self.ow)
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.s + ky) as isize - self.p as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut y = vec![T::ZERO; g.n * g.c_out * plane_out];
    for b in 0..g.n {
        for o in 0..g.c_out {
            let out = &mut y[(b * g.c_out + o) * plane_out..][..plane_out];
            out.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..g.c_in {
                let xin = &x[(b * g.c_in + c) * plane_in..][..plane_in];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = weight[((o * g.c_in + c) * g.k + ky) * g.k + kx];
                        let (lo, hi) = g.col_range(kx);
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let row_out = &mut out[oy * g.ow..(oy + 1) * g.ow];
                            let row_in = &xin[iy * g.w..(iy + 1) * g.w];
                            if g.s == 1 {
                                let start = lo + kx - g.p;
                                axpy(wv, &row_in[start..start + (hi - lo)], &mut row_out[lo..hi]);
                            } else {
                                for ox in lo..hi {
                                    row_out[ox] += wv * row_in[ox * g.s + kx - g.p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    gy: &[T],
    gw: &mut [T],
    gb: &mut [T],
) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut gx = vec![T::ZERO; x.len()];
    let mut gw_acc = vec![0.0f64; gw.len()];
    let mut gb_acc = vec![0.0f64; gb.len()];
    for b in 0..g.n {
        for o in 0..g.c_out {
            let gout = &gy[(b * g.c_out + o) * plane_out..][..plane_out];
            gb_acc[o] += gout.iter().map(|v| v.to_f64()).sum::<f64>();
            for c in 0..g.c_in {
                let xin = &x[(b * g.c_in + c) * plane_in..][..plane_in];
                let gxin = &mut gx[(b * g.c_in + c) * plane_in..][..plane_in];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let widx = ((o * g.c_in + c) * g.k + ky) * g.k + kx;
                        let wv = weight[widx];
                        let (lo, hi) = g.col_range(kx);
                        let mut acc = 0.0f64;
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let grow = &gout[oy * g.ow..(oy + 1) * g.ow];
                            if g.s == 1 {
                                let start = lo + kx - g.p;
                                let n = hi - lo;
                                let row_in = &xin[iy * g.w + start..][..n];
                                acc += dot_f64(&grow[lo..hi], row_in);
                                axpy(wv, &grow[lo..hi], &mut gxin[iy * g.w + start..][..n]);
                            } else {
                                for ox in lo..hi {
                                    let ix = iy * g.w + ox * g.s + kx - g.p;
                                    acc += (grow[ox] * xin[ix]).to_f64();
                                    gxin[ix] += wv * grow[ox];
                                }
                            }
                        }
                        gw_acc[widx] += acc;
                    }
                }
            }
        }
    }
    for (dst, a) in gw.iter_mut().zip(gw_acc) {
        *dst += T::from_f64(a);
    }
    for (dst, a) in gb.iter_mut().zip(gb_acc) {
        *dst += T::from_f64(a);
    }
    gx
}

/// Max pooling; returns output and the flat input index chosen for each output.
/// Ties go to the first maximum in scan order.
pub(crate) fn maxpool_forward<T: Scalar>(
    x: &[T],
    nc: usize,
    h: usize,
    w: usize,
    size: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut y = Vec::with_capacity(nc * oh * ow);
    let mut arg = Vec::with_capacity(nc * oh * ow);
    for p in 0..nc {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg, oh, ow)
}

pub(crate) fn dense_forward<T: Scalar>(
    x: &[T],
    n: usize,
    inputs: usize,
    outputs: usize,
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let mut y = Vec::with_capacity(n * outputs);
    for b in 0..n {
        let xr = &x[b * inputs..(b + 1) * inputs];
        for o in 0..outputs {
            let wr = &weight[o * inputs..(o + 1) * inputs];
            y.push(T::from_f64(bias[o].to_f64() + dot_f64(wr, xr)));
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward<T: Scalar>(
    x: &[T],
    n: usize,
    inputs: usize,
    outputs: usize,
    weight: &[T],
    gy: &[T],
    gw: &mut [T],
    gb: &mut [T],
) -> Vec<T> {
    let mut gx = vec![T::ZERO; n * inputs];
    for o in 0..outputs {
        let mut bacc = 0.0f64;
        for b in 0..n {
            bacc += gy[b * outputs + o].to_f64();
        }
        gb[o] += T::from_f64(bacc);
    }
    for b in 0..n {
        let xr = &x[b * inputs..(b + 1) * inputs];
        let gxr = &mut gx[b * inputs..(b + 1) * inputs];
        for o in 0..outputs {
            let go = gy[b * outputs + o];
            if go == T::ZERO {
                continue;
            }
            axpy(go, xr, &mut gw[o * inputs..(o + 1) * inputs]);
            axpy(go, &weight[o * inputs..(o + 1) * inputs], gxr);
        }
    }
    gx
}

/// Row-wise l2 normalization. Returns outputs, per-row norms, and whether any
/// row was exactly zero (such rows pass through as zeros).
pub(crate) fn l2norm_forward<T: Scalar>(x: &[T], n: usize, d: usize) -> (Vec<T>, Vec<f64>, bool) {
    let mut y = Vec::with_capacity(n * d);
    let mut norms = Vec::with_capacity(n);
    let mut zero = false;
    for b in 0..n {
        let row = &x[b * d..(b + 1) * d];
        let norm = dot_f64(row, row).sqrt();
        norms.push(norm);
        if norm == 0.0 {
            zero = true;
            y.extend(std::iter::repeat_n(T::ZERO, d));
        } else {
            y.extend(row.iter().map(|&v| T::from_f64(v.to_f64() / norm)));
        }
    }
    (y, norms, zero)
}

pub(crate) fn l2norm_backward<T: Scalar>(y: &[T], norms: &[f64], gy: &[T], d: usize) -> Vec<T> {
    let mut gx = Vec::with_capacity(y.len());
    for (b, &norm) in norms.iter().enumerate() {
        let yr = &y[b * d..(b + 1) * d];
        let gr = &gy[b * d..(b + 1) * d];
        if norm == 0.0 {
            gx.extend(std::iter::repeat_n(T::ZERO, d));
            continue;
        }
        let proj = dot_f64(yr, gr);
        gx.extend(
            yr.iter()
                .zip(gr)
                .map(|(&yv, &gv)| T::from_f64((gv.to_f64() - yv.to_f64() * proj) / norm)),
        );
    }
    gx
}
