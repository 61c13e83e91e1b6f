//! Forward and backward primitives on [B, C, H, W] tensors.
//!
//! All convolutions and pools use same-padding (pad = dilation * (k - 1) / 2)
//! so only stride changes spatial dims; output height is
//! (h + 2p - d(k-1) - 1) / stride + 1, which halves even inputs at stride 2.

use ndarray::{Array1, Array2, Array3, Array4};

pub fn out_dim(n: usize, kernel: usize, stride: usize, dilation: usize, pad: usize) -> usize {
    (n + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1
}

pub fn same_pad(kernel: usize, dilation: usize) -> usize {
    dilation * (kernel - 1) / 2
}

/// Full convolution, weight layout [out_ch, in_ch, k, k], no bias.
pub fn conv2d_forward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    stride: usize,
    dilation: usize,
) -> Array4<f64> {
    let (batch, in_ch, h, wd) = x.dim();
    let (out_ch, w_in, k, _) = w.dim();
    debug_assert_eq!(in_ch, w_in);
    let pad = same_pad(k, dilation);
    let oh = out_dim(h, k, stride, dilation, pad);
    let ow = out_dim(wd, k, stride, dilation, pad);
    let mut out = Array4::<f64>::zeros((batch, out_ch, oh, ow));
    for b in 0..batch {
        for co in 0..out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..in_ch {
                        for ky in 0..k {
                            let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[[co, ci, ky, kx]] * x[[b, ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                    out[[b, co, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input and weight.
pub fn conv2d_backward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    grad_out: &Array4<f64>,
    stride: usize,
    dilation: usize,
) -> (Array4<f64>, Array4<f64>) {
    let (batch, in_ch, h, wd) = x.dim();
    let (out_ch, _, k, _) = w.dim();
    let pad = same_pad(k, dilation);
    let (_, _, oh, ow) = grad_out.dim();
    let mut dx = Array4::<f64>::zeros((batch, in_ch, h, wd));
    let mut dw = Array4::<f64>::zeros(w.dim());
    for b in 0..batch {
        for co in 0..out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out[[b, co, oy, ox]];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..in_ch {
                        for ky in 0..k {
                            let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let (iy, ix) = (iy as usize, ix as usize);
                                dx[[b, ci, iy, ix]] += w[[co, ci, ky, kx]] * g;
                                dw[[co, ci, ky, kx]] += x[[b, ci, iy, ix]] * g;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Depthwise convolution, weight layout [ch, k, k], no bias.
pub fn depthwise_forward(
    x: &Array4<f64>,
    w: &Array3<f64>,
    stride: usize,
    dilation: usize,
) -> Array4<f64> {
    let (batch, ch, h, wd) = x.dim();
    let (_, k, _) = w.dim();
    let pad = same_pad(k, dilation);
    let oh = out_dim(h, k, stride, dilation, pad);
    let ow = out_dim(wd, k, stride, dilation, pad);
    let mut out = Array4::<f64>::zeros((batch, ch, oh, ow));
    for b in 0..batch {
        for c in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += w[[c, ky, kx]] * x[[b, c, iy as usize, ix as usize]];
                        }
                    }
                    out[[b, c, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

pub fn depthwise_backward(
    x: &Array4<f64>,
    w: &Array3<f64>,
    grad_out: &Array4<f64>,
    stride: usize,
    dilation: usize,
) -> (Array4<f64>, Array3<f64>) {
    let (batch, ch, h, wd) = x.dim();
    let (_, k, _) = w.dim();
    let pad = same_pad(k, dilation);
    let (_, _, oh, ow) = grad_out.dim();
    let mut dx = Array4::<f64>::zeros((batch, ch, h, wd));
    let mut dw = Array3::<f64>::zeros(w.dim());
    for b in 0..batch {
        for c in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out[[b, c, oy, ox]];
                    if g == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let (iy, ix) = (iy as usize, ix as usize);
                            dx[[b, c, iy, ix]] += w[[c, ky, kx]] * g;
                            dw[[c, ky, kx]] += x[[b, c, iy, ix]] * g;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

pub fn relu_forward(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Subgradient 0 at the kink.
pub fn relu_backward(x: &Array4<f64>, grad_out: &Array4<f64>) -> Array4<f64> {
    let mut dx = grad_out.clone();
    dx.zip_mut_with(x, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

/// 3x3 max pool with pad 1. Padding cells never win; ties go to the first
/// window position. Returns the output and the flat argmax (iy * w + ix).
pub fn maxpool3_forward(x: &Array4<f64>, stride: usize) -> (Array4<f64>, Array4<u32>) {
    let (batch, ch, h, wd) = x.dim();
    let oh = out_dim(h, 3, stride, 1, 1);
    let ow = out_dim(wd, 3, stride, 1, 1);
    let mut out = Array4::<f64>::zeros((batch, ch, oh, ow));
    let mut argmax = Array4::<u32>::zeros((batch, ch, oh, ow));
    for b in 0..batch {
        for c in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0u32;
                    for ky in 0..3usize {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let v = x[[b, c, iy as usize, ix as usize]];
                            if v > best {
                                best = v;
                                best_at = (iy as usize * wd + ix as usize) as u32;
                            }
                        }
                    }
                    out[[b, c, oy, ox]] = best;
                    argmax[[b, c, oy, ox]] = best_at;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool3_backward(
    in_dim: (usize, usize, usize, usize),
    argmax: &Array4<u32>,
    grad_out: &Array4<f64>,
) -> Array4<f64> {
    let (_, _, _, wd) = in_dim;
    let mut dx = Array4::<f64>::zeros(in_dim);
    let (batch, ch, oh, ow) = grad_out.dim();
    for b in 0..batch {
        for c in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let at = argmax[[b, c, oy, ox]] as usize;
                    dx[[b, c, at / wd, at % wd]] += grad_out[[b, c, oy, ox]];
                }
            }
        }
    }
    dx
}

/// 3x3 average pool with pad 1; the divisor is the full window size 9, with
/// padding counted as zeros.
pub fn avgpool3_forward(x: &Array4<f64>, stride: usize) -> Array4<f64> {
    let (batch, ch, h, wd) = x.dim();
    let oh = out_dim(h, 3, stride, 1, 1);
    let ow = out_dim(wd, 3, stride, 1, 1);
    let mut out = Array4::<f64>::zeros((batch, ch, oh, ow));
    for b in 0..batch {
        for c in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..3usize {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += x[[b, c, iy as usize, ix as usize]];
                        }
                    }
                    out[[b, c, oy, ox]] = acc / 9.0;
                }
            }
        }
    }
    out
}

pub fn avgpool3_backward(
    in_dim: (usize, usize, usize, usize),
    grad_out: &Array4<f64>,
    stride: usize,
) -> Array4<f64> {
    let (_, _, h, wd) = in_dim;
    let mut dx = Array4::<f64>::zeros(in_dim);
    let (batch, ch, oh, ow) = grad_out.dim();
    for b in 0..batch {
        for c in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out[[b, c, oy, ox]] / 9.0;
                    for ky in 0..3usize {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            dx[[b, c, iy as usize, ix as usize]] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Parameter-free strided identity: keep every stride-th pixel.
pub fn subsample_forward(x: &Array4<f64>, stride: usize) -> Array4<f64> {
    if stride == 1 {
        return x.clone();
    }
    let (batch, ch, h, wd) = x.dim();
    let oh = h.div_ceil(stride);
    let ow = wd.div_ceil(stride);
    let mut out = Array4::<f64>::zeros((batch, ch, oh, ow));
    for b in 0..batch {
        for c in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[[b, c, oy, ox]] = x[[b, c, oy * stride, ox * stride]];
                }
            }
        }
    }
    out
}

pub fn subsample_backward(
    in_dim: (usize, usize, usize, usize),
    grad_out: &Array4<f64>,
    stride: usize,
) -> Array4<f64> {
    if stride == 1 {
        return grad_out.clone();
    }
    let mut dx = Array4::<f64>::zeros(in_dim);
    let (batch, ch, oh, ow) = grad_out.dim();
    for b in 0..batch {
        for c in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    dx[[b, c, oy * stride, ox * stride]] += grad_out[[b, c, oy, ox]];
                }
            }
        }
    }
    dx
}

/// Spatial mean per channel: [B, C, H, W] -> [B, C].
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (batch, ch, h, wd) = x.dim();
    let scale = 1.0 / (h * wd) as f64;
    let mut out = Array2::<f64>::zeros((batch, ch));
    for b in 0..batch {
        for c in 0..ch {
            let mut acc = 0.0;
            for y in 0..h {
                for x_ in 0..wd {
                    acc += x[[b, c, y, x_]];
                }
            }
            out[[b, c]] = acc * scale;
        }
    }
    out
}

pub fn global_avg_pool_backward(
    in_dim: (usize, usize, usize, usize),
    grad_out: &Array2<f64>,
) -> Array4<f64> {
    let (batch, ch, h, wd) = in_dim;
    let scale = 1.0 / (h * wd) as f64;
    let mut dx = Array4::<f64>::zeros(in_dim);
    for b in 0..batch {
        for c in 0..ch {
            let g = grad_out[[b, c]] * scale;
            for y in 0..h {
                for x_ in 0..wd {
                    dx[[b, c, y, x_]] = g;
                }
            }
        }
    }
    dx
}

/// Affine map y = x W^T + b, weight layout [out, in].
pub fn linear_forward(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (batch, in_dim) = x.dim();
    let (out_dim, _) = w.dim();
    let mut out = Array2::<f64>::zeros((batch, out_dim));
    for bi in 0..batch {
        for o in 0..out_dim {
            let mut acc = b[o];
            for i in 0..in_dim {
                acc += w[[o, i]] * x[[bi, i]];
            }
            out[[bi, o]] = acc;
        }
    }
    out
}

pub fn linear_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    grad_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let (batch, in_dim) = x.dim();
    let (out_dim, _) = w.dim();
    let mut dx = Array2::<f64>::zeros((batch, in_dim));
    let mut dw = Array2::<f64>::zeros((out_dim, in_dim));
    let mut db = Array1::<f64>::zeros(out_dim);
    for bi in 0..batch {
        for o in 0..out_dim {
            let g = grad_out[[bi, o]];
            db[o] += g;
            for i in 0..in_dim {
                dx[[bi, i]] += g * w[[o, i]];
                dw[[o, i]] += g * x[[bi, i]];
            }
        }
    }
    (dx, dw, db)
}
