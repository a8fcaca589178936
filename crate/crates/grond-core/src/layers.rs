//! Numeric kernels for the small-CNN family.
//!
//! Convolutions run as im2col + sgemm. All reductions are performed in a
//! fixed serial order so results are bit-reproducible for a given build.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major sgemm: C = alpha * A(m,k) * B(k,n) + beta * C(m,n).
pub(crate) fn sgemm_rm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major sgemm with A transposed: C = alpha * A^T(m,k) * B(k,n) + beta * C.
/// `a` is stored as (k, m).
pub(crate) fn sgemm_at(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), k * m);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major sgemm with B transposed: C = alpha * A(m,k) * B^T(k,n) + beta * C.
/// `b` is stored as (n, k).
pub(crate) fn sgemm_bt(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(b.len(), n * k);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return Err(Error::Argument(format!(
                "conv kernel {} does not fit input {h}x{w} with pad {}",
                self.kernel, self.pad
            )));
        }
        Ok((
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        ))
    }
}

/// Writes the im2col matrix (Ci*kh*kw, OH*OW) for one sample into `col`.
fn im2col(
    x: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    let k = g.kernel;
    let positions = oh * ow;
    debug_assert_eq!(col.len(), ci * k * k * positions);
    let mut row = 0;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut col[row * positions..(row + 1) * positions];
                row += 1;
                let mut p = 0;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[p..p + ow].fill(0.0);
                        p += ow;
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[p] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            plane[base + ix as usize]
                        };
                        p += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column-gradient matrix back onto the input gradient.
fn col2im_add(
    dcol: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    oh: usize,
    ow: usize,
    dx: &mut [f32],
) {
    let k = g.kernel;
    let positions = oh * ow;
    let mut row = 0;
    for c in 0..ci {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &dcol[row * positions..(row + 1) * positions];
                row += 1;
                let mut p = 0;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        p += ow;
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += src[p];
                        }
                        p += 1;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &Tensor, weight: &Tensor, g: &ConvGeom) -> Result<Tensor> {
    let (n, ci, h, w) = nchw(x)?;
    if ci != g.in_ch || weight.shape() != [g.out_ch, g.in_ch, g.kernel, g.kernel] {
        return Err(Error::Argument(format!(
            "conv shape mismatch: input {:?}, weight {:?}, geom {g:?}",
            x.shape(),
            weight.shape()
        )));
    }
    let (oh, ow) = g.out_hw(h, w)?;
    let kdim = ci * g.kernel * g.kernel;
    let positions = oh * ow;
    let mut out = Tensor::zeros(&[n, g.out_ch, oh, ow]);
    let mut col = vec![0.0f32; kdim * positions];
    for s in 0..n {
        let xs = &x.data()[s * ci * h * w..(s + 1) * ci * h * w];
        im2col(xs, ci, h, w, g, oh, ow, &mut col);
        let ys = &mut out.data_mut()[s * g.out_ch * positions..(s + 1) * g.out_ch * positions];
        sgemm_rm(g.out_ch, kdim, positions, 1.0, weight.data(), &col, 0.0, ys);
    }
    Ok(out)
}

/// Returns (dx, dweight); either side can be skipped.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    g: &ConvGeom,
    dy: &Tensor,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let (n, ci, h, w) = nchw(x)?;
    let (oh, ow) = g.out_hw(h, w)?;
    let kdim = ci * g.kernel * g.kernel;
    let positions = oh * ow;
    debug_assert_eq!(dy.shape(), &[n, g.out_ch, oh, ow]);

    let mut dweight = if need_dw {
        Some(Tensor::zeros(&[g.out_ch, g.in_ch, g.kernel, g.kernel]))
    } else {
        None
    };
    let mut dx = if need_dx {
        Some(Tensor::zeros(&[n, ci, h, w]))
    } else {
        None
    };
    let mut col = vec![0.0f32; kdim * positions];
    let mut dcol = vec![0.0f32; kdim * positions];
    for s in 0..n {
        let xs = &x.data()[s * ci * h * w..(s + 1) * ci * h * w];
        let dys = &dy.data()[s * g.out_ch * positions..(s + 1) * g.out_ch * positions];
        if let Some(dw) = dweight.as_mut() {
            im2col(xs, ci, h, w, g, oh, ow, &mut col);
            // dW += dY_s * col_s^T
            sgemm_bt(
                g.out_ch,
                positions,
                kdim,
                1.0,
                dys,
                &col,
                1.0,
                dw.data_mut(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcol = W^T * dY_s
            sgemm_at(kdim, g.out_ch, positions, 1.0, weight.data(), dys, 0.0, &mut dcol);
            let dxs = &mut dx.data_mut()[s * ci * h * w..(s + 1) * ci * h * w];
            col2im_add(&dcol, ci, h, w, g, oh, ow, dxs);
        }
    }
    Ok((dx, dweight))
}

/// Per-batch statistics cached by the train-mode batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub train_mode: bool,
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Train-mode batch norm. Normalizes with biased batch statistics and
/// updates the running estimates in place (unbiased variance, torch-style).
pub fn bn_forward_train(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &mut [f32],
    running_var: &mut [f32],
    eps: f32,
    momentum: f32,
) -> Result<(Tensor, BnCache)> {
    let (n, c, h, w) = nchw(x)?;
    let m = (n * h * w) as f32;
    if m < 1.0 {
        return Err(Error::Argument("batch norm on an empty batch".into()));
    }
    let plane = h * w;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for v in &x.data()[base..base + plane] {
                acc += *v as f64;
            }
        }
        mean[ch] = (acc / m as f64) as f32;
        let mut vac = 0.0f64;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for v in &x.data()[base..base + plane] {
                let d = *v as f64 - mean[ch] as f64;
                vac += d * d;
            }
        }
        var[ch] = (vac / m as f64) as f32;
    }
    let mut y = Tensor::zeros(x.shape());
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let (g, b) = (gamma[ch], beta[ch]);
        let mu = mean[ch];
        for s in 0..n {
            let base = (s * c + ch) * plane;
            let xs = &x.data()[base..base + plane];
            let ys = &mut y.data_mut()[base..base + plane];
            for (yo, xi) in ys.iter_mut().zip(xs) {
                *yo = (xi - mu) * inv * g + b;
            }
        }
    }
    let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
    for ch in 0..c {
        running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mean[ch];
        running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * var[ch] * unbias;
    }
    Ok((
        y,
        BnCache {
            mean,
            var,
            train_mode: true,
        },
    ))
}

/// Eval-mode batch norm using the stored running statistics.
pub fn bn_forward_eval(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
) -> Result<(Tensor, BnCache)> {
    let (n, c, h, w) = nchw(x)?;
    let plane = h * w;
    let mut y = Tensor::zeros(x.shape());
    for ch in 0..c {
        let inv = 1.0 / (running_var[ch] + eps).sqrt();
        let (g, b) = (gamma[ch], beta[ch]);
        let mu = running_mean[ch];
        for s in 0..n {
            let base = (s * c + ch) * plane;
            let xs = &x.data()[base..base + plane];
            let ys = &mut y.data_mut()[base..base + plane];
            for (yo, xi) in ys.iter_mut().zip(xs) {
                *yo = (xi - mu) * inv * g + b;
            }
        }
    }
    Ok((
        y,
        BnCache {
            mean: running_mean.to_vec(),
            var: running_var.to_vec(),
            train_mode: false,
        },
    ))
}

/// Returns (dx, dgamma, dbeta).
pub fn bn_backward(
    x: &Tensor,
    gamma: &[f32],
    cache: &BnCache,
    eps: f32,
    dy: &Tensor,
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let (n, c, h, w) = nchw(x)?;
    let plane = h * w;
    let m = (n * plane) as f32;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ch in 0..c {
        let inv = 1.0 / (cache.var[ch] + eps).sqrt();
        let mu = cache.mean[ch];
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            let xs = &x.data()[base..base + plane];
            let dys = &dy.data()[base..base + plane];
            for (xi, dyi) in xs.iter().zip(dys) {
                let xhat = (xi - mu) * inv;
                sum_dy += *dyi as f64;
                sum_dy_xhat += (*dyi * xhat) as f64;
            }
        }
        dbeta[ch] = sum_dy as f32;
        dgamma[ch] = sum_dy_xhat as f32;
        let g = gamma[ch];
        if cache.train_mode {
            let k1 = (sum_dy / m as f64) as f32;
            let k2 = (sum_dy_xhat / m as f64) as f32;
            for s in 0..n {
                let base = (s * c + ch) * plane;
                let xs = &x.data()[base..base + plane];
                let dys = &dy.data()[base..base + plane];
                let dxs = &mut dx.data_mut()[base..base + plane];
                for ((xi, dyi), dxi) in xs.iter().zip(dys).zip(dxs.iter_mut()) {
                    let xhat = (xi - mu) * inv;
                    *dxi = g * inv * (dyi - k1 - xhat * k2);
                }
            }
        } else {
            // Running statistics are constants in eval mode.
            for s in 0..n {
                let base = (s * c + ch) * plane;
                let dys = &dy.data()[base..base + plane];
                let dxs = &mut dx.data_mut()[base..base + plane];
                for (dyi, dxi) in dys.iter().zip(dxs.iter_mut()) {
                    *dxi = g * inv * dyi;
                }
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, o) in dx.data_mut().iter_mut().zip(y.data()) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub fn add_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Argument(format!(
            "residual add shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut y = a.clone();
    for (v, w) in y.data_mut().iter_mut().zip(b.data()) {
        *v += w;
    }
    Ok(y)
}

/// (N,C,H,W) -> (N,C) mean over spatial positions.
pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = nchw(x)?;
    let plane = h * w;
    let mut y = Tensor::zeros(&[n, c]);
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            let sum: f32 = x.data()[base..base + plane].iter().sum();
            y.data_mut()[s * c + ch] = sum / plane as f32;
        }
    }
    Ok(y)
}

pub fn global_avg_pool_backward(x_shape: &[usize], dy: &Tensor) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let plane = h * w;
    let mut dx = Tensor::zeros(x_shape);
    for s in 0..n {
        for ch in 0..c {
            let g = dy.data()[s * c + ch] / plane as f32;
            let base = (s * c + ch) * plane;
            dx.data_mut()[base..base + plane].fill(g);
        }
    }
    dx
}

/// x (N,D) * w^T (D,C) + b -> (N,C)
pub fn linear_forward(x: &Tensor, weight: &Tensor, bias: &[f32]) -> Result<Tensor> {
    let (n, d) = nd(x)?;
    let c = weight.shape()[0];
    if weight.shape() != [c, d] || bias.len() != c {
        return Err(Error::Argument(format!(
            "linear shape mismatch: input {:?}, weight {:?}, bias {}",
            x.shape(),
            weight.shape(),
            bias.len()
        )));
    }
    let mut y = Tensor::zeros(&[n, c]);
    sgemm_bt(n, d, c, 1.0, x.data(), weight.data(), 0.0, y.data_mut());
    for s in 0..n {
        for j in 0..c {
            y.data_mut()[s * c + j] += bias[j];
        }
    }
    Ok(y)
}

/// Returns (dx, dweight, dbias).
pub fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Vec<f32>)> {
    let (n, d) = nd(x)?;
    let c = weight.shape()[0];
    let mut dw = Tensor::zeros(&[c, d]);
    // dW = dY^T (C,N) * X (N,D)
    sgemm_at(c, n, d, 1.0, dy.data(), x.data(), 0.0, dw.data_mut());
    let mut db = vec![0.0f32; c];
    for s in 0..n {
        for j in 0..c {
            db[j] += dy.data()[s * c + j];
        }
    }
    let dx = if need_dx {
        let mut dx = Tensor::zeros(&[n, d]);
        sgemm_rm(n, c, d, 1.0, dy.data(), weight.data(), 0.0, dx.data_mut());
        Some(dx)
    } else {
        None
    };
    Ok((dx, dw, db))
}

/// Mean cross-entropy over the batch plus the logit gradient (already
/// divided by the batch size). The loss itself is accumulated in f64 so
/// downstream convergence checks are not limited by f32 quantization.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<(f64, Tensor)> {
    let (n, c) = nd(logits)?;
    if targets.len() != n {
        return Err(Error::Argument(format!(
            "{n} logits rows but {} targets",
            targets.len()
        )));
    }
    let mut dlogits = Tensor::zeros(&[n, c]);
    let mut loss = 0.0f64;
    for s in 0..n {
        let row = &logits.data()[s * c..(s + 1) * c];
        let t = targets[s] as usize;
        if t >= c {
            return Err(Error::Argument(format!(
                "target {t} out of range for {c} classes"
            )));
        }
        let max = row.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v));
        let mut denom = 0.0f64;
        for v in row {
            denom += ((v - max) as f64).exp();
        }
        loss += denom.ln() - (row[t] - max) as f64;
        let drow = &mut dlogits.data_mut()[s * c..(s + 1) * c];
        for (j, v) in row.iter().enumerate() {
            let p = (((v - max) as f64).exp() / denom) as f32;
            drow[j] = (p - if j == t { 1.0 } else { 0.0 }) / n as f32;
        }
    }
    Ok((loss / n as f64, dlogits))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<u32> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let row = &logits.data()[s * c..(s + 1) * c];
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        out.push(best as u32);
    }
    out
}

fn nchw(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Argument(format!("expected NCHW tensor, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

fn nd(x: &Tensor) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::Argument(format!("expected (N,D) tensor, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn conv_1x1_matches_hand_computation() {
        // One input channel, 1x1 kernel with value 2.0: output is 2*x.
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, -1.0, 0.5, 3.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let g = ConvGeom {
            in_ch: 1,
            out_ch: 1,
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        let y = conv2d_forward(&x, &w, &g).unwrap();
        assert_eq!(y.data(), &[2.0, -2.0, 1.0, 6.0]);
    }

    #[test]
    fn conv_3x3_padding_keeps_spatial_size() {
        let x = Tensor::filled(&[2, 3, 8, 8], 0.25);
        let w = Tensor::filled(&[4, 3, 3, 3], 0.1);
        let g = ConvGeom {
            in_ch: 3,
            out_ch: 4,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let y = conv2d_forward(&x, &w, &g).unwrap();
        assert_eq!(y.shape(), &[2, 4, 8, 8]);
        // Interior positions see all 27 taps: 27 * 0.25 * 0.1.
        assert_relative_eq!(y.at4(0, 0, 4, 4), 0.675, max_relative = 1e-5);
        // Corner sees a 2x2x3 window: 12 taps.
        assert_relative_eq!(y.at4(0, 0, 0, 0), 0.3, max_relative = 1e-5);
    }

    #[test]
    fn conv_stride_two_downsamples() {
        let x = Tensor::zeros(&[1, 2, 8, 8]);
        let w = Tensor::zeros(&[5, 2, 3, 3]);
        let g = ConvGeom {
            in_ch: 2,
            out_ch: 5,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let y = conv2d_forward(&x, &w, &g).unwrap();
        assert_eq!(y.shape(), &[1, 5, 4, 4]);
    }

    #[test]
    fn bn_train_normalizes_batch() {
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let (y, cache) =
            bn_forward_train(&x, &[1.0], &[0.0], &mut rm, &mut rv, BN_EPS, BN_MOMENTUM).unwrap();
        assert_relative_eq!(cache.mean[0], 4.0);
        assert_relative_eq!(cache.var[0], 5.0);
        let mean_y: f32 = y.data().iter().sum::<f32>() / 4.0;
        assert!(mean_y.abs() < 1e-6);
        // Running stats move toward the batch stats (unbiased var 20/3).
        assert_relative_eq!(rm[0], 0.4);
        assert_relative_eq!(rv[0], 0.9 + 0.1 * 20.0 / 3.0, max_relative = 1e-5);
    }

    #[test]
    fn bn_eval_uses_running_stats() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![2.0, 4.0]).unwrap();
        let (y, _) = bn_forward_eval(&x, &[2.0], &[1.0], &[2.0], &[4.0 - BN_EPS], BN_EPS).unwrap();
        // (x - 2)/2 * 2 + 1
        assert_relative_eq!(y.data()[0], 1.0, max_relative = 1e-5);
        assert_relative_eq!(y.data()[1], 3.0, max_relative = 1e-5);
    }

    #[test]
    fn linear_matches_hand_computation() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.5, -1.0]).unwrap();
        let y = linear_forward(&x, &w, &[0.1, 0.2]).unwrap();
        assert_relative_eq!(y.data()[0], 1.1);
        assert_relative_eq!(y.data()[1], -1.3);
    }

    #[test]
    fn softmax_ce_on_uniform_logits_is_log_c() {
        let logits = Tensor::zeros(&[3, 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 5, 9]).unwrap();
        assert_relative_eq!(loss, (10.0f64).ln(), max_relative = 1e-5);
    }

    #[test]
    fn softmax_ce_gradient_sums_to_zero_per_row() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.0, 1.0]).unwrap();
        let (_, d) = softmax_cross_entropy(&logits, &[2, 0]).unwrap();
        for s in 0..2 {
            let sum: f32 = d.data()[s * 3..(s + 1) * 3].iter().sum();
            assert!(sum.abs() < 1e-6);
        }
    }
}
