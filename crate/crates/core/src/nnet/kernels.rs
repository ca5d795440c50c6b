//! Forward and backward passes for the individual layer kernels.
//!
//! Shapes follow one convention throughout: sequence inputs are frames x
//! channels, convolution weights are stored `out_ch x (in_ch * kernel)` with
//! the kernel index fastest, dense weights are `outputs x inputs`. Backward
//! functions accumulate into the provided gradient buffers so a caller can
//! sum gradients over a batch before taking an SGD step.

use crate::error::{DidError, Result};
use crate::nnet::tensor::Tensor2;

/// Variance floor used by the standard deviation pooling branch.
const STD_POOL_EPS: f64 = 1e-8;

/// 1-D convolution over time.
///
/// `x` is frames x in_ch, `w` is out_ch x (in_ch * kernel), `b` has one entry
/// per output channel. Output frame `t` sees input frames
/// `t*stride .. t*stride+kernel`, so the output length is
/// `(frames - kernel) / stride + 1`.
pub fn conv1d(x: &Tensor2, w: &Tensor2, b: &[f64], kernel: usize, stride: usize) -> Result<Tensor2> {
    check_conv_shapes(x, w, b, kernel, stride)?;
    let t_out = (x.rows() - kernel) / stride + 1;
    let in_ch = x.cols();
    let out_ch = w.rows();
    let mut out = Tensor2::zeros(t_out, out_ch);
    for t in 0..t_out {
        let start = t * stride;
        for o in 0..out_ch {
            let wrow = w.row(o);
            let mut acc = b[o];
            for k in 0..kernel {
                let xrow = x.row(start + k);
                for c in 0..in_ch {
                    acc += xrow[c] * wrow[c * kernel + k];
                }
            }
            out.set(t, o, acc);
        }
    }
    Ok(out)
}

/// Gradients of [`conv1d`], accumulated into `gx`, `gw` and `gb`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    x: &Tensor2,
    w: &Tensor2,
    kernel: usize,
    stride: usize,
    gout: &Tensor2,
    gx: &mut Tensor2,
    gw: &mut Tensor2,
    gb: &mut [f64],
) -> Result<()> {
    check_conv_shapes(x, w, gb, kernel, stride)?;
    let t_out = (x.rows() - kernel) / stride + 1;
    if gout.shape() != (t_out, w.rows()) {
        return Err(DidError::Shape(format!(
            "conv1d backward: upstream gradient is {:?}, expected {:?}",
            gout.shape(),
            (t_out, w.rows())
        )));
    }
    if gx.shape() != x.shape() || gw.shape() != w.shape() {
        return Err(DidError::Shape(
            "conv1d backward: gradient buffers must match input shapes".into(),
        ));
    }
    let in_ch = x.cols();
    for t in 0..t_out {
        let start = t * stride;
        for o in 0..w.rows() {
            let g = gout.get(t, o);
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            for k in 0..kernel {
                for c in 0..in_ch {
                    gw.add_at(o, c * kernel + k, g * x.get(start + k, c));
                    gx.add_at(start + k, c, g * w.get(o, c * kernel + k));
                }
            }
        }
    }
    Ok(())
}

fn check_conv_shapes(x: &Tensor2, w: &Tensor2, b: &[f64], kernel: usize, stride: usize) -> Result<()> {
    if kernel == 0 || stride == 0 {
        return Err(DidError::Shape(format!(
            "conv1d: kernel ({kernel}) and stride ({stride}) must be at least 1"
        )));
    }
    if x.rows() < kernel {
        return Err(DidError::Shape(format!(
            "conv1d: {} input frames is fewer than the kernel width {kernel}",
            x.rows()
        )));
    }
    if w.cols() != x.cols() * kernel {
        return Err(DidError::Shape(format!(
            "conv1d: weights {:?} do not match input {:?} with kernel {kernel} \
             (expected {} weight columns)",
            w.shape(),
            x.shape(),
            x.cols() * kernel
        )));
    }
    if b.len() != w.rows() {
        return Err(DidError::Shape(format!(
            "conv1d: {} bias entries for {} output channels",
            b.len(),
            w.rows()
        )));
    }
    Ok(())
}

/// Affine map `y = Wx + b` with `w` shaped outputs x inputs.
pub fn dense(x: &[f64], w: &Tensor2, b: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() || w.rows() != b.len() {
        return Err(DidError::Shape(format!(
            "dense: weights {:?} against input of {} and bias of {}",
            w.shape(),
            x.len(),
            b.len()
        )));
    }
    let mut out = b.to_vec();
    for (i, o) in out.iter_mut().enumerate() {
        let row = w.row(i);
        *o += row.iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>();
    }
    Ok(out)
}

/// Gradients of [`dense`], accumulated into `gx`, `gw` and `gb`.
pub fn dense_backward(
    x: &[f64],
    w: &Tensor2,
    gout: &[f64],
    gx: &mut [f64],
    gw: &mut Tensor2,
    gb: &mut [f64],
) -> Result<()> {
    if w.cols() != x.len() || w.rows() != gout.len() {
        return Err(DidError::Shape(format!(
            "dense backward: weights {:?} against input of {} and gradient of {}",
            w.shape(),
            x.len(),
            gout.len()
        )));
    }
    if gx.len() != x.len() || gw.shape() != w.shape() || gb.len() != gout.len() {
        return Err(DidError::Shape(
            "dense backward: gradient buffers must match input shapes".into(),
        ));
    }
    for (i, &g) in gout.iter().enumerate() {
        gb[i] += g;
        let wrow = w.row(i);
        let gwrow = gw.row_mut(i);
        for j in 0..x.len() {
            gwrow[j] += g * x[j];
            gx[j] += g * wrow[j];
        }
    }
    Ok(())
}

/// Elementwise `max(0, x)` in place.
pub fn relu_inplace(xs: &mut [f64]) {
    for x in xs {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes upstream gradient entries wherever the forward output was clipped.
/// `out` must be the rectified activation; positions with `out == 0` get no
/// gradient, which also fixes the subgradient at exactly zero to 0.
pub fn relu_backward_inplace(out: &[f64], g: &mut [f64]) {
    for (gv, &ov) in g.iter_mut().zip(out) {
        if ov <= 0.0 {
            *gv = 0.0;
        }
    }
}

/// Numerically stable softmax. The maximum is subtracted before
/// exponentiation, so any finite input yields strictly positive outputs that
/// sum to one.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    debug_assert!(!x.is_empty());
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Fused softmax + cross-entropy. Returns `(loss, probabilities)` where
/// `loss = -ln p[label]`; the gradient with respect to the logits is simply
/// `p - onehot(label)`, which callers form themselves.
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(DidError::Shape(format!(
            "softmax_xent: label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = log_sum - (logits[label] - max);
    let probs = softmax(logits);
    Ok((loss, probs))
}

/// Mean over time: frames x channels collapses to one value per channel.
pub fn mean_pool(x: &Tensor2) -> Result<Vec<f64>> {
    if x.rows() == 0 {
        return Err(DidError::Shape("mean_pool: empty input".into()));
    }
    let t = x.rows() as f64;
    let mut out = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (o, v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= t);
    Ok(out)
}

/// Gradient of [`mean_pool`]: every frame receives `g[c] / T`.
pub fn mean_pool_backward(g: &[f64], gx: &mut Tensor2) -> Result<()> {
    if gx.cols() != g.len() || gx.rows() == 0 {
        return Err(DidError::Shape(format!(
            "mean_pool backward: gradient of {} against buffer {:?}",
            g.len(),
            gx.shape()
        )));
    }
    let t = gx.rows() as f64;
    for r in 0..gx.rows() {
        for (slot, &gv) in gx.row_mut(r).iter_mut().zip(g) {
            *slot += gv / t;
        }
    }
    Ok(())
}

/// Mean and standard deviation over time, concatenated as
/// `[mu_0..mu_C, sigma_0..sigma_C]`. The variance is the population variance
/// floored by a small epsilon before the square root, so the backward pass
/// never divides by zero.
pub fn mean_std_pool(x: &Tensor2) -> Result<Vec<f64>> {
    if x.rows() == 0 {
        return Err(DidError::Shape("mean_std_pool: empty input".into()));
    }
    let t = x.rows() as f64;
    let c = x.cols();
    let mean = mean_pool(x)?;
    let mut var = vec![0.0; c];
    for r in 0..x.rows() {
        for (j, &v) in x.row(r).iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    let mut out = mean;
    out.extend(var.iter().map(|v| (v / t + STD_POOL_EPS).sqrt()));
    Ok(out)
}

/// Gradient of [`mean_std_pool`]. `pooled` must be the forward output and
/// `g` the upstream gradient of the same length (`2 * channels`).
pub fn mean_std_pool_backward(
    x: &Tensor2,
    pooled: &[f64],
    g: &[f64],
    gx: &mut Tensor2,
) -> Result<()> {
    let c = x.cols();
    if pooled.len() != 2 * c || g.len() != 2 * c || gx.shape() != x.shape() {
        return Err(DidError::Shape(format!(
            "mean_std_pool backward: input {:?}, pooled {}, gradient {}",
            x.shape(),
            pooled.len(),
            g.len()
        )));
    }
    let t = x.rows() as f64;
    for r in 0..x.rows() {
        for j in 0..c {
            let mu = pooled[j];
            let sd = pooled[c + j];
            let dmu = g[j] / t;
            let dsd = g[c + j] * (x.get(r, j) - mu) / (t * sd);
            gx.add_at(r, j, dmu + dsd);
        }
    }
    Ok(())
}
