//! Differentiable tensor operations.
//!
//! Every op validates shapes, computes the forward result, and (when the
//! tape is recording and an input participates in the gradient) records a
//! backward closure. Convolutions are direct: no im2col, no FFT. Layout is
//! NCHW row-major throughout.

use crate::error::{Error, Result};
use crate::tensor::{real, GradStore, Real, Tape, Tensor};

/// Output spatial extent of a convolution: floor((size + 2p - k)/s) + 1.
pub fn conv_out_dim(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn output<T: Real>(op: &'static str, shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
    Tensor::from_vec(shape, data).map_err(|e| match e {
        Error::NonFinite { .. } => Error::NonFinite { op: op.into() },
        other => other,
    })
}

fn any_tracked<T: Real>(tape: &Tape<T>, inputs: &[&Tensor<T>]) -> bool {
    tape.is_recording() && inputs.iter().any(|t| t.requires_grad())
}

/// Valid output range along one axis for kernel offset `k_off`:
/// all `o` with `0 <= o*stride + k_off - padding < extent`.
#[inline]
fn valid_range(extent: usize, out_extent: usize, k_off: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > k_off { (padding - k_off).div_ceil(stride) } else { 0 };
    if extent + padding <= k_off {
        return (0, 0);
    }
    let hi = ((extent - 1 + padding - k_off) / stride + 1).min(out_extent);
    (lo, hi)
}

/// out[oh,ow] += wv * in[oh*s+kh-p, ow*s+kw-p] over the valid window.
#[inline]
fn acc_plane<T: Real>(
    out_plane: &mut [T],
    in_plane: &[T],
    wv: T,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
) {
    let (oh_lo, oh_hi) = valid_range(h, ho, kh, stride, padding);
    let (ow_lo, ow_hi) = valid_range(w, wo, kw, stride, padding);
    if oh_lo >= oh_hi || ow_lo >= ow_hi {
        return;
    }
    for oh in oh_lo..oh_hi {
        let ih = oh * stride + kh - padding;
        let in_row = &in_plane[ih * w..ih * w + w];
        let out_row = &mut out_plane[oh * wo..oh * wo + wo];
        if stride == 1 {
            let iw0 = ow_lo + kw - padding;
            let len = ow_hi - ow_lo;
            for (o, i) in out_row[ow_lo..ow_lo + len].iter_mut().zip(&in_row[iw0..iw0 + len]) {
                *o += wv * *i;
            }
        } else {
            for ow in ow_lo..ow_hi {
                out_row[ow] += wv * in_row[ow * stride + kw - padding];
            }
        }
    }
}

/// in_grad[oh*s+kh-p, ow*s+kw-p] += wv * gout[oh,ow] (transpose of `acc_plane`).
#[inline]
fn acc_plane_transposed<T: Real>(
    in_grad: &mut [T],
    gout_plane: &[T],
    wv: T,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
) {
    let (oh_lo, oh_hi) = valid_range(h, ho, kh, stride, padding);
    let (ow_lo, ow_hi) = valid_range(w, wo, kw, stride, padding);
    for oh in oh_lo..oh_hi {
        let ih = oh * stride + kh - padding;
        let gin_row = &mut in_grad[ih * w..ih * w + w];
        let g_row = &gout_plane[oh * wo..oh * wo + wo];
        for ow in ow_lo..ow_hi {
            let iw = ow * stride + kw - padding;
            gin_row[iw] += wv * g_row[ow];
        }
    }
}

/// sum over the valid window of gout[oh,ow] * in[oh*s+kh-p, ow*s+kw-p].
#[inline]
fn dot_plane<T: Real>(
    gout_plane: &[T],
    in_plane: &[T],
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
) -> T {
    let (oh_lo, oh_hi) = valid_range(h, ho, kh, stride, padding);
    let (ow_lo, ow_hi) = valid_range(w, wo, kw, stride, padding);
    let mut acc = T::zero();
    for oh in oh_lo..oh_hi {
        let ih = oh * stride + kh - padding;
        let in_row = &in_plane[ih * w..ih * w + w];
        let g_row = &gout_plane[oh * wo..oh * wo + wo];
        if stride == 1 {
            let iw0 = ow_lo + kw - padding;
            let len = ow_hi - ow_lo;
            let mut s = T::zero();
            for (g, i) in g_row[ow_lo..ow_lo + len].iter().zip(&in_row[iw0..iw0 + len]) {
                s += *g * *i;
            }
            acc += s;
        } else {
            for ow in ow_lo..ow_hi {
                acc += g_row[ow] * in_row[ow * stride + kw - padding];
            }
        }
    }
    acc
}

fn check_bias<T: Real>(op: &'static str, bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("bias shape {:?} does not match {cout} output channels", b.shape()),
            });
        }
    }
    Ok(())
}

/// 2-d convolution, input `[N,Cin,H,W]` x weight `[Cout,Cin,K,K]` ->
/// `[N,Cout,H',W']` with `H' = floor((H + 2p - K)/s) + 1`.
pub fn conv2d<T: Real>(
    tape: &mut Tape<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, cin, h, w) = input.dims4("conv2d")?;
    let (cout, wcin, k, k2) = weight.dims4("conv2d")?;
    if k != k2 || k % 2 == 0 {
        return Err(Error::InvalidArg {
            op: "conv2d",
            detail: format!("kernel must be square with odd size, got {k}x{k2}"),
        });
    }
    if wcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "weight expects {wcin} input channels (shape {:?}) but input has {cin} (shape {:?})",
                weight.shape(),
                input.shape()
            ),
        });
    }
    check_bias("conv2d", bias, cout)?;
    let (ho, wo) = match (conv_out_dim(h, k, stride, padding), conv_out_dim(w, k, stride, padding)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::InvalidArg {
                op: "conv2d",
                detail: format!("kernel {k} exceeds padded input {h}x{w} (padding {padding}, stride {stride})"),
            })
        }
    };

    let mut out_buf = vec![T::zero(); n * cout * ho * wo];
    {
        let in_data = input.data();
        let w_data = weight.data();
        let b_data = bias.map(|b| b.to_vec());
        for nn in 0..n {
            for co in 0..cout {
                let plane = &mut out_buf[(nn * cout + co) * ho * wo..(nn * cout + co + 1) * ho * wo];
                if let Some(b) = &b_data {
                    plane.fill(b[co]);
                }
                for ci in 0..cin {
                    let in_plane = &in_data[(nn * cin + ci) * h * w..(nn * cin + ci + 1) * h * w];
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = w_data[((co * cin + ci) * k + kh) * k + kw];
                            acc_plane(plane, in_plane, wv, (h, w), (ho, wo), (kh, kw), stride, padding);
                        }
                    }
                }
            }
        }
    }

    let mut out = output("conv2d", &[n, cout, ho, wo], out_buf)?;
    let track = any_tracked(tape, &[input, weight].iter().copied().chain(bias).collect::<Vec<_>>());
    out.set_tracked(track);
    if track {
        let input = input.clone();
        let weight = weight.clone();
        let bias = bias.cloned();
        tape.record(&out, move |gout, store| {
            let in_data = input.data();
            let w_data = weight.data();
            if weight.requires_grad() {
                let gw = store.buffer_mut(weight.id(), cout * cin * k * k);
                for co in 0..cout {
                    for ci in 0..cin {
                        for kh in 0..k {
                            for kw in 0..k {
                                let mut acc = T::zero();
                                for nn in 0..n {
                                    let g_plane = &gout[(nn * cout + co) * ho * wo..(nn * cout + co + 1) * ho * wo];
                                    let in_plane = &in_data[(nn * cin + ci) * h * w..(nn * cin + ci + 1) * h * w];
                                    acc += dot_plane(g_plane, in_plane, (h, w), (ho, wo), (kh, kw), stride, padding);
                                }
                                gw[((co * cin + ci) * k + kh) * k + kw] += acc;
                            }
                        }
                    }
                }
            }
            if let Some(b) = &bias {
                if b.requires_grad() {
                    let gb = store.buffer_mut(b.id(), cout);
                    for nn in 0..n {
                        for co in 0..cout {
                            let g_plane = &gout[(nn * cout + co) * ho * wo..(nn * cout + co + 1) * ho * wo];
                            let mut s = T::zero();
                            for g in g_plane {
                                s += *g;
                            }
                            gb[co] += s;
                        }
                    }
                }
            }
            if input.requires_grad() {
                let gin = store.buffer_mut(input.id(), n * cin * h * w);
                for nn in 0..n {
                    for ci in 0..cin {
                        let gin_plane = &mut gin[(nn * cin + ci) * h * w..(nn * cin + ci + 1) * h * w];
                        for co in 0..cout {
                            let g_plane = &gout[(nn * cout + co) * ho * wo..(nn * cout + co + 1) * ho * wo];
                            for kh in 0..k {
                                for kw in 0..k {
                                    let wv = w_data[((co * cin + ci) * k + kh) * k + kw];
                                    acc_plane_transposed(gin_plane, g_plane, wv, (h, w), (ho, wo), (kh, kw), stride, padding);
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    Ok(out)
}

/// Depthwise 2-d convolution, weight `[C,1,K,K]`: output channel `c`
/// depends only on input channel `c`.
pub fn depthwise_conv2d<T: Real>(
    tape: &mut Tape<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("depthwise_conv2d")?;
    let (wc, one, k, k2) = weight.dims4("depthwise_conv2d")?;
    if one != 1 || k != k2 {
        return Err(Error::InvalidArg {
            op: "depthwise_conv2d",
            detail: format!("weight must be [C,1,K,K], got {:?}", weight.shape()),
        });
    }
    if wc != c {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv2d",
            detail: format!("weight has {wc} channels but input has {c} (shape {:?})", input.shape()),
        });
    }
    check_bias("depthwise_conv2d", bias, c)?;
    let (ho, wo) = match (conv_out_dim(h, k, stride, padding), conv_out_dim(w, k, stride, padding)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::InvalidArg {
                op: "depthwise_conv2d",
                detail: format!("kernel {k} exceeds padded input {h}x{w}"),
            })
        }
    };

    let mut out_buf = vec![T::zero(); n * c * ho * wo];
    {
        let in_data = input.data();
        let w_data = weight.data();
        let b_data = bias.map(|b| b.to_vec());
        for nn in 0..n {
            for ci in 0..c {
                let plane = &mut out_buf[(nn * c + ci) * ho * wo..(nn * c + ci + 1) * ho * wo];
                if let Some(b) = &b_data {
                    plane.fill(b[ci]);
                }
                let in_plane = &in_data[(nn * c + ci) * h * w..(nn * c + ci + 1) * h * w];
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = w_data[(ci * k + kh) * k + kw];
                        acc_plane(plane, in_plane, wv, (h, w), (ho, wo), (kh, kw), stride, padding);
                    }
                }
            }
        }
    }

    let mut out = output("depthwise_conv2d", &[n, c, ho, wo], out_buf)?;
    let track = any_tracked(tape, &[input, weight].iter().copied().chain(bias).collect::<Vec<_>>());
    out.set_tracked(track);
    if track {
        let input = input.clone();
        let weight = weight.clone();
        let bias = bias.cloned();
        tape.record(&out, move |gout, store| {
            let in_data = input.data();
            let w_data = weight.data();
            if weight.requires_grad() {
                let gw = store.buffer_mut(weight.id(), c * k * k);
                for ci in 0..c {
                    for kh in 0..k {
                        for kw in 0..k {
                            let mut acc = T::zero();
                            for nn in 0..n {
                                let g_plane = &gout[(nn * c + ci) * ho * wo..(nn * c + ci + 1) * ho * wo];
                                let in_plane = &in_data[(nn * c + ci) * h * w..(nn * c + ci + 1) * h * w];
                                acc += dot_plane(g_plane, in_plane, (h, w), (ho, wo), (kh, kw), stride, padding);
                            }
                            gw[(ci * k + kh) * k + kw] += acc;
                        }
                    }
                }
            }
            if let Some(b) = &bias {
                if b.requires_grad() {
                    let gb = store.buffer_mut(b.id(), c);
                    for nn in 0..n {
                        for ci in 0..c {
                            let g_plane = &gout[(nn * c + ci) * ho * wo..(nn * c + ci + 1) * ho * wo];
                            let mut s = T::zero();
                            for g in g_plane {
                                s += *g;
                            }
                            gb[ci] += s;
                        }
                    }
                }
            }
            if input.requires_grad() {
                let gin = store.buffer_mut(input.id(), n * c * h * w);
                for nn in 0..n {
                    for ci in 0..c {
                        let gin_plane = &mut gin[(nn * c + ci) * h * w..(nn * c + ci + 1) * h * w];
                        let g_plane = &gout[(nn * c + ci) * ho * wo..(nn * c + ci + 1) * ho * wo];
                        for kh in 0..k {
                            for kw in 0..k {
                                let wv = w_data[(ci * k + kh) * k + kw];
                                acc_plane_transposed(gin_plane, g_plane, wv, (h, w), (ho, wo), (kh, kw), stride, padding);
                            }
                        }
                    }
                }
            }
        });
    }
    Ok(out)
}

/// 1x1 convolution (the channel-mixing half of a separable pair).
pub fn pointwise_conv2d<T: Real>(
    tape: &mut Tape<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (_, _, k, k2) = weight.dims4("pointwise_conv2d")?;
    if k != 1 || k2 != 1 {
        return Err(Error::InvalidArg {
            op: "pointwise_conv2d",
            detail: format!("weight must be [Cout,Cin,1,1], got {:?}", weight.shape()),
        });
    }
    conv2d(tape, input, weight, bias, 1, 0)
}

/// Shared normalize-and-affine kernel for batch norm. `mean`/`invstd` are
/// per-channel; the masked and plain paths both go through here, so a mask
/// of all ones is bitwise identical to no mask.
fn bn_apply<T: Real>(
    input: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    mean: &[T],
    invstd: &[T],
    scale: &[T],
    shift: &[T],
) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); input.len()];
    for nn in 0..n {
        for ci in 0..c {
            let a = scale[ci] * invstd[ci];
            let b = shift[ci] - scale[ci] * invstd[ci] * mean[ci];
            let src = &input[(nn * c + ci) * hw..(nn * c + ci + 1) * hw];
            let dst = &mut out[(nn * c + ci) * hw..(nn * c + ci + 1) * hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = a * *s + b;
            }
        }
    }
    out
}

/// Batch normalization over `[N,C,H,W]` with caller-supplied effective
/// per-channel scale/shift (masking happens upstream of this op).
///
/// Training mode normalizes with batch statistics and updates the running
/// statistics in place (`running = (1-momentum)*running + momentum*batch`,
/// unbiased variance for the running update). Inference mode uses the
/// running statistics and mutates nothing.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d<T: Real>(
    tape: &mut Tape<T>,
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
    momentum: f64,
    training: bool,
) -> Result<Tensor<T>> {
    let dims = input.dims4("batch_norm2d")?;
    let (n, c, h, w) = dims;
    for (name, t) in [("scale", scale), ("shift", shift), ("running_mean", running_mean), ("running_var", running_var)] {
        if t.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm2d",
                detail: format!("{name} shape {:?} does not match {c} channels", t.shape()),
            });
        }
    }
    let m = n * h * w;
    if training && m < 2 {
        return Err(Error::InvalidArg {
            op: "batch_norm2d",
            detail: format!("training mode needs N*H*W >= 2, got {m}"),
        });
    }
    let eps_t: T = real(eps);
    let hw = h * w;

    let (mean, invstd) = {
        let in_data = input.data();
        if training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let m_t: T = real(m as f64);
            for ci in 0..c {
                let mut s = T::zero();
                for nn in 0..n {
                    for v in &in_data[(nn * c + ci) * hw..(nn * c + ci + 1) * hw] {
                        s += *v;
                    }
                }
                let mu = s / m_t;
                let mut sq = T::zero();
                for nn in 0..n {
                    for v in &in_data[(nn * c + ci) * hw..(nn * c + ci + 1) * hw] {
                        let d = *v - mu;
                        sq += d * d;
                    }
                }
                mean[ci] = mu;
                var[ci] = sq / m_t;
                debug_assert!(var[ci] >= T::zero());
            }
            // running-stat update (unbiased variance, PyTorch convention)
            let mom: T = real(momentum);
            let keep = T::one() - mom;
            let unbias: T = real(m as f64 / (m as f64 - 1.0));
            let new_rm: Vec<T> = running_mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(r, b)| keep * *r + mom * *b)
                .collect();
            let new_rv: Vec<T> = running_var
                .data()
                .iter()
                .zip(&var)
                .map(|(r, b)| keep * *r + mom * *b * unbias)
                .collect();
            running_mean.assign(&new_rm);
            running_var.assign(&new_rv);
            let invstd: Vec<T> = var.iter().map(|v| (*v + eps_t).sqrt().recip()).collect();
            (mean, invstd)
        } else {
            let mean = running_mean.to_vec();
            let invstd: Vec<T> = running_var.data().iter().map(|v| (*v + eps_t).sqrt().recip()).collect();
            (mean, invstd)
        }
    };

    let out_buf = bn_apply(&input.data(), dims, &mean, &invstd, &scale.data(), &shift.data());
    let mut out = output("batch_norm2d", &[n, c, h, w], out_buf)?;
    let track = any_tracked(tape, &[input, scale, shift]);
    out.set_tracked(track);
    if track {
        let input = input.clone();
        let scale_t = scale.clone();
        let shift_t = shift.clone();
        tape.record(&out, move |gout, store| {
            let in_data = input.data();
            let scale_data = scale_t.data();
            let m_t: T = real(m as f64);
            // per-channel reductions over the upstream gradient
            for ci in 0..c {
                let mu = mean[ci];
                let istd = invstd[ci];
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for nn in 0..n {
                    let base = (nn * c + ci) * hw;
                    let g_row = &gout[base..base + hw];
                    let x_row = &in_data[base..base + hw];
                    for (g, x) in g_row.iter().zip(x_row) {
                        sum_g += *g;
                        sum_gx += *g * (*x - mu) * istd;
                    }
                }
                if shift_t.requires_grad() {
                    store.buffer_mut(shift_t.id(), c)[ci] += sum_g;
                }
                if scale_t.requires_grad() {
                    store.buffer_mut(scale_t.id(), c)[ci] += sum_gx;
                }
                if input.requires_grad() {
                    let a = scale_data[ci] * istd;
                    let gin = store.buffer_mut(input.id(), n * c * hw);
                    if training {
                        let mean_g = sum_g / m_t;
                        let mean_gx = sum_gx / m_t;
                        for nn in 0..n {
                            let base = (nn * c + ci) * hw;
                            for i in 0..hw {
                                let xhat = (in_data[base + i] - mu) * istd;
                                gin[base + i] += a * (gout[base + i] - mean_g - xhat * mean_gx);
                            }
                        }
                    } else {
                        for nn in 0..n {
                            let base = (nn * c + ci) * hw;
                            for i in 0..hw {
                                gin[base + i] += a * gout[base + i];
                            }
                        }
                    }
                }
            }
        });
    }
    Ok(out)
}

/// ReLU with the subgradient at 0 defined as 0.
pub fn relu<T: Real>(tape: &mut Tape<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let data: Vec<T> = input.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    let mut out = output("relu", input.shape(), data)?;
    let track = any_tracked(tape, &[input]);
    out.set_tracked(track);
    if track {
        let input = input.clone();
        tape.record(&out, move |gout, store| {
            let in_data = input.data();
            let gin = store.buffer_mut(input.id(), in_data.len());
            for i in 0..in_data.len() {
                if in_data[i] > T::zero() {
                    gin[i] += gout[i];
                }
            }
        });
    }
    Ok(out)
}

fn check_same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Real>(tape: &mut Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("add", a, b)?;
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x + *y).collect();
    let mut out = output("add", a.shape(), data)?;
    let track = any_tracked(tape, &[a, b]);
    out.set_tracked(track);
    if track {
        let a = a.clone();
        let b = b.clone();
        tape.record(&out, move |gout, store| {
            if a.requires_grad() {
                store.accumulate(a.id(), gout);
            }
            if b.requires_grad() {
                store.accumulate(b.id(), gout);
            }
        });
    }
    Ok(out)
}

/// Elementwise product of two same-shape tensors.
pub fn mul<T: Real>(tape: &mut Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("mul", a, b)?;
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x * *y).collect();
    let mut out = output("mul", a.shape(), data)?;
    let track = any_tracked(tape, &[a, b]);
    out.set_tracked(track);
    if track {
        let a = a.clone();
        let b = b.clone();
        tape.record(&out, move |gout, store| {
            if a.requires_grad() {
                let b_data = b.data();
                let ga = store.buffer_mut(a.id(), gout.len());
                for i in 0..gout.len() {
                    ga[i] += gout[i] * b_data[i];
                }
            }
            if b.requires_grad() {
                let a_data = a.data();
                let gb = store.buffer_mut(b.id(), gout.len());
                for i in 0..gout.len() {
                    gb[i] += gout[i] * a_data[i];
                }
            }
        });
    }
    Ok(out)
}

/// Multiply by a compile-time-known constant.
pub fn scale<T: Real>(tape: &mut Tape<T>, input: &Tensor<T>, factor: f64) -> Result<Tensor<T>> {
    let f: T = real(factor);
    let data: Vec<T> = input.data().iter().map(|&v| f * v).collect();
    let mut out = output("scale", input.shape(), data)?;
    let track = any_tracked(tape, &[input]);
    out.set_tracked(track);
    if track {
        let input = input.clone();
        tape.record(&out, move |gout, store| {
            if input.requires_grad() {
                let gin = store.buffer_mut(input.id(), gout.len());
                for i in 0..gout.len() {
                    gin[i] += f * gout[i];
                }
            }
        });
    }
    Ok(out)
}

/// Sum of all elements, shape `[1]`.
pub fn sum_all<T: Real>(tape: &mut Tape<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut s = T::zero();
    for v in input.data().iter() {
        s += *v;
    }
    let mut out = output("sum_all", &[1], vec![s])?;
    let track = any_tracked(tape, &[input]);
    out.set_tracked(track);
    if track {
        let input = input.clone();
        tape.record(&out, move |gout, store| {
            if input.requires_grad() {
                let g = gout[0];
                let gin = store.buffer_mut(input.id(), input.numel());
                for v in gin.iter_mut() {
                    *v += g;
                }
            }
        });
    }
    Ok(out)
}

/// Mean squared error, shape `[1]`.
pub fn mse_loss<T: Real>(tape: &mut Tape<T>, pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("mse_loss", pred, target)?;
    let numel = pred.numel();
    let inv_n: T = real(1.0 / numel as f64);
    let mut s = T::zero();
    for (p, t) in pred.data().iter().zip(target.data().iter()) {
        let d = *p - *t;
        s += d * d;
    }
    let mut out = output("mse_loss", &[1], vec![s * inv_n])?;
    let track = any_tracked(tape, &[pred, target]);
    out.set_tracked(track);
    if track {
        let pred = pred.clone();
        let target = target.clone();
        tape.record(&out, move |gout, store| {
            let g = gout[0];
            let two: T = real(2.0);
            let p_data = pred.data();
            let t_data = target.data();
            if pred.requires_grad() {
                let gp = store.buffer_mut(pred.id(), numel);
                for i in 0..numel {
                    gp[i] += g * two * inv_n * (p_data[i] - t_data[i]);
                }
            }
            if target.requires_grad() {
                let gt = store.buffer_mut(target.id(), numel);
                for i in 0..numel {
                    gt[i] += g * two * inv_n * (t_data[i] - p_data[i]);
                }
            }
        });
    }
    Ok(out)
}

/// Average pooling with a square window equal to the stride; trailing rows
/// and columns that do not fill a window are dropped.
pub fn avgpool2d<T: Real>(tape: &mut Tape<T>, input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("avgpool2d")?;
    if factor == 0 || h < factor || w < factor {
        return Err(Error::InvalidArg {
            op: "avgpool2d",
            detail: format!("factor {factor} invalid for input {h}x{w}"),
        });
    }
    let ho = h / factor;
    let wo = w / factor;
    let inv: T = real(1.0 / (factor * factor) as f64);
    let mut out_buf = vec![T::zero(); n * c * ho * wo];
    {
        let in_data = input.data();
        for p in 0..n * c {
            let in_plane = &in_data[p * h * w..(p + 1) * h * w];
            let out_plane = &mut out_buf[p * ho * wo..(p + 1) * ho * wo];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut s = T::zero();
                    for dh in 0..factor {
                        for dw in 0..factor {
                            s += in_plane[(oh * factor + dh) * w + ow * factor + dw];
                        }
                    }
                    out_plane[oh * wo + ow] = s * inv;
                }
            }
        }
    }
    let mut out = output("avgpool2d", &[n, c, ho, wo], out_buf)?;
    let track = any_tracked(tape, &[input]);
    out.set_tracked(track);
    if track {
        let input = input.clone();
        tape.record(&out, move |gout, store| {
            if !input.requires_grad() {
                return;
            }
            let gin = store.buffer_mut(input.id(), n * c * h * w);
            for p in 0..n * c {
                let g_plane = &gout[p * ho * wo..(p + 1) * ho * wo];
                let gin_plane = &mut gin[p * h * w..(p + 1) * h * w];
                for oh in 0..ho {
                    for ow in 0..wo {
                        let g = g_plane[oh * wo + ow] * inv;
                        for dh in 0..factor {
                            for dw in 0..factor {
                                gin_plane[(oh * factor + dh) * w + ow * factor + dw] += g;
                            }
                        }
                    }
                }
            }
        });
    }
    Ok(out)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest2d<T: Real>(tape: &mut Tape<T>, input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("upsample_nearest2d")?;
    if factor == 0 {
        return Err(Error::InvalidArg { op: "upsample_nearest2d", detail: "factor must be >= 1".into() });
    }
    let ho = h * factor;
    let wo = w * factor;
    let mut out_buf = vec![T::zero(); n * c * ho * wo];
    {
        let in_data = input.data();
        for p in 0..n * c {
            let in_plane = &in_data[p * h * w..(p + 1) * h * w];
            let out_plane = &mut out_buf[p * ho * wo..(p + 1) * ho * wo];
            for oh in 0..ho {
                let ih = oh / factor;
                for ow in 0..wo {
                    out_plane[oh * wo + ow] = in_plane[ih * w + ow / factor];
                }
            }
        }
    }
    let mut out = output("upsample_nearest2d", &[n, c, ho, wo], out_buf)?;
    let track = any_tracked(tape, &[input]);
    out.set_tracked(track);
    if track {
        let input = input.clone();
        tape.record(&out, move |gout, store| {
            if !input.requires_grad() {
                return;
            }
            let gin = store.buffer_mut(input.id(), n * c * h * w);
            for p in 0..n * c {
                let g_plane = &gout[p * ho * wo..(p + 1) * ho * wo];
                let gin_plane = &mut gin[p * h * w..(p + 1) * h * w];
                for oh in 0..ho {
                    let ih = oh / factor;
                    for ow in 0..wo {
                        gin_plane[ih * w + ow / factor] += g_plane[oh * wo + ow];
                    }
                }
            }
        });
    }
    Ok(out)
}

/// Concatenate two NCHW tensors along the channel dimension.
pub fn concat_channels<T: Real>(tape: &mut Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
    if n != nb || h != hb || w != wb {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            detail: format!("{:?} vs {:?} (all dims except channels must match)", a.shape(), b.shape()),
        });
    }
    let hw = h * w;
    let c_out = ca + cb;
    let mut out_buf = vec![T::zero(); n * c_out * hw];
    {
        let a_data = a.data();
        let b_data = b.data();
        for nn in 0..n {
            out_buf[nn * c_out * hw..nn * c_out * hw + ca * hw]
                .copy_from_slice(&a_data[nn * ca * hw..(nn + 1) * ca * hw]);
            out_buf[nn * c_out * hw + ca * hw..(nn + 1) * c_out * hw]
                .copy_from_slice(&b_data[nn * cb * hw..(nn + 1) * cb * hw]);
        }
    }
    let mut out = output("concat_channels", &[n, c_out, h, w], out_buf)?;
    let track = any_tracked(tape, &[a, b]);
    out.set_tracked(track);
    if track {
        let a = a.clone();
        let b = b.clone();
        tape.record(&out, move |gout, store| {
            if a.requires_grad() {
                let ga = store.buffer_mut(a.id(), n * ca * hw);
                for nn in 0..n {
                    let src = &gout[nn * c_out * hw..nn * c_out * hw + ca * hw];
                    for (g, s) in ga[nn * ca * hw..(nn + 1) * ca * hw].iter_mut().zip(src) {
                        *g += *s;
                    }
                }
            }
            if b.requires_grad() {
                let gb = store.buffer_mut(b.id(), n * cb * hw);
                for nn in 0..n {
                    let src = &gout[nn * c_out * hw + ca * hw..(nn + 1) * c_out * hw];
                    for (g, s) in gb[nn * cb * hw..(nn + 1) * cb * hw].iter_mut().zip(src) {
                        *g += *s;
                    }
                }
            }
        });
    }
    Ok(out)
}
