//! Differentiable primitives with analytic backward passes.
//!
//! Every forward function is pure. Backward functions take whatever the
//! forward saw (the input, or a small cache it returned) plus the gradient of
//! the output, and return gradients for each differentiable argument.

use crate::error::{Error, Result};
use crate::tensor::{matmul, Scalar, Tensor};

fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("stride must be at least 1"));
    }
    if input + 2 * padding < kernel {
        return Err(Error::config(format!(
            "window {kernel} larger than padded input {input}+2*{padding}"
        )));
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, ConvGeometry)> {
    let (n, cin, h, w) = input.nchw()?;
    let (cout, wcin, kh, kw) = weight.nchw()?;
    if cin != wcin {
        return Err(Error::config(format!(
            "conv2d: input has {cin} channels but weight {:?} expects {wcin}",
            weight.dims()
        )));
    }
    let oh = out_extent(h, kh, stride, padding)?;
    let ow = out_extent(w, kw, stride, padding)?;
    Ok((
        n,
        cout,
        ConvGeometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        },
    ))
}

/// Unfold one sample `[Cin, H, W]` into `[Cin·kH·kW, H'·W']`.
fn im2col<T: Scalar>(sample: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let positions = g.positions();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &sample[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the inverse of [`im2col`].
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, sample: &mut [T]) {
    let positions = g.positions();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut sample[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation over an NCHW batch with symmetric zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, cout, g) = conv_geometry(input, weight, stride, padding)?;
    if let Some(b) = bias {
        if b.dims() != [cout] {
            return Err(Error::config(format!(
                "conv2d bias dims {:?}, expected [{cout}]",
                b.dims()
            )));
        }
    }
    let positions = g.positions();
    let sample_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); n * cout * positions];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * positions]
    };
    for s in 0..n {
        let sample = &input.data()[s * sample_len..(s + 1) * sample_len];
        let dst = &mut out[s * cout * positions..(s + 1) * cout * positions];
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(positions).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let patches: &[T] = if g.is_pointwise() {
            sample
        } else {
            im2col(sample, &g, &mut cols);
            &cols
        };
        matmul(
            cout,
            g.patch_len(),
            positions,
            weight.data(),
            false,
            patches,
            false,
            beta,
            dst,
        );
    }
    Ok(Tensor::from_parts(vec![n, cout, g.oh, g.ow], out))
}

pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    with_bias: bool,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let (n, cout, g) = conv_geometry(input, weight, stride, padding)?;
    if grad_out.dims() != [n, cout, g.oh, g.ow] {
        return Err(Error::config(format!(
            "conv2d backward: grad dims {:?} do not match output [{n}, {cout}, {}, {}]",
            grad_out.dims(),
            g.oh,
            g.ow
        )));
    }
    let positions = g.positions();
    let patch = g.patch_len();
    let sample_len = g.cin * g.h * g.w;
    let mut grad_input = vec![T::zero(); input.len()];
    let mut grad_weight = vec![T::zero(); weight.len()];
    let mut grad_bias = vec![T::zero(); cout];
    let mut cols = vec![T::zero(); patch * positions];
    let mut grad_cols = vec![T::zero(); patch * positions];
    for s in 0..n {
        let sample = &input.data()[s * sample_len..(s + 1) * sample_len];
        let gy = &grad_out.data()[s * cout * positions..(s + 1) * cout * positions];
        let patches: &[T] = if g.is_pointwise() {
            sample
        } else {
            im2col(sample, &g, &mut cols);
            &cols
        };
        // dW += gy · colsᵀ
        matmul(cout, positions, patch, gy, false, patches, true, T::one(), &mut grad_weight);
        if with_bias {
            for (co, chunk) in gy.chunks(positions).enumerate() {
                grad_bias[co] = chunk.iter().fold(grad_bias[co], |acc, &v| acc + v);
            }
        }
        let gx = &mut grad_input[s * sample_len..(s + 1) * sample_len];
        if g.is_pointwise() {
            matmul(patch, cout, positions, weight.data(), true, gy, false, T::zero(), gx);
        } else {
            matmul(
                patch,
                cout,
                positions,
                weight.data(),
                true,
                gy,
                false,
                T::zero(),
                &mut grad_cols,
            );
            col2im(&grad_cols, &g, gx);
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::from_parts(input.dims().to_vec(), grad_input),
        weight: Tensor::from_parts(weight.dims().to_vec(), grad_weight),
        bias: with_bias.then(|| Tensor::from_parts(vec![cout], grad_bias)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean and variance tracked by batch normalization.
#[derive(Clone, Debug)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub momentum: T,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
            momentum: T::lit(0.1),
        }
    }
}

/// What the batch-norm backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub mode: Mode,
    /// Normalized input before scale and shift.
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub fn batchnorm2d<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: Mode,
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = input.nchw()?;
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::config(format!(
            "batchnorm2d: {c} channels but gamma {:?}, beta {:?}",
            gamma.dims(),
            beta.dims()
        )));
    }
    let plane = h * w;
    let count = n * plane;
    if mode == Mode::Train && count < 2 {
        return Err(Error::config(format!(
            "batchnorm2d: degenerate batch, N·H·W = {count} < 2 in train mode"
        )));
    }
    let x = input.data();
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_stds = Vec::with_capacity(c);
    for ch in 0..c {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = T::zero();
                for s in 0..n {
                    for &v in &x[(s * c + ch) * plane..][..plane] {
                        sum = sum + v;
                    }
                }
                let mean = sum / T::from_usize_lossy(count);
                let mut sq = T::zero();
                for s in 0..n {
                    for &v in &x[(s * c + ch) * plane..][..plane] {
                        sq = sq + (v - mean) * (v - mean);
                    }
                }
                let var = sq / T::from_usize_lossy(count);
                let unbiased = sq / T::from_usize_lossy(count - 1);
                let m = stats.momentum;
                let rm = &mut stats.mean.data_mut()[ch];
                *rm = (T::one() - m) * *rm + m * mean;
                let rv = &mut stats.var.data_mut()[ch];
                *rv = (T::one() - m) * *rv + m * unbiased;
                (mean, var)
            }
            Mode::Eval => (stats.mean.data()[ch], stats.var.data()[ch]),
        };
        let inv_std = T::one() / (var + eps).sqrt();
        inv_stds.push(inv_std);
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                let xh = (x[i] - mean) * inv_std;
                normalized[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }
    let dims = input.dims().to_vec();
    Ok((
        Tensor::from_parts(dims.clone(), out),
        BatchNormCache {
            mode,
            normalized: Tensor::from_parts(dims, normalized),
            inv_std: inv_stds,
        },
    ))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm2d_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    grad_out.expect_same_dims(&cache.normalized)?;
    let (n, c, h, w) = grad_out.nchw()?;
    let plane = h * w;
    let count = T::from_usize_lossy(n * plane);
    let gy = grad_out.data();
    let xh = cache.normalized.data();
    let mut gx = vec![T::zero(); gy.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_gy = T::zero();
        let mut sum_gy_xh = T::zero();
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                sum_gy = sum_gy + gy[i];
                sum_gy_xh = sum_gy_xh + gy[i] * xh[i];
            }
        }
        ggamma[ch] = sum_gy_xh;
        gbeta[ch] = sum_gy;
        let scale = gamma.data()[ch] * cache.inv_std[ch];
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                gx[i] = match cache.mode {
                    Mode::Train => {
                        scale * (gy[i] - sum_gy / count - xh[i] * sum_gy_xh / count)
                    }
                    Mode::Eval => scale * gy[i],
                };
            }
        }
    }
    Ok((
        Tensor::from_parts(grad_out.dims().to_vec(), gx),
        Tensor::from_parts(vec![c], ggamma),
        Tensor::from_parts(vec![c], gbeta),
    ))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// Gradient flows only where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad_out, |x, g| if x > T::zero() { g } else { T::zero() })
}

/// Max pooling with `-inf` padding. Also returns, for each output element,
/// the flat input index it was taken from (first maximum in row-major order).
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.nchw()?;
    if kernel == 0 {
        return Err(Error::config("maxpool2d: kernel must be at least 1"));
    }
    if padding >= kernel {
        return Err(Error::config("maxpool2d: padding must be smaller than kernel"));
    }
    let oh = out_extent(h, kernel, stride, padding)?;
    let ow = out_extent(w, kernel, stride, padding)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), argmax))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_dims: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::config("maxpool2d backward: argmax/grad length mismatch"));
    }
    let mut gx = Tensor::zeros(input_dims);
    let data = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        data[idx] = data[idx] + g;
    }
    Ok(gx)
}

/// `output[n, c] = Σ_d input[n, d] · weight[c, d] + bias[c]`.
pub fn linear<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, d, c) = linear_dims(input, weight)?;
    let mut out = vec![T::zero(); n * c];
    if let Some(b) = bias {
        if b.dims() != [c] {
            return Err(Error::config(format!(
                "linear bias dims {:?}, expected [{c}]",
                b.dims()
            )));
        }
        for row in out.chunks_mut(c) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    matmul(n, d, c, input.data(), false, weight.data(), true, beta, &mut out);
    Ok(Tensor::from_parts(vec![n, c], out))
}

fn linear_dims<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match (input.dims(), weight.dims()) {
        ([n, d], [c, wd]) if d == wd => Ok((*n, *d, *c)),
        (i, w) => Err(Error::config(format!(
            "linear: input {i:?} incompatible with weight {w:?}"
        ))),
    }
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, d, c) = linear_dims(input, weight)?;
    if grad_out.dims() != [n, c] {
        return Err(Error::config("linear backward: grad dims mismatch"));
    }
    let mut gx = vec![T::zero(); n * d];
    matmul(n, c, d, grad_out.data(), false, weight.data(), false, T::zero(), &mut gx);
    let mut gw = vec![T::zero(); c * d];
    matmul(c, n, d, grad_out.data(), true, input.data(), false, T::zero(), &mut gw);
    let mut gb = vec![T::zero(); c];
    for row in grad_out.data().chunks(c) {
        for (acc, &g) in gb.iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    Ok((
        Tensor::from_parts(vec![n, d], gx),
        Tensor::from_parts(vec![c, d], gw),
        Tensor::from_parts(vec![c], gb),
    ))
}

/// Iterate over the 1-D lanes of `dims` along `axis`: yields
/// `(start, stride)` so lane element `j` lives at `start + j * stride`.
fn lanes(dims: &[usize], axis: usize) -> impl Iterator<Item = (usize, usize)> {
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let len = dims[axis];
    (0..outer).flat_map(move |o| (0..inner).map(move |i| (o * len * inner + i, inner)))
}

fn check_axis(dims: &[usize], axis: usize) -> Result<()> {
    if axis >= dims.len() {
        return Err(Error::config(format!("axis {axis} out of range for dims {dims:?}")));
    }
    Ok(())
}

/// Softmax of `temperature · logits` along `axis`, stabilized by
/// subtracting the lane maximum before exponentiation.
pub fn softmax_with_temperature<T: Scalar>(
    logits: &Tensor<T>,
    temperature: T,
    axis: usize,
) -> Result<Tensor<T>> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::config(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    check_axis(logits.dims(), axis)?;
    let len = logits.dims()[axis];
    let z = logits.data();
    let mut out = vec![T::zero(); z.len()];
    for (start, stride) in lanes(logits.dims(), axis) {
        let idx = |j: usize| start + j * stride;
        let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(temperature * z[idx(j)]));
        let mut total = T::zero();
        for j in 0..len {
            let e = (temperature * z[idx(j)] - max).exp();
            out[idx(j)] = e;
            total = total + e;
        }
        for j in 0..len {
            out[idx(j)] = out[idx(j)] / total;
        }
    }
    Ok(Tensor::from_parts(logits.dims().to_vec(), out))
}

/// Gradient w.r.t. the logits given the softmax output.
pub fn softmax_with_temperature_backward<T: Scalar>(
    output: &Tensor<T>,
    temperature: T,
    axis: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    output.expect_same_dims(grad_out)?;
    check_axis(output.dims(), axis)?;
    let len = output.dims()[axis];
    let (s, gs) = (output.data(), grad_out.data());
    let mut gz = vec![T::zero(); s.len()];
    for (start, stride) in lanes(output.dims(), axis) {
        let idx = |j: usize| start + j * stride;
        let inner = (0..len).fold(T::zero(), |acc, j| acc + gs[idx(j)] * s[idx(j)]);
        for j in 0..len {
            gz[idx(j)] = temperature * s[idx(j)] * (gs[idx(j)] - inner);
        }
    }
    Ok(Tensor::from_parts(output.dims().to_vec(), gz))
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    output.zip_map(grad_out, |s, g| g * s * (T::one() - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// Direct nested-loop convolution.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: Option<&Tensor<f64>>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n, cin, h, wd) = x.nchw().unwrap();
        let (cout, _, kh, kw) = w.nchw().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for s in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((s * cin + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out.data_mut()[((s * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_counts_window() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f32>::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f32>::randn(&[2, 1, 4, 5], 1.0, &mut rng());
        let w = Tensor::<f32>::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(&[2, 3, 5, 5], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[4], 1.0, &mut r);
        let y = conv2d(&x, &w, Some(&b), 2, 1).unwrap();
        assert_eq!(y.dims(), &[2, 4, 3, 3]);
        let oracle = conv_oracle(&x, &w, Some(&b), 2, 1);
        for (a, e) in y.data().iter().zip(oracle.data()) {
            assert!((a - e).abs() <= 1e-6 * e.abs().max(1.0), "{a} vs {e}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
    }

    #[test]
    fn batchnorm_constant_channel_is_zero() {
        let x = Tensor::<f64>::full(&[2, 1, 3, 3], 4.2);
        let mut stats = RunningStats::new(1);
        let g = Tensor::full(&[1], 1.0);
        let b = Tensor::zeros(&[1]);
        let (y, _) = batchnorm2d(&x, &g, &b, &mut stats, Mode::Train, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-9), "{y:?}");
    }

    #[test]
    fn batchnorm_shift() {
        // Exactly zero mean, unit (population) variance.
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let mut stats = RunningStats::new(1);
        let g = Tensor::full(&[1], 1.0);
        let b = Tensor::full(&[1], 5.0);
        let (y, _) = batchnorm2d(&x, &g, &b, &mut stats, Mode::Train, 1e-12).unwrap();
        for (yo, xo) in y.data().iter().zip(x.data()) {
            assert!((yo - (xo + 5.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_output_moments() {
        let x = Tensor::<f64>::randn(&[4, 3, 5, 5], 3.0, &mut rng()).map(|v| v + 2.0);
        let mut stats = RunningStats::new(3);
        let (_, cache) = batchnorm2d(
            &x,
            &Tensor::full(&[3], 1.0),
            &Tensor::zeros(&[3]),
            &mut stats,
            Mode::Train,
            1e-5,
        )
        .unwrap();
        let xh = cache.normalized.data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|s| xh[(s * 3 + ch) * 25..][..25].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            // eps inflates the denominator slightly: var = σ²/(σ²+eps)
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
        assert!(stats.mean.data().iter().all(|&m| m != 0.0));
    }

    #[test]
    fn batchnorm_degenerate_batch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 1, 1]);
        let mut stats = RunningStats::new(2);
        let r = batchnorm2d(
            &x,
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            &mut stats,
            Mode::Train,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Config(m)) if m.contains("degenerate")));
        assert!(batchnorm2d(
            &x,
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            &mut stats,
            Mode::Eval,
            1e-5
        )
        .is_ok());
    }

    #[test]
    fn relu_values_and_gradient() {
        let x = Tensor::<f32>::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::<f32>::new(&[2], vec![0.5, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        let probe = Tensor::<f64>::new(&[2], vec![-0.5, 0.5]).unwrap();
        let g = relu_backward(&probe, &Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn maxpool_basics() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let (y, idx) = maxpool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);

        let c = Tensor::<f32>::full(&[1, 2, 4, 4], 0.3);
        let (y, idx) = maxpool2d(&c, 2, 2, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.3));
        // ties resolve to the first element of each window
        assert_eq!(idx[0], 0);
        assert_eq!(idx[1], 2);

        assert!(maxpool2d(&Tensor::<f32>::zeros(&[1, 1, 2, 2]), 3, 1, 0).is_err());
    }

    #[test]
    fn maxpool_matches_oracle() {
        let x = Tensor::<f64>::randn(&[1, 1, 6, 6], 1.0, &mut rng());
        let (y, _) = maxpool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.dims(), &[1, 1, 3, 3]);
        for oy in 0..3 {
            for ox in 0..3 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data()[(oy * 2 + dy) * 6 + ox * 2 + dx]);
                    }
                }
                assert_eq!(y.data()[oy * 3 + ox], m);
            }
        }
    }

    #[test]
    fn linear_cases() {
        let x = Tensor::<f64>::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::<f64>::new(&[1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(linear(&x, &w, None).unwrap().data(), &[11.0]);

        let eye = Tensor::<f64>::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::zeros(&[2]);
        assert_eq!(linear(&x, &eye, Some(&zero)).unwrap(), x);

        let bad = Tensor::<f64>::zeros(&[2, 3]);
        assert!(linear(&x, &bad, None).is_err());
    }

    #[test]
    fn softmax_cases() {
        let z = Tensor::<f64>::zeros(&[3]);
        for t in [0.01, 1.0, 50.0] {
            let s = softmax_with_temperature(&z, t, 0).unwrap();
            assert!(s.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        }
        let z = Tensor::<f64>::new(&[2], vec![1.0, 0.0]).unwrap();
        let s = softmax_with_temperature(&z, 1.0, 0).unwrap();
        let e = std::f64::consts::E;
        assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((s.data()[0] - 0.73106).abs() < 1e-5);
        assert!((s.data()[1] - 0.26894).abs() < 1e-5);

        let sharp = softmax_with_temperature(&z, 1e4, 0).unwrap();
        assert!(sharp.data()[0] > 1.0 - 1e-12 && sharp.data()[1] < 1e-12);
        let flat = softmax_with_temperature(&z, 1e-6, 0).unwrap();
        assert!((flat.data()[0] - 0.5).abs() < 1e-6);

        assert!(softmax_with_temperature(&z, 0.0, 0).is_err());
        assert!(softmax_with_temperature(&z, -1.0, 0).is_err());
    }

    #[test]
    fn softmax_along_inner_axis() {
        let z = Tensor::<f64>::randn(&[2, 3, 4], 2.0, &mut rng());
        let s = softmax_with_temperature(&z, 0.7, 1).unwrap();
        for a in 0..2 {
            for c in 0..4 {
                let total: f64 = (0..3).map(|b| s.data()[(a * 3 + b) * 4 + c]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_cases() {
        let x = Tensor::<f64>::new(&[3], vec![0.0, -50.0, 3f64.ln()]).unwrap();
        let s = sigmoid(&x);
        assert_eq!(s.data()[0], 0.5);
        assert!(s.data()[1] > 0.0 && s.data()[1] <= 1e-6);
        let floor = sigmoid(&Tensor::<f64>::new(&[1], vec![-1e6]).unwrap());
        assert!(!floor.data()[0].is_nan());
        assert!((s.data()[2] - 0.75).abs() < 1e-12);
        let big = sigmoid(&Tensor::<f32>::new(&[1], vec![1e30]).unwrap());
        assert_eq!(big.data()[0], 1.0);
    }
}
