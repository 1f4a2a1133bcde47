//! Forward and backward kernels for the graph ops.
//!
//! Convolution and dense layers route through gemm; everything else is
//! plain loops. All kernels are deterministic and single-threaded.

use super::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Running statistics decay: `running = momentum * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// TF-style same padding: total padding so that `out = ceil(in / stride)`.
fn same_padding(in_size: usize, out_size: usize, stride: usize, kernel: usize) -> usize {
    let needed = (out_size - 1) * stride + kernel;
    (needed.saturating_sub(in_size)) / 2
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let (n, c, h, w) = (input.dims[0], input.dims[1], input.dims[2], input.dims[3]);
    let pad_top = same_padding(h, oh, stride, kernel) as isize;
    let pad_left = same_padding(w, ow, stride, kernel) as isize;
    let ckk = c * kernel * kernel;
    let mut cols = vec![T::zero(); n * oh * ow * ckk];
    for ni in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                let row = ((ni * oh + y) * ow + x) * ckk;
                for ci in 0..c {
                    for ky in 0..kernel {
                        let iy = (y * stride + ky) as isize - pad_top;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (x * stride + kx) as isize - pad_left;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[row + (ci * kernel + ky) * kernel + kx] = input.data
                                [((ni * c + ci) * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    dcols: &[T],
    dinput: &mut Tensor<T>,
    kernel: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let (n, c, h, w) = (
        dinput.dims[0],
        dinput.dims[1],
        dinput.dims[2],
        dinput.dims[3],
    );
    let pad_top = same_padding(h, oh, stride, kernel) as isize;
    let pad_left = same_padding(w, ow, stride, kernel) as isize;
    let ckk = c * kernel * kernel;
    for ni in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                let row = ((ni * oh + y) * ow + x) * ckk;
                for ci in 0..c {
                    for ky in 0..kernel {
                        let iy = (y * stride + ky) as isize - pad_top;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (x * stride + kx) as isize - pad_left;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dinput.data[((ni * c + ci) * h + iy as usize) * w + ix as usize] +=
                                dcols[row + (ci * kernel + ky) * kernel + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution with same padding. Weights are `[filters, c_in*k*k]`.
pub fn conv_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Tensor<T> {
    let (n, _c, h, w) = (input.dims[0], input.dims[1], input.dims[2], input.dims[3]);
    let f = weight.dims[0];
    let ckk = weight.dims[1];
    let (oh, ow) = crate::graph::conv_out_hw(h, w, stride);
    let cols = im2col(input, kernel, stride, oh, ow);
    let rows = n * oh * ow;
    let mut out_mat = vec![T::zero(); rows * f];
    // out_mat = cols (rows x ckk) * weight^T (ckk x f)
    T::gemm(
        rows,
        ckk,
        f,
        T::one(),
        &cols,
        ckk as isize,
        1,
        &weight.data,
        1,
        ckk as isize,
        T::zero(),
        &mut out_mat,
        f as isize,
        1,
    );
    let mut out = Tensor::zeros(vec![n, f, oh, ow]);
    for ni in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                let row = (ni * oh + y) * ow + x;
                for fi in 0..f {
                    out.data[((ni * f + fi) * oh + y) * ow + x] =
                        out_mat[row * f + fi] + bias.data[fi];
                }
            }
        }
    }
    out
}

/// Gradients for convolution. Returns `(d_input, d_weight, d_bias)`.
pub fn conv_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, _c, h, w) = (input.dims[0], input.dims[1], input.dims[2], input.dims[3]);
    let f = weight.dims[0];
    let ckk = weight.dims[1];
    let (oh, ow) = crate::graph::conv_out_hw(h, w, stride);
    let rows = n * oh * ow;
    let cols = im2col(input, kernel, stride, oh, ow);

    let mut dout_mat = vec![T::zero(); rows * f];
    let mut dbias = Tensor::zeros(vec![f]);
    for ni in 0..n {
        for fi in 0..f {
            for y in 0..oh {
                for x in 0..ow {
                    let g = dout.data[((ni * f + fi) * oh + y) * ow + x];
                    dout_mat[((ni * oh + y) * ow + x) * f + fi] = g;
                    dbias.data[fi] += g;
                }
            }
        }
    }

    // dW (f x ckk) = dout_mat^T (f x rows) * cols (rows x ckk)
    let mut dweight = Tensor::zeros(vec![f, ckk]);
    T::gemm(
        f,
        rows,
        ckk,
        T::one(),
        &dout_mat,
        1,
        f as isize,
        &cols,
        ckk as isize,
        1,
        T::zero(),
        &mut dweight.data,
        ckk as isize,
        1,
    );

    // dcols (rows x ckk) = dout_mat (rows x f) * weight (f x ckk)
    let mut dcols = vec![T::zero(); rows * ckk];
    T::gemm(
        rows,
        f,
        ckk,
        T::one(),
        &dout_mat,
        f as isize,
        1,
        &weight.data,
        ckk as isize,
        1,
        T::zero(),
        &mut dcols,
        ckk as isize,
        1,
    );
    let mut dinput = Tensor::zeros(input.dims.clone());
    col2im(&dcols, &mut dinput, kernel, stride, oh, ow);
    (dinput, dweight, dbias)
}

/// Fully connected layer. Weights are `[inputs, outputs]`.
pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Tensor<T> {
    let (n, i) = (input.dims[0], input.dims[1]);
    let o = weight.dims[1];
    let mut out = Tensor::zeros(vec![n, o]);
    T::gemm(
        n,
        i,
        o,
        T::one(),
        &input.data,
        i as isize,
        1,
        &weight.data,
        o as isize,
        1,
        T::zero(),
        &mut out.data,
        o as isize,
        1,
    );
    for ni in 0..n {
        for oi in 0..o {
            out.data[ni * o + oi] += bias.data[oi];
        }
    }
    out
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, i) = (input.dims[0], input.dims[1]);
    let o = weight.dims[1];
    let mut dweight = Tensor::zeros(vec![i, o]);
    // dW (i x o) = input^T (i x n) * dout (n x o)
    T::gemm(
        i,
        n,
        o,
        T::one(),
        &input.data,
        1,
        i as isize,
        &dout.data,
        o as isize,
        1,
        T::zero(),
        &mut dweight.data,
        o as isize,
        1,
    );
    let mut dbias = Tensor::zeros(vec![o]);
    for ni in 0..n {
        for oi in 0..o {
            dbias.data[oi] += dout.data[ni * o + oi];
        }
    }
    let mut dinput = Tensor::zeros(vec![n, i]);
    // dX (n x i) = dout (n x o) * W^T (o x i)
    T::gemm(
        n,
        o,
        i,
        T::one(),
        &dout.data,
        o as isize,
        1,
        &weight.data,
        1,
        o as isize,
        T::zero(),
        &mut dinput.data,
        i as isize,
        1,
    );
    (dinput, dweight, dbias)
}

/// Per-channel batch statistics saved by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Channel count and per-channel element layout of an activation: spatial
/// tensors normalize per channel over batch and space, flat ones per
/// feature over the batch.
fn channel_layout<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    let c = t.dims[1];
    let s: usize = t.dims[2..].iter().product();
    (c, s)
}

pub fn batchnorm_forward_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, BnStats<T>) {
    let n = input.dims[0];
    let (c, s) = channel_layout(input);
    let m = T::from_f64((n * s) as f64);
    let eps = T::from_f64(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut sum = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for si in 0..s {
                sum += input.data[base + si];
            }
        }
        mean[ci] = sum / m;
        let mut sq = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for si in 0..s {
                let d = input.data[base + si] - mean[ci];
                sq += d * d;
            }
        }
        var[ci] = sq / m;
    }
    let mut out = Tensor::zeros(input.dims.clone());
    for ci in 0..c {
        let inv_std = (var[ci] + eps).sqrt().recip();
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for si in 0..s {
                let xhat = (input.data[base + si] - mean[ci]) * inv_std;
                out.data[base + si] = gamma.data[ci] * xhat + beta.data[ci];
            }
        }
    }
    (out, BnStats { mean, var })
}

pub fn batchnorm_forward_infer<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
) -> Tensor<T> {
    let n = input.dims[0];
    let (c, s) = channel_layout(input);
    let eps = T::from_f64(BN_EPS);
    let mut out = Tensor::zeros(input.dims.clone());
    for ci in 0..c {
        let inv_std = (running_var[ci] + eps).sqrt().recip();
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for si in 0..s {
                let xhat = (input.data[base + si] - running_mean[ci]) * inv_std;
                out.data[base + si] = gamma.data[ci] * xhat + beta.data[ci];
            }
        }
    }
    out
}

pub fn batchnorm_backward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BnStats<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = input.dims[0];
    let (c, s) = channel_layout(input);
    let m = T::from_f64((n * s) as f64);
    let eps = T::from_f64(BN_EPS);
    let mut dinput = Tensor::zeros(input.dims.clone());
    let mut dgamma = Tensor::zeros(vec![c]);
    let mut dbeta = Tensor::zeros(vec![c]);
    let two = T::from_f64(2.0);
    for ci in 0..c {
        let inv_std = (stats.var[ci] + eps).sqrt().recip();
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        let mut sum_centered = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for si in 0..s {
                let dy = dout.data[base + si];
                let centered = input.data[base + si] - stats.mean[ci];
                sum_dy += dy;
                sum_dy_xhat += dy * centered * inv_std;
                sum_centered += centered;
            }
        }
        dgamma.data[ci] = sum_dy_xhat;
        dbeta.data[ci] = sum_dy;
        // dvar and dmean of the biased-variance formulation
        let g = gamma.data[ci];
        let dvar = -g * sum_dy_xhat * inv_std * inv_std / two;
        let dmean = -g * sum_dy * inv_std - dvar * two * sum_centered / m;
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for si in 0..s {
                let dy = dout.data[base + si];
                let centered = input.data[base + si] - stats.mean[ci];
                dinput.data[base + si] =
                    g * dy * inv_std + dvar * two * centered / m + dmean / m;
            }
        }
    }
    (dinput, dgamma, dbeta)
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    Tensor {
        dims: input.dims.clone(),
        data: input.data.iter().map(|&v| v.max(T::zero())).collect(),
    }
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    Tensor {
        dims: input.dims.clone(),
        data: input
            .data
            .iter()
            .zip(&dout.data)
            .map(|(&x, &dy)| if x > T::zero() { dy } else { T::zero() })
            .collect(),
    }
}

/// Adaptive average pooling to `out_h x out_w`. Pooling a 1x1 map to a
/// larger target broadcasts the value, which is how flat features tile
/// into a spatial concat.
pub fn pool_align_forward<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (n, c, h, w) = (input.dims[0], input.dims[1], input.dims[2], input.dims[3]);
    let mut out = Tensor::zeros(vec![n, c, out_h, out_w]);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for oy in 0..out_h {
                let (y0, y1) = pool_region(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = pool_region(ox, w, out_w);
                    let mut sum = T::zero();
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += input.data[base + y * w + x];
                        }
                    }
                    let count = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                    out.data[((ni * c + ci) * out_h + oy) * out_w + ox] = sum / count;
                }
            }
        }
    }
    out
}

pub fn pool_align_backward<T: Scalar>(
    in_dims: &[usize],
    dout: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Tensor<T> {
    let (n, c, h, w) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
    let mut dinput = Tensor::zeros(in_dims.to_vec());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for oy in 0..out_h {
                let (y0, y1) = pool_region(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = pool_region(ox, w, out_w);
                    let count = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                    let g = dout.data[((ni * c + ci) * out_h + oy) * out_w + ox] / count;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            dinput.data[base + y * w + x] += g;
                        }
                    }
                }
            }
        }
    }
    dinput
}

fn pool_region(out_idx: usize, in_size: usize, out_size: usize) -> (usize, usize) {
    let start = out_idx * in_size / out_size;
    let end = ((out_idx + 1) * in_size).div_ceil(out_size);
    (start, end.max(start + 1).min(in_size.max(1)))
}

/// Channel-axis concatenation; all inputs share batch and spatial dims.
pub fn concat_forward<T: Scalar>(inputs: &[&Tensor<T>]) -> Tensor<T> {
    let n = inputs[0].dims[0];
    let per_sample: Vec<usize> = inputs.iter().map(|t| t.len() / n).collect();
    let total: usize = per_sample.iter().sum();
    let mut dims = inputs[0].dims.clone();
    dims[1] = inputs.iter().map(|t| t.dims[1]).sum();
    let mut out = Tensor::zeros(vec![n, total]);
    for ni in 0..n {
        let mut offset = 0;
        for (t, &len) in inputs.iter().zip(&per_sample) {
            out.data[ni * total + offset..ni * total + offset + len]
                .copy_from_slice(&t.data[ni * len..(ni + 1) * len]);
            offset += len;
        }
    }
    out.dims = dims;
    out
}

pub fn concat_backward<T: Scalar>(inputs: &[&Tensor<T>], dout: &Tensor<T>) -> Vec<Tensor<T>> {
    let n = inputs[0].dims[0];
    let per_sample: Vec<usize> = inputs.iter().map(|t| t.len() / n).collect();
    let total: usize = per_sample.iter().sum();
    let mut grads: Vec<Tensor<T>> = inputs
        .iter()
        .map(|t| Tensor::zeros(t.dims.clone()))
        .collect();
    for ni in 0..n {
        let mut offset = 0;
        for (g, &len) in grads.iter_mut().zip(&per_sample) {
            g.data[ni * len..(ni + 1) * len]
                .copy_from_slice(&dout.data[ni * total + offset..ni * total + offset + len]);
            offset += len;
        }
    }
    grads
}

pub fn global_avg_pool_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (input.dims[0], input.dims[1], input.dims[2], input.dims[3]);
    let hw = T::from_f64((h * w) as f64);
    let mut out = Tensor::zeros(vec![n, c]);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let mut sum = T::zero();
            for i in 0..h * w {
                sum += input.data[base + i];
            }
            out.data[ni * c + ci] = sum / hw;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(in_dims: &[usize], dout: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
    let hw = T::from_f64((h * w) as f64);
    let mut dinput = Tensor::zeros(in_dims.to_vec());
    for ni in 0..n {
        for ci in 0..c {
            let g = dout.data[ni * c + ci] / hw;
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                dinput.data[base + i] = g;
            }
        }
    }
    dinput
}

/// Row-wise numerically stable softmax over `[n, k]` logits.
pub fn softmax_forward<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.dims[1];
    let mut out = Tensor::zeros(logits.dims.clone());
    for (row_in, row_out) in logits
        .data
        .chunks_exact(k)
        .zip(out.data.chunks_exact_mut(k))
    {
        let max = row_in.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Mean cross-entropy of softmax probabilities against integer labels.
pub fn cross_entropy_loss<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> T {
    let k = probs.dims[1];
    let floor = T::from_f64(1e-12);
    let mut total = T::zero();
    for (row, &label) in probs.data.chunks_exact(k).zip(labels) {
        total -= row[label].max(floor).ln();
    }
    total / T::from_f64(labels.len() as f64)
}

/// Gradient of mean cross-entropy with respect to the softmax *input*:
/// `(p - y) / n`. Combining the two ops keeps the backward pass stable.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
) -> Tensor<T> {
    let k = probs.dims[1];
    let n = T::from_f64(labels.len() as f64);
    let mut dlogits = probs.clone();
    for (row, &label) in dlogits.data.chunks_exact_mut(k).zip(labels) {
        row[label] -= T::one();
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    dlogits
}
