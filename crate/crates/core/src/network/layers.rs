//! Individual network layers: 3x3 convolution with 1-pixel zero padding,
//! batch normalization, ReLU, 2x2 max pooling with recorded argmax
//! indices, max unpooling, and the softmax cross-entropy head.
//!
//! Every backward pass is the analytic adjoint of its forward pass;
//! accumulation orders are fixed so results are bitwise reproducible
//! regardless of the parallel schedule (parallelism only splits work
//! across independent output planes).

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::tensor::{Scalar, Tensor4};
use super::NetworkError;
use crate::imagedata::BinaryMask;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// 3x3 convolution parameters; weight layout `[c_out][c_in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    /// He initialization: zero biases, weights from N(0, 2 / (9 c_in)).
    pub fn init(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (9.0 * c_in as f64)).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = (0..c_out * c_in * 9)
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        Self {
            c_in,
            c_out,
            weight,
            bias: vec![T::zero(); c_out],
        }
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            weight: vec![T::zero(); c_out * c_in * 9],
            bias: vec![T::zero(); c_out],
        }
    }

    #[inline]
    fn w(&self, co: usize, ci: usize, ky: usize, kx: usize) -> T {
        self.weight[((co * self.c_in + ci) * 3 + ky) * 3 + kx]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvGrads<T> {
    pub fn zeros(p: &ConvParams<T>) -> Self {
        Self {
            weight: vec![T::zero(); p.weight.len()],
            bias: vec![T::zero(); p.bias.len()],
        }
    }
}

/// Valid output range along one axis for a kernel offset `d` in {-1,0,1}:
/// output positions whose sampled input position stays in bounds.
#[inline]
fn tap_range(extent: usize, d: i64) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (extent as i64).min(extent as i64 - d) as usize;
    (lo, hi)
}

/// Same-size 3x3 convolution with 1-pixel zero padding, stride 1.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    p: &ConvParams<T>,
) -> Result<Tensor4<T>, NetworkError> {
    if x.c != p.c_in {
        return Err(NetworkError::ChannelMismatch {
            expected: p.c_in,
            got: x.c,
        });
    }
    let (n, _, h, w) = x.shape();
    let mut out = Tensor4::zeros(n, p.c_out, h, w);
    let plane_len = h * w;
    out.data_mut()
        .par_chunks_mut(plane_len)
        .enumerate()
        .for_each(|(chunk_idx, out_plane)| {
            let bi = chunk_idx / p.c_out;
            let co = chunk_idx % p.c_out;
            out_plane.fill(p.bias[co]);
            for ci in 0..p.c_in {
                let in_plane = x.plane(bi, ci);
                for ky in 0..3usize {
                    let dy = ky as i64 - 1;
                    let (y_lo, y_hi) = tap_range(h, dy);
                    for kx in 0..3usize {
                        let dx = kx as i64 - 1;
                        let (x_lo, x_hi) = tap_range(w, dx);
                        if x_lo >= x_hi {
                            continue;
                        }
                        let wgt = p.w(co, ci, ky, kx);
                        for y in y_lo..y_hi {
                            let sy = (y as i64 + dy) as usize;
                            let src = &in_plane
                                [(sy * w + (x_lo as i64 + dx) as usize)..][..x_hi - x_lo];
                            let dst = &mut out_plane[(y * w + x_lo)..][..x_hi - x_lo];
                            for (o, &i) in dst.iter_mut().zip(src) {
                                *o += wgt * i;
                            }
                        }
                    }
                }
            }
        });
    out.debug_check_finite("conv2d_forward");
    Ok(out)
}

/// Gradients of the convolution: input gradient plus parameter gradients.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, ConvGrads<T>), NetworkError> {
    if x.c != p.c_in {
        return Err(NetworkError::ChannelMismatch {
            expected: p.c_in,
            got: x.c,
        });
    }
    if grad_out.shape() != (x.n, p.c_out, x.h, x.w) {
        return Err(NetworkError::ShapeMismatch {
            context: "conv2d_backward grad_out",
            expected: (x.n, p.c_out, x.h, x.w),
            got: grad_out.shape(),
        });
    }
    let (n, _, h, w) = x.shape();
    let plane_len = h * w;

    // Input gradient: scatter grad_out through the transposed kernel.
    let mut grad_x = Tensor4::zeros(n, p.c_in, h, w);
    grad_x
        .data_mut()
        .par_chunks_mut(plane_len)
        .enumerate()
        .for_each(|(chunk_idx, gx_plane)| {
            let bi = chunk_idx / p.c_in;
            let ci = chunk_idx % p.c_in;
            for co in 0..p.c_out {
                let go_plane = grad_out.plane(bi, co);
                for ky in 0..3usize {
                    let dy = ky as i64 - 1;
                    let (y_lo, y_hi) = tap_range(h, dy);
                    for kx in 0..3usize {
                        let dx = kx as i64 - 1;
                        let (x_lo, x_hi) = tap_range(w, dx);
                        if x_lo >= x_hi {
                            continue;
                        }
                        let wgt = p.w(co, ci, ky, kx);
                        for y in y_lo..y_hi {
                            let sy = (y as i64 + dy) as usize;
                            let dst = &mut gx_plane
                                [(sy * w + (x_lo as i64 + dx) as usize)..][..x_hi - x_lo];
                            let src = &go_plane[(y * w + x_lo)..][..x_hi - x_lo];
                            for (g, &o) in dst.iter_mut().zip(src) {
                                *g += wgt * o;
                            }
                        }
                    }
                }
            }
        });

    // Parameter gradients, one output channel per task.
    let mut grads = ConvGrads::zeros(p);
    let weight_stride = p.c_in * 9;
    grads
        .weight
        .par_chunks_mut(weight_stride)
        .zip(grads.bias.par_iter_mut())
        .enumerate()
        .for_each(|(co, (w_chunk, b_acc))| {
            let mut bias_sum = T::zero();
            for bi in 0..n {
                let go_plane = grad_out.plane(bi, co);
                bias_sum += go_plane.iter().copied().sum::<T>();
            }
            *b_acc = bias_sum;
            for ci in 0..p.c_in {
                for ky in 0..3usize {
                    let dy = ky as i64 - 1;
                    let (y_lo, y_hi) = tap_range(h, dy);
                    for kx in 0..3usize {
                        let dx = kx as i64 - 1;
                        let (x_lo, x_hi) = tap_range(w, dx);
                        let mut acc = T::zero();
                        if x_lo < x_hi {
                            for bi in 0..n {
                                let go_plane = grad_out.plane(bi, co);
                                let in_plane = x.plane(bi, ci);
                                for y in y_lo..y_hi {
                                    let sy = (y as i64 + dy) as usize;
                                    let go_row = &go_plane[(y * w + x_lo)..][..x_hi - x_lo];
                                    let in_row = &in_plane
                                        [(sy * w + (x_lo as i64 + dx) as usize)..][..x_hi - x_lo];
                                    acc += go_row
                                        .iter()
                                        .zip(in_row)
                                        .map(|(&g, &v)| g * v)
                                        .sum::<T>();
                                }
                            }
                        }
                        w_chunk[(ci * 3 + ky) * 3 + kx] = acc;
                    }
                }
            }
        });

    Ok((grad_x, grads))
}

/// Batch-norm parameters with running statistics for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub initialized: bool,
}

impl<T: Scalar> BnParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> BnGrads<T> {
    pub fn zeros(p: &BnParams<T>) -> Self {
        Self {
            gamma: vec![T::zero(); p.gamma.len()],
            beta: vec![T::zero(); p.beta.len()],
        }
    }
}

/// Training-mode cache: normalized activations plus the batch statistics
/// needed for the backward pass and the running-statistics update.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub x_hat: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Train-mode batch norm: per-channel statistics over batch x spatial
/// positions (biased variance), output `gamma * x_hat + beta`.
pub fn batchnorm_forward_train<T: Scalar>(
    x: &Tensor4<T>,
    p: &BnParams<T>,
) -> Result<(Tensor4<T>, BnCache<T>), NetworkError> {
    if x.c != p.channels() {
        return Err(NetworkError::ChannelMismatch {
            expected: p.channels(),
            got: x.c,
        });
    }
    let (n, c, h, w) = x.shape();
    let count = T::from_f64((n * h * w) as f64);
    let eps = T::from_f64(BN_EPSILON);
    let mut out = Tensor4::zeros(n, c, h, w);
    let mut x_hat = Tensor4::zeros(n, c, h, w);
    let mut inv_std = vec![T::zero(); c];
    let mut batch_mean = vec![T::zero(); c];
    let mut batch_var = vec![T::zero(); c];
    for ci in 0..c {
        let mut sum = T::zero();
        for bi in 0..n {
            sum += x.plane(bi, ci).iter().copied().sum::<T>();
        }
        let mean = sum / count;
        let mut var_sum = T::zero();
        for bi in 0..n {
            var_sum += x
                .plane(bi, ci)
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>();
        }
        let var = var_sum / count;
        let istd = T::one() / (var + eps).sqrt();
        batch_mean[ci] = mean;
        batch_var[ci] = var;
        inv_std[ci] = istd;
        let (g, b) = (p.gamma[ci], p.beta[ci]);
        for bi in 0..n {
            let src = x.plane(bi, ci);
            for (xh, &v) in x_hat.plane_mut(bi, ci).iter_mut().zip(src) {
                *xh = (v - mean) * istd;
            }
            for (o, &v) in out.plane_mut(bi, ci).iter_mut().zip(src) {
                *o = g * ((v - mean) * istd) + b;
            }
        }
    }
    out.debug_check_finite("batchnorm_forward_train");
    Ok((
        out,
        BnCache {
            x_hat,
            inv_std,
            batch_mean,
            batch_var,
        },
    ))
}

/// Inference-mode batch norm using running statistics.
pub fn batchnorm_forward_infer<T: Scalar>(
    x: &Tensor4<T>,
    p: &BnParams<T>,
) -> Result<Tensor4<T>, NetworkError> {
    if !p.initialized {
        return Err(NetworkError::RunningStatsUnset);
    }
    if x.c != p.channels() {
        return Err(NetworkError::ChannelMismatch {
            expected: p.channels(),
            got: x.c,
        });
    }
    let (n, c, h, w) = x.shape();
    let eps = T::from_f64(BN_EPSILON);
    let mut out = Tensor4::zeros(n, c, h, w);
    for ci in 0..c {
        let istd = T::one() / (p.running_var[ci] + eps).sqrt();
        let (mean, g, b) = (p.running_mean[ci], p.gamma[ci], p.beta[ci]);
        for bi in 0..n {
            let src = x.plane(bi, ci);
            for (o, &v) in out.plane_mut(bi, ci).iter_mut().zip(src) {
                *o = g * ((v - mean) * istd) + b;
            }
        }
    }
    out.debug_check_finite("batchnorm_forward_infer");
    Ok(out)
}

/// Update running statistics from a train-mode cache.
pub fn batchnorm_update_running<T: Scalar>(p: &mut BnParams<T>, cache: &BnCache<T>) {
    let m = T::from_f64(BN_MOMENTUM);
    let keep = T::one() - m;
    for ci in 0..p.channels() {
        p.running_mean[ci] = keep * p.running_mean[ci] + m * cache.batch_mean[ci];
        p.running_var[ci] = keep * p.running_var[ci] + m * cache.batch_var[ci];
    }
    p.initialized = true;
}

/// Train-mode batch-norm backward: gradients flow through the batch
/// statistics as well as the normalized values.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    p: &BnParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, BnGrads<T>), NetworkError> {
    let (n, c, h, w) = cache.x_hat.shape();
    if grad_out.shape() != (n, c, h, w) {
        return Err(NetworkError::ShapeMismatch {
            context: "batchnorm_backward grad_out",
            expected: (n, c, h, w),
            got: grad_out.shape(),
        });
    }
    let count = T::from_f64((n * h * w) as f64);
    let mut grad_x = Tensor4::zeros(n, c, h, w);
    let mut grads = BnGrads {
        gamma: vec![T::zero(); c],
        beta: vec![T::zero(); c],
    };
    for ci in 0..c {
        let mut sum_go = T::zero();
        let mut sum_go_xhat = T::zero();
        for bi in 0..n {
            let go = grad_out.plane(bi, ci);
            let xh = cache.x_hat.plane(bi, ci);
            sum_go += go.iter().copied().sum::<T>();
            sum_go_xhat += go.iter().zip(xh).map(|(&g, &x)| g * x).sum::<T>();
        }
        grads.beta[ci] = sum_go;
        grads.gamma[ci] = sum_go_xhat;
        let coef = p.gamma[ci] * cache.inv_std[ci] / count;
        for bi in 0..n {
            let go = grad_out.plane(bi, ci);
            let xh = cache.x_hat.plane(bi, ci);
            for ((g, &o), &x) in grad_x.plane_mut(bi, ci).iter_mut().zip(go).zip(xh) {
                *g = coef * (count * o - sum_go - x * sum_go_xhat);
            }
        }
    }
    Ok((grad_x, grads))
}

/// Elementwise max(0, x).
pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let (n, c, h, w) = x.shape();
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor4::from_vec(n, c, h, w, data)
}

/// ReLU backward, masking by the forward *output* (y > 0 iff x > 0; the
/// subgradient at exactly 0 is taken as 0).
pub fn relu_backward<T: Scalar>(output: &Tensor4<T>, grad_out: &Tensor4<T>) -> Tensor4<T> {
    debug_assert_eq!(output.shape(), grad_out.shape());
    let (n, c, h, w) = output.shape();
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::from_vec(n, c, h, w, data)
}

/// Recorded argmax offsets of 2x2 pooling windows; offsets are row-major
/// within the window (0 = top-left, 1 = top-right, 2 = bottom-left,
/// 3 = bottom-right).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub offsets: Vec<u8>,
}

/// 2x2 max pooling with stride 2. Ties resolve to the smallest offset.
pub fn maxpool2x2_forward<T: Scalar>(
    x: &Tensor4<T>,
) -> Result<(Tensor4<T>, PoolIndices), NetworkError> {
    let (n, c, h, w) = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NetworkError::OddSpatialDims { h, w });
    }
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Tensor4::zeros(n, c, ph, pw);
    let mut offsets = vec![0u8; n * c * ph * pw];
    for bi in 0..n {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let base = (bi * c + ci) * ph * pw;
            for y in 0..ph {
                for xo in 0..pw {
                    let (sy, sx) = (2 * y, 2 * xo);
                    let candidates = [
                        src[sy * w + sx],
                        src[sy * w + sx + 1],
                        src[(sy + 1) * w + sx],
                        src[(sy + 1) * w + sx + 1],
                    ];
                    let mut best = 0usize;
                    for (k, &v) in candidates.iter().enumerate().skip(1) {
                        if v > candidates[best] {
                            best = k;
                        }
                    }
                    out.set(bi, ci, y, xo, candidates[best]);
                    offsets[base + y * pw + xo] = best as u8;
                }
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            n,
            c,
            h: ph,
            w: pw,
            offsets,
        },
    ))
}

/// Route each pooled gradient back to its argmax position.
pub fn maxpool2x2_backward<T: Scalar>(
    indices: &PoolIndices,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>, NetworkError> {
    let (n, c, ph, pw) = grad_out.shape();
    if (indices.n, indices.c, indices.h, indices.w) != (n, c, ph, pw) {
        return Err(NetworkError::ShapeMismatch {
            context: "maxpool2x2_backward indices",
            expected: (indices.n, indices.c, indices.h, indices.w),
            got: grad_out.shape(),
        });
    }
    let mut grad_x = Tensor4::zeros(n, c, 2 * ph, 2 * pw);
    scatter_by_offsets(indices, grad_out, &mut grad_x);
    Ok(grad_x)
}

fn scatter_by_offsets<T: Scalar>(indices: &PoolIndices, src: &Tensor4<T>, dst: &mut Tensor4<T>) {
    let (n, c, ph, pw) = src.shape();
    let w2 = 2 * pw;
    for bi in 0..n {
        for ci in 0..c {
            let base = (bi * c + ci) * ph * pw;
            let src_plane = src.plane(bi, ci);
            let dst_plane = dst.plane_mut(bi, ci);
            for y in 0..ph {
                for xo in 0..pw {
                    let off = indices.offsets[base + y * pw + xo] as usize;
                    let (sy, sx) = (2 * y + off / 2, 2 * xo + off % 2);
                    dst_plane[sy * w2 + sx] = src_plane[y * pw + xo];
                }
            }
        }
    }
}

/// Upsample by placing each value at its recorded argmax position, zeros
/// elsewhere. The indices must come from a pool whose output shape and
/// channel count match `x`.
pub fn maxunpool2x2<T: Scalar>(
    x: &Tensor4<T>,
    indices: &PoolIndices,
) -> Result<Tensor4<T>, NetworkError> {
    if (indices.n, indices.c, indices.h, indices.w) != x.shape() {
        return Err(NetworkError::ShapeMismatch {
            context: "maxunpool2x2 indices",
            expected: (indices.n, indices.c, indices.h, indices.w),
            got: x.shape(),
        });
    }
    let (n, c, ph, pw) = x.shape();
    let mut out = Tensor4::zeros(n, c, 2 * ph, 2 * pw);
    scatter_by_offsets(indices, x, &mut out);
    Ok(out)
}

/// Unpool backward: gather gradients from the recorded positions.
pub fn maxunpool2x2_backward<T: Scalar>(
    indices: &PoolIndices,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>, NetworkError> {
    let (n, c, h2, w2) = grad_out.shape();
    if (indices.n, indices.c, 2 * indices.h, 2 * indices.w) != (n, c, h2, w2) {
        return Err(NetworkError::ShapeMismatch {
            context: "maxunpool2x2_backward indices",
            expected: (indices.n, indices.c, 2 * indices.h, 2 * indices.w),
            got: grad_out.shape(),
        });
    }
    let (ph, pw) = (indices.h, indices.w);
    let mut grad_x = Tensor4::zeros(n, c, ph, pw);
    for bi in 0..n {
        for ci in 0..c {
            let base = (bi * c + ci) * ph * pw;
            let go_plane = grad_out.plane(bi, ci);
            let gx_plane = grad_x.plane_mut(bi, ci);
            for y in 0..ph {
                for xo in 0..pw {
                    let off = indices.offsets[base + y * pw + xo] as usize;
                    let (sy, sx) = (2 * y + off / 2, 2 * xo + off % 2);
                    gx_plane[y * pw + xo] = go_plane[sy * w2 + sx];
                }
            }
        }
    }
    Ok(grad_x)
}

/// Per-pixel softmax over the two class channels.
pub fn softmax2<T: Scalar>(logits: &Tensor4<T>) -> Result<Tensor4<T>, NetworkError> {
    if logits.c != 2 {
        return Err(NetworkError::ChannelMismatch {
            expected: 2,
            got: logits.c,
        });
    }
    let (n, _, h, w) = logits.shape();
    let mut probs = Tensor4::zeros(n, 2, h, w);
    for bi in 0..n {
        for i in 0..h * w {
            let l0 = logits.plane(bi, 0)[i];
            let l1 = logits.plane(bi, 1)[i];
            let m = l0.max(l1);
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            let s = e0 + e1;
            probs.plane_mut(bi, 0)[i] = e0 / s;
            probs.plane_mut(bi, 1)[i] = e1 / s;
        }
    }
    Ok(probs)
}

/// Mean per-pixel two-class cross entropy and its gradient with respect
/// to the logits. Channel 1 is the tubule class; targets are the binary
/// groundtruth masks of each batch item.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor4<T>,
    targets: &[&BinaryMask],
) -> Result<(T, Tensor4<T>), NetworkError> {
    if logits.c != 2 {
        return Err(NetworkError::ChannelMismatch {
            expected: 2,
            got: logits.c,
        });
    }
    let (n, _, h, w) = logits.shape();
    if targets.len() != n || targets.iter().any(|t| t.shape() != (h, w)) {
        let got = targets
            .first()
            .map(|t| (targets.len(), 1, t.shape().0, t.shape().1))
            .unwrap_or((0, 0, 0, 0));
        return Err(NetworkError::ShapeMismatch {
            context: "softmax_cross_entropy targets",
            expected: (n, 1, h, w),
            got,
        });
    }
    let pixel_count = T::from_f64((n * h * w) as f64);
    let mut grad = Tensor4::zeros(n, 2, h, w);
    let mut loss = T::zero();
    for bi in 0..n {
        let target = targets[bi].as_slice();
        for i in 0..h * w {
            let l0 = logits.plane(bi, 0)[i];
            let l1 = logits.plane(bi, 1)[i];
            let m = l0.max(l1);
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            let s = e0 + e1;
            let p0 = e0 / s;
            let p1 = e1 / s;
            let t = target[i];
            let l_true = if t == 1 { l1 } else { l0 };
            loss += s.ln() + m - l_true;
            let (y0, y1) = if t == 1 {
                (T::zero(), T::one())
            } else {
                (T::one(), T::zero())
            };
            grad.plane_mut(bi, 0)[i] = (p0 - y0) / pixel_count;
            grad.plane_mut(bi, 1)[i] = (p1 - y1) / pixel_count;
        }
    }
    Ok((loss / pixel_count, grad))
}
