//! Forward numeric kernels for the supported layer set.
//!
//! All kernels are pure functions over [`Tensor`] values. Sums (convolution
//! accumulators, channel statistics, softmax normalizers) run in f64 no
//! matter the tensor dtype and follow a fixed iteration order, so outputs
//! never depend on batch size or evaluation order. Samples in a batch are
//! processed independently.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Dtype, Scalar, Tensor};

/// Sampling distribution for [`draw`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dist {
    Normal { mu: f64, sigma: f64 },
    Uniform { a: f64, b: f64 },
}

/// Draw `n` values from `dist` into a rank-1 tensor.
pub fn draw(rng: &mut Rng, dist: Dist, n: usize, dtype: Dtype) -> Result<Tensor> {
    match dist {
        Dist::Normal { mu, sigma } => Tensor::rand_normal(&[n], mu, sigma, rng, dtype),
        Dist::Uniform { a, b } => Tensor::rand_uniform(&[n], a, b, rng, dtype),
    }
}

/// Spatial geometry shared by convolution and pooling.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) fn conv_geom(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    if stride == 0 {
        return Err(Error::param("stride must be >= 1".to_string()));
    }
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    if kh == 0 || kw == 0 || kh > hp || kw > wp {
        return Err(Error::shape(format!(
            "kernel {kh}x{kw} does not fit padded input {hp}x{wp}"
        )));
    }
    if (hp - kh) % stride != 0 || (wp - kw) % stride != 0 {
        return Err(Error::shape(format!(
            "output size not integral: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )));
    }
    Ok(ConvGeom {
        out_h: (hp - kh) / stride + 1,
        out_w: (wp - kw) / stride + 1,
    })
}

/// Valid output index range [lo, hi) for which `o*stride + k_off - padding`
/// lands inside `[0, in_size)`.
#[inline]
pub(crate) fn valid_out_range(
    out_size: usize,
    in_size: usize,
    k_off: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let lo = padding.saturating_sub(k_off).div_ceil(stride);
    let max_in = in_size as isize - 1 + padding as isize - k_off as isize;
    if max_in < 0 {
        return (0, 0);
    }
    let hi = ((max_in as usize) / stride + 1).min(out_size);
    (lo.min(hi), hi)
}

/// 2-D cross-correlation with zero padding.
///
/// `input` is `[N, C, H, W]`, `weight` is `[K, C, kh, kw]`, optional `bias`
/// is `[K]`; output is `[N, K, H', W']`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if input.rank() != 4 || weight.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d expects rank-4 input and weight, got {:?} and {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    let (n, c, h, w) = dims4(input);
    let (k, wc, kh, kw) = dims4(weight);
    if wc != c {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {c}, weight expects {wc}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(Error::shape(format!(
                "conv2d bias shape {:?}, expected [{k}]",
                b.shape()
            )));
        }
    }
    if input.dtype() != weight.dtype() {
        return Err(Error::shape("conv2d: input/weight dtypes differ".to_string()));
    }
    let geom = conv_geom(h, w, kh, kw, stride, padding)?;

    match input.dtype() {
        Dtype::F32 => conv2d_impl::<f32>(input, weight, bias, stride, padding, n, c, h, w, k, kh, kw, geom),
        Dtype::F64 => conv2d_impl::<f64>(input, weight, bias, stride, padding, n, c, h, w, k, kh, kw, geom),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_impl<T: Scalar>(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
) -> Result<Tensor> {
    let x = input.as_slice::<T>();
    let wt = weight.as_slice::<T>();
    let (oh, ow) = (geom.out_h, geom.out_w);
    let mut out: Vec<T> = Vec::with_capacity(n * k * oh * ow);
    let mut acc = vec![0.0f64; oh * ow];

    for ni in 0..n {
        for ki in 0..k {
            let b = bias.map(|b| b.at(ki)).unwrap_or(0.0);
            acc.fill(b);
            for ci in 0..c {
                let plane = &x[((ni * c) + ci) * h * w..][..h * w];
                for khi in 0..kh {
                    let (oh_lo, oh_hi) = valid_out_range(oh, h, khi, stride, padding);
                    for kwi in 0..kw {
                        let wv = wt[(((ki * c) + ci) * kh + khi) * kw + kwi].to64();
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = valid_out_range(ow, w, kwi, stride, padding);
                        for ohi in oh_lo..oh_hi {
                            let ih = ohi * stride + khi - padding;
                            let row = &plane[ih * w..][..w];
                            let arow = &mut acc[ohi * ow..][..ow];
                            for owi in ow_lo..ow_hi {
                                let iw = owi * stride + kwi - padding;
                                arow[owi] += wv * row[iw].to64();
                            }
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&v| T::from64(v)));
        }
    }
    Tensor::from_vec(&[n, k, oh, ow], out)
}

/// Inference-mode batch normalization over the channel axis of `[N, C, ...]`.
///
/// `(x - running_mean) / sqrt(running_var + eps) * gamma + beta`, per channel.
pub fn batchnorm_infer(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if input.rank() < 2 {
        return Err(Error::shape(format!(
            "batchnorm expects rank >= 2, got {:?}",
            input.shape()
        )));
    }
    let c = input.shape()[1];
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.shape() != [c] {
            return Err(Error::shape(format!(
                "batchnorm {name} shape {:?}, expected [{c}]",
                t.shape()
            )));
        }
    }
    if eps < 0.0 {
        return Err(Error::param(format!("batchnorm eps must be >= 0, got {eps}")));
    }
    for i in 0..c {
        if running_var.at(i) < 0.0 {
            return Err(Error::param(format!(
                "batchnorm running_var[{i}] = {} is negative",
                running_var.at(i)
            )));
        }
    }

    let n = input.shape()[0];
    let spatial: usize = input.shape()[2..].iter().product();
    // Per-channel affine: scale = gamma / sqrt(var + eps), shift = beta - mean * scale.
    let mut scale = vec![0.0f64; c];
    let mut shift = vec![0.0f64; c];
    for i in 0..c {
        let s = gamma.at(i) / (running_var.at(i) + eps).sqrt();
        scale[i] = s;
        shift[i] = beta.at(i) - running_mean.at(i) * s;
    }
    let mut out = vec![0.0f64; input.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            for s in 0..spatial {
                out[base + s] = input.at(base + s) * scale[ci] + shift[ci];
            }
        }
    }
    Tensor::from_f64s(input.shape(), &out, input.dtype())
}

/// max(x, 0) elementwise.
pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// Window max pooling on `[N, C, H, W]`. Padded cells never win the max.
pub fn maxpool(input: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::shape(format!(
            "maxpool expects rank-4 input, got {:?}",
            input.shape()
        )));
    }
    if padding >= kernel {
        return Err(Error::shape(format!(
            "maxpool padding {padding} must be smaller than kernel {kernel}"
        )));
    }
    let (n, c, h, w) = dims4(input);
    let geom = conv_geom(h, w, kernel, kernel, stride, padding)?;
    let (oh, ow) = (geom.out_h, geom.out_w);
    let mut out = vec![0.0f64; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            let in_base = (ni * c + ci) * h * w;
            let out_base = (ni * c + ci) * oh * ow;
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for khi in 0..kernel {
                        let ih = (ohi * stride + khi) as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kwi in 0..kernel {
                            let iw = (owi * stride + kwi) as isize - padding as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let v = input.at(in_base + ih as usize * w + iw as usize);
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[out_base + ohi * ow + owi] = best;
                }
            }
        }
    }
    Tensor::from_f64s(&[n, c, oh, ow], &out, input.dtype())
}

/// Per-channel spatial mean: `[N, C, H, W]` -> `[N, C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::shape(format!(
            "global_avg_pool expects rank-4 input, got {:?}",
            input.shape()
        )));
    }
    let (n, c, h, w) = dims4(input);
    let spatial = h * w;
    let mut out = vec![0.0f64; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            let mut acc = 0.0f64;
            for s in 0..spatial {
                acc += input.at(base + s);
            }
            out[ni * c + ci] = acc / spatial as f64;
        }
    }
    Tensor::from_f64s(&[n, c], &out, input.dtype())
}

/// Fully-connected layer: `x W^T + b` with `x: [N, F]`, `weight: [O, F]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if input.rank() != 2 || weight.rank() != 2 {
        return Err(Error::shape(format!(
            "linear expects rank-2 input and weight, got {:?} and {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let (o, wf) = (weight.shape()[0], weight.shape()[1]);
    if wf != f {
        return Err(Error::shape(format!(
            "linear feature mismatch: input has {f}, weight expects {wf}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::shape(format!(
                "linear bias shape {:?}, expected [{o}]",
                b.shape()
            )));
        }
    }
    let mut out = vec![0.0f64; n * o];
    for ni in 0..n {
        for oi in 0..o {
            let mut acc = bias.map(|b| b.at(oi)).unwrap_or(0.0);
            for fi in 0..f {
                acc += input.at(ni * f + fi) * weight.at(oi * f + fi);
            }
            out[ni * o + oi] = acc;
        }
    }
    Tensor::from_f64s(&[n, o], &out, input.dtype())
}

/// Row-wise softmax with max subtraction, `[N, C]` -> `[N, C]`.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!(
            "softmax expects rank-2 logits, got {:?}",
            logits.shape()
        )));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![0.0f64; n * c];
    for ni in 0..n {
        let row = ni * c;
        let mut m = f64::NEG_INFINITY;
        for ci in 0..c {
            m = m.max(logits.at(row + ci));
        }
        let mut sum = 0.0f64;
        for ci in 0..c {
            let e = (logits.at(row + ci) - m).exp();
            out[row + ci] = e;
            sum += e;
        }
        for ci in 0..c {
            out[row + ci] /= sum;
        }
    }
    Tensor::from_f64s(logits.shape(), &out, logits.dtype())
}

/// Per-row log(sum(exp(x))) with max subtraction; used by the loss.
pub(crate) fn log_sum_exp_rows(logits: &Tensor) -> Vec<f64> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![0.0f64; n];
    for ni in 0..n {
        let row = ni * c;
        let mut m = f64::NEG_INFINITY;
        for ci in 0..c {
            m = m.max(logits.at(row + ci));
        }
        let mut sum = 0.0f64;
        for ci in 0..c {
            sum += (logits.at(row + ci) - m).exp();
        }
        out[ni] = m + sum.ln();
    }
    out
}

#[inline]
fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dtype;

    fn tensor_f32(shape: &[usize], vals: &[f32]) -> Tensor {
        Tensor::from_vec(shape, vals.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut rng = Rng::new(1);
        let x = Tensor::rand_uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut rng, Dtype::F32).unwrap();
        // One 1x1 kernel per channel arrangement: K=C with kronecker weights.
        let c = 3;
        let mut w = vec![0.0f32; c * c];
        for i in 0..c {
            w[i * c + i] = 1.0;
        }
        let weight = tensor_f32(&[c, c, 1, 1], &w);
        let y = conv2d(&x, &weight, None, 1, 0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn conv_all_ones_3x3_sums_to_45() {
        let x = tensor_f32(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = tensor_f32(&[1, 1, 3, 3], &[1.0; 9]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.at(0), 45.0);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = tensor_f32(&[1, 2, 4, 4], &[0.0; 32]);
        let w = tensor_f32(&[1, 3, 3, 3], &[0.0; 27]);
        assert!(matches!(conv2d(&x, &w, None, 1, 0), Err(Error::Shape(_))));
        // Non-integral output size.
        let w = tensor_f32(&[1, 2, 2, 2], &[0.0; 8]);
        assert!(conv2d(&x, &w, None, 3, 0).is_err());
    }

    #[test]
    fn batchnorm_hand_case() {
        // x=5, gamma=2, beta=1, mean=3, var=4, eps=0 -> 2*(5-3)/2 + 1 = 3.
        let x = tensor_f32(&[1, 1, 1, 1], &[5.0]);
        let y = batchnorm_infer(
            &x,
            &tensor_f32(&[1], &[2.0]),
            &tensor_f32(&[1], &[1.0]),
            &tensor_f32(&[1], &[3.0]),
            &tensor_f32(&[1], &[4.0]),
            0.0,
        )
        .unwrap();
        assert_eq!(y.at(0), 3.0);
    }

    #[test]
    fn batchnorm_identity_params() {
        let mut rng = Rng::new(2);
        let x = Tensor::rand_normal(&[2, 3, 4, 4], 0.0, 1.0, &mut rng, Dtype::F32).unwrap();
        let y = batchnorm_infer(
            &x,
            &Tensor::full(&[3], 1.0, Dtype::F32),
            &Tensor::zeros(&[3], Dtype::F32),
            &Tensor::zeros(&[3], Dtype::F32),
            &Tensor::full(&[3], 1.0, Dtype::F32),
            0.0,
        )
        .unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn batchnorm_constant_input_gives_beta() {
        let x = Tensor::full(&[2, 2, 3, 3], 7.0, Dtype::F32);
        let y = batchnorm_infer(
            &x,
            &Tensor::full(&[2], 1.5, Dtype::F32),
            &Tensor::full(&[2], -2.0, Dtype::F32),
            &Tensor::full(&[2], 7.0, Dtype::F32),
            &Tensor::full(&[2], 3.0, Dtype::F32),
            1e-5,
        )
        .unwrap();
        for i in 0..y.len() {
            assert_eq!(y.at(i), -2.0);
        }
    }

    #[test]
    fn batchnorm_negative_variance_rejected() {
        let x = Tensor::zeros(&[1, 1, 2, 2], Dtype::F32);
        let one = Tensor::full(&[1], 1.0, Dtype::F32);
        let zero = Tensor::zeros(&[1], Dtype::F32);
        let neg = Tensor::full(&[1], -1.0, Dtype::F32);
        assert!(matches!(
            batchnorm_infer(&x, &one, &zero, &zero, &neg, 1e-5),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn relu_basics() {
        let x = tensor_f32(&[3], &[-1.0, 0.0, 2.0]);
        let y = relu(&x);
        assert_eq!(y.as_slice::<f32>(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&y), y);
    }

    #[test]
    fn maxpool_2x2() {
        let x = tensor_f32(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let y = maxpool(&x, 2, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.at(0), 4.0);
    }

    #[test]
    fn maxpool_composition_matches_wider_window() {
        // Non-overlapping max of maxes equals the max over merged windows;
        // repeated pooling never alters already-selected values.
        let mut rng = Rng::new(3);
        let x = Tensor::rand_normal(&[2, 2, 8, 8], 0.0, 1.0, &mut rng, Dtype::F32).unwrap();
        let twice = maxpool(&maxpool(&x, 2, 2, 0).unwrap(), 2, 2, 0).unwrap();
        let wide = maxpool(&x, 4, 4, 0).unwrap();
        assert_eq!(twice, wide);
    }

    #[test]
    fn maxpool_invalid_window_rejected() {
        let x = Tensor::zeros(&[1, 1, 3, 3], Dtype::F32);
        assert!(maxpool(&x, 4, 1, 0).is_err());
        assert!(maxpool(&x, 2, 2, 2).is_err());
    }

    #[test]
    fn global_avg_pool_matches_loop() {
        let mut rng = Rng::new(4);
        let x = Tensor::rand_uniform(&[1, 2, 4, 4], 0.0, 1.0, &mut rng, Dtype::F64).unwrap();
        let y = global_avg_pool(&x).unwrap();
        for ci in 0..2 {
            let mut sum = 0.0;
            for s in 0..16 {
                sum += x.at(ci * 16 + s);
            }
            assert!((y.at(ci) - sum / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_hand_case() {
        // x=[1,2], W=[[3,4]], b=[5] -> [16].
        let x = tensor_f32(&[1, 2], &[1.0, 2.0]);
        let w = tensor_f32(&[1, 2], &[3.0, 4.0]);
        let b = tensor_f32(&[1], &[5.0]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.at(0), 16.0);
    }

    #[test]
    fn linear_identity_weight() {
        let mut rng = Rng::new(5);
        let x = Tensor::rand_normal(&[3, 4], 0.0, 1.0, &mut rng, Dtype::F32).unwrap();
        let mut w = vec![0.0f32; 16];
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        let y = linear(&x, &tensor_f32(&[4, 4], &w), Some(&Tensor::zeros(&[4], Dtype::F32)))
            .unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let y = softmax(&tensor_f32(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(y.at(0), 0.5);
        assert_eq!(y.at(1), 0.5);

        let y = softmax(&tensor_f32(&[1, 2], &[1000.0, 1000.0])).unwrap();
        assert!(y.all_finite());
        assert_eq!(y.at(0), 0.5);
    }

    #[test]
    fn softmax_closed_form() {
        let y = softmax(&Tensor::from_vec(&[1, 2], vec![2.0f64.ln(), 0.0]).unwrap()).unwrap();
        assert!((y.at(0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((y.at(1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn draw_dispatches_by_distribution() {
        let mut rng = Rng::new(6);
        let t = draw(&mut rng, Dist::Uniform { a: 0.0, b: 1.0 }, 10, Dtype::F32).unwrap();
        assert_eq!(t.shape(), &[10]);
        assert!(draw(&mut rng, Dist::Normal { mu: 0.0, sigma: -1.0 }, 3, Dtype::F32).is_err());
    }
}
