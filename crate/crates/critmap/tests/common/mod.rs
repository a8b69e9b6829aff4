//! Independent oracles shared by the integration suites. Everything here
//! is written against the mathematical definitions with plain loops and
//! stays independent of the library's kernel and gradient implementations.

#![allow(dead_code)]

use critmap::grad::{backward, training_loss, BnMode, ParamGrads};
use critmap::model::{LayerParams, ModelGraph};
use critmap::tensor::{Dtype, Tensor};

/// Six-loop cross-correlation reference.
pub fn naive_conv2d(
    x: &[f64],
    xs: &[usize],
    w: &[f64],
    ws: &[usize],
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0f64; n * k * oh * ow];
    for ni in 0..n {
        for ki in 0..k {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut acc = bias.map(|b| b[ki]).unwrap_or(0.0);
                    for ci in 0..c {
                        for khi in 0..kh {
                            for kwi in 0..kw {
                                let ih = (ohi * stride + khi) as isize - padding as isize;
                                let iw = (owi * stride + kwi) as isize - padding as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + ih as usize) * wd + iw as usize];
                                let wv = w[((ki * c + ci) * kh + khi) * kw + kwi];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * k + ki) * oh + ohi) * ow + owi] = acc;
                }
            }
        }
    }
    (out, vec![n, k, oh, ow])
}

/// Triple-loop x W^T + b reference.
pub fn naive_linear(
    x: &[f64],
    n: usize,
    f: usize,
    w: &[f64],
    o: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0f64; n * o];
    for ni in 0..n {
        for oi in 0..o {
            let mut acc = bias.map(|b| b[oi]).unwrap_or(0.0);
            for fi in 0..f {
                acc += x[ni * f + fi] * w[oi * f + fi];
            }
            out[ni * o + oi] = acc;
        }
    }
    out
}

pub fn naive_maxpool(
    x: &[f64],
    xs: &[usize],
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let mut out = vec![0.0f64; n * c * oh * ow];
    for plane in 0..n * c {
        for ohi in 0..oh {
            for owi in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for khi in 0..kernel {
                    for kwi in 0..kernel {
                        let ih = (ohi * stride + khi) as isize - padding as isize;
                        let iw = (owi * stride + kwi) as isize - padding as isize;
                        if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                            continue;
                        }
                        best = best.max(x[(plane * h + ih as usize) * w + iw as usize]);
                    }
                }
                out[(plane * oh + ohi) * ow + owi] = best;
            }
        }
    }
    (out, vec![n, c, oh, ow])
}

pub fn naive_global_avg_pool(x: &[f64], xs: &[usize]) -> Vec<f64> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let mut out = vec![0.0f64; n * c];
    for plane in 0..n * c {
        let mut acc = 0.0;
        for s in 0..h * w {
            acc += x[plane * h * w + s];
        }
        out[plane] = acc / (h * w) as f64;
    }
    out
}

pub fn naive_batchnorm_infer(
    x: &[f64],
    xs: &[usize],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let (n, c) = (xs[0], xs[1]);
    let spatial: usize = xs[2..].iter().product();
    let mut out = vec![0.0f64; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            for s in 0..spatial {
                let i = (ni * c + ci) * spatial + s;
                out[i] = (x[i] - mean[ci]) / (var[ci] + eps).sqrt() * gamma[ci] + beta[ci];
            }
        }
    }
    out
}

/// Independent Spearman reference: explicit tie-averaged ranking by sorting
/// value-index pairs, then the textbook Pearson sum formula.
pub fn spearman_oracle(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut pairs: Vec<(f64, usize)> = v.iter().cloned().zip(0..).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = vec![0.0; v.len()];
        let mut start = 0;
        while start < pairs.len() {
            let mut end = start;
            while end + 1 < pairs.len() && pairs[end + 1].0 == pairs[start].0 {
                end += 1;
            }
            let avg: f64 = (start..=end).map(|i| (i + 1) as f64).sum::<f64>()
                / (end - start + 1) as f64;
            for &(_, idx) in &pairs[start..=end] {
                out[idx] = avg;
            }
            start = end + 1;
        }
        out
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let sx: f64 = rx.iter().sum();
    let sy: f64 = ry.iter().sum();
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
    let sxx: f64 = rx.iter().map(|a| a * a).sum();
    let syy: f64 = ry.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let mut worst = 0.0f64;
    for (&g, &w) in got.iter().zip(want) {
        let denom = g.abs().max(w.abs());
        if denom > 1e-7 {
            worst = worst.max((g - w).abs() / denom);
        }
    }
    worst
}

/// Central finite differences over every learnable parameter of `model`,
/// compared against the analytic reverse-mode gradients.
///
/// Returns the worst relative error across all parameters and the input.
/// The model must be f64 for step h = 1e-5 to be meaningful.
pub fn finite_difference_check(
    model: &ModelGraph,
    batch: &Tensor,
    labels: &[u16],
    mode: BnMode,
) -> f64 {
    assert_eq!(model.dtype, Dtype::F64, "gradient checks run in f64");
    let h = 1e-5;
    let analytic = backward(model, batch, labels, mode).expect("backward");
    let mut worst = 0.0f64;

    for layer_id in model.params.keys() {
        let Some(grads) = analytic.grads.get(layer_id) else {
            continue;
        };
        let snapshot = model.param_snapshot(layer_id).expect("snapshot");
        let named_grads: Vec<(&str, &Tensor)> = match grads {
            ParamGrads::Conv { weight, bias } | ParamGrads::Linear { weight, bias } => {
                let mut v = vec![("weight", weight)];
                if let Some(b) = bias {
                    v.push(("bias", b));
                }
                v
            }
            ParamGrads::Batchnorm { gamma, beta } => vec![("gamma", gamma), ("beta", beta)],
        };
        for (name, grad) in named_grads {
            for i in 0..grad.len() {
                let probe = |delta: f64| -> f64 {
                    let mut m = model.clone();
                    let perturbed = perturb(&snapshot, name, i, delta);
                    m.set_params(layer_id, &perturbed).expect("set");
                    training_loss(&m, batch, labels, mode).expect("loss")
                };
                let fd = (probe(h) - probe(-h)) / (2.0 * h);
                worst = worst.max(rel_err(grad.at(i), fd));
            }
        }
    }

    // Input gradient, every element.
    let base = batch.to_f64_vec();
    for i in 0..base.len() {
        let probe = |delta: f64| -> f64 {
            let mut vals = base.clone();
            vals[i] += delta;
            let b = Tensor::from_vec(batch.shape(), vals).expect("tensor");
            training_loss(model, &b, labels, mode).expect("loss")
        };
        let fd = (probe(h) - probe(-h)) / (2.0 * h);
        worst = worst.max(rel_err(analytic.input_grad.at(i), fd));
    }
    worst
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-7 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

fn perturb(snapshot: &LayerParams, name: &str, index: usize, delta: f64) -> LayerParams {
    let bump = |t: &Tensor| -> Tensor {
        let mut v = t.to_f64_vec();
        v[index] += delta;
        Tensor::from_vec(t.shape(), v).expect("tensor")
    };
    match snapshot {
        LayerParams::Conv { weight, bias } => match name {
            "weight" => LayerParams::Conv {
                weight: bump(weight),
                bias: bias.clone(),
            },
            "bias" => LayerParams::Conv {
                weight: weight.clone(),
                bias: bias.as_ref().map(bump),
            },
            _ => unreachable!(),
        },
        LayerParams::Linear { weight, bias } => match name {
            "weight" => LayerParams::Linear {
                weight: bump(weight),
                bias: bias.clone(),
            },
            "bias" => LayerParams::Linear {
                weight: weight.clone(),
                bias: bias.as_ref().map(bump),
            },
            _ => unreachable!(),
        },
        LayerParams::Batchnorm {
            gamma,
            beta,
            running_mean,
            running_var,
        } => match name {
            "gamma" => LayerParams::Batchnorm {
                gamma: bump(gamma),
                beta: beta.clone(),
                running_mean: running_mean.clone(),
                running_var: running_var.clone(),
            },
            "beta" => LayerParams::Batchnorm {
                gamma: gamma.clone(),
                beta: bump(beta),
                running_mean: running_mean.clone(),
                running_var: running_var.clone(),
            },
            _ => unreachable!(),
        },
    }
}
