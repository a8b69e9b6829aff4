//! Reverse-mode gradients of the mean cross-entropy loss.
//!
//! The layer set is fixed, so backpropagation is hand-written per kind over
//! a cached forward trace rather than taped. Gradients are exact (up to
//! rounding) for all learnable parameters and the input batch; the input
//! gradient drives the projected-gradient attack.
//!
//! Batchnorm has two modes: `Train` normalizes with the current batch's
//! statistics (and reports them so the caller can fold them into running
//! stats), `Eval` normalizes with stored running statistics.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{
    conv_params, flatten_features, linear_params, LayerKind, LayerParams, ModelGraph, INPUT_ID,
};
use crate::ops;
use crate::tensor::Tensor;

/// Batchnorm statistics source during a differentiable forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Use per-batch statistics (training).
    Train,
    /// Use stored running statistics (evaluation, attacks).
    Eval,
}

/// Per-channel statistics of one batch, as seen by a batchnorm layer.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// 1/m variance used for normalization.
    pub var_biased: Vec<f64>,
    /// 1/(m-1) variance used for running-stat updates.
    pub var_unbiased: Vec<f64>,
}

/// Gradients of one layer's learnable tensors.
#[derive(Debug, Clone)]
pub enum ParamGrads {
    Conv { weight: Tensor, bias: Option<Tensor> },
    Linear { weight: Tensor, bias: Option<Tensor> },
    Batchnorm { gamma: Tensor, beta: Tensor },
}

/// Everything produced by one backward pass.
#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub loss: f64,
    pub logits: Tensor,
    pub grads: BTreeMap<String, ParamGrads>,
    pub input_grad: Tensor,
    /// Batch statistics per batchnorm layer (train mode only).
    pub bn_batch_stats: BTreeMap<String, BnStats>,
}

/// Mean cross-entropy over the batch, computed from logits via a stable
/// log-sum-exp.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[u16]) -> Result<f64> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    check_labels(labels, n, c)?;
    let lse = ops::log_sum_exp_rows(logits);
    let mut sum = 0.0f64;
    for (ni, &label) in labels.iter().enumerate() {
        sum += lse[ni] - logits.at(ni * c + label as usize);
    }
    Ok(sum / n as f64)
}

/// Fraction of rows whose argmax equals the label (ties resolve to the
/// lowest index).
pub fn accuracy(logits: &Tensor, labels: &[u16]) -> Result<f64> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    check_labels(labels, n, c)?;
    let mut correct = 0usize;
    for (ni, &label) in labels.iter().enumerate() {
        let mut best = 0usize;
        for ci in 1..c {
            if logits.at(ni * c + ci) > logits.at(ni * c + best) {
                best = ci;
            }
        }
        if best == label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

fn check_labels(labels: &[u16], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::param(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::param("empty batch".to_string()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::param(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    Ok(())
}

/// Full backward pass: loss, parameter gradients and input gradient.
pub fn backward(
    model: &ModelGraph,
    batch: &Tensor,
    labels: &[u16],
    mode: BnMode,
) -> Result<BackwardOutput> {
    backward_impl(model, batch, labels, mode, true)
}

/// Input gradient only (parameter gradients skipped), for attacks.
pub fn input_gradient(
    model: &ModelGraph,
    batch: &Tensor,
    labels: &[u16],
    mode: BnMode,
) -> Result<(f64, Tensor)> {
    let out = backward_impl(model, batch, labels, mode, false)?;
    Ok((out.loss, out.input_grad))
}

/// Forward pass in the given batchnorm mode, returning the loss only.
/// Used by finite-difference probes and training diagnostics.
pub fn training_loss(
    model: &ModelGraph,
    batch: &Tensor,
    labels: &[u16],
    mode: BnMode,
) -> Result<f64> {
    model.check_batch(batch)?;
    check_labels(labels, batch.shape()[0], model.num_classes)?;
    let (values, _, pos) = forward_trace(model, batch, mode)?;
    cross_entropy_loss(&values[pos[model.output_id()]], labels)
}

type Trace<'a> = (Vec<Tensor>, Vec<Option<BnStats>>, BTreeMap<&'a str, usize>);

fn forward_trace<'a>(model: &'a ModelGraph, batch: &Tensor, mode: BnMode) -> Result<Trace<'a>> {
    let mut values: Vec<Tensor> = Vec::with_capacity(model.layers.len());
    let mut bn_stats: Vec<Option<BnStats>> = vec![None; model.layers.len()];
    let mut pos: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let input_of = |id: &str| -> &Tensor {
            if id == INPUT_ID {
                batch
            } else {
                &values[pos[id]]
            }
        };
        let x = input_of(&layer.inputs[0]);
        let out = match &layer.kind {
            LayerKind::Conv { stride, padding, .. } => {
                let (w, b) = conv_params(model.params_for(&layer.id, None)?);
                ops::conv2d(x, w, b, *stride, *padding)?
            }
            LayerKind::Batchnorm { eps } => match mode {
                BnMode::Eval => {
                    let LayerParams::Batchnorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    } = model.params_for(&layer.id, None)?
                    else {
                        unreachable!("validated model")
                    };
                    ops::batchnorm_infer(x, gamma, beta, running_mean, running_var, *eps)?
                }
                BnMode::Train => {
                    let LayerParams::Batchnorm { gamma, beta, .. } =
                        model.params_for(&layer.id, None)?
                    else {
                        unreachable!("validated model")
                    };
                    let (out, stats) = batchnorm_train_forward(x, gamma, beta, *eps)?;
                    bn_stats[i] = Some(stats);
                    out
                }
            },
            LayerKind::Relu => ops::relu(x),
            LayerKind::Maxpool {
                kernel,
                stride,
                padding,
            } => ops::maxpool(x, *kernel, *stride, *padding)?,
            LayerKind::GlobalAvgPool => ops::global_avg_pool(x)?,
            LayerKind::Linear { .. } => {
                let (w, b) = linear_params(model.params_for(&layer.id, None)?);
                ops::linear(&flatten_features(x)?, w, b)?
            }
            LayerKind::ResidualAdd => {
                let y = input_of(&layer.inputs[1]);
                x.add(y)?
            }
        };
        values.push(out);
        pos.insert(&layer.id, i);
    }
    Ok((values, bn_stats, pos))
}

fn backward_impl(
    model: &ModelGraph,
    batch: &Tensor,
    labels: &[u16],
    mode: BnMode,
    wrt_params: bool,
) -> Result<BackwardOutput> {
    model.check_batch(batch)?;
    let n = batch.shape()[0];
    let c = model.num_classes;
    check_labels(labels, n, c)?;

    let (values, mut bn_stats, pos) = forward_trace(model, batch, mode)?;
    let out_idx = pos[model.output_id()];
    let logits = values[out_idx].clone();
    let loss = cross_entropy_loss(&logits, labels)?;

    // d(loss)/d(logits) = (softmax - onehot) / N.
    let probs = ops::softmax(&logits)?;
    let mut dlogits = vec![0.0f64; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let onehot = if labels[ni] as usize == ci { 1.0 } else { 0.0 };
            dlogits[ni * c + ci] = (probs.at(ni * c + ci) - onehot) / n as f64;
        }
    }

    // Reverse sweep. grad_out[i] accumulates dL/d(output of layer i).
    let mut grad_out: Vec<Option<Tensor>> = vec![None; model.layers.len()];
    grad_out[out_idx] = Some(Tensor::from_f64s(&[n, c], &dlogits, model.dtype)?);
    let mut input_grad: Option<Tensor> = None;
    let mut grads: BTreeMap<String, ParamGrads> = BTreeMap::new();

    for (i, layer) in model.layers.iter().enumerate().rev() {
        let Some(dy) = grad_out[i].take() else {
            // Unreachable for validated single-output graphs.
            continue;
        };
        let input_of = |id: &str| -> &Tensor {
            if id == INPUT_ID {
                batch
            } else {
                &values[pos[id]]
            }
        };
        let x = input_of(&layer.inputs[0]);
        let mut push = |target: &str, g: Tensor, input_grad: &mut Option<Tensor>| -> Result<()> {
            if target == INPUT_ID {
                *input_grad = Some(match input_grad.take() {
                    Some(acc) => acc.add(&g)?,
                    None => g,
                });
            } else {
                let t = pos[target];
                grad_out[t] = Some(match grad_out[t].take() {
                    Some(acc) => acc.add(&g)?,
                    None => g,
                });
            }
            Ok(())
        };

        match &layer.kind {
            LayerKind::Conv { stride, padding, .. } => {
                let (w, b) = conv_params(model.params_for(&layer.id, None)?);
                let dx = conv2d_input_grad(x.shape(), w, &dy, *stride, *padding)?;
                if wrt_params {
                    let (dw, db) =
                        conv2d_param_grads(x, w.shape(), b.is_some(), &dy, *stride, *padding)?;
                    grads.insert(layer.id.clone(), ParamGrads::Conv { weight: dw, bias: db });
                }
                push(&layer.inputs[0], dx, &mut input_grad)?;
            }
            LayerKind::Batchnorm { eps } => {
                let LayerParams::Batchnorm {
                    gamma,
                    running_mean,
                    running_var,
                    ..
                } = model.params_for(&layer.id, None)?
                else {
                    unreachable!("validated model")
                };
                let (dx, dgamma, dbeta) = match mode {
                    BnMode::Train => batchnorm_train_backward(
                        x,
                        &dy,
                        gamma,
                        bn_stats[i].as_ref().expect("train stats cached"),
                        *eps,
                    )?,
                    BnMode::Eval => {
                        batchnorm_eval_backward(x, &dy, gamma, running_mean, running_var, *eps)?
                    }
                };
                if wrt_params {
                    grads.insert(
                        layer.id.clone(),
                        ParamGrads::Batchnorm {
                            gamma: dgamma,
                            beta: dbeta,
                        },
                    );
                }
                push(&layer.inputs[0], dx, &mut input_grad)?;
            }
            LayerKind::Relu => {
                let mut dx = vec![0.0f64; x.len()];
                for j in 0..x.len() {
                    if x.at(j) > 0.0 {
                        dx[j] = dy.at(j);
                    }
                }
                push(
                    &layer.inputs[0],
                    Tensor::from_f64s(x.shape(), &dx, dy.dtype())?,
                    &mut input_grad,
                )?;
            }
            LayerKind::Maxpool {
                kernel,
                stride,
                padding,
            } => {
                let dx = maxpool_backward(x, &dy, *kernel, *stride, *padding)?;
                push(&layer.inputs[0], dx, &mut input_grad)?;
            }
            LayerKind::GlobalAvgPool => {
                let (nn, cc, h, w) = {
                    let s = x.shape();
                    (s[0], s[1], s[2], s[3])
                };
                let scale = 1.0 / (h * w) as f64;
                let mut dx = vec![0.0f64; x.len()];
                for ni in 0..nn {
                    for ci in 0..cc {
                        let g = dy.at(ni * cc + ci) * scale;
                        let base = (ni * cc + ci) * h * w;
                        for s in 0..h * w {
                            dx[base + s] = g;
                        }
                    }
                }
                push(
                    &layer.inputs[0],
                    Tensor::from_f64s(x.shape(), &dx, dy.dtype())?,
                    &mut input_grad,
                )?;
            }
            LayerKind::Linear { .. } => {
                let (w, b) = linear_params(model.params_for(&layer.id, None)?);
                let flat = flatten_features(x)?;
                let (nn, f) = (flat.shape()[0], flat.shape()[1]);
                let o = w.shape()[0];
                let mut dx = vec![0.0f64; nn * f];
                for ni in 0..nn {
                    for fi in 0..f {
                        let mut acc = 0.0f64;
                        for oi in 0..o {
                            acc += dy.at(ni * o + oi) * w.at(oi * f + fi);
                        }
                        dx[ni * f + fi] = acc;
                    }
                }
                if wrt_params {
                    let mut dw = vec![0.0f64; o * f];
                    for oi in 0..o {
                        for fi in 0..f {
                            let mut acc = 0.0f64;
                            for ni in 0..nn {
                                acc += dy.at(ni * o + oi) * flat.at(ni * f + fi);
                            }
                            dw[oi * f + fi] = acc;
                        }
                    }
                    let db = if b.is_some() {
                        let mut db = vec![0.0f64; o];
                        for oi in 0..o {
                            let mut acc = 0.0f64;
                            for ni in 0..nn {
                                acc += dy.at(ni * o + oi);
                            }
                            db[oi] = acc;
                        }
                        Some(Tensor::from_f64s(&[o], &db, dy.dtype())?)
                    } else {
                        None
                    };
                    grads.insert(
                        layer.id.clone(),
                        ParamGrads::Linear {
                            weight: Tensor::from_f64s(&[o, f], &dw, dy.dtype())?,
                            bias: db,
                        },
                    );
                }
                push(
                    &layer.inputs[0],
                    Tensor::from_f64s(x.shape(), &dx, dy.dtype())?,
                    &mut input_grad,
                )?;
            }
            LayerKind::ResidualAdd => {
                push(&layer.inputs[0], dy.clone(), &mut input_grad)?;
                push(&layer.inputs[1], dy, &mut input_grad)?;
            }
        }
    }

    let input_grad = input_grad.unwrap_or_else(|| Tensor::zeros(batch.shape(), model.dtype));
    let bn_batch_stats = model
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| bn_stats[i].take().map(|s| (l.id.clone(), s)))
        .collect();

    Ok(BackwardOutput {
        loss,
        logits,
        grads,
        input_grad,
        bn_batch_stats,
    })
}

/// Train-mode batchnorm forward: normalize with batch statistics.
fn batchnorm_train_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BnStats)> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let spatial: usize = x.shape()[2..].iter().product();
    let m = (n * spatial) as f64;
    if n * spatial < 2 {
        return Err(Error::param(
            "batchnorm training requires at least 2 values per channel".to_string(),
        ));
    }
    let mut mean = vec![0.0f64; c];
    let mut var_b = vec![0.0f64; c];
    for ci in 0..c {
        let mut sum = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * spatial;
            for s in 0..spatial {
                sum += x.at(base + s);
            }
        }
        let mu = sum / m;
        let mut sq = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * spatial;
            for s in 0..spatial {
                let d = x.at(base + s) - mu;
                sq += d * d;
            }
        }
        mean[ci] = mu;
        var_b[ci] = sq / m;
    }
    let var_u: Vec<f64> = var_b.iter().map(|&v| v * m / (m - 1.0)).collect();

    let mut out = vec![0.0f64; x.len()];
    for ci in 0..c {
        let scale = gamma.at(ci) / (var_b[ci] + eps).sqrt();
        let shift = beta.at(ci) - mean[ci] * scale;
        for ni in 0..n {
            let base = (ni * c + ci) * spatial;
            for s in 0..spatial {
                out[base + s] = x.at(base + s) * scale + shift;
            }
        }
    }
    Ok((
        Tensor::from_f64s(x.shape(), &out, x.dtype())?,
        BnStats {
            mean,
            var_biased: var_b,
            var_unbiased: var_u,
        },
    ))
}

fn batchnorm_train_backward(
    x: &Tensor,
    dy: &Tensor,
    gamma: &Tensor,
    stats: &BnStats,
    eps: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let spatial: usize = x.shape()[2..].iter().product();
    let m = (n * spatial) as f64;
    let mut dx = vec![0.0f64; x.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for ci in 0..c {
        let mu = stats.mean[ci];
        let sigma = (stats.var_biased[ci] + eps).sqrt();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * spatial;
            for s in 0..spatial {
                let xhat = (x.at(base + s) - mu) / sigma;
                let g = dy.at(base + s);
                sum_dy += g;
                sum_dy_xhat += g * xhat;
            }
        }
        dbeta[ci] = sum_dy;
        dgamma[ci] = sum_dy_xhat;
        let k = gamma.at(ci) / sigma;
        for ni in 0..n {
            let base = (ni * c + ci) * spatial;
            for s in 0..spatial {
                let xhat = (x.at(base + s) - mu) / sigma;
                dx[base + s] =
                    k * (dy.at(base + s) - sum_dy / m - xhat * sum_dy_xhat / m);
            }
        }
    }
    Ok((
        Tensor::from_f64s(x.shape(), &dx, x.dtype())?,
        Tensor::from_f64s(&[c], &dgamma, x.dtype())?,
        Tensor::from_f64s(&[c], &dbeta, x.dtype())?,
    ))
}

fn batchnorm_eval_backward(
    x: &Tensor,
    dy: &Tensor,
    gamma: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let spatial: usize = x.shape()[2..].iter().product();
    let mut dx = vec![0.0f64; x.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for ci in 0..c {
        let sigma = (running_var.at(ci) + eps).sqrt();
        let k = gamma.at(ci) / sigma;
        let mu = running_mean.at(ci);
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * spatial;
            for s in 0..spatial {
                let g = dy.at(base + s);
                sum_dy += g;
                sum_dy_xhat += g * (x.at(base + s) - mu) / sigma;
                dx[base + s] = g * k;
            }
        }
        dbeta[ci] = sum_dy;
        dgamma[ci] = sum_dy_xhat;
    }
    Ok((
        Tensor::from_f64s(x.shape(), &dx, x.dtype())?,
        Tensor::from_f64s(&[c], &dgamma, x.dtype())?,
        Tensor::from_f64s(&[c], &dbeta, x.dtype())?,
    ))
}

fn conv2d_input_grad(
    x_shape: &[usize],
    weight: &Tensor,
    dy: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (k, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    let mut dx = vec![0.0f64; n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            let plane = &mut dx[(ni * c + ci) * h * w..][..h * w];
            for ki in 0..k {
                let dy_base = (ni * k + ki) * oh * ow;
                for khi in 0..kh {
                    let (oh_lo, oh_hi) = ops::valid_out_range(oh, h, khi, stride, padding);
                    for kwi in 0..kw {
                        let wv = weight.at((((ki * c) + ci) * kh + khi) * kw + kwi);
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = ops::valid_out_range(ow, w, kwi, stride, padding);
                        for ohi in oh_lo..oh_hi {
                            let ih = ohi * stride + khi - padding;
                            for owi in ow_lo..ow_hi {
                                let iw = owi * stride + kwi - padding;
                                plane[ih * w + iw] += wv * dy.at(dy_base + ohi * ow + owi);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_f64s(&[n, c, h, w], &dx, dy.dtype())
}

fn conv2d_param_grads(
    x: &Tensor,
    w_shape: &[usize],
    has_bias: bool,
    dy: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Option<Tensor>)> {
    let (n, c, h, w) = {
        let s = x.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (k, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    let mut dw = vec![0.0f64; k * c * kh * kw];
    for ki in 0..k {
        for ci in 0..c {
            for khi in 0..kh {
                let (oh_lo, oh_hi) = ops::valid_out_range(oh, h, khi, stride, padding);
                for kwi in 0..kw {
                    let (ow_lo, ow_hi) = ops::valid_out_range(ow, w, kwi, stride, padding);
                    let mut acc = 0.0f64;
                    for ni in 0..n {
                        let dy_base = (ni * k + ki) * oh * ow;
                        let x_base = (ni * c + ci) * h * w;
                        for ohi in oh_lo..oh_hi {
                            let ih = ohi * stride + khi - padding;
                            for owi in ow_lo..ow_hi {
                                let iw = owi * stride + kwi - padding;
                                acc += dy.at(dy_base + ohi * ow + owi) * x.at(x_base + ih * w + iw);
                            }
                        }
                    }
                    dw[(((ki * c) + ci) * kh + khi) * kw + kwi] = acc;
                }
            }
        }
    }
    let dweight = Tensor::from_f64s(w_shape, &dw, dy.dtype())?;
    let dbias = if has_bias {
        let mut db = vec![0.0f64; k];
        for ki in 0..k {
            let mut acc = 0.0f64;
            for ni in 0..n {
                let base = (ni * k + ki) * oh * ow;
                for s in 0..oh * ow {
                    acc += dy.at(base + s);
                }
            }
            db[ki] = acc;
        }
        Some(Tensor::from_f64s(&[k], &db, dy.dtype())?)
    } else {
        None
    };
    Ok((dweight, dbias))
}

fn maxpool_backward(
    x: &Tensor,
    dy: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = {
        let s = x.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    let mut dx = vec![0.0f64; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let in_base = (ni * c + ci) * h * w;
            let out_base = (ni * c + ci) * oh * ow;
            for ohi in 0..oh {
                for owi in 0..ow {
                    // First maximum in scan order receives the gradient.
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = None;
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
                            let idx = in_base + ih as usize * w + iw as usize;
                            let v = x.at(idx);
                            if v > best {
                                best = v;
                                best_idx = Some(idx);
                            }
                        }
                    }
                    if let Some(idx) = best_idx {
                        dx[idx] += dy.at(out_base + ohi * ow + owi);
                    }
                }
            }
        }
    }
    Tensor::from_f64s(x.shape(), &dx, dy.dtype())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchConfig};
    use crate::rng::Rng;
    use crate::tensor::Dtype;

    #[test]
    fn loss_at_uniform_softmax_is_ln_c() {
        let logits = Tensor::zeros(&[3, 4], Dtype::F64);
        let loss = cross_entropy_loss(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let logits = Tensor::zeros(&[2, 3], Dtype::F32);
        assert!(matches!(
            cross_entropy_loss(&logits, &[0, 3]),
            Err(Error::Param(_))
        ));
        assert!(backward(
            &build_model(&ArchConfig::mini(4, [3, 16, 16]), 1).unwrap(),
            &Tensor::zeros(&[1, 3, 16, 16], Dtype::F32),
            &[4],
            BnMode::Eval,
        )
        .is_err());
    }

    #[test]
    fn head_bias_gradient_is_mean_softmax_minus_onehot() {
        let mut cfg = ArchConfig::mini(4, [3, 16, 16]);
        cfg.dtype = Dtype::F64;
        let model = build_model(&cfg, 2).unwrap();
        let mut rng = Rng::new(3);
        let batch = Tensor::rand_uniform(&[5, 3, 16, 16], 0.0, 1.0, &mut rng, Dtype::F64).unwrap();
        let labels = [0u16, 1, 2, 3, 1];
        let out = backward(&model, &batch, &labels, BnMode::Eval).unwrap();
        let probs = ops::softmax(&out.logits).unwrap();
        let ParamGrads::Linear { bias: Some(db), .. } = &out.grads["head.fc"] else {
            panic!("head gradients missing")
        };
        for ci in 0..4 {
            let mut want = 0.0;
            for ni in 0..5 {
                let onehot = if labels[ni] as usize == ci { 1.0 } else { 0.0 };
                want += (probs.at(ni * 4 + ci) - onehot) / 5.0;
            }
            assert!((db.at(ci) - want).abs() < 1e-12, "bias grad {ci}");
        }
    }

    #[test]
    fn input_gradient_matches_full_backward() {
        let mut cfg = ArchConfig::mini(3, [3, 16, 16]);
        cfg.dtype = Dtype::F64;
        let model = build_model(&cfg, 5).unwrap();
        let mut rng = Rng::new(6);
        let batch = Tensor::rand_uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng, Dtype::F64).unwrap();
        let labels = [0u16, 2];
        let full = backward(&model, &batch, &labels, BnMode::Eval).unwrap();
        let (loss, gin) = input_gradient(&model, &batch, &labels, BnMode::Eval).unwrap();
        assert_eq!(loss, full.loss);
        assert_eq!(gin, full.input_grad);
    }
}
