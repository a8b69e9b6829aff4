//! Desk-scale model production: SGD training, the projected-gradient
//! attack, adversarial training, and light augmentations.
//!
//! Everything is deterministic given the config seed: shuffle order, attack
//! random starts, and augmentation draws all come from labeled child
//! streams, so reruns are bit-identical and adversarial training at eps = 0
//! coincides exactly with standard training.

use std::collections::BTreeMap;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::{accuracy, backward, cross_entropy_loss, input_gradient, BnMode, ParamGrads};
use crate::model::{LayerParams, ModelGraph};
use crate::rng::{combine3, hash64, Rng};
use crate::tensor::{Dtype, Tensor};

/// Perturbation norm for the attack ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Linf,
    L2,
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Norm::Linf => write!(f, "linf"),
            Norm::L2 => write!(f, "l2"),
        }
    }
}

/// Projected-gradient attack parameters. `eps` is on the same scale as
/// pixel values in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub eps: f64,
    pub alpha: f64,
    pub steps: usize,
    pub norm: Norm,
    pub random_start: bool,
}

impl AttackConfig {
    /// Three-step attack with the usual `alpha = 2.5 eps / steps` step size.
    pub fn new(eps: f64, norm: Norm) -> AttackConfig {
        let steps = 3;
        AttackConfig {
            eps,
            alpha: 2.5 * eps / steps as f64,
            steps,
            norm,
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps < 0.0 {
            return Err(Error::param(format!("eps must be >= 0, got {}", self.eps)));
        }
        if self.steps == 0 {
            return Err(Error::param("attack steps must be >= 1".to_string()));
        }
        if self.eps > 0.0 && self.alpha <= 0.0 {
            return Err(Error::param(format!(
                "attack alpha must be > 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Input transformation applied to each training minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    Standard,
    Adversarial(AttackConfig),
    Augmented {
        noise_sigma: f64,
        flip: bool,
        crop_pad: usize,
    },
}

/// Supervised training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size,
            lr,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed,
            mode: TrainMode::Standard,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1".to_string()));
        }
        if self.lr < 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::param(
                "lr, momentum and weight_decay must be >= 0".to_string(),
            ));
        }
        match &self.mode {
            TrainMode::Adversarial(a) => a.validate(),
            TrainMode::Augmented {
                noise_sigma,
                crop_pad: _,
                flip: _,
            } => {
                if *noise_sigma < 0.0 {
                    return Err(Error::param("noise_sigma must be >= 0".to_string()));
                }
                Ok(())
            }
            TrainMode::Standard => Ok(()),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
}

/// Momentum update of batchnorm running statistics.
const BN_MOMENTUM: f64 = 0.1;

/// Train a model with SGD + momentum on cross-entropy.
///
/// Deterministic given the seed: the shuffle order, attack and augmentation
/// streams are all derived from it. Loss and accuracy in the log refer to
/// the minibatches as consumed (perturbed ones under adversarial training).
pub fn train(
    mut model: ModelGraph,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelGraph, Vec<EpochLog>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::param("cannot train on an empty dataset".to_string()));
    }
    if dataset.num_classes != model.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model expects {}",
            dataset.num_classes, model.num_classes
        )));
    }
    if dataset.sample_shape() != model.input_shape {
        return Err(Error::shape(format!(
            "dataset samples {:?} do not match model input {:?}",
            dataset.sample_shape(),
            model.input_shape
        )));
    }

    let n = dataset.len();
    let mut velocities: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step_counter: u64 = 0;

    for epoch in 0..config.epochs {
        let order = permutation(n, Rng::new(combine3(config.seed, hash64("shuffle"), epoch as u64)));
        let mut augment_rng = Rng::new(combine3(config.seed, hash64("augment"), epoch as u64));
        let mut loss_sum = 0.0f64;
        let mut correct_sum = 0.0f64;

        for chunk in order.chunks(config.batch_size) {
            let (clean, labels) = dataset.batch(chunk, model.dtype)?;
            let batch = match &config.mode {
                TrainMode::Standard => clean,
                TrainMode::Adversarial(attack) => {
                    let mut rng =
                        Rng::new(combine3(config.seed, hash64("pgd"), step_counter));
                    pgd_attack(&model, &clean, &labels, attack, &mut rng)?
                }
                TrainMode::Augmented {
                    noise_sigma,
                    flip,
                    crop_pad,
                } => augment(&clean, *noise_sigma, *flip, *crop_pad, &mut augment_rng)?,
            };
            let out = backward(&model, &batch, &labels, BnMode::Train)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1 });
            }
            loss_sum += out.loss * chunk.len() as f64;
            correct_sum += accuracy(&out.logits, &labels)? * chunk.len() as f64;
            sgd_step(&mut model, &out.grads, &mut velocities, config)?;
            update_running_stats(&mut model, &out.bn_batch_stats);
            step_counter += 1;
        }

        log.push(EpochLog {
            epoch: epoch + 1,
            split: "train",
            loss: loss_sum / n as f64,
            accuracy: correct_sum / n as f64,
        });
    }
    Ok((model, log))
}

/// Adversarial training: every minibatch is replaced by its attacked
/// version before the gradient step. Requires an adversarial mode config.
pub fn train_adversarial(
    model: ModelGraph,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelGraph, Vec<EpochLog>)> {
    if !matches!(config.mode, TrainMode::Adversarial(_)) {
        return Err(Error::param(
            "train_adversarial requires an adversarial mode config".to_string(),
        ));
    }
    train(model, dataset, config)
}

/// Projected-gradient attack on a batch.
///
/// Iterative loss ascent with sign steps (linf) or normalized-gradient
/// steps (l2), projecting into the eps-ball around the input and clamping
/// to the valid pixel range after every step. Gradients run with
/// batchnorm in inference mode. `eps = 0` returns the input unchanged
/// without consuming any randomness.
pub fn pgd_attack(
    model: &ModelGraph,
    x: &Tensor,
    labels: &[u16],
    attack: &AttackConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    attack.validate()?;
    model.check_batch(x)?;
    if attack.eps == 0.0 {
        return Ok(x.clone());
    }
    let n = x.shape()[0];
    let per_sample: usize = x.shape()[1..].iter().product();
    let clean: Vec<f64> = x.to_f64_vec();
    let mut delta = vec![0.0f64; clean.len()];

    if attack.random_start {
        match attack.norm {
            Norm::Linf => rng.fill_uniform(&mut delta, -attack.eps, attack.eps),
            Norm::L2 => {
                // Uniform in the ball: normal direction, radius eps * u^(1/d).
                rng.fill_normal(&mut delta, 0.0, 1.0);
                for s in 0..n {
                    let d = &mut delta[s * per_sample..][..per_sample];
                    let norm = l2_norm(d).max(1e-30);
                    let radius =
                        attack.eps * rng.next_f64().powf(1.0 / per_sample as f64);
                    for v in d.iter_mut() {
                        *v *= radius / norm;
                    }
                }
            }
        }
    }

    let mut adv = materialize(&clean, &delta, x, attack.eps)?;
    for _ in 0..attack.steps {
        let (_, grad) = input_gradient(model, &adv, labels, BnMode::Eval)?;
        match attack.norm {
            Norm::Linf => {
                for (i, dv) in delta.iter_mut().enumerate() {
                    let g = grad.at(i);
                    *dv = (*dv + attack.alpha * sign(g)).clamp(-attack.eps, attack.eps);
                }
            }
            Norm::L2 => {
                for s in 0..n {
                    let d = &mut delta[s * per_sample..][..per_sample];
                    let gs: Vec<f64> =
                        (0..per_sample).map(|i| grad.at(s * per_sample + i)).collect();
                    let gnorm = l2_norm(&gs).max(1e-30);
                    for (dv, g) in d.iter_mut().zip(&gs) {
                        *dv += attack.alpha * g / gnorm;
                    }
                    let dnorm = l2_norm(d);
                    if dnorm > attack.eps {
                        let scale = attack.eps / dnorm * (1.0 - 1e-9);
                        for v in d.iter_mut() {
                            *v *= scale;
                        }
                    }
                }
            }
        }
        adv = materialize(&clean, &delta, x, attack.eps)?;
    }
    if attack.norm == Norm::L2 {
        enforce_l2_ball(x, &mut adv, attack.eps)?;
    }
    Ok(adv)
}

/// Build the perturbed batch in the model dtype, keeping the pixel range
/// and per-element eps bound exact on the stored values.
fn materialize(clean: &[f64], delta: &[f64], x: &Tensor, eps: f64) -> Result<Tensor> {
    let mut out = vec![0.0f64; clean.len()];
    for i in 0..clean.len() {
        out[i] = (clean[i] + delta[i]).clamp(0.0, 1.0);
    }
    let t = Tensor::from_f64s(x.shape(), &out, x.dtype())?;
    // Rounding into a narrower dtype can push a stored value just past the
    // ball boundary; snap such values to the nearest in-bound representable.
    if x.dtype() == Dtype::F32 {
        let mut vals: Vec<f32> = t.as_slice::<f32>().to_vec();
        for (i, v) in vals.iter_mut().enumerate() {
            let xi = clean[i];
            let lo = (xi - eps).max(0.0);
            let hi = (xi + eps).min(1.0);
            if (*v as f64) > hi {
                *v = prev_f32(*v);
            }
            if (*v as f64) < lo {
                *v = next_f32(*v);
            }
        }
        return Tensor::from_vec(x.shape(), vals);
    }
    Ok(t)
}

/// Shrink stored per-sample perturbations until their l2 norm, measured on
/// the stored values, is within eps.
///
/// The shrink margin must exceed the dtype's relative rounding step or
/// re-storing can leave the values unchanged; start at 1e-6 (16 f32 ulps)
/// and harden on the rare retry.
fn enforce_l2_ball(x: &Tensor, adv: &mut Tensor, eps: f64) -> Result<()> {
    let n = x.shape()[0];
    let per_sample: usize = x.shape()[1..].iter().product();
    let mut margin = 1e-6;
    loop {
        let mut violation = false;
        let mut out = adv.to_f64_vec();
        for s in 0..n {
            let mut norm2 = 0.0f64;
            for i in 0..per_sample {
                let d = out[s * per_sample + i] - x.at(s * per_sample + i);
                norm2 += d * d;
            }
            let norm = norm2.sqrt();
            if norm > eps {
                violation = true;
                let scale = eps / norm * (1.0 - margin);
                for i in 0..per_sample {
                    let idx = s * per_sample + i;
                    out[idx] = x.at(idx) + (out[idx] - x.at(idx)) * scale;
                }
            }
        }
        if !violation {
            return Ok(());
        }
        *adv = Tensor::from_f64s(x.shape(), &out, x.dtype())?;
        margin *= 2.0;
    }
}

/// Mirror images along the width axis.
pub fn flip_horizontal(batch: &Tensor) -> Result<Tensor> {
    if batch.rank() != 4 {
        return Err(Error::shape("flip expects [N, C, H, W]".to_string()));
    }
    let (n, c, h, w) = {
        let s = batch.shape();
        (s[0], s[1], s[2], s[3])
    };
    let mut out = vec![0.0f64; batch.len()];
    for plane in 0..n * c {
        for y in 0..h {
            let base = plane * h * w + y * w;
            for xx in 0..w {
                out[base + xx] = batch.at(base + (w - 1 - xx));
            }
        }
    }
    Tensor::from_f64s(batch.shape(), &out, batch.dtype())
}

/// Light input augmentation: per-sample horizontal flip (p = 0.5), random
/// crop after zero padding, then Gaussian pixel noise. Draw order per
/// sample is flip, crop offsets, noise; disabled options draw nothing.
/// Noise is not clamped.
pub fn augment(
    batch: &Tensor,
    noise_sigma: f64,
    flip: bool,
    crop_pad: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    if batch.rank() != 4 {
        return Err(Error::shape("augment expects [N, C, H, W]".to_string()));
    }
    let (n, c, h, w) = {
        let s = batch.shape();
        (s[0], s[1], s[2], s[3])
    };
    let stride = c * h * w;
    let mut out = batch.to_f64_vec();
    let mut noise = vec![0.0f64; stride];
    for s in 0..n {
        let img = &mut out[s * stride..][..stride];
        if flip && rng.next_f64() < 0.5 {
            for ci in 0..c {
                for y in 0..h {
                    let row = ci * h * w + y * w;
                    for xx in 0..w / 2 {
                        img.swap(row + xx, row + w - 1 - xx);
                    }
                }
            }
        }
        if crop_pad > 0 {
            let dx = rng.next_below(2 * crop_pad as u64 + 1) as isize - crop_pad as isize;
            let dy = rng.next_below(2 * crop_pad as u64 + 1) as isize - crop_pad as isize;
            if dx != 0 || dy != 0 {
                let src = img.to_vec();
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let sy = y as isize + dy;
                            let sx = xx as isize + dx;
                            img[ci * h * w + y * w + xx] =
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    src[ci * h * w + sy as usize * w + sx as usize]
                                } else {
                                    0.0
                                };
                        }
                    }
                }
            }
        }
        if noise_sigma > 0.0 {
            rng.fill_normal(&mut noise, 0.0, noise_sigma);
            for (v, nv) in img.iter_mut().zip(&noise) {
                *v += nv;
            }
        }
    }
    Tensor::from_f64s(batch.shape(), &out, batch.dtype())
}

/// Mean loss and accuracy over `indices`, inference mode.
pub fn evaluate(
    model: &ModelGraph,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::param("empty evaluation subset".to_string()));
    }
    let mut loss_sum = 0.0f64;
    let mut correct = 0.0f64;
    for chunk in indices.chunks(batch_size) {
        let (batch, labels) = dataset.batch(chunk, model.dtype)?;
        let logits = model.forward(&batch)?;
        loss_sum += cross_entropy_loss(&logits, &labels)? * chunk.len() as f64;
        correct += accuracy(&logits, &labels)? * chunk.len() as f64;
    }
    Ok((loss_sum / indices.len() as f64, correct / indices.len() as f64))
}

/// Accuracy under the given attack, with a per-batch deterministic stream.
pub fn evaluate_robust(
    model: &ModelGraph,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
    attack: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::param("empty evaluation subset".to_string()));
    }
    let mut correct = 0.0f64;
    for (bi, chunk) in indices.chunks(batch_size).enumerate() {
        let (batch, labels) = dataset.batch(chunk, model.dtype)?;
        let mut rng = Rng::new(combine3(seed, hash64("attack-eval"), bi as u64));
        let adv = pgd_attack(model, &batch, &labels, attack, &mut rng)?;
        let logits = model.forward(&adv)?;
        correct += accuracy(&logits, &labels)? * chunk.len() as f64;
    }
    Ok(correct / indices.len() as f64)
}

fn sgd_step(
    model: &mut ModelGraph,
    grads: &BTreeMap<String, ParamGrads>,
    velocities: &mut BTreeMap<String, Vec<Vec<f64>>>,
    config: &TrainConfig,
) -> Result<()> {
    for (id, grad) in grads {
        let params = model
            .params
            .get_mut(id)
            .ok_or_else(|| Error::UnknownLayer(id.clone()))?;
        // (tensor, gradient, weight decay applies) triples; weight decay is
        // excluded from biases and batchnorm parameters.
        let mut triples: Vec<(&mut Tensor, &Tensor, bool)> = Vec::new();
        match (params, grad) {
            (
                LayerParams::Conv { weight, bias },
                ParamGrads::Conv {
                    weight: gw,
                    bias: gb,
                },
            )
            | (
                LayerParams::Linear { weight, bias },
                ParamGrads::Linear {
                    weight: gw,
                    bias: gb,
                },
            ) => {
                triples.push((weight, gw, true));
                if let (Some(b), Some(gb)) = (bias.as_mut(), gb.as_ref()) {
                    triples.push((b, gb, false));
                }
            }
            (
                LayerParams::Batchnorm { gamma, beta, .. },
                ParamGrads::Batchnorm {
                    gamma: gg,
                    beta: gb,
                },
            ) => {
                triples.push((gamma, gg, false));
                triples.push((beta, gb, false));
            }
            _ => {
                return Err(Error::config(format!(
                    "layer {id}: gradient kind does not match parameters"
                )))
            }
        }
        let vel = velocities
            .entry(id.clone())
            .or_insert_with(|| triples.iter().map(|(t, _, _)| vec![0.0; t.len()]).collect());
        for (ti, (tensor, grad, decay)) in triples.into_iter().enumerate() {
            let v = &mut vel[ti];
            let mut new_vals = vec![0.0f64; tensor.len()];
            for i in 0..tensor.len() {
                let theta = tensor.at(i);
                let mut g = grad.at(i);
                if decay {
                    g += config.weight_decay * theta;
                }
                v[i] = config.momentum * v[i] + g;
                new_vals[i] = theta - config.lr * v[i];
            }
            *tensor = Tensor::from_f64s(tensor.shape(), &new_vals, tensor.dtype())?;
        }
    }
    Ok(())
}

fn update_running_stats(
    model: &mut ModelGraph,
    batch_stats: &BTreeMap<String, crate::grad::BnStats>,
) {
    for (id, stats) in batch_stats {
        if let Some(LayerParams::Batchnorm {
            running_mean,
            running_var,
            ..
        }) = model.params.get_mut(id)
        {
            let c = running_mean.len();
            let mut rm = vec![0.0f64; c];
            let mut rv = vec![0.0f64; c];
            for i in 0..c {
                rm[i] = (1.0 - BN_MOMENTUM) * running_mean.at(i) + BN_MOMENTUM * stats.mean[i];
                rv[i] =
                    (1.0 - BN_MOMENTUM) * running_var.at(i) + BN_MOMENTUM * stats.var_unbiased[i];
            }
            *running_mean =
                Tensor::from_f64s(running_mean.shape(), &rm, running_mean.dtype()).expect("shape");
            *running_var =
                Tensor::from_f64s(running_var.shape(), &rv, running_var.dtype()).expect("shape");
        }
    }
}

fn permutation(n: usize, mut rng: Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..n.saturating_sub(1) {
        let j = i + rng.next_below((n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn prev_f32(v: f32) -> f32 {
    f32::from_bits(if v > 0.0 {
        v.to_bits() - 1
    } else {
        v.to_bits() + 1
    })
}

fn next_f32(v: f32) -> f32 {
    f32::from_bits(if v >= 0.0 {
        v.to_bits() + 1
    } else {
        v.to_bits() - 1
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};
    use crate::model::{build_model, ArchConfig};

    fn tiny_setup() -> (ModelGraph, Dataset) {
        let mut cfg = ArchConfig::mini(2, [3, 8, 8]);
        cfg.stage_blocks = vec![1];
        cfg.stage_channels = vec![4];
        let model = build_model(&cfg, 1).unwrap();
        let mut dcfg = SynthConfig::new(2, 32, 8);
        dcfg.margin = 0.5;
        let data = synth_dataset(&dcfg, 5).unwrap();
        (model, data)
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (model, data) = tiny_setup();
        let before: Vec<_> = model
            .randomizable_layers()
            .iter()
            .map(|id| model.param_snapshot(id).unwrap())
            .collect();
        let config = TrainConfig {
            lr: 0.0,
            ..TrainConfig::new(3, 32, 0.0, 7)
        };
        let (trained, log) = train(model, &data, &config).unwrap();
        for (id, snap) in trained.randomizable_layers().iter().zip(before) {
            assert_eq!(trained.param_snapshot(id).unwrap(), snap);
        }
        // Full-batch loss stays flat when nothing moves.
        for w in log.windows(2) {
            assert!((w[0].loss - w[1].loss).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_reproduces_training() {
        let (model, data) = tiny_setup();
        let config = TrainConfig::new(2, 8, 0.05, 21);
        let (a, log_a) = train(model.clone(), &data, &config).unwrap();
        let (b, log_b) = train(model, &data, &config).unwrap();
        assert_eq!(log_a, log_b);
        for id in a.randomizable_layers() {
            assert_eq!(a.param_snapshot(&id).unwrap(), b.param_snapshot(&id).unwrap());
        }
    }

    #[test]
    fn eps_zero_adversarial_equals_standard_bitwise() {
        let (model, data) = tiny_setup();
        let std_cfg = TrainConfig::new(2, 8, 0.05, 33);
        let adv_cfg = TrainConfig {
            mode: TrainMode::Adversarial(AttackConfig::new(0.0, Norm::Linf)),
            ..std_cfg.clone()
        };
        let (a, log_a) = train(model.clone(), &data, &std_cfg).unwrap();
        let (b, log_b) = train_adversarial(model, &data, &adv_cfg).unwrap();
        assert_eq!(log_a, log_b);
        for id in a.randomizable_layers() {
            assert_eq!(a.param_snapshot(&id).unwrap(), b.param_snapshot(&id).unwrap());
        }
    }

    #[test]
    fn pgd_eps_zero_is_identity() {
        let (model, data) = tiny_setup();
        let (batch, labels) = data.batch(&[0, 1, 2], model.dtype).unwrap();
        let attack = AttackConfig::new(0.0, Norm::Linf);
        let adv = pgd_attack(&model, &batch, &labels, &attack, &mut Rng::new(0)).unwrap();
        assert_eq!(adv, batch);
    }

    #[test]
    fn pgd_respects_linf_ball_and_pixel_range() {
        let (model, data) = tiny_setup();
        let (batch, labels) = data.batch(&(0..8).collect::<Vec<_>>(), model.dtype).unwrap();
        let eps = 8.0 / 255.0;
        let attack = AttackConfig::new(eps, Norm::Linf);
        let adv = pgd_attack(&model, &batch, &labels, &attack, &mut Rng::new(3)).unwrap();
        let mut max_delta = 0.0f64;
        for i in 0..batch.len() {
            let a = adv.at(i);
            assert!((0.0..=1.0).contains(&a));
            max_delta = max_delta.max((a - batch.at(i)).abs());
        }
        assert!(max_delta <= eps, "linf {max_delta} > {eps}");
        // The attack actually moved the input.
        assert!(max_delta > 0.0);
    }

    #[test]
    fn pgd_respects_l2_ball() {
        let (model, data) = tiny_setup();
        let (batch, labels) = data.batch(&(0..4).collect::<Vec<_>>(), model.dtype).unwrap();
        let eps = 0.5;
        let attack = AttackConfig::new(eps, Norm::L2);
        let adv = pgd_attack(&model, &batch, &labels, &attack, &mut Rng::new(4)).unwrap();
        let per_sample: usize = batch.shape()[1..].iter().product();
        for s in 0..4 {
            let mut norm2 = 0.0f64;
            for i in 0..per_sample {
                let d = adv.at(s * per_sample + i) - batch.at(s * per_sample + i);
                norm2 += d * d;
            }
            assert!(norm2.sqrt() <= eps, "l2 {} > {eps}", norm2.sqrt());
        }
    }

    #[test]
    fn pgd_single_step_matches_sign_pattern_on_linear_model() {
        // Two-class linear model: dL/dx = (p - onehot) W; for label 0 the
        // ascent direction is sign((p1)(w1 - w0)) elementwise, so one linf
        // step from a zero start moves each pixel by alpha in that
        // direction (before pixel clamping).
        use crate::model::{LayerInit, LayerKind, LayerSpec, INPUT_ID};
        use std::collections::BTreeMap;
        let f = 12;
        let mut weight = vec![0.0f32; 2 * f];
        for j in 0..f {
            weight[j] = if j % 2 == 0 { 1.0 } else { -1.0 };
            weight[f + j] = -weight[j];
        }
        let model = ModelGraph::new(
            "lin".into(),
            vec![LayerSpec {
                id: "head.fc".into(),
                kind: LayerKind::Linear {
                    out_features: 2,
                    bias: false,
                },
                init: Some(LayerInit::default()),
                inputs: vec![INPUT_ID.into()],
            }],
            BTreeMap::from([(
                "head.fc".to_string(),
                LayerParams::Linear {
                    weight: Tensor::from_vec(&[2, f], weight.clone()).unwrap(),
                    bias: None,
                },
            )]),
            2,
            [3, 2, 2],
            Dtype::F32,
        )
        .unwrap();
        let x = Tensor::full(&[1, 3, 2, 2], 0.5, Dtype::F32);
        let attack = AttackConfig {
            eps: 0.1,
            alpha: 0.03,
            steps: 1,
            norm: Norm::Linf,
            random_start: false,
        };
        let adv = pgd_attack(&model, &x, &[0], &attack, &mut Rng::new(0)).unwrap();
        // Gradient direction for label 0 is proportional to w1 - w0 = -2 w0.
        for j in 0..f {
            let want = 0.5 + attack.alpha * sign(-2.0 * weight[j] as f64);
            assert!(
                (adv.at(j) - want).abs() < 1e-6,
                "pixel {j}: {} vs {want}",
                adv.at(j)
            );
        }
    }

    #[test]
    fn augment_identity_when_disabled() {
        let (_, data) = tiny_setup();
        let (batch, _) = data.batch(&[0, 1], Dtype::F32).unwrap();
        let out = augment(&batch, 0.0, false, 0, &mut Rng::new(1)).unwrap();
        assert_eq!(out, batch);
    }

    #[test]
    fn double_flip_is_identity() {
        let (_, data) = tiny_setup();
        let (batch, _) = data.batch(&[0, 1, 2], Dtype::F32).unwrap();
        let flipped = flip_horizontal(&batch).unwrap();
        assert_ne!(flipped, batch);
        assert_eq!(flip_horizontal(&flipped).unwrap(), batch);
    }

    #[test]
    fn augment_noise_std_matches_sigma() {
        let images = Tensor::full(&[8, 3, 16, 16], 0.5, Dtype::F32);
        let noisy = augment(&images, 0.1, false, 0, &mut Rng::new(9)).unwrap();
        let n = images.len();
        let mut sum = 0.0;
        let mut sq = 0.0;
        for i in 0..n {
            let d = noisy.at(i) - images.at(i);
            sum += d;
            sq += d * d;
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        assert!((std - 0.1).abs() < 0.005, "std {std}");
    }

    #[test]
    fn head_only_loss_nonincreasing_under_small_lr() {
        use crate::model::{LayerInit, LayerKind, LayerSpec, INPUT_ID};
        use std::collections::BTreeMap;
        let mut dcfg = SynthConfig::new(2, 16, 6);
        dcfg.margin = 0.4;
        let data = synth_dataset(&dcfg, 3).unwrap();
        let f = 3 * 6 * 6;
        let model = ModelGraph::new(
            "probe".into(),
            vec![LayerSpec {
                id: "head.fc".into(),
                kind: LayerKind::Linear {
                    out_features: 2,
                    bias: true,
                },
                init: Some(LayerInit::default()),
                inputs: vec![INPUT_ID.into()],
            }],
            BTreeMap::from([(
                "head.fc".to_string(),
                LayerParams::Linear {
                    weight: Tensor::zeros(&[2, f], Dtype::F32),
                    bias: Some(Tensor::zeros(&[2], Dtype::F32)),
                },
            )]),
            2,
            [3, 6, 6],
            Dtype::F32,
        )
        .unwrap();
        let config = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::new(5, 16, 0.05, 2)
        };
        let (_, log) = train(model, &data, &config).unwrap();
        for w in log.windows(2) {
            assert!(
                w[1].loss <= w[0].loss + 1e-12,
                "loss increased: {} -> {}",
                w[0].loss,
                w[1].loss
            );
        }
    }

    #[test]
    fn divergence_reports_epoch() {
        let (model, data) = tiny_setup();
        // An absurd learning rate blows the loss up quickly.
        let config = TrainConfig::new(6, 32, 1e6, 1);
        match train(model, &data, &config) {
            Err(Error::Diverged { epoch }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
