//! Layer criticality measurement.
//!
//! A layer's criticality is how much the model's decision function moves
//! when that layer's learned parameters are replaced with fresh draws from
//! the layer's own initialization distribution: the cosine distance between
//! softmax outputs before and after randomization, averaged over an
//! evaluation subset, repeated across seeds, and summarized per layer.
//!
//! Seed derivation is structural: the trial seed is
//! `combine(base_seed, trial_index)` and the replacement draw for a layer
//! uses `combine(trial_seed, hash64(layer_id))`, so adding layers or
//! reordering trials never perturbs other draws. The evaluation subset is
//! identical across layers, trials and models sharing a base seed.
//!
//! `(layer, trial)` jobs are independent; each holds a private parameter
//! overlay over the read-only base model. Results merge in (layer order,
//! trial index), never completion order, so profiles are deterministic
//! under any worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::init::sample_init;
use crate::model::{LayerKind, LayerParams, ModelGraph, Overlay};
use crate::rng::{combine, hash64, Rng};
use crate::stats::summarize;
use crate::tensor::KahanSum;

/// How the before/after change is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Mean cosine distance between softmax outputs (label-free).
    Cosine,
    /// Drop in accuracy, clamped at zero.
    AccuracyDelta,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Cosine => write!(f, "cosine"),
            Metric::AccuracyDelta => write!(f, "accuracy_delta"),
        }
    }
}

/// Full reproducibility contract of one profiling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub base_seed: u64,
    pub n_trials: usize,
    pub n_samples: usize,
    pub batch_size: usize,
    pub metric: Metric,
}

impl RunConfig {
    pub fn new(base_seed: u64) -> RunConfig {
        RunConfig {
            base_seed,
            n_trials: 3,
            n_samples: 10_000,
            batch_size: 64,
            metric: Metric::Cosine,
        }
    }

    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::param("n_trials must be >= 1".to_string()));
        }
        if self.n_samples == 0 {
            return Err(Error::param("n_samples must be >= 1".to_string()));
        }
        if self.n_samples > dataset_len {
            return Err(Error::param(format!(
                "n_samples {} exceeds dataset size {dataset_len}",
                self.n_samples
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Per-layer trial series with its summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalityStats {
    pub layer_id: String,
    pub per_trial: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub stderr: f64,
}

/// Criticality of every randomizable layer of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalityProfile {
    pub model_id: String,
    pub config: RunConfig,
    pub clean_accuracy: f64,
    pub entries: Vec<CriticalityStats>,
}

impl CriticalityProfile {
    pub fn layer_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.layer_id.as_str()).collect()
    }

    pub fn entry(&self, layer_id: &str) -> Option<&CriticalityStats> {
        self.entries.iter().find(|e| e.layer_id == layer_id)
    }
}

/// Cosine distance `1 - p.q / (|p| |q|)` between nonnegative vectors.
///
/// Bitwise-equal inputs short-circuit to exactly 0; the general result is
/// clamped into [0, 1] (it lies there mathematically for nonnegative
/// inputs, up to rounding).
pub fn cosine_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::param(format!(
            "cosine_distance: length mismatch ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::param("cosine_distance: empty vectors".to_string()));
    }
    if p == q {
        return Ok(0.0);
    }
    let mut dot = 0.0f64;
    let mut pp = 0.0f64;
    let mut qq = 0.0f64;
    for (&a, &b) in p.iter().zip(q) {
        if a < 0.0 || b < 0.0 {
            return Err(Error::param(
                "cosine_distance: inputs must be nonnegative".to_string(),
            ));
        }
        dot += a * b;
        pp += a * a;
        qq += b * b;
    }
    if pp == 0.0 || qq == 0.0 {
        return Err(Error::param(
            "cosine_distance: zero vector has no direction".to_string(),
        ));
    }
    Ok((1.0 - dot / (pp.sqrt() * qq.sqrt())).clamp(0.0, 1.0))
}

/// Draw replacement parameters for one layer from its stored init specs.
///
/// The draw comes from `Rng::new(combine(seed, hash64(layer_id)))`, weight
/// first, then bias. The base model is untouched; batchnorm layers are
/// never valid targets.
pub fn randomize_layer(model: &ModelGraph, layer_id: &str, seed: u64) -> Result<Overlay> {
    let layer = model.layer(layer_id)?;
    if !layer.kind.is_randomizable() {
        return Err(Error::Target {
            layer: layer_id.to_string(),
            reason: "only conv and linear layers are re-randomized".to_string(),
        });
    }
    let init = layer
        .init
        .ok_or_else(|| Error::config(format!("layer {layer_id} has no init spec")))?;
    let mut rng = Rng::new(combine(seed, hash64(layer_id)));
    let current = model.param_snapshot(layer_id)?;
    let replacement = match (&layer.kind, &current) {
        (LayerKind::Conv { .. }, LayerParams::Conv { weight, bias }) => {
            let new_w = sample_init(&init.weight, weight.shape(), &mut rng, weight.dtype())?;
            let new_b = match bias {
                Some(b) => Some(sample_init(&init.bias, b.shape(), &mut rng, b.dtype())?),
                None => None,
            };
            LayerParams::Conv {
                weight: new_w,
                bias: new_b,
            }
        }
        (LayerKind::Linear { .. }, LayerParams::Linear { weight, bias }) => {
            let new_w = sample_init(&init.weight, weight.shape(), &mut rng, weight.dtype())?;
            let new_b = match bias {
                Some(b) => Some(sample_init(&init.bias, b.shape(), &mut rng, b.dtype())?),
                None => None,
            };
            LayerParams::Linear {
                weight: new_w,
                bias: new_b,
            }
        }
        _ => unreachable!("randomizable layers are conv or linear"),
    };
    let mut overlay = Overlay::new();
    overlay.insert(layer_id.to_string(), replacement);
    Ok(overlay)
}

/// Cached clean-model outputs on the evaluation subset.
#[derive(Debug, Clone)]
pub struct CleanEval {
    /// Row-major f64 softmax outputs, one row of `num_classes` per sample.
    pub probs: Vec<f64>,
    pub num_classes: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Evaluate the clean model once over `indices`.
pub fn clean_eval(
    model: &ModelGraph,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<CleanEval> {
    if indices.is_empty() {
        return Err(Error::param("empty evaluation subset".to_string()));
    }
    let c = model.num_classes;
    let mut probs = Vec::with_capacity(indices.len() * c);
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size) {
        let (batch, labels) = dataset.batch(chunk, model.dtype)?;
        let logits = model.forward(&batch)?;
        append_softmax_rows(&logits, &mut probs);
        correct += count_correct(&probs[probs.len() - chunk.len() * c..], c, &labels);
    }
    Ok(CleanEval {
        probs,
        num_classes: c,
        correct,
        accuracy: correct as f64 / indices.len() as f64,
    })
}

/// One randomization trial of one layer: the metric value in [0, 1].
pub fn criticality_trial(
    model: &ModelGraph,
    dataset: &Dataset,
    indices: &[usize],
    layer_id: &str,
    seed: u64,
    metric: Metric,
    batch_size: usize,
) -> Result<f64> {
    let clean = clean_eval(model, dataset, indices, batch_size)?;
    trial_against_clean(model, dataset, indices, layer_id, seed, metric, batch_size, &clean)
}

/// Trial evaluation against precomputed clean outputs.
#[allow(clippy::too_many_arguments)]
fn trial_against_clean(
    model: &ModelGraph,
    dataset: &Dataset,
    indices: &[usize],
    layer_id: &str,
    seed: u64,
    metric: Metric,
    batch_size: usize,
    clean: &CleanEval,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::param("empty evaluation subset".to_string()));
    }
    let overlay = randomize_layer(model, layer_id, seed)?;
    let c = clean.num_classes;
    let mut offset = 0usize;
    match metric {
        Metric::Cosine => {
            let mut sum = KahanSum::new();
            let mut rand_probs = Vec::with_capacity(batch_size * c);
            for chunk in indices.chunks(batch_size) {
                let (batch, _) = dataset.batch(chunk, model.dtype)?;
                let logits = model.forward_overlay(&batch, Some(&overlay))?;
                rand_probs.clear();
                append_softmax_rows(&logits, &mut rand_probs);
                for s in 0..chunk.len() {
                    let clean_row = &clean.probs[(offset + s) * c..][..c];
                    let rand_row = &rand_probs[s * c..][..c];
                    sum.add(cosine_distance(clean_row, rand_row)?);
                }
                offset += chunk.len();
            }
            Ok((sum.value() / indices.len() as f64).clamp(0.0, 1.0))
        }
        Metric::AccuracyDelta => {
            let mut rand_correct = 0usize;
            let mut rand_probs = Vec::with_capacity(batch_size * c);
            for chunk in indices.chunks(batch_size) {
                let (batch, labels) = dataset.batch(chunk, model.dtype)?;
                let logits = model.forward_overlay(&batch, Some(&overlay))?;
                rand_probs.clear();
                append_softmax_rows(&logits, &mut rand_probs);
                rand_correct += count_correct(&rand_probs, c, &labels);
            }
            let delta = (clean.correct as f64 - rand_correct as f64) / indices.len() as f64;
            Ok(delta.max(0.0))
        }
    }
}

/// All trials for one layer, summarized.
pub fn layer_criticality(
    model: &ModelGraph,
    dataset: &Dataset,
    indices: &[usize],
    layer_id: &str,
    config: &RunConfig,
) -> Result<CriticalityStats> {
    config.validate(dataset.len())?;
    let clean = clean_eval(model, dataset, indices, config.batch_size)?;
    let per_trial = (0..config.n_trials)
        .map(|t| {
            trial_against_clean(
                model,
                dataset,
                indices,
                layer_id,
                combine(config.base_seed, t as u64),
                config.metric,
                config.batch_size,
                &clean,
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, std, stderr) = summarize(&per_trial)?;
    Ok(CriticalityStats {
        layer_id: layer_id.to_string(),
        per_trial,
        mean,
        std,
        stderr,
    })
}

/// Profile every randomizable layer of a model.
///
/// The evaluation subset is drawn once as `n_samples` indices without
/// replacement from `combine(base_seed, hash64("subset"))`; clean outputs
/// are computed once and reused by all trials.
pub fn profile_model(
    model: &ModelGraph,
    dataset: &Dataset,
    config: &RunConfig,
) -> Result<CriticalityProfile> {
    config.validate(dataset.len())?;
    let indices = crate::io::subsample(
        dataset.len(),
        config.n_samples,
        combine(config.base_seed, hash64("subset")),
    )?;
    let clean = clean_eval(model, dataset, &indices, config.batch_size)?;
    let layers = model.randomizable_layers();

    let jobs: Vec<(usize, usize)> = (0..layers.len())
        .flat_map(|li| (0..config.n_trials).map(move |t| (li, t)))
        .collect();
    let values: Vec<f64> = jobs
        .par_iter()
        .map(|&(li, t)| {
            trial_against_clean(
                model,
                dataset,
                &indices,
                &layers[li],
                combine(config.base_seed, t as u64),
                config.metric,
                config.batch_size,
                &clean,
            )
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut entries = Vec::with_capacity(layers.len());
    for (li, layer_id) in layers.iter().enumerate() {
        let per_trial: Vec<f64> = (0..config.n_trials)
            .map(|t| values[li * config.n_trials + t])
            .collect();
        let (mean, std, stderr) = summarize(&per_trial)?;
        entries.push(CriticalityStats {
            layer_id: layer_id.clone(),
            per_trial,
            mean,
            std,
            stderr,
        });
    }
    Ok(CriticalityProfile {
        model_id: model.id.clone(),
        config: config.clone(),
        clean_accuracy: clean.accuracy,
        entries,
    })
}

/// Unweighted mean of per-layer criticality means.
pub fn mean_model_criticality(profile: &CriticalityProfile) -> Result<f64> {
    if profile.entries.is_empty() {
        return Err(Error::param("profile has no layers".to_string()));
    }
    Ok(profile.entries.iter().map(|e| e.mean).sum::<f64>() / profile.entries.len() as f64)
}

/// Per-layer `profile mean - baseline mean`; positive values are increases
/// in criticality relative to the baseline.
pub fn delta_to_baseline(
    profile: &CriticalityProfile,
    baseline: &CriticalityProfile,
) -> Result<Vec<(String, f64)>> {
    if profile.layer_ids() != baseline.layer_ids() {
        return Err(Error::Alignment(format!(
            "layer sets differ between {} and {}",
            profile.model_id, baseline.model_id
        )));
    }
    Ok(profile
        .entries
        .iter()
        .zip(&baseline.entries)
        .map(|(a, b)| (a.layer_id.clone(), a.mean - b.mean))
        .collect())
}

/// Append f64 softmax rows of a logits tensor to `out`.
fn append_softmax_rows(logits: &crate::tensor::Tensor, out: &mut Vec<f64>) {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    for ni in 0..n {
        let mut m = f64::NEG_INFINITY;
        for ci in 0..c {
            m = m.max(logits.at(ni * c + ci));
        }
        let start = out.len();
        let mut sum = 0.0f64;
        for ci in 0..c {
            let e = (logits.at(ni * c + ci) - m).exp();
            out.push(e);
            sum += e;
        }
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
}

/// Count rows whose argmax matches the label (ties to the lowest index).
fn count_correct(probs: &[f64], c: usize, labels: &[u16]) -> usize {
    let mut correct = 0;
    for (ni, &label) in labels.iter().enumerate() {
        let row = &probs[ni * c..][..c];
        let mut best = 0usize;
        for (ci, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = ci;
            }
        }
        if best == label as usize {
            correct += 1;
        }
    }
    correct
}
