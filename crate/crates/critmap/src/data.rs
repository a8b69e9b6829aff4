//! Labeled image datasets and synthetic data generation.
//!
//! Synthetic classes are smooth random templates (a few Gaussian bumps plus
//! a sinusoidal grating per channel) blended into a mid-gray canvas with
//! per-sample pixel noise. The `margin` knob scales the template against the
//! noise, which controls class separability without any external data.

use crate::error::{Error, Result};
use crate::rng::{combine3, hash64, Rng};
use crate::tensor::{Dtype, Tensor};

/// A labeled image dataset held in memory. Pixels are f32 in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`, dtype f32.
    pub images: Tensor,
    pub labels: Vec<u16>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u16>, num_classes: usize) -> Result<Dataset> {
        if images.rank() != 4 {
            return Err(Error::shape(format!(
                "dataset images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} images with {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if num_classes == 0 || num_classes > u16::MAX as usize + 1 {
            return Err(Error::param(format!("invalid class count {num_classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad as u32,
                num_classes: num_classes as u32,
            });
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape [C, H, W].
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gather `indices` into a batch tensor of `dtype` plus their labels.
    pub fn batch(&self, indices: &[usize], dtype: Dtype) -> Result<(Tensor, Vec<u16>)> {
        let [c, h, w] = self.sample_shape();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::param(format!(
                    "sample index {i} out of range ({} samples)",
                    self.len()
                )));
            }
            for j in 0..stride {
                data.push(self.images.at(i * stride + j));
            }
            labels.push(self.labels[i]);
        }
        let batch = Tensor::from_f64s(&[indices.len(), c, h, w], &data, dtype)?;
        Ok((batch, labels))
    }
}

/// Knobs for [`synth_dataset`].
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub classes: usize,
    pub n: usize,
    pub channels: usize,
    /// Square image side.
    pub size: usize,
    /// Template amplitude; larger separates classes more.
    pub margin: f64,
    /// Per-pixel Gaussian noise sigma.
    pub noise: f64,
}

impl SynthConfig {
    pub fn new(classes: usize, n: usize, size: usize) -> SynthConfig {
        SynthConfig {
            classes,
            n,
            channels: 3,
            size,
            margin: 0.3,
            noise: 0.1,
        }
    }
}

/// Deterministic class-balanced synthetic dataset.
///
/// Sample `i` carries label `i % classes`, so any prefix stays balanced and
/// `n` must divide evenly. Pixels are
/// `clamp01(0.5 + margin * template[class] + noise * eta)`.
pub fn synth_dataset(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    if config.classes < 2 {
        return Err(Error::param(format!(
            "need at least 2 classes, got {}",
            config.classes
        )));
    }
    if config.n == 0 || config.n % config.classes != 0 {
        return Err(Error::param(format!(
            "sample count {} must be a positive multiple of {} classes",
            config.n, config.classes
        )));
    }
    if config.size == 0 || config.channels == 0 {
        return Err(Error::param("size and channels must be positive".to_string()));
    }
    if config.noise < 0.0 || config.margin < 0.0 {
        return Err(Error::param("margin and noise must be >= 0".to_string()));
    }

    let templates: Vec<Vec<f64>> = (0..config.classes)
        .map(|c| class_template(config, seed, c))
        .collect();

    let stride = config.channels * config.size * config.size;
    let mut pixels = vec![0.0f64; config.n * stride];
    let mut noise_buf = vec![0.0f64; stride];
    for i in 0..config.n {
        let class = i % config.classes;
        let mut rng = Rng::new(combine3(seed, hash64("sample"), i as u64));
        if config.noise > 0.0 {
            rng.fill_normal(&mut noise_buf, 0.0, config.noise);
        } else {
            noise_buf.fill(0.0);
        }
        let out = &mut pixels[i * stride..][..stride];
        let template = &templates[class];
        for j in 0..stride {
            out[j] = (0.5 + config.margin * template[j] + noise_buf[j]).clamp(0.0, 1.0);
        }
    }

    let images = Tensor::from_f64s(
        &[config.n, config.channels, config.size, config.size],
        &pixels,
        Dtype::F32,
    )?;
    let labels = (0..config.n).map(|i| (i % config.classes) as u16).collect();
    Dataset::new(images, labels, config.classes)
}

/// Smooth per-class template with values normalized to max |t| = 1.
fn class_template(config: &SynthConfig, seed: u64, class: usize) -> Vec<f64> {
    let size = config.size;
    let mut rng = Rng::new(combine3(seed, hash64("class"), class as u64));
    let mut t = vec![0.0f64; config.channels * size * size];
    for ch in 0..config.channels {
        let plane = &mut t[ch * size * size..][..size * size];
        // Three signed Gaussian bumps.
        for _ in 0..3 {
            let cx = rng.uniform(0.0, size as f64);
            let cy = rng.uniform(0.0, size as f64);
            let sigma = rng.uniform(size as f64 / 6.0, size as f64 / 3.0);
            let amp = rng.uniform(-1.0, 1.0);
            for y in 0..size {
                for x in 0..size {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    plane[y * size + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        // One oriented grating.
        let fx = rng.uniform(0.5, 2.5);
        let fy = rng.uniform(0.5, 2.5);
        let phase = rng.uniform(0.0, std::f64::consts::TAU);
        let amp = rng.uniform(-0.7, 0.7);
        for y in 0..size {
            for x in 0..size {
                let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / size as f64
                    + phase;
                plane[y * size + x] += amp * arg.sin();
            }
        }
    }
    let peak = t.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-9);
    for v in &mut t {
        *v /= peak;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_balanced_and_deterministic() {
        let cfg = SynthConfig::new(4, 200, 8);
        let a = synth_dataset(&cfg, 42).unwrap();
        let b = synth_dataset(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let mut counts = [0usize; 4];
        for &l in &a.labels {
            counts[l as usize] += 1;
        }
        assert_eq!(counts, [50, 50, 50, 50]);
        let c = synth_dataset(&cfg, 43).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn synth_pixels_in_unit_range() {
        let cfg = SynthConfig::new(2, 20, 6);
        let d = synth_dataset(&cfg, 1).unwrap();
        for i in 0..d.images.len() {
            let v = d.images.at(i);
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn synth_rejects_uneven_split() {
        assert!(synth_dataset(&SynthConfig::new(3, 100, 8), 0).is_err());
        assert!(synth_dataset(&SynthConfig::new(1, 10, 8), 0).is_err());
    }

    #[test]
    fn batch_gathers_requested_samples() {
        let cfg = SynthConfig::new(2, 10, 4);
        let d = synth_dataset(&cfg, 7).unwrap();
        let (batch, labels) = d.batch(&[3, 0, 7], Dtype::F32).unwrap();
        assert_eq!(batch.shape(), &[3, 3, 4, 4]);
        assert_eq!(labels, vec![d.labels[3], d.labels[0], d.labels[7]]);
        let stride = 3 * 4 * 4;
        for j in 0..stride {
            assert_eq!(batch.at(j), d.images.at(3 * stride + j));
        }
        assert!(d.batch(&[99], Dtype::F32).is_err());
    }
}
