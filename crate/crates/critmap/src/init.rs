//! Initialization distributions.
//!
//! An [`InitSpec`] is stored per layer in the model file and used twice: to
//! draw fresh parameters at build time and, verbatim, to draw replacement
//! values when a layer is re-randomized for criticality measurement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Dtype, Tensor};

/// Which fan the scale formulas use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FanMode {
    FanIn,
    FanOut,
}

/// Distribution family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum InitFamily {
    KaimingNormal,
    KaimingUniform,
    XavierUniform,
    Normal { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
    Zeros,
}

/// Fully determines the sampling distribution given a tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    #[serde(flatten)]
    pub family: InitFamily,
    pub fan_mode: FanMode,
    pub gain: f64,
}

impl InitSpec {
    /// Standard ResNet weight init: kaiming_normal, fan_out, gain 1.
    pub fn kaiming_normal() -> InitSpec {
        InitSpec {
            family: InitFamily::KaimingNormal,
            fan_mode: FanMode::FanOut,
            gain: 1.0,
        }
    }

    pub fn zeros() -> InitSpec {
        InitSpec {
            family: InitFamily::Zeros,
            fan_mode: FanMode::FanIn,
            gain: 1.0,
        }
    }

    pub fn normal(mean: f64, std: f64) -> InitSpec {
        InitSpec {
            family: InitFamily::Normal { mean, std },
            fan_mode: FanMode::FanIn,
            gain: 1.0,
        }
    }

    pub fn uniform(low: f64, high: f64) -> InitSpec {
        InitSpec {
            family: InitFamily::Uniform { low, high },
            fan_mode: FanMode::FanIn,
            gain: 1.0,
        }
    }
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::kaiming_normal()
    }
}

/// Fan-in and fan-out of a weight shape.
///
/// Conv `[K, C, kh, kw]`: fan_in = C*kh*kw, fan_out = K*kh*kw.
/// Linear `[O, F]`: fan_in = F, fan_out = O.
pub fn fan(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        2 => Ok((shape[1], shape[0])),
        4 => {
            let rf = shape[2] * shape[3];
            Ok((shape[1] * rf, shape[0] * rf))
        }
        _ => Err(Error::shape(format!(
            "fan is defined for conv [K,C,kh,kw] and linear [O,F] shapes, got {shape:?}"
        ))),
    }
}

/// Draw a tensor of `shape` from `spec`. Deterministic given `rng` state.
pub fn sample_init(spec: &InitSpec, shape: &[usize], rng: &mut Rng, dtype: Dtype) -> Result<Tensor> {
    match spec.family {
        InitFamily::Zeros => Ok(Tensor::zeros(shape, dtype)),
        InitFamily::Normal { mean, std } => Tensor::rand_normal(shape, mean, std, rng, dtype),
        InitFamily::Uniform { low, high } => Tensor::rand_uniform(shape, low, high, rng, dtype),
        InitFamily::KaimingNormal => {
            let f = selected_fan(spec, shape)?;
            let std = spec.gain * (2.0 / f as f64).sqrt();
            Tensor::rand_normal(shape, 0.0, std, rng, dtype)
        }
        InitFamily::KaimingUniform => {
            let f = selected_fan(spec, shape)?;
            let bound = spec.gain * (6.0 / f as f64).sqrt();
            Tensor::rand_uniform(shape, -bound, bound, rng, dtype)
        }
        InitFamily::XavierUniform => {
            let (fi, fo) = fan(shape)?;
            if fi + fo == 0 {
                return Err(Error::param("xavier_uniform: zero fan".to_string()));
            }
            let bound = spec.gain * (6.0 / (fi + fo) as f64).sqrt();
            Tensor::rand_uniform(shape, -bound, bound, rng, dtype)
        }
    }
}

fn selected_fan(spec: &InitSpec, shape: &[usize]) -> Result<usize> {
    let (fi, fo) = fan(shape)?;
    let f = match spec.fan_mode {
        FanMode::FanIn => fi,
        FanMode::FanOut => fo,
    };
    if f == 0 {
        return Err(Error::param(format!("zero fan for shape {shape:?}")));
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_hand_cases() {
        assert_eq!(fan(&[8, 3, 3, 3]).unwrap(), (27, 72));
        assert_eq!(fan(&[10, 64]).unwrap(), (64, 10));
        assert_eq!(fan(&[4, 4, 1, 1]).unwrap(), (4, 4));
        assert!(fan(&[5]).is_err());
    }

    #[test]
    fn zeros_spec_draws_zero() {
        let t = sample_init(&InitSpec::zeros(), &[3, 4], &mut Rng::new(0), Dtype::F32).unwrap();
        assert!(t.to_f64_vec().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kaiming_normal_std_matches_theory() {
        // fan_in = 27, gain 1: std = sqrt(2/27). 1e5 draws, 2% tolerance.
        let spec = InitSpec {
            family: InitFamily::KaimingNormal,
            fan_mode: FanMode::FanIn,
            gain: 1.0,
        };
        // [K=100, C=3, 3, 3] has fan_in 27 and 8100 staying under 1e5; use
        // a bigger K for tighter statistics.
        let t = sample_init(&spec, &[1200, 3, 3, 3], &mut Rng::new(7), Dtype::F64).unwrap();
        let v = t.to_f64_vec();
        let mean: f64 = v.iter().sum::<f64>() / v.len() as f64;
        let var: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        let want = (2.0f64 / 27.0).sqrt();
        assert!((var.sqrt() - want).abs() / want < 0.02, "std = {}", var.sqrt());
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = InitSpec::kaiming_normal();
        let a = sample_init(&spec, &[8, 4, 3, 3], &mut Rng::new(11), Dtype::F32).unwrap();
        let b = sample_init(&spec, &[8, 4, 3, 3], &mut Rng::new(11), Dtype::F32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_moments_match_every_family() {
        // 1e5 draws per family; check mean and std against theory within
        // three standard errors of each estimator.
        let n = 100_000usize;
        let shape = [n / 100, 100]; // linear shape: fan_in 100, fan_out n/100
        let cases: Vec<(InitSpec, f64, f64)> = vec![
            (
                InitSpec {
                    family: InitFamily::KaimingNormal,
                    fan_mode: FanMode::FanIn,
                    gain: 1.0,
                },
                0.0,
                (2.0f64 / 100.0).sqrt(),
            ),
            (
                InitSpec {
                    family: InitFamily::KaimingUniform,
                    fan_mode: FanMode::FanIn,
                    gain: 1.0,
                },
                0.0,
                // uniform(-b, b) has std b/sqrt(3)
                (6.0f64 / 100.0).sqrt() / 3.0f64.sqrt(),
            ),
            (
                InitSpec {
                    family: InitFamily::XavierUniform,
                    fan_mode: FanMode::FanIn,
                    gain: 1.0,
                },
                0.0,
                (6.0f64 / (100 + n / 100) as f64).sqrt() / 3.0f64.sqrt(),
            ),
            (InitSpec::normal(0.5, 2.0), 0.5, 2.0),
            (
                InitSpec::uniform(-1.0, 3.0),
                1.0,
                4.0 / (12.0f64).sqrt(),
            ),
        ];
        for (i, (spec, want_mean, want_std)) in cases.iter().enumerate() {
            let t = sample_init(spec, &shape, &mut Rng::new(100 + i as u64), Dtype::F64).unwrap();
            let v = t.to_f64_vec();
            let mean: f64 = v.iter().sum::<f64>() / v.len() as f64;
            let var: f64 =
                v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
            let std = var.sqrt();
            // stderr(mean) = std/sqrt(n); stderr(std) ~= std/sqrt(2n)
            let se_mean = want_std / (v.len() as f64).sqrt();
            let se_std = want_std / (2.0 * v.len() as f64).sqrt();
            assert!(
                (mean - want_mean).abs() < 3.0 * se_mean,
                "case {i}: mean {mean} vs {want_mean}"
            );
            assert!(
                (std - want_std).abs() < 3.0 * se_std,
                "case {i}: std {std} vs {want_std}"
            );
        }
    }
}
