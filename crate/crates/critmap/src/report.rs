//! Report generation: criticality matrices as CSV, JSON, or SVG heatmaps.
//!
//! The heatmap follows the profile convention: rows are models, columns are
//! layers in topological order, and for the mean value a cell's luminance
//! is `1 - criticality` (0 maps to white, 1 to black). Delta matrices use
//! red for increases and blue for decreases; standard-error matrices reuse
//! the grayscale. Row and column margins carry `mean +/- std` summaries.
//! Numeric CSV stays the source of truth; the SVG is plain markup with no
//! plotting dependency, so reports diff cleanly.

use serde::Serialize;

use crate::criticality::CriticalityProfile;
use crate::error::{Error, Result};
use crate::stats::summarize;

/// Which per-layer quantity a report shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportValue {
    Mean,
    /// Difference of layer means to a baseline profile.
    Delta,
    Stderr,
}

impl std::fmt::Display for ReportValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReportValue::Mean => write!(f, "mean"),
            ReportValue::Delta => write!(f, "delta"),
            ReportValue::Stderr => write!(f, "stderr"),
        }
    }
}

/// A models-by-layers value matrix assembled from aligned profiles.
#[derive(Debug, Clone, Serialize)]
pub struct ProfileMatrix {
    pub value: String,
    pub models: Vec<String>,
    pub clean_accuracy: Vec<f64>,
    pub layers: Vec<String>,
    /// Row-major `models.len() x layers.len()`.
    pub values: Vec<f64>,
    /// Per-model (mean, std) across layers.
    pub row_margin: Vec<(f64, f64)>,
    /// Per-layer (mean, std) across models.
    pub col_margin: Vec<(f64, f64)>,
}

impl ProfileMatrix {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.layers.len() + col]
    }
}

/// Assemble a matrix from profiles sharing one layer set.
///
/// `baseline` (a model_id among the profiles) is required for
/// [`ReportValue::Delta`] and ignored otherwise.
pub fn build_matrix(
    profiles: &[CriticalityProfile],
    value: ReportValue,
    baseline: Option<&str>,
) -> Result<ProfileMatrix> {
    if profiles.is_empty() {
        return Err(Error::param("no profiles given".to_string()));
    }
    let layers: Vec<String> = profiles[0]
        .entries
        .iter()
        .map(|e| e.layer_id.clone())
        .collect();
    for p in profiles {
        if p.layer_ids() != layers.iter().map(|s| s.as_str()).collect::<Vec<_>>() {
            return Err(Error::Alignment(format!(
                "profile {} has a different layer set",
                p.model_id
            )));
        }
    }
    let base: Option<&CriticalityProfile> = match value {
        ReportValue::Delta => {
            let id = baseline.ok_or_else(|| {
                Error::param("delta reports need a baseline model id".to_string())
            })?;
            Some(
                profiles
                    .iter()
                    .find(|p| p.model_id == id)
                    .ok_or_else(|| Error::Alignment(format!("baseline {id:?} not among profiles")))?,
            )
        }
        _ => None,
    };

    let mut values = Vec::with_capacity(profiles.len() * layers.len());
    for p in profiles {
        for (li, e) in p.entries.iter().enumerate() {
            let v = match value {
                ReportValue::Mean => e.mean,
                ReportValue::Stderr => e.stderr,
                ReportValue::Delta => e.mean - base.expect("checked").entries[li].mean,
            };
            values.push(v);
        }
    }

    let row_margin = (0..profiles.len())
        .map(|r| {
            let row = &values[r * layers.len()..][..layers.len()];
            let (m, s, _) = summarize(row)?;
            Ok((m, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let col_margin = (0..layers.len())
        .map(|c| {
            let col: Vec<f64> = (0..profiles.len())
                .map(|r| values[r * layers.len() + c])
                .collect();
            let (m, s, _) = summarize(&col)?;
            Ok((m, s))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ProfileMatrix {
        value: value.to_string(),
        models: profiles.iter().map(|p| p.model_id.clone()).collect(),
        clean_accuracy: profiles.iter().map(|p| p.clean_accuracy).collect(),
        layers,
        values,
        row_margin,
        col_margin,
    })
}

/// Matrix CSV: one row per model, one column per layer.
pub fn matrix_to_csv(m: &ProfileMatrix) -> String {
    let mut out = String::from("model_id,clean_accuracy");
    for l in &m.layers {
        out.push_str(&format!(",{l}"));
    }
    out.push('\n');
    for (r, model) in m.models.iter().enumerate() {
        out.push_str(&format!("{model},{}", m.clean_accuracy[r]));
        for c in 0..m.layers.len() {
            out.push_str(&format!(",{}", m.at(r, c)));
        }
        out.push('\n');
    }
    out
}

pub fn matrix_to_json(m: &ProfileMatrix) -> Result<String> {
    serde_json::to_string_pretty(m).map_err(|e| Error::Metadata(e.to_string()))
}

const CELL: f64 = 22.0;
const LEFT: f64 = 150.0;
const TOP: f64 = 20.0;
const RIGHT: f64 = 110.0;
const BOTTOM: f64 = 150.0;

/// Grayscale (mean/stderr) or diverging (delta) heatmap.
pub fn matrix_to_svg(m: &ProfileMatrix) -> String {
    let rows = m.models.len();
    let cols = m.layers.len();
    let grid_w = cols as f64 * CELL;
    let grid_h = rows as f64 * CELL;
    let width = LEFT + grid_w + RIGHT;
    let height = TOP + grid_h + BOTTOM;
    let diverging = m.value == "delta";

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"monospace\" font-size=\"10\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    for (r, model) in m.models.iter().enumerate() {
        let y = TOP + r as f64 * CELL;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            LEFT - 6.0,
            y + CELL * 0.7,
            escape(model)
        ));
        for c in 0..cols {
            let v = m.at(r, c);
            let x = LEFT + c as f64 * CELL;
            svg.push_str(&format!(
                "<rect class=\"cell\" x=\"{x:.1}\" y=\"{y:.1}\" width=\"{CELL:.1}\" height=\"{CELL:.1}\" \
                 fill=\"{}\" stroke=\"#ddd\" stroke-width=\"0.5\"><title>{} / {}: {v:.4}</title></rect>\n",
                fill_color(v, diverging),
                escape(model),
                escape(&m.layers[c]),
            ));
        }
        // Row margin: model average across layers.
        let (mean, std) = m.row_margin[r];
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\">{mean:.2}&#177;{std:.2}</text>\n",
            LEFT + grid_w + 8.0,
            y + CELL * 0.7,
        ));
    }

    // Column margins and rotated layer labels.
    for (c, layer) in m.layers.iter().enumerate() {
        let x = LEFT + c as f64 * CELL;
        let (mean, std) = m.col_margin[c];
        let ty = TOP + grid_h + 12.0;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{ty:.1}\" text-anchor=\"end\" \
             transform=\"rotate(-90 {:.1} {ty:.1})\" font-size=\"8\">{mean:.2}&#177;{std:.2}</text>\n",
            x + CELL * 0.7,
            x + CELL * 0.7,
        ));
        let ly = TOP + grid_h + 58.0;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{ly:.1}\" text-anchor=\"end\" \
             transform=\"rotate(-60 {:.1} {ly:.1})\">{}</text>\n",
            x + CELL * 0.7,
            x + CELL * 0.7,
            escape(layer)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Mean/stderr: luminance = 1 - v. Delta: white -> red for positive,
/// white -> blue for negative.
fn fill_color(v: f64, diverging: bool) -> String {
    if diverging {
        let t = v.abs().clamp(0.0, 1.0);
        let other = (255.0 * (1.0 - t)).round() as u8;
        if v >= 0.0 {
            format!("rgb(255,{other},{other})")
        } else {
            format!("rgb({other},{other},255)")
        }
    } else {
        let g = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
        format!("rgb({g},{g},{g})")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criticality::{CriticalityStats, Metric, RunConfig};

    fn profile(id: &str, means: &[f64], acc: f64) -> CriticalityProfile {
        CriticalityProfile {
            model_id: id.to_string(),
            config: RunConfig {
                base_seed: 0,
                n_trials: 1,
                n_samples: 8,
                batch_size: 8,
                metric: Metric::Cosine,
            },
            clean_accuracy: acc,
            entries: means
                .iter()
                .enumerate()
                .map(|(i, &m)| CriticalityStats {
                    layer_id: format!("layer{i}"),
                    per_trial: vec![m],
                    mean: m,
                    std: 0.0,
                    stderr: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn svg_cell_count_is_models_times_layers() {
        let profiles = vec![
            profile("a", &[0.0, 0.5, 0.9], 0.9),
            profile("b", &[0.2, 0.6, 1.0], 0.8),
        ];
        let m = build_matrix(&profiles, ReportValue::Mean, None).unwrap();
        let svg = matrix_to_svg(&m);
        assert_eq!(svg.matches("class=\"cell\"").count(), 6);
        // Luminance endpoints: 0 -> white, 1 -> black.
        assert!(svg.contains("rgb(255,255,255)"));
        assert!(svg.contains("rgb(0,0,0)"));
    }

    #[test]
    fn delta_of_profile_against_itself_is_zero() {
        let profiles = vec![profile("base", &[0.3, 0.4], 0.7)];
        let m = build_matrix(&profiles, ReportValue::Delta, Some("base")).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_layer_sets_are_alignment_errors() {
        let a = profile("a", &[0.1, 0.2], 0.5);
        let mut b = profile("b", &[0.1, 0.2], 0.5);
        b.entries[1].layer_id = "other".to_string();
        assert!(matches!(
            build_matrix(&[a, b], ReportValue::Mean, None),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn csv_has_one_row_per_model() {
        let profiles = vec![
            profile("a", &[0.25, 0.75], 0.9),
            profile("b", &[0.5, 0.5], 0.6),
        ];
        let m = build_matrix(&profiles, ReportValue::Mean, None).unwrap();
        let csv = matrix_to_csv(&m);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "model_id,clean_accuracy,layer0,layer1");
        assert!(lines[1].starts_with("a,0.9,0.25,0.75"));
    }
}
