//! Summary statistics and rank correlation.

use crate::error::{Error, Result};

/// Mean, sample standard deviation (n-1) and standard error of a trial
/// series. A single trial has std = 0 and stderr = 0 by convention.
pub fn summarize(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.is_empty() {
        return Err(Error::param("summarize: empty series".to_string()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let std = (ss / (n - 1.0)).sqrt();
    Ok((mean, std, std / n.sqrt()))
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::param(format!(
            "pearson: length mismatch ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::param("pearson: need at least 2 points".to_string()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0f64;
    let mut sxx = 0.0f64;
    let mut syy = 0.0f64;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(
            "pearson: constant input has no defined correlation".to_string(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Ranks with ties replaced by the average of their positions (1-based).
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::param(format!(
            "spearman: length mismatch ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::param("spearman: need at least 2 points".to_string()));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summarize_hand_case() {
        let (mean, std, stderr) = summarize(&[0.1, 0.2, 0.3]).unwrap();
        assert!((mean - 0.2).abs() < 1e-15);
        assert!((std - 0.1).abs() < 1e-12);
        assert!((stderr - 0.1 / 3.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn summarize_single_trial_convention() {
        let (mean, std, stderr) = summarize(&[0.42]).unwrap();
        assert_eq!((mean, std, stderr), (0.42, 0.0, 0.0));
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn spearman_monotone_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 4.0, 9.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[9.0, 4.0, 1.0]).unwrap(), -1.0);
    }

    #[test]
    fn spearman_tie_handling() {
        // xs has a tie at positions 0 and 1 -> average rank 1.5 each.
        let r = average_ranks(&[5.0, 5.0, 7.0]);
        assert_eq!(r, vec![1.5, 1.5, 3.0]);
    }

    #[test]
    fn degenerate_and_mismatched_inputs() {
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            spearman(&[1.0], &[1.0, 2.0]),
            Err(Error::Param(_))
        ));
    }
}
