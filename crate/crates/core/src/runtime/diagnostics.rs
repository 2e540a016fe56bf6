use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Least-squares fit of the running-average objective's excess over its
/// best value to `b + c / sqrt(T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceFit {
    pub c: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit.
    pub residual: f64,
    pub burn_in: usize,
    /// 1-based rounds after the burn-in at which the running average rose.
    pub violations: Vec<usize>,
}

impl ConvergenceFit {
    pub fn monotone(&self) -> bool {
        self.violations.is_empty()
    }
}

/// `a_T = (1/T) sum_{t <= T} x_t`.
pub fn running_average(values: &[f64]) -> Vec<f64> {
    let mut sum = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            sum += v;
            sum / (i + 1) as f64
        })
        .collect()
}

/// Fits the running average of the per-round `objectives` (round 1 first)
/// and flags every post-burn-in round where it increased.
pub fn convergence_diagnostic(objectives: &[f64], burn_in: usize) -> Result<ConvergenceFit> {
    if objectives.len() < 10 {
        return Err(Error::Config(format!(
            "convergence diagnostic needs at least 10 rounds, got {}",
            objectives.len()
        )));
    }
    if objectives.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective sequence"));
    }
    let avg = running_average(objectives);
    let best = avg.iter().cloned().fold(f64::INFINITY, f64::min);
    let excess: Vec<f64> = avg.iter().map(|a| a - best).collect();
    let xs: Vec<f64> = (1..=avg.len()).map(|t| 1.0 / (t as f64).sqrt()).collect();

    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = excess.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&excess).map(|(x, y)| (x - mx) * (y - my)).sum();
    let c = sxy / sxx;
    let intercept = my - c * mx;
    let residual = (xs
        .iter()
        .zip(&excess)
        .map(|(x, y)| (y - intercept - c * x).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();

    let violations = (burn_in.max(1)..avg.len())
        .filter(|&i| {
            let tol = 1e-12 * avg[i - 1].abs().max(1.0);
            avg[i] > avg[i - 1] + tol
        })
        .map(|i| i + 1)
        .collect();
    Ok(ConvergenceFit {
        c,
        intercept,
        residual,
        burn_in,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_rate() {
        let c = 2.75;
        let avg: Vec<f64> = (1..=50).map(|t| c / (t as f64).sqrt()).collect();
        let raw: Vec<f64> = (0..50)
            .map(|i| {
                let t = (i + 1) as f64;
                if i == 0 {
                    avg[0]
                } else {
                    t * avg[i] - (t - 1.0) * avg[i - 1]
                }
            })
            .collect();
        let fit = convergence_diagnostic(&raw, 10).unwrap();
        assert!((fit.c - c).abs() < 1e-6, "{}", fit.c);
        assert!(fit.residual < 1e-9);
        assert!(fit.monotone());
    }

    #[test]
    fn constant_sequence_has_no_rate() {
        let fit = convergence_diagnostic(&[4.0; 30], 10).unwrap();
        assert!(fit.c.abs() < 1e-12);
        assert!(fit.monotone());
    }

    #[test]
    fn increases_are_flagged() {
        let mut v = vec![1.0; 20];
        v[15] = 5.0;
        let fit = convergence_diagnostic(&v, 10).unwrap();
        assert_eq!(fit.violations, vec![16]);
        let fit = convergence_diagnostic(&v, 17).unwrap();
        assert!(fit.monotone());
    }

    #[test]
    fn too_few_rounds() {
        assert!(convergence_diagnostic(&[1.0; 9], 0).is_err());
    }
}
