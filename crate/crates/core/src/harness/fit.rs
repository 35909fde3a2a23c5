//! Least-squares power-law fits.

use serde::{Deserialize, Serialize};

/// Two-sided 97.5% Student-t quantiles for 1..=10 degrees of freedom.
const T_975: [f64; 10] = [12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228];

pub fn t_quantile_975(dof: usize) -> f64 {
    match dof {
        0 => f64::INFINITY,
        d if d <= T_975.len() => T_975[d - 1],
        _ => 1.96,
    }
}

/// `log y = log c + slope log x` with a 95% interval on the slope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub points: usize,
}

impl SlopeFit {
    /// `|slope - target| <= tol * |target|`.
    pub fn within(&self, target: f64, tol: f64) -> bool {
        (self.slope - target).abs() <= tol * target.abs()
    }
}

/// Ordinary least squares in log-log coordinates; needs two positive points.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> Option<SlopeFit> {
    let pts: Vec<(f64, f64)> =
        x.iter().zip(y).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, b)| (a.ln(), b.ln())).collect();
    let m = pts.len();
    if m < 2 || m != x.len() {
        return None;
    }
    let mf = m as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / mf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / mf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let (se, half) = if m > 2 {
        let rss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        let se = (rss / (mf - 2.0) / sxx).sqrt();
        (se, t_quantile_975(m - 2) * se)
    } else {
        (f64::NAN, f64::NAN)
    };
    Some(SlopeFit { slope, intercept, se, ci_low: slope - half, ci_high: slope + half, points: m })
}
