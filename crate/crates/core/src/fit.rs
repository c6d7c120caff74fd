//! Least-squares power-law fits on log–log axes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_FIT_POINTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub r2: f64,
    pub n: usize,
}

/// Ordinary least squares `y = intercept + slope x`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::LengthMismatch { expected: n, got: y.len() });
    }
    if n < 3 {
        return Err(Error::Fit(format!("need at least 3 points, got {n}")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let slope_stderr = (sse / (nf - 2.0) / sxx).sqrt();
    Ok(LinearFit { slope, intercept, slope_stderr, r2, n })
}

/// Power-law fit `value ≈ exp(intercept) · t^slope` over a window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub quantity: String,
    pub t_min: f64,
    pub t_max: f64,
    pub slope: f64,
    pub slope_stderr: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

impl DecayFit {
    pub fn within(&self, target: f64, tol: f64) -> bool {
        (self.slope - target).abs() <= tol
    }
}

/// Fits `log value` against `log t` for samples with `t` inside `[t_min, t_max]`.
pub fn fit_power_law(quantity: &str, t: &[f64], value: &[f64], window: (f64, f64)) -> Result<DecayFit> {
    if t.len() != value.len() {
        return Err(Error::LengthMismatch { expected: t.len(), got: value.len() });
    }
    let (lo, hi) = window;
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    for (&ti, &vi) in t.iter().zip(value) {
        if ti < lo || ti > hi {
            continue;
        }
        if ti <= 0.0 {
            return Err(Error::Fit(format!("{quantity}: nonpositive time {ti} in window")));
        }
        if !(vi > 0.0) {
            return Err(Error::Fit(format!("{quantity}: nonpositive value {vi} at t = {ti}")));
        }
        lx.push(ti.ln());
        ly.push(vi.ln());
    }
    if lx.len() < MIN_FIT_POINTS {
        return Err(Error::Fit(format!(
            "{quantity}: window [{lo}, {hi}] holds {} points, need {MIN_FIT_POINTS}",
            lx.len()
        )));
    }
    let f = ols(&lx, &ly)?;
    Ok(DecayFit {
        quantity: quantity.to_string(),
        t_min: lx.first().unwrap().exp(),
        t_max: lx.last().unwrap().exp(),
        slope: f.slope,
        slope_stderr: f.slope_stderr,
        intercept: f.intercept,
        r2: f.r2,
        points: f.n,
    })
}

/// `n` points geometrically spaced over `[a, b]` (both included).
pub fn geomspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(a > 0.0 && b >= a && n >= 2);
    let (la, lb) = (a.ln(), b.ln());
    (0..n).map(|k| (la + (lb - la) * k as f64 / (n - 1) as f64).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_laws() {
        let t = geomspace(1.0, 100.0, 20);
        let v: Vec<f64> = t.iter().map(|x| 1.0 / x).collect();
        let f = fit_power_law("inv", &t, &v, (1.0, 100.0)).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12);
        let v: Vec<f64> = t.iter().map(|x| 5.0 * x.powf(-0.5)).collect();
        let f = fit_power_law("half", &t, &v, (1.0, 100.0)).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12);
        assert!((f.intercept - 5f64.ln()).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_windows() {
        let t = geomspace(1.0, 10.0, 20);
        let mut v = vec![1.0; 20];
        v[5] = 0.0;
        assert!(matches!(fit_power_law("z", &t, &v, (1.0, 10.0)), Err(Error::Fit(_))));
        let v = vec![1.0; 20];
        assert!(fit_power_law("few", &t, &v, (1.0, 1.5)).is_err());
    }

    #[test]
    fn ols_stderr_zero_for_exact_line() {
        let f = ols(&[0.0, 1.0, 2.0, 3.0], &[1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(f.slope, 2.0);
        assert!(f.slope_stderr < 1e-15);
    }
}
