//! Sample statistics: moments, jackknife, Kolmogorov-Smirnov, log-log fits.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Moment skewness g1.
pub fn skewness(x: &[f64]) -> f64 {
    let m = mean(x);
    let n = x.len() as f64;
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|v| (v - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

/// Moment excess kurtosis g2.
pub fn excess_kurtosis(x: &[f64]) -> f64 {
    let m = mean(x);
    let n = x.len() as f64;
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

/// Jackknife standard error of the unbiased variance.
pub fn jackknife_variance_stderr(x: &[f64]) -> f64 {
    let n = x.len();
    let nf = n as f64;
    let s1: f64 = x.iter().sum();
    let s2: f64 = x.iter().map(|v| v * v).sum();
    let loo: Vec<f64> = x
        .iter()
        .map(|v| {
            let a = s1 - v;
            (s2 - v * v - a * a / (nf - 1.0)) / (nf - 2.0)
        })
        .collect();
    let m = mean(&loo);
    ((nf - 1.0) / nf * loo.iter().map(|v| (v - m).powi(2)).sum::<f64>()).sqrt()
}

/// Asymptotic Kolmogorov survival function Q(lambda) = 2 sum (-1)^{k-1} exp(-2 k^2 lambda^2).
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-17 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample KS test against N(mu, sigma^2).
pub fn ks_normal(x: &[f64], mu: f64, sigma: f64) -> Result<KsResult> {
    let dist = Normal::new(mu, sigma).map_err(|e| Error::Invalid(format!("normal law: {e}")))?;
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d = 0.0f64;
    for (i, v) in s.iter().enumerate() {
        let f = dist.cdf(*v);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    let p = kolmogorov_q((sn + 0.12 + 0.11 / sn) * d);
    Ok(KsResult { statistic: d, p_value: p })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

/// Ordinary least squares y = a + b x.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Invalid("need at least three points for a fit".into()));
    }
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let slope_stderr = (ssr / (n - 2.0) / sxx).sqrt();
    Ok(LinearFit { slope, intercept, slope_stderr })
}

/// Fit of log(err) against log(n).
pub fn loglog_fit(n: &[f64], err: &[f64]) -> Result<LinearFit> {
    if err.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Invalid("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = n.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_small_sample() {
        let x = [1.0, 2.0, 3.0, 4.0, 10.0];
        assert!((mean(&x) - 4.0).abs() < 1e-15);
        assert!((variance(&x) - 12.5).abs() < 1e-12);
        assert!(skewness(&x) > 0.0);
        let sym = [-2.0, -1.0, 0.0, 1.0, 2.0];
        assert!(skewness(&sym).abs() < 1e-15);
        assert!((excess_kurtosis(&sym) - (6.8 / 4.0 - 3.0)).abs() < 1e-12);
    }

    #[test]
    fn jackknife_matches_direct_leave_one_out() {
        let x: Vec<f64> = (0..37).map(|i| ((i * 7919) % 101) as f64 / 10.0).collect();
        let n = x.len();
        let loo: Vec<f64> = (0..n)
            .map(|i| {
                let y: Vec<f64> = x.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).collect();
                variance(&y)
            })
            .collect();
        let m = mean(&loo);
        let direct = ((n as f64 - 1.0) / n as f64 * loo.iter().map(|v| (v - m).powi(2)).sum::<f64>()).sqrt();
        assert!((jackknife_variance_stderr(&x) - direct).abs() < 1e-10);
    }

    #[test]
    fn kolmogorov_reference_values() {
        assert!((kolmogorov_q(1.36) - 0.0494).abs() < 1e-3);
        assert!((kolmogorov_q(1.0) - 0.2700).abs() < 1e-3);
        assert_eq!(kolmogorov_q(0.0), 1.0);
    }

    #[test]
    fn ks_detects_wrong_scale() {
        let x: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
        let normalish: Vec<f64> = x.iter().map(|p| Normal::new(0.0, 1.0).unwrap().inverse_cdf(*p)).collect();
        assert!(ks_normal(&normalish, 0.0, 1.0).unwrap().p_value > 0.99);
        assert!(ks_normal(&normalish, 0.0, 2.0).unwrap().p_value < 1e-6);
    }

    #[test]
    fn fit_recovers_power_law() {
        let n = [256.0, 512.0, 1024.0, 2048.0];
        let e: Vec<f64> = n.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        let f = loglog_fit(&n, &e).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12);
        assert!(f.slope_stderr < 1e-10);
    }
}
