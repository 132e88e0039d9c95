//! Vector Dyson equation -1/m = z + S m, self-consistent density of states,
//! the derivative m' and the control parameters Psi, Theta.

use std::path::Path;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Factor, VarianceProfile};
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    /// Polish fixed-point iterates with Newton steps and continue in the
    /// imaginary part for small |Im z|.
    pub newton: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-12, max_iter: 100_000, damping: 0.5, newton: true }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DysonSolution {
    pub z: C64,
    pub m: Vec<C64>,
    pub residual: f64,
    pub iterations: usize,
}

impl DysonSolution {
    pub fn mean(&self) -> C64 {
        self.m.iter().sum::<C64>() / self.m.len() as f64
    }

    /// Harmonic extension of the density, pi^-1 <Im m>.
    pub fn rho(&self) -> f64 {
        self.mean().im.abs() / std::f64::consts::PI
    }

    pub fn conj(&self) -> DysonSolution {
        DysonSolution {
            z: self.z.conj(),
            m: self.m.iter().map(|v| v.conj()).collect(),
            residual: self.residual,
            iterations: self.iterations,
        }
    }

    /// (max |m| (1+|z|), max |1/m| / (1+|z|)); both stay order one for
    /// admissible profiles.
    pub fn bound_diagnostics(&self) -> (f64, f64) {
        let s = 1.0 + self.z.norm();
        let mmax = self.m.iter().fold(0.0f64, |a, v| a.max(v.norm()));
        let imax = self.m.iter().fold(0.0f64, |a, v| a.max(1.0 / v.norm()));
        (mmax * s, imax / s)
    }
}

/// Stieltjes transform of the semicircle law, branch with Im m Im z > 0.
pub fn m_sc(z: C64) -> C64 {
    let s = (z * z - 4.0).sqrt();
    let a = (-z + s) / 2.0;
    let b = (-z - s) / 2.0;
    if a.im * z.im > 0.0 {
        a
    } else {
        b
    }
}

/// max_j |1/m_j + z + (S m)_j|.
pub fn residual(profile: &VarianceProfile, z: C64, m: &[C64]) -> f64 {
    let sm = profile.apply(m);
    m.iter().zip(&sm).fold(0.0f64, |a, (mj, sj)| a.max((mj.inv() + z + sj).norm()))
}

fn sign_ok(z: C64, m: &[C64]) -> bool {
    m.iter().all(|v| v.im * z.im > 0.0 && v.is_finite())
}

/// Solves (1 - diag(d) S) x = rhs through the low-rank factor of S.
/// Returns x and the condition number of the reduced r x r system.
pub fn solve_one_minus_ds(factor: &Factor, d: &[C64], rhs: &[C64]) -> (Vec<C64>, f64) {
    let r = factor.rank();
    let g = factor.gram(d);
    let c = factor.c_matrix();
    let mut a = linalg::cmat_identity(r);
    a -= &c * &g;
    let (inv, cond) = linalg::inverse_with_condition(&a);
    let p = factor.project(rhs);
    let cp = factor.apply_c(&p);
    let w: Vec<C64> = (0..r).map(|i| (0..r).map(|k| inv[(i, k)] * cp[k]).sum()).collect();
    let uw = factor.lift(&w);
    let x = rhs.iter().zip(d.iter().zip(&uw)).map(|(b, (dj, u))| *b + *dj * *u).collect();
    (x, cond)
}

struct Progress {
    m: Vec<C64>,
    residual: f64,
    iterations: usize,
}

fn newton(profile: &VarianceProfile, z: C64, m0: Vec<C64>, tol: f64, max_steps: usize) -> Option<Progress> {
    let mut m = m0;
    if !sign_ok(z, &m) {
        return None;
    }
    let mut res = residual(profile, z, &m);
    let mut it = 0;
    while res > tol {
        if it >= max_steps {
            return None;
        }
        it += 1;
        let sm = profile.apply(&m);
        let phi: Vec<C64> = m.iter().zip(&sm).map(|(mj, sj)| mj.inv() + z + sj).collect();
        let m2: Vec<C64> = m.iter().map(|v| v * v).collect();
        let rhs: Vec<C64> = m2.iter().zip(&phi).map(|(a, b)| a * b).collect();
        let (delta, cond) = solve_one_minus_ds(profile.factor(), &m2, &rhs);
        if !cond.is_finite() {
            return None;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<C64> = m.iter().zip(&delta).map(|(a, d)| a + d * t).collect();
            if sign_ok(z, &trial) {
                let r = residual(profile, z, &trial);
                if r <= tol || r < res * (1.0 - 1e-4 * t) {
                    m = trial;
                    res = r;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            return None;
        }
    }
    Some(Progress { m, residual: res, iterations: it })
}

/// Damped fixed point m <- (1-a) m - a / (z + S m), halving a whenever the
/// residual grows. Stops once the residual is below `target`.
fn fixed_point(profile: &VarianceProfile, z: C64, m0: Vec<C64>, target: f64, opts: &SolverOptions) -> Progress {
    let mut m = m0;
    let mut res = residual(profile, z, &m);
    let mut alpha = opts.damping;
    let mut it = 0;
    while res > target && it < opts.max_iter {
        it += 1;
        let sm = profile.apply(&m);
        let next: Vec<C64> = m.iter().zip(&sm).map(|(mj, sj)| *mj * (1.0 - alpha) - (z + sj).inv() * alpha).collect();
        let r = residual(profile, z, &next);
        if r > res && alpha > 1e-6 {
            alpha *= 0.5;
            continue;
        }
        m = next;
        res = r;
    }
    Progress { m, residual: res, iterations: it }
}

fn initial_guess(profile: &VarianceProfile, z: C64) -> Vec<C64> {
    let sigma = profile.mean_row_sum().sqrt();
    let m = m_sc(z / sigma) / sigma;
    vec![m; profile.n]
}

const CONTINUATION_HEIGHT: f64 = 0.05;

fn solve_cold(profile: &VarianceProfile, z: C64, opts: &SolverOptions) -> Result<DysonSolution> {
    let eta = z.im;
    if opts.newton && eta.abs() < CONTINUATION_HEIGHT {
        let top = C64::new(z.re, CONTINUATION_HEIGHT * eta.signum());
        let mut sol = solve_cold(profile, top, opts)?;
        let mut iterations = sol.iterations;
        let mut h = CONTINUATION_HEIGHT;
        while h > eta.abs() {
            h = (h * 0.25).max(eta.abs());
            let zk = C64::new(z.re, h * eta.signum());
            let p = newton(profile, zk, sol.m.clone(), opts.tol, 60).ok_or(Error::NonConvergence { iterations, residual: sol.residual })?;
            iterations += p.iterations;
            sol = DysonSolution { z: zk, m: p.m, residual: p.residual, iterations };
        }
        sol.z = z;
        return Ok(sol);
    }
    let guess = initial_guess(profile, z);
    if opts.newton {
        let fp = fixed_point(profile, z, guess, 1e-6_f64.max(opts.tol), opts);
        if let Some(p) = newton(profile, z, fp.m.clone(), opts.tol, 60) {
            return Ok(DysonSolution { z, m: p.m, residual: p.residual, iterations: fp.iterations + p.iterations });
        }
        let rest = fixed_point(profile, z, fp.m, opts.tol, opts);
        return finish(z, rest, fp.iterations, opts);
    }
    let fp = fixed_point(profile, z, guess, opts.tol, opts);
    finish(z, fp, 0, opts)
}

fn finish(z: C64, p: Progress, extra: usize, opts: &SolverOptions) -> Result<DysonSolution> {
    let iterations = p.iterations + extra;
    if p.residual > opts.tol || !sign_ok(z, &p.m) {
        return Err(Error::NonConvergence { iterations, residual: p.residual });
    }
    Ok(DysonSolution { z, m: p.m, residual: p.residual, iterations })
}

/// Solves the vector Dyson equation at z. A warm start, when given, seeds a
/// Newton iteration; on failure the solver falls back to a cold start.
pub fn solve_vde(profile: &VarianceProfile, z: C64, warm_start: Option<&[C64]>, opts: &SolverOptions) -> Result<DysonSolution> {
    if !(z.im != 0.0 && z.is_finite()) {
        return Err(Error::Domain(format!("Im z must be nonzero and finite, got z = {z}")));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::Invalid(format!("solver tolerance must be positive, got {}", opts.tol)));
    }
    if let Some(w) = warm_start {
        if w.len() != profile.n {
            return Err(Error::Invalid("warm start has the wrong length".into()));
        }
        if opts.newton {
            if let Some(p) = newton(profile, z, w.to_vec(), opts.tol, 40) {
                return Ok(DysonSolution { z, m: p.m, residual: p.residual, iterations: p.iterations });
            }
        } else if sign_ok(z, w) {
            let p = fixed_point(profile, z, w.to_vec(), opts.tol, opts);
            if let Ok(s) = finish(z, p, 0, opts) {
                return Ok(s);
            }
        }
    }
    solve_cold(profile, z, opts)
}

/// m'(z) = (1 - m^2 S)^-1 m^2.
pub fn m_derivative(profile: &VarianceProfile, sol: &DysonSolution) -> Result<Vec<C64>> {
    let m2: Vec<C64> = sol.m.iter().map(|v| v * v).collect();
    let (x, cond) = solve_one_minus_ds(profile.factor(), &m2, &m2);
    if !(cond < 1e12) {
        return Err(Error::Conditioning { condition: cond });
    }
    Ok(x)
}

/// (Psi, Theta) at the solution's spectral parameter.
pub fn control_parameters(sol: &DysonSolution, n: usize) -> (f64, f64) {
    control_from_mean(sol.mean(), sol.z.im, n)
}

pub fn control_from_mean(mean: C64, eta: f64, n: usize) -> (f64, f64) {
    let ne = n as f64 * eta.abs();
    let theta = 1.0 / ne;
    let psi = (mean.im.abs() / ne).sqrt() + theta;
    (psi, theta)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DensityStats {
    pub total_iterations: usize,
    pub max_residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DensityGrid {
    pub energies: Vec<f64>,
    pub rho: Vec<f64>,
    pub bulk_intervals: Vec<(f64, f64)>,
    pub threshold: f64,
    pub kappa: f64,
    pub eta_probe: f64,
    pub stats: DensityStats,
}

pub const BULK_THRESHOLD_FLOOR: f64 = 0.05;

impl DensityGrid {
    pub fn in_bulk(&self, e: f64) -> bool {
        self.bulk_intervals.iter().any(|&(a, b)| a <= e && e <= b)
    }

    /// The bulk interval containing e, if any.
    pub fn interval_of(&self, e: f64) -> Option<(f64, f64)> {
        self.bulk_intervals.iter().copied().find(|&(a, b)| a <= e && e <= b)
    }

    /// Trapezoid integral of rho over the grid.
    pub fn integral(&self) -> f64 {
        self.energies.windows(2).zip(self.rho.windows(2)).map(|(e, r)| 0.5 * (e[1] - e[0]) * (r[0] + r[1])).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["energy", "rho", "in_bulk"])?;
        for (e, r) in self.energies.iter().zip(&self.rho) {
            w.write_record([format!("{e:.12e}"), format!("{r:.12e}"), self.in_bulk(*e).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "bulk_intervals": self.bulk_intervals,
            "threshold": self.threshold,
            "kappa": self.kappa,
            "eta_probe": self.eta_probe,
            "n_points": self.energies.len(),
            "integral": self.integral(),
            "solver": self.stats,
        })
    }
}

pub fn density_grid(
    profile: &VarianceProfile,
    e_min: f64,
    e_max: f64,
    n_points: usize,
    eta_probe: f64,
    kappa: f64,
    threshold: f64,
    opts: &SolverOptions,
) -> Result<DensityGrid> {
    if !(e_min < e_max) {
        return Err(Error::Invalid(format!("need e_min < e_max, got [{e_min}, {e_max}]")));
    }
    if !(1e-8..=1e-2).contains(&eta_probe) {
        return Err(Error::Invalid(format!("eta_probe must lie in [1e-8, 1e-2], got {eta_probe}")));
    }
    if n_points < 16 {
        return Err(Error::Invalid(format!("need at least 16 grid points, got {n_points}")));
    }
    if !(kappa >= 0.0) {
        return Err(Error::Invalid(format!("kappa must be nonnegative, got {kappa}")));
    }
    let h = (e_max - e_min) / (n_points - 1) as f64;
    let energies: Vec<f64> = (0..n_points).map(|i| e_min + h * i as f64).collect();
    let mut rho = Vec::with_capacity(n_points);
    let mut stats = DensityStats { total_iterations: 0, max_residual: 0.0 };
    let mut prev: Option<Vec<C64>> = None;
    for &e in &energies {
        let sol = solve_vde(profile, C64::new(e, eta_probe), prev.as_deref(), opts)?;
        stats.total_iterations += sol.iterations;
        stats.max_residual = stats.max_residual.max(sol.residual);
        rho.push(sol.rho());
        prev = Some(sol.m);
    }
    let thr = threshold.max(BULK_THRESHOLD_FLOOR);
    let bulk_intervals = bulk_runs(&energies, &rho, thr, kappa);
    Ok(DensityGrid { energies, rho, bulk_intervals, threshold: thr, kappa, eta_probe, stats })
}

/// Maximal runs with rho >= thr, endpoints located by linear interpolation and
/// shrunk by kappa.
fn bulk_runs(e: &[f64], rho: &[f64], thr: f64, kappa: f64) -> Vec<(f64, f64)> {
    let cross = |i: usize| {
        let (r0, r1) = (rho[i], rho[i + 1]);
        e[i] + (thr - r0) / (r1 - r0) * (e[i + 1] - e[i])
    };
    let mut out = Vec::new();
    let mut start: Option<f64> = None;
    for i in 0..e.len() {
        let above = rho[i] >= thr;
        match (start, above) {
            (None, true) => start = Some(if i == 0 { e[0] } else { cross(i - 1) }),
            (Some(a), false) => {
                out.push((a, cross(i - 1)));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(a) = start {
        out.push((a, *e.last().unwrap()));
    }
    out.into_iter().map(|(a, b)| (a + kappa, b - kappa)).filter(|(a, b)| a < b).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::ProfileSpec;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn semicircle_branch() {
        let m = m_sc(c(0.0, 1.0));
        assert!((m - c(0.0, (5f64.sqrt() - 1.0) / 2.0)).norm() < 1e-15);
        let m = m_sc(c(0.3, -0.2));
        assert!(m.im < 0.0);
        assert!((m * m + c(0.3, -0.2) * m + 1.0).norm() < 1e-14);
    }

    #[test]
    fn constant_profile_at_i() {
        let p = ProfileSpec::constant().build(50).unwrap();
        let sol = solve_vde(&p, c(0.0, 1.0), None, &SolverOptions::default()).unwrap();
        let want = (5f64.sqrt() - 1.0) / 2.0;
        for m in &sol.m {
            assert!((m - c(0.0, want)).norm() < 1e-12);
        }
        assert!(sol.residual < 1e-12);
    }

    #[test]
    fn outside_support_is_nearly_real() {
        let p = ProfileSpec::constant().build(50).unwrap();
        let sol = solve_vde(&p, c(2.5, 1e-4), None, &SolverOptions::default()).unwrap();
        assert!(sol.m.iter().all(|m| m.im.abs() < 1e-3 && m.im > 0.0));
    }

    #[test]
    fn domain_error_on_real_axis() {
        let p = ProfileSpec::constant().build(10).unwrap();
        assert!(matches!(solve_vde(&p, c(0.1, 0.0), None, &SolverOptions::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn plain_fixed_point_matches_newton() {
        let p = ProfileSpec::smooth_kernel().build(64).unwrap();
        let z = c(0.4, 0.3);
        let a = solve_vde(&p, z, None, &SolverOptions::default()).unwrap();
        let b = solve_vde(&p, z, None, &SolverOptions { newton: false, ..Default::default() }).unwrap();
        for (x, y) in a.m.iter().zip(&b.m) {
            assert!((x - y).norm() < 1e-11);
        }
    }

    #[test]
    fn derivative_constant_profile_at_i() {
        let p = ProfileSpec::constant().build(30).unwrap();
        let sol = solve_vde(&p, c(0.0, 1.0), None, &SolverOptions::default()).unwrap();
        let d = m_derivative(&p, &sol).unwrap();
        let want = (-1.0 + 1.0 / 5f64.sqrt()) / 2.0;
        for v in &d {
            assert!((v - c(want, 0.0)).norm() < 1e-12, "{v}");
        }
    }

    #[test]
    fn control_parameter_values() {
        let (psi, theta) = control_from_mean(c(0.1, 0.5), 0.01, 1000);
        assert!((theta - 0.1).abs() < 1e-15);
        assert!((psi - (0.05f64.sqrt() + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn semicircle_density_and_bulk() {
        let p = ProfileSpec::constant().build(8).unwrap();
        let g = density_grid(&p, -3.0, 3.0, 1201, 1e-5, 0.1, 0.0, &SolverOptions::default()).unwrap();
        let i0 = g.energies.iter().position(|e| e.abs() < 1e-12).unwrap();
        assert!((g.rho[i0] - 1.0 / std::f64::consts::PI).abs() < 1e-3);
        assert!((g.integral() - 1.0).abs() < 1e-3, "{}", g.integral());
        assert_eq!(g.bulk_intervals.len(), 1);
        let (a, b) = g.bulk_intervals[0];
        let edge = (4.0 - (2.0 * std::f64::consts::PI * 0.05).powi(2)).sqrt();
        assert!((a + edge - 0.1).abs() < 1e-3 && (b - edge + 0.1).abs() < 1e-3, "{a} {b}");
        assert!(g.rho.iter().all(|&r| r >= 0.0));
    }

    #[test]
    fn density_grid_rejects_bad_input() {
        let p = ProfileSpec::constant().build(8).unwrap();
        let o = SolverOptions::default();
        assert!(density_grid(&p, 1.0, -1.0, 100, 1e-5, 0.1, 0.0, &o).is_err());
        assert!(density_grid(&p, -1.0, 1.0, 10, 1e-5, 0.1, 0.0, &o).is_err());
        assert!(density_grid(&p, -1.0, 1.0, 100, 1.0, 0.1, 0.0, &o).is_err());
        let g = density_grid(&p, 2.5, 3.0, 32, 1e-5, 0.1, 0.0, &o).unwrap();
        assert!(g.bulk_intervals.is_empty());
    }
}
