//! Mesoscopic linear statistics Tr f(H) for f(x) = g((x - E0) / eta0): the
//! quasi-analytic extension, the covariance kernels K and K~, the variance
//! functional by quadrature, the H^{1/2} prediction and the Monte Carlo check.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyson::{self, DensityGrid, DysonSolution, SolverOptions};
use crate::ensemble::{sample_matrix, Cumulant4, EnsembleSpec, EntryLaw, Factor, ProfileSpec, VarianceProfile};
use crate::error::{Error, Result};
use crate::linalg::{self, CMat, Range};
use crate::quad::{graded_breaks, GaussLegendre};
use crate::stats;

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

/// Closed-form base functions g with g' and g''. `width` rescales the
/// argument, `amplitude` the value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BaseFunction {
    /// A exp(1 - 1/(1 - t^2)) on |t| < 1.
    Bump {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "one")]
        width: f64,
    },
    /// A (1 - t^2)^3 on |t| < 1.
    TruncatedPolynomial {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "one")]
        width: f64,
    },
    /// A on |x| <= width, quintic smoothstep down to 0 over `ramp`.
    SmoothIndicator {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "one")]
        width: f64,
        #[serde(default = "half")]
        ramp: f64,
    },
    /// A exp(-t^2 / 2); not compactly supported, cut at |t| = 10.
    Gaussian {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "one")]
        width: f64,
    },
    Zero,
}

const GAUSSIAN_CUT: f64 = 10.0;

impl BaseFunction {
    pub fn bump() -> Self {
        BaseFunction::Bump { amplitude: 1.0, width: 1.0 }
    }

    pub fn gaussian() -> Self {
        BaseFunction::Gaussian { amplitude: 1.0, width: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            BaseFunction::Bump { amplitude, width }
            | BaseFunction::TruncatedPolynomial { amplitude, width }
            | BaseFunction::Gaussian { amplitude, width } => amplitude.is_finite() && width > 0.0,
            BaseFunction::SmoothIndicator { amplitude, width, ramp } => amplitude.is_finite() && width >= 0.0 && ramp > 0.0,
            BaseFunction::Zero => true,
        };
        if !ok || !self.half_width().is_finite() {
            return Err(Error::Invalid(format!("invalid base function {self:?}")));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            BaseFunction::Zero => true,
            BaseFunction::Bump { amplitude, .. }
            | BaseFunction::TruncatedPolynomial { amplitude, .. }
            | BaseFunction::SmoothIndicator { amplitude, .. }
            | BaseFunction::Gaussian { amplitude, .. } => amplitude == 0.0,
        }
    }

    pub fn is_compact(&self) -> bool {
        !matches!(self, BaseFunction::Gaussian { .. })
    }

    /// Half-width of the (effective) support, which is symmetric about 0.
    pub fn half_width(&self) -> f64 {
        match *self {
            BaseFunction::Bump { width, .. } | BaseFunction::TruncatedPolynomial { width, .. } => width,
            BaseFunction::SmoothIndicator { width, ramp, .. } => width + ramp,
            BaseFunction::Gaussian { width, .. } => GAUSSIAN_CUT * width,
            BaseFunction::Zero => 0.0,
        }
    }

    /// Points where the function is only finitely smooth, plus the support ends.
    pub fn knots(&self) -> Vec<f64> {
        let h = self.half_width();
        match *self {
            BaseFunction::SmoothIndicator { width, .. } if width > 0.0 => vec![-h, -width, width, h],
            BaseFunction::Gaussian { width, .. } => vec![-h, -4.0 * width, 0.0, 4.0 * width, h],
            _ => vec![-h, 0.0, h],
        }
    }

    /// (g, g', g'').
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        match *self {
            BaseFunction::Zero => (0.0, 0.0, 0.0),
            BaseFunction::Bump { amplitude, width } => {
                let t = x / width;
                if t.abs() >= 1.0 {
                    return (0.0, 0.0, 0.0);
                }
                let q = 1.0 - t * t;
                let g = amplitude * (1.0 - 1.0 / q).exp();
                let h1 = -2.0 * t / (q * q);
                let h2 = -2.0 / (q * q) - 8.0 * t * t / (q * q * q);
                (g, g * h1 / width, g * (h1 * h1 + h2) / (width * width))
            }
            BaseFunction::TruncatedPolynomial { amplitude, width } => {
                let t = x / width;
                if t.abs() >= 1.0 {
                    return (0.0, 0.0, 0.0);
                }
                let q = 1.0 - t * t;
                let a = amplitude;
                (a * q * q * q, -6.0 * a * t * q * q / width, a * (-6.0 * q * q + 24.0 * t * t * q) / (width * width))
            }
            BaseFunction::SmoothIndicator { amplitude, width, ramp } => {
                let ax = x.abs();
                if ax <= width {
                    return (amplitude, 0.0, 0.0);
                }
                if ax >= width + ramp {
                    return (0.0, 0.0, 0.0);
                }
                let s = 1.0 - (ax - width) / ramp;
                let v = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
                let d = 30.0 * s * s * (s - 1.0) * (s - 1.0);
                let dd = 60.0 * s * (2.0 * s - 1.0) * (s - 1.0);
                (amplitude * v, -x.signum() * amplitude * d / ramp, amplitude * dd / (ramp * ramp))
            }
            BaseFunction::Gaussian { amplitude, width } => {
                let t = x / width;
                let g = amplitude * (-0.5 * t * t).exp();
                (g, -t * g / width, (t * t - 1.0) * g / (width * width))
            }
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.eval(x).0
    }

    /// (||g||_1, ||g'||_1, ||g''||_1).
    pub fn l1_norms(&self) -> (f64, f64, f64) {
        let gl = GaussLegendre::new(16);
        let mut out = (0.0, 0.0, 0.0);
        for (x, w) in panel_nodes(&refine(&self.knots(), 32), &gl) {
            let (a, b, c) = self.eval(x);
            out.0 += w * a.abs();
            out.1 += w * b.abs();
            out.2 += w * c.abs();
        }
        out
    }
}

/// Each interval between consecutive knots split into `per` equal panels.
fn refine(knots: &[f64], per: usize) -> Vec<f64> {
    let mut out = vec![knots[0]];
    for k in knots.windows(2) {
        for i in 1..=per {
            out.push(k[0] + (k[1] - k[0]) * i as f64 / per as f64);
        }
    }
    out
}

fn panel_nodes(breaks: &[f64], gl: &GaussLegendre) -> Vec<(f64, f64)> {
    breaks.windows(2).filter(|p| p[1] > p[0]).flat_map(|p| gl.mapped(p[0], p[1]).collect::<Vec<_>>()).collect()
}

fn merge_breaks(mut breaks: Vec<f64>, extra: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let (lo, hi) = (breaks[0], *breaks.last().unwrap());
    breaks.extend(extra.into_iter().filter(|v| *v > lo && *v < hi));
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() <= 1e-15 * (1.0 + b.abs()));
    breaks
}

fn psi(t: f64) -> f64 {
    if t > 0.0 {
        (-1.0 / t).exp()
    } else {
        0.0
    }
}

fn psi_prime(t: f64) -> f64 {
    if t > 0.0 {
        psi(t) / (t * t)
    } else {
        0.0
    }
}

/// Even cutoff, 1 on [-1/2, 1/2] and supported in [-1, 1].
pub fn chi(eta: f64) -> f64 {
    let s = eta.abs();
    if s <= 0.5 {
        return 1.0;
    }
    if s >= 1.0 {
        return 0.0;
    }
    let (a, b) = (psi(1.0 - s), psi(s - 0.5));
    a / (a + b)
}

pub fn chi_prime(eta: f64) -> f64 {
    let s = eta.abs();
    if s <= 0.5 || s >= 1.0 {
        return 0.0;
    }
    let (a, b) = (psi(1.0 - s), psi(s - 0.5));
    let (da, db) = (-psi_prime(1.0 - s), psi_prime(s - 0.5));
    eta.signum() * (da * b - a * db) / ((a + b) * (a + b))
}

/// f(x) = g((x - e0) / eta0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub base: BaseFunction,
    pub e0: f64,
    pub eta0: f64,
}

impl TestFunction {
    pub fn new(base: BaseFunction, e0: f64, eta0: f64) -> Result<Self> {
        base.validate()?;
        if !(eta0 > 0.0 && eta0.is_finite() && e0.is_finite()) {
            return Err(Error::Invalid(format!("need finite E0 and eta0 > 0, got E0 = {e0}, eta0 = {eta0}")));
        }
        Ok(TestFunction { base, e0, eta0 })
    }

    /// (f, f', f'').
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let (g, g1, g2) = self.base.eval((x - self.e0) / self.eta0);
        (g, g1 / self.eta0, g2 / (self.eta0 * self.eta0))
    }

    pub fn value(&self, x: f64) -> f64 {
        self.eval(x).0
    }

    /// Energy interval carrying the (effective) support.
    pub fn support(&self) -> (f64, f64) {
        let h = self.base.half_width() * self.eta0;
        (self.e0 - h, self.e0 + h)
    }

    pub fn knots(&self) -> Vec<f64> {
        self.base.knots().iter().map(|k| self.e0 + self.eta0 * k).collect()
    }

    /// (||f||_1, ||f'||_1, ||f''||_1) by quadrature.
    pub fn l1_norms(&self) -> (f64, f64, f64) {
        let gl = GaussLegendre::new(16);
        let mut out = (0.0, 0.0, 0.0);
        for (x, w) in panel_nodes(&refine(&self.knots(), 32), &gl) {
            let (a, b, c) = self.eval(x);
            out.0 += w * a.abs();
            out.1 += w * b.abs();
            out.2 += w * c.abs();
        }
        out
    }

    /// Errors unless the support lies in a bulk interval of `grid` shrunk by
    /// a further `grid.kappa` on each side.
    pub fn check_bulk(&self, grid: &DensityGrid) -> Result<(f64, f64)> {
        let (lo, hi) = self.support();
        let k = grid.kappa;
        match grid.interval_of(self.e0) {
            Some((a, b)) if lo >= a + k && hi <= b - k => Ok((a, b)),
            Some((a, b)) => Err(Error::Invalid(format!(
                "test function support [{lo:.4}, {hi:.4}] escapes the shrunk bulk interval [{:.4}, {:.4}]",
                a + k,
                b - k
            ))),
            None => Err(Error::Invalid(format!("E0 = {} is not in the bulk", self.e0))),
        }
    }
}

/// d f~ / d zbar at z = x + i eta for f~ = chi(eta) (f(x) + i eta f'(x)).
pub fn dbar_extension(tf: &TestFunction, z: C64) -> C64 {
    let (x, eta) = (z.re, z.im);
    if eta.abs() >= 1.0 {
        return C64::new(0.0, 0.0);
    }
    let (f, f1, f2) = tf.eval(x);
    let (c, c1) = (chi(eta), chi_prime(eta));
    0.5 * C64::new(-eta * c1 * f1, eta * c * f2 + c1 * f)
}

/// Solution data entering the kernels at one spectral point.
#[derive(Clone, Debug)]
pub struct KernelPoint {
    pub z: C64,
    pub m: Vec<C64>,
    pub dm: Vec<C64>,
}

impl KernelPoint {
    pub fn solve(profile: &VarianceProfile, z: C64, warm: Option<&[C64]>, solver: &SolverOptions) -> Result<Self> {
        let sol = dyson::solve_vde(profile, z, warm, solver)?;
        Self::from_solution(profile, sol)
    }

    pub fn from_solution(profile: &VarianceProfile, sol: DysonSolution) -> Result<Self> {
        let dm = dyson::m_derivative(profile, &sol)?;
        Ok(KernelPoint { z: sol.z, m: sol.m, dm })
    }

    /// Data at the conjugate point.
    pub fn conj(&self) -> Self {
        KernelPoint { z: self.z.conj(), m: self.m.iter().map(|v| v.conj()).collect(), dm: self.dm.iter().map(|v| v.conj()).collect() }
    }
}

fn hadamard(a: &[C64], b: &[C64]) -> Vec<C64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// (1 - C G)^-1 C with G = U^T diag(d) U, so that (1 - S diag(d))^-1 = 1 + U K U^T diag(d).
fn woodbury_core(factor: &Factor, d: &[C64]) -> Result<(CMat, CMat)> {
    let c = factor.c_matrix();
    let g = factor.gram(d);
    let mut a = linalg::cmat_identity(c.nrows());
    a -= &c * &g;
    let (inv, cond) = linalg::inverse_with_condition(&a);
    if !(cond < 1e15) {
        return Err(Error::Conditioning { condition: cond });
    }
    Ok((&inv * &c, g))
}

/// Tr[A (1 - S m m~)^-1] for diagonal A.
pub fn weighted_inverse_trace(factor: &Factor, m: &[C64], mt: &[C64], a: &[C64]) -> Result<C64> {
    let d = hadamard(m, mt);
    let (k, _) = woodbury_core(factor, &d)?;
    let q = factor.gram(&hadamard(&d, a));
    Ok(a.iter().sum::<C64>() + linalg::trace(&(&k * &q)))
}

/// d/dzeta Tr[(m'/m)(1 - S m m~)^-1] = Tr[(m'/m) B^-1 S m m~' B^-1].
/// With B^-1 = 1 + U K U^T D this is Tr[K Q(E A)] + Tr[K Q(E) K Q(D A)],
/// Q(v) = U^T diag(v) U, D = m m~, E = m m~', A = m'/m.
fn first_term(factor: &Factor, pz: &KernelPoint, pw: &KernelPoint) -> Result<C64> {
    let d = hadamard(&pz.m, &pw.m);
    let e = hadamard(&pz.m, &pw.dm);
    let a: Vec<C64> = pz.dm.iter().zip(&pz.m).map(|(x, y)| x / y).collect();
    let (k, _) = woodbury_core(factor, &d)?;
    let q_ea = factor.gram(&hadamard(&e, &a));
    let q_e = factor.gram(&e);
    let q_da = factor.gram(&hadamard(&d, &a));
    Ok(linalg::trace(&(&k * &q_ea)) + linalg::trace(&(&(&(&k * &q_e) * &k) * &q_da)))
}

/// The three terms of K before their beta-dependent weights.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct KernelTerms {
    pub resolvent: C64,
    pub diagonal: C64,
    pub cumulant: C64,
}

impl KernelTerms {
    pub fn combine(&self, beta: u8) -> C64 {
        let b = beta as f64;
        self.resolvent * (2.0 / b) + self.diagonal * (1.0 - 2.0 / b) + self.cumulant
    }
}

pub fn kernel_terms(profile: &VarianceProfile, pz: &KernelPoint, pw: &KernelPoint, c4: &Cumulant4) -> Result<KernelTerms> {
    let f = profile.factor();
    let resolvent = first_term(f, pz, pw)?;
    let diagonal = (0..profile.n).map(|j| pz.dm[j] * pw.dm[j] * profile.s(j, j)).sum();
    let cumulant = if c4.is_zero() {
        C64::new(0.0, 0.0)
    } else {
        c4.bilinear(&hadamard(&pz.dm, &pw.dm), &hadamard(&pz.m, &pw.m)) + c4.bilinear(&hadamard(&pz.dm, &pw.m), &hadamard(&pz.m, &pw.dm))
    };
    Ok(KernelTerms { resolvent, diagonal, cumulant })
}

/// K(z, zeta).
pub fn kernel_k(profile: &VarianceProfile, z: C64, zeta: C64, c4: &Cumulant4, beta: u8, solver: &SolverOptions) -> Result<C64> {
    if beta != 1 && beta != 2 {
        return Err(Error::Invalid(format!("beta must be 1 or 2, got {beta}")));
    }
    let pz = KernelPoint::solve(profile, z, None, solver)?;
    let pw = KernelPoint::solve(profile, zeta, None, solver)?;
    Ok(kernel_terms(profile, &pz, &pw, c4)?.combine(beta))
}

fn k_tilde_points(factor: &Factor, px: &KernelPoint, py_upper: &KernelPoint) -> Result<f64> {
    Ok(-2.0 * first_term(factor, px, &py_upper.conj())?.re)
}

fn check_eta_star(eta_star: f64) -> Result<()> {
    if !(eta_star > 0.0 && eta_star <= 1e-3) {
        return Err(Error::Invalid(format!("eta_* must lie in (0, 1e-3], got {eta_star}")));
    }
    Ok(())
}

/// K~(x + i eta_*, y - i eta_*) = -2 Re d/dzeta Tr[(m'/m)(1 - S m m~)^-1].
pub fn kernel_k_tilde(profile: &VarianceProfile, x: f64, y: f64, eta_star: f64, solver: &SolverOptions) -> Result<f64> {
    check_eta_star(eta_star)?;
    if (x - y).abs() < 1e-10 && eta_star < 1e-10 {
        return Err(Error::Conditioning { condition: f64::INFINITY });
    }
    let px = KernelPoint::solve(profile, C64::new(x, eta_star), None, solver)?;
    let py = KernelPoint::solve(profile, C64::new(y, eta_star), Some(&px.m), solver)?;
    k_tilde_points(profile.factor(), &px, &py)
}

/// ||g||^2 of the homogeneous H^{1/2} seminorm, the double integral of
/// (g(x) - g(y))^2 / (x - y)^2.
pub fn h_half_norm(g: &BaseFunction) -> Result<f64> {
    g.validate()?;
    if g.is_zero() {
        return Ok(0.0);
    }
    let mut prev = h_half_at(g, 4);
    let mut per = 8;
    while per <= 256 {
        let v = h_half_at(g, per);
        if (v - prev).abs() <= 1e-10 * v.abs() {
            return Ok(v);
        }
        prev = v;
        per *= 2;
    }
    Err(Error::Accuracy(format!("H^1/2 quadrature did not settle; last value {prev:.6e}, refine the knots of {g:?}")))
}

fn h_half_at(g: &BaseFunction, per: usize) -> f64 {
    let knots = g.knots();
    let (a, b) = (knots[0], *knots.last().unwrap());
    let h_cut = 1e-4 * (b - a);
    let gl = GaussLegendre::new(12);
    let xs = panel_nodes(&refine(&knots, per), &gl);
    xs.par_iter()
        .map(|&(x, wx)| {
            let (gx, g1, g2) = g.eval(x);
            let side = |lo: f64, hi: f64| -> f64 {
                let base = refine(&[lo, hi], per);
                let breaks = merge_breaks(base, knots.iter().map(|k| k - x).chain([-h_cut, h_cut]));
                panel_nodes(&breaks, &gl)
                    .into_iter()
                    .map(|(u, w)| {
                        let q = if u.abs() < h_cut { g1 + 0.5 * g2 * u } else { (g.value(x + u) - gx) / u };
                        w * q * q
                    })
                    .sum()
            };
            let inner = side(a - x, 0.0) + side(0.0, b - x);
            let outer = 2.0 * gx * gx * (1.0 / (x - a) + 1.0 / (b - x));
            wx * (inner + outer)
        })
        .sum()
}

/// (2 beta pi^2)^-1 ||g||^2_{H^1/2}.
pub fn predict_variance(g: &BaseFunction, beta: u8) -> Result<f64> {
    if beta != 1 && beta != 2 {
        return Err(Error::Invalid(format!("beta must be 1 or 2, got {beta}")));
    }
    Ok(h_half_norm(g)? / (2.0 * beta as f64 * PI * PI))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FourDOptions {
    /// Omega_0 excludes |Im z| <= N^-alpha eta0.
    pub alpha: f64,
    /// N used in the cut; defaults to the profile dimension.
    pub cut_n: Option<usize>,
    pub x_panels: usize,
    pub eta_panels: usize,
    pub order: usize,
}

impl Default for FourDOptions {
    fn default() -> Self {
        FourDOptions { alpha: 0.1, cut_n: None, x_panels: 6, eta_panels: 6, order: 8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VarianceOptions {
    /// eta_* as a multiple of eta0.
    pub eta_star_rel: f64,
    pub eta_star: Option<f64>,
    pub order: usize,
    pub check_order: usize,
    pub panels_per_knot: usize,
    /// Geometric ratio of the panels graded towards the diagonal and the support edges.
    pub grading: f64,
    /// Smallest diagonal panel as a multiple of eta_*.
    pub min_panel_rel: f64,
    pub eps_hat: Option<f64>,
    pub bulk_interval: Option<(f64, f64)>,
    pub kappa: f64,
    pub bulk_threshold: f64,
    /// Relative quadrature error above which the result is rejected.
    pub accuracy_tol: f64,
    /// Richardson step to eta_* -> 0 from eta_* and eta_*/2.
    pub extrapolate: bool,
    pub four_d: Option<FourDOptions>,
    pub solver: SolverOptions,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        VarianceOptions {
            eta_star_rel: 1e-6,
            eta_star: None,
            order: 8,
            check_order: 12,
            panels_per_knot: 8,
            grading: 4.0,
            min_panel_rel: 1e-3,
            eps_hat: None,
            bulk_interval: None,
            kappa: 0.1,
            bulk_threshold: 0.05,
            accuracy_tol: 0.1,
            extrapolate: true,
            four_d: None,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarianceReport {
    pub beta: u8,
    pub v_kernel: f64,
    pub v_hhalf: f64,
    pub eta_star: f64,
    pub eps_hat: f64,
    pub quadrature_error_estimate: f64,
    /// |v_kernel - v_hhalf| / v_hhalf.
    pub relative_discrepancy: f64,
    /// Set when v_kernel falls outside [1e-3, 1e3].
    pub flagged: bool,
    pub kernel_evaluations: usize,
    pub v_4d: Option<f64>,
}

/// Energy grid used to locate the bulk of a profile.
pub fn detect_bulk(profile: &VarianceProfile, kappa: f64, threshold: f64, solver: &SolverOptions) -> Result<DensityGrid> {
    let smax = (0..profile.n).map(|j| profile.row(j).iter().sum::<f64>()).fold(0.0, f64::max);
    let e = 2.0 * smax.sqrt() + 0.25;
    dyson::density_grid(profile, -e, e, 1201, 1e-6, kappa, threshold, solver)
}

struct Field<'a> {
    profile: &'a VarianceProfile,
    eta: f64,
    solver: &'a SolverOptions,
}

impl Field<'_> {
    fn point(&self, x: f64, warm: Option<&KernelPoint>) -> Result<KernelPoint> {
        KernelPoint::solve(self.profile, C64::new(x, self.eta), warm.map(|p| p.m.as_slice()), self.solver)
    }

    fn k(&self, px: &KernelPoint, py: &KernelPoint) -> Result<f64> {
        k_tilde_points(self.profile.factor(), px, py)
    }

    /// Points along `xs` in order, each warm-started from its predecessor.
    fn chain(&self, xs: &[f64], start: Option<&KernelPoint>) -> Result<Vec<KernelPoint>> {
        let mut out: Vec<KernelPoint> = Vec::with_capacity(xs.len());
        for &x in xs {
            let p = self.point(x, out.last().or(start))?;
            out.push(p);
        }
        Ok(out)
    }
}

/// Integral of (f(y) - f(x))^2 K~(x, y) over [lo, hi]^2 with one Gauss rule.
fn kernel_double_integral(
    field: &Field,
    tf: &TestFunction,
    lo: f64,
    hi: f64,
    order: usize,
    opts: &VarianceOptions,
) -> Result<(f64, usize)> {
    let gl = GaussLegendre::new(order);
    let (a, b) = tf.support();
    let knots = tf.knots();
    let width = b - a;
    let u_min = (opts.min_panel_rel * field.eta).max(1e-14);
    let xs = panel_nodes(&refine(&knots, opts.panels_per_knot), &gl);
    let x_vals: Vec<f64> = xs.iter().map(|p| p.0).collect();
    let px = field.chain(&x_vals, None)?;

    // y outside the support, graded towards its ends and swept outwards.
    let side = |len: f64| -> Vec<(f64, f64)> {
        if len <= 0.0 {
            return vec![];
        }
        panel_nodes(&graded_breaks(len, 1e-6 * width, opts.grading), &gl)
    };
    let left: Vec<(f64, f64)> = side(a - lo).into_iter().map(|(d, w)| (a - d, w)).collect();
    let right: Vec<(f64, f64)> = side(hi - b).into_iter().map(|(d, w)| (b + d, w)).collect();
    let edge_a = field.point(a, Some(&px[0]))?;
    let edge_b = field.point(b, px.last())?;
    let py_left = field.chain(&left.iter().map(|p| p.0).collect::<Vec<_>>(), Some(&edge_a))?;
    let py_right = field.chain(&right.iter().map(|p| p.0).collect::<Vec<_>>(), Some(&edge_b))?;
    let outside: Vec<(f64, &KernelPoint)> =
        left.iter().map(|p| p.1).zip(&py_left).chain(right.iter().map(|p| p.1).zip(&py_right)).collect();

    let per_x: Vec<(f64, usize)> = xs
        .par_iter()
        .zip(&px)
        .map(|(&(x, wx), p)| -> Result<(f64, usize)> {
            let fx = tf.value(x);
            let mut evals = 0;
            // inside: (x, u = y - x), graded towards u = 0 on both sides
            let mut inner = 0.0;
            for (len, sign) in [(b - x, 1.0), (x - a, -1.0)] {
                let breaks = merge_breaks(graded_breaks(len, u_min, opts.grading), knots.iter().map(|k| sign * (k - x)));
                let mut prev: Option<KernelPoint> = None;
                for (du, w) in panel_nodes(&breaks, &gl) {
                    let y = x + sign * du;
                    let py = field.point(y, prev.as_ref().or(Some(p)))?;
                    let diff = tf.value(y) - fx;
                    if diff != 0.0 {
                        inner += w * diff * diff * field.k(p, &py)?;
                        evals += 1;
                    }
                    prev = Some(py);
                }
            }
            let mut out = 0.0;
            if fx != 0.0 {
                for (w, py) in &outside {
                    out += w * (field.k(p, py)? + field.k(py, p)?);
                    evals += 2;
                }
            }
            Ok((wx * (inner + fx * fx * out), evals))
        })
        .collect::<Result<_>>()?;
    Ok((per_x.iter().map(|v| v.0).sum(), per_x.iter().map(|v| v.1).sum()))
}

/// V(f) by the regularised two-dimensional kernel representation, with the
/// H^{1/2} prediction alongside.
pub fn variance_via_kernel(
    profile: &VarianceProfile,
    tf: &TestFunction,
    c4: &Cumulant4,
    beta: u8,
    opts: &VarianceOptions,
) -> Result<VarianceReport> {
    let v_hhalf = predict_variance(&tf.base, beta)?;
    let eta_star = opts.eta_star.unwrap_or(opts.eta_star_rel * tf.eta0);
    check_eta_star(eta_star)?;
    if opts.order < 2 || opts.check_order <= opts.order || opts.panels_per_knot == 0 || !(opts.grading > 1.0) {
        return Err(Error::Invalid("invalid variance quadrature parameters".into()));
    }
    let (a, b) = tf.support();
    let eps_hat = match opts.eps_hat {
        Some(e) => e,
        None => {
            let (lo, hi) = match opts.bulk_interval {
                Some(iv) => iv,
                None => {
                    let grid = detect_bulk(profile, opts.kappa, opts.bulk_threshold, &opts.solver)?;
                    grid.interval_of(tf.e0).ok_or_else(|| Error::Invalid(format!("E0 = {} is not in the bulk", tf.e0)))?
                }
            };
            (tf.e0 - lo).min(hi - tf.e0)
        }
    };
    if !(eps_hat > 0.0) || a < tf.e0 - eps_hat || b > tf.e0 + eps_hat {
        return Err(Error::Invalid(format!(
            "test function support [{a:.4}, {b:.4}] is not inside [E0 - eps, E0 + eps] with eps = {eps_hat:.4}"
        )));
    }
    let v_4d = match &opts.four_d {
        Some(o) if !tf.base.is_zero() => Some(variance_4d(profile, tf, c4, beta, o, &opts.solver)?),
        _ => None,
    };
    if tf.base.is_zero() {
        return Ok(VarianceReport {
            beta,
            v_kernel: 0.0,
            v_hhalf,
            eta_star,
            eps_hat,
            quadrature_error_estimate: 0.0,
            relative_discrepancy: 0.0,
            flagged: true,
            kernel_evaluations: 0,
            v_4d,
        });
    }
    let field = Field { profile, eta: eta_star, solver: &opts.solver };
    let (lo, hi) = (tf.e0 - eps_hat, tf.e0 + eps_hat);
    let scale = 1.0 / (beta as f64 * 4.0 * PI * PI);
    let (coarse, e1) = kernel_double_integral(&field, tf, lo, hi, opts.order, opts)?;
    let (fine, e2) = kernel_double_integral(&field, tf, lo, hi, opts.check_order, opts)?;
    let mut err = scale * (fine - coarse).abs();
    let mut v_kernel = scale * fine;
    let mut evaluations = e1 + e2;
    if opts.extrapolate {
        // the regularised integral moves linearly in eta_*; remove that term
        let half = Field { eta: 0.5 * eta_star, ..field };
        let (fine_half, e3) = kernel_double_integral(&half, tf, lo, hi, opts.check_order, opts)?;
        v_kernel = scale * (2.0 * fine_half - fine);
        err *= 3.0;
        evaluations += e3;
    }
    if err > opts.accuracy_tol * v_kernel.abs() {
        return Err(Error::Accuracy(format!(
            "variance quadrature error {err:.3e} exceeds {:.0}% of {v_kernel:.4e}; increase panels_per_knot or order",
            100.0 * opts.accuracy_tol
        )));
    }
    Ok(VarianceReport {
        beta,
        v_kernel,
        v_hhalf,
        eta_star,
        eps_hat,
        quadrature_error_estimate: err,
        relative_discrepancy: (v_kernel - v_hhalf).abs() / v_hhalf,
        flagged: !(1e-3..=1e3).contains(&v_kernel),
        kernel_evaluations: evaluations,
        v_4d,
    })
}

/// The defining four-dimensional integral of V(f) over Omega_0 x Omega_0'
/// on a coarse tensor grid; a cross-check for the two-dimensional form.
pub fn variance_4d(
    profile: &VarianceProfile,
    tf: &TestFunction,
    c4: &Cumulant4,
    beta: u8,
    opts: &FourDOptions,
    solver: &SolverOptions,
) -> Result<f64> {
    if beta != 1 && beta != 2 {
        return Err(Error::Invalid(format!("beta must be 1 or 2, got {beta}")));
    }
    let n_cut = opts.cut_n.unwrap_or(profile.n) as f64;
    let cut = n_cut.powf(-opts.alpha) * tf.eta0;
    if !(cut < 0.25) {
        return Err(Error::Invalid(format!("Omega_0 cut {cut} leaves no room below |Im z| = 1/2")));
    }
    let gl = GaussLegendre::new(opts.order);
    let xs = panel_nodes(&refine(&tf.knots(), opts.x_panels), &gl);
    let heights = |lo: f64| -> Vec<(f64, f64)> {
        let mut breaks: Vec<f64> = (0..=opts.eta_panels).map(|i| lo * (0.5 / lo).powf(i as f64 / opts.eta_panels as f64)).collect();
        breaks.extend([0.75, 1.0]);
        panel_nodes(&breaks, &gl)
    };
    // Points with their dbar weights; lower half-plane data by conjugation.
    let grid = |lo: f64| -> Result<Vec<(C64, KernelPoint)>> {
        let mut out = Vec::new();
        for (eta, we) in heights(lo) {
            let mut prev: Option<Vec<C64>> = None;
            for &(x, wx) in &xs {
                let p = KernelPoint::solve(profile, C64::new(x, eta), prev.as_deref(), solver)?;
                prev = Some(p.m.clone());
                let wu = dbar_extension(tf, C64::new(x, eta)) * (wx * we);
                let wl = dbar_extension(tf, C64::new(x, -eta)) * (wx * we);
                let q = p.conj();
                out.push((wu, p));
                out.push((wl, q));
            }
        }
        Ok(out)
    };
    let zs = grid(cut)?;
    let ws = grid(2.0 * cut)?;
    let total: C64 = zs
        .par_iter()
        .map(|(wz, pz)| -> Result<C64> {
            let mut acc = C64::new(0.0, 0.0);
            for (ww, pw) in &ws {
                acc += wz * ww * kernel_terms(profile, pz, pw, c4)?.combine(beta);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(total.re / (PI * PI))
}

/// Test function given by its base and either eta0 or the exponent in eta0 = n^-exponent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunctionSpec {
    pub base: BaseFunction,
    #[serde(default)]
    pub e0: f64,
    #[serde(default)]
    pub eta0: Option<f64>,
    #[serde(default = "default_eta_exponent")]
    pub eta0_exponent: f64,
}

fn default_eta_exponent() -> f64 {
    0.3
}

impl TestFunctionSpec {
    pub fn build(&self, n: usize) -> Result<TestFunction> {
        let eta0 = self.eta0.unwrap_or((n as f64).powf(-self.eta0_exponent));
        TestFunction::new(self.base, self.e0, eta0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CltOptions {
    pub kappa: f64,
    pub bulk_threshold: f64,
    /// When set, V(f) is also computed by the kernel quadrature.
    pub kernel_variance: Option<VarianceOptions>,
    pub solver: SolverOptions,
}

impl Default for CltOptions {
    fn default() -> Self {
        CltOptions { kappa: 0.1, bulk_threshold: 0.05, kernel_variance: None, solver: SolverOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltConfig {
    pub profile: ProfileSpec,
    pub n: usize,
    pub law: EntryLaw,
    pub seed: u64,
    pub test_function: TestFunctionSpec,
    pub n_samples: usize,
    #[serde(default)]
    pub options: CltOptions,
}

impl CltConfig {
    pub fn run(&self) -> Result<CltReport> {
        let spec = EnsembleSpec::new(self.profile.build(self.n)?, self.law, self.seed)?;
        let tf = self.test_function.build(self.n)?;
        run_clt_experiment(&spec, &tf, self.n_samples, &self.options)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CltReport {
    pub config: CltConfig,
    pub n: usize,
    pub n_samples: usize,
    pub beta: u8,
    pub eta0: f64,
    pub bulk_interval: (f64, f64),
    /// Tr f(H) per sample.
    pub traces: Vec<f64>,
    /// Centered statistics Tr f(H) - sample mean.
    pub statistics: Vec<f64>,
    pub sample_mean: f64,
    pub sample_variance: f64,
    pub stderr: f64,
    pub predicted_variance_kernel: Option<f64>,
    pub predicted_variance_hhalf: f64,
    pub ks_stat: f64,
    pub ks_p: f64,
    pub skewness: f64,
    /// Excess kurtosis.
    pub kurtosis: f64,
}

impl CltReport {
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "sample_variance": self.sample_variance,
            "stderr": self.stderr,
            "predicted_variance_kernel": self.predicted_variance_kernel,
            "predicted_variance_hhalf": self.predicted_variance_hhalf,
            "ks_stat": self.ks_stat,
            "ks_p": self.ks_p,
            "skewness": self.skewness,
            "kurtosis": self.kurtosis,
        })
    }

    pub fn write_statistics_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample", "trace", "centered"])?;
        for (i, (t, s)) in self.traces.iter().zip(&self.statistics).enumerate() {
            w.write_record([i.to_string(), format!("{t:.15e}"), format!("{s:.15e}")])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Normalised histogram of the centered statistics: (left edge, right edge, density).
    pub fn histogram(&self, bins: usize) -> Vec<(f64, f64, f64)> {
        let lo = self.statistics.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.statistics.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let h = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
        let mut counts = vec![0usize; bins];
        for s in &self.statistics {
            counts[(((s - lo) / h) as usize).min(bins - 1)] += 1;
        }
        let total = self.statistics.len() as f64;
        counts.iter().enumerate().map(|(i, c)| (lo + h * i as f64, lo + h * (i + 1) as f64, *c as f64 / (total * h))).collect()
    }
}

/// Tr f(H) for one sample, from the eigenvalues inside the support of f.
pub fn linear_statistic(spec: &EnsembleSpec, tf: &TestFunction, index: u64) -> Result<f64> {
    let (lo, hi) = tf.support();
    let h = sample_matrix(spec, index);
    Ok(h.eigenvalues(Range::Window(lo, hi))?.iter().map(|l| tf.value(*l)).sum())
}

pub fn run_clt_experiment(spec: &EnsembleSpec, tf: &TestFunction, n_samples: usize, opts: &CltOptions) -> Result<CltReport> {
    let n = spec.n();
    let beta = spec.law.beta;
    if n_samples < 200 {
        return Err(Error::Invalid(format!("need at least 200 samples, got {n_samples}")));
    }
    if tf.base.is_zero() {
        return Err(Error::Invalid("the test function vanishes identically".into()));
    }
    if !(tf.eta0 > 1.0 / n as f64 && tf.eta0 < 1.0) {
        return Err(Error::Invalid(format!("eta0 = {} is not mesoscopic for n = {n}", tf.eta0)));
    }
    let profile = &*spec.profile;
    let grid = detect_bulk(profile, opts.kappa, opts.bulk_threshold, &opts.solver)?;
    let bulk_interval = tf.check_bulk(&grid)?;
    let predicted_variance_hhalf = predict_variance(&tf.base, beta)?;
    let predicted_variance_kernel = match &opts.kernel_variance {
        Some(v) => {
            let v = VarianceOptions { bulk_interval: Some(bulk_interval), ..*v };
            Some(variance_via_kernel(profile, tf, &Cumulant4::from_spec(spec), beta, &v)?.v_kernel)
        }
        None => None,
    };
    let traces: Vec<f64> = (0..n_samples as u64).into_par_iter().map(|i| linear_statistic(spec, tf, i)).collect::<Result<_>>()?;
    let sample_mean = stats::mean(&traces);
    let statistics: Vec<f64> = traces.iter().map(|t| t - sample_mean).collect();
    let ks = stats::ks_normal(&statistics, 0.0, predicted_variance_hhalf.sqrt())?;
    let config = CltConfig {
        profile: profile.spec(),
        n,
        law: spec.law,
        seed: spec.base_seed,
        test_function: TestFunctionSpec { base: tf.base, e0: tf.e0, eta0: Some(tf.eta0), eta0_exponent: default_eta_exponent() },
        n_samples,
        options: opts.clone(),
    };
    Ok(CltReport {
        config,
        n,
        n_samples,
        beta,
        eta0: tf.eta0,
        bulk_interval,
        sample_variance: stats::variance(&statistics),
        stderr: stats::jackknife_variance_stderr(&statistics),
        skewness: stats::skewness(&statistics),
        kurtosis: stats::excess_kurtosis(&statistics),
        traces,
        statistics,
        sample_mean,
        predicted_variance_kernel,
        predicted_variance_hhalf,
        ks_stat: ks.statistic,
        ks_p: ks.p_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyson::m_sc;
    use crate::ensemble::Family;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn base_derivatives_match_differences() {
        let fams = [
            BaseFunction::bump(),
            BaseFunction::TruncatedPolynomial { amplitude: 2.0, width: 1.5 },
            BaseFunction::SmoothIndicator { amplitude: 1.0, width: 0.7, ramp: 0.4 },
            BaseFunction::Gaussian { amplitude: 0.5, width: 2.0 },
        ];
        let h = 1e-5;
        for g in fams {
            for x in [-0.93, -0.5, 0.01, 0.3, 0.8, 1.05] {
                let (_, d1, d2) = g.eval(x);
                let fd1 = (g.value(x + h) - g.value(x - h)) / (2.0 * h);
                let fd2 = (g.value(x + h) - 2.0 * g.value(x) + g.value(x - h)) / (h * h);
                assert!((d1 - fd1).abs() < 1e-6 * (1.0 + d1.abs()), "{g:?} {x}");
                assert!((d2 - fd2).abs() < 1e-3 * (1.0 + d2.abs()), "{g:?} {x}");
            }
        }
    }

    #[test]
    fn chi_properties() {
        assert_eq!(chi(0.3), 1.0);
        assert_eq!(chi(-0.5), 1.0);
        assert_eq!(chi(1.0), 0.0);
        assert!(chi(0.75) > 0.0 && chi(0.75) < 1.0);
        assert_eq!(chi(0.8), chi(-0.8));
        let h = 1e-6;
        for e in [0.55, 0.7, 0.9, -0.6] {
            let fd = (chi(e + h) - chi(e - h)) / (2.0 * h);
            assert!((chi_prime(e) - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn dbar_on_grid() {
        let tf = TestFunction::new(BaseFunction::bump(), 0.1, 0.2).unwrap();
        for i in 0..41 {
            for j in 0..41 {
                let x = -0.2 + 0.6 * i as f64 / 40.0;
                let eta = -1.5 + 3.0 * j as f64 / 40.0;
                let d = dbar_extension(&tf, c(x, eta));
                if eta.abs() >= 1.0 {
                    assert_eq!(d, c(0.0, 0.0));
                } else if eta.abs() < 0.5 {
                    let want = c(0.0, eta / 2.0) * tf.eval(x).2;
                    assert!((d - want).norm() <= 1e-15 * (1.0 + want.norm()));
                }
            }
        }
        assert_eq!(dbar_extension(&tf, c(0.1, 0.25)), c(0.0, 0.125) * tf.eval(0.1).2);
        let flat = TestFunction::new(BaseFunction::SmoothIndicator { amplitude: 1.0, width: 1.0, ramp: 0.5 }, 0.0, 0.1).unwrap();
        assert_eq!(dbar_extension(&flat, c(0.02, 0.0)), c(0.0, 0.0));
    }

    #[test]
    fn scaled_norms() {
        let g = BaseFunction::bump();
        let (a, b, cc) = g.l1_norms();
        let tf = TestFunction::new(g, 0.0, 0.05).unwrap();
        let (fa, fb, fc) = tf.l1_norms();
        for (r, want) in [(fa / 0.05, a), (fb, b), (fc * 0.05, cc)] {
            assert!(r / want < 3.0 && want / r < 3.0);
        }
    }

    /// Scalar form for the constant profile: every trace reduces to one number.
    fn scalar_kernel(z: C64, w: C64, beta: u8, sum_c4: f64) -> C64 {
        let (m, mt) = (m_sc(z), m_sc(w));
        let dm = m * m / (1.0 - m * m);
        let dmt = mt * mt / (1.0 - mt * mt);
        let b = beta as f64;
        (2.0 / b) * dm * dmt / ((1.0 - m * mt) * (1.0 - m * mt)) + (1.0 - 2.0 / b) * dm * dmt + 2.0 * sum_c4 * m * mt * dm * dmt
    }

    #[test]
    fn kernel_matches_scalar_reduction() {
        let n = 30;
        let opts = SolverOptions::default();
        let (z, w) = (c(0.1, 0.05), c(0.1, -0.05));
        for (fam, beta) in [(Family::Gaussian, 1u8), (Family::Gaussian, 2), (Family::Rademacher, 1), (Family::Rademacher, 2)] {
            let spec = EnsembleSpec::new(ProfileSpec::constant().build(n).unwrap(), EntryLaw::new(fam, beta).unwrap(), 0).unwrap();
            let c4 = Cumulant4::from_spec(&spec);
            let dense = crate::ensemble::fourth_cumulant_matrix(&spec);
            let sum: f64 = dense.iter().sum();
            let k = kernel_k(&spec.profile, z, w, &c4, beta, &opts).unwrap();
            let want = scalar_kernel(z, w, beta, sum);
            assert!((k - want).norm() < 1e-8 * want.norm(), "{fam:?} {beta}: {k} vs {want}");
        }
    }

    #[test]
    fn kernel_beta_two_gaussian_is_first_term() {
        let p = ProfileSpec::smooth_kernel().build(40).unwrap();
        let opts = SolverOptions::default();
        let pz = KernelPoint::solve(&p, c(0.2, 0.1), None, &opts).unwrap();
        let pw = KernelPoint::solve(&p, c(-0.1, -0.2), None, &opts).unwrap();
        let t = kernel_terms(&p, &pz, &pw, &Cumulant4::zero(40)).unwrap();
        assert_eq!(t.cumulant, c(0.0, 0.0));
        assert!((t.combine(2) - t.resolvent).norm() < 1e-15);
        assert!((t.combine(1) - (2.0 * t.resolvent - t.diagonal)).norm() < 1e-14);
    }

    #[test]
    fn analytic_zeta_derivative_matches_differences() {
        let p = ProfileSpec::smooth_kernel().build(50).unwrap();
        let opts = SolverOptions::default();
        let pz = KernelPoint::solve(&p, c(0.3, 0.2), None, &opts).unwrap();
        let w = c(-0.2, -0.15);
        let pw = KernelPoint::solve(&p, w, None, &opts).unwrap();
        let a: Vec<C64> = pz.dm.iter().zip(&pz.m).map(|(x, y)| x / y).collect();
        let h = 1e-5;
        let tr = |zeta: C64| {
            let s = dyson::solve_vde(&p, zeta, Some(&pw.m), &opts).unwrap();
            weighted_inverse_trace(p.factor(), &pz.m, &s.m, &a).unwrap()
        };
        let fd = (tr(w + h) - tr(w - h)) / (2.0 * h);
        let an = first_term(p.factor(), &pz, &pw).unwrap();
        assert!((fd - an).norm() < 1e-6 * an.norm(), "{fd} vs {an}");
    }

    #[test]
    fn kernel_reflection_symmetry() {
        let spec =
            EnsembleSpec::new(ProfileSpec::smooth_kernel().build(40).unwrap(), EntryLaw::new(Family::Rademacher, 1).unwrap(), 0).unwrap();
        let c4 = Cumulant4::from_spec(&spec);
        let opts = SolverOptions::default();
        let (z, w) = (c(0.25, 0.1), c(-0.4, -0.3));
        let a = kernel_k(&spec.profile, z, w, &c4, 1, &opts).unwrap();
        let b = kernel_k(&spec.profile, z.conj(), w.conj(), &c4, 1, &opts).unwrap();
        assert!((a - b.conj()).norm() < 1e-10 * a.norm());
    }

    #[test]
    fn k_tilde_wigner_values() {
        let p = ProfileSpec::constant().build(20).unwrap();
        let opts = SolverOptions::default();
        let (x, y, e) = (0.05, 0.15, 1e-6);
        let k = kernel_k_tilde(&p, x, y, e, &opts).unwrap();
        let (mz, mw) = (m_sc(c(x, e)), m_sc(c(y, -e)));
        let (dz, dw) = (mz * mz / (1.0 - mz * mz), mw * mw / (1.0 - mw * mw));
        let want = -2.0 * (dz * dw / ((1.0 - mz * mw) * (1.0 - mz * mw))).re;
        assert!((k - want).abs() < 1e-8 * want.abs(), "{k} vs {want}");
        assert!((k / 200.0 - 1.0).abs() < 0.2);
        let back = kernel_k_tilde(&p, y, x, e, &opts).unwrap();
        assert!((k - back).abs() < 1e-8 * k.abs());
        assert!(kernel_k_tilde(&p, 0.1, 0.1, 1e-11, &opts).is_err());
        assert!(kernel_k_tilde(&p, 0.1, 0.2, 1e-2, &opts).is_err());
    }

    #[test]
    fn h_half_examples() {
        let v = h_half_norm(&BaseFunction::gaussian()).unwrap();
        assert!((v - 2.0 * PI).abs() < 1e-3, "{v}");
        let wide = h_half_norm(&BaseFunction::Gaussian { amplitude: 1.0, width: 3.0 }).unwrap();
        assert!((wide - v).abs() < 1e-6);
        let b1 = h_half_norm(&BaseFunction::bump()).unwrap();
        let b3 = h_half_norm(&BaseFunction::Bump { amplitude: 1.0, width: 3.0 }).unwrap();
        assert!((b1 - b3).abs() < 1e-8 * b1);
        let b2 = h_half_norm(&BaseFunction::Bump { amplitude: 2.0, width: 1.0 }).unwrap();
        assert!((b2 - 4.0 * b1).abs() < 1e-8 * b2);
        assert_eq!(h_half_norm(&BaseFunction::Zero).unwrap(), 0.0);
        assert_eq!(h_half_norm(&BaseFunction::Bump { amplitude: 0.0, width: 1.0 }).unwrap(), 0.0);
        assert!((predict_variance(&BaseFunction::gaussian(), 1).unwrap() - 1.0 / PI).abs() < 1e-3);
        assert!((predict_variance(&BaseFunction::gaussian(), 2).unwrap() - 0.5 / PI).abs() < 1e-3);
    }

    #[test]
    fn zero_function_has_zero_variance() {
        let p = ProfileSpec::constant().build(50).unwrap();
        let tf = TestFunction::new(BaseFunction::Zero, 0.0, 0.1).unwrap();
        let opts = VarianceOptions { bulk_interval: Some((-1.9, 1.9)), ..Default::default() };
        let r = variance_via_kernel(&p, &tf, &Cumulant4::zero(50), 1, &opts).unwrap();
        assert_eq!(r.v_kernel, 0.0);
        assert_eq!(r.v_hhalf, 0.0);
    }

    #[test]
    fn support_outside_bulk_is_rejected() {
        let spec = EnsembleSpec::new(ProfileSpec::constant().build(100).unwrap(), EntryLaw::new(Family::Gaussian, 1).unwrap(), 0).unwrap();
        let tf = TestFunction::new(BaseFunction::bump(), 1.8, 0.1).unwrap();
        assert!(matches!(run_clt_experiment(&spec, &tf, 200, &CltOptions::default()), Err(Error::Invalid(_))));
        let tf = TestFunction::new(BaseFunction::bump(), 0.0, 0.1).unwrap();
        assert!(run_clt_experiment(&spec, &tf, 10, &CltOptions::default()).is_err());
    }

    #[test]
    fn small_clt_run_is_centered() {
        let spec = EnsembleSpec::new(ProfileSpec::constant().build(120).unwrap(), EntryLaw::new(Family::Gaussian, 1).unwrap(), 3).unwrap();
        let tf = TestFunction::new(BaseFunction::bump(), 0.0, 0.3).unwrap();
        let r = run_clt_experiment(&spec, &tf, 200, &CltOptions::default()).unwrap();
        assert!(r.statistics.iter().sum::<f64>().abs() < 1e-9);
        assert_eq!(r.traces.len(), 200);
        assert!(r.sample_variance > 0.0 && r.stderr > 0.0);
        let again = run_clt_experiment(&spec, &tf, 200, &CltOptions::default()).unwrap();
        assert_eq!(r.traces, again.traces);
        let hist = r.histogram(20);
        let mass: f64 = hist.iter().map(|(a, b, d)| (b - a) * d).sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }
}
