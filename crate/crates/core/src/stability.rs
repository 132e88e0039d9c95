//! Stability operator B = 1 - S m m~ and the saturated self-energy
//! F = |m m~|^{1/2} S |m m~|^{1/2} at a spectral pair (z, zeta).
//!
//! With S = U C U^T every operator built here has the form
//! `a I + U K U^T diag(d)` for d = m m~, so all of them are carried as an
//! [`Structured`] value: a scalar identity coefficient plus an r x r core.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::dyson::DysonSolution;
use crate::ensemble::{Factor, VarianceProfile};
use crate::error::{Error, Result};
use crate::linalg::{self, CMat};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

/// The operator `id * I + U core U^T diag(d)`.
#[derive(Clone, Debug)]
pub struct Structured {
    pub id: C64,
    pub core: CMat,
}

impl Structured {
    fn v_matrix(&self, factor: &Factor) -> Vec<C64> {
        let (n, r) = (factor.n(), factor.rank());
        let mut v = vec![ZERO; n * r];
        for j in 0..n {
            let u = factor.u_row(j);
            for b in 0..r {
                v[j * r + b] = (0..r).map(|a| self.core[(a, b)] * u[a]).sum();
            }
        }
        v
    }

    /// Dense row-major n x n matrix.
    pub fn dense(&self, factor: &Factor, d: &[C64]) -> Vec<C64> {
        let (n, r) = (factor.n(), factor.rank());
        let v = self.v_matrix(factor);
        let mut out = vec![ZERO; n * n];
        for j in 0..n {
            let vj = &v[j * r..(j + 1) * r];
            for k in 0..n {
                let uk = factor.u_row(k);
                let s: C64 = vj.iter().zip(uk).map(|(a, b)| a * b).sum();
                out[j * n + k] = s * d[k];
            }
            out[j * n + j] += self.id;
        }
        out
    }

    fn row_fold(&self, factor: &Factor, d: &[C64], mut f: impl FnMut(usize, usize, C64)) {
        let (n, r) = (factor.n(), factor.rank());
        let v = self.v_matrix(factor);
        for j in 0..n {
            let vj = &v[j * r..(j + 1) * r];
            for k in 0..n {
                let uk = factor.u_row(k);
                let mut s: C64 = vj.iter().zip(uk).map(|(a, b)| a * b).sum::<C64>() * d[k];
                if j == k {
                    s += self.id;
                }
                f(j, k, s);
            }
        }
    }

    /// Operator norm induced by the sup norm (maximal absolute row sum).
    pub fn norm_inf(&self, factor: &Factor, d: &[C64]) -> f64 {
        let n = factor.n();
        let mut rows = vec![0.0; n];
        self.row_fold(factor, d, |j, _, s| rows[j] += s.norm());
        rows.into_iter().fold(0.0, f64::max)
    }

    pub fn max_abs(&self, factor: &Factor, d: &[C64]) -> f64 {
        let mut out = 0.0f64;
        self.row_fold(factor, d, |_, _, s| out = out.max(s.norm()));
        out
    }

    pub fn entry(&self, factor: &Factor, d: &[C64], j: usize, k: usize) -> C64 {
        let r = factor.rank();
        let (uj, uk) = (factor.u_row(j), factor.u_row(k));
        let mut s = ZERO;
        for a in 0..r {
            for b in 0..r {
                s += self.core[(a, b)] * uj[a] * uk[b];
            }
        }
        s *= d[k];
        if j == k {
            s += self.id;
        }
        s
    }

    pub fn apply(&self, factor: &Factor, d: &[C64], x: &[C64]) -> Vec<C64> {
        let dx: Vec<C64> = d.iter().zip(x).map(|(a, b)| a * b).collect();
        let p = factor.project(&dx);
        let r = factor.rank();
        let q: Vec<C64> = (0..r).map(|a| (0..r).map(|b| self.core[(a, b)] * p[b]).sum()).collect();
        let l = factor.lift(&q);
        x.iter().zip(&l).map(|(a, b)| self.id * a + b).collect()
    }

    /// Product of two operators sharing the same (U, d); `g` is U^T diag(d) U.
    pub fn mul(&self, other: &Structured, g: &CMat) -> Structured {
        let mut core = &self.core * g * &other.core;
        let r = core.nrows();
        for a in 0..r {
            for b in 0..r {
                core[(a, b)] += self.id * other.core[(a, b)] + other.id * self.core[(a, b)];
            }
        }
        Structured { id: self.id * other.id, core }
    }

    pub fn sub(&self, other: &Structured) -> Structured {
        let r = self.core.nrows();
        let core = CMat::from_fn(r, r, |a, b| self.core[(a, b)] - other.core[(a, b)]);
        Structured { id: self.id - other.id, core }
    }

    pub fn trace(&self, n: usize, g: &CMat) -> C64 {
        self.id * n as f64 + linalg::trace(&(&self.core * g))
    }
}

/// Saturated self-energy F at a pair (z, zeta), with its Perron pair.
#[derive(Clone, Debug, Serialize)]
pub struct SaturatedSelfEnergy {
    /// |m m~|^{1/2}, the diagonal weights of F.
    pub weights: Vec<f64>,
    pub lambda1: f64,
    pub v: Vec<f64>,
    pub lambda2: f64,
    pub gap: f64,
    /// All eigenvalues of F in descending order, zero included once when
    /// n exceeds the rank of S.
    pub spectrum: Vec<f64>,
    pub iterations: usize,
    pub eigen_residual: f64,
}

impl SaturatedSelfEnergy {
    pub fn f_matrix(&self, profile: &VarianceProfile) -> Vec<f64> {
        let n = profile.n;
        let w = &self.weights;
        (0..n * n).map(|i| w[i / n] * profile.s(i / n, i % n) * w[i % n]).collect()
    }

    /// (min, max) of sqrt(n) v_j.
    pub fn v_bounds(&self) -> (f64, f64) {
        let s = (self.v.len() as f64).sqrt();
        self.v.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(s * x), hi.max(s * x)))
    }
}

/// Nonzero eigenvalues of diag(w) S diag(w), via the r x r matrix C U^T diag(w^2) U.
fn weighted_spectrum(factor: &Factor, w2: &[f64]) -> Result<Vec<f64>> {
    let g = factor.gram_real(w2);
    let r = factor.rank();
    let m = CMat::from_fn(r, r, |a, b| C64::new((0..r).map(|k| factor.c(a, k) * g[(k, b)]).sum(), 0.0));
    let mut ev: Vec<f64> = linalg::eigenvalues(&m)?.into_iter().map(|x| x.re).collect();
    if factor.n() > r {
        ev.push(0.0);
    }
    ev.sort_by(|a, b| b.total_cmp(a));
    Ok(ev)
}

pub const POWER_TOL: f64 = 1e-12;
const MIN_GAP: f64 = 1e-10;

pub fn build_f(profile: &VarianceProfile, sol_z: &DysonSolution, sol_zeta: &DysonSolution) -> Result<SaturatedSelfEnergy> {
    let n = profile.n;
    if sol_z.m.len() != n || sol_zeta.m.len() != n {
        return Err(Error::Invalid("solutions do not match the profile dimension".into()));
    }
    let weights: Vec<f64> = sol_z.m.iter().zip(&sol_zeta.m).map(|(a, b)| (a * b).norm().sqrt()).collect();
    let w2: Vec<f64> = weights.iter().map(|w| w * w).collect();
    let spectrum = weighted_spectrum(profile.factor(), &w2)?;
    let lambda2 = spectrum.get(1).copied().unwrap_or(0.0);
    let gap_est = spectrum[0] - lambda2;
    if gap_est < MIN_GAP {
        return Err(Error::DegenerateGap { gap: gap_est });
    }
    let factor = profile.factor();
    let apply = |v: &[f64]| -> Vec<f64> {
        let wv: Vec<f64> = v.iter().zip(&weights).map(|(a, b)| a * b).collect();
        factor.apply_real(&wv).iter().zip(&weights).map(|(a, b)| a * b).collect()
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut v: Vec<f64> = weights.clone();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut lambda = 0.0;
    let mut res = f64::INFINITY;
    let mut it = 0;
    while it < 200_000 {
        it += 1;
        let fv = apply(&v);
        lambda = fv.iter().zip(&v).map(|(a, b)| a * b).sum();
        res = norm(&fv.iter().zip(&v).map(|(a, b)| a - lambda * b).collect::<Vec<_>>());
        if res <= POWER_TOL {
            break;
        }
        let nf = norm(&fv);
        v = fv.into_iter().map(|x| x / nf).collect();
    }
    if res > POWER_TOL {
        return Err(Error::DegenerateGap { gap: gap_est });
    }
    if v.iter().sum::<f64>() < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(SaturatedSelfEnergy { weights, lambda1: lambda, v, lambda2, gap: lambda - lambda2, spectrum, iterations: it, eigen_residual: res })
}

/// sup-norm residual of (1 - F(z, z bar)) (Im m / |m|) = Im z |m|.
pub fn saturation_identity_check(profile: &VarianceProfile, sol: &DysonSolution) -> f64 {
    let absm: Vec<f64> = sol.m.iter().map(|m| m.norm()).collect();
    let x: Vec<f64> = sol.m.iter().map(|m| m.im / m.norm()).collect();
    let ax: Vec<f64> = x.iter().zip(&absm).map(|(a, b)| a * b).collect();
    let sax = profile.factor().apply_real(&ax);
    let eta = sol.z.im;
    (0..profile.n).map(|j| (x[j] - absm[j] * sax[j] - eta * absm[j]).abs()).fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityOptions {
    pub radius: Option<f64>,
    pub halfwidth: Option<f64>,
    pub idempotency_tol: f64,
    pub max_nodes: usize,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        StabilityOptions { radius: None, halfwidth: None, idempotency_tol: 1e-10, max_nodes: 1 << 16 }
    }
}

#[derive(Clone, Debug)]
pub struct StabilityReport {
    pub z: C64,
    pub zeta: C64,
    pub factor: Factor,
    /// m(z) m(zeta).
    pub d: Vec<C64>,
    /// U^T diag(d) U.
    pub gram: CMat,
    pub f: SaturatedSelfEnergy,
    /// Eigenvalues of B other than the trivial eigenvalue 1, ascending modulus.
    pub b_spectrum: Vec<C64>,
    pub smallest_eig: C64,
    pub r: f64,
    pub delta: f64,
    pub projector: Structured,
    /// B^-1 (1 - Pi) from the contour representation.
    pub restricted_inverse: Structured,
    pub quadrature_nodes: usize,
    pub idempotency_residual: f64,
    pub trace_pi: C64,
    pub commutator_residual: f64,
    pub restricted_inverse_norm: f64,
    pub pi_one_ratio: f64,
}

impl StabilityReport {
    pub fn n(&self) -> usize {
        self.d.len()
    }

    /// B = 1 - S diag(m m~) in structured form.
    pub fn b_operator(&self) -> Structured {
        let c = self.factor.c_matrix();
        let r = c.nrows();
        Structured { id: ONE, core: CMat::from_fn(r, r, |a, b| -c[(a, b)]) }
    }

    pub fn b_dense(&self) -> Vec<C64> {
        self.b_operator().dense(&self.factor, &self.d)
    }

    pub fn projector_dense(&self) -> Vec<C64> {
        self.projector.dense(&self.factor, &self.d)
    }

    /// B^-1 by the Woodbury formula; loses accuracy when B is nearly singular.
    pub fn inverse(&self) -> Result<Structured> {
        let c = self.factor.c_matrix();
        let r = c.nrows();
        let mut a = linalg::cmat_identity(r);
        a -= &c * &self.gram;
        let (inv, cond) = linalg::inverse_with_condition(&a);
        if !cond.is_finite() {
            return Err(Error::Conditioning { condition: cond });
        }
        Ok(Structured { id: ONE, core: &inv * &c })
    }

    pub fn inverse_norm(&self) -> Result<f64> {
        Ok(self.inverse()?.norm_inf(&self.factor, &self.d))
    }

    /// Stable representation of B^-1 - 1 - X = X^2 (1 - X)^-1 with
    /// X = S diag(m m~), split as B^-1 (1 - Pi) + Pi / mu - 1 - X.
    pub fn two_point_operator(&self) -> Structured {
        let mu_inv = self.smallest_eig.inv();
        let c = self.factor.c_matrix();
        let r = c.nrows();
        let core = CMat::from_fn(r, r, |a, b| self.restricted_inverse.core[(a, b)] + self.projector.core[(a, b)] * mu_inv - c[(a, b)]);
        Structured { id: self.restricted_inverse.id + self.projector.id * mu_inv - ONE, core }
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "z": [self.z.re, self.z.im],
            "zeta": [self.zeta.re, self.zeta.im],
            "lambda1": self.f.lambda1,
            "gap": self.f.gap,
            "r": self.r,
            "delta": self.delta,
            "smallest_eig": [self.smallest_eig.re, self.smallest_eig.im],
            "restricted_inverse_norm": self.restricted_inverse_norm,
            "pi_one_ratio": self.pi_one_ratio,
            "quadrature_nodes": self.quadrature_nodes,
        })
    }
}

fn describe_layout(ev: &[C64], r: f64, delta: f64) -> String {
    let mods: Vec<String> = ev.iter().take(6).map(|x| format!("{:.4e}", x.norm())).collect();
    format!("r = {r:.4e}, delta = {delta:.4e}, smallest moduli of B's spectrum [{}]", mods.join(", "))
}

/// Radius and half-width of an annulus separating 1 - lambda_1(F(z)) from the
/// rest of the spectrum of B_0 = 1 - S |m(z)|^2.
pub fn auto_annulus(f0_spectrum: &[f64]) -> (f64, f64) {
    let a = (1.0 - f0_spectrum[0]).abs();
    let b = f0_spectrum[1..].iter().map(|l| (1.0 - l).abs()).fold(1.0f64, f64::min);
    ((a + b) / 2.0, (b - a) / 4.0)
}

pub fn build_stability_report(
    profile: &VarianceProfile,
    sol_z: &DysonSolution,
    sol_zeta: &DysonSolution,
    opts: &StabilityOptions,
) -> Result<StabilityReport> {
    let f = build_f(profile, sol_z, sol_zeta)?;
    let factor = profile.factor().clone();
    let n = profile.n;
    let r_rank = factor.rank();

    let (r, delta) = match (opts.radius, opts.halfwidth) {
        (Some(r), Some(d)) => (r, d),
        (r_opt, d_opt) => {
            let abs2: Vec<f64> = sol_z.m.iter().map(|m| m.norm_sqr()).collect();
            let spec0 = weighted_spectrum(&factor, &abs2)?;
            let (ra, da) = auto_annulus(&spec0);
            (r_opt.unwrap_or(ra), d_opt.unwrap_or(da))
        }
    };
    if !(r > 0.0 && delta > 0.0 && delta < r) {
        return Err(Error::Separation(format!("invalid annulus r = {r:e}, delta = {delta:e}")));
    }

    let d: Vec<C64> = sol_z.m.iter().zip(&sol_zeta.m).map(|(a, b)| a * b).collect();
    let gram = factor.gram(&d);
    let c = factor.c_matrix();
    let m = &c * &gram;
    let mut b_spectrum: Vec<C64> = linalg::eigenvalues(&m)?.into_iter().map(|x| ONE - x).collect();
    b_spectrum.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    let smallest_eig = b_spectrum[0];

    // The trivial eigenvalue 1 has multiplicity n - rank and always counts.
    let mut all_moduli: Vec<f64> = b_spectrum.iter().map(|x| x.norm()).collect();
    all_moduli.push(1.0);
    let inner = r - 0.75 * delta;
    let outer = r + 0.75 * delta;
    let inside = all_moduli.iter().filter(|&&x| x < inner).count();
    let in_annulus = all_moduli.iter().filter(|&&x| x >= inner && x <= outer).count();
    if inside != 1 || in_annulus != 0 {
        return Err(Error::Separation(format!(
            "{inside} eigenvalue(s) inside and {in_annulus} in the annulus; {}",
            describe_layout(&b_spectrum, r, delta)
        )));
    }

    let mut nodes = 32usize;
    let mut converged = false;
    loop {
        let (projector, restricted_inverse) = contour(&m, &c, r, nodes);
        let sq = projector.mul(&projector, &gram).sub(&projector);
        let idem = sq.max_abs(&factor, &d);
        // The trapezoid error is geometric in the node count, so one doubling
        // past the target squares it.
        if converged {
            let b = Structured { id: ONE, core: CMat::from_fn(r_rank, r_rank, |a, b| -c[(a, b)]) };
            let comm = projector.mul(&b, &gram).sub(&b.mul(&projector, &gram));
            let commutator_residual = comm.max_abs(&factor, &d);
            let trace_pi = projector.trace(n, &gram);
            let restricted_inverse_norm = restricted_inverse.norm_inf(&factor, &d);
            let pi_one = projector.apply(&factor, &d, &vec![ONE; n]);
            let pi_one_norm = pi_one.iter().fold(0.0f64, |a, x| a.max(x.norm()));
            let pi_one_ratio = pi_one_norm / projector.norm_inf(&factor, &d);
            return Ok(StabilityReport {
                z: sol_z.z,
                zeta: sol_zeta.z,
                factor,
                d,
                gram,
                f,
                b_spectrum,
                smallest_eig,
                r,
                delta,
                projector,
                restricted_inverse,
                quadrature_nodes: nodes,
                idempotency_residual: idem,
                trace_pi,
                commutator_residual,
                restricted_inverse_norm,
                pi_one_ratio,
            });
        }
        if idem < opts.idempotency_tol {
            converged = true;
        } else if nodes >= opts.max_nodes {
            return Err(Error::Quadrature(format!("projector idempotency residual {idem:e} after {nodes} nodes")));
        }
        nodes *= 2;
    }
}

/// Trapezoid rule on |xi| = r for
/// Pi = (2 pi i)^-1 \oint (xi - B)^-1 dxi and
/// B^-1 (1 - Pi) = -(2 pi i)^-1 \oint xi^-1 (xi - B)^-1 dxi,
/// using (xi - B)^-1 = t^-1 [1 - U (t + M)^-1 C U^T diag(d)], t = xi - 1.
fn contour(m: &CMat, c: &CMat, r: f64, nodes: usize) -> (Structured, Structured) {
    let k = m.nrows();
    let mut p_id = ZERO;
    let mut r_id = ZERO;
    let mut p = linalg::cmat_zeros(k, k);
    let mut q = linalg::cmat_zeros(k, k);
    let inv_n = 1.0 / nodes as f64;
    for j in 0..nodes {
        let xi = C64::from_polar(r, 2.0 * std::f64::consts::PI * j as f64 * inv_n);
        let t = xi - ONE;
        let mut a = m.clone();
        for i in 0..k {
            a[(i, i)] += t;
        }
        let (x, _) = linalg::inverse_with_condition(&a);
        let w = xi / t;
        p_id += w;
        r_id -= t.inv();
        let tinv = t.inv();
        for a in 0..k {
            for b in 0..k {
                p[(a, b)] += x[(a, b)] * w;
                q[(a, b)] += x[(a, b)] * tinv;
            }
        }
    }
    let p = &p * c;
    let q = &q * c;
    let projector = Structured { id: p_id * inv_n, core: CMat::from_fn(k, k, |a, b| -p[(a, b)] * inv_n) };
    let restricted = Structured { id: r_id * inv_n, core: CMat::from_fn(k, k, |a, b| q[(a, b)] * inv_n) };
    (projector, restricted)
}

/// ||B^-1 (1 - Pi)||_{inf -> inf}.
pub fn restricted_inverse_norm(report: &StabilityReport) -> f64 {
    report.restricted_inverse.norm_inf(&report.factor, &report.d)
}

#[derive(Clone, Debug)]
pub struct WeightDecomposition {
    pub n: usize,
    /// Row-major n x n.
    pub w_matrix: Vec<C64>,
    pub y_matrix: Vec<C64>,
    /// W = Y + 1 s^*, so column a of W carries conj(s_a) along the ones vector.
    pub s: Vec<C64>,
}

impl WeightDecomposition {
    pub fn reconstruction_error(&self) -> f64 {
        let n = self.n;
        (0..n * n).map(|i| (self.y_matrix[i] + self.s[i % n].conj() - self.w_matrix[i]).norm()).fold(0.0, f64::max)
    }
}

pub const DEFAULT_PI_ONE_MIN: f64 = 0.05;

/// Splits each column of W along the ones vector and ker Pi, requiring
/// pi_one_ratio of at least [`DEFAULT_PI_ONE_MIN`].
pub fn decompose_weight(report: &StabilityReport, w: &[C64]) -> Result<WeightDecomposition> {
    decompose_weight_with(report, w, DEFAULT_PI_ONE_MIN)
}

pub fn decompose_weight_with(report: &StabilityReport, w: &[C64], pi_one_min: f64) -> Result<WeightDecomposition> {
    let n = report.n();
    if w.len() != n * n {
        return Err(Error::Invalid(format!("weight matrix must be {n} x {n}")));
    }
    if report.pi_one_ratio < pi_one_min {
        return Err(Error::IllPosed { ratio: report.pi_one_ratio, threshold: pi_one_min });
    }
    let (factor, d, pr) = (&report.factor, &report.d, &report.projector);
    // Every row of the rank-one Pi is a multiple of its left eigenvector; use
    // the row where Pi 1 is largest.
    let ones = vec![ONE; n];
    let pi_one = pr.apply(factor, d, &ones);
    let jstar = (0..n).max_by(|&a, &b| pi_one[a].norm().total_cmp(&pi_one[b].norm())).unwrap();
    let q: Vec<C64> = (0..n).map(|k| pr.entry(factor, d, jstar, k)).collect();
    let q1: C64 = q.iter().sum();
    let mut sbar = vec![ZERO; n];
    for (x, sb) in sbar.iter_mut().enumerate() {
        let col: C64 = (0..n).map(|a| q[a] * w[a * n + x]).sum();
        *sb = col / q1;
    }
    let y_matrix: Vec<C64> = (0..n * n).map(|i| w[i] - sbar[i % n]).collect();
    Ok(WeightDecomposition { n, w_matrix: w.to_vec(), y_matrix, s: sbar.iter().map(|v| v.conj()).collect() })
}

/// sup-norm of m m~ B^-1 1 - (m - m~) / (z - zeta).
pub fn resolvent_difference_identity(profile: &VarianceProfile, sol_z: &DysonSolution, sol_zeta: &DysonSolution) -> Result<f64> {
    let factor = profile.factor();
    let d: Vec<C64> = sol_z.m.iter().zip(&sol_zeta.m).map(|(a, b)| a * b).collect();
    let gram = factor.gram(&d);
    let c = factor.c_matrix();
    let r = c.nrows();
    let mut a = linalg::cmat_identity(r);
    a -= &c * &gram;
    let (inv, cond) = linalg::inverse_with_condition(&a);
    if !cond.is_finite() {
        return Err(Error::Conditioning { condition: cond });
    }
    let binv = Structured { id: ONE, core: &inv * &c };
    let x = binv.apply(factor, &d, &vec![ONE; profile.n]);
    let dz = sol_z.z - sol_zeta.z;
    Ok((0..profile.n).map(|j| (d[j] * x[j] - (sol_z.m[j] - sol_zeta.m[j]) / dz).norm()).fold(0.0, f64::max))
}

/// ||Pi_a - Pi_b||_{inf -> inf} for two reports on the same profile.
pub fn projector_distance(a: &StabilityReport, b: &StabilityReport) -> f64 {
    let pa = a.projector_dense();
    let pb = b.projector_dense();
    let n = a.n();
    (0..n).map(|j| (0..n).map(|k| (pa[j * n + k] - pb[j * n + k]).norm()).sum::<f64>()).fold(0.0, f64::max)
}
