//! Resolvents of sampled matrices, the empirical two-point function
//! T_xy(z, zeta) = sum_{a != y} S_xa G_ay(z) G_ya(zeta), its deterministic
//! limit [X^2 (1 - X)^-1]_xy with X = S diag(m m~), and local-law error decay.

use std::path::Path;

use faer::Mat;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyson::{self, DysonSolution, SolverOptions};
use crate::ensemble::{sample_matrix, EnsembleSpec, EntryLaw, Factor, HermitianMatrix, ProfileSpec, VarianceProfile};
use crate::error::{Error, Result};
use crate::linalg::{self, CMat, Range};
use crate::stability::{build_stability_report, StabilityOptions, Structured};
use crate::stats::{self, LinearFit};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Clone, Debug)]
pub enum Eigenvectors {
    Real(Mat<f64>),
    Complex(Mat<C64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleId {
    pub base_seed: u64,
    pub index: u64,
}

/// Full eigendecomposition H = U diag(lambda) U^* of one sample.
#[derive(Clone, Debug)]
pub struct ResolventCache {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Eigenvectors,
    pub source: Option<SampleId>,
}

fn check_z(z: C64) -> Result<()> {
    if z.im == 0.0 || !z.is_finite() {
        return Err(Error::Domain(format!("Im z must be nonzero, got z = {z}")));
    }
    Ok(())
}

impl ResolventCache {
    pub fn new(h: &HermitianMatrix) -> Result<Self> {
        let n = h.n();
        let (eigenvalues, eigenvectors) = match h {
            HermitianMatrix::Real { data, .. } => match linalg::real_eigenpairs(n, data)? {
                Some((w, z)) => (w, Eigenvectors::Real(Mat::from_fn(n, n, |i, j| z[i + j * n]))),
                None => {
                    let mut a: Vec<C64> = data.iter().map(|v| C64::new(*v, 0.0)).collect();
                    let (w, z) = linalg::heevr(n, &mut a, Range::All, true)?;
                    (w, Eigenvectors::Complex(Mat::from_fn(n, n, |i, j| z[i + j * n])))
                }
            },
            HermitianMatrix::Complex { data, .. } => {
                let mut a = data.clone();
                let (w, z) = linalg::heevr(n, &mut a, Range::All, true)?;
                (w, Eigenvectors::Complex(Mat::from_fn(n, n, |i, j| z[i + j * n])))
            }
        };
        if eigenvalues.len() != n {
            return Err(Error::Backend(format!("eigensolver returned {} of {n} eigenvalues", eigenvalues.len())));
        }
        Ok(ResolventCache { eigenvalues, eigenvectors, source: None })
    }

    pub fn from_sample(spec: &EnsembleSpec, index: u64) -> Result<Self> {
        let mut c = Self::new(&sample_matrix(spec, index))?;
        c.source = Some(SampleId { base_seed: spec.base_seed, index });
        Ok(c)
    }

    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    #[inline]
    fn u(&self, i: usize, k: usize) -> C64 {
        match &self.eigenvectors {
            Eigenvectors::Real(u) => C64::new(u[(i, k)], 0.0),
            Eigenvectors::Complex(u) => u[(i, k)],
        }
    }

    fn weights(&self, z: C64) -> Vec<C64> {
        self.eigenvalues.iter().map(|l| (C64::new(*l, 0.0) - z).inv()).collect()
    }

    /// max |U diag(lambda) U^* - H|.
    pub fn reconstruction_error(&self, h: &HermitianMatrix) -> f64 {
        let n = self.n();
        let l = Mat::from_fn(n, n, |i, k| self.u(i, k) * self.eigenvalues[k]);
        let u = Mat::from_fn(n, n, |i, k| self.u(i, k));
        let r = &l * u.adjoint();
        let mut out = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                out = out.max((r[(i, j)] - h.get(i, j)).norm());
            }
        }
        out
    }

    pub fn entry(&self, z: C64, x: usize, y: usize) -> C64 {
        let w = self.weights(z);
        (0..self.n()).map(|k| self.u(x, k) * self.u(y, k).conj() * w[k]).sum()
    }

    /// All diagonal entries G_xx(z).
    pub fn diagonal(&self, z: C64) -> Vec<C64> {
        let w = self.weights(z);
        let n = self.n();
        (0..n).map(|x| (0..n).map(|k| w[k] * self.u(x, k).norm_sqr()).sum()).collect()
    }

    /// n^-1 Tr G(z).
    pub fn normalized_trace(&self, z: C64) -> C64 {
        self.weights(z).iter().sum::<C64>() / self.n() as f64
    }

    /// The block G(z)[xs, ys].
    pub fn block(&self, z: C64, xs: &[usize], ys: &[usize]) -> CMat {
        let w = self.weights(z);
        let n = self.n();
        match &self.eigenvectors {
            Eigenvectors::Real(u) => {
                let b = Mat::from_fn(ys.len(), n, |i, k| u[(ys[i], k)]);
                let ar = Mat::from_fn(xs.len(), n, |i, k| u[(xs[i], k)] * w[k].re);
                let ai = Mat::from_fn(xs.len(), n, |i, k| u[(xs[i], k)] * w[k].im);
                let re = &ar * b.transpose();
                let im = &ai * b.transpose();
                CMat::from_fn(xs.len(), ys.len(), |i, j| C64::new(re[(i, j)], im[(i, j)]))
            }
            Eigenvectors::Complex(u) => {
                let b = Mat::from_fn(ys.len(), n, |i, k| u[(ys[i], k)]);
                let a = Mat::from_fn(xs.len(), n, |i, k| u[(xs[i], k)] * w[k]);
                &a * b.adjoint()
            }
        }
    }

    pub fn full(&self, z: C64) -> CMat {
        let all: Vec<usize> = (0..self.n()).collect();
        self.block(z, &all, &all)
    }

    /// Largest relative defect of sum_a |G_xa|^2 = Im G_xx / Im z over `rows`.
    pub fn ward_residual(&self, z: C64, rows: &[usize]) -> Result<f64> {
        check_z(z)?;
        let g = resolvent_entries(self, z, rows)?;
        let mut out = 0.0f64;
        for (i, &x) in rows.iter().enumerate() {
            let lhs: f64 = (0..self.n()).map(|a| g[(i, a)].norm_sqr()).sum();
            let rhs = g[(i, x)].im / z.im;
            out = out.max((lhs - rhs).abs() / rhs.abs().max(f64::MIN_POSITIVE));
        }
        Ok(out)
    }

    /// max |(z - zeta) [G(z) G(zeta)]_xy - G_xy(z) + G_xy(zeta)| over xs x ys.
    pub fn resolvent_identity_residual(&self, z: C64, zeta: C64, xs: &[usize], ys: &[usize]) -> Result<f64> {
        check_z(z)?;
        check_z(zeta)?;
        let all: Vec<usize> = (0..self.n()).collect();
        let rows = self.block(z, xs, &all);
        let cols = self.block(zeta, &all, ys);
        let prod = &rows * &cols;
        let gz = self.block(z, xs, ys);
        let gw = self.block(zeta, xs, ys);
        let mut out = 0.0f64;
        for i in 0..xs.len() {
            for j in 0..ys.len() {
                let r = (z - zeta) * prod[(i, j)] - gz[(i, j)] + gw[(i, j)];
                out = out.max(r.norm());
            }
        }
        Ok(out)
    }
}

/// Rows G(z)[rows, :].
pub fn resolvent_entries(cache: &ResolventCache, z: C64, rows: &[usize]) -> Result<CMat> {
    check_z(z)?;
    if let Some(x) = rows.iter().find(|&&x| x >= cache.n()) {
        return Err(Error::Invalid(format!("row index {x} out of range")));
    }
    let all: Vec<usize> = (0..cache.n()).collect();
    Ok(cache.block(z, rows, &all))
}

/// Empirical T_xy(z, zeta). With `exclude_diagonal` false the a = y term is kept.
pub fn empirical_t(
    cache: &ResolventCache,
    profile: &VarianceProfile,
    z: C64,
    zeta: C64,
    x: usize,
    y: usize,
    exclude_diagonal: bool,
) -> Result<C64> {
    Ok(empirical_t_batch(cache, profile, z, zeta, &[(x, y)], exclude_diagonal)?[0])
}

/// Empirical T over a list of index pairs, sharing the resolvent columns.
pub fn empirical_t_batch(
    cache: &ResolventCache,
    profile: &VarianceProfile,
    z: C64,
    zeta: C64,
    pairs: &[(usize, usize)],
    exclude_diagonal: bool,
) -> Result<Vec<C64>> {
    check_z(z)?;
    check_z(zeta)?;
    let n = cache.n();
    if profile.n != n {
        return Err(Error::Invalid("profile and sample dimensions differ".into()));
    }
    if pairs.iter().any(|&(x, y)| x >= n || y >= n) {
        return Err(Error::Invalid("probe index out of range".into()));
    }
    let mut ys: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    ys.sort_unstable();
    ys.dedup();
    let all: Vec<usize> = (0..n).collect();
    let cols = cache.block(z, &all, &ys);
    let rows = cache.block(zeta, &ys, &all);
    Ok(pairs
        .iter()
        .map(|&(x, y)| {
            let j = ys.binary_search(&y).unwrap();
            let s = profile.row(x);
            let mut t: C64 = (0..n).map(|a| cols[(a, j)] * rows[(j, a)] * s[a]).sum();
            if exclude_diagonal {
                t -= cols[(y, j)] * rows[(j, y)] * s[y];
            }
            t
        })
        .collect())
}

/// Deterministic weight matrix A in Tr[A T].
#[derive(Clone, Debug)]
pub enum Weight {
    Diagonal(Vec<C64>),
    /// Row-major n x n.
    Dense(Vec<C64>),
}

impl Weight {
    /// Operator norm induced by the sup norm.
    pub fn norm_inf(&self, n: usize) -> f64 {
        match self {
            Weight::Diagonal(a) => a.iter().fold(0.0, |m, v| m.max(v.norm())),
            Weight::Dense(a) => (0..n).map(|i| a[i * n..(i + 1) * n].iter().map(|v| v.norm()).sum::<f64>()).fold(0.0, f64::max),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        let len = match self {
            Weight::Diagonal(a) => a.len(),
            Weight::Dense(a) => (a.len() as f64).sqrt() as usize,
        };
        if len != n || matches!(self, Weight::Dense(a) if a.len() != n * n) {
            return Err(Error::Invalid("weight matrix has the wrong dimension".into()));
        }
        Ok(())
    }
}

/// Empirical Tr[A T(z, zeta)] = sum_xy A_xy T_yx, from full resolvents.
pub fn empirical_t_trace(
    cache: &ResolventCache,
    profile: &VarianceProfile,
    z: C64,
    zeta: C64,
    a: &Weight,
    exclude_diagonal: bool,
) -> Result<C64> {
    check_z(z)?;
    check_z(zeta)?;
    let n = cache.n();
    a.check(n)?;
    let gz = cache.full(z);
    let gw = cache.full(zeta);
    // P_ax = G_ax(z) G_xa(zeta); T = S P minus the a = x terms.
    let p = CMat::from_fn(n, n, |i, x| gz[(i, x)] * gw[(x, i)]);
    let f = profile.factor();
    let r = f.rank();
    let ut = CMat::from_fn(r, n, |q, i| C64::new(f.u_row(i)[q], 0.0));
    let up = &ut * &p;
    let cu = CMat::from_fn(n, r, |y, q| C64::new((0..r).map(|s| f.u_row(y)[s] * f.c(s, q)).sum(), 0.0));
    let t_entry = |y: usize, x: usize| -> C64 {
        let mut t: C64 = (0..r).map(|q| cu[(y, q)] * up[(q, x)]).sum();
        if exclude_diagonal {
            t -= p[(x, x)] * profile.s(y, x);
        }
        t
    };
    Ok(match a {
        Weight::Diagonal(d) => (0..n).map(|x| d[x] * t_entry(x, x)).sum(),
        Weight::Dense(m) => {
            let mut acc = ZERO;
            for x in 0..n {
                for y in 0..n {
                    let w = m[x * n + y];
                    if w != ZERO {
                        acc += w * t_entry(y, x);
                    }
                }
            }
            acc
        }
    })
}

/// Deterministic limit X^2 (1 - X)^-1, X = S diag(m m~), at a spectral pair.
#[derive(Clone, Debug)]
pub struct TwoPointLimit {
    pub z: C64,
    pub zeta: C64,
    factor: Factor,
    d: Vec<C64>,
    gram: CMat,
    pub operator: Structured,
    /// True when the contour split was used (opposite half-planes).
    pub stabilized: bool,
}

impl TwoPointLimit {
    pub fn new(profile: &VarianceProfile, sol_z: &DysonSolution, sol_zeta: &DysonSolution, opts: &StabilityOptions) -> Result<Self> {
        let (z, zeta) = (sol_z.z, sol_zeta.z);
        if z.im * zeta.im < 0.0 {
            let rep = build_stability_report(profile, sol_z, sol_zeta, opts)?;
            let operator = rep.two_point_operator();
            return Ok(TwoPointLimit { z, zeta, factor: rep.factor, d: rep.d, gram: rep.gram, operator, stabilized: true });
        }
        let factor = profile.factor().clone();
        let d: Vec<C64> = sol_z.m.iter().zip(&sol_zeta.m).map(|(a, b)| a * b).collect();
        let operator = naive_two_point(&factor, &d)?;
        let gram = factor.gram(&d);
        Ok(TwoPointLimit { z, zeta, factor, d, gram, operator, stabilized: false })
    }

    pub fn n(&self) -> usize {
        self.d.len()
    }

    pub fn entry(&self, x: usize, y: usize) -> C64 {
        self.operator.entry(&self.factor, &self.d, x, y)
    }

    pub fn dense(&self) -> Vec<C64> {
        self.operator.dense(&self.factor, &self.d)
    }

    /// Tr[A X^2 (1 - X)^-1] = id Tr A + Tr[core U^T D A U].
    pub fn trace(&self, a: &Weight) -> Result<C64> {
        let n = self.n();
        a.check(n)?;
        let f = &self.factor;
        let r = f.rank();
        let (tr_a, m) = match a {
            Weight::Diagonal(w) => {
                let da: Vec<C64> = self.d.iter().zip(w).map(|(x, y)| x * y).collect();
                (w.iter().sum::<C64>(), f.gram(&da))
            }
            Weight::Dense(w) => {
                let au = CMat::from_fn(n, r, |i, q| (0..n).map(|k| w[i * n + k] * f.u_row(k)[q]).sum());
                let m = CMat::from_fn(r, r, |p, q| (0..n).map(|i| f.u_row(i)[p] * self.d[i] * au[(i, q)]).sum());
                ((0..n).map(|i| w[i * n + i]).sum::<C64>(), m)
            }
        };
        Ok(self.operator.id * tr_a + linalg::trace(&(&self.operator.core * &m)))
    }

    /// Gram matrix U^T diag(m m~) U of the underlying factor.
    pub fn gram(&self) -> &CMat {
        &self.gram
    }
}

/// B^-1 - 1 - X by direct Woodbury inversion; valid when B is well conditioned.
fn naive_two_point(factor: &Factor, d: &[C64]) -> Result<Structured> {
    let c = factor.c_matrix();
    let g = factor.gram(d);
    let r = c.nrows();
    let mut a = linalg::cmat_identity(r);
    a -= &c * &g;
    let (inv, cond) = linalg::inverse_with_condition(&a);
    if !(cond < 1e12) {
        return Err(Error::Conditioning { condition: cond });
    }
    let k = &inv * &c;
    let core = CMat::from_fn(r, r, |i, j| k[(i, j)] - c[(i, j)]);
    Ok(Structured { id: ZERO, core })
}

/// [X^2 (1 - X)^-1]_xy.
pub fn deterministic_t_entry(
    profile: &VarianceProfile,
    sol_z: &DysonSolution,
    sol_zeta: &DysonSolution,
    x: usize,
    y: usize,
) -> Result<C64> {
    Ok(TwoPointLimit::new(profile, sol_z, sol_zeta, &StabilityOptions::default())?.entry(x, y))
}

/// Tr[A X^2 (1 - X)^-1].
pub fn deterministic_t_trace(profile: &VarianceProfile, sol_z: &DysonSolution, sol_zeta: &DysonSolution, a: &Weight) -> Result<C64> {
    TwoPointLimit::new(profile, sol_z, sol_zeta, &StabilityOptions::default())?.trace(a)
}

/// Bound (Psi + Psi~)(Psi Psi~ + 1{eta eta~ < 0} min(Theta, Theta~)) on T_xy errors.
pub fn t_error_bound(sol_z: &DysonSolution, sol_zeta: &DysonSolution, n: usize) -> f64 {
    let (p1, t1) = dyson::control_parameters(sol_z, n);
    let (p2, t2) = dyson::control_parameters(sol_zeta, n);
    let cross = if sol_z.z.im * sol_zeta.z.im < 0.0 { t1.min(t2) } else { 0.0 };
    (p1 + p2) * (p1 * p2 + cross)
}

/// 64 structured pairs (diagonal, near-diagonal, antipodal, corners) plus
/// `n_random` uniform pairs drawn from a stream keyed by (seed, n).
pub fn probe_pairs(n: usize, seed: u64, n_random: usize) -> Vec<(usize, usize)> {
    assert!(n >= 2);
    let spread = |i: usize, top: usize| i * top / 15;
    let mut out = Vec::with_capacity(64 + n_random);
    for i in 0..16 {
        let x = spread(i, n - 1);
        out.push((x, x));
    }
    for i in 0..16 {
        let x = spread(i, n - 2);
        out.push((x, x + 1));
    }
    for i in 0..16 {
        let x = spread(i, n - 1);
        out.push((x, (x + n / 2) % n));
    }
    for i in 0..8 {
        let i = i.min(n - 1);
        out.push((i, n - 1 - i));
        out.push((n - 1 - i, i));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).rotate_left(32) ^ 0x7072_6f62_6573);
    for _ in 0..n_random {
        out.push((rng.random_range(0..n), rng.random_range(0..n)));
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalLawConfig {
    pub profile: ProfileSpec,
    pub law: EntryLaw,
    pub seed: u64,
    pub z: C64,
    pub zeta: C64,
    pub n_values: Vec<usize>,
    pub samples_per_n: usize,
    #[serde(default = "default_random_probes")]
    pub random_probes: usize,
    /// T errors count as within the bound when below n^slack times it.
    #[serde(default = "default_slack")]
    pub bound_slack_exponent: f64,
    #[serde(default)]
    pub solver: SolverOptions,
}

fn default_random_probes() -> usize {
    64
}

fn default_slack() -> f64 {
    0.1
}

impl LocalLawConfig {
    pub fn new(profile: ProfileSpec, law: EntryLaw, seed: u64, z: C64, zeta: C64, n_values: Vec<usize>, samples_per_n: usize) -> Self {
        LocalLawConfig {
            profile,
            law,
            seed,
            z,
            zeta,
            n_values,
            samples_per_n,
            random_probes: default_random_probes(),
            bound_slack_exponent: default_slack(),
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalLawRow {
    pub n: usize,
    /// Sample mean of max_probes |G_xy - delta_xy m_x|.
    pub err_entrywise: f64,
    /// Sample mean of |n^-1 Tr G - <m>|.
    pub err_averaged: f64,
    /// Sample mean of max_probes |T_emp - T_det|.
    pub err_t: f64,
    pub psi: f64,
    pub theta: f64,
    pub t_bound: f64,
    /// Fraction of (sample, probe) pairs with |T_emp - T_det| <= n^slack * t_bound.
    pub t_within_bound: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalLawFits {
    pub entrywise: LinearFit,
    pub averaged: LinearFit,
    pub t: LinearFit,
    pub psi: LinearFit,
    pub theta: LinearFit,
    pub t_bound: LinearFit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalLawReport {
    pub config: LocalLawConfig,
    pub n_values: Vec<usize>,
    pub z: C64,
    pub zeta: C64,
    pub rows: Vec<LocalLawRow>,
    pub fitted_slopes: LocalLawFits,
    pub t_within_bound: f64,
}

impl LocalLawReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["n", "err_entrywise", "err_averaged", "err_T", "psi", "theta"])?;
        for r in &self.rows {
            w.write_record([
                r.n.to_string(),
                format!("{:e}", r.err_entrywise),
                format!("{:e}", r.err_averaged),
                format!("{:e}", r.err_t),
                format!("{:e}", r.psi),
                format!("{:e}", r.theta),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn fit_summary(&self) -> serde_json::Value {
        serde_json::json!({
            "z": [self.z.re, self.z.im],
            "zeta": [self.zeta.re, self.zeta.im],
            "n_values": self.n_values,
            "fitted_slopes": self.fitted_slopes,
            "t_within_bound": self.t_within_bound,
            "rows": self.rows,
        })
    }
}

struct SampleErrors {
    entrywise: f64,
    averaged: f64,
    t: f64,
    within: usize,
}

pub fn local_law_experiment(config: &LocalLawConfig) -> Result<LocalLawReport> {
    if config.samples_per_n < 3 {
        return Err(Error::Invalid(format!("need at least 3 samples per size, got {}", config.samples_per_n)));
    }
    if config.n_values.len() < 4 {
        return Err(Error::Invalid("slope fits need at least four sizes".into()));
    }
    check_z(config.z)?;
    check_z(config.zeta)?;
    let mut rows = Vec::new();
    let mut within_total = 0usize;
    let mut probes_total = 0usize;
    for &n in &config.n_values {
        let profile = config.profile.build(n)?;
        let spec = EnsembleSpec::new(profile, config.law, config.seed ^ ((n as u64) << 40))?;
        let p = &*spec.profile;
        let sol_z = dyson::solve_vde(p, config.z, None, &config.solver)?;
        let sol_w = dyson::solve_vde(p, config.zeta, None, &config.solver)?;
        let limit = TwoPointLimit::new(p, &sol_z, &sol_w, &StabilityOptions::default())?;
        let probes = probe_pairs(n, config.seed, config.random_probes);
        let t_det: Vec<C64> = probes.iter().map(|&(x, y)| limit.entry(x, y)).collect();
        let (psi, theta) = dyson::control_parameters(&sol_z, n);
        let t_bound = t_error_bound(&sol_z, &sol_w, n);
        let cut = (n as f64).powf(config.bound_slack_exponent) * t_bound;
        let mean_m = sol_z.mean();
        let per_sample: Vec<SampleErrors> = (0..config.samples_per_n as u64)
            .into_par_iter()
            .map(|i| -> Result<SampleErrors> {
                let cache = ResolventCache::from_sample(&spec, i)?;
                let entrywise = probes
                    .iter()
                    .map(|&(x, y)| {
                        let g = cache.entry(config.z, x, y);
                        if x == y {
                            (g - sol_z.m[x]).norm()
                        } else {
                            g.norm()
                        }
                    })
                    .fold(0.0, f64::max);
                let averaged = (cache.normalized_trace(config.z) - mean_m).norm();
                let t_emp = empirical_t_batch(&cache, p, config.z, config.zeta, &probes, true)?;
                let errs: Vec<f64> = t_emp.iter().zip(&t_det).map(|(a, b)| (a - b).norm()).collect();
                Ok(SampleErrors {
                    entrywise,
                    averaged,
                    t: errs.iter().cloned().fold(0.0, f64::max),
                    within: errs.iter().filter(|e| **e <= cut).count(),
                })
            })
            .collect::<Result<_>>()?;
        let k = per_sample.len() as f64;
        let within: usize = per_sample.iter().map(|s| s.within).sum();
        within_total += within;
        probes_total += per_sample.len() * probes.len();
        rows.push(LocalLawRow {
            n,
            err_entrywise: per_sample.iter().map(|s| s.entrywise).sum::<f64>() / k,
            err_averaged: per_sample.iter().map(|s| s.averaged).sum::<f64>() / k,
            err_t: per_sample.iter().map(|s| s.t).sum::<f64>() / k,
            psi,
            theta,
            t_bound,
            t_within_bound: within as f64 / (per_sample.len() * probes.len()) as f64,
        });
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let fit = |f: fn(&LocalLawRow) -> f64| stats::loglog_fit(&ns, &rows.iter().map(f).collect::<Vec<_>>());
    let fitted_slopes = LocalLawFits {
        entrywise: fit(|r| r.err_entrywise)?,
        averaged: fit(|r| r.err_averaged)?,
        t: fit(|r| r.err_t)?,
        psi: fit(|r| r.psi)?,
        theta: fit(|r| r.theta)?,
        t_bound: fit(|r| r.t_bound)?,
    };
    Ok(LocalLawReport {
        config: config.clone(),
        n_values: config.n_values.clone(),
        z: config.z,
        zeta: config.zeta,
        rows,
        fitted_slopes,
        t_within_bound: within_total as f64 / probes_total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::Family;

    fn spec(kind: ProfileSpec, n: usize, beta: u8, seed: u64) -> EnsembleSpec {
        EnsembleSpec::new(kind.build(n).unwrap(), EntryLaw::new(Family::Gaussian, beta).unwrap(), seed).unwrap()
    }

    fn solve(p: &VarianceProfile, z: C64) -> DysonSolution {
        dyson::solve_vde(p, z, None, &SolverOptions::default()).unwrap()
    }

    #[test]
    fn real_cache_reconstructs_larger_matrices() {
        let s = spec(ProfileSpec::constant(), 300, 1, 8);
        let h = sample_matrix(&s, 0);
        let c = ResolventCache::new(&h).unwrap();
        assert!(c.reconstruction_error(&h) < 1e-12);
        assert!(c.ward_residual(C64::new(0.1, 0.02), &[0, 150, 299]).unwrap() < 1e-9);
    }

    #[test]
    fn reconstruction_and_identities() {
        for beta in [1u8, 2] {
            let s = spec(ProfileSpec::smooth_kernel(), 96, beta, 5);
            let h = sample_matrix(&s, 0);
            let c = ResolventCache::new(&h).unwrap();
            assert!(c.reconstruction_error(&h) <= 1e-10 * h.max_abs() * 96.0);
            let z = C64::new(0.2, 0.05);
            assert!(c.ward_residual(z, &[0, 17, 95]).unwrap() < 1e-9);
            let r = c.resolvent_identity_residual(z, C64::new(-0.4, 0.3), &[1, 2, 3, 4], &[5, 6, 7, 8]).unwrap();
            assert!(r < 1e-9);
            let g = c.block(z, &[3, 9], &[4, 9]);
            let gc = c.block(z.conj(), &[4, 9], &[3, 9]);
            for i in 0..2 {
                for j in 0..2 {
                    assert!((g[(i, j)] - gc[(j, i)].conj()).norm() < 1e-12);
                }
            }
            let d = c.diagonal(z);
            assert!((d[9] - g[(1, 1)]).norm() < 1e-12);
            assert!((c.entry(z, 3, 4) - g[(0, 0)]).norm() < 1e-12);
        }
    }

    #[test]
    fn empirical_t_symmetries() {
        let s = spec(ProfileSpec::smooth_kernel(), 64, 2, 9);
        let c = ResolventCache::from_sample(&s, 1).unwrap();
        let p = &*s.profile;
        let (z, w) = (C64::new(0.1, 0.2), C64::new(-0.3, -0.1));
        let t = empirical_t(&c, p, z, w, 3, 7, true).unwrap();
        let full = empirical_t(&c, p, z, w, 3, 7, false).unwrap();
        let gz = c.entry(z, 7, 7);
        let gw = c.entry(w, 7, 7);
        assert!((full - t - p.s(3, 7) * gz * gw).norm() < 1e-12);
        let batch = empirical_t_batch(&c, p, z, w, &[(3, 7), (5, 7), (3, 0)], true).unwrap();
        assert!((batch[0] - t).norm() < 1e-14);
        let diag: Vec<C64> = (0..64).map(|x| C64::new((x % 5) as f64, 0.0)).collect();
        let tr = empirical_t_trace(&c, p, z, w, &Weight::Diagonal(diag.clone()), true).unwrap();
        let direct: C64 = (0..64).map(|x| diag[x] * empirical_t(&c, p, z, w, x, x, true).unwrap()).sum();
        assert!((tr - direct).norm() < 1e-10 * direct.norm().max(1.0));
        let mut dense = vec![ZERO; 64 * 64];
        for x in 0..64 {
            dense[x * 64 + x] = diag[x];
        }
        dense[2 * 64 + 5] = C64::new(0.5, -1.0);
        let trd = empirical_t_trace(&c, p, z, w, &Weight::Dense(dense), true).unwrap();
        let extra = C64::new(0.5, -1.0) * empirical_t(&c, p, z, w, 5, 2, true).unwrap();
        assert!((trd - tr - extra).norm() < 1e-10);
    }

    #[test]
    fn conjugated_inputs_conjugate_t() {
        let s = spec(ProfileSpec::constant(), 48, 1, 3);
        let c = ResolventCache::from_sample(&s, 0).unwrap();
        let p = &*s.profile;
        let (z, w) = (C64::new(0.1, 0.2), C64::new(-0.3, -0.1));
        let a = empirical_t(&c, p, z, w, 4, 11, true).unwrap();
        let b = empirical_t(&c, p, z.conj(), w.conj(), 4, 11, true).unwrap();
        assert!((a - b.conj()).norm() < 1e-13);
    }

    #[test]
    fn wigner_limit_at_i() {
        let n = 40;
        let p = ProfileSpec::constant().build(n).unwrap();
        let z = C64::new(0.0, 1.0);
        let sol = solve(&p, z);
        let m2 = -(3.0 - 5f64.sqrt()) / 2.0;
        let expect = m2 * m2 / (1.0 - m2) / n as f64;
        let lim = TwoPointLimit::new(&p, &sol, &sol, &StabilityOptions::default()).unwrap();
        assert!(!lim.stabilized);
        assert!((lim.entry(3, 8) - expect).norm() < 1e-12);
        assert!((lim.entry(8, 3) - lim.entry(3, 8)).norm() < 1e-15);
        let id = Weight::Diagonal(vec![C64::new(1.0, 0.0); n]);
        assert!((lim.trace(&id).unwrap() - expect * n as f64).norm() < 1e-12);
        assert!((expect * n as f64 - 0.10557).abs() < 1e-5);
        assert_eq!(lim.trace(&Weight::Diagonal(vec![ZERO; n])).unwrap(), ZERO);
    }

    #[test]
    fn wigner_limit_conjugate_pair() {
        let n = 32;
        let p = ProfileSpec::constant().build(n).unwrap();
        let z = C64::new(0.3, 0.05);
        let sol = solve(&p, z);
        let m = sol.m[0];
        let expect = (m.im / z.im - m.norm_sqr()) / n as f64;
        let lim = TwoPointLimit::new(&p, &sol, &sol.conj(), &StabilityOptions::default()).unwrap();
        assert!(lim.stabilized);
        for (x, y) in [(0, 0), (2, 9), (31, 4)] {
            assert!((lim.entry(x, y) - expect).norm() < 1e-9 * expect.abs());
        }
    }

    #[test]
    fn same_half_plane_paths_agree_with_dense_inverse() {
        let n = 40;
        let p = ProfileSpec::smooth_kernel().build(n).unwrap();
        let a = solve(&p, C64::new(0.2, 0.3));
        let b = solve(&p, C64::new(-0.5, 0.1));
        let lim = TwoPointLimit::new(&p, &a, &b, &StabilityOptions::default()).unwrap();
        let d: Vec<C64> = a.m.iter().zip(&b.m).map(|(x, y)| x * y).collect();
        let x = CMat::from_fn(n, n, |i, j| d[j] * p.s(i, j));
        let mut bm = linalg::cmat_identity(n);
        bm -= &x;
        let (inv, _) = linalg::inverse_with_condition(&bm);
        let t = &(&x * &x) * &inv;
        let dense = lim.dense();
        for i in 0..n {
            for j in 0..n {
                assert!((dense[i * n + j] - t[(i, j)]).norm() < 1e-8);
            }
        }
        let w: Vec<C64> = (0..n * n).map(|k| C64::new(((k * 31) % 7) as f64 - 3.0, (k % 3) as f64)).collect();
        let wm = CMat::from_fn(n, n, |i, j| w[i * n + j]);
        let direct = linalg::trace(&(&wm * &t));
        assert!((lim.trace(&Weight::Dense(w)).unwrap() - direct).norm() < 1e-8 * direct.norm().max(1.0));
    }

    #[test]
    fn probe_set_shape() {
        let p = probe_pairs(100, 4, 64);
        assert_eq!(p.len(), 128);
        assert!(p.iter().all(|&(x, y)| x < 100 && y < 100));
        assert_eq!(p, probe_pairs(100, 4, 64));
        assert!(p[..16].iter().all(|(x, y)| x == y));
    }

    #[test]
    fn experiment_rejects_few_samples() {
        let cfg = LocalLawConfig::new(
            ProfileSpec::constant(),
            EntryLaw::new(Family::Gaussian, 1).unwrap(),
            1,
            C64::new(0.3, 0.1),
            C64::new(0.3, -0.1),
            vec![16, 32, 64, 128],
            2,
        );
        assert!(local_law_experiment(&cfg).is_err());
    }

    #[test]
    fn small_experiment_runs() {
        let cfg = LocalLawConfig::new(
            ProfileSpec::constant(),
            EntryLaw::new(Family::Gaussian, 1).unwrap(),
            1,
            C64::new(0.3, 0.1),
            C64::new(0.3, -0.1),
            vec![32, 64, 128, 256],
            3,
        );
        let r = local_law_experiment(&cfg).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(r.rows.iter().all(|x| x.err_entrywise >= 0.0 && x.err_t >= 0.0));
        assert!(r.fitted_slopes.theta.slope + 1.0 < 1e-9);
        assert!(r.fitted_slopes.averaged.slope < -0.5);
    }
}
