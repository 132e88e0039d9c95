//! Variance profiles, entry laws and reproducible sampling of Wigner-type
//! matrices.

use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Range};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileKind {
    Constant,
    SmoothKernel,
    Block,
}

impl std::fmt::Display for ProfileKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ProfileKind::Constant => "constant",
            ProfileKind::SmoothKernel => "smooth-kernel",
            ProfileKind::Block => "block",
        };
        f.write_str(s)
    }
}

/// One harmonic of a smooth kernel:
/// `sum * cos(pi k (x + y)) + diff * cos(pi k (x - y))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineTerm {
    pub freq: u32,
    #[serde(default)]
    pub sum: f64,
    #[serde(default)]
    pub diff: f64,
}

/// Parameters of a profile. Fields irrelevant to a kind are ignored.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileParams {
    /// Constant kind: s_jk = value / n.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// Smooth kernel: phi(x, y) = base + sum of cosine terms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<Vec<CosineTerm>>,
    /// Block kind: p x p symmetric matrix of n * s values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<Vec<f64>>>,
    /// Block sizes; equal sizes when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,
    /// Declared Hölder constant, checked against the profile when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holder_l: Option<f64>,
    /// Intervals on which the profile is declared regular; stored, not used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<Vec<f64>>,
}

/// Kind and parameters of a profile family, independent of n.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSpec {
    pub kind: ProfileKind,
    #[serde(default)]
    pub params: ProfileParams,
}

impl ProfileSpec {
    pub fn constant() -> Self {
        ProfileSpec { kind: ProfileKind::Constant, params: ProfileParams::default() }
    }

    /// phi(x, y) = 1 + cos(pi (x + y)) / 2.
    pub fn smooth_kernel() -> Self {
        ProfileSpec { kind: ProfileKind::SmoothKernel, params: ProfileParams::default() }
    }

    pub fn block(blocks: Vec<Vec<f64>>) -> Self {
        ProfileSpec { kind: ProfileKind::Block, params: ProfileParams { blocks: Some(blocks), ..Default::default() } }
    }

    pub fn build(&self, n: usize) -> Result<VarianceProfile> {
        build_variance_profile(self.kind, n, &self.params)
    }
}

/// S = U C U^T with U stored row-major (n x r) and C (r x r) symmetric.
#[derive(Clone, Debug)]
pub struct Factor {
    n: usize,
    r: usize,
    u: Vec<f64>,
    c: Vec<f64>,
}

impl Factor {
    pub fn new(n: usize, r: usize, u: Vec<f64>, c: Vec<f64>) -> Self {
        assert_eq!(u.len(), n * r);
        assert_eq!(c.len(), r * r);
        Factor { n, r, u, c }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.r
    }

    #[inline]
    pub fn u_row(&self, j: usize) -> &[f64] {
        &self.u[j * self.r..(j + 1) * self.r]
    }

    #[inline]
    pub fn c(&self, a: usize, b: usize) -> f64 {
        self.c[a * self.r + b]
    }

    pub fn c_matrix(&self) -> linalg::CMat {
        faer::Mat::from_fn(self.r, self.r, |a, b| C64::new(self.c(a, b), 0.0))
    }

    pub fn entry(&self, j: usize, k: usize) -> f64 {
        let (uj, uk) = (self.u_row(j), self.u_row(k));
        let mut s = 0.0;
        for a in 0..self.r {
            let mut t = 0.0;
            for b in 0..self.r {
                t += self.c(a, b) * uk[b];
            }
            s += uj[a] * t;
        }
        s
    }

    /// U^T v.
    pub fn project(&self, v: &[C64]) -> Vec<C64> {
        let r = self.r;
        let mut out = vec![C64::new(0.0, 0.0); r];
        for (j, vj) in v.iter().enumerate() {
            let row = self.u_row(j);
            for a in 0..r {
                out[a] += *vj * row[a];
            }
        }
        out
    }

    /// U a.
    pub fn lift(&self, a: &[C64]) -> Vec<C64> {
        (0..self.n)
            .map(|j| {
                let row = self.u_row(j);
                let mut s = C64::new(0.0, 0.0);
                for (x, y) in row.iter().zip(a) {
                    s += *y * *x;
                }
                s
            })
            .collect()
    }

    /// C a for a length-r vector.
    pub fn apply_c(&self, a: &[C64]) -> Vec<C64> {
        (0..self.r).map(|i| (0..self.r).map(|k| a[k] * self.c(i, k)).sum()).collect()
    }

    /// S v.
    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        self.lift(&self.apply_c(&self.project(v)))
    }

    pub fn apply_real(&self, v: &[f64]) -> Vec<f64> {
        let r = self.r;
        let mut p = vec![0.0; r];
        for (j, vj) in v.iter().enumerate() {
            let row = self.u_row(j);
            for a in 0..r {
                p[a] += vj * row[a];
            }
        }
        let q: Vec<f64> = (0..r).map(|i| (0..r).map(|k| self.c(i, k) * p[k]).sum()).collect();
        (0..self.n).map(|j| self.u_row(j).iter().zip(&q).map(|(x, y)| x * y).sum()).collect()
    }

    /// U^T diag(d) U.
    pub fn gram(&self, d: &[C64]) -> linalg::CMat {
        let r = self.r;
        let mut g = linalg::cmat_zeros(r, r);
        for (j, dj) in d.iter().enumerate() {
            let row = self.u_row(j);
            for a in 0..r {
                let t = *dj * row[a];
                for b in a..r {
                    g[(a, b)] += t * row[b];
                }
            }
        }
        for a in 0..r {
            for b in 0..a {
                g[(a, b)] = g[(b, a)];
            }
        }
        g
    }

    pub fn gram_real(&self, d: &[f64]) -> faer::Mat<f64> {
        let r = self.r;
        let mut g = faer::Mat::<f64>::zeros(r, r);
        for (j, dj) in d.iter().enumerate() {
            let row = self.u_row(j);
            for a in 0..r {
                let t = dj * row[a];
                for b in a..r {
                    g[(a, b)] += t * row[b];
                }
            }
        }
        for a in 0..r {
            for b in 0..a {
                g[(a, b)] = g[(b, a)];
            }
        }
        g
    }

    /// Factor of the Hadamard square S o S, of rank r^2.
    pub fn hadamard_square(&self) -> Factor {
        let r = self.r;
        let r2 = r * r;
        let mut u = vec![0.0; self.n * r2];
        for j in 0..self.n {
            let row = self.u_row(j);
            for a in 0..r {
                for c in 0..r {
                    u[j * r2 + a * r + c] = row[a] * row[c];
                }
            }
        }
        let mut cc = vec![0.0; r2 * r2];
        for a in 0..r {
            for c in 0..r {
                for b in 0..r {
                    for d in 0..r {
                        cc[(a * r + c) * r2 + b * r + d] = self.c(a, b) * self.c(c, d);
                    }
                }
            }
        }
        Factor::new(self.n, r2, u, cc)
    }
}

/// Matrix of entry variances S together with its flatness data.
#[derive(Clone, Debug)]
pub struct VarianceProfile {
    pub kind: ProfileKind,
    pub n: usize,
    pub params: ProfileParams,
    pub c_inf: f64,
    pub c_sup: f64,
    pub holder_l: f64,
    s: Vec<f64>,
    factor: Factor,
}

/// On-disk form of a profile.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfileDocument {
    pub kind: ProfileKind,
    pub n: usize,
    #[serde(default)]
    pub params: ProfileParams,
    #[serde(default)]
    pub c_inf: Option<f64>,
    #[serde(default)]
    pub c_sup: Option<f64>,
    #[serde(default, rename = "holder_L")]
    pub holder_l: Option<f64>,
}

impl VarianceProfile {
    pub fn s(&self, j: usize, k: usize) -> f64 {
        self.s[j * self.n + k]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.s[j * self.n..(j + 1) * self.n]
    }

    pub fn dense(&self) -> &[f64] {
        &self.s
    }

    pub fn factor(&self) -> &Factor {
        &self.factor
    }

    pub fn spec(&self) -> ProfileSpec {
        ProfileSpec { kind: self.kind, params: self.params.clone() }
    }

    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        self.factor.apply(v)
    }

    /// Mean row sum of S.
    pub fn mean_row_sum(&self) -> f64 {
        self.s.iter().sum::<f64>() / self.n as f64
    }

    pub fn to_document(&self) -> ProfileDocument {
        ProfileDocument {
            kind: self.kind,
            n: self.n,
            params: self.params.clone(),
            c_inf: Some(self.c_inf),
            c_sup: Some(self.c_sup),
            holder_l: Some(self.holder_l),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    /// Rebuilds a profile from its document; declared flatness constants must
    /// bracket the achieved ones.
    pub fn from_document(doc: &ProfileDocument) -> Result<Self> {
        let mut params = doc.params.clone();
        if params.holder_l.is_none() && doc.kind == ProfileKind::SmoothKernel {
            params.holder_l = doc.holder_l;
        }
        let p = build_variance_profile(doc.kind, doc.n, &params)?;
        if let Some(ci) = doc.c_inf {
            if ci <= 0.0 || p.c_inf < ci * (1.0 - 1e-12) {
                return Err(Error::Invalid(format!("declared c_inf {ci} exceeds achieved minimum {}", p.c_inf)));
            }
        }
        if let Some(cs) = doc.c_sup {
            if p.c_sup > cs * (1.0 + 1e-12) {
                return Err(Error::Invalid(format!("declared c_sup {cs} below achieved maximum {}", p.c_sup)));
            }
        }
        Ok(p)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ProfileDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }
}

fn smooth_terms(params: &ProfileParams) -> (f64, Vec<CosineTerm>) {
    let base = params.base.unwrap_or(1.0);
    let terms = params.terms.clone().unwrap_or_else(|| vec![CosineTerm { freq: 1, sum: 0.5, diff: 0.0 }]);
    (base, terms)
}

pub fn build_variance_profile(kind: ProfileKind, n: usize, params: &ProfileParams) -> Result<VarianceProfile> {
    if n < 2 {
        return Err(Error::Invalid(format!("profile dimension must be at least 2, got {n}")));
    }
    let nf = n as f64;
    let factor = match kind {
        ProfileKind::Constant => {
            let v = params.value.unwrap_or(1.0);
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("constant profile value must be positive, got {v}")));
            }
            Factor::new(n, 1, vec![1.0; n], vec![v / nf])
        }
        ProfileKind::SmoothKernel => {
            let (base, terms) = smooth_terms(params);
            let mut freqs: Vec<u32> = terms.iter().map(|t| t.freq).collect();
            freqs.sort_unstable();
            freqs.dedup();
            if freqs.contains(&0) {
                return Err(Error::Invalid("cosine term frequencies must be positive".into()));
            }
            let r = 1 + 2 * freqs.len();
            let mut u = vec![0.0; n * r];
            let mut c = vec![0.0; r * r];
            c[0] = base / nf;
            for j in 0..n {
                let x = (j + 1) as f64 / nf;
                u[j * r] = 1.0;
                for (q, &k) in freqs.iter().enumerate() {
                    let w = std::f64::consts::PI * k as f64 * x;
                    u[j * r + 1 + 2 * q] = w.cos();
                    u[j * r + 2 + 2 * q] = w.sin();
                }
            }
            for t in &terms {
                let q = freqs.iter().position(|&k| k == t.freq).unwrap();
                let (ic, is) = (1 + 2 * q, 2 + 2 * q);
                c[ic * r + ic] += (t.sum + t.diff) / nf;
                c[is * r + is] += (t.diff - t.sum) / nf;
            }
            Factor::new(n, r, u, c)
        }
        ProfileKind::Block => {
            let blocks = params.blocks.as_ref().ok_or_else(|| Error::Invalid("block profile requires a `blocks` matrix".into()))?;
            let p = blocks.len();
            if p == 0 || blocks.iter().any(|row| row.len() != p) {
                return Err(Error::Invalid("block matrix must be square and nonempty".into()));
            }
            for a in 0..p {
                for b in 0..p {
                    if blocks[a][b] != blocks[b][a] {
                        return Err(Error::Invalid(format!("block matrix is not symmetric at ({a}, {b})")));
                    }
                    if !(blocks[a][b] > 0.0 && blocks[a][b].is_finite()) {
                        return Err(Error::Invalid(format!("block matrix entry ({a}, {b}) must be positive")));
                    }
                }
            }
            let sizes = match &params.sizes {
                Some(s) => s.clone(),
                None => {
                    if n % p != 0 {
                        return Err(Error::Invalid(format!("block sizes must partition n: {p} equal blocks do not divide n = {n}")));
                    }
                    vec![n / p; p]
                }
            };
            if sizes.len() != p || sizes.iter().sum::<usize>() != n || sizes.contains(&0) {
                return Err(Error::Invalid(format!("block sizes {sizes:?} must partition n = {n}")));
            }
            let mut u = vec![0.0; n * p];
            let mut j = 0;
            for (a, &len) in sizes.iter().enumerate() {
                for _ in 0..len {
                    u[j * p + a] = 1.0;
                    j += 1;
                }
            }
            let mut c = vec![0.0; p * p];
            for a in 0..p {
                for b in 0..p {
                    c[a * p + b] = blocks[a][b] / nf;
                }
            }
            Factor::new(n, p, u, c)
        }
    };

    let mut s = vec![0.0; n * n];
    for j in 0..n {
        for k in j..n {
            let v = factor.entry(j, k);
            s[j * n + k] = v;
            s[k * n + j] = v;
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &s {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(lo > 0.0) {
        return Err(Error::Invalid(format!("profile has nonpositive entries (min n*s = {})", lo * nf)));
    }
    let holder = empirical_holder(&s, n);
    if let Some(declared) = params.holder_l {
        if kind == ProfileKind::SmoothKernel && holder > declared * (1.0 + 1e-9) {
            return Err(Error::Invalid(format!("empirical Hölder constant {holder} exceeds declared {declared}")));
        }
    }
    Ok(VarianceProfile { kind, n, params: params.clone(), c_inf: lo * nf, c_sup: hi * nf, holder_l: holder, s, factor })
}

/// Largest n |s_jk - s_j'k'| / ((|j-j'| + |k-k'|)/n)^(1/2) over dyadic offsets
/// and a grid of base points.
fn empirical_holder(s: &[f64], n: usize) -> f64 {
    let nf = n as f64;
    let stride = n.div_ceil(128).max(1);
    let mut best = 0.0f64;
    let mut d = 1;
    while d < n {
        let dist = (d as f64 / nf).sqrt();
        let dist2 = (2.0 * d as f64 / nf).sqrt();
        for j in (0..n - d).step_by(stride) {
            for k in (0..n - d).step_by(stride) {
                let v = s[j * n + k];
                best = best.max(nf * (s[(j + d) * n + k] - v).abs() / dist);
                best = best.max(nf * (s[j * n + k + d] - v).abs() / dist);
                best = best.max(nf * (s[(j + d) * n + k + d] - v).abs() / dist2);
            }
        }
        d *= 2;
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Rademacher,
    Uniform,
}

impl Family {
    /// Fourth cumulant of the unit-variance law.
    pub fn kappa4(self) -> f64 {
        match self {
            Family::Gaussian => 0.0,
            Family::Rademacher => -2.0,
            Family::Uniform => -1.2,
        }
    }

    #[inline]
    fn draw<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            Family::Gaussian => rng.sample(StandardNormal),
            Family::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            Family::Uniform => (2.0 * rng.random::<f64>() - 1.0) * 3f64.sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryLaw {
    pub family: Family,
    pub beta: u8,
}

impl EntryLaw {
    pub fn new(family: Family, beta: u8) -> Result<Self> {
        let law = EntryLaw { family, beta };
        law.validate()?;
        Ok(law)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta != 1 && self.beta != 2 {
            return Err(Error::Invalid(format!("beta must be 1 or 2, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    pub profile: Arc<VarianceProfile>,
    pub law: EntryLaw,
    pub base_seed: u64,
}

impl EnsembleSpec {
    pub fn new(profile: VarianceProfile, law: EntryLaw, base_seed: u64) -> Result<Self> {
        law.validate()?;
        Ok(EnsembleSpec { profile: Arc::new(profile), law, base_seed })
    }

    pub fn n(&self) -> usize {
        self.profile.n
    }
}

/// Dense Hermitian matrix in column-major storage.
#[derive(Clone, Debug, PartialEq)]
pub enum HermitianMatrix {
    Real { n: usize, data: Vec<f64> },
    Complex { n: usize, data: Vec<C64> },
}

impl HermitianMatrix {
    pub fn n(&self) -> usize {
        match self {
            HermitianMatrix::Real { n, .. } | HermitianMatrix::Complex { n, .. } => *n,
        }
    }

    pub fn beta(&self) -> u8 {
        match self {
            HermitianMatrix::Real { .. } => 1,
            HermitianMatrix::Complex { .. } => 2,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        match self {
            HermitianMatrix::Real { n, data } => C64::new(data[i + j * n], 0.0),
            HermitianMatrix::Complex { n, data } => data[i + j * n],
        }
    }

    /// Largest entry modulus of H - H^*.
    pub fn hermiticity_defect(&self) -> f64 {
        let n = self.n();
        let mut out = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                out = out.max((self.get(i, j) - self.get(j, i).conj()).norm());
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        match self {
            HermitianMatrix::Real { data, .. } => data.iter().fold(0.0, |a, b| a.max(b.abs())),
            HermitianMatrix::Complex { data, .. } => data.iter().fold(0.0, |a, b| a.max(b.norm())),
        }
    }

    /// Eigenvalues in ascending order, optionally restricted to (lo, hi].
    pub fn eigenvalues(&self, range: Range) -> Result<Vec<f64>> {
        match self {
            HermitianMatrix::Real { n, data } => {
                let mut a = data.clone();
                Ok(linalg::syevr(*n, &mut a, range, false)?.0)
            }
            HermitianMatrix::Complex { n, data } => {
                let mut a = data.clone();
                Ok(linalg::heevr(*n, &mut a, range, false)?.0)
            }
        }
    }

    const MAGIC: [u8; 4] = *b"MRMT";

    /// Binary dump: 16-byte header (magic, u64 n, u32 beta) followed by the
    /// row-major entries as little-endian f64 (interleaved re/im for beta 2).
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.n();
        w.write_all(&Self::MAGIC)?;
        w.write_all(&(n as u64).to_le_bytes())?;
        w.write_all(&(self.beta() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(n * n * 8 * self.beta() as usize);
        for i in 0..n {
            for j in 0..n {
                let v = self.get(i, j);
                buf.extend_from_slice(&v.re.to_le_bytes());
                if self.beta() == 2 {
                    buf.extend_from_slice(&v.im.to_le_bytes());
                }
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head)?;
        if head[..4] != Self::MAGIC {
            return Err(Error::Invalid("matrix dump has a bad magic number".into()));
        }
        let n = u64::from_le_bytes(head[4..12].try_into().unwrap()) as usize;
        let beta = u32::from_le_bytes(head[12..16].try_into().unwrap());
        let width = match beta {
            1 => 1,
            2 => 2,
            b => return Err(Error::Invalid(format!("matrix dump has beta = {b}"))),
        };
        let mut body = vec![0u8; n * n * 8 * width];
        r.read_exact(&mut body)?;
        let f = |k: usize| f64::from_le_bytes(body[8 * k..8 * k + 8].try_into().unwrap());
        Ok(if width == 1 {
            let mut data = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    data[i + j * n] = f(i * n + j);
                }
            }
            HermitianMatrix::Real { n, data }
        } else {
            let mut data = vec![C64::new(0.0, 0.0); n * n];
            for i in 0..n {
                for j in 0..n {
                    let k = 2 * (i * n + j);
                    data[i + j * n] = C64::new(f(k), f(k + 1));
                }
            }
            HermitianMatrix::Complex { n, data }
        })
    }
}

fn row_rng(base_seed: u64, index: u64, row: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&base_seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(&row.to_le_bytes());
    key[24..32].copy_from_slice(b"meso-rmt");
    ChaCha8Rng::from_seed(key)
}

/// Draws sample `index` of the ensemble. Row j of the upper triangle is driven
/// by its own keyed stream, so samples (and rows) are order independent.
pub fn sample_matrix(spec: &EnsembleSpec, index: u64) -> HermitianMatrix {
    let p = &spec.profile;
    let n = p.n;
    let fam = spec.law.family;
    match spec.law.beta {
        1 => {
            let mut data = vec![0.0; n * n];
            for j in 0..n {
                let mut rng = row_rng(spec.base_seed, index, j as u64);
                let srow = p.row(j);
                for k in j..n {
                    let h = srow[k].sqrt() * fam.draw(&mut rng);
                    data[j + k * n] = h;
                    data[k + j * n] = h;
                }
            }
            HermitianMatrix::Real { n, data }
        }
        _ => {
            let mut data = vec![C64::new(0.0, 0.0); n * n];
            let half = std::f64::consts::FRAC_1_SQRT_2;
            for j in 0..n {
                let mut rng = row_rng(spec.base_seed, index, j as u64);
                let srow = p.row(j);
                data[j + j * n] = C64::new(srow[j].sqrt() * fam.draw(&mut rng), 0.0);
                for k in j + 1..n {
                    let sd = srow[k].sqrt() * half;
                    let re = fam.draw(&mut rng);
                    let im = fam.draw(&mut rng);
                    let h = C64::new(sd * re, sd * im);
                    data[j + k * n] = h;
                    data[k + j * n] = h.conj();
                }
            }
            HermitianMatrix::Complex { n, data }
        }
    }
}

/// Fourth cumulants of the entries: kappa4 s^2 for real entries, and the sum of
/// the real- and imaginary-part cumulants (kappa4 s^2 / 2) off the diagonal of
/// complex ones.
pub fn fourth_cumulant_matrix(spec: &EnsembleSpec) -> Vec<f64> {
    let p = &spec.profile;
    let n = p.n;
    let k4 = spec.law.family.kappa4();
    let mut out = vec![0.0; n * n];
    for j in 0..n {
        for k in 0..n {
            let s = p.s(j, k);
            let off = if spec.law.beta == 2 && j != k { 0.5 } else { 1.0 };
            out[j * n + k] = k4 * off * s * s;
        }
    }
    out
}

/// Structured form of the cumulant matrix used by the kernels:
/// C4 = scale * (S o S) + diag(diag).
#[derive(Clone, Debug)]
pub struct Cumulant4 {
    pub scale: f64,
    pub square: Option<Factor>,
    pub diag: Vec<f64>,
}

impl Cumulant4 {
    pub fn zero(n: usize) -> Self {
        Cumulant4 { scale: 0.0, square: None, diag: vec![0.0; n] }
    }

    pub fn from_spec(spec: &EnsembleSpec) -> Self {
        let p = &spec.profile;
        let k4 = spec.law.family.kappa4();
        if k4 == 0.0 {
            return Cumulant4::zero(p.n);
        }
        let (scale, dfac) = if spec.law.beta == 2 { (0.5 * k4, 0.5 * k4) } else { (k4, 0.0) };
        let diag = (0..p.n).map(|j| dfac * p.s(j, j).powi(2)).collect();
        Cumulant4 { scale, square: Some(p.factor().hadamard_square()), diag }
    }

    pub fn is_zero(&self) -> bool {
        self.scale == 0.0 && self.diag.iter().all(|&d| d == 0.0)
    }

    /// x^T C4 y.
    pub fn bilinear(&self, x: &[C64], y: &[C64]) -> C64 {
        let mut out: C64 = self.diag.iter().zip(x.iter().zip(y)).map(|(d, (a, b))| *a * *b * *d).sum();
        if let Some(f) = &self.square {
            let px = f.project(x);
            let py = f.project(y);
            let cy = f.apply_c(&py);
            let t: C64 = px.iter().zip(&cy).map(|(a, b)| a * b).sum();
            out += t * self.scale;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_profile_entries() {
        let p = ProfileSpec::constant().build(4).unwrap();
        for j in 0..4 {
            for k in 0..4 {
                assert_eq!(p.s(j, k), 0.25);
            }
        }
        assert_eq!(p.c_inf, 1.0);
        assert_eq!(p.c_sup, 1.0);
    }

    #[test]
    fn smooth_kernel_extrema() {
        let p = ProfileSpec::smooth_kernel().build(1000).unwrap();
        assert!((p.c_inf - 0.5).abs() < 1e-12, "{}", p.c_inf);
        assert!((p.c_sup - 1.5).abs() < 1e-12, "{}", p.c_sup);
        let x = 0.3;
        let y = 0.55;
        let j = (x * 1000.0) as usize - 1;
        let k = (y * 1000.0) as usize - 1;
        let phi = 1.0 + 0.5 * (std::f64::consts::PI * (x + y)).cos();
        assert!((p.s(j, k) * 1000.0 - phi).abs() < 1e-12);
    }

    #[test]
    fn block_rejects_bad_partition() {
        let spec = ProfileSpec::block(vec![vec![1.0, 2.0], vec![2.0, 3.0]]);
        assert!(matches!(spec.build(7), Err(Error::Invalid(_))));
        assert!(spec.build(8).is_ok());
        let asym = ProfileSpec::block(vec![vec![1.0, 2.0], vec![1.5, 3.0]]);
        assert!(asym.build(8).is_err());
        let neg = ProfileSpec::block(vec![vec![1.0, 0.0], vec![0.0, 3.0]]);
        assert!(neg.build(8).is_err());
        assert!(ProfileSpec::constant().build(1).is_err());
    }

    #[test]
    fn block_entries_follow_blocks() {
        let p = ProfileSpec::block(vec![vec![1.0, 2.0], vec![2.0, 3.0]]).build(6).unwrap();
        assert_eq!(p.s(0, 0), 1.0 / 6.0);
        assert_eq!(p.s(0, 5), 2.0 / 6.0);
        assert_eq!(p.s(4, 5), 3.0 / 6.0);
    }

    #[test]
    fn declared_holder_constant_is_enforced() {
        let mut spec = ProfileSpec::smooth_kernel();
        spec.params.holder_l = Some(1e-3);
        assert!(spec.build(64).is_err());
        spec.params.holder_l = Some(10.0);
        assert!(spec.build(64).is_ok());
    }

    #[test]
    fn profile_json_roundtrip() {
        let p = ProfileSpec::smooth_kernel().build(40).unwrap();
        let text = p.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["kind", "n", "params", "c_inf", "c_sup", "holder_L"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let q = VarianceProfile::from_json(&text).unwrap();
        assert_eq!(q.dense(), p.dense());
        assert!(VarianceProfile::from_json("{\"kind\": \"constant\"}").is_err());
    }

    #[test]
    fn sampling_is_reproducible_and_hermitian() {
        for beta in [1, 2] {
            let p = ProfileSpec::smooth_kernel().build(30).unwrap();
            let spec = EnsembleSpec::new(p, EntryLaw::new(Family::Gaussian, beta).unwrap(), 11).unwrap();
            let a = sample_matrix(&spec, 7);
            let b = sample_matrix(&spec, 7);
            assert_eq!(a, b);
            assert_eq!(a.hermiticity_defect(), 0.0);
            assert_ne!(a, sample_matrix(&spec, 8));
            if beta == 2 {
                for i in 0..30 {
                    assert_eq!(a.get(i, i).im, 0.0);
                }
            }
        }
    }

    #[test]
    fn binary_dump_roundtrip() {
        for beta in [1, 2] {
            let p = ProfileSpec::constant().build(9).unwrap();
            let spec = EnsembleSpec::new(p, EntryLaw::new(Family::Uniform, beta).unwrap(), 3).unwrap();
            let h = sample_matrix(&spec, 0);
            let mut buf = Vec::new();
            h.write_binary(&mut buf).unwrap();
            assert_eq!(buf.len(), 16 + 81 * 8 * beta as usize);
            assert_eq!(&buf[..4], b"MRMT");
            let back = HermitianMatrix::read_binary(&buf[..]).unwrap();
            assert_eq!(back, h);
        }
    }

    #[test]
    fn cumulant_matrix_families() {
        let p = ProfileSpec::smooth_kernel().build(12).unwrap();
        let g = EnsembleSpec::new(p.clone(), EntryLaw::new(Family::Gaussian, 1).unwrap(), 0).unwrap();
        assert!(fourth_cumulant_matrix(&g).iter().all(|&c| c == 0.0));
        let r = EnsembleSpec::new(p.clone(), EntryLaw::new(Family::Rademacher, 1).unwrap(), 0).unwrap();
        let u = EnsembleSpec::new(p.clone(), EntryLaw::new(Family::Uniform, 1).unwrap(), 0).unwrap();
        let cr = fourth_cumulant_matrix(&r);
        let cu = fourth_cumulant_matrix(&u);
        for j in 0..12 {
            for k in 0..12 {
                let s = p.s(j, k);
                assert!((cr[j * 12 + k] + 2.0 * s * s).abs() < 1e-18);
                assert!((cu[j * 12 + k] + 1.2 * s * s).abs() < 1e-18);
            }
        }
    }

    #[test]
    fn structured_cumulant_matches_dense() {
        for beta in [1, 2] {
            let p = ProfileSpec::smooth_kernel().build(15).unwrap();
            let spec = EnsembleSpec::new(p, EntryLaw::new(Family::Rademacher, beta).unwrap(), 0).unwrap();
            let dense = fourth_cumulant_matrix(&spec);
            let c4 = Cumulant4::from_spec(&spec);
            let x: Vec<C64> = (0..15).map(|j| C64::new(j as f64 * 0.1, 1.0 - j as f64 * 0.05)).collect();
            let y: Vec<C64> = (0..15).map(|j| C64::new((j as f64).sin(), 0.3)).collect();
            let mut want = C64::new(0.0, 0.0);
            for j in 0..15 {
                for k in 0..15 {
                    want += x[j] * y[k] * dense[j * 15 + k];
                }
            }
            assert!((c4.bilinear(&x, &y) - want).norm() < 1e-14 * (1.0 + want.norm()));
        }
    }

    #[test]
    fn factor_matches_dense_profile() {
        for spec in [ProfileSpec::constant(), ProfileSpec::smooth_kernel(), ProfileSpec::block(vec![vec![1.0, 2.0], vec![2.0, 3.0]])] {
            let p = spec.build(20).unwrap();
            let v: Vec<C64> = (0..20).map(|j| C64::new(1.0 + j as f64, -(j as f64).cos())).collect();
            let fast = p.apply(&v);
            for j in 0..20 {
                let slow: C64 = (0..20).map(|k| v[k] * p.s(j, k)).sum();
                assert!((fast[j] - slow).norm() < 1e-13);
            }
        }
    }
}
