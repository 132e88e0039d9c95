//! Thin wrappers over LAPACK for large Hermitian eigenproblems and faer for
//! the small dense algebra that the low-rank representations reduce to.

use std::os::raw::{c_char, c_int};

use faer::linalg::solvers::DenseSolveCore;
use faer::Mat;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

extern crate openblas_src;

type Zc = lapack_sys::__BindgenComplex<f64>;

/// Which eigenvalues to return.
#[derive(Clone, Copy, Debug)]
pub enum Range {
    All,
    /// Half-open interval (lo, hi].
    Window(f64, f64),
}

fn range_args(range: Range) -> (c_char, f64, f64) {
    match range {
        Range::All => (b'A' as c_char, 0.0, 0.0),
        Range::Window(lo, hi) => (b'V' as c_char, lo, hi),
    }
}

fn check_info(routine: &str, info: c_int) -> Result<()> {
    if info != 0 {
        return Err(Error::Backend(format!("{routine} returned info = {info}")));
    }
    Ok(())
}

/// Eigenvalues (and optionally eigenvectors) of a real symmetric matrix stored
/// column-major. The lower triangle is referenced and `a` is overwritten.
pub fn syevr(n: usize, a: &mut [f64], range: Range, vectors: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    assert_eq!(a.len(), n * n);
    if n == 0 {
        return Ok((vec![], vec![]));
    }
    let ni = n as c_int;
    let jobz = if vectors { b'V' } else { b'N' } as c_char;
    let (rng, vl, vu) = range_args(range);
    let uplo = b'L' as c_char;
    let (il, iu) = (0 as c_int, 0 as c_int);
    let abstol = 0.0f64;
    let mut m: c_int = 0;
    let mut w = vec![0.0; n];
    let ldz = if vectors { ni } else { 1 };
    let mut z = vec![0.0; if vectors { n * n } else { 1 }];
    let mut isuppz = vec![0 as c_int; 2 * n];
    let mut info: c_int = 0;
    let mut wq = [0.0f64];
    let mut iwq = [0 as c_int];
    let q: c_int = -1;
    unsafe {
        lapack_sys::dsyevr_(
            &jobz,
            &rng,
            &uplo,
            &ni,
            a.as_mut_ptr(),
            &ni,
            &vl,
            &vu,
            &il,
            &iu,
            &abstol,
            &mut m,
            w.as_mut_ptr(),
            z.as_mut_ptr(),
            &ldz,
            isuppz.as_mut_ptr(),
            wq.as_mut_ptr(),
            &q,
            iwq.as_mut_ptr(),
            &q,
            &mut info,
        );
    }
    check_info("dsyevr (query)", info)?;
    let lwork = wq[0] as c_int;
    let liwork = iwq[0];
    let mut work = vec![0.0; lwork as usize];
    let mut iwork = vec![0 as c_int; liwork as usize];
    unsafe {
        lapack_sys::dsyevr_(
            &jobz,
            &rng,
            &uplo,
            &ni,
            a.as_mut_ptr(),
            &ni,
            &vl,
            &vu,
            &il,
            &iu,
            &abstol,
            &mut m,
            w.as_mut_ptr(),
            z.as_mut_ptr(),
            &ldz,
            isuppz.as_mut_ptr(),
            work.as_mut_ptr(),
            &lwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    check_info("dsyevr", info)?;
    let m = m as usize;
    w.truncate(m);
    if vectors {
        z.truncate(n * m);
    } else {
        z.clear();
    }
    Ok((w, z))
}

static REAL_VECTORS_BROKEN: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);

/// All eigenpairs of a real symmetric matrix (column-major), or `None` when
/// the result fails the residual check `H Z x = Z diag(w) x`, `Z^T Z x = x`
/// on two probe vectors. Some OpenBLAS kernel selections corrupt the real
/// back-transformation while eigenvalues and complex routines stay correct;
/// after the first failure the real path is no longer tried.
pub fn real_eigenpairs(n: usize, h: &[f64]) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    use std::sync::atomic::Ordering;
    if REAL_VECTORS_BROKEN.load(Ordering::Relaxed) {
        return Ok(None);
    }
    let mut a = h.to_vec();
    let (w, z) = syevr(n, &mut a, Range::All, true)?;
    if w.len() == n && eigenpairs_consistent(n, h, &w, &z) {
        return Ok(Some((w, z)));
    }
    REAL_VECTORS_BROKEN.store(true, Ordering::Relaxed);
    Ok(None)
}

fn eigenpairs_consistent(n: usize, h: &[f64], w: &[f64], z: &[f64]) -> bool {
    let matvec = |m: &[f64], x: &[f64], trans: bool| -> Vec<f64> {
        let mut y = vec![0.0; n];
        for k in 0..n {
            let col = &m[k * n..(k + 1) * n];
            if trans {
                y[k] = col.iter().zip(x).map(|(a, b)| a * b).sum();
            } else {
                for (yi, a) in y.iter_mut().zip(col) {
                    *yi += a * x[k];
                }
            }
        }
        y
    };
    let scale = 1.0 + w.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    for probe in [0.61, 1.37] {
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * probe + 0.3).sin()).collect();
        let zx = matvec(z, &x, false);
        let lhs = matvec(h, &zx, false);
        let wx: Vec<f64> = x.iter().zip(w).map(|(a, b)| a * b).collect();
        let rhs = matvec(z, &wx, false);
        let back = matvec(z, &zx, true);
        let tol = 1e-10 * n as f64;
        if lhs.iter().zip(&rhs).any(|(a, b)| (a - b).abs() > tol * scale) || back.iter().zip(&x).any(|(a, b)| (a - b).abs() > tol) {
            return false;
        }
    }
    true
}

/// Complex Hermitian counterpart of [`syevr`]. Eigenvalue-only calls go through
/// the two-stage tridiagonal reduction, which is markedly faster for large n.
pub fn heevr(n: usize, a: &mut [C64], range: Range, vectors: bool) -> Result<(Vec<f64>, Vec<C64>)> {
    assert_eq!(a.len(), n * n);
    if n == 0 {
        return Ok((vec![], vec![]));
    }
    let ni = n as c_int;
    let jobz = if vectors { b'V' } else { b'N' } as c_char;
    let (rng, vl, vu) = range_args(range);
    let uplo = b'L' as c_char;
    let (il, iu) = (0 as c_int, 0 as c_int);
    let abstol = 0.0f64;
    let mut m: c_int = 0;
    let mut w = vec![0.0; n];
    let ldz = if vectors { ni } else { 1 };
    let mut z = vec![C64::new(0.0, 0.0); if vectors { n * n } else { 1 }];
    let mut isuppz = vec![0 as c_int; 2 * n];
    let mut info: c_int = 0;
    let mut wq = [C64::new(0.0, 0.0)];
    let mut rwq = [0.0f64];
    let mut iwq = [0 as c_int];
    let q: c_int = -1;
    let ap = a.as_mut_ptr() as *mut Zc;
    let zp = z.as_mut_ptr() as *mut Zc;
    let call = |work: *mut Zc,
                lw: &c_int,
                rwork: *mut f64,
                lrw: &c_int,
                iwork: *mut c_int,
                liw: &c_int,
                m: &mut c_int,
                w: *mut f64,
                isuppz: *mut c_int,
                info: &mut c_int| unsafe {
        if vectors {
            lapack_sys::zheevr_(
                &jobz, &rng, &uplo, &ni, ap, &ni, &vl, &vu, &il, &iu, &abstol, m, w, zp, &ldz, isuppz, work, lw, rwork, lrw, iwork, liw,
                info,
            );
        } else {
            lapack_sys::zheevr_2stage_(
                &jobz, &rng, &uplo, &ni, ap, &ni, &vl, &vu, &il, &iu, &abstol, m, w, zp, &ldz, isuppz, work, lw, rwork, lrw, iwork, liw,
                info,
            );
        }
    };
    call(
        wq.as_mut_ptr() as *mut Zc,
        &q,
        rwq.as_mut_ptr(),
        &q,
        iwq.as_mut_ptr(),
        &q,
        &mut m,
        w.as_mut_ptr(),
        isuppz.as_mut_ptr(),
        &mut info,
    );
    check_info("zheevr (query)", info)?;
    let lwork = wq[0].re as c_int;
    let lrwork = rwq[0] as c_int;
    let liwork = iwq[0];
    let mut work = vec![C64::new(0.0, 0.0); lwork as usize];
    let mut rwork = vec![0.0; lrwork as usize];
    let mut iwork = vec![0 as c_int; liwork as usize];
    call(
        work.as_mut_ptr() as *mut Zc,
        &lwork,
        rwork.as_mut_ptr(),
        &lrwork,
        iwork.as_mut_ptr(),
        &liwork,
        &mut m,
        w.as_mut_ptr(),
        isuppz.as_mut_ptr(),
        &mut info,
    );
    check_info("zheevr", info)?;
    let m = m as usize;
    w.truncate(m);
    if vectors {
        z.truncate(n * m);
    } else {
        z.clear();
    }
    Ok((w, z))
}

/// Reference complex path using the single-stage reduction; used to validate
/// the two-stage routine.
pub fn heevr_single_stage(n: usize, a: &mut [C64], range: Range) -> Result<Vec<f64>> {
    let ni = n as c_int;
    let jobz = b'N' as c_char;
    let (rng, vl, vu) = range_args(range);
    let uplo = b'L' as c_char;
    let (il, iu) = (0 as c_int, 0 as c_int);
    let abstol = 0.0f64;
    let mut m: c_int = 0;
    let mut w = vec![0.0; n];
    let ldz: c_int = 1;
    let mut z = [C64::new(0.0, 0.0)];
    let mut isuppz = vec![0 as c_int; 2 * n];
    let mut info: c_int = 0;
    let mut wq = [C64::new(0.0, 0.0)];
    let mut rwq = [0.0f64];
    let mut iwq = [0 as c_int];
    let q: c_int = -1;
    unsafe {
        lapack_sys::zheevr_(
            &jobz,
            &rng,
            &uplo,
            &ni,
            a.as_mut_ptr() as *mut Zc,
            &ni,
            &vl,
            &vu,
            &il,
            &iu,
            &abstol,
            &mut m,
            w.as_mut_ptr(),
            z.as_mut_ptr() as *mut Zc,
            &ldz,
            isuppz.as_mut_ptr(),
            wq.as_mut_ptr() as *mut Zc,
            &q,
            rwq.as_mut_ptr(),
            &q,
            iwq.as_mut_ptr(),
            &q,
            &mut info,
        );
    }
    check_info("zheevr (query)", info)?;
    let lwork = wq[0].re as c_int;
    let lrwork = rwq[0] as c_int;
    let liwork = iwq[0];
    let mut work = vec![C64::new(0.0, 0.0); lwork as usize];
    let mut rwork = vec![0.0; lrwork as usize];
    let mut iwork = vec![0 as c_int; liwork as usize];
    unsafe {
        lapack_sys::zheevr_(
            &jobz,
            &rng,
            &uplo,
            &ni,
            a.as_mut_ptr() as *mut Zc,
            &ni,
            &vl,
            &vu,
            &il,
            &iu,
            &abstol,
            &mut m,
            w.as_mut_ptr(),
            z.as_mut_ptr() as *mut Zc,
            &ldz,
            isuppz.as_mut_ptr(),
            work.as_mut_ptr() as *mut Zc,
            &lwork,
            rwork.as_mut_ptr(),
            &lrwork,
            iwork.as_mut_ptr(),
            &liwork,
            &mut info,
        );
    }
    check_info("zheevr", info)?;
    w.truncate(m as usize);
    Ok(w)
}

// ---------------------------------------------------------------------------
// small dense complex algebra

pub type CMat = Mat<C64>;

pub fn cmat_zeros(r: usize, c: usize) -> CMat {
    Mat::zeros(r, c)
}

pub fn cmat_identity(r: usize) -> CMat {
    Mat::from_fn(r, r, |i, j| if i == j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) })
}

pub fn cmat_from_real(a: &Mat<f64>) -> CMat {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| C64::new(a[(i, j)], 0.0))
}

/// Inverse of a small square matrix together with its infinity-norm condition
/// number.
pub fn inverse_with_condition(a: &CMat) -> (CMat, f64) {
    let inv = a.partial_piv_lu().inverse();
    let cond = norm_inf(a) * norm_inf(&inv);
    (inv, cond)
}

pub fn norm_inf(a: &CMat) -> f64 {
    (0..a.nrows()).map(|i| (0..a.ncols()).map(|j| a[(i, j)].norm()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn max_abs(a: &CMat) -> f64 {
    let mut out = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            out = out.max(a[(i, j)].norm());
        }
    }
    out
}

pub fn eigenvalues(a: &CMat) -> Result<Vec<C64>> {
    if a.nrows() == 1 {
        return Ok(vec![a[(0, 0)]]);
    }
    a.eigenvalues().map_err(|e| Error::Backend(format!("small eigenvalue solve failed: {e:?}")))
}

pub fn trace(a: &CMat) -> C64 {
    (0..a.nrows()).map(|i| a[(i, i)]).sum()
}
