//! Small dense complex linear algebra used throughout the crate.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const I: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Largest entrywise modulus.
pub fn max_abs(m: &CMat) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

/// Largest entry of `|m - m*|`.
pub fn hermitian_defect(m: &CMat) -> f64 {
    let n = m.nrows();
    let mut d: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            d = d.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    d
}

pub fn symmetrize(m: &CMat) -> CMat {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

/// Eigen-decomposition of a Hermitian matrix with eigenvalues in ascending order.
pub struct HermitianEigen {
    pub values: Vec<f64>,
    /// Columns are orthonormal eigenvectors, matching `values`.
    pub vectors: CMat,
}

pub fn hermitian_eigen(m: &CMat) -> Result<HermitianEigen> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch { expected: n, got: m.ncols() });
    }
    if n == 0 {
        return Ok(HermitianEigen { values: vec![], vectors: CMat::zeros(0, 0) });
    }
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::EigenFailure("non-finite matrix entry".into()));
    }
    let eig = nalgebra::SymmetricEigen::try_new(symmetrize(m), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::EigenFailure("symmetric eigen iteration did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = CMat::from_fn(n, n, |r, col| eig.eigenvectors[(r, order[col])]);
    Ok(HermitianEigen { values, vectors })
}

pub fn min_eigenvalue(m: &CMat) -> Result<f64> {
    Ok(hermitian_eigen(m)?.values.first().copied().unwrap_or(0.0))
}

/// Lowest eigenpair of a Hermitian matrix.
pub fn lowest_eigenpair(m: &CMat) -> Result<(f64, CVec)> {
    if m.nrows() == 1 && m.ncols() == 1 {
        return Ok((m[(0, 0)].re, CVec::from_element(1, C64::new(1.0, 0.0))));
    }
    if m.nrows() == 2 && m.ncols() == 2 {
        if let Some(pair) = lowest_eigenpair_2x2(m) {
            return Ok(pair);
        }
    }
    let e = hermitian_eigen(m)?;
    Ok((e.values[0], e.vectors.column(0).into_owned()))
}

// Closed form for 2x2 Hermitian matrices; falls back to the iterative solver when
// the eigenvector is ill-determined.
fn lowest_eigenpair_2x2(m: &CMat) -> Option<(f64, CVec)> {
    let a = m[(0, 0)].re;
    let d = m[(1, 1)].re;
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)].conj());
    if !(a.is_finite() && d.is_finite() && b.re.is_finite() && b.im.is_finite()) {
        return None;
    }
    let half = 0.5 * (a - d);
    let r = half.hypot(b.norm());
    let lam = 0.5 * (a + d) - r;
    if r == 0.0 {
        return Some((lam, CVec::from_vec(vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)])));
    }
    // (M - lam) v = 0; pick the better-conditioned row
    let v = if a - lam >= d - lam {
        // row 0: (a - lam) v0 + b v1 = 0
        CVec::from_vec(vec![-b, C64::new(a - lam, 0.0)])
    } else {
        // row 1: conj(b) v0 + (d - lam) v1 = 0
        CVec::from_vec(vec![C64::new(d - lam, 0.0), -b.conj()])
    };
    let nv = v.norm();
    if !(nv > 0.0) || !nv.is_finite() {
        return None;
    }
    Some((lam, v / C64::new(nv, 0.0)))
}

/// Orthonormal basis (as columns) of the orthogonal complement of `w`.
pub fn orthogonal_complement(w: &CVec) -> CMat {
    let n = w.len();
    let norm = w.norm();
    let mut basis: Vec<CVec> = Vec::with_capacity(n);
    if norm > 0.0 {
        basis.push(w / C64::new(norm, 0.0));
    }
    let mut out: Vec<CVec> = Vec::with_capacity(n.saturating_sub(1));
    for k in 0..n {
        if basis.len() == n {
            break;
        }
        let mut v = CVec::zeros(n);
        v[k] = C64::new(1.0, 0.0);
        for b in &basis {
            let proj = b.dotc(&v);
            v -= b * proj;
        }
        // second pass for stability
        for b in &basis {
            let proj = b.dotc(&v);
            v -= b * proj;
        }
        let vn = v.norm();
        if vn > 1e-8 {
            let v = v / C64::new(vn, 0.0);
            basis.push(v.clone());
            out.push(v);
        }
    }
    let cols = out.len();
    CMat::from_fn(n, cols, |r, col| out[col][r])
}

/// Cholesky factor `L` (lower triangular) with `m = L L*`.
pub fn cholesky(m: &CMat) -> Result<CMat> {
    nalgebra::Cholesky::new(symmetrize(m))
        .map(|ch| ch.l())
        .ok_or_else(|| Error::SingularMetric { min_eig: min_eigenvalue(m).unwrap_or(f64::NAN) })
}

pub fn inverse(m: &CMat) -> Result<CMat> {
    m.clone().try_inverse().ok_or(Error::SingularMetric { min_eig: 0.0 })
}

/// Eigenvalues of a general complex square matrix (complex Schur form).
pub fn general_eigenvalues(m: &CMat) -> Result<Vec<C64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(vec![]);
    }
    let schur = nalgebra::Schur::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::EigenFailure("Schur iteration did not converge".into()))?;
    let (_, t) = schur.unpack();
    Ok((0..n).map(|k| t[(k, k)]).collect())
}

/// Numerical rank from singular values, relative to the largest one.
pub fn numerical_rank(m: &CMat, rel_tol: f64) -> usize {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    svd.singular_values.iter().filter(|&&s| s > rel_tol * smax).count()
}

pub fn frobenius(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}
