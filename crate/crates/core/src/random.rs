//! Random test objects: endomorphisms, Hermitian operators, metrics.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::algebra::{CurvatureOperator, Endo, HermitianMetric};
use crate::linalg::{c, CMat, CVec, C64};

pub fn gaussian_c64<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    c(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> CMat {
    CMat::from_fn(rows, cols, |_, _| gaussian_c64(rng))
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CVec {
    CVec::from_fn(n, |_, _| gaussian_c64(rng))
}

pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CVec {
    let v = gaussian_vector(rng, n);
    let norm = v.norm();
    v / c(norm, 0.0)
}

pub fn random_endo<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Endo {
    Endo::new(gaussian_matrix(rng, n, n))
}

/// Hermitian `m x m` matrix with Gaussian entries.
pub fn random_hermitian_matrix<R: Rng + ?Sized>(rng: &mut R, m: usize) -> CMat {
    let a = gaussian_matrix(rng, m, m);
    (&a + a.adjoint()) * c(0.5, 0.0)
}

/// Random curvature operator with identity metric.
pub fn random_operator<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CurvatureOperator {
    CurvatureOperator::from_matrix_unchecked(random_hermitian_matrix(rng, n * n), HermitianMetric::identity(n))
}

/// Random positive semidefinite operator `B B*` (identity metric), normalized to unit max entry.
pub fn random_psd_operator<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CurvatureOperator {
    let b = gaussian_matrix(rng, n * n, n * n);
    let h = &b * b.adjoint();
    let scale = crate::linalg::max_abs(&h).max(1e-300);
    CurvatureOperator::from_matrix_unchecked(h / c(scale, 0.0), HermitianMetric::identity(n))
}

/// Random metric `Id + 0.5 B B* / |B|^2`, comfortably positive definite.
pub fn random_metric<R: Rng + ?Sized>(rng: &mut R, n: usize) -> HermitianMetric {
    let b = gaussian_matrix(rng, n, n);
    let bb = &b * b.adjoint();
    let s = crate::linalg::frobenius(&bb).max(1e-300);
    let g = CMat::identity(n, n) + bb * c(0.5 / s, 0.0) * c(n as f64, 0.0);
    HermitianMetric::new(g).expect("constructed metric is positive definite")
}

/// Random invertible matrix with condition number kept moderate.
pub fn random_invertible<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CMat {
    let a = gaussian_matrix(rng, n, n) * c(0.4 / (n as f64).sqrt(), 0.0);
    CMat::identity(n, n) + a
}

/// Random unitary via QR of a Gaussian matrix.
pub fn random_unitary<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CMat {
    let a = gaussian_matrix(rng, n, n);
    let qr = a.qr();
    let q = qr.q();
    let r = qr.r();
    // fix phases so the distribution does not depend on the QR sign convention
    let mut q = q;
    for k in 0..n {
        let d = r[(k, k)];
        let ph = if d.norm() > 0.0 { d / c(d.norm(), 0.0) } else { c(1.0, 0.0) };
        for row in 0..n {
            q[(row, k)] *= ph;
        }
    }
    q
}
