//! Pointwise algebra of Hermitian curvature-type tensors on `End(V)`, `V = C^n`.
//!
//! Basis: `E_(k,i) = e_k (x) eps^i` is the matrix unit with a single 1 at row `k`,
//! column `i`; its flat index is `A = k*n + i`. A [`CurvatureOperator`] stores the
//! Hermitian matrix `H` whose entry `H[A,B]` is the coefficient of `E_A (x) conj(E_B)`,
//! so that `H[(k,i),(l,j)] = Omega_{i jbar}^{lbar k}`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, CVec, C64};

/// Hermitian defects (relative to max(1, |H|_max)) below this are left alone.
pub const HERMITIAN_SILENT: f64 = 1e-13;
/// Defects up to this are absorbed by symmetrization; larger ones are errors.
pub const HERMITIAN_REPAIR: f64 = 1e-9;

/// Index bookkeeping for the basis of `End(C^n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EndoSpace {
    pub n: usize,
}

impl EndoSpace {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    pub fn dim(&self) -> usize {
        self.n * self.n
    }

    #[inline]
    pub fn index(&self, k: usize, i: usize) -> usize {
        k * self.n + i
    }

    #[inline]
    pub fn pair(&self, a: usize) -> (usize, usize) {
        (a / self.n, a % self.n)
    }

    pub fn basis(&self, k: usize, i: usize) -> Endo {
        let mut m = CMat::zeros(self.n, self.n);
        m[(k, i)] = c(1.0, 0.0);
        Endo::new(m)
    }
}

/// An endomorphism of `C^n`; `entries[(a, b)]` is `u^a_b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EndoRepr", into = "EndoRepr")]
pub struct Endo {
    entries: CMat,
}

impl Endo {
    pub fn new(entries: CMat) -> Self {
        assert_eq!(entries.nrows(), entries.ncols(), "endomorphisms are square");
        Self { entries }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(CMat::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        Self::new(CMat::identity(n, n))
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &CMat {
        &self.entries
    }

    pub fn into_matrix(self) -> CMat {
        self.entries
    }

    pub fn trace(&self) -> C64 {
        self.entries.trace()
    }

    pub fn norm(&self) -> f64 {
        linalg::frobenius(&self.entries)
    }

    pub fn scale(&self, s: C64) -> Endo {
        Endo::new(&self.entries * s)
    }

    pub fn commutator(&self, other: &Endo) -> Endo {
        Endo::new(&self.entries * &other.entries - &other.entries * &self.entries)
    }

    /// `P u P^-1`.
    pub fn conjugate_by(&self, p: &CMat) -> Result<Endo> {
        let pinv = linalg::inverse(p)?;
        Ok(Endo::new(p * &self.entries * pinv))
    }

    /// Coefficient vector `c` with `u = sum_A c_A E_A`, i.e. `c[(k,i)] = u[k,i]`.
    pub fn coefficients(&self) -> CVec {
        let n = self.n();
        DVector::from_fn(n * n, |a, _| self.entries[(a / n, a % n)])
    }

    pub fn from_coefficients(n: usize, coeffs: &CVec) -> Endo {
        Endo::new(CMat::from_fn(n, n, |k, i| coeffs[k * n + i]))
    }

    /// Pairing coordinates `x[(k,i)] = tr(E_(k,i) u) = u[i,k]`.
    pub fn pairing_coordinates(&self) -> CVec {
        let n = self.n();
        DVector::from_fn(n * n, |a, _| self.entries[(a % n, a / n)])
    }

    pub fn rank(&self, rel_tol: f64) -> usize {
        linalg::numerical_rank(&self.entries, rel_tol)
    }
}

/// A Hermitian positive definite matrix `g[(i,j)] = g_{i jbar}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct HermitianMetric {
    g: CMat,
    /// `ginv[(i,j)] = g^{i jbar}`, the transpose of the matrix inverse.
    ginv: CMat,
}

impl HermitianMetric {
    pub fn new(g: CMat) -> Result<Self> {
        let n = g.nrows();
        if g.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: g.ncols() });
        }
        let scale = linalg::max_abs(&g).max(1.0);
        let defect = linalg::hermitian_defect(&g) / scale;
        if defect > HERMITIAN_REPAIR {
            return Err(Error::NotHermitian { defect });
        }
        let g = if defect > HERMITIAN_SILENT { linalg::symmetrize(&g) } else { g };
        let min_eig = linalg::min_eigenvalue(&g)?;
        if !(min_eig > 0.0) {
            return Err(Error::SingularMetric { min_eig });
        }
        let ginv = linalg::inverse(&g)?.transpose();
        Ok(Self { g, ginv })
    }

    pub fn identity(n: usize) -> Self {
        Self { g: CMat::identity(n, n), ginv: CMat::identity(n, n) }
    }

    pub fn n(&self) -> usize {
        self.g.nrows()
    }

    pub fn matrix(&self) -> &CMat {
        &self.g
    }

    pub fn inverse_components(&self) -> &CMat {
        &self.ginv
    }

    pub fn is_identity(&self) -> bool {
        let n = self.n();
        (0..n).all(|i| (0..n).all(|j| (self.g[(i, j)] - if i == j { c(1.0, 0.0) } else { c(0.0, 0.0) }).norm() == 0.0))
    }

    /// Change of frame `P` with `P^T g conj(P) = Id`, built from the Cholesky factor.
    pub fn unitary_frame(&self) -> Result<CMat> {
        let l = linalg::cholesky(&self.g)?;
        Ok(linalg::inverse(&l)?.transpose())
    }

    /// Metric components in the frame `e'_a = sum_b e_b P[b,a]`.
    pub fn in_frame(&self, p: &CMat) -> Result<HermitianMetric> {
        HermitianMetric::new(p.transpose() * &self.g * p.map(|z| z.conj()))
    }

    /// `g(xi, conj eta) = sum xi_i g_{i jbar} conj(eta_j)`.
    pub fn inner(&self, xi: &CVec, eta: &CVec) -> C64 {
        let n = self.n();
        let mut s = c(0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                s += xi[i] * self.g[(i, j)] * eta[j].conj();
            }
        }
        s
    }

    /// `G[(s,n),(p,m)] = g[p,s] * ginv[m,n]`: the bilinear form used by `square_coord`.
    fn square_kernel(&self) -> CMat {
        self.g.transpose().kronecker(&self.ginv.transpose())
    }
}

fn enforce_hermitian(h: CMat) -> Result<CMat> {
    let scale = linalg::max_abs(&h).max(1.0);
    let defect = linalg::hermitian_defect(&h) / scale;
    if !defect.is_finite() || defect > HERMITIAN_REPAIR {
        return Err(Error::NotHermitian { defect });
    }
    if defect > HERMITIAN_SILENT {
        Ok(linalg::symmetrize(&h))
    } else {
        Ok(h)
    }
}

/// An element of `Sym^{1,1}(End V)` stored as an `n^2 x n^2` Hermitian matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OperatorRepr", into = "OperatorRepr")]
pub struct CurvatureOperator {
    h: CMat,
    metric: HermitianMetric,
}

impl CurvatureOperator {
    pub fn new(h: CMat, metric: HermitianMetric) -> Result<Self> {
        let n = metric.n();
        if h.nrows() != n * n || h.ncols() != n * n {
            return Err(Error::DimensionMismatch { expected: n * n, got: h.nrows() });
        }
        Ok(Self { h: enforce_hermitian(h)?, metric })
    }

    /// Symmetrizes unconditionally; for matrices that are Hermitian by construction.
    pub fn from_matrix_unchecked(h: CMat, metric: HermitianMetric) -> Self {
        Self { h: linalg::symmetrize(&h), metric }
    }

    pub fn zeros(n: usize) -> Self {
        Self { h: CMat::zeros(n * n, n * n), metric: HermitianMetric::identity(n) }
    }

    /// `Id_{n^2}`: the operator whose associated self-adjoint map is the identity.
    pub fn identity(n: usize) -> Self {
        Self { h: CMat::identity(n * n, n * n), metric: HermitianMetric::identity(n) }
    }

    /// `Id_V (x) conj(Id_V)`.
    pub fn id_tensor_id(n: usize) -> Self {
        gram(n, &[Endo::identity(n)])
    }

    pub fn n(&self) -> usize {
        self.metric.n()
    }

    pub fn matrix(&self) -> &CMat {
        &self.h
    }

    pub fn metric(&self) -> &HermitianMetric {
        &self.metric
    }

    pub fn with_metric(&self, metric: HermitianMetric) -> Result<Self> {
        if metric.n() != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), got: metric.n() });
        }
        Ok(Self { h: self.h.clone(), metric })
    }

    pub fn norm(&self) -> f64 {
        linalg::frobenius(&self.h)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { h: &self.h * c(s, 0.0), metric: self.metric.clone() }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_same_n(self.n(), other.n())?;
        Ok(Self { h: &self.h + &other.h, metric: self.metric.clone() })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_same_n(self.n(), other.n())?;
        Ok(Self { h: &self.h - &other.h, metric: self.metric.clone() })
    }

    /// `self - t * Id_{n^2}`.
    pub fn shift(&self, t: f64) -> Self {
        let m = self.h.nrows();
        Self { h: &self.h - CMat::identity(m, m) * c(t, 0.0), metric: self.metric.clone() }
    }

    pub fn hermitian_defect(&self) -> f64 {
        linalg::hermitian_defect(&self.h)
    }

    pub fn eigen(&self) -> Result<linalg::HermitianEigen> {
        linalg::hermitian_eigen(&self.h)
    }

    /// Simultaneous adjoint action `Ad_P` on both tensor slots; the metric is unchanged.
    pub fn ad_conjugate(&self, p: &CMat) -> Result<Self> {
        let pinv = linalg::inverse(p)?;
        let t = p.kronecker(&pinv.transpose());
        CurvatureOperator::new(&t * &self.h * t.adjoint(), self.metric.clone())
    }

    /// Components in the frame `e'_a = sum_b e_b P[b,a]` (metric transformed too).
    pub fn in_frame(&self, p: &CMat) -> Result<Self> {
        let pinv = linalg::inverse(p)?;
        let t = pinv.kronecker(&p.transpose());
        let metric = self.metric.in_frame(p)?;
        CurvatureOperator::new(&t * &self.h * t.adjoint(), metric)
    }

    /// Components in a unitary frame of the attached metric, with the frame change used.
    pub fn to_unitary_frame(&self) -> Result<(Self, CMat)> {
        let n = self.n();
        if self.metric.is_identity() {
            return Ok((self.clone(), CMat::identity(n, n)));
        }
        let p = self.metric.unitary_frame()?;
        let mut op = self.in_frame(&p)?;
        op.metric = HermitianMetric::identity(n);
        Ok((op, p))
    }
}

fn check_same_n(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, got: b });
    }
    Ok(())
}

/// Endomorphism components expressed in the frame `e' = e P`: `P^-1 u P`.
pub fn endo_in_frame(u: &Endo, p: &CMat) -> Result<Endo> {
    let pinv = linalg::inverse(p)?;
    Ok(Endo::new(pinv * u.matrix() * p))
}

/// Rank-4 tensor `Omega_{i jbar k lbar}` with all indices lowered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IndexedRepr", into = "IndexedRepr")]
pub struct IndexedCurvature {
    n: usize,
    data: Vec<C64>,
}

impl IndexedCurvature {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![c(0.0, 0.0); n * n * n * n] }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize, usize, usize) -> C64) -> Self {
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        out.data[((i * n + j) * n + k) * n + l] = f(i, j, k, l);
                    }
                }
            }
        }
        out
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> C64 {
        let n = self.n;
        self.data[((i * n + j) * n + k) * n + l]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: C64) {
        let n = self.n;
        self.data[((i * n + j) * n + k) * n + l] = v;
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    /// Largest `|Omega_{i jbar k lbar} - conj(Omega_{j ibar l kbar})|`.
    pub fn symmetry_defect(&self) -> f64 {
        let n = self.n;
        let mut d: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        d = d.max((self.get(i, j, k, l) - self.get(j, i, l, k).conj()).norm());
                    }
                }
            }
        }
        d
    }

    /// `Omega(xi, conj xi, eta, conj eta)`.
    pub fn bisectional(&self, xi: &CVec, eta: &CVec) -> f64 {
        let n = self.n;
        let mut s = c(0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        s += self.get(i, j, k, l) * xi[i] * xi[j].conj() * eta[k] * eta[l].conj();
                    }
                }
            }
        }
        s.re
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, z| a.max(z.norm()))
    }
}

/// `tr(u v)`.
pub fn trace_pairing(u: &Endo, v: &Endo) -> Result<C64> {
    check_same_n(u.n(), v.n())?;
    Ok((u.matrix() * v.matrix()).trace())
}

/// Sesquilinear pairing `<Omega, a (x) conj(b)>_tr = sum H[A,B] x_A(a) conj(x_B(b))`.
pub fn pair(omega: &CurvatureOperator, a: &Endo, b: &Endo) -> Result<C64> {
    check_same_n(omega.n(), a.n())?;
    check_same_n(omega.n(), b.n())?;
    let xa = a.pairing_coordinates();
    let xb = b.pairing_coordinates().map(|z| z.conj());
    Ok((xa.transpose() * omega.matrix() * xb)[(0, 0)])
}

/// `<Omega, u (x) conj(u)>_tr`, real since `H` is Hermitian.
pub fn evaluate(omega: &CurvatureOperator, u: &Endo) -> Result<f64> {
    Ok(pair(omega, u, u)?.re)
}

/// Raise the last two indices: `H[(k,i),(l,j)] = sum_{m,n} Omega_{i jbar m nbar} g^{m lbar} g^{k nbar}`.
pub fn from_indexed(omega4: &IndexedCurvature, g: &HermitianMetric) -> Result<CurvatureOperator> {
    let n = omega4.n();
    check_same_n(n, g.n())?;
    let ginv = g.inverse_components();
    let mut h = CMat::zeros(n * n, n * n);
    // first contract over m, then over n
    let mut half = vec![c(0.0, 0.0); n * n * n * n]; // [i][j][l][nn]
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                for nn in 0..n {
                    let mut s = c(0.0, 0.0);
                    for m in 0..n {
                        s += omega4.get(i, j, m, nn) * ginv[(m, l)];
                    }
                    half[((i * n + j) * n + l) * n + nn] = s;
                }
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for l in 0..n {
                for j in 0..n {
                    let mut s = c(0.0, 0.0);
                    for nn in 0..n {
                        s += half[((i * n + j) * n + l) * n + nn] * ginv[(k, nn)];
                    }
                    h[(k * n + i, l * n + j)] = s;
                }
            }
        }
    }
    CurvatureOperator::new(h, g.clone())
}

/// Inverse of [`from_indexed`]: `Omega_{i jbar m nbar} = sum_{k,l} H[(k,i),(l,j)] g_{m lbar} g_{k nbar}`.
pub fn to_indexed(omega: &CurvatureOperator, g: &HermitianMetric) -> Result<IndexedCurvature> {
    let n = omega.n();
    check_same_n(n, g.n())?;
    let gm = g.matrix();
    let h = omega.matrix();
    let mut out = IndexedCurvature::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for m in 0..n {
                for nn in 0..n {
                    let mut s = c(0.0, 0.0);
                    for k in 0..n {
                        for l in 0..n {
                            s += h[(k * n + i, l * n + j)] * gm[(m, l)] * gm[(k, nn)];
                        }
                    }
                    out.set(i, j, m, nn, s);
                }
            }
        }
    }
    Ok(out)
}

/// Coordinate formula `(Omega^2)_{i jbar}^{lbar k} = g^{m nbar} g_{p sbar} Omega_{i nbar}^{sbar k} Omega_{m jbar}^{lbar p}`.
pub fn square_coord(omega: &CurvatureOperator, g: &HermitianMetric) -> Result<CurvatureOperator> {
    check_same_n(omega.n(), g.n())?;
    let h = omega.matrix();
    let kernel = g.square_kernel();
    CurvatureOperator::new(h * kernel * h, g.clone())
}

/// Spectral square of the self-adjoint map associated to `Omega` w.r.t. `g`.
pub fn square_spectral(omega: &CurvatureOperator, g: &HermitianMetric) -> Result<CurvatureOperator> {
    check_same_n(omega.n(), g.n())?;
    let n = omega.n();
    let (p, t) = if g.is_identity() {
        (CMat::identity(n, n), None)
    } else {
        let p = g.unitary_frame()?;
        let pinv = linalg::inverse(&p)?;
        let t = pinv.kronecker(&p.transpose());
        (p, Some(t))
    };
    let hu = match &t {
        Some(t) => t * omega.matrix() * t.adjoint(),
        None => omega.matrix().clone(),
    };
    let eig = linalg::hermitian_eigen(&hu)?;
    let d = CMat::from_diagonal(&DVector::from_iterator(eig.values.len(), eig.values.iter().map(|&l| c(l * l, 0.0))));
    let sq = &eig.vectors * d * eig.vectors.adjoint();
    let h = match t {
        Some(_) => {
            let pinv_t = linalg::inverse(&p.transpose())?;
            let tinv = p.kronecker(&pinv_t);
            &tinv * sq * tinv.adjoint()
        }
        None => sq,
    };
    CurvatureOperator::new(h, g.clone())
}

// T1(P,Q)[(K,I),(L,J)] = sum_{p,n} P[(K,p),(L,n)] Q[(p,I),(n,J)]
// T2(P,Q)[(K,I),(L,J)] = sum_{p,n} P[(K,p),(n,J)] Q[(p,I),(L,n)]
fn sharp_terms(p: &CMat, q: &CMat, n: usize, out: &mut CMat, sign_t1: f64, sign_t2: f64) {
    for kk in 0..n {
        for ii in 0..n {
            for ll in 0..n {
                for jj in 0..n {
                    let mut s1 = c(0.0, 0.0);
                    let mut s2 = c(0.0, 0.0);
                    for pp in 0..n {
                        for nn in 0..n {
                            s1 += p[(kk * n + pp, ll * n + nn)] * q[(pp * n + ii, nn * n + jj)];
                            s2 += p[(kk * n + pp, nn * n + jj)] * q[(pp * n + ii, ll * n + nn)];
                        }
                    }
                    out[(kk * n + ii, ll * n + jj)] += s1 * sign_t1 + s2 * sign_t2;
                }
            }
        }
    }
}

/// Bilinear operation determined by `(v1 (x) w1bar) # (v2 (x) w2bar) = [v1,v2] (x) conj([w1,w2])`.
pub fn sharp(p: &CurvatureOperator, q: &CurvatureOperator) -> Result<CurvatureOperator> {
    check_same_n(p.n(), q.n())?;
    let n = p.n();
    let mut out = CMat::zeros(n * n, n * n);
    sharp_terms(p.matrix(), q.matrix(), n, &mut out, 1.0, -1.0);
    sharp_terms(q.matrix(), p.matrix(), n, &mut out, 1.0, -1.0);
    CurvatureOperator::new(out, p.metric().clone())
}

/// `Omega^# = (1/2) Omega # Omega` via
/// `(Omega^#)_{i jbar}^{lbar k} = Omega_{p nbar}^{lbar k} Omega_{i jbar}^{nbar p} - Omega_{p jbar}^{nbar k} Omega_{i nbar}^{lbar p}`.
pub fn sharp_square(omega: &CurvatureOperator) -> Result<CurvatureOperator> {
    let n = omega.n();
    let h = omega.matrix();
    let mut out = CMat::zeros(n * n, n * n);
    for kk in 0..n {
        for ii in 0..n {
            for ll in 0..n {
                for jj in 0..n {
                    let mut s = c(0.0, 0.0);
                    for pp in 0..n {
                        for nn in 0..n {
                            s += h[(kk * n + pp, ll * n + nn)] * h[(pp * n + ii, nn * n + jj)];
                            s -= h[(kk * n + pp, nn * n + jj)] * h[(pp * n + ii, ll * n + nn)];
                        }
                    }
                    out[(kk * n + ii, ll * n + jj)] = s;
                }
            }
        }
    }
    CurvatureOperator::new(out, omega.metric().clone())
}

/// Matrix of `u -> [v, u]` acting on coefficient vectors.
pub fn commutator_matrix(v: &Endo) -> CMat {
    let n = v.n();
    let vm = v.matrix();
    let mut m = CMat::zeros(n * n, n * n);
    for a in 0..n {
        for b in 0..n {
            for k in 0..n {
                m[(a * n + b, k * n + b)] += vm[(a, k)];
                m[(a * n + b, a * n + k)] -= vm[(k, b)];
            }
        }
    }
    m
}

/// Derivation `ad_v(u (x) ubar) = [v,u] (x) ubar + u (x) conj([v,u])`.
pub fn ad_action(v: &Endo, omega: &CurvatureOperator) -> Result<CurvatureOperator> {
    check_same_n(v.n(), omega.n())?;
    let m = commutator_matrix(v);
    let h = omega.matrix();
    CurvatureOperator::new(&m * h + h * m.adjoint(), omega.metric().clone())
}

/// `A A* = sum_i a_i (x) conj(a_i)`, identity metric.
pub fn gram(n: usize, a: &[Endo]) -> CurvatureOperator {
    let mut h = CMat::zeros(n * n, n * n);
    for ai in a {
        assert_eq!(ai.n(), n, "gram: all endomorphisms must have the same size");
        let cv = ai.coefficients();
        h += &cv * cv.adjoint();
    }
    CurvatureOperator::from_matrix_unchecked(h, HermitianMetric::identity(n))
}

/// Rank-one endomorphism `u^i_k = xi^i g_{k sbar} conj(eta^s)`.
pub fn rank1_endo(xi: &CVec, eta: &CVec, g: &HermitianMetric) -> Endo {
    let n = g.n();
    let gm = g.matrix();
    let w = CVec::from_fn(n, |k, _| (0..n).map(|s| gm[(k, s)] * eta[s].conj()).sum());
    Endo::new(CMat::from_fn(n, n, |i, k| xi[i] * w[k]))
}

// ---- JSON representation: complex numbers as [re, im] pairs ----

type Pair = [f64; 2];

fn mat_to_rows(m: &CMat) -> Vec<Vec<Pair>> {
    (0..m.nrows()).map(|r| (0..m.ncols()).map(|col| [m[(r, col)].re, m[(r, col)].im]).collect()).collect()
}

fn rows_to_mat(rows: &[Vec<Pair>]) -> std::result::Result<CMat, String> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != nc) {
        return Err("ragged matrix rows".into());
    }
    Ok(CMat::from_fn(nr, nc, |r, col| c(rows[r][col][0], rows[r][col][1])))
}

#[derive(Serialize, Deserialize)]
struct EndoRepr {
    entries: Vec<Vec<Pair>>,
}

impl From<Endo> for EndoRepr {
    fn from(u: Endo) -> Self {
        Self { entries: mat_to_rows(u.matrix()) }
    }
}

impl TryFrom<EndoRepr> for Endo {
    type Error = String;
    fn try_from(r: EndoRepr) -> std::result::Result<Self, String> {
        let m = rows_to_mat(&r.entries)?;
        if m.nrows() != m.ncols() {
            return Err("endomorphism must be square".into());
        }
        Ok(Endo::new(m))
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr(Vec<Vec<Pair>>);

impl From<HermitianMetric> for MatrixRepr {
    fn from(g: HermitianMetric) -> Self {
        MatrixRepr(mat_to_rows(g.matrix()))
    }
}

impl TryFrom<MatrixRepr> for HermitianMetric {
    type Error = String;
    fn try_from(r: MatrixRepr) -> std::result::Result<Self, String> {
        HermitianMetric::new(rows_to_mat(&r.0)?).map_err(|e| e.to_string())
    }
}

#[derive(Serialize, Deserialize)]
struct OperatorRepr {
    n: usize,
    h: Vec<Vec<Pair>>,
    #[serde(default)]
    metric: Option<HermitianMetric>,
}

impl From<CurvatureOperator> for OperatorRepr {
    fn from(op: CurvatureOperator) -> Self {
        Self { n: op.n(), h: mat_to_rows(op.matrix()), metric: Some(op.metric().clone()) }
    }
}

impl TryFrom<OperatorRepr> for CurvatureOperator {
    type Error = String;
    fn try_from(r: OperatorRepr) -> std::result::Result<Self, String> {
        let h = rows_to_mat(&r.h)?;
        let metric = r.metric.unwrap_or_else(|| HermitianMetric::identity(r.n));
        CurvatureOperator::new(h, metric).map_err(|e| e.to_string())
    }
}

#[derive(Serialize, Deserialize)]
struct IndexedRepr {
    n: usize,
    components: Vec<Vec<Vec<Vec<Pair>>>>,
}

impl From<IndexedCurvature> for IndexedRepr {
    fn from(t: IndexedCurvature) -> Self {
        let n = t.n();
        let components = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        (0..n)
                            .map(|k| {
                                (0..n)
                                    .map(|l| {
                                        let z = t.get(i, j, k, l);
                                        [z.re, z.im]
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { n, components }
    }
}

impl TryFrom<IndexedRepr> for IndexedCurvature {
    type Error = String;
    fn try_from(r: IndexedRepr) -> std::result::Result<Self, String> {
        let n = r.n;
        let ok = r.components.len() == n
            && r.components
                .iter()
                .all(|a| a.len() == n && a.iter().all(|b| b.len() == n && b.iter().all(|c| c.len() == n)));
        if !ok {
            return Err(format!("components must have shape {n}x{n}x{n}x{n}"));
        }
        Ok(IndexedCurvature::from_fn(n, |i, j, k, l| {
            let p = r.components[i][j][k][l];
            c(p[0], p[1])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rel_err(a: &CMat, b: &CMat) -> f64 {
        linalg::frobenius(&(a - b)) / linalg::frobenius(b).max(1e-300)
    }

    #[test]
    fn trace_pairing_examples() {
        let s = EndoSpace::new(2);
        let id = Endo::identity(2);
        assert!((trace_pairing(&id, &id).unwrap() - c(2.0, 0.0)).norm() < 1e-15);
        let v = trace_pairing(&s.basis(0, 1), &s.basis(1, 0)).unwrap();
        assert!((v - c(1.0, 0.0)).norm() < 1e-15);

        let mut r = rng(1);
        let u = random_endo(&mut r, 3);
        let w = random_endo(&mut r, 3);
        let mut direct = c(0.0, 0.0);
        for a in 0..3 {
            for b in 0..3 {
                direct += u.matrix()[(a, b)] * w.matrix()[(b, a)];
            }
        }
        assert!((trace_pairing(&u, &w).unwrap() - direct).norm() < 1e-12);
        assert!(trace_pairing(&u, &Endo::identity(2)).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let s = EndoSpace::new(2);
        let om = gram(2, &[s.basis(0, 1)]);
        assert!((evaluate(&om, &s.basis(1, 0)).unwrap() - 1.0).abs() < 1e-15);
        assert!(evaluate(&om, &s.basis(0, 1)).unwrap().abs() < 1e-15);
    }

    #[test]
    fn evaluate_matches_eigen_expansion() {
        let mut r = rng(2);
        let om = random_operator(&mut r, 3);
        let u = random_endo(&mut r, 3);
        let eig = om.eigen().unwrap();
        let mut s = 0.0;
        for (idx, lam) in eig.values.iter().enumerate() {
            let v = Endo::from_coefficients(3, &eig.vectors.column(idx).into_owned());
            s += lam * trace_pairing(&v, &u).unwrap().norm_sqr();
        }
        let e = evaluate(&om, &u).unwrap();
        assert!((e - s).abs() < 1e-10 * (1.0 + s.abs()), "{e} vs {s}");
    }

    #[test]
    fn identity_metric_raising_is_relabeling() {
        let mut r = rng(3);
        let n = 2;
        let om = random_operator(&mut r, n);
        let t = to_indexed(&om, &HermitianMetric::identity(n)).unwrap();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let h = om.matrix()[(k * n + i, l * n + j)];
                        assert!((t.get(i, j, l, k) - h).norm() < 1e-14);
                    }
                }
            }
        }
        let zero = from_indexed(&IndexedCurvature::zeros(n), &random_metric(&mut r, n)).unwrap();
        assert_eq!(linalg::max_abs(zero.matrix()), 0.0);
    }

    #[test]
    fn indexed_round_trip() {
        let mut r = rng(4);
        for n in 1..=3 {
            let g = random_metric(&mut r, n);
            let om = random_operator(&mut r, n).with_metric(g.clone()).unwrap();
            let back = from_indexed(&to_indexed(&om, &g).unwrap(), &g).unwrap();
            assert!(rel_err(back.matrix(), om.matrix()) < 1e-12);
            let t = to_indexed(&om, &g).unwrap();
            assert!(t.symmetry_defect() < 1e-12);
        }
    }

    #[test]
    fn non_hermitian_input_is_rejected_or_repaired() {
        let mut h = CMat::identity(4, 4);
        h[(0, 1)] = c(1e-11, 0.0);
        let op = CurvatureOperator::new(h.clone(), HermitianMetric::identity(2)).unwrap();
        assert!(op.hermitian_defect() == 0.0);
        h[(0, 1)] = c(1e-3, 0.0);
        assert!(matches!(CurvatureOperator::new(h, HermitianMetric::identity(2)), Err(Error::NotHermitian { .. })));
    }

    #[test]
    fn square_examples() {
        let one = CurvatureOperator::new(CMat::from_element(1, 1, c(-3.0, 0.0)), HermitianMetric::identity(1)).unwrap();
        let sq = square_coord(&one, &HermitianMetric::identity(1)).unwrap();
        assert!((sq.matrix()[(0, 0)].re - 9.0).abs() < 1e-14);
        let id = CurvatureOperator::identity(2);
        let sq = square_coord(&id, &HermitianMetric::identity(2)).unwrap();
        assert!(rel_err(sq.matrix(), &CMat::identity(4, 4)) < 1e-15);
        let mut d = CMat::zeros(4, 4);
        d[(0, 0)] = c(2.0, 0.0);
        d[(1, 1)] = c(-1.0, 0.0);
        let op = CurvatureOperator::new(d, HermitianMetric::identity(2)).unwrap();
        let sq = square_spectral(&op, &HermitianMetric::identity(2)).unwrap();
        assert!((sq.matrix()[(0, 0)].re - 4.0).abs() < 1e-13);
        assert!((sq.matrix()[(1, 1)].re - 1.0).abs() < 1e-13);
        assert!(sq.matrix()[(2, 2)].norm() < 1e-13);
    }

    #[test]
    fn square_coord_matches_spectral_with_general_metric() {
        let mut r = rng(5);
        for n in 1..=3 {
            let g = random_metric(&mut r, n);
            let om = random_operator(&mut r, n).with_metric(g.clone()).unwrap();
            let a = square_coord(&om, &g).unwrap();
            let b = square_spectral(&om, &g).unwrap();
            assert!(rel_err(a.matrix(), b.matrix()) < 1e-10, "n = {n}");
        }
    }

    fn brute_force_sharp(p: &CMat, q: &CMat, n: usize) -> CMat {
        let sp = EndoSpace::new(n);
        let dim = n * n;
        let comm = |a: usize, b: usize| {
            let (k, i) = sp.pair(a);
            let (cc, aa) = sp.pair(b);
            sp.basis(k, i).commutator(&sp.basis(cc, aa)).coefficients()
        };
        let mut out = CMat::zeros(dim, dim);
        for a in 0..dim {
            for b in 0..dim {
                if p[(a, b)].norm() == 0.0 {
                    continue;
                }
                for cc in 0..dim {
                    let left = comm(a, cc);
                    for d in 0..dim {
                        let coef = p[(a, b)] * q[(cc, d)];
                        if coef.norm() == 0.0 {
                            continue;
                        }
                        let right = comm(b, d);
                        out += &left * right.adjoint() * coef;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn sharp_matches_basis_expansion() {
        let mut r = rng(6);
        let n = 2;
        let p = random_operator(&mut r, n);
        let q = random_operator(&mut r, n);
        let s = sharp(&p, &q).unwrap();
        let bf = brute_force_sharp(p.matrix(), q.matrix(), n);
        assert!(rel_err(s.matrix(), &bf) < 1e-12);
        let half = sharp(&p, &p).unwrap().scale(0.5);
        let sq = sharp_square(&p).unwrap();
        assert!(rel_err(sq.matrix(), half.matrix()) < 1e-12);
    }

    #[test]
    fn sharp_trivial_cases() {
        let id = CurvatureOperator::id_tensor_id(3);
        assert!(linalg::max_abs(sharp(&id, &id).unwrap().matrix()) < 1e-14);
        let mut r = rng(7);
        let one = random_operator(&mut r, 1);
        assert!(linalg::max_abs(sharp(&one, &one).unwrap().matrix()) < 1e-14);
        let v = random_endo(&mut r, 3);
        let rank_one = gram(3, &[v]);
        assert!(linalg::max_abs(sharp_square(&rank_one).unwrap().matrix()) < 1e-12);
    }

    #[test]
    fn sharp_is_metric_independent() {
        let mut r = rng(8);
        let p = random_operator(&mut r, 2);
        let q = random_operator(&mut r, 2);
        let a = sharp(&p, &q).unwrap();
        let b =
            sharp(&p.with_metric(random_metric(&mut r, 2)).unwrap(), &q.with_metric(random_metric(&mut r, 2)).unwrap())
                .unwrap();
        assert_eq!(a.matrix(), b.matrix());
    }

    #[test]
    fn ad_action_examples_and_leibniz() {
        let mut r = rng(9);
        let om = random_operator(&mut r, 3);
        let id_ad = ad_action(&Endo::identity(3), &om).unwrap();
        assert!(linalg::max_abs(id_ad.matrix()) < 1e-13);
        let v = random_endo(&mut r, 3);
        assert!(linalg::max_abs(ad_action(&v, &CurvatureOperator::zeros(3)).unwrap().matrix()) == 0.0);
        let u = random_endo(&mut r, 3);
        let vu = v.commutator(&u);
        let lhs = pair(&ad_action(&v, &om).unwrap(), &u, &u).unwrap()
            + pair(&om, &vu, &u).unwrap()
            + pair(&om, &u, &vu).unwrap();
        let scale = om.norm() * v.norm() * u.norm() * u.norm();
        assert!(lhs.norm() < 1e-11 * scale, "{lhs}");
    }

    #[test]
    fn gram_examples() {
        let s = EndoSpace::new(2);
        assert_eq!(linalg::max_abs(gram(2, &[]).matrix()), 0.0);
        let g = gram(2, &[s.basis(0, 1)]);
        assert!((evaluate(&g, &s.basis(1, 0)).unwrap() - 1.0).abs() < 1e-15);
        let mut r = rng(10);
        let a: Vec<Endo> = (0..4).map(|_| random_endo(&mut r, 3)).collect();
        let u = random_endo(&mut r, 3);
        let direct: f64 = a.iter().map(|ai| trace_pairing(ai, &u).unwrap().norm_sqr()).sum();
        assert!((evaluate(&gram(3, &a), &u).unwrap() - direct).abs() < 1e-11 * direct.max(1.0));
    }

    #[test]
    fn rank1_examples_and_griffiths_identity() {
        let g = HermitianMetric::identity(2);
        let e = |k: usize| CVec::from_fn(2, |i, _| if i == k { c(1.0, 0.0) } else { c(0.0, 0.0) });
        let u = rank1_endo(&e(0), &e(1), &g);
        assert_eq!(u, EndoSpace::new(2).basis(0, 1));
        assert_eq!(u.trace(), c(0.0, 0.0));
        let u = rank1_endo(&e(0), &e(0), &g);
        assert_eq!(u.trace(), c(1.0, 0.0));

        let mut r = rng(11);
        for n in 1..=3 {
            let g = random_metric(&mut r, n);
            let om = random_operator(&mut r, n).with_metric(g.clone()).unwrap();
            let t = to_indexed(&om, &g).unwrap();
            let xi = gaussian_vector(&mut r, n);
            let eta = gaussian_vector(&mut r, n);
            let u = rank1_endo(&xi, &eta, &g);
            let lhs = evaluate(&from_indexed(&t, &g).unwrap(), &u).unwrap();
            let rhs = t.bisectional(&xi, &eta);
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs.abs()));
            assert!((u.trace() - g.inner(&xi, &eta)).norm() < 1e-12);
            assert!(u.rank(1e-10) <= 1);
        }
    }

    #[test]
    fn frame_change_preserves_pairings() {
        let mut r = rng(12);
        let g = random_metric(&mut r, 3);
        let om = random_operator(&mut r, 3).with_metric(g).unwrap();
        let (unit, p) = om.to_unitary_frame().unwrap();
        assert!(unit.metric().is_identity());
        let u = random_endo(&mut r, 3);
        let u2 = endo_in_frame(&u, &p).unwrap();
        let a = evaluate(&om, &u).unwrap();
        let b = evaluate(&unit, &u2).unwrap();
        assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
        let check = om.metric().in_frame(&p).unwrap();
        assert!(rel_err(check.matrix(), &CMat::identity(3, 3)) < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let mut r = rng(13);
        let om = random_operator(&mut r, 2).with_metric(random_metric(&mut r, 2)).unwrap();
        let s = serde_json::to_string(&om).unwrap();
        let back: CurvatureOperator = serde_json::from_str(&s).unwrap();
        assert!(rel_err(back.matrix(), om.matrix()) < 1e-15);
        let t = to_indexed(&om, om.metric()).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        let back: IndexedCurvature = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        let bad = r#"{"n":2,"h":[[[1,0],[5,0],[0,0],[0,0]],[[0,0],[1,0],[0,0],[0,0]],[[0,0],[0,0],[1,0],[0,0]],[[0,0],[0,0],[0,0],[1,0]]]}"#;
        assert!(serde_json::from_str::<CurvatureOperator>(bad).is_err());
    }
}
