//! Invariant sets `C(S,F) = { Omega : <Omega, s (x) sbar> >= F(s) for all s in S }`
//! and numerical certification of membership.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algebra::{self, endo_in_frame, CurvatureOperator, Endo};
use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, CVec};
use crate::random;

/// Built-in conjugation-invariant families `S` (always replaced by their closure).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SFamily {
    /// All of `End(V)` (dual-Nakano).
    FullAlgebra,
    /// Rank at most one (Griffiths).
    RankOne,
    /// Rank at most one and trace zero (orthogonal bisectional).
    RankOneTraceless,
    /// Rank at most `m` (dual-m).
    RankM(usize),
    /// The single element `Id`.
    IdentityOnly,
    /// `{ lambda Id }`.
    ScalingsOfIdentity,
    /// `{ 0 }`.
    Origin,
}

impl SFamily {
    pub fn name(&self) -> String {
        match self {
            SFamily::FullAlgebra => "full_algebra".into(),
            SFamily::RankOne => "rank_one".into(),
            SFamily::RankOneTraceless => "rank_one_traceless".into(),
            SFamily::RankM(m) => format!("rank_m({m})"),
            SFamily::IdentityOnly => "identity_only".into(),
            SFamily::ScalingsOfIdentity => "scalings_of_identity".into(),
            SFamily::Origin => "origin".into(),
        }
    }

    /// Families closed under positive scaling; their margins are taken on `|u|_F = 1`.
    pub fn is_scale_invariant(&self) -> bool {
        matches!(
            self,
            SFamily::FullAlgebra
                | SFamily::RankOne
                | SFamily::RankOneTraceless
                | SFamily::RankM(_)
                | SFamily::ScalingsOfIdentity
        )
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if let SFamily::RankM(m) = self {
            if *m == 0 || *m > n {
                return Err(Error::UnsupportedCone(format!("rank_m requires 1 <= m <= n, got m = {m}, n = {n}")));
            }
        }
        Ok(())
    }

    /// Membership of `u` in the closure of the family.
    pub fn contains(&self, u: &Endo, tol: f64) -> bool {
        let n = u.n();
        let scale = u.norm().max(1.0);
        match self {
            SFamily::FullAlgebra => true,
            SFamily::RankOne => u.rank(tol) <= 1,
            SFamily::RankOneTraceless => u.rank(tol) <= 1 && u.trace().norm() <= tol * scale,
            SFamily::RankM(m) => u.rank(tol) <= *m,
            SFamily::IdentityOnly => linalg::frobenius(&(u.matrix() - CMat::identity(n, n))) <= tol * scale,
            SFamily::ScalingsOfIdentity => {
                let lam = u.trace() / c(n as f64, 0.0);
                linalg::frobenius(&(u.matrix() - CMat::identity(n, n) * lam)) <= tol * scale
            }
            SFamily::Origin => u.norm() <= tol,
        }
    }
}

/// Limits of `lambda_i s_i` with `lambda_i -> 0`, `s_i in S`.
pub fn boundary_at_infinity(s: &SFamily) -> SFamily {
    match s {
        SFamily::IdentityOnly | SFamily::Origin => SFamily::Origin,
        other => other.clone(),
    }
}

/// Conjugation-invariant function `F` on `End(V)` with quadratic-scaling limit `F_infty`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NiceFunction {
    Zero,
    /// `F(s) = a |tr s|^2 + b`.
    TraceSquare {
        a: f64,
        b: f64,
    },
    /// `F(s) = sum |lambda_i(s)|` over eigenvalues.
    SpectralAbsSum,
}

impl NiceFunction {
    pub fn value(&self, u: &Endo) -> Result<f64> {
        Ok(match self {
            NiceFunction::Zero => 0.0,
            NiceFunction::TraceSquare { a, b } => a * u.trace().norm_sqr() + b,
            NiceFunction::SpectralAbsSum => linalg::general_eigenvalues(u.matrix())?.iter().map(|z| z.norm()).sum(),
        })
    }

    pub fn f_infty(&self, u: &Endo) -> f64 {
        match self {
            NiceFunction::TraceSquare { a, .. } => a * u.trace().norm_sqr(),
            _ => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if let NiceFunction::TraceSquare { a, b } = self {
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::UnsupportedCone("trace_square coefficients must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    pub s: SFamily,
    pub f: NiceFunction,
}

impl ConeSpec {
    pub fn new(s: SFamily, f: NiceFunction) -> Self {
        Self { s, f }
    }

    pub fn dual_nakano() -> Self {
        Self::new(SFamily::FullAlgebra, NiceFunction::Zero)
    }

    pub fn griffiths() -> Self {
        Self::new(SFamily::RankOne, NiceFunction::Zero)
    }

    pub fn orthogonal_bisectional() -> Self {
        Self::new(SFamily::RankOneTraceless, NiceFunction::Zero)
    }

    pub fn dual_m(m: usize) -> Self {
        Self::new(SFamily::RankM(m), NiceFunction::Zero)
    }

    pub fn identity(q: f64) -> Self {
        Self::new(SFamily::IdentityOnly, NiceFunction::TraceSquare { a: 0.0, b: q })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        self.s.validate(n)?;
        self.f.validate()?;
        let quadratic = !matches!(self.f, NiceFunction::SpectralAbsSum);
        let exact_identity = matches!(self.s, SFamily::IdentityOnly | SFamily::ScalingsOfIdentity | SFamily::Origin);
        if !quadratic && !exact_identity {
            return Err(Error::UnsupportedCone(format!(
                "spectral_abs_sum is only supported with identity-type families, not {}",
                self.s.name()
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let f = match &self.f {
            NiceFunction::Zero => "zero".to_string(),
            NiceFunction::TraceSquare { a, b } => format!("trace_square(a={a},b={b})"),
            NiceFunction::SpectralAbsSum => "spectral_abs_sum".to_string(),
        };
        format!("{}/{}", self.s.name(), f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginOptions {
    pub restarts: usize,
    pub max_iters: usize,
    /// Relative stagnation tolerance on the value during restarts.
    pub tol: f64,
    /// Iteration cap for refining the best restart.
    pub polish_iters: usize,
    pub seed: u64,
}

impl Default for MarginOptions {
    fn default() -> Self {
        Self { restarts: 32, max_iters: 200, tol: 1e-10, polish_iters: 20_000, seed: 0x5eed }
    }
}

#[derive(Clone, Debug)]
pub struct MembershipReport {
    pub margin: f64,
    /// Minimizing element, in the frame of the input operator.
    pub minimizer: Endo,
    /// True when the margin comes from an exact spectral or closed-form evaluation.
    pub certified: bool,
    pub restarts_used: usize,
    /// False when the refinement stage hit its iteration cap.
    pub converged: bool,
}

/// `inf { <Omega, u (x) ubar> - F(u) : u in S }`, normalized to `|u|_F = 1` for
/// scale-invariant families (in a unitary frame of the attached metric).
pub fn margin(omega: &CurvatureOperator, cone: &ConeSpec, opts: &MarginOptions) -> Result<MembershipReport> {
    let n = omega.n();
    cone.validate(n)?;
    let (unit, p) = omega.to_unitary_frame()?;
    let mut rep = margin_unitary(&unit, cone, opts)?;
    if !omega.metric().is_identity() {
        rep.minimizer = rep.minimizer.conjugate_by(&p)?;
    }
    Ok(rep)
}

/// Trace vector `t` with `tr u = t^T x(u)`.
fn trace_vector(n: usize) -> CVec {
    CVec::from_fn(n * n, |a, _| if a / n == a % n { c(1.0, 0.0) } else { c(0.0, 0.0) })
}

fn quadratic_parts(f: &NiceFunction) -> (f64, f64) {
    match f {
        NiceFunction::TraceSquare { a, b } => (*a, *b),
        _ => (0.0, 0.0),
    }
}

/// Endomorphism with pairing coordinates `conj(z)` (so that `evaluate = z* H z`).
fn endo_from_z(n: usize, z: &CVec) -> Endo {
    Endo::new(CMat::from_fn(n, n, |i, k| z[k * n + i].conj()))
}

fn margin_unitary(omega: &CurvatureOperator, cone: &ConeSpec, opts: &MarginOptions) -> Result<MembershipReport> {
    let n = omega.n();
    let (a, b) = quadratic_parts(&cone.f);
    let exact = |margin: f64, minimizer: Endo| MembershipReport {
        margin,
        minimizer,
        certified: true,
        restarts_used: 0,
        converged: true,
    };
    match &cone.s {
        SFamily::Origin => Ok(exact(-cone.f.value(&Endo::zeros(n))?, Endo::zeros(n))),
        SFamily::IdentityOnly => {
            let id = Endo::identity(n);
            Ok(exact(algebra::evaluate(omega, &id)? - cone.f.value(&id)?, id))
        }
        SFamily::ScalingsOfIdentity => {
            let u = Endo::identity(n).scale(c(1.0 / (n as f64).sqrt(), 0.0));
            Ok(exact(algebra::evaluate(omega, &u)? - cone.f.value(&u)?, u))
        }
        _ => {
            let t = trace_vector(n);
            let heff = omega.matrix() - &t * t.transpose() * c(a, 0.0);
            match &cone.s {
                SFamily::FullAlgebra => full_algebra(&heff, n, b),
                SFamily::RankM(m) if *m >= n => full_algebra(&heff, n, b),
                SFamily::RankOne => Ok(rank_one(&heff, n, b, opts)),
                SFamily::RankOneTraceless => {
                    if n == 1 {
                        // only u = 0 remains after normalization; the infimum is over an empty set
                        return Ok(MembershipReport {
                            margin: f64::INFINITY,
                            minimizer: Endo::zeros(1),
                            certified: true,
                            restarts_used: 0,
                            converged: true,
                        });
                    }
                    Ok(rank_one_traceless(&heff, n, b, opts))
                }
                SFamily::RankM(m) => rank_m(&heff, n, *m, b, opts),
                _ => unreachable!(),
            }
        }
    }
}

fn full_algebra(heff: &CMat, n: usize, b: f64) -> Result<MembershipReport> {
    let (lam, z) = linalg::lowest_eigenpair(heff)?;
    Ok(MembershipReport {
        margin: lam - b,
        minimizer: endo_from_z(n, &z),
        certified: true,
        restarts_used: 0,
        converged: true,
    })
}

fn lowest_vector(m: &CMat) -> CVec {
    linalg::lowest_eigenpair(m).map(|(_, v)| v).unwrap_or_else(|_| fallback_unit(m.nrows()))
}

fn fallback_unit(n: usize) -> CVec {
    CVec::from_fn(n, |i, _| if i == 0 { c(1.0, 0.0) } else { c(0.0, 0.0) })
}

struct RankOneState {
    xi: CVec,
    eta: CVec,
    value: f64,
}

// For u = xi eta^*: value(xi, eta) = eta^* M(xi) eta = psi^* N(eta) psi with psi = conj(xi).
fn rank_one_sweep(h: &CMat, n: usize, st: &mut RankOneState) {
    let mut m = CMat::zeros(n, n);
    for k in 0..n {
        for l in 0..n {
            let mut s = c(0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    s += h[(k * n + i, l * n + j)] * st.xi[i] * st.xi[j].conj();
                }
            }
            m[(k, l)] = s;
        }
    }
    st.eta = lowest_vector(&m);
    let mut nm = CMat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = c(0.0, 0.0);
            for k in 0..n {
                for l in 0..n {
                    s += h[(k * n + i, l * n + j)] * st.eta[k].conj() * st.eta[l];
                }
            }
            nm[(i, j)] = s;
        }
    }
    let psi = lowest_vector(&nm);
    st.value = (psi.adjoint() * &nm * &psi)[(0, 0)].re;
    st.xi = psi.map(|z| z.conj());
}

fn rank_one_endo(st: &RankOneState) -> Endo {
    let n = st.xi.len();
    Endo::new(CMat::from_fn(n, n, |i, k| st.xi[i] * st.eta[k].conj()))
}

/// Distance between unit endomorphisms modulo a global phase.
fn phase_distance(u: &Endo, v: &Endo) -> f64 {
    let ip: f64 =
        u.matrix().iter().zip(v.matrix().iter()).map(|(a, b)| a.conj() * b).sum::<num_complex::Complex64>().norm();
    (2.0 - 2.0 * ip).max(0.0).sqrt()
}

fn rank_one(h: &CMat, n: usize, b: f64, opts: &MarginOptions) -> MembershipReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let restarts = opts.restarts.max(1);
    let mut best: Option<RankOneState> = None;
    for _ in 0..restarts {
        let xi = random::unit_vector(&mut rng, n);
        let mut st = RankOneState { xi, eta: fallback_unit(n), value: f64::INFINITY };
        let mut prev = f64::INFINITY;
        for _ in 0..opts.max_iters {
            rank_one_sweep(h, n, &mut st);
            if (prev - st.value).abs() <= opts.tol * st.value.abs().max(1.0) {
                break;
            }
            prev = st.value;
        }
        if best.as_ref().is_none_or(|bs| st.value < bs.value) {
            best = Some(st);
        }
    }
    let mut st = best.expect("at least one restart");
    let mut converged = false;
    let mut u_prev = rank_one_endo(&st);
    for _ in 0..opts.polish_iters {
        let before = st.value;
        rank_one_sweep(h, n, &mut st);
        let u = rank_one_endo(&st);
        let moved = phase_distance(&u_prev, &u);
        u_prev = u;
        if moved < 1e-14 || ((before - st.value).abs() <= 1e-16 * st.value.abs().max(1.0) && moved < 1e-12) {
            converged = true;
            break;
        }
    }
    // alternating sweeps converge linearly and slowly near degenerate minima; finish with gradient steps
    let mut x = CMat::from_fn(n, 2, |i, k| if k == 0 { st.xi[i] } else { st.eta[i] });
    let scale = frame_norm(h).max(1.0);
    let (value, gn) = pair_descent(h, &mut x, PairManifold::Spheres, opts.polish_iters, 1e-14 * scale);
    let u = Endo::new(CMat::from_fn(n, n, |i, k| x[(i, 0)] * x[(k, 1)].conj()));
    converged |= gn <= 1e-10 * scale;
    MembershipReport { margin: value - b, minimizer: u, certified: false, restarts_used: restarts, converged }
}

/// Constraint set for the columns of `X = [xi eta]`.
#[derive(Clone, Copy)]
enum PairManifold {
    /// Unit columns (rank-one `u`).
    Spheres,
    /// Orthonormal columns (rank-one traceless `u`).
    Frames,
}

impl PairManifold {
    fn retract(self, x: &CMat) -> CMat {
        match self {
            PairManifold::Frames => orthonormal_columns(x),
            PairManifold::Spheres => {
                let mut y = x.clone();
                for mut col in y.column_iter_mut() {
                    let nrm = col.norm();
                    col /= c(nrm, 0.0);
                }
                y
            }
        }
    }

    fn project(self, x: &CMat, g: CMat) -> CMat {
        match self {
            PairManifold::Frames => {
                let xg = x.adjoint() * &g;
                let herm = (&xg + xg.adjoint()) * c(0.5, 0.0);
                g - x * herm
            }
            PairManifold::Spheres => {
                let mut out = g;
                for k in 0..2 {
                    let r = x.column(k).dotc(&out.column(k)).re;
                    let col = out.column(k) - x.column(k) * c(r, 0.0);
                    out.set_column(k, &col);
                }
                out
            }
        }
    }
}

// value and Riemannian gradient of (xi, eta) -> <H, xi eta^* (x) conj> on X = [xi eta]
fn pair_value_grad(h: &CMat, x: &CMat, mf: PairManifold) -> (f64, CMat) {
    let n = x.nrows();
    let (xi, eta) = (x.column(0), x.column(1));
    let mut m = CMat::zeros(n, n);
    let mut nm = CMat::zeros(n, n);
    for k in 0..n {
        for l in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let hv = h[(k * n + i, l * n + j)];
                    m[(k, l)] += hv * xi[i] * xi[j].conj();
                    nm[(i, j)] += hv * eta[k].conj() * eta[l];
                }
            }
        }
    }
    let value = (eta.adjoint() * &m * eta)[(0, 0)].re;
    let mut g = CMat::zeros(n, 2);
    g.set_column(0, &(nm.transpose() * xi));
    g.set_column(1, &(&m * eta));
    (value, mf.project(x, g))
}

fn frame_norm(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Armijo descent with Barzilai-Borwein trial steps; returns the value and the final gradient norm.
fn pair_descent(h: &CMat, x: &mut CMat, mf: PairManifold, iters: usize, gtol: f64) -> (f64, f64) {
    let (mut f, mut g) = pair_value_grad(h, x, mf);
    let mut alpha = 1.0 / frame_norm(h).max(1e-300);
    for _ in 0..iters {
        let gn = frame_norm(&g);
        if gn <= gtol {
            break;
        }
        let mut step = alpha;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = mf.retract(&(&*x - &g * c(step, 0.0)));
            let (ft, gt) = pair_value_grad(h, &trial, mf);
            // near the minimizer the value stalls at rounding level; fall back to gradient decrease
            let stalled = (f - ft).abs() <= 1e-14 * f.abs().max(1.0);
            if ft <= f - 1e-4 * step * gn * gn || (stalled && frame_norm(&gt) < gn) {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gnew)) = accepted else { break };
        let s = &xn - &*x;
        let y = &gnew - &g;
        let sy: f64 = s.iter().zip(y.iter()).map(|(a, b)| (a.conj() * b).re).sum();
        alpha = if sy.abs() > 1e-300 { frame_norm(&s).powi(2) / sy.abs() } else { step * 2.0 };
        *x = xn;
        f = fn_;
        g = gnew;
    }
    (f, frame_norm(&g))
}

/// Rank-one traceless endomorphisms `xi eta^*` with `eta ⟂ xi`: descent over orthonormal pairs.
/// Alternating sweeps cannot move here since fixing one factor pins the other when n = 2.
fn rank_one_traceless(h: &CMat, n: usize, b: f64, opts: &MarginOptions) -> MembershipReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let restarts = opts.restarts.max(1);
    let scale = frame_norm(h).max(1.0);
    let mut best: Option<(CMat, f64)> = None;
    for _ in 0..restarts {
        let mut x = orthonormal_columns(&random::gaussian_matrix(&mut rng, n, 2));
        let (f, _) = pair_descent(h, &mut x, PairManifold::Frames, opts.max_iters, 1e-8 * scale);
        if best.as_ref().is_none_or(|bs| f < bs.1) {
            best = Some((x, f));
        }
    }
    let (mut x, _) = best.expect("at least one restart");
    let (value, gn) = pair_descent(h, &mut x, PairManifold::Frames, opts.polish_iters, 1e-14 * scale);
    let u = Endo::new(CMat::from_fn(n, n, |i, k| x[(i, 0)] * x[(k, 1)].conj()));
    MembershipReport {
        margin: value - b,
        minimizer: u,
        certified: false,
        restarts_used: restarts,
        converged: gn <= 1e-10 * scale,
    }
}

fn orthonormal_columns(m: &CMat) -> CMat {
    m.clone().qr().q()
}

struct RankMState {
    x: CMat,
    y: CMat,
    value: f64,
}

// u = X Y^*, z[(k,i)] = sum_r conj(X[i,r]) Y[k,r], value = z^* H z.
fn rank_m_sweep(h: &CMat, n: usize, m: usize, st: &mut RankMState) -> Result<()> {
    let q = orthonormal_columns(&st.x);
    let mut cm = CMat::zeros(n * n, n * m);
    for k in 0..n {
        for i in 0..n {
            for r in 0..m {
                cm[(k * n + i, k * m + r)] = q[(i, r)].conj();
            }
        }
    }
    let (_, y) = linalg::lowest_eigenpair(&(cm.adjoint() * h * &cm))?;
    st.x = q;
    st.y = CMat::from_fn(n, m, |k, r| y[k * m + r]);
    let qy = orthonormal_columns(&st.y);
    let mut dm = CMat::zeros(n * n, n * m);
    for k in 0..n {
        for i in 0..n {
            for r in 0..m {
                dm[(k * n + i, i * m + r)] = qy[(k, r)];
            }
        }
    }
    let reduced = dm.adjoint() * h * &dm;
    let (val, w) = linalg::lowest_eigenpair(&reduced)?;
    st.y = qy;
    st.x = CMat::from_fn(n, m, |i, r| w[i * m + r].conj());
    st.value = val;
    Ok(())
}

fn rank_m_endo(st: &RankMState) -> Endo {
    Endo::new(&st.x * st.y.adjoint())
}

fn rank_m(h: &CMat, n: usize, m: usize, b: f64, opts: &MarginOptions) -> Result<MembershipReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let restarts = opts.restarts.max(1);
    let mut best: Option<RankMState> = None;
    for _ in 0..restarts {
        let x = orthonormal_columns(&random::gaussian_matrix(&mut rng, n, m));
        let mut st = RankMState { x, y: CMat::zeros(n, m), value: f64::INFINITY };
        let mut prev = f64::INFINITY;
        for _ in 0..opts.max_iters {
            rank_m_sweep(h, n, m, &mut st)?;
            if (prev - st.value).abs() <= opts.tol * st.value.abs().max(1.0) {
                break;
            }
            prev = st.value;
        }
        if best.as_ref().is_none_or(|bs| st.value < bs.value) {
            best = Some(st);
        }
    }
    let mut st = best.expect("at least one restart");
    let mut converged = false;
    let mut u_prev = rank_m_endo(&st);
    for _ in 0..opts.polish_iters {
        let before = st.value;
        rank_m_sweep(h, n, m, &mut st)?;
        let u = rank_m_endo(&st);
        let moved = phase_distance(&u_prev, &u);
        u_prev = u;
        if moved < 1e-14 || ((before - st.value).abs() <= 1e-16 * st.value.abs().max(1.0) && moved < 1e-12) {
            converged = true;
            break;
        }
    }
    let u = rank_m_endo(&st);
    Ok(MembershipReport { margin: st.value - b, minimizer: u, certified: false, restarts_used: restarts, converged })
}

/// `mu(S) = sup { mu : <Omega, s (x) sbar> >= mu |tr s|^2 on S }`.
pub fn mu_value(omega: &CurvatureOperator, s: &SFamily, opts: &MarginOptions) -> Result<f64> {
    let n = omega.n();
    s.validate(n)?;
    match s {
        SFamily::RankOneTraceless | SFamily::Origin => return Ok(f64::INFINITY),
        SFamily::IdentityOnly | SFamily::ScalingsOfIdentity => {
            return Ok(algebra::evaluate(omega, &Endo::identity(n))? / (n * n) as f64);
        }
        _ => {}
    }
    let (unit, _) = omega.to_unitary_frame()?;
    let scale = unit.norm().max(1.0);
    let feasible = |mu: f64| -> Result<bool> {
        let cone = ConeSpec::new(s.clone(), NiceFunction::TraceSquare { a: mu, b: 0.0 });
        Ok(margin_unitary(&unit, &cone, opts)?.margin >= -1e-12 * (scale + mu.abs() * (n * n) as f64))
    };
    // E_(0,0) has trace one, so mu <= H[0,0] in a unitary frame
    let mut hi = unit.matrix()[(0, 0)].re;
    let mut lo = -1e8 * scale;
    if !feasible(lo)? {
        return Ok(f64::NEG_INFINITY);
    }
    // smaller families have larger mu: start from the exact full-algebra value
    if !matches!(s, SFamily::FullAlgebra) {
        let full = mu_value(&unit, &SFamily::FullAlgebra, opts)?;
        if full.is_finite() && full > lo && feasible(full)? {
            lo = full;
        }
    }
    if feasible(hi)? {
        return Ok(hi);
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * scale {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Boundary pair `(Omega, u)`: `u in S` realizes the margin and `<Omega, u ubar> = F(u)`.
/// The operator is in a unitary frame (identity metric).
pub fn boundary_sample<R: Rng + ?Sized>(
    cone: &ConeSpec,
    n: usize,
    rng: &mut R,
    scale: f64,
    opts: &MarginOptions,
) -> Result<(CurvatureOperator, Endo)> {
    cone.validate(n)?;
    let supported = match cone.s {
        SFamily::Origin => false,
        SFamily::RankOneTraceless => n > 1,
        _ => true,
    };
    if !supported {
        return Err(Error::UnsupportedCone(format!("{} has no boundary samples for n = {n}", cone.label())));
    }
    let start = random::random_psd_operator(rng, n).scale(scale);
    // affine response of the margin to subtracting t * Id_{n^2}
    let unit_shift = match cone.s {
        SFamily::IdentityOnly => n as f64,
        _ => 1.0,
    };
    let m0 = margin(&start, cone, opts)?;
    let mut omega = start.shift(m0.margin / unit_shift);
    let rep = margin(&omega, cone, opts)?;
    let u = rep.minimizer;
    let defect = algebra::evaluate(&omega, &u)? - cone.f.value(&u)?;
    let uu = u.norm_sqr_or_one();
    omega = omega.shift(defect / uu);
    let tol = 1e-8 * scale.max(1.0);
    let check = margin(&omega, cone, opts)?;
    if check.margin.abs() <= tol {
        let defect = algebra::evaluate(&omega, &check.minimizer)? - cone.f.value(&check.minimizer)?;
        let u = check.minimizer;
        let omega = omega.shift(defect / u.norm_sqr_or_one());
        return Ok((omega, u));
    }
    // the minimizer moved; bracket the shift and bisect on the margin sign
    let f = |t: f64| -> Result<f64> { Ok(margin(&omega.shift(t), cone, opts)?.margin) };
    let mut lo = -scale.max(1.0);
    let mut hi = scale.max(1.0);
    let mut tries = 0;
    while f(lo)? < 0.0 || f(hi)? > 0.0 {
        lo *= 2.0;
        hi *= 2.0;
        tries += 1;
        if tries > 60 {
            return Err(Error::Bracketing("margin shift did not change sign".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let omega = omega.shift(lo);
    let rep = margin(&omega, cone, opts)?;
    Ok((omega, rep.minimizer))
}

impl Endo {
    fn norm_sqr_or_one(&self) -> f64 {
        let s = self.norm().powi(2);
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }
}

/// Change of frame helper for callers working with general metrics.
pub fn minimizer_in_frame(u: &Endo, p: &CMat) -> Result<Endo> {
    endo_in_frame(u, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{gram, EndoSpace, HermitianMetric};
    use crate::random::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Unit vectors `(cos t, sin t e^{i p})` on a grid covering CP^1.
    fn grid_unit_vectors(steps: usize) -> Vec<CVec> {
        let mut out = Vec::new();
        for a in 0..=steps {
            let theta = std::f64::consts::FRAC_PI_2 * a as f64 / steps as f64;
            for p in 0..(4 * steps) {
                let phi = 2.0 * std::f64::consts::PI * p as f64 / (4 * steps) as f64;
                out.push(CVec::from_vec(vec![
                    c(theta.cos(), 0.0),
                    c(theta.sin() * phi.cos(), theta.sin() * phi.sin()),
                ]));
            }
        }
        out
    }

    /// Slice `M(xi)[k,l] = Omega(xi, xibar, e_l, e_kbar)` computed from the indexed tensor.
    fn slice(t: &crate::IndexedCurvature, xi: &CVec) -> [[num_complex::Complex64; 2]; 2] {
        let mut m = [[c(0.0, 0.0); 2]; 2];
        for k in 0..2 {
            for l in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        m[k][l] += t.get(i, j, l, k) * xi[i] * xi[j].conj();
                    }
                }
            }
        }
        m
    }

    /// Griffiths minimum by a grid over `xi` with the closed-form 2x2 minimum over `eta`.
    fn grid_griffiths(om: &CurvatureOperator, steps: usize) -> f64 {
        let t = algebra::to_indexed(om, &HermitianMetric::identity(2)).unwrap();
        let mut best = f64::INFINITY;
        for xi in grid_unit_vectors(steps) {
            let m = slice(&t, &xi);
            let (a, d, b) = (m[0][0].re, m[1][1].re, m[0][1]);
            let lam = 0.5 * (a + d) - (0.25 * (a - d).powi(2) + b.norm_sqr()).sqrt();
            best = best.min(lam);
        }
        best
    }

    #[test]
    fn exact_family_examples() {
        let sp = EndoSpace::new(2);
        let all: Vec<Endo> = (0..2).flat_map(|k| (0..2).map(move |i| (k, i))).map(|(k, i)| sp.basis(k, i)).collect();
        let om = gram(2, &all);
        let r = margin(&om, &ConeSpec::dual_nakano(), &MarginOptions::default()).unwrap();
        assert!((r.margin - 1.0).abs() < 1e-12 && r.certified);
        let id = CurvatureOperator::id_tensor_id(3);
        let r = margin(&id, &ConeSpec::identity(0.0), &MarginOptions::default()).unwrap();
        assert!((r.margin - 9.0).abs() < 1e-12);
    }

    #[test]
    fn griffiths_matches_grid_search() {
        let mut r = rng(21);
        for _ in 0..3 {
            let om = random_psd_operator(&mut r, 2).sub(&CurvatureOperator::identity(2).scale(0.3)).unwrap();
            let rep = margin(&om, &ConeSpec::griffiths(), &MarginOptions::default()).unwrap();
            let grid = grid_griffiths(&om, 400);
            assert!(rep.margin <= grid + 1e-12);
            assert!((rep.margin - grid).abs() < 1e-4, "{} vs {}", rep.margin, grid);
        }
    }

    #[test]
    fn minimizer_realizes_margin() {
        let mut r = rng(22);
        let om = random_operator(&mut r, 3);
        for cone in
            [ConeSpec::dual_nakano(), ConeSpec::griffiths(), ConeSpec::orthogonal_bisectional(), ConeSpec::dual_m(2)]
        {
            let rep = margin(&om, &cone, &MarginOptions::default()).unwrap();
            let u = &rep.minimizer;
            assert!((u.norm() - 1.0).abs() < 1e-10);
            assert!(cone.s.contains(u, 1e-8), "{}", cone.label());
            let val = algebra::evaluate(&om, u).unwrap();
            assert!((val - rep.margin).abs() < 1e-10, "{}", cone.label());
        }
    }

    #[test]
    fn nesting_of_margins() {
        let mut r = rng(23);
        for _ in 0..5 {
            let om = random_operator(&mut r, 3);
            let o = MarginOptions::default();
            let dn = margin(&om, &ConeSpec::dual_nakano(), &o).unwrap().margin;
            let d2 = margin(&om, &ConeSpec::dual_m(2), &o).unwrap().margin;
            let gr = margin(&om, &ConeSpec::griffiths(), &o).unwrap().margin;
            let ob = margin(&om, &ConeSpec::orthogonal_bisectional(), &o).unwrap().margin;
            assert!(dn <= d2 + 1e-10 && d2 <= gr + 1e-10 && gr <= ob + 1e-10);
            let full = margin(&om, &ConeSpec::dual_m(3), &o).unwrap().margin;
            assert!((full - dn).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_m_one_agrees_with_rank_one() {
        let mut r = rng(24);
        let om = random_operator(&mut r, 3);
        let o = MarginOptions::default();
        let a = margin(&om, &ConeSpec::dual_m(1), &o).unwrap().margin;
        let b = margin(&om, &ConeSpec::griffiths(), &o).unwrap().margin;
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn conjugation_invariance_of_exact_margins() {
        let mut r = rng(25);
        let om = random_operator(&mut r, 3);
        let o = MarginOptions::default();
        for cone in [ConeSpec::dual_nakano(), ConeSpec::identity(0.7)] {
            let base = margin(&om, &cone, &o).unwrap().margin;
            let unitary = random_unitary(&mut r, 3);
            let m1 = margin(&om.ad_conjugate(&unitary).unwrap(), &cone, &o).unwrap().margin;
            assert!((m1 - base).abs() < 1e-10);
            let p = random_invertible(&mut r, 3);
            let m2 = margin(&om.in_frame(&p).unwrap(), &cone, &o).unwrap().margin;
            assert!((m2 - base).abs() < 1e-9);
        }
    }

    #[test]
    fn margin_with_general_metric_uses_unitary_frame() {
        let mut r = rng(26);
        let om = random_operator(&mut r, 2);
        let p = random_invertible(&mut r, 2);
        let moved = om.in_frame(&p).unwrap();
        let o = MarginOptions::default();
        let a = margin(&om, &ConeSpec::griffiths(), &o).unwrap();
        let b = margin(&moved, &ConeSpec::griffiths(), &o).unwrap();
        assert!((a.margin - b.margin).abs() < 1e-9);
        let val = algebra::evaluate(&moved, &b.minimizer).unwrap();
        assert!((val - b.margin).abs() < 1e-9);
    }

    #[test]
    fn trace_square_shifts() {
        let mut r = rng(27);
        let om = random_operator(&mut r, 2);
        let o = MarginOptions::default();
        let cone = ConeSpec::new(SFamily::FullAlgebra, NiceFunction::TraceSquare { a: 0.4, b: 0.1 });
        let rep = margin(&om, &cone, &o).unwrap();
        let u = &rep.minimizer;
        let val = algebra::evaluate(&om, u).unwrap() - cone.f.value(u).unwrap();
        assert!((val - rep.margin).abs() < 1e-10);
        let gcone = ConeSpec::new(SFamily::RankOne, NiceFunction::TraceSquare { a: 0.4, b: 0.1 });
        let rep = margin(&om, &gcone, &o).unwrap();
        let val = algebra::evaluate(&om, &rep.minimizer).unwrap() - gcone.f.value(&rep.minimizer).unwrap();
        assert!((val - rep.margin).abs() < 1e-10);
    }

    #[test]
    fn mu_value_examples() {
        let o = MarginOptions::default();
        let id = CurvatureOperator::id_tensor_id(2);
        assert!((mu_value(&id, &SFamily::IdentityOnly, &o).unwrap() - 1.0).abs() < 1e-14);
        for s in [SFamily::FullAlgebra, SFamily::RankOne, SFamily::IdentityOnly, SFamily::ScalingsOfIdentity] {
            let v = mu_value(&CurvatureOperator::zeros(2), &s, &o).unwrap();
            assert!(v.abs() < 1e-10, "{s:?}: {v}");
        }
        assert_eq!(mu_value(&CurvatureOperator::zeros(2), &SFamily::RankOneTraceless, &o).unwrap(), f64::INFINITY);
        // negative on traceless elements: no mu works
        let neg = CurvatureOperator::identity(2).scale(-1.0);
        assert_eq!(mu_value(&neg, &SFamily::FullAlgebra, &o).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn mu_value_rank_one_matches_grid() {
        let mut r = rng(28);
        let om = random_psd_operator(&mut r, 2).add(&CurvatureOperator::identity(2).scale(0.05)).unwrap();
        let o = MarginOptions::default();
        let mu = mu_value(&om, &SFamily::RankOne, &o).unwrap();
        // for fixed xi: min over eta of eta* M eta / |eta* xi|^2 = 1 / (xi* M^-1 xi)
        let t = algebra::to_indexed(&om, &HermitianMetric::identity(2)).unwrap();
        let mut best = f64::INFINITY;
        for xi in grid_unit_vectors(300) {
            let m = slice(&t, &xi);
            let mm = CMat::from_fn(2, 2, |k, l| m[k][l]);
            let inv = mm.try_inverse().unwrap();
            let q = (xi.adjoint() * inv * &xi)[(0, 0)].re;
            best = best.min(1.0 / q);
        }
        assert!(mu <= best + 1e-9);
        assert!((mu - best).abs() < 1e-3 * best.abs().max(1.0), "{mu} vs {best}");
    }

    #[test]
    fn boundary_samples_have_zero_margin() {
        let mut r = rng(29);
        let o = MarginOptions::default();
        for cone in [
            ConeSpec::dual_nakano(),
            ConeSpec::griffiths(),
            ConeSpec::orthogonal_bisectional(),
            ConeSpec::dual_m(2),
            ConeSpec::identity(0.5),
            ConeSpec::new(SFamily::ScalingsOfIdentity, NiceFunction::SpectralAbsSum),
        ] {
            let (om, u) = boundary_sample(&cone, 3, &mut r, 1.0, &o).unwrap();
            let m = margin(&om, &cone, &o).unwrap();
            assert!(m.margin.abs() <= 1e-8, "{}: {}", cone.label(), m.margin);
            let pairing = algebra::evaluate(&om, &u).unwrap() - cone.f.value(&u).unwrap();
            assert!(pairing.abs() <= 1e-10, "{}", cone.label());
        }
        let (om, u) = boundary_sample(&ConeSpec::dual_nakano(), 2, &mut r, 1.0, &o).unwrap();
        let (lam, z) = linalg::lowest_eigenpair(om.matrix()).unwrap();
        assert!(lam.abs() < 1e-8);
        let uz = endo_from_z(2, &z);
        assert!(phase_distance(&uz, &u) < 1e-6);
    }

    #[test]
    fn boundary_at_infinity_examples() {
        assert_eq!(boundary_at_infinity(&SFamily::RankOne), SFamily::RankOne);
        assert_eq!(boundary_at_infinity(&SFamily::IdentityOnly), SFamily::Origin);
        // lambda * s with rank 2 elements converging to a rank <= 2 limit
        let mut r = rng(30);
        let s = SFamily::RankM(2);
        let limit = boundary_at_infinity(&s);
        for _ in 0..20 {
            let x = gaussian_matrix(&mut r, 3, 2);
            let y = gaussian_matrix(&mut r, 3, 2);
            let mut y2 = y.clone();
            // second column collapses as lambda -> 0, limit has rank 1
            y2.set_column(1, &(y.column(1) * c(1e-14, 0.0)));
            let lam = 1e-6;
            let s_i = Endo::new(&x * y2.adjoint() * c(1.0 / lam, 0.0));
            assert!(s.contains(&s_i, 1e-10));
            let lim = s_i.scale(c(lam, 0.0));
            assert!(limit.contains(&lim, 1e-10));
            assert!(lim.rank(1e-10) <= 2);
        }
        assert!(SFamily::Origin.contains(&Endo::zeros(3), 1e-12));
    }

    #[test]
    fn nice_function_laws() {
        let mut r = rng(31);
        let fs = [NiceFunction::Zero, NiceFunction::TraceSquare { a: 0.3, b: -0.2 }, NiceFunction::SpectralAbsSum];
        let s = random_endo(&mut r, 3);
        for f in &fs {
            let p = random_invertible(&mut r, 3);
            let a = f.value(&s).unwrap();
            let b = f.value(&s.conjugate_by(&p).unwrap()).unwrap();
            assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
            let mut last = f64::INFINITY;
            for k in 1..10 {
                let lam = 10f64.powi(-k);
                let s_i = s.scale(c(1.0 / lam, 0.0));
                let err = (f.value(&s_i).unwrap() * lam * lam - f.f_infty(&s)).abs();
                assert!(err <= last + 1e-12);
                last = err;
            }
            assert!(last < 1e-8 * (1.0 + f.value(&s).unwrap()));
        }
    }

    #[test]
    fn midpoint_convexity() {
        let mut r = rng(32);
        let o = MarginOptions::default();
        let cone = ConeSpec::griffiths();
        for _ in 0..5 {
            let a = random_psd_operator(&mut r, 2);
            let b = random_psd_operator(&mut r, 2).sub(&CurvatureOperator::identity(2).scale(0.01)).unwrap();
            let ma = margin(&a, &cone, &o).unwrap().margin;
            let mb = margin(&b, &cone, &o).unwrap().margin;
            if ma >= 0.0 && mb >= 0.0 {
                let mid = a.add(&b).unwrap().scale(0.5);
                assert!(margin(&mid, &cone, &o).unwrap().margin >= -1e-8);
            }
        }
    }

    #[test]
    fn unsupported_combinations() {
        let om = CurvatureOperator::zeros(2);
        let bad = ConeSpec::new(SFamily::RankOne, NiceFunction::SpectralAbsSum);
        assert!(matches!(margin(&om, &bad, &MarginOptions::default()), Err(Error::UnsupportedCone(_))));
        assert!(margin(&om, &ConeSpec::dual_m(3), &MarginOptions::default()).is_err());
    }

    #[test]
    fn json_cone_spec() {
        let s = r#"{"s": "rank_one", "f": {"kind": "trace_square", "a": 0.0, "b": 0.0}}"#;
        let c: ConeSpec = serde_json::from_str(s).unwrap();
        assert_eq!(c.s, SFamily::RankOne);
        let s = r#"{"s": {"rank_m": 2}, "f": {"kind": "zero"}}"#;
        let c: ConeSpec = serde_json::from_str(s).unwrap();
        assert_eq!(c.s, SFamily::RankM(2));
    }
}
