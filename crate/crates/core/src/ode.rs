//! Pointwise curvature ODE `dOmega/dt = Omega^2 + Omega^# + ad_v Omega + A A*` in a
//! unitary frame, and cone-invariance experiments built on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algebra::{self, CurvatureOperator, Endo, HermitianMetric};
use crate::cones::{self, ConeSpec, MarginOptions, SFamily};
use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat};
use crate::random;

/// A time-dependent input: constant, or piecewise constant with breakpoints `times`
/// (value `values[k]` holds on `[times[k], times[k+1])`).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule<T> {
    Constant(T),
    Piecewise { times: Vec<f64>, values: Vec<T> },
}

impl<T> Schedule<T> {
    pub fn at(&self, t: f64) -> &T {
        match self {
            Schedule::Constant(v) => v,
            Schedule::Piecewise { times, values } => {
                let k = times.iter().rposition(|&s| s <= t).unwrap_or(0);
                &values[k.min(values.len() - 1)]
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let Schedule::Piecewise { times, values } = self {
            if times.is_empty() || times.len() != values.len() {
                return Err(Error::InvalidConfig("piecewise schedule needs one value per breakpoint".into()));
            }
            if times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidConfig("piecewise schedule breakpoints must increase".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Integrator {
    Rk4,
    Rk45 { rtol: f64, atol: f64 },
}

#[derive(Clone, Debug)]
pub struct OdeConfig {
    pub v: Schedule<Endo>,
    pub a: Schedule<Vec<Endo>>,
    pub integrator: Integrator,
    /// Step size (initial step for the adaptive integrator); default `1e-3 / (1 + |Omega0|)`.
    pub dt: Option<f64>,
    pub t_end: f64,
    pub record_every: usize,
    /// Abort once `|Omega| > blowup_factor * max(|Omega0|, 1)`.
    pub blowup_factor: f64,
    /// Cones whose margins are recorded along the trajectory.
    pub cones: Vec<ConeSpec>,
    pub margin_opts: MarginOptions,
}

impl OdeConfig {
    pub fn new(n: usize, t_end: f64) -> Self {
        Self {
            v: Schedule::Constant(Endo::zeros(n)),
            a: Schedule::Constant(Vec::new()),
            integrator: Integrator::Rk4,
            dt: None,
            t_end,
            record_every: 1,
            blowup_factor: 1e8,
            cones: Vec::new(),
            margin_opts: MarginOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return Err(Error::InvalidConfig(format!("t_end must be >= 0, got {}", self.t_end)));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(Error::InvalidConfig(format!("dt must be > 0, got {dt}")));
            }
        }
        if let Integrator::Rk45 { rtol, atol } = self.integrator {
            if !(rtol > 0.0) || !(atol > 0.0) {
                return Err(Error::InvalidConfig("rk45 tolerances must be positive".into()));
            }
        }
        if self.record_every == 0 {
            return Err(Error::InvalidConfig("record_every must be >= 1".into()));
        }
        self.v.validate()?;
        self.a.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<CurvatureOperator>,
    /// One series per configured cone, aligned with `times`.
    pub margins: Vec<Vec<f64>>,
    pub blew_up: bool,
    /// Largest Hermitian defect of a step result before re-symmetrization.
    pub max_hermitian_drift: f64,
    pub steps: usize,
}

/// `phi(Omega) = Omega^2 + Omega^# + ad_v Omega + A A*`; requires a unitary frame.
pub fn phi_rhs(omega: &CurvatureOperator, v: &Endo, a: &[Endo]) -> Result<CurvatureOperator> {
    let n = omega.n();
    if !omega.metric().is_identity() {
        return Err(Error::InvalidConfig("phi_rhs expects an operator in a unitary frame".into()));
    }
    if v.n() != n {
        return Err(Error::DimensionMismatch { expected: n, got: v.n() });
    }
    if let Some(bad) = a.iter().find(|x| x.n() != n) {
        return Err(Error::DimensionMismatch { expected: n, got: bad.n() });
    }
    let id = HermitianMetric::identity(n);
    let sq = algebra::square_coord(omega, &id)?;
    let sh = algebra::sharp_square(omega)?;
    let ad = algebra::ad_action(v, omega)?;
    let gr = algebra::gram(n, a);
    sq.add(&sh)?.add(&ad)?.add(&gr)
}

/// Raw-matrix version of `phi_rhs` used inside the steppers.
fn rhs_matrix(h: &CMat, n: usize, v: &Endo, a: &[Endo]) -> Result<CMat> {
    let op = CurvatureOperator::from_matrix_unchecked(h.clone(), HermitianMetric::identity(n));
    Ok(phi_rhs(&op, v, a)?.matrix().clone())
}

struct Stepper<'a> {
    cfg: &'a OdeConfig,
    n: usize,
}

impl Stepper<'_> {
    fn f(&self, t: f64, h: &CMat) -> Result<CMat> {
        rhs_matrix(h, self.n, self.cfg.v.at(t), self.cfg.a.at(t))
    }

    fn rk4(&self, t: f64, h: &CMat, dt: f64) -> Result<CMat> {
        let half = c(0.5 * dt, 0.0);
        let k1 = self.f(t, h)?;
        let k2 = self.f(t + 0.5 * dt, &(h + &k1 * half))?;
        let k3 = self.f(t + 0.5 * dt, &(h + &k2 * half))?;
        let k4 = self.f(t + dt, &(h + &k3 * c(dt, 0.0)))?;
        Ok(h + (k1 + (k2 + k3) * c(2.0, 0.0) + k4) * c(dt / 6.0, 0.0))
    }

    /// Dormand-Prince 5(4) step; returns (5th-order solution, error estimate).
    fn dopri(&self, t: f64, h: &CMat, dt: f64) -> Result<(CMat, f64)> {
        const A: [[f64; 6]; 6] = [
            [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
            [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
            [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
            [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
            [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
        ];
        const CS: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
        const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
        const B4: [f64; 7] =
            [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];
        let mut ks: Vec<CMat> = Vec::with_capacity(7);
        ks.push(self.f(t, h)?);
        for s in 1..7 {
            let mut y = h.clone();
            for (j, k) in ks.iter().enumerate() {
                let coef = A[s - 1][j];
                if coef != 0.0 {
                    y += k * c(dt * coef, 0.0);
                }
            }
            ks.push(self.f(t + CS[s] * dt, &y)?);
        }
        let mut y5 = h.clone();
        let mut err = CMat::zeros(h.nrows(), h.ncols());
        for s in 0..7 {
            y5 += &ks[s] * c(dt * B5[s], 0.0);
            err += &ks[s] * c(dt * (B5[s] - B4[s]), 0.0);
        }
        let (rtol, atol) = match self.cfg.integrator {
            Integrator::Rk45 { rtol, atol } => (rtol, atol),
            Integrator::Rk4 => (1e-8, 1e-10),
        };
        let mut acc: f64 = 0.0;
        for (e, (y0, y1)) in err.iter().zip(h.iter().zip(y5.iter())) {
            let sc = atol + rtol * y0.norm().max(y1.norm());
            acc = acc.max(e.norm() / sc);
        }
        Ok((y5, acc))
    }
}

/// Integrate the curvature ODE from `omega0` (unitary frame).
pub fn integrate(omega0: &CurvatureOperator, cfg: &OdeConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let n = omega0.n();
    if !omega0.metric().is_identity() {
        return Err(Error::InvalidConfig("integrate expects an initial operator in a unitary frame".into()));
    }
    let norm0 = omega0.norm();
    let threshold = cfg.blowup_factor * norm0.max(1.0);
    let stepper = Stepper { cfg, n };
    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        margins: vec![Vec::new(); cfg.cones.len()],
        blew_up: false,
        max_hermitian_drift: 0.0,
        steps: 0,
    };
    let record = |traj: &mut Trajectory, t: f64, h: &CMat| -> Result<()> {
        let op = CurvatureOperator::from_matrix_unchecked(h.clone(), HermitianMetric::identity(n));
        for (k, cone) in cfg.cones.iter().enumerate() {
            traj.margins[k].push(cones::margin(&op, cone, &cfg.margin_opts)?.margin);
        }
        traj.times.push(t);
        traj.states.push(op);
        Ok(())
    };
    let mut h = omega0.matrix().clone();
    let mut t = 0.0;
    record(&mut traj, t, &h)?;
    let mut dt = cfg.dt.unwrap_or(1e-3 / (1.0 + norm0));
    let eps = 1e-12 * cfg.t_end.max(1.0);
    let mut since_record = 0usize;
    while t < cfg.t_end - eps {
        let step = dt.min(cfg.t_end - t);
        let next = match cfg.integrator {
            Integrator::Rk4 => stepper.rk4(t, &h, step)?,
            Integrator::Rk45 { .. } => {
                let (y, err) = stepper.dopri(t, &h, step)?;
                let factor = if err > 0.0 { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) } else { 5.0 };
                if err > 1.0 || !err.is_finite() {
                    dt = step * if err.is_finite() { factor } else { 0.2 };
                    if dt < 1e-14 * t.abs().max(1.0) {
                        return Err(Error::StepUnderflow { t, dt });
                    }
                    continue;
                }
                dt = step * factor;
                y
            }
        };
        let drift = linalg::hermitian_defect(&next) / linalg::max_abs(&next).max(1.0);
        traj.max_hermitian_drift = traj.max_hermitian_drift.max(drift);
        h = linalg::symmetrize(&next);
        t += step;
        traj.steps += 1;
        since_record += 1;
        let norm = linalg::frobenius(&h);
        if !norm.is_finite() || norm > threshold {
            traj.blew_up = true;
            if norm.is_finite() {
                record(&mut traj, t, &h)?;
            }
            return Ok(traj);
        }
        if since_record >= cfg.record_every || t >= cfg.t_end - eps {
            record(&mut traj, t, &h)?;
            since_record = 0;
        }
    }
    Ok(traj)
}

/// `<phi(Omega), u (x) ubar>` at a boundary pair; rejects pairs off the boundary.
pub fn p4_check(omega: &CurvatureOperator, u: &Endo, f: &cones::NiceFunction, v: &Endo, a: &[Endo]) -> Result<f64> {
    let defect = (algebra::evaluate(omega, u)? - f.value(u)?).abs();
    let tol = 1e-8 * omega.norm().max(1.0) * u.norm().powi(2).max(1.0);
    if defect > tol {
        return Err(Error::NotBoundary { defect, tol });
    }
    algebra::evaluate(&phi_rhs(omega, v, a)?, u)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub samples: usize,
    /// Fraction of trajectories started exactly on the boundary.
    pub boundary_fraction: f64,
    /// Size of the initial data.
    pub scale: f64,
    /// Draw a fresh piecewise-constant `v` and `A` per trajectory instead of using the config.
    pub random_drivers: bool,
    pub driver_scale: f64,
    /// Violation threshold, relative to `scale`.
    pub tolerance: f64,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            samples: 50,
            boundary_fraction: 0.5,
            scale: 1.0,
            random_drivers: true,
            driver_scale: 1.0,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleSummary {
    pub sample_id: usize,
    pub on_boundary: bool,
    pub initial_margin: f64,
    pub min_margin: f64,
    pub first_violation: Option<f64>,
    pub blew_up: bool,
    pub final_time: f64,
    /// Largest drop of the margin over one recorded step taken from a state within
    /// `1e-8` of the boundary, scaled by `|Omega|^2` (positive means decrease).
    pub worst_contact_drop: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentRow {
    pub sample_id: usize,
    pub t: f64,
    pub margin: f64,
    pub norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct InvarianceReport {
    pub cone: ConeSpec,
    pub n: usize,
    pub samples: Vec<SampleSummary>,
    pub worst_margin: f64,
    pub violations: usize,
    pub first_violation: Option<(usize, f64)>,
    pub rows: Vec<ExperimentRow>,
}

fn random_drivers<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    t_end: f64,
    scale: f64,
) -> (Schedule<Endo>, Schedule<Vec<Endo>>) {
    let mut v_vals = Vec::new();
    let mut a_vals = Vec::new();
    for _ in 0..2 {
        v_vals.push(random::random_endo(rng, n).scale(c(scale, 0.0)));
        let k = rng.random_range(0..=2);
        a_vals.push((0..k).map(|_| random::random_endo(rng, n).scale(c(scale, 0.0))).collect());
    }
    let times = vec![0.0, 0.5 * t_end];
    (Schedule::Piecewise { times: times.clone(), values: v_vals }, Schedule::Piecewise { times, values: a_vals })
}

/// Initial data with margin `>= 0`: either exactly on the boundary or shifted inside.
fn initial_state<R: Rng + ?Sized>(
    rng: &mut R,
    cone: &ConeSpec,
    n: usize,
    on_boundary: bool,
    scale: f64,
    opts: &MarginOptions,
) -> Result<CurvatureOperator> {
    if matches!(cone.s, SFamily::Origin) {
        return Ok(random::random_psd_operator(rng, n).scale(scale));
    }
    if on_boundary {
        return Ok(cones::boundary_sample(cone, n, rng, scale, opts)?.0);
    }
    let start = random::random_psd_operator(rng, n).scale(scale);
    let m = cones::margin(&start, cone, opts)?.margin;
    let unit_shift = if matches!(cone.s, SFamily::IdentityOnly) { n as f64 } else { 1.0 };
    let target = 0.1 * scale * rng.random::<f64>();
    if m.is_finite() {
        Ok(start.shift((m - target) / unit_shift))
    } else {
        Ok(start)
    }
}

/// Sample initial data in `C(S,F)`, integrate, and record margins along each trajectory.
pub fn invariance_experiment<R: Rng + ?Sized>(
    cone: &ConeSpec,
    n: usize,
    cfg: &OdeConfig,
    opts: &ExperimentOptions,
    rng: &mut R,
) -> Result<InvarianceReport> {
    cone.validate(n)?;
    let mut report = InvarianceReport {
        cone: cone.clone(),
        n,
        samples: Vec::new(),
        worst_margin: f64::INFINITY,
        violations: 0,
        first_violation: None,
        rows: Vec::new(),
    };
    let threshold = -opts.tolerance * opts.scale.max(1e-300);
    for id in 0..opts.samples {
        let seed: u64 = rng.random();
        let mut local = ChaCha8Rng::seed_from_u64(seed);
        let on_boundary = (id as f64) < opts.boundary_fraction * opts.samples as f64;
        let omega0 = initial_state(&mut local, cone, n, on_boundary, opts.scale, &cfg.margin_opts)?;
        let mut run_cfg = cfg.clone();
        run_cfg.cones = vec![cone.clone()];
        if opts.random_drivers {
            let (v, a) = random_drivers(&mut local, n, cfg.t_end, opts.driver_scale);
            run_cfg.v = v;
            run_cfg.a = a;
        }
        let traj = integrate(&omega0, &run_cfg)?;
        let margins = &traj.margins[0];
        let mut min_margin = f64::INFINITY;
        let mut first_violation = None;
        let mut worst_drop: f64 = f64::NEG_INFINITY;
        for (k, (&t, &m)) in traj.times.iter().zip(margins.iter()).enumerate() {
            let norm = traj.states[k].norm();
            report.rows.push(ExperimentRow { sample_id: id, t, margin: m, norm });
            min_margin = min_margin.min(m);
            if m < threshold && first_violation.is_none() {
                first_violation = Some(t);
            }
            if k + 1 < margins.len() && m.abs() <= 1e-8 {
                let drop = (m - margins[k + 1]) / norm.powi(2).max(1e-300);
                worst_drop = worst_drop.max(drop);
            }
        }
        if let Some(t) = first_violation {
            report.violations += 1;
            if report.first_violation.is_none() {
                report.first_violation = Some((id, t));
            }
        }
        report.worst_margin = report.worst_margin.min(min_margin);
        report.samples.push(SampleSummary {
            sample_id: id,
            on_boundary,
            initial_margin: margins[0],
            min_margin,
            first_violation,
            blew_up: traj.blew_up,
            final_time: *traj.times.last().unwrap_or(&0.0),
            worst_contact_drop: worst_drop,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::EndoSpace;
    use crate::random::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn phi_trivial_cases() {
        let z = phi_rhs(&CurvatureOperator::zeros(2), &Endo::zeros(2), &[]).unwrap();
        assert_eq!(linalg::max_abs(z.matrix()), 0.0);
        let mut r = rng(41);
        let lam = 0.7;
        let om = CurvatureOperator::new(CMat::from_element(1, 1, c(lam, 0.0)), HermitianMetric::identity(1)).unwrap();
        let v = random_endo(&mut r, 1);
        let a = random_endo(&mut r, 1);
        let out = phi_rhs(&om, &v, std::slice::from_ref(&a)).unwrap();
        let expect = lam * lam + a.matrix()[(0, 0)].norm_sqr();
        assert!((out.matrix()[(0, 0)].re - expect).abs() < 1e-14);
    }

    #[test]
    fn phi_matches_component_sum() {
        let mut r = rng(42);
        let n = 3;
        let om = random_operator(&mut r, n);
        let v = random_endo(&mut r, n);
        let a: Vec<Endo> = (0..2).map(|_| random_endo(&mut r, n)).collect();
        let out = phi_rhs(&om, &v, &a).unwrap();
        // independent re-summation: spectral square, sharp via the bilinear form
        let id = HermitianMetric::identity(n);
        let total = algebra::square_spectral(&om, &id).unwrap().matrix()
            + algebra::sharp(&om, &om).unwrap().scale(0.5).matrix()
            + algebra::ad_action(&v, &om).unwrap().matrix()
            + algebra::gram(n, &a).matrix();
        let err = linalg::frobenius(&(out.matrix() - &total)) / linalg::frobenius(&total);
        assert!(err < 1e-12);
    }

    #[test]
    fn phi_is_unitarily_equivariant() {
        let mut r = rng(43);
        let n = 3;
        let om = random_operator(&mut r, n);
        let v = random_endo(&mut r, n);
        let a: Vec<Endo> = (0..2).map(|_| random_endo(&mut r, n)).collect();
        let u = random_unitary(&mut r, n);
        let lhs = phi_rhs(&om, &v, &a).unwrap().ad_conjugate(&u).unwrap();
        let v2 = v.conjugate_by(&u).unwrap();
        let a2: Vec<Endo> = a.iter().map(|x| x.conjugate_by(&u).unwrap()).collect();
        let rhs = phi_rhs(&om.ad_conjugate(&u).unwrap(), &v2, &a2).unwrap();
        assert!(linalg::frobenius(&(lhs.matrix() - rhs.matrix())) < 1e-11 * lhs.norm().max(1.0));
    }

    #[test]
    fn zero_stays_zero() {
        let cfg = OdeConfig::new(2, 0.1);
        let tr = integrate(&CurvatureOperator::zeros(2), &cfg).unwrap();
        assert!(tr.states.iter().all(|s| linalg::max_abs(s.matrix()) == 0.0));
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
    }

    fn scalar_error(dt: f64) -> f64 {
        let om = CurvatureOperator::new(CMat::from_element(1, 1, c(1.0, 0.0)), HermitianMetric::identity(1)).unwrap();
        let mut cfg = OdeConfig::new(1, 0.5);
        cfg.dt = Some(dt);
        cfg.record_every = usize::MAX;
        let tr = integrate(&om, &cfg).unwrap();
        let last = tr.states.last().unwrap().matrix()[(0, 0)].re;
        (last - 2.0).abs()
    }

    #[test]
    fn scalar_blowup_solution() {
        assert!(scalar_error(1e-4) < 1e-6);
        let e1 = scalar_error(1e-2);
        let e2 = scalar_error(5e-3);
        let e3 = scalar_error(2.5e-3);
        let p1 = (e1 / e2).log2();
        let p2 = (e2 / e3).log2();
        assert!((p1 - 4.0).abs() < 0.3 && (p2 - 4.0).abs() < 0.3, "{p1} {p2}");
    }

    #[test]
    fn blowup_is_flagged() {
        let om = CurvatureOperator::new(CMat::from_element(1, 1, c(1.0, 0.0)), HermitianMetric::identity(1)).unwrap();
        let mut cfg = OdeConfig::new(1, 2.0);
        cfg.dt = Some(1e-3);
        cfg.blowup_factor = 1e2;
        let tr = integrate(&om, &cfg).unwrap();
        assert!(tr.blew_up);
        assert!(*tr.times.last().unwrap() < 1.0);
    }

    #[test]
    fn adaptive_matches_closed_form() {
        let om = CurvatureOperator::new(CMat::from_element(1, 1, c(1.0, 0.0)), HermitianMetric::identity(1)).unwrap();
        let mut cfg = OdeConfig::new(1, 0.5);
        cfg.integrator = Integrator::Rk45 { rtol: 1e-10, atol: 1e-12 };
        cfg.record_every = usize::MAX;
        let tr = integrate(&om, &cfg).unwrap();
        assert!((tr.states.last().unwrap().matrix()[(0, 0)].re - 2.0).abs() < 1e-7);
        assert!(tr.steps < 500);
    }

    #[test]
    fn hermitian_drift_is_small() {
        let mut r = rng(44);
        let om = random_psd_operator(&mut r, 2);
        let mut cfg = OdeConfig::new(2, 0.05);
        cfg.v = Schedule::Constant(random_endo(&mut r, 2));
        cfg.a = Schedule::Constant(vec![random_endo(&mut r, 2)]);
        let tr = integrate(&om, &cfg).unwrap();
        assert!(tr.max_hermitian_drift < 1e-12);
    }

    #[test]
    fn p4_examples() {
        let mut r = rng(45);
        let o = MarginOptions::default();
        let (om, u) = cones::boundary_sample(&ConeSpec::dual_nakano(), 2, &mut r, 1.0, &o).unwrap();
        let val = p4_check(&om, &u, &cones::NiceFunction::Zero, &Endo::zeros(2), &[]).unwrap();
        assert!(val >= -1e-8);
        for _ in 0..20 {
            let v = random_endo(&mut r, 2);
            let a = vec![random_endo(&mut r, 2)];
            assert!(p4_check(&om, &u, &cones::NiceFunction::Zero, &v, &a).unwrap() >= -1e-8);
            let ad = algebra::evaluate(&algebra::ad_action(&v, &om).unwrap(), &u).unwrap();
            assert!(ad.abs() < 1e-8);
        }
        let zero = CurvatureOperator::zeros(2);
        let u = random_endo(&mut r, 2);
        let v = random_endo(&mut r, 2);
        assert_eq!(p4_check(&zero, &u, &cones::NiceFunction::Zero, &v, &[]).unwrap(), 0.0);
        let s = EndoSpace::new(2);
        let off = CurvatureOperator::identity(2);
        assert!(matches!(
            p4_check(&off, &s.basis(0, 0), &cones::NiceFunction::Zero, &v, &[]),
            Err(Error::NotBoundary { .. })
        ));
    }

    #[test]
    fn identity_pairing_is_nondecreasing() {
        let mut r = rng(46);
        let cone = ConeSpec::identity(0.0);
        let mut cfg = OdeConfig::new(2, 0.05);
        cfg.cones = vec![cone.clone()];
        let opts = ExperimentOptions { samples: 4, ..Default::default() };
        let rep = invariance_experiment(&cone, 2, &cfg, &opts, &mut r).unwrap();
        for id in 0..4 {
            let series: Vec<f64> = rep.rows.iter().filter(|row| row.sample_id == id).map(|row| row.margin).collect();
            assert!(series.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        }
    }

    #[test]
    fn dual_nakano_experiment_small() {
        let mut r = rng(47);
        let cone = ConeSpec::dual_nakano();
        let cfg = OdeConfig::new(2, 0.05);
        let opts = ExperimentOptions { samples: 6, ..Default::default() };
        let rep = invariance_experiment(&cone, 2, &cfg, &opts, &mut r).unwrap();
        assert!(rep.worst_margin >= -1e-6, "{}", rep.worst_margin);
        assert_eq!(rep.violations, 0);
        for s in &rep.samples {
            assert!(s.worst_contact_drop <= 1e-7);
        }
    }

    #[test]
    fn piecewise_schedule_lookup() {
        let s = Schedule::Piecewise { times: vec![0.0, 1.0], values: vec![1, 2] };
        assert_eq!(*s.at(0.5), 1);
        assert_eq!(*s.at(1.0), 2);
        assert_eq!(*s.at(3.0), 2);
        let bad: Schedule<i32> = Schedule::Piecewise { times: vec![1.0, 0.0], values: vec![1, 2] };
        assert!(bad.validate().is_err());
    }
}
