//! The Hermitian curvature flow `dg/dt = -S2 - Q` on torus charts.

use serde::{Deserialize, Serialize};

use crate::algebra::{self, CurvatureOperator, Endo};
use crate::cones::{self, ConeSpec, MarginOptions};
use crate::error::{Error, Result};
use crate::geometry::{raised_matrix, store_raised, Geometry, MetricField, MetricPreset, PD_FLOOR};
use crate::grid::{Differentiator, Field};
use crate::linalg::{c, CMat};
use crate::tensor::{Slot, TensorField};

/// `-S2_{i jbar} - Q_{i jbar}` in the metric's component layout.
pub fn hcf_rhs(geom: &Geometry) -> Vec<Field> {
    let s2 = geom.ricci().s2;
    let q = geom.q_term();
    s2.iter().zip(&q).map(|(a, b)| a.iter().zip(b).map(|(x, y)| -x - y).collect()).collect()
}

/// Flow velocity of a metric field, optionally de-aliased.
pub fn velocity(metric: &MetricField, diff: &Differentiator, pd_floor: f64, dealias: bool) -> Result<Vec<Field>> {
    let geom = Geometry::with_floor(metric, diff, pd_floor)?;
    let mut v = hcf_rhs(&geom);
    if dealias {
        for f in v.iter_mut() {
            diff.dealias(f)?;
        }
    }
    Ok(v)
}

/// The five terms of `dOmega/dt = Delta^T Omega + Omega^2 + Omega^# + D(nabla T) + ad_v Omega`,
/// each with slots `(i, jbar, lbar, k)`.
#[derive(Clone, Debug)]
pub struct CurvatureRhs {
    pub laplacian: TensorField,
    pub square: TensorField,
    pub sharp: TensorField,
    pub dnabla_t: TensorField,
    pub ad_v: TensorField,
}

impl CurvatureRhs {
    pub fn total(&self) -> Result<TensorField> {
        self.laplacian.add(&self.square)?.add(&self.sharp)?.add(&self.dnabla_t)?.add(&self.ad_v)
    }
}

/// The endomorphism `v` of the `ad_v Omega` term at point `p`.
///
/// Its components are `v_a^b = -(1/2) S4_{a sbar} g^{b sbar}` with indices composed as
/// `(vu)_a^c = v_a^b u_b^c`; in the matrix convention of [`Endo`] (`entries[(b, a)] = u_a^b`)
/// that composition is reversed, so the returned matrix is `entries[(b, a)] = -v_a^b`.
pub fn ad_vector(geom: &Geometry, s4: &[Field], p: usize) -> Endo {
    let n = geom.n();
    let ginv = geom.inverse_metric();
    Endo::new(CMat::from_fn(n, n, |b, a| {
        let mut s = c(0.0, 0.0);
        for q in 0..n {
            s += s4[a * n + q][p] * ginv[b * n + q][p];
        }
        s * 0.5
    }))
}

/// Assemble the clean curvature evolution right-hand side pointwise.
pub fn curvature_rhs_clear(geom: &Geometry) -> Result<CurvatureRhs> {
    let n = geom.n();
    let len = geom.len();
    let raised = geom.raised_curvature();
    let laplacian = geom.laplacian_t(&raised)?;
    let dnabla_t = geom.dnabla_t_term()?;
    let ricci = geom.ricci();
    let blank = || vec![vec![c(0.0, 0.0); len]; n.pow(4)];
    let (mut sq, mut sh, mut ad) = (blank(), blank(), blank());
    for p in 0..len {
        let g = geom.metric_at(p)?;
        let op = CurvatureOperator::from_matrix_unchecked(raised_matrix(&raised, p), g.clone());
        store_raised(&mut sq, n, p, algebra::square_coord(&op, &g)?.matrix());
        store_raised(&mut sh, n, p, algebra::sharp_square(&op)?.matrix());
        let v = ad_vector(geom, &ricci.s4, p);
        store_raised(&mut ad, n, p, algebra::ad_action(&v, &op)?.matrix());
    }
    let sig = vec![Slot::Lower, Slot::LowerBar, Slot::UpperBar, Slot::Upper];
    Ok(CurvatureRhs {
        laplacian,
        square: TensorField::new(n, sig.clone(), sq)?,
        sharp: TensorField::new(n, sig.clone(), sh)?,
        dnabla_t,
        ad_v: TensorField::new(n, sig, ad)?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeIntegrator {
    #[default]
    Rk4,
    Euler,
}

/// Quantities evaluated along a flow run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Monitors {
    /// `inf shat` every step, plus the centered-difference residual of
    /// `d shat/dt = Delta shat + |S3|^2 + |div T|^2 / 2`.
    pub shat_inf: bool,
    /// Worst pointwise margin per cone at recorded steps.
    pub cones: Vec<ConeSpec>,
    /// `sup |rho - rho^T - d alpha|` every step.
    pub rho_check: bool,
    /// Centered-difference `dOmega/dt` against [`curvature_rhs_clear`] at recorded steps.
    pub consistency: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeConfig {
    /// Time step; `None` uses the stability cap of the initial metric.
    pub dt: Option<f64>,
    pub t_end: f64,
    pub integrator: TimeIntegrator,
    pub monitors: Monitors,
    /// Snapshot and cone-monitor cadence in steps.
    pub record_every: usize,
    /// Constant `c_h` of the stability cap.
    pub cfl_factor: f64,
    pub pd_floor: f64,
    /// Two-thirds de-aliasing of the velocity (spectral backend only).
    pub dealias: bool,
    /// Abort once `sup |g| > blowup_factor * sup |g0|`.
    pub blowup_factor: f64,
    pub margin_opts: MarginOptions,
}

impl Default for PdeConfig {
    fn default() -> Self {
        Self {
            dt: None,
            t_end: 0.01,
            integrator: TimeIntegrator::Rk4,
            monitors: Monitors { shat_inf: true, ..Monitors::default() },
            record_every: 10,
            cfl_factor: 0.2,
            pd_floor: PD_FLOOR,
            dealias: true,
            blowup_factor: 1e6,
            margin_opts: MarginOptions { restarts: 8, ..MarginOptions::default() },
        }
    }
}

impl PdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidConfig(format!("t_end must be positive, got {}", self.t_end)));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
            }
        }
        if self.record_every == 0 {
            return Err(Error::InvalidConfig("record_every must be at least 1".into()));
        }
        if !(self.cfl_factor > 0.0) || !(self.pd_floor > 0.0) || !(self.blowup_factor > 1.0) {
            return Err(Error::InvalidConfig("cfl_factor, pd_floor must be positive and blowup_factor > 1".into()));
        }
        Ok(())
    }
}

/// `c_h h^2 lambda_min(g) / (1 + h^2 sup|Omega|)` with `h` the smallest grid spacing.
pub fn stability_cap(geom: &Geometry, metric: &MetricField, cfl_factor: f64) -> Result<f64> {
    let h = metric.chart().min_spacing();
    let lam = metric.min_eigenvalue()?;
    Ok(cfl_factor * h * h * lam / (1.0 + h * h * geom.curvature_sup()))
}

/// Right-hand side of `d shat/dt = Delta shat + |S3|^2 + |div T|^2 / 2`.
pub fn shat_rhs(geom: &Geometry) -> Result<Vec<f64>> {
    let ricci = geom.ricci();
    let shat: Field = ricci.shat.iter().map(|&x| c(x, 0.0)).collect();
    let lap = geom.scalar_laplacian(&shat)?;
    let s3 = geom.s3_norm_sq(&ricci.s3);
    let dv = geom.div_torsion_norm_sq(&geom.div_torsion()?);
    Ok((0..geom.len()).map(|p| lap[p].re + s3[p] + 0.5 * dv[p]).collect())
}

/// Worst pointwise margin of `cone` over the grid, evaluated in Cholesky unitary frames.
pub fn pointwise_margin(geom: &Geometry, cone: &ConeSpec, opts: &MarginOptions) -> Result<f64> {
    let mut worst = f64::INFINITY;
    for p in 0..geom.len() {
        let rep = cones::margin(&geom.operator_at(p)?, cone, opts)?;
        worst = worst.min(rep.margin);
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConeSeries {
    pub label: String,
    pub times: Vec<f64>,
    pub worst_margin: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct FlowRecord {
    pub dt: f64,
    /// Time of every step, starting at 0.
    pub times: Vec<f64>,
    pub min_eig: Vec<f64>,
    pub shat_inf: Vec<f64>,
    pub sc_inf: Vec<f64>,
    /// `(t, sup residual)` of the scalar evolution identity, from the second step on.
    pub shat_residual: Vec<(f64, f64)>,
    pub rho_residual: Vec<f64>,
    pub cones: Vec<ConeSeries>,
    /// `(t, sup |centered dOmega/dt - clean rhs|)`.
    pub consistency: Vec<(f64, f64)>,
    pub snapshots: Vec<(f64, MetricField)>,
}

impl FlowRecord {
    /// Long-format rows `(monitor, t, value)`.
    pub fn rows(&self) -> Vec<(String, f64, f64)> {
        let mut rows = Vec::new();
        for (i, &t) in self.times.iter().enumerate() {
            rows.push(("min_eig_g".to_string(), t, self.min_eig[i]));
            if let Some(v) = self.shat_inf.get(i) {
                rows.push(("shat_inf".to_string(), t, *v));
                rows.push(("sc_inf".to_string(), t, self.sc_inf[i]));
            }
            if let Some(v) = self.rho_residual.get(i) {
                rows.push(("rho_residual".to_string(), t, *v));
            }
        }
        for &(t, v) in &self.shat_residual {
            rows.push(("shat_evolution_residual".to_string(), t, v));
        }
        for series in &self.cones {
            for (t, v) in series.times.iter().zip(&series.worst_margin) {
                rows.push((format!("margin:{}", series.label), *t, *v));
            }
        }
        for &(t, v) in &self.consistency {
            rows.push(("consistency".to_string(), t, v));
        }
        rows
    }
}

fn rk_stage(
    metric: &MetricField,
    diff: &Differentiator,
    cfg: &PdeConfig,
    first: Vec<Field>,
    dt: f64,
    t: f64,
) -> Result<MetricField> {
    let wrap = |e: Error| match e {
        Error::SingularMetric { min_eig } => Error::PositivityLoss { t, min_eig, floor: cfg.pd_floor },
        other => other,
    };
    match cfg.integrator {
        TimeIntegrator::Euler => metric.axpy(dt, &first, cfg.pd_floor).map_err(wrap),
        TimeIntegrator::Rk4 => {
            let k1 = first;
            let m2 = metric.axpy(0.5 * dt, &k1, cfg.pd_floor).map_err(wrap)?;
            let k2 = velocity(&m2, diff, cfg.pd_floor, cfg.dealias).map_err(wrap)?;
            let m3 = metric.axpy(0.5 * dt, &k2, cfg.pd_floor).map_err(wrap)?;
            let k3 = velocity(&m3, diff, cfg.pd_floor, cfg.dealias).map_err(wrap)?;
            let m4 = metric.axpy(dt, &k3, cfg.pd_floor).map_err(wrap)?;
            let k4 = velocity(&m4, diff, cfg.pd_floor, cfg.dealias).map_err(wrap)?;
            let inc: Vec<Field> = (0..k1.len())
                .map(|q| (0..k1[q].len()).map(|p| (k1[q][p] + (k2[q][p] + k3[q][p]) * 2.0 + k4[q][p]) / 6.0).collect())
                .collect();
            metric.axpy(dt, &inc, cfg.pd_floor).map_err(wrap)
        }
    }
}

fn sup_abs(m: &MetricField) -> f64 {
    m.comps().iter().flatten().fold(0.0, |a, z| a.max(z.norm()))
}

/// Explicit time stepping of the flow with the configured monitors.
pub fn evolve(g0: &MetricField, diff: &Differentiator, cfg: &PdeConfig) -> Result<FlowRecord> {
    cfg.validate()?;
    for cone in &cfg.monitors.cones {
        cone.validate(g0.n())?;
    }
    let geom0 = Geometry::with_floor(g0, diff, cfg.pd_floor)?;
    let cap = stability_cap(&geom0, g0, cfg.cfl_factor)?;
    drop(geom0);
    let dt = match cfg.dt {
        Some(dt) if dt > cap * (1.0 + 1e-12) => {
            return Err(Error::InvalidConfig(format!("dt = {dt:.3e} exceeds the stability cap {cap:.3e}")));
        }
        Some(dt) => dt,
        None => cap,
    };
    let steps = ((cfg.t_end / dt) - 1e-9).ceil().max(1.0) as usize;
    let g_scale = sup_abs(g0);
    let mut rec = FlowRecord { dt, ..FlowRecord::default() };
    rec.cones = cfg
        .monitors
        .cones
        .iter()
        .map(|cone| ConeSeries { label: cone.label(), times: vec![], worst_margin: vec![] })
        .collect();

    let mut metric = g0.clone();
    // (shat, rhs) of the two previous steps for the centered residual
    let mut shat_hist: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    // consistency monitor: Omega_{k-1}, and (Omega_{k-2}, clean rhs at k-1) when step k-1 is checked
    let mut prev_omega: Option<TensorField> = None;
    let mut pending: Option<(TensorField, TensorField)> = None;

    for k in 0..=steps {
        let t = k as f64 * dt;
        let geom = Geometry::with_floor(&metric, diff, cfg.pd_floor).map_err(|e| match e {
            Error::SingularMetric { min_eig } => Error::PositivityLoss { t, min_eig, floor: cfg.pd_floor },
            other => other,
        })?;
        rec.times.push(t);
        rec.min_eig.push(metric.min_eigenvalue()?);
        let recorded = k % cfg.record_every == 0 || k == steps;

        if cfg.monitors.shat_inf || cfg.monitors.rho_check {
            let ricci = geom.ricci();
            if cfg.monitors.shat_inf {
                rec.shat_inf.push(ricci.shat.iter().cloned().fold(f64::INFINITY, f64::min));
                rec.sc_inf.push(ricci.sc.iter().cloned().fold(f64::INFINITY, f64::min));
                let rhs = shat_rhs(&geom)?;
                if shat_hist.len() == 2 {
                    let (ref s_prev2, _) = shat_hist[0];
                    let (_, ref r_prev) = shat_hist[1];
                    let res = (0..geom.len())
                        .map(|p| ((ricci.shat[p] - s_prev2[p]) / (2.0 * dt) - r_prev[p]).abs())
                        .fold(0.0, f64::max);
                    rec.shat_residual.push((t - dt, res));
                    shat_hist.remove(0);
                }
                shat_hist.push((ricci.shat.clone(), rhs));
            }
            if cfg.monitors.rho_check {
                rec.rho_residual.push(geom.lee_rho(&ricci)?.residual);
            }
        }

        if cfg.monitors.consistency {
            let omega = geom.raised_curvature();
            if let Some((older, rhs)) = pending.take() {
                let fd = omega.sub(&older)?.scale(c(0.5 / dt, 0.0));
                rec.consistency.push((t - dt, fd.sub(&rhs)?.max_abs()));
            }
            if recorded && k < steps {
                if let Some(prev) = prev_omega.take() {
                    pending = Some((prev, curvature_rhs_clear(&geom)?.total()?));
                }
            }
            prev_omega = Some(omega);
        }

        if recorded {
            for (series, cone) in rec.cones.iter_mut().zip(&cfg.monitors.cones) {
                series.times.push(t);
                series.worst_margin.push(pointwise_margin(&geom, cone, &cfg.margin_opts)?);
            }
            rec.snapshots.push((t, metric.clone()));
        }
        if k == steps {
            break;
        }

        let mut v = hcf_rhs(&geom);
        drop(geom);
        if cfg.dealias {
            for f in v.iter_mut() {
                diff.dealias(f)?;
            }
        }
        metric = rk_stage(&metric, diff, cfg, v, dt, t)?;
        let norm = sup_abs(&metric);
        if !norm.is_finite() || norm > cfg.blowup_factor * g_scale {
            return Err(Error::BlowUp { t: t + dt, norm });
        }
    }
    Ok(rec)
}

/// Monotonicity summary of `inf shat`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShatReport {
    pub times: Vec<f64>,
    pub inf: Vec<f64>,
    /// Most negative step-to-step change of `inf shat` (0 if never decreasing).
    pub worst_decrease: f64,
    pub monotone: bool,
    /// Largest centered-difference residual of the scalar evolution identity.
    pub max_residual: f64,
}

pub fn shat_monitor(record: &FlowRecord, tol: f64) -> Result<ShatReport> {
    if record.shat_inf.len() != record.times.len() {
        return Err(Error::InvalidConfig("flow record was produced without the shat monitor".into()));
    }
    let worst_decrease = record.shat_inf.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::min);
    Ok(ShatReport {
        times: record.times.clone(),
        inf: record.shat_inf.clone(),
        worst_decrease,
        monotone: worst_decrease >= -tol,
        max_residual: record.shat_residual.iter().map(|r| r.1).fold(0.0, f64::max),
    })
}

/// Worst pointwise margins per cone at every snapshot of `record`.
pub fn pointwise_cone_monitor(
    record: &FlowRecord,
    cones: &[ConeSpec],
    diff: &Differentiator,
    opts: &MarginOptions,
) -> Result<Vec<ConeSeries>> {
    let mut out: Vec<ConeSeries> =
        cones.iter().map(|cone| ConeSeries { label: cone.label(), times: vec![], worst_margin: vec![] }).collect();
    for (t, metric) in &record.snapshots {
        let geom = Geometry::new(metric, diff)?;
        for (series, cone) in out.iter_mut().zip(cones) {
            series.times.push(*t);
            series.worst_margin.push(pointwise_margin(&geom, cone, opts)?);
        }
    }
    Ok(out)
}

/// Centered-difference check of the clean curvature evolution at `t = dt`:
/// two RK4 steps from `g0` without de-aliasing, then
/// `sup |(Omega(2 dt) - Omega(0)) / (2 dt) - rhs(g(dt))|`.
pub fn consistency_error(g0: &MetricField, diff: &Differentiator, dt: f64) -> Result<f64> {
    let cfg = PdeConfig { dealias: false, ..PdeConfig::default() };
    let step = |m: &MetricField, t: f64| -> Result<MetricField> {
        let v = velocity(m, diff, cfg.pd_floor, false)?;
        rk_stage(m, diff, &cfg, v, dt, t)
    };
    let g1 = step(g0, 0.0)?;
    let g2 = step(&g1, dt)?;
    let o0 = Geometry::new(g0, diff)?.raised_curvature();
    let o2 = Geometry::new(&g2, diff)?.raised_curvature();
    let rhs = curvature_rhs_clear(&Geometry::new(&g1, diff)?)?.total()?;
    Ok(o2.sub(&o0)?.scale(c(0.5 / dt, 0.0)).sub(&rhs)?.max_abs())
}

/// Result of the search for a Griffiths-nonnegative perturbation of the flat metric.
#[derive(Clone, Debug)]
pub struct ConstructedStart {
    pub metric: MetricField,
    /// Amplitude of the Kähler-potential perturbation that was accepted.
    pub amplitude: f64,
    /// Certified worst pointwise Griffiths margin of `metric`.
    pub worst_margin: f64,
    /// Worst margin at the smallest rejected amplitude (`None` if `max_amplitude` was accepted).
    pub rejected_margin: Option<f64>,
}

/// Largest amplitude (by bisection on `[0, max_amplitude]`) of a Kähler-potential perturbation of
/// the flat metric whose pointwise Griffiths margins are all `>= -accept_tol`.
pub fn griffiths_start(
    diff: &Differentiator,
    max_amplitude: f64,
    bisections: usize,
    accept_tol: f64,
    opts: &MarginOptions,
) -> Result<ConstructedStart> {
    let chart = diff.chart();
    let cone = ConeSpec::griffiths();
    let build = |a: f64| MetricField::preset(chart, &MetricPreset::KahlerPotential { amplitude: a, frequency: 1 });
    let worst = |m: &MetricField| -> Result<f64> { pointwise_margin(&Geometry::new(m, diff)?, &cone, opts) };
    let top = build(max_amplitude)?;
    let top_margin = worst(&top)?;
    if top_margin >= -accept_tol {
        return Ok(ConstructedStart {
            metric: top,
            amplitude: max_amplitude,
            worst_margin: top_margin,
            rejected_margin: None,
        });
    }
    let (mut lo, mut hi, mut hi_margin) = (0.0, max_amplitude, top_margin);
    for _ in 0..bisections {
        let mid = 0.5 * (lo + hi);
        let m = worst(&build(mid)?)?;
        if m >= -accept_tol {
            lo = mid;
        } else {
            hi = mid;
            hi_margin = m;
        }
    }
    let metric = build(lo)?;
    let worst_margin = worst(&metric)?;
    Ok(ConstructedStart { metric, amplitude: lo, worst_margin, rejected_margin: Some(hi_margin) })
}
