use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use hcflab::cones;
use hcflab::geometry::{Geometry, MetricField};
use hcflab::grid::{Differentiator, Field};
use hcflab::hcf;
use hcflab::linalg::c;
use hcflab::ode::{self, ExperimentOptions, OdeConfig};
use hcflab::tensor::Connection;
use hcflab::{random, CurvatureOperator, Error};

use crate::config::{CertifyConfig, Expectation, OdeInvarianceConfig, PdeRunConfig, VerifyConfig};
use crate::output::{line_chart, slug, OutDir};

pub enum Failure {
    Config(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_)
            | Error::UnsupportedCone(_)
            | Error::InvalidGrid(_)
            | Error::DimensionMismatch { .. }
            | Error::Signature(_)
            | Error::Json(_) => Failure::Config(e.to_string()),
            other => Failure::Numerical(other.to_string()),
        }
    }
}

fn io(e: String) -> Failure {
    Failure::Numerical(format!("writing output: {e}"))
}

/// Self-describing report written as `summary.json`.
#[derive(Serialize)]
pub struct Summary {
    pub kind: &'static str,
    pub seed: u64,
    pub pass: bool,
    pub tolerances: Value,
    pub results: Value,
}

#[derive(Serialize)]
struct TrajectoryRow<'a> {
    cone: &'a str,
    sample_id: usize,
    t: f64,
    margin: f64,
    norm: f64,
}

#[derive(Serialize)]
struct SampleRow<'a> {
    cone: &'a str,
    sample_id: usize,
    on_boundary: bool,
    initial_margin: f64,
    min_margin: f64,
    first_violation: Option<f64>,
    blew_up: bool,
    final_time: f64,
}

pub fn ode_invariance(cfg: &OdeInvarianceConfig, seed: u64, out: &mut OutDir, plots: bool) -> Result<Summary, Failure> {
    if cfg.cones.is_empty() {
        return Err(Failure::Config("ode_invariance.cones must not be empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<String> = cfg.cones.iter().map(|c| c.label()).collect();
    let mut traj_rows = Vec::new();
    let mut sample_rows = Vec::new();
    let mut per_cone = Vec::new();
    let mut pass = true;
    for (cone, label) in cfg.cones.iter().zip(&labels) {
        let mut run = OdeConfig::new(cfg.n, cfg.t_end);
        run.dt = cfg.dt;
        if let Some(i) = &cfg.integrator {
            run.integrator = i.clone();
        }
        if let Some(m) = &cfg.margin {
            run.margin_opts = m.clone();
        }
        let opts = ExperimentOptions {
            samples: cfg.samples,
            boundary_fraction: cfg.boundary_fraction,
            scale: cfg.scale,
            random_drivers: true,
            driver_scale: cfg.driver_scale,
            tolerance: cfg.tolerance,
        };
        let rep = ode::invariance_experiment(cone, cfg.n, &run, &opts, &mut rng)?;
        pass &= rep.violations == 0;
        for r in &rep.rows {
            traj_rows.push(TrajectoryRow {
                cone: label,
                sample_id: r.sample_id,
                t: r.t,
                margin: r.margin,
                norm: r.norm,
            });
        }
        for s in &rep.samples {
            sample_rows.push(SampleRow {
                cone: label,
                sample_id: s.sample_id,
                on_boundary: s.on_boundary,
                initial_margin: s.initial_margin,
                min_margin: s.min_margin,
                first_violation: s.first_violation,
                blew_up: s.blew_up,
                final_time: s.final_time,
            });
        }
        per_cone.push(json!({
            "cone": label,
            "worst_margin": rep.worst_margin,
            "violations": rep.violations,
            "first_violation": rep.first_violation.map(|(id, t)| json!({"sample_id": id, "t": t})),
            "blow_ups": rep.samples.iter().filter(|s| s.blew_up).count(),
        }));
        if plots {
            let series: Vec<(String, Vec<(f64, f64)>)> = (0..cfg.samples)
                .map(|id| {
                    let pts = rep.rows.iter().filter(|r| r.sample_id == id).map(|r| (r.t, r.margin)).collect();
                    (format!("sample {id}"), pts)
                })
                .collect();
            let svg = line_chart(&format!("margin, {label}"), "t", &series);
            out.text(&format!("margin_{}.svg", slug(label)), &svg).map_err(io)?;
        }
    }
    out.csv("trajectories.csv", &traj_rows).map_err(io)?;
    out.csv("samples.csv", &sample_rows).map_err(io)?;
    Ok(Summary {
        kind: "ode_invariance",
        seed,
        pass,
        tolerances: json!({ "margin": -cfg.tolerance * cfg.scale }),
        results: json!({ "n": cfg.n, "t_end": cfg.t_end, "samples": cfg.samples, "cones": per_cone }),
    })
}

#[derive(Serialize)]
struct MonitorRow<'a> {
    monitor: &'a str,
    t: f64,
    value: f64,
}

pub fn pde_run(cfg: &PdeRunConfig, seed: u64, out: &mut OutDir) -> Result<Summary, Failure> {
    let chart = cfg.chart.chart()?;
    if chart.n() < 1 {
        return Err(Failure::Config("pde_run.chart.n must be at least 1".into()));
    }
    let m0 = MetricField::preset(&chart, &cfg.metric)?;
    let d = Differentiator::new(&chart, cfg.backend);
    let rec = hcf::evolve(&m0, &d, &cfg.flow)?;
    let tol = &cfg.tolerances;

    let rows = rec.rows();
    let csv_rows: Vec<MonitorRow> = rows.iter().map(|(m, t, v)| MonitorRow { monitor: m, t: *t, value: *v }).collect();
    out.csv("monitors.csv", &csv_rows).map_err(io)?;
    if let Some((_, last)) = rec.snapshots.last() {
        out.text("final_metric.json", &last.to_json()?).map_err(io)?;
    }
    if cfg.plots {
        let mut names: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
        names.dedup();
        names.sort_unstable();
        names.dedup();
        for name in names {
            let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.0 == name).map(|r| (r.1, r.2)).collect();
            let svg = line_chart(name, "t", &[(name.to_string(), pts)]);
            out.text(&format!("{}.svg", slug(name)), &svg).map_err(io)?;
        }
    }

    let mut pass = true;
    let mut results = json!({
        "dt": rec.dt,
        "steps": rec.times.len().saturating_sub(1),
        "t_final": rec.times.last().copied().unwrap_or(0.0),
        "min_eig_g": rec.min_eig.iter().cloned().fold(f64::INFINITY, f64::min),
    });
    if cfg.flow.monitors.shat_inf {
        let rep = hcf::shat_monitor(&rec, tol.shat_decrease)?;
        pass &= rep.monotone;
        results["shat"] = json!({
            "inf_initial": rep.inf.first(),
            "inf_final": rep.inf.last(),
            "worst_decrease": rep.worst_decrease,
            "monotone": rep.monotone,
            "max_evolution_residual": rep.max_residual,
        });
    }
    if cfg.flow.monitors.rho_check {
        let worst = rec.rho_residual.iter().cloned().fold(0.0, f64::max);
        pass &= worst <= tol.rho_residual;
        results["rho_residual_max"] = json!(worst);
    }
    let mut cones = Vec::new();
    for series in &rec.cones {
        let worst = series.worst_margin.iter().cloned().fold(f64::INFINITY, f64::min);
        pass &= worst >= -tol.cone_margin;
        cones.push(json!({ "cone": series.label, "worst_margin": worst, "samples": series.times.len() }));
    }
    results["cones"] = json!(cones);
    if cfg.flow.monitors.consistency {
        let worst = rec.consistency.iter().map(|r| r.1).fold(0.0, f64::max);
        if let Some(bound) = tol.consistency {
            pass &= worst <= bound;
        }
        results["consistency_max"] = json!(worst);
    }
    Ok(Summary { kind: "pde_run", seed, pass, tolerances: serde_json::to_value(tol).unwrap_or(Value::Null), results })
}

#[derive(Serialize)]
struct CertifyRow<'a> {
    source: &'a str,
    index: usize,
    cone: &'a str,
    margin: f64,
    member: bool,
    certified: bool,
    converged: bool,
}

pub fn certify(cfg: &CertifyConfig, seed: u64, out: &mut OutDir) -> Result<Summary, Failure> {
    if cfg.cones.is_empty() {
        return Err(Failure::Config("certify.cones must not be empty".into()));
    }
    let opts = cfg.margin.clone().unwrap_or_default();
    let mut items: Vec<(&str, usize, CurvatureOperator)> = Vec::new();
    for (k, op) in cfg.operators.iter().enumerate() {
        items.push(("input", k, op.clone()));
    }
    if let Some(r) = &cfg.random {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in 0..r.count {
            let op =
                if r.psd { random::random_psd_operator(&mut rng, r.n) } else { random::random_operator(&mut rng, r.n) };
            items.push(("random", k, op));
        }
    }
    if let Some(f) = &cfg.field {
        let chart = f.chart.chart()?;
        let m = MetricField::preset(&chart, &f.metric)?;
        let d = Differentiator::new(&chart, f.backend);
        let geom = Geometry::new(&m, &d)?;
        for p in 0..geom.len() {
            items.push(("field", p, geom.operator_at(p)?));
        }
    }
    if items.is_empty() {
        return Err(Failure::Config("certify needs `operators`, `random` or `field`".into()));
    }
    let labels: Vec<String> = cfg.cones.iter().map(|c| c.label()).collect();
    let mut rows = Vec::new();
    let mut pass = true;
    let mut per_cone = Vec::new();
    for (cone, label) in cfg.cones.iter().zip(&labels) {
        let (mut worst, mut members, mut unconverged) = (f64::INFINITY, 0usize, 0usize);
        for (source, index, op) in &items {
            let rep = cones::margin(op, cone, &opts)?;
            let member = rep.margin >= -cfg.tolerance;
            worst = worst.min(rep.margin);
            members += member as usize;
            if !rep.certified && !rep.converged {
                unconverged += 1;
            }
            if let Some(expect) = cfg.expect {
                pass &= member == (expect == Expectation::Member);
            }
            rows.push(CertifyRow {
                source,
                index: *index,
                cone: label,
                margin: rep.margin,
                member,
                certified: rep.certified,
                converged: rep.converged,
            });
        }
        pass &= unconverged == 0;
        per_cone.push(json!({
            "cone": label,
            "worst_margin": worst,
            "members": members,
            "total": items.len(),
            "unconverged": unconverged,
        }));
    }
    out.csv("certify.csv", &rows).map_err(io)?;
    Ok(Summary {
        kind: "certify",
        seed,
        pass,
        tolerances: json!({ "membership": -cfg.tolerance, "expect": cfg.expect }),
        results: json!({ "cones": per_cone }),
    })
}

#[derive(Serialize)]
struct CheckRow {
    check: String,
    value: f64,
    /// `le`: pass when value <= tolerance; `ge`: value >= tolerance; `info`: not checked.
    bound: &'static str,
    tolerance: Option<f64>,
    pass: bool,
}

impl CheckRow {
    fn le(check: impl Into<String>, value: f64, tol: f64) -> Self {
        Self { check: check.into(), value, bound: "le", tolerance: Some(tol), pass: value <= tol }
    }

    fn ge(check: impl Into<String>, value: f64, tol: f64) -> Self {
        Self { check: check.into(), value, bound: "ge", tolerance: Some(tol), pass: value >= tol }
    }

    fn info(check: impl Into<String>, value: f64) -> Self {
        Self { check: check.into(), value, bound: "info", tolerance: None, pass: true }
    }
}

fn trace_defect(geom: &Geometry, s: &[Field], target: &[f64]) -> f64 {
    geom.trace(s).iter().zip(target).map(|(x, y)| (x - c(*y, 0.0)).norm()).fold(0.0, f64::max)
}

fn sup_diff(a: &[Field], b: &[Field]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).norm())).fold(0.0, f64::max)
}

pub fn verify_identities(cfg: &VerifyConfig, seed: u64, out: &mut OutDir) -> Result<Summary, Failure> {
    let chart = cfg.chart.chart()?;
    let m = MetricField::preset(&chart, &cfg.metric)?;
    let d = Differentiator::new(&chart, cfg.backend);
    let tol = &cfg.tolerances;
    let mut rows = Vec::new();
    {
        let geom = Geometry::new(&m, &d)?;
        for (k, r) in geom.bianchi_residuals()?.iter().enumerate() {
            rows.push(CheckRow::le(format!("bianchi_{}", k + 1), *r, tol.bianchi));
        }
        let ricci = geom.ricci();
        let sc = trace_defect(&geom, &ricci.s1, &ricci.sc).max(trace_defect(&geom, &ricci.s2, &ricci.sc));
        let shat = trace_defect(&geom, &ricci.s3, &ricci.shat).max(trace_defect(&geom, &ricci.s4, &ricci.shat));
        rows.push(CheckRow::le("trace_sc", sc, tol.trace));
        rows.push(CheckRow::le("trace_shat", shat, tol.trace));
        let lee = geom.lee_rho(&ricci)?;
        rows.push(CheckRow::le("lee_rho", lee.residual, tol.lee));
        rows.push(CheckRow::le("d_rho", lee.d_rho, tol.lee));
        rows.push(CheckRow::le(
            "chern_metric_compatibility",
            geom.metric_compatibility_defect(Connection::Chern)?,
            tol.metric_compatibility,
        ));
        let torsion = geom.torsion_sup();
        let contractions =
            sup_diff(&ricci.s1, &ricci.s2).max(sup_diff(&ricci.s1, &ricci.s3)).max(sup_diff(&ricci.s1, &ricci.s4));
        if cfg.expect_kahler {
            rows.push(CheckRow::le("kahler_torsion", torsion, tol.kahler));
            rows.push(CheckRow::le("kahler_ricci_collapse", contractions, tol.kahler));
        } else {
            rows.push(CheckRow::info("torsion_sup", torsion));
            rows.push(CheckRow::info("ricci_contraction_spread", contractions));
        }
        rows.push(CheckRow::info("curvature_sup", geom.curvature_sup()));
    }
    if let Some([dt1, dt2]) = cfg.consistency_dt {
        if !(dt1 > 0.0 && dt2 > 0.0) {
            return Err(Failure::Config("verify_identities.consistency_dt must be positive".into()));
        }
        let e1 = hcf::consistency_error(&m, &d, dt1)?;
        let e2 = hcf::consistency_error(&m, &d, dt2)?;
        rows.push(CheckRow::info(format!("consistency_error_dt_{dt1:e}"), e1));
        rows.push(CheckRow::info(format!("consistency_error_dt_{dt2:e}"), e2));
        rows.push(CheckRow::ge("consistency_ratio", e1 / e2, tol.consistency_ratio));
    }
    out.csv("identities.csv", &rows).map_err(io)?;
    let pass = rows.iter().all(|r| r.pass);
    let results: serde_json::Map<String, Value> = rows.iter().map(|r| (r.check.clone(), json!(r.value))).collect();
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.check.as_str()).collect();
    Ok(Summary {
        kind: "verify_identities",
        seed,
        pass,
        tolerances: serde_json::to_value(tol).unwrap_or(Value::Null),
        results: json!({ "checks": results, "failed": failed }),
    })
}
