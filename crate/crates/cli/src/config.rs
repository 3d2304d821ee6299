use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hcflab::cones::{ConeSpec, MarginOptions};
use hcflab::geometry::MetricPreset;
use hcflab::grid::{Backend, TorusChart};
use hcflab::hcf::PdeConfig;
use hcflab::ode::Integrator;
use hcflab::CurvatureOperator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    OdeInvariance,
    PdeRun,
    Certify,
    VerifyIdentities,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::OdeInvariance => "ode_invariance",
            Kind::PdeRun => "pde_run",
            Kind::Certify => "certify",
            Kind::VerifyIdentities => "verify_identities",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Defaults to the kind of the subcommand.
    pub kind: Option<Kind>,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub ode_invariance: Option<OdeInvarianceConfig>,
    pub pde_run: Option<PdeRunConfig>,
    pub certify: Option<CertifyConfig>,
    pub verify_identities: Option<VerifyConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartConfig {
    pub n: usize,
    /// Points on every real axis, unless `grid` is given.
    #[serde(default)]
    pub points: Option<usize>,
    /// Points per real axis, ordered `x_1, y_1, x_2, y_2, ...`.
    #[serde(default)]
    pub grid: Option<Vec<usize>>,
    #[serde(default = "unit")]
    pub period: f64,
}

fn unit() -> f64 {
    1.0
}

impl ChartConfig {
    pub fn chart(&self) -> hcflab::Result<TorusChart> {
        let grid = match (&self.grid, self.points) {
            (Some(g), _) => g.clone(),
            (None, Some(p)) => vec![p; 2 * self.n],
            (None, None) => return Err(hcflab::Error::InvalidConfig("chart needs `points` or `grid`".into())),
        };
        TorusChart::new(self.n, vec![self.period; 2 * self.n], grid)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeInvarianceConfig {
    #[serde(default = "two")]
    pub n: usize,
    #[serde(default = "ode_t_end")]
    pub t_end: f64,
    pub cones: Vec<ConeSpec>,
    #[serde(default = "fifty")]
    pub samples: usize,
    #[serde(default = "half")]
    pub boundary_fraction: f64,
    #[serde(default = "unit")]
    pub scale: f64,
    #[serde(default = "unit")]
    pub driver_scale: f64,
    /// Margins below `-tolerance * scale` count as violations.
    #[serde(default = "ode_tol")]
    pub tolerance: f64,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub integrator: Option<Integrator>,
    #[serde(default)]
    pub margin: Option<MarginOptions>,
}

fn two() -> usize {
    2
}
fn fifty() -> usize {
    50
}
fn half() -> f64 {
    0.5
}
fn ode_t_end() -> f64 {
    0.05
}
fn ode_tol() -> f64 {
    1e-6
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeRunConfig {
    pub chart: ChartConfig,
    pub metric: MetricPreset,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default)]
    pub flow: PdeConfig,
    #[serde(default)]
    pub tolerances: PdeTolerances,
    /// Write SVG line charts of the monitor series.
    #[serde(default = "yes")]
    pub plots: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeTolerances {
    /// Allowed decrease of `inf shat` per step.
    pub shat_decrease: f64,
    pub rho_residual: f64,
    /// Allowed negative worst pointwise margin for each monitored cone.
    pub cone_margin: f64,
    /// Bound on the consistency monitor, if it is enabled.
    pub consistency: Option<f64>,
}

impl Default for PdeTolerances {
    fn default() -> Self {
        Self { shat_decrease: 1e-6, rho_residual: 1e-7, cone_margin: 1e-5, consistency: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    Member,
    Nonmember,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomOperators {
    pub n: usize,
    pub count: usize,
    /// Draw positive semidefinite operators `B B*` instead of Gaussian Hermitian ones.
    #[serde(default)]
    pub psd: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSource {
    pub chart: ChartConfig,
    pub metric: MetricPreset,
    #[serde(default)]
    pub backend: Backend,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    pub cones: Vec<ConeSpec>,
    #[serde(default)]
    pub operators: Vec<CurvatureOperator>,
    #[serde(default)]
    pub random: Option<RandomOperators>,
    /// Certify the curvature of a metric field at every grid point.
    #[serde(default)]
    pub field: Option<FieldSource>,
    #[serde(default)]
    pub margin: Option<MarginOptions>,
    /// Membership threshold: `margin >= -tolerance`.
    #[serde(default = "certify_tol")]
    pub tolerance: f64,
    #[serde(default)]
    pub expect: Option<Expectation>,
}

fn certify_tol() -> f64 {
    1e-8
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub chart: ChartConfig,
    pub metric: MetricPreset,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default)]
    pub tolerances: VerifyTolerances,
    /// Also require the Kähler collapse (zero torsion, equal Ricci contractions).
    #[serde(default)]
    pub expect_kahler: bool,
    /// Two time steps for the curvature evolution consistency check (error ratio).
    #[serde(default)]
    pub consistency_dt: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyTolerances {
    pub bianchi: f64,
    pub trace: f64,
    pub lee: f64,
    pub kahler: f64,
    pub metric_compatibility: f64,
    pub consistency_ratio: f64,
}

impl Default for VerifyTolerances {
    fn default() -> Self {
        Self {
            bianchi: 1e-7,
            trace: 1e-10,
            lee: 1e-7,
            kahler: 1e-8,
            metric_compatibility: 1e-8,
            consistency_ratio: 3.5,
        }
    }
}

/// Parse with a `path:line:column: field: message` diagnostic on failure.
pub fn load(path: &Path) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.inner();
        format!("{}:{}:{}: field `{field}`: {inner}", path.display(), inner.line(), inner.column())
    })
}
