//! Chern geometry of Hermitian metrics on torus charts.
//!
//! Index conventions (all component arrays are row-major over the listed indices):
//! `g[i][j] = g_{i jbar}`, `ginv[i][j] = g^{i jbar}`, `dg[m][i][j] = d_m g_{i jbar}`,
//! `gamma[k][m][j] = Gamma^k_{mj}`, `torsion[k][i][j] = T^k_{ij}`,
//! `torsion_low[i][j][l] = T_{i j lbar}`, `omega[i][j][k][l] = Omega_{i jbar k lbar}`.
//! Raised curvature `Omega_{i jbar}^{lbar k}` is stored as `[i][j][l][k]`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::algebra::{CurvatureOperator, HermitianMetric, IndexedCurvature};
use crate::error::{Error, Result};
use crate::grid::{Differentiator, Dir, Field, TorusChart};
use crate::linalg::{self, c, CMat, C64, I};
use crate::tensor::{nabla, Connection, ConnectionData, Slot, TensorField};

/// Smallest admissible eigenvalue of the metric at any lattice point.
pub const PD_FLOOR: f64 = 1e-8;

#[inline]
fn i2(n: usize, a: usize, b: usize) -> usize {
    a * n + b
}

#[inline]
fn i3(n: usize, a: usize, b: usize, c: usize) -> usize {
    (a * n + b) * n + c
}

#[inline]
fn i4(n: usize, a: usize, b: usize, c: usize, d: usize) -> usize {
    ((a * n + b) * n + c) * n + d
}

fn sup(fields: &[Field]) -> f64 {
    fields.iter().flatten().fold(0.0, |m, z| m.max(z.norm()))
}

fn zero_fields(count: usize, len: usize) -> Vec<Field> {
    vec![vec![c(0.0, 0.0); len]; count]
}

/// Closed-form metrics addressable by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricPreset {
    /// The standard flat metric `delta_{ij}`.
    Flat,
    /// `delta + d dbar phi` for a real trigonometric potential `phi` (Kähler).
    KahlerPotential {
        amplitude: f64,
        #[serde(default = "one")]
        frequency: u32,
    },
    /// `g_{1 1bar} = 1 + a sin(2 pi f y_n / L)`, optional off-diagonal `twist * e^{2 pi i f x_1 / L}`.
    NonkahlerSin {
        amplitude: f64,
        #[serde(default = "one")]
        frequency: u32,
        #[serde(default)]
        twist: f64,
    },
    /// `e^u delta` with `u = a (cos(2 pi f x_1 / L) + sin(2 pi f y_1 / L))`.
    Conformal {
        amplitude: f64,
        #[serde(default = "one")]
        frequency: u32,
    },
}

fn one() -> u32 {
    1
}

/// `d_i dbar_j cos(w . x) = c_{ij} cos(w . x)` (same for sin), with `w = (a_1, b_1, a_2, b_2, ...)`.
fn ddbar_symbol(w: &[f64], n: usize) -> CMat {
    CMat::from_fn(n, n, |i, j| {
        let (ai, bi, aj, bj) = (w[2 * i], w[2 * i + 1], w[2 * j], w[2 * j + 1]);
        c(-0.25 * (ai * aj + bi * bj), -0.25 * (ai * bj - bi * aj))
    })
}

impl MetricPreset {
    /// Metric matrix at real coordinates `x`.
    pub fn evaluate(&self, chart: &TorusChart, x: &[f64]) -> CMat {
        let n = chart.n();
        let kappa = |axis: usize, f: u32| 2.0 * PI * f as f64 / chart.periods()[axis];
        match *self {
            MetricPreset::Flat => CMat::identity(n, n),
            MetricPreset::KahlerPotential { amplitude, frequency } => {
                // phi = sum_t (amplitude / |w_t|^2) trig_t(w_t . x)
                let mut terms: Vec<(Vec<f64>, bool)> = Vec::new();
                for a in 0..2 * n {
                    let mut w = vec![0.0; 2 * n];
                    w[a] = kappa(a, frequency);
                    terms.push((w, a % 2 == 0));
                }
                let mut w = vec![0.0; 2 * n];
                w[0] = kappa(0, frequency);
                w[2 * n - 1] = kappa(2 * n - 1, frequency);
                terms.push((w, true));
                let mut g = CMat::identity(n, n);
                for (w, is_cos) in terms {
                    let phase: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                    let trig = if is_cos { phase.cos() } else { phase.sin() };
                    let norm2: f64 = w.iter().map(|a| a * a).sum();
                    g += ddbar_symbol(&w, n) * c(amplitude * trig / norm2, 0.0);
                }
                g
            }
            MetricPreset::NonkahlerSin { amplitude, frequency, twist } => {
                let mut g = CMat::identity(n, n);
                let y_last = 2 * n - 1;
                g[(0, 0)] += c(amplitude * (kappa(y_last, frequency) * x[y_last]).sin(), 0.0);
                if n > 1 && twist != 0.0 {
                    let z = C64::from_polar(twist, kappa(0, frequency) * x[0]);
                    g[(0, 1)] = z;
                    g[(1, 0)] = z.conj();
                }
                g
            }
            MetricPreset::Conformal { amplitude, frequency } => {
                let u = amplitude * ((kappa(0, frequency) * x[0]).cos() + (kappa(1, frequency) * x[1]).sin());
                CMat::identity(n, n) * c(u.exp(), 0.0)
            }
        }
    }
}

/// Hermitian metric sampled on a torus chart.
#[derive(Clone, Debug)]
pub struct MetricField {
    chart: TorusChart,
    comps: Vec<Field>,
}

impl MetricField {
    /// Validates Hermitian symmetry (defects up to `1e-12` are symmetrized away) and
    /// positivity (`min eig >= PD_FLOOR`) at every point.
    pub fn new(chart: TorusChart, comps: Vec<Field>) -> Result<Self> {
        Self::with_floor(chart, comps, PD_FLOOR)
    }

    pub fn with_floor(chart: TorusChart, mut comps: Vec<Field>, pd_floor: f64) -> Result<Self> {
        let n = chart.n();
        if comps.len() != n * n {
            return Err(Error::DimensionMismatch { expected: n * n, got: comps.len() });
        }
        if let Some(f) = comps.iter().find(|f| f.len() != chart.len()) {
            return Err(Error::DimensionMismatch { expected: chart.len(), got: f.len() });
        }
        for p in 0..chart.len() {
            for i in 0..n {
                for j in i..n {
                    let a = comps[i2(n, i, j)][p];
                    let b = comps[i2(n, j, i)][p].conj();
                    let scale = a.norm().max(1.0);
                    if (a - b).norm() > 1e-12 * scale || !a.re.is_finite() || !a.im.is_finite() {
                        return Err(Error::NotHermitian { defect: (a - b).norm() / scale });
                    }
                    let m = (a + b) * 0.5;
                    comps[i2(n, i, j)][p] = m;
                    comps[i2(n, j, i)][p] = m.conj();
                }
            }
        }
        let field = Self { chart, comps };
        let min_eig = field.min_eigenvalue()?;
        if min_eig < pd_floor {
            return Err(Error::SingularMetric { min_eig });
        }
        Ok(field)
    }

    pub fn from_fn(chart: &TorusChart, f: impl Fn(&[f64]) -> CMat) -> Result<Self> {
        let n = chart.n();
        let mut comps = zero_fields(n * n, chart.len());
        for p in 0..chart.len() {
            let m = f(&chart.coords(p));
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::DimensionMismatch { expected: n, got: m.nrows() });
            }
            for i in 0..n {
                for j in 0..n {
                    comps[i2(n, i, j)][p] = m[(i, j)];
                }
            }
        }
        Self::new(chart.clone(), comps)
    }

    pub fn constant(chart: &TorusChart, g: &HermitianMetric) -> Result<Self> {
        Self::from_fn(chart, |_| g.matrix().clone())
    }

    pub fn preset(chart: &TorusChart, preset: &MetricPreset) -> Result<Self> {
        Self::from_fn(chart, |x| preset.evaluate(chart, x))
    }

    pub fn chart(&self) -> &TorusChart {
        &self.chart
    }

    pub fn n(&self) -> usize {
        self.chart.n()
    }

    pub fn comps(&self) -> &[Field] {
        &self.comps
    }

    pub fn matrix_at(&self, p: usize) -> CMat {
        let n = self.n();
        CMat::from_fn(n, n, |i, j| self.comps[i2(n, i, j)][p])
    }

    pub fn metric_at(&self, p: usize) -> Result<HermitianMetric> {
        HermitianMetric::new(self.matrix_at(p))
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        let mut m = f64::INFINITY;
        for p in 0..self.chart.len() {
            m = m.min(linalg::min_eigenvalue(&self.matrix_at(p))?);
        }
        Ok(m)
    }

    /// `self + s * rhs` with `rhs` in the same component layout.
    pub fn axpy(&self, s: f64, rhs: &[Field], pd_floor: f64) -> Result<MetricField> {
        if rhs.len() != self.comps.len() {
            return Err(Error::DimensionMismatch { expected: self.comps.len(), got: rhs.len() });
        }
        let comps =
            self.comps.iter().zip(rhs).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y * s).collect()).collect();
        MetricField::with_floor(self.chart.clone(), comps, pd_floor)
    }

    /// Largest componentwise difference.
    pub fn max_diff(&self, other: &MetricField) -> f64 {
        self.comps
            .iter()
            .zip(&other.comps)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).norm()))
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MetricFieldRepr::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let repr: MetricFieldRepr = serde_json::from_str(s)?;
        repr.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct MetricFieldRepr {
    chart: TorusChart,
    /// `components[i * n + j][point] = [re, im]` of `g_{i jbar}`.
    components: Vec<Vec<[f64; 2]>>,
}

impl From<&MetricField> for MetricFieldRepr {
    fn from(m: &MetricField) -> Self {
        Self {
            chart: m.chart.clone(),
            components: m.comps.iter().map(|f| f.iter().map(|z| [z.re, z.im]).collect()).collect(),
        }
    }
}

impl TryFrom<MetricFieldRepr> for MetricField {
    type Error = Error;

    fn try_from(r: MetricFieldRepr) -> Result<Self> {
        let chart = TorusChart::new(r.chart.n(), r.chart.periods().to_vec(), r.chart.grid().to_vec())?;
        let comps = r.components.into_iter().map(|f| f.into_iter().map(|[a, b]| c(a, b)).collect()).collect();
        MetricField::new(chart, comps)
    }
}

/// Chern-Ricci contractions and scalar curvatures.
#[derive(Clone, Debug)]
pub struct RicciData {
    /// `S1_{i jbar} = Omega_{i jbar m nbar} g^{m nbar}`, layout `[i][j]`.
    pub s1: Vec<Field>,
    /// `S2_{i jbar} = Omega_{m nbar i jbar} g^{m nbar}`.
    pub s2: Vec<Field>,
    /// `S3_{i jbar} = Omega_{n jbar i mbar} g^{n mbar}`.
    pub s3: Vec<Field>,
    /// `S4_{i jbar} = Omega_{i nbar m jbar} g^{m nbar}`.
    pub s4: Vec<Field>,
    /// `g^{i jbar} g^{k lbar} Omega_{i jbar k lbar}`.
    pub sc: Vec<f64>,
    /// `g^{i lbar} g^{k jbar} Omega_{i jbar k lbar}`.
    pub shat: Vec<f64>,
}

/// Form of type (2,0) + (1,1): `sum_{j<k} p20[j][k] dz^j ^ dz^k + sum p11[k][s] dz^k ^ dzbar^s`.
#[derive(Clone, Debug)]
pub struct TwoForm {
    pub p20: Vec<Field>,
    pub p11: Vec<Field>,
}

#[derive(Clone, Debug)]
pub struct LeeRhoReport {
    /// `alpha_k = i T^p_{kp}`.
    pub alpha: Vec<Field>,
    pub rho: TwoForm,
    pub rho_t: TwoForm,
    /// `sup |rho - rho^T - d alpha|`.
    pub residual: f64,
    /// `sup |d rho|`.
    pub d_rho: f64,
}

/// Chern connection data of a metric field, computed once.
pub struct Geometry<'d> {
    diff: &'d Differentiator,
    n: usize,
    len: usize,
    g: Vec<Field>,
    ginv: Vec<Field>,
    dg: Vec<Field>,
    gamma: Vec<Field>,
    sharp: Vec<Field>,
    torsion: Vec<Field>,
    torsion_low: Vec<Field>,
    omega: Vec<Field>,
}

impl<'d> Geometry<'d> {
    pub fn new(metric: &MetricField, diff: &'d Differentiator) -> Result<Self> {
        Self::with_floor(metric, diff, PD_FLOOR)
    }

    pub fn with_floor(metric: &MetricField, diff: &'d Differentiator, pd_floor: f64) -> Result<Self> {
        if metric.chart() != diff.chart() {
            return Err(Error::InvalidGrid("metric and differentiator use different charts".into()));
        }
        let n = metric.n();
        let len = metric.chart().len();
        let g = metric.comps().to_vec();

        let mut ginv = zero_fields(n * n, len);
        let mut min_eig = f64::INFINITY;
        for p in 0..len {
            let m = metric.matrix_at(p);
            min_eig = min_eig.min(linalg::min_eigenvalue(&m)?);
            let inv = linalg::inverse(&m)?;
            for i in 0..n {
                for j in 0..n {
                    ginv[i2(n, i, j)][p] = inv[(j, i)];
                }
            }
        }
        if min_eig < pd_floor {
            return Err(Error::SingularMetric { min_eig });
        }

        // first derivatives d_m and mixed second derivatives d_a dbar_b of each g_{i jbar}
        let mut ops: Vec<Vec<Dir>> = (0..n).map(|m| vec![Dir::Holo(m)]).collect();
        for a in 0..n {
            for b in 0..n {
                ops.push(vec![Dir::Holo(a), Dir::Anti(b)]);
            }
        }
        let op_refs: Vec<&[Dir]> = ops.iter().map(|o| o.as_slice()).collect();
        let refs: Vec<&[C64]> = g.iter().map(|f| f.as_slice()).collect();
        let mut derivs = diff.derivatives_many(&refs, &op_refs)?;

        let mut dg = zero_fields(n * n * n, len);
        let mut ddg = zero_fields(n * n * n * n, len);
        for i in 0..n {
            for j in 0..n {
                let d = &mut derivs[i2(n, i, j)];
                for m in 0..n {
                    dg[i3(n, m, i, j)] = std::mem::take(&mut d[m]);
                }
                for a in 0..n {
                    for b in 0..n {
                        ddg[i4(n, a, b, i, j)] = std::mem::take(&mut d[n + i2(n, a, b)]);
                    }
                }
            }
        }
        drop(derivs);

        let mut gamma = zero_fields(n * n * n, len);
        let mut torsion = zero_fields(n * n * n, len);
        let mut torsion_low = zero_fields(n * n * n, len);
        let mut sharp = zero_fields(n * n * n, len);
        let mut omega = zero_fields(n.pow(4), len);
        for p in 0..len {
            for k in 0..n {
                for m in 0..n {
                    for j in 0..n {
                        let mut s = c(0.0, 0.0);
                        for l in 0..n {
                            s += ginv[i2(n, k, l)][p] * dg[i3(n, m, j, l)][p];
                        }
                        gamma[i3(n, k, m, j)][p] = s;
                    }
                }
            }
            for k in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        torsion[i3(n, k, i, j)][p] = gamma[i3(n, k, i, j)][p] - gamma[i3(n, k, j, i)][p];
                    }
                }
            }
            for i in 0..n {
                for j in 0..n {
                    for l in 0..n {
                        let mut s = c(0.0, 0.0);
                        for k in 0..n {
                            s += torsion[i3(n, k, i, j)][p] * g[i2(n, k, l)][p];
                        }
                        torsion_low[i3(n, i, j, l)][p] = s;
                    }
                }
            }
            for k in 0..n {
                for m in 0..n {
                    for j in 0..n {
                        let mut s = c(0.0, 0.0);
                        for q in 0..n {
                            s += ginv[i2(n, k, q)][p] * torsion_low[i3(n, m, q, j)][p].conj();
                        }
                        sharp[i3(n, k, m, j)][p] = s;
                    }
                }
            }
            // Omega_{i jbar k lbar} = -d_i dbar_j g_{k lbar} + g^{p sbar} dbar_j g_{p lbar} d_i g_{k sbar}
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        for l in 0..n {
                            let mut s = -ddg[i4(n, i, j, k, l)][p];
                            for q in 0..n {
                                for r in 0..n {
                                    s += ginv[i2(n, q, r)][p] * dg[i3(n, j, l, q)][p].conj() * dg[i3(n, i, k, r)][p];
                                }
                            }
                            omega[i4(n, i, j, k, l)][p] = s;
                        }
                    }
                }
            }
        }
        Ok(Self { diff, n, len, g, ginv, dg, gamma, sharp, torsion, torsion_low, omega })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn differentiator(&self) -> &Differentiator {
        self.diff
    }

    pub fn connection(&self) -> ConnectionData<'_> {
        ConnectionData { n: self.n, gamma: &self.gamma, sharp: &self.sharp }
    }

    pub fn metric_tensor(&self) -> TensorField {
        TensorField::new(self.n, vec![Slot::Lower, Slot::LowerBar], self.g.clone()).unwrap()
    }

    pub fn inverse_metric(&self) -> &[Field] {
        &self.ginv
    }

    pub fn metric_derivative(&self) -> &[Field] {
        &self.dg
    }

    pub fn christoffel(&self) -> &[Field] {
        &self.gamma
    }

    /// `T^k_{ij}`, slots `(k, i, j)`.
    pub fn torsion(&self) -> TensorField {
        TensorField::new(self.n, vec![Slot::Upper, Slot::Lower, Slot::Lower], self.torsion.clone()).unwrap()
    }

    /// `T_{i j lbar}`.
    pub fn torsion_lowered(&self) -> TensorField {
        TensorField::new(self.n, vec![Slot::Lower, Slot::Lower, Slot::LowerBar], self.torsion_low.clone()).unwrap()
    }

    /// `Omega_{i jbar k lbar}`.
    pub fn curvature(&self) -> TensorField {
        let sig = vec![Slot::Lower, Slot::LowerBar, Slot::Lower, Slot::LowerBar];
        TensorField::new(self.n, sig, self.omega.clone()).unwrap()
    }

    pub fn metric_at(&self, p: usize) -> Result<HermitianMetric> {
        let n = self.n;
        HermitianMetric::new(CMat::from_fn(n, n, |i, j| self.g[i2(n, i, j)][p]))
    }

    pub fn curvature_at(&self, p: usize) -> IndexedCurvature {
        let n = self.n;
        IndexedCurvature::from_fn(n, |i, j, k, l| self.omega[i4(n, i, j, k, l)][p])
    }

    /// `Omega` at `p` as an element of `Sym^{1,1}(End T^{1,0})`.
    pub fn operator_at(&self, p: usize) -> Result<CurvatureOperator> {
        crate::algebra::from_indexed(&self.curvature_at(p), &self.metric_at(p)?)
    }

    /// `Omega_{i jbar}^{lbar k}`, slots `(i, jbar, lbar, k)`.
    pub fn raised_curvature(&self) -> TensorField {
        let n = self.n;
        let mut out = zero_fields(n.pow(4), self.len);
        for p in 0..self.len {
            for i in 0..n {
                for j in 0..n {
                    for l in 0..n {
                        for k in 0..n {
                            let mut s = c(0.0, 0.0);
                            for m in 0..n {
                                for q in 0..n {
                                    s += self.omega[i4(n, i, j, m, q)][p]
                                        * self.ginv[i2(n, m, l)][p]
                                        * self.ginv[i2(n, k, q)][p];
                                }
                            }
                            out[i4(n, i, j, l, k)][p] = s;
                        }
                    }
                }
            }
        }
        let sig = vec![Slot::Lower, Slot::LowerBar, Slot::UpperBar, Slot::Upper];
        TensorField::new(n, sig, out).unwrap()
    }

    /// Covariant derivative with one connection for every slot.
    pub fn nabla(&self, x: &TensorField, conn: Connection, holo: bool) -> Result<TensorField> {
        let conns = vec![conn; x.rank()];
        nabla(x, &conns, holo, &self.connection(), self.diff)
    }

    /// Covariant derivative with a connection per slot.
    pub fn nabla_mixed(&self, x: &TensorField, conns: &[Connection], holo: bool) -> Result<TensorField> {
        nabla(x, conns, holo, &self.connection(), self.diff)
    }

    /// `g^{a bbar} d_a dbar_b f` for a scalar field.
    pub fn scalar_laplacian(&self, f: &[C64]) -> Result<Field> {
        let n = self.n;
        let ops: Vec<Vec<Dir>> = (0..n).flat_map(|a| (0..n).map(move |b| vec![Dir::Holo(a), Dir::Anti(b)])).collect();
        let refs: Vec<&[Dir]> = ops.iter().map(|o| o.as_slice()).collect();
        let d = self.diff.derivatives(f, &refs)?;
        let mut out = vec![c(0.0, 0.0); self.len];
        for a in 0..n {
            for b in 0..n {
                let gab = &self.ginv[i2(n, a, b)];
                for (p, o) in out.iter_mut().enumerate() {
                    *o += gab[p] * d[i2(n, a, b)][p];
                }
            }
        }
        Ok(out)
    }

    /// `Delta^T = (1/2) g^{a bbar} (nabla^T_a nabla^T_bbar + nabla^T_bbar nabla^T_a)` on any tensor;
    /// the second derivative also differentiates the first derivative's slot.
    pub fn laplacian_t(&self, x: &TensorField) -> Result<TensorField> {
        let n = self.n;
        let conn = Connection::Twisted;
        let ab = self.nabla(&self.nabla(x, conn, false)?, conn, true)?; // [a][b][...]
        let ba = self.nabla(&self.nabla(x, conn, true)?, conn, false)?; // [b][a][...]
        let block = x.comps().len();
        let mut comps = zero_fields(block, self.len);
        for a in 0..n {
            for b in 0..n {
                let gab = &self.ginv[i2(n, a, b)];
                for f in 0..block {
                    let u = &ab.comps()[i2(n, a, b) * block + f];
                    let v = &ba.comps()[i2(n, b, a) * block + f];
                    let o = &mut comps[f];
                    for p in 0..self.len {
                        o[p] += gab[p] * (u[p] + v[p]) * 0.5;
                    }
                }
            }
        }
        TensorField::new(n, x.sig().to_vec(), comps)
    }

    pub fn ricci(&self) -> RicciData {
        let n = self.n;
        let (mut s1, mut s2, mut s3, mut s4) = (
            zero_fields(n * n, self.len),
            zero_fields(n * n, self.len),
            zero_fields(n * n, self.len),
            zero_fields(n * n, self.len),
        );
        let mut sc = vec![0.0; self.len];
        let mut shat = vec![0.0; self.len];
        let om = |i, j, k, l, p: usize| self.omega[i4(n, i, j, k, l)][p];
        for p in 0..self.len {
            let gi = |a, b| self.ginv[i2(n, a, b)][p];
            for i in 0..n {
                for j in 0..n {
                    let (mut a1, mut a2, mut a3, mut a4) = (c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0));
                    for m in 0..n {
                        for q in 0..n {
                            let w = gi(m, q);
                            a1 += om(i, j, m, q, p) * w;
                            a2 += om(m, q, i, j, p) * w;
                            a3 += om(m, j, i, q, p) * w;
                            a4 += om(i, q, m, j, p) * w;
                        }
                    }
                    s1[i2(n, i, j)][p] = a1;
                    s2[i2(n, i, j)][p] = a2;
                    s3[i2(n, i, j)][p] = a3;
                    s4[i2(n, i, j)][p] = a4;
                }
            }
            let (mut t, mut th) = (c(0.0, 0.0), c(0.0, 0.0));
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        for l in 0..n {
                            t += gi(i, j) * gi(k, l) * om(i, j, k, l, p);
                            th += gi(i, l) * gi(k, j) * om(i, j, k, l, p);
                        }
                    }
                }
            }
            sc[p] = t.re;
            shat[p] = th.re;
        }
        RicciData { s1, s2, s3, s4, sc, shat }
    }

    /// `g^{i jbar} S_{i jbar}` pointwise.
    pub fn trace(&self, s: &[Field]) -> Field {
        let n = self.n;
        (0..self.len)
            .map(|p| {
                let mut t = c(0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        t += self.ginv[i2(n, i, j)][p] * s[i2(n, i, j)][p];
                    }
                }
                t
            })
            .collect()
    }

    /// `Q_{i jbar} = (1/2) g^{m nbar} g^{p sbar} T_{m p jbar} conj(T_{n s ibar})`.
    pub fn q_term(&self) -> Vec<Field> {
        let n = self.n;
        let mut q = zero_fields(n * n, self.len);
        for p in 0..self.len {
            let gi = |a, b| self.ginv[i2(n, a, b)][p];
            let tl = |a, b, l| self.torsion_low[i3(n, a, b, l)][p];
            for i in 0..n {
                for j in 0..n {
                    let mut s = c(0.0, 0.0);
                    for m in 0..n {
                        for nn in 0..n {
                            for pp in 0..n {
                                for ss in 0..n {
                                    s += gi(m, nn) * gi(pp, ss) * tl(m, pp, j) * tl(nn, ss, i).conj();
                                }
                            }
                        }
                    }
                    q[i2(n, i, j)][p] = s * 0.5;
                }
            }
        }
        q
    }

    /// `(div T)_{jk} = nabla_i T^i_{jk}` (Chern connection).
    pub fn div_torsion(&self) -> Result<Vec<Field>> {
        let dt = self.nabla(&self.torsion(), Connection::Chern, true)?; // [i][k][a][b]
        let n = self.n;
        let mut out = zero_fields(n * n, self.len);
        for j in 0..n {
            for k in 0..n {
                for i in 0..n {
                    let f = dt.comp(&[i, i, j, k]);
                    out[i2(n, j, k)].iter_mut().zip(f).for_each(|(o, v)| *o += v);
                }
            }
        }
        Ok(out)
    }

    /// `|S3|^2 = g^{a bbar} g^{m nbar} S3_{a nbar} conj(S3_{b mbar})`.
    pub fn s3_norm_sq(&self, s3: &[Field]) -> Vec<f64> {
        let n = self.n;
        (0..self.len)
            .map(|p| {
                let gi = |a, b| self.ginv[i2(n, a, b)][p];
                let mut s = c(0.0, 0.0);
                for a in 0..n {
                    for b in 0..n {
                        for m in 0..n {
                            for nn in 0..n {
                                s += gi(a, b) * gi(m, nn) * s3[i2(n, a, nn)][p] * s3[i2(n, b, m)][p].conj();
                            }
                        }
                    }
                }
                s.re
            })
            .collect()
    }

    /// `|div T|^2 = g^{m nbar} g^{p sbar} D_{mp} conj(D_{ns})`.
    pub fn div_torsion_norm_sq(&self, div: &[Field]) -> Vec<f64> {
        let n = self.n;
        (0..self.len)
            .map(|p| {
                let gi = |a, b| self.ginv[i2(n, a, b)][p];
                let mut s = c(0.0, 0.0);
                for m in 0..n {
                    for nn in 0..n {
                        for pp in 0..n {
                            for ss in 0..n {
                                s += gi(m, nn) * gi(pp, ss) * div[i2(n, m, pp)][p] * div[i2(n, nn, ss)][p].conj();
                            }
                        }
                    }
                }
                s.re
            })
            .collect()
    }

    /// Sup norms of the five torsion-corrected Bianchi identities, in the order
    /// `Omega_{ijbar klbar} - Omega_{kjbar ilbar} - nabla_jbar T_{ki lbar}`,
    /// `Omega_{ijbar klbar} - Omega_{ilbar kjbar} - nabla_i T_{lbar jbar k}`,
    /// `nabla_m Omega_{ijbar klbar} - nabla_i Omega_{mjbar klbar} - T^p_{im} Omega_{pjbar klbar}`,
    /// `nabla_nbar Omega_{ijbar klbar} - nabla_jbar Omega_{inbar klbar} - T^sbar_{jbar nbar} Omega_{isbar klbar}`,
    /// and the cyclic identity for `nabla T`.
    pub fn bianchi_residuals(&self) -> Result<[f64; 5]> {
        let n = self.n;
        let len = self.len;
        let om = &self.omega;
        let mut res = [0.0; 5];

        let dbar_tl = self.nabla(&self.torsion_lowered(), Connection::Chern, false)?; // [j][k][i][l]
                                                                                      // conj(T_{l j kbar}) = T_{lbar jbar k}, slots (lbar, jbar, k)
        let tl_bar = self.torsion_lowered().conj();
        let d_tl_bar = self.nabla(&tl_bar, Connection::Chern, true)?; // [i][l][j][k]
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let a = &om[i4(n, i, j, k, l)];
                        let b1 = &om[i4(n, k, j, i, l)];
                        let t1 = dbar_tl.comp(&[j, k, i, l]);
                        let b2 = &om[i4(n, i, l, k, j)];
                        let t2 = d_tl_bar.comp(&[i, l, j, k]);
                        for p in 0..len {
                            res[0] = f64::max(res[0], (a[p] - b1[p] - t1[p]).norm());
                            res[1] = f64::max(res[1], (a[p] - b2[p] - t2[p]).norm());
                        }
                    }
                }
            }
        }
        drop(dbar_tl);
        drop(d_tl_bar);

        let curv = self.curvature();
        let d_om = self.nabla(&curv, Connection::Chern, true)?; // [m][i][j][k][l]
        for m in 0..n {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        for l in 0..n {
                            let a = d_om.comp(&[m, i, j, k, l]);
                            let b = d_om.comp(&[i, m, j, k, l]);
                            for p in 0..len {
                                let mut r = a[p] - b[p];
                                for q in 0..n {
                                    r -= self.torsion[i3(n, q, i, m)][p] * om[i4(n, q, j, k, l)][p];
                                }
                                res[2] = res[2].max(r.norm());
                            }
                        }
                    }
                }
            }
        }
        drop(d_om);
        let dbar_om = self.nabla(&curv, Connection::Chern, false)?; // [nbar][i][j][k][l]
        for nn in 0..n {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        for l in 0..n {
                            let a = dbar_om.comp(&[nn, i, j, k, l]);
                            let b = dbar_om.comp(&[j, i, nn, k, l]);
                            for p in 0..len {
                                let mut r = a[p] - b[p];
                                for s in 0..n {
                                    r -= self.torsion[i3(n, s, j, nn)][p].conj() * om[i4(n, i, s, k, l)][p];
                                }
                                res[3] = res[3].max(r.norm());
                            }
                        }
                    }
                }
            }
        }
        drop(dbar_om);

        let dt = self.nabla(&self.torsion(), Connection::Chern, true)?; // [i][l][j][k] = nabla_i T^l_{jk}
        let t = |l, a, b, p: usize| self.torsion[i3(n, l, a, b)][p];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let (a, b, cc) = (dt.comp(&[i, l, j, k]), dt.comp(&[k, l, i, j]), dt.comp(&[j, l, k, i]));
                        for p in 0..len {
                            let mut r = a[p] + b[p] + cc[p];
                            for q in 0..n {
                                r -= t(q, i, j, p) * t(l, k, q, p)
                                    + t(q, j, k, p) * t(l, i, q, p)
                                    + t(q, k, i, p) * t(l, j, q, p);
                            }
                            res[4] = res[4].max(r.norm());
                        }
                    }
                }
            }
        }
        Ok(res)
    }

    /// Lee form, Chern-Ricci forms and the defect of `rho - rho^T = d alpha`, where
    /// `rho = i S1_{k sbar} dz^k ^ dzbar^s` and
    /// `rho^T = (i/2) (div T)_{jk} dz^j ^ dz^k + i S3_{k sbar} dz^k ^ dzbar^s`.
    pub fn lee_rho(&self, ricci: &RicciData) -> Result<LeeRhoReport> {
        let n = self.n;
        let len = self.len;
        let alpha: Vec<Field> = (0..n)
            .map(|k| (0..len).map(|p| (0..n).map(|q| self.torsion[i3(n, q, k, q)][p]).sum::<C64>() * I).collect())
            .collect();
        let rho = TwoForm {
            p20: zero_fields(n * n, len),
            p11: ricci.s1.iter().map(|f| f.iter().map(|z| z * I).collect()).collect(),
        };
        let rho_t = TwoForm {
            p20: self.div_torsion()?.into_iter().map(|f| f.into_iter().map(|z| z * I).collect()).collect(),
            p11: ricci.s3.iter().map(|f| f.iter().map(|z| z * I).collect()).collect(),
        };
        // d alpha: (2,0) part d_j a_k - d_k a_j, (1,1) part -dbar_s a_k
        let ops: Vec<Vec<Dir>> = (0..n).map(|m| vec![Dir::Holo(m)]).chain((0..n).map(|m| vec![Dir::Anti(m)])).collect();
        let op_refs: Vec<&[Dir]> = ops.iter().map(|o| o.as_slice()).collect();
        let refs: Vec<&[C64]> = alpha.iter().map(|f| f.as_slice()).collect();
        let da = self.diff.derivatives_many(&refs, &op_refs)?; // da[k][m] = d_m a_k, da[k][n+s] = dbar_s a_k
        let mut residual: f64 = 0.0;
        for j in 0..n {
            for k in 0..n {
                for p in 0..len {
                    let d20 = da[k][j][p] - da[j][k][p];
                    let r20 = rho.p20[i2(n, j, k)][p] - rho_t.p20[i2(n, j, k)][p] - d20;
                    let d11 = -da[j][n + k][p];
                    let r11 = rho.p11[i2(n, j, k)][p] - rho_t.p11[i2(n, j, k)][p] - d11;
                    residual = residual.max(r20.norm()).max(r11.norm());
                }
            }
        }
        // d rho: (2,1) part d_j rho_{k sbar} - d_k rho_{j sbar}; (1,2) part dbar_t rho_{k sbar} - dbar_s rho_{k tbar}
        let refs: Vec<&[C64]> = rho.p11.iter().map(|f| f.as_slice()).collect();
        let dr = self.diff.derivatives_many(&refs, &op_refs)?;
        let mut d_rho: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                for s in 0..n {
                    for p in 0..len {
                        let r21 = dr[i2(n, b, s)][a][p] - dr[i2(n, a, s)][b][p];
                        let r12 = dr[i2(n, s, b)][n + a][p] - dr[i2(n, s, a)][n + b][p];
                        d_rho = d_rho.max(r21.norm()).max(r12.norm());
                    }
                }
            }
        }
        Ok(LeeRhoReport { alpha, rho, rho_t, residual, d_rho })
    }

    /// `D(nabla T)_{i jbar}^{lbar k} = (1/2) g^{m nbar} g^{p sbar} nabla_i T^k_{mp} conj(nabla_j T^l_{ns})`,
    /// slots `(i, jbar, lbar, k)`.
    pub fn dnabla_t_term(&self) -> Result<TensorField> {
        let n = self.n;
        let dt = self.nabla(&self.torsion(), Connection::Chern, true)?; // [i][k][m][p]
        let mut out = zero_fields(n.pow(4), self.len);
        for p in 0..self.len {
            let gi = |a, b| self.ginv[i2(n, a, b)][p];
            for i in 0..n {
                for j in 0..n {
                    for l in 0..n {
                        for k in 0..n {
                            let mut s = c(0.0, 0.0);
                            for m in 0..n {
                                for nn in 0..n {
                                    for pp in 0..n {
                                        for ss in 0..n {
                                            s += gi(m, nn)
                                                * gi(pp, ss)
                                                * dt.comps()[i4(n, i, k, m, pp)][p]
                                                * dt.comps()[i4(n, j, l, nn, ss)][p].conj();
                                        }
                                    }
                                }
                            }
                            out[i4(n, i, j, l, k)][p] = s * 0.5;
                        }
                    }
                }
            }
        }
        let sig = vec![Slot::Lower, Slot::LowerBar, Slot::UpperBar, Slot::Upper];
        TensorField::new(n, sig, out)
    }

    /// Sup norm of `nabla g` for the given connection (zero for the Chern connection).
    pub fn metric_compatibility_defect(&self, conn: Connection) -> Result<f64> {
        let g = self.metric_tensor();
        let a = self.nabla(&g, conn, true)?;
        let b = self.nabla(&g, conn, false)?;
        Ok(a.max_abs().max(b.max_abs()))
    }

    pub fn torsion_sup(&self) -> f64 {
        sup(&self.torsion)
    }

    pub fn curvature_sup(&self) -> f64 {
        sup(&self.omega)
    }
}

/// Hermitian matrix `H[(k,i),(l,j)]` at point `p` from a field with slots `(i, jbar, lbar, k)`.
pub fn raised_matrix(x: &TensorField, p: usize) -> CMat {
    let n = x.n();
    let mut h = CMat::zeros(n * n, n * n);
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                for k in 0..n {
                    h[(k * n + i, l * n + j)] = x.comps()[i4(n, i, j, l, k)][p];
                }
            }
        }
    }
    h
}

/// Inverse of [`raised_matrix`] written into component `p` of `comps`.
pub fn store_raised(comps: &mut [Field], n: usize, p: usize, h: &CMat) {
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                for k in 0..n {
                    comps[i4(n, i, j, l, k)][p] = h[(k * n + i, l * n + j)];
                }
            }
        }
    }
}
