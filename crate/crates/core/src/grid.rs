//! Periodic coordinate charts `C^n / lattice` and differentiation on them.
//!
//! Real coordinates are ordered `(x_1, y_1, x_2, y_2, ...)` with `z_j = x_j + i y_j`;
//! fields are stored row-major with axis 0 varying slowest.
//! `d_j = (d/dx_j - i d/dy_j) / 2` and `d_jbar = (d/dx_j + i d/dy_j) / 2`.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, C64};

/// Scalar grid function, one complex value per lattice point.
pub type Field = Vec<C64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusChart {
    n: usize,
    periods: Vec<f64>,
    grid: Vec<usize>,
}

impl TorusChart {
    pub fn new(n: usize, periods: Vec<f64>, grid: Vec<usize>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGrid("complex dimension must be positive".into()));
        }
        if periods.len() != 2 * n || grid.len() != 2 * n {
            return Err(Error::InvalidGrid(format!(
                "expected {} periods and grid sizes, got {} and {}",
                2 * n,
                periods.len(),
                grid.len()
            )));
        }
        if let Some(p) = periods.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::InvalidGrid(format!("period {p} is not positive")));
        }
        if let Some(g) = grid.iter().find(|&&g| g < 4 || g % 2 != 0) {
            return Err(Error::InvalidGrid(format!("grid size {g} must be even and at least 4")));
        }
        Ok(Self { n, periods, grid })
    }

    pub fn uniform(n: usize, period: f64, points: usize) -> Result<Self> {
        Self::new(n, vec![period; 2 * n], vec![points; 2 * n])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn axes(&self) -> usize {
        2 * self.n
    }

    pub fn periods(&self) -> &[f64] {
        &self.periods
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    /// Number of lattice points.
    pub fn len(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.periods[axis] / self.grid[axis] as f64
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.axes()).map(|a| self.spacing(a)).fold(f64::INFINITY, f64::min)
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.axes()];
        for a in (0..self.axes().saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.grid[a + 1];
        }
        s
    }

    /// Real coordinates of lattice point `p`.
    pub fn coords(&self, p: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes()];
        let mut rest = p;
        for a in (0..self.axes()).rev() {
            let i = rest % self.grid[a];
            rest /= self.grid[a];
            out[a] = i as f64 * self.spacing(a);
        }
        out
    }

    pub fn sample(&self, f: impl Fn(&[f64]) -> C64) -> Field {
        (0..self.len()).map(|p| f(&self.coords(p))).collect()
    }
}

/// Direction of a first-order complex derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dir {
    Holo(usize),
    Anti(usize),
}

impl Dir {
    pub fn index(self) -> usize {
        match self {
            Dir::Holo(j) | Dir::Anti(j) => j,
        }
    }

    pub fn conj(self) -> Dir {
        match self {
            Dir::Holo(j) => Dir::Anti(j),
            Dir::Anti(j) => Dir::Holo(j),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Spectral,
    /// Second-order central differences.
    FiniteDifference,
}

struct FftNd {
    grid: Vec<usize>,
    strides: Vec<usize>,
    fwd: Vec<Arc<dyn Fft<f64>>>,
    inv: Vec<Arc<dyn Fft<f64>>>,
}

impl FftNd {
    fn new(chart: &TorusChart) -> Self {
        let mut planner = FftPlanner::new();
        let grid = chart.grid().to_vec();
        let fwd = grid.iter().map(|&g| planner.plan_fft_forward(g)).collect();
        let inv = grid.iter().map(|&g| planner.plan_fft_inverse(g)).collect();
        Self { strides: chart.strides(), grid, fwd, inv }
    }

    /// Unnormalized transform along every axis.
    fn transform(&self, data: &mut [C64], inverse: bool) {
        let total = data.len();
        let mut buf = vec![c(0.0, 0.0); total];
        for a in 0..self.grid.len() {
            let len = self.grid[a];
            let stride = self.strides[a];
            let block = len * stride;
            // gather lines along axis `a` contiguously
            let mut line = 0;
            for outer in (0..total).step_by(block) {
                for r in 0..stride {
                    let base = outer + r;
                    let dst = &mut buf[line * len..(line + 1) * len];
                    for (t, d) in dst.iter_mut().enumerate() {
                        *d = data[base + t * stride];
                    }
                    line += 1;
                }
            }
            let plan = if inverse { &self.inv[a] } else { &self.fwd[a] };
            plan.process(&mut buf);
            line = 0;
            for outer in (0..total).step_by(block) {
                for r in 0..stride {
                    let base = outer + r;
                    let src = &buf[line * len..(line + 1) * len];
                    for (t, s) in src.iter().enumerate() {
                        data[base + t * stride] = *s;
                    }
                    line += 1;
                }
            }
        }
    }
}

/// Signed mode number of FFT bin `i` on an axis with `len` points.
fn mode(i: usize, len: usize) -> i64 {
    if i <= len / 2 {
        i as i64
    } else {
        i as i64 - len as i64
    }
}

/// First and second complex derivatives of grid fields.
pub struct Differentiator {
    chart: TorusChart,
    backend: Backend,
    fft: Option<FftNd>,
    // symbols[2*j] for d_j, symbols[2*j+1] for d_jbar
    symbols: Vec<Field>,
}

impl Differentiator {
    pub fn new(chart: &TorusChart, backend: Backend) -> Self {
        let (fft, symbols) = match backend {
            Backend::Spectral => {
                let n = chart.n();
                let axes = chart.axes();
                // wavenumber per axis with the Nyquist bin zeroed
                let k: Vec<Vec<f64>> = (0..axes)
                    .map(|a| {
                        let g = chart.grid()[a];
                        (0..g)
                            .map(|i| {
                                let m = mode(i, g);
                                if 2 * m.unsigned_abs() as usize == g {
                                    0.0
                                } else {
                                    2.0 * PI * m as f64 / chart.periods()[a]
                                }
                            })
                            .collect()
                    })
                    .collect();
                let strides = chart.strides();
                let mut symbols = vec![vec![c(0.0, 0.0); chart.len()]; 2 * n];
                for p in 0..chart.len() {
                    for j in 0..n {
                        let ix = (p / strides[2 * j]) % chart.grid()[2 * j];
                        let iy = (p / strides[2 * j + 1]) % chart.grid()[2 * j + 1];
                        let (kx, ky) = (k[2 * j][ix], k[2 * j + 1][iy]);
                        symbols[2 * j][p] = c(0.5 * ky, 0.5 * kx);
                        symbols[2 * j + 1][p] = c(-0.5 * ky, 0.5 * kx);
                    }
                }
                (Some(FftNd::new(chart)), symbols)
            }
            Backend::FiniteDifference => (None, Vec::new()),
        };
        Self { chart: chart.clone(), backend, fft, symbols }
    }

    pub fn chart(&self) -> &TorusChart {
        &self.chart
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    fn check_len(&self, f: &[C64]) -> Result<()> {
        if f.len() != self.chart.len() {
            return Err(Error::DimensionMismatch { expected: self.chart.len(), got: f.len() });
        }
        Ok(())
    }

    fn symbol(&self, d: Dir) -> &Field {
        match d {
            Dir::Holo(j) => &self.symbols[2 * j],
            Dir::Anti(j) => &self.symbols[2 * j + 1],
        }
    }

    pub fn forward(&self, f: &[C64]) -> Field {
        let mut s = f.to_vec();
        if let Some(fft) = &self.fft {
            fft.transform(&mut s, false);
        }
        s
    }

    /// Normalized inverse of [`Self::forward`].
    pub fn inverse(&self, spec: &mut [C64]) {
        if let Some(fft) = &self.fft {
            fft.transform(spec, true);
            let scale = 1.0 / spec.len() as f64;
            spec.iter_mut().for_each(|z| *z *= scale);
        }
    }

    pub fn derivative(&self, f: &[C64], dir: Dir) -> Result<Field> {
        Ok(self.derivatives(f, &[&[dir]])?.pop().unwrap())
    }

    /// Apply each composition of directions in `ops` to `f`.
    pub fn derivatives(&self, f: &[C64], ops: &[&[Dir]]) -> Result<Vec<Field>> {
        self.check_len(f)?;
        for op in ops {
            if let Some(d) = op.iter().find(|d| d.index() >= self.chart.n()) {
                return Err(Error::InvalidGrid(format!("direction {d:?} out of range")));
            }
        }
        match self.backend {
            Backend::Spectral => {
                let spec = self.forward(f);
                Ok(ops
                    .iter()
                    .map(|op| {
                        let mut out = spec.clone();
                        for d in op.iter() {
                            let s = self.symbol(*d);
                            out.iter_mut().zip(s).for_each(|(z, w)| *z *= w);
                        }
                        self.inverse(&mut out);
                        out
                    })
                    .collect())
            }
            Backend::FiniteDifference => {
                Ok(ops.iter().map(|op| op.iter().fold(f.to_vec(), |acc, d| self.fd_derivative(&acc, *d))).collect())
            }
        }
    }

    /// [`Self::derivatives`] for several fields, processed in parallel.
    pub fn derivatives_many(&self, fields: &[&[C64]], ops: &[&[Dir]]) -> Result<Vec<Vec<Field>>> {
        fields.par_iter().map(|f| self.derivatives(f, ops)).collect()
    }

    fn central(&self, f: &[C64], axis: usize) -> Field {
        let strides = self.chart.strides();
        let g = self.chart.grid()[axis];
        let s = strides[axis];
        let inv2h = 1.0 / (2.0 * self.chart.spacing(axis));
        (0..f.len())
            .map(|p| {
                let i = (p / s) % g;
                let base = p - i * s;
                let plus = base + ((i + 1) % g) * s;
                let minus = base + ((i + g - 1) % g) * s;
                (f[plus] - f[minus]) * inv2h
            })
            .collect()
    }

    fn fd_derivative(&self, f: &[C64], d: Dir) -> Field {
        let j = d.index();
        let dx = self.central(f, 2 * j);
        let dy = self.central(f, 2 * j + 1);
        let sign = match d {
            Dir::Holo(_) => -1.0,
            Dir::Anti(_) => 1.0,
        };
        dx.iter().zip(&dy).map(|(a, b)| (a + c(0.0, sign) * b) * 0.5).collect()
    }

    fn axis_modes(&self, p: usize) -> Vec<i64> {
        let strides = self.chart.strides();
        (0..self.chart.axes())
            .map(|a| {
                let g = self.chart.grid()[a];
                mode((p / strides[a]) % g, g)
            })
            .collect()
    }

    /// Two-thirds rule: zero every mode with `|m| > N/3` on some axis. No-op for finite differences.
    pub fn dealias(&self, f: &mut [C64]) -> Result<()> {
        self.check_len(f)?;
        if self.backend != Backend::Spectral {
            return Ok(());
        }
        let mut spec = self.forward(f);
        let grid = self.chart.grid().to_vec();
        for (p, z) in spec.iter_mut().enumerate() {
            let m = self.axis_modes(p);
            if m.iter().zip(&grid).any(|(m, &g)| 3 * m.unsigned_abs() as usize > g) {
                *z = c(0.0, 0.0);
            }
        }
        self.inverse(&mut spec);
        f.copy_from_slice(&spec);
        Ok(())
    }

    /// Fraction of spectral energy in modes with `|m| > N/4` on some axis.
    pub fn tail_energy_fraction(&self, f: &[C64]) -> Result<f64> {
        self.check_len(f)?;
        let mut spec = f.to_vec();
        match &self.fft {
            Some(fft) => fft.transform(&mut spec, false),
            None => FftNd::new(&self.chart).transform(&mut spec, false),
        }
        let grid = self.chart.grid().to_vec();
        let (mut tail, mut total) = (0.0, 0.0);
        for (p, z) in spec.iter().enumerate() {
            let e = z.norm_sqr();
            total += e;
            if self.axis_modes(p).iter().zip(&grid).any(|(m, &g)| 4 * m.unsigned_abs() as usize > g) {
                tail += e;
            }
        }
        Ok(if total > 0.0 { tail / total } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_diff(a: &[C64], b: &[C64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn chart_validation() {
        assert!(TorusChart::uniform(2, 1.0, 6).is_ok());
        assert!(TorusChart::uniform(2, 1.0, 5).is_err());
        assert!(TorusChart::uniform(2, 1.0, 2).is_err());
        assert!(TorusChart::uniform(1, -1.0, 8).is_err());
        assert!(TorusChart::new(2, vec![1.0; 3], vec![8; 4]).is_err());
    }

    #[test]
    fn coordinates_follow_row_major_layout() {
        let chart = TorusChart::new(1, vec![1.0, 2.0], vec![4, 8]).unwrap();
        assert_eq!(chart.coords(0), vec![0.0, 0.0]);
        assert_eq!(chart.coords(1), vec![0.0, 0.25]);
        assert_eq!(chart.coords(8), vec![0.25, 0.0]);
    }

    #[test]
    fn constant_field_has_zero_derivative() {
        let chart = TorusChart::uniform(2, 1.0, 8).unwrap();
        for backend in [Backend::Spectral, Backend::FiniteDifference] {
            let d = Differentiator::new(&chart, backend);
            let f = vec![c(1.5, -0.5); chart.len()];
            for dir in [Dir::Holo(0), Dir::Anti(1)] {
                let df = d.derivative(&f, dir).unwrap();
                assert!(df.iter().all(|z| z.norm() < 1e-13));
            }
        }
    }

    #[test]
    fn plane_wave_derivatives() {
        let l = 1.3;
        let chart = TorusChart::new(1, vec![l, l], vec![16, 8]).unwrap();
        let d = Differentiator::new(&chart, Backend::Spectral);
        let kx = 2.0 * PI * 3.0 / l;
        let ky = 2.0 * PI * -2.0 / l;
        let f = chart.sample(|x| (c(0.0, kx * x[0] + ky * x[1])).exp());
        // d/dz e^{i(kx x + ky y)} = (i kx + ky)/2 * f
        let dz = d.derivative(&f, Dir::Holo(0)).unwrap();
        let dzb = d.derivative(&f, Dir::Anti(0)).unwrap();
        let ez: Field = f.iter().map(|v| v * c(0.5 * ky, 0.5 * kx)).collect();
        let ezb: Field = f.iter().map(|v| v * c(-0.5 * ky, 0.5 * kx)).collect();
        assert!(max_diff(&dz, &ez) < 1e-11);
        assert!(max_diff(&dzb, &ezb) < 1e-11);
    }

    #[test]
    fn conjugation_symmetry_for_real_fields() {
        let chart = TorusChart::uniform(2, 1.0, 8).unwrap();
        let d = Differentiator::new(&chart, Backend::Spectral);
        let f = chart.sample(|x| c((2.0 * PI * x[0]).sin() * (2.0 * PI * (x[1] + 2.0 * x[3])).cos(), 0.0));
        for j in 0..2 {
            let a = d.derivative(&f, Dir::Holo(j)).unwrap();
            let b = d.derivative(&f, Dir::Anti(j)).unwrap();
            let ac: Field = a.iter().map(|z| z.conj()).collect();
            assert!(max_diff(&ac, &b) < 1e-12);
        }
    }

    #[test]
    fn finite_differences_converge_at_second_order() {
        let mut errs = Vec::new();
        for g in [16, 32] {
            let chart = TorusChart::uniform(1, 1.0, g).unwrap();
            let d = Differentiator::new(&chart, Backend::FiniteDifference);
            let f = chart.sample(|x| c((2.0 * PI * x[0]).sin() + (2.0 * PI * x[1]).cos(), 0.0));
            let exact = chart.sample(|x| c(PI * (2.0 * PI * x[0]).cos(), 0.0) + c(0.0, PI * (2.0 * PI * x[1]).sin()));
            errs.push(max_diff(&d.derivative(&f, Dir::Holo(0)).unwrap(), &exact));
        }
        let ratio = errs[0] / errs[1];
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn laplacian_symbol_on_plane_wave() {
        let chart = TorusChart::uniform(2, 1.0, 8).unwrap();
        let d = Differentiator::new(&chart, Backend::Spectral);
        let f = chart.sample(|x| c(0.0, 2.0 * PI * (x[0] + 2.0 * x[3])).exp());
        let out = d.derivatives(&f, &[&[Dir::Holo(0), Dir::Anti(0)], &[Dir::Anti(1), Dir::Holo(1)]]).unwrap();
        // d d-bar = (1/4) (d_xx + d_yy)
        let lam0 = -0.25 * (2.0 * PI).powi(2);
        let lam1 = -0.25 * (4.0 * PI).powi(2);
        let e0: Field = f.iter().map(|v| v * lam0).collect();
        let e1: Field = f.iter().map(|v| v * lam1).collect();
        assert!(max_diff(&out[0], &e0) < 1e-10);
        assert!(max_diff(&out[1], &e1) < 1e-10);
    }

    #[test]
    fn dealias_keeps_low_modes_and_removes_high_ones() {
        let chart = TorusChart::uniform(1, 1.0, 12).unwrap();
        let d = Differentiator::new(&chart, Backend::Spectral);
        let low = chart.sample(|x| c((2.0 * PI * x[0]).cos(), 0.0));
        let high = chart.sample(|x| c((2.0 * PI * 5.0 * x[1]).cos(), 0.0));
        let mut f: Field = low.iter().zip(&high).map(|(a, b)| a + b).collect();
        d.dealias(&mut f).unwrap();
        assert!(max_diff(&f, &low) < 1e-12);
        assert!(d.tail_energy_fraction(&low).unwrap() < 1e-20);
        assert!(d.tail_energy_fraction(&high).unwrap() > 0.99);
    }
}
