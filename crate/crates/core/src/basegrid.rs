//! Discretisations of the base manifold `S₀`.
//!
//! Two charts are supported:
//!
//! * `torus2d`: an `N × N` periodic grid on `[0, 2π)²`, nodes stored row-major
//!   with the first coordinate `y¹` indexing rows (`node = i·N + j`).
//! * `axisym-sphere`: `M` cell-centred polar angles `φⱼ = (j + ½)π/M`; fields
//!   depend on `φ` only. The chart coordinates are `(φ, α)` with
//!   `σ = diag(1, sin²φ)`, and all `α`-derivatives vanish.
//!
//! Derivatives use sixth-order central differences. On the sphere, ghost
//! values come from even reflection across both poles.

use std::f64::consts::PI;
use std::io::{self, BufRead, Write};

use thiserror::Error;

pub const MIN_RESOLUTION: usize = 8;

/// First-derivative stencil weights for offsets 1, 2, 3 (antisymmetric).
const D1: [f64; 3] = [3.0 / 4.0, -3.0 / 20.0, 1.0 / 60.0];
/// Second-derivative stencil weights for offsets 1, 2, 3 (symmetric); the
/// centre weight is `−2 Σ D2`.
const D2: [f64; 3] = [3.0 / 2.0, -3.0 / 20.0, 1.0 / 90.0];

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid resolution {0} is below the minimum of {MIN_RESOLUTION}")]
    Resolution(usize),
    #[error("field has {got} values, grid has {expected} nodes")]
    Length { expected: usize, got: usize },
    #[error("non-finite value {value} at node {node}")]
    NonFinite { node: usize, value: f64 },
    #[error("malformed field dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Chart {
    Torus2d,
    AxisymSphere,
}

impl Chart {
    pub fn name(&self) -> &'static str {
        match self {
            Chart::Torus2d => "torus2d",
            Chart::AxisymSphere => "axisym-sphere",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "torus2d" => Some(Chart::Torus2d),
            "axisym-sphere" => Some(Chart::AxisymSphere),
            _ => None,
        }
    }
}

/// Diagonal chart metric `σ = diag(1, σ₂₂)` at a node together with
/// `∂₁σ₂₂`; every other derivative of `σ` vanishes in both charts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseMetric {
    pub s22: f64,
    pub d1_s22: f64,
}

impl BaseMetric {
    pub fn sqrt_det(&self) -> f64 {
        self.s22.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseGrid {
    chart: Chart,
    resolution: usize,
    spacing: f64,
    coords: Vec<[f64; 2]>,
    weights: Vec<f64>,
    metric: Vec<BaseMetric>,
}

impl BaseGrid {
    pub fn new(chart: Chart, resolution: usize) -> Result<Self, GridError> {
        if resolution < MIN_RESOLUTION {
            return Err(GridError::Resolution(resolution));
        }
        Ok(match chart {
            Chart::Torus2d => Self::torus(resolution),
            Chart::AxisymSphere => Self::sphere(resolution),
        })
    }

    fn torus(n: usize) -> Self {
        let h = 2.0 * PI / n as f64;
        let mut coords = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                coords.push([i as f64 * h, j as f64 * h]);
            }
        }
        Self {
            chart: Chart::Torus2d,
            resolution: n,
            spacing: h,
            coords,
            weights: vec![h * h; n * n],
            metric: vec![BaseMetric { s22: 1.0, d1_s22: 0.0 }; n * n],
        }
    }

    fn sphere(m: usize) -> Self {
        let h = PI / m as f64;
        let phis: Vec<f64> = (0..m).map(|j| (j as f64 + 0.5) * h).collect();
        let weights = fejer_weights(&phis)
            .into_iter()
            .map(|w| 2.0 * PI * w)
            .collect();
        Self {
            chart: Chart::AxisymSphere,
            resolution: m,
            spacing: h,
            coords: phis.iter().map(|&p| [p, 0.0]).collect(),
            weights,
            metric: phis
                .iter()
                .map(|&p| BaseMetric {
                    s22: p.sin().powi(2),
                    d1_s22: 2.0 * p.sin() * p.cos(),
                })
                .collect(),
        }
    }

    pub fn chart(&self) -> Chart {
        self.chart
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Grid spacing `h` (`2π/N` on the torus, `π/M` on the sphere).
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    /// `σ`-measure quadrature weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn metric(&self) -> &[BaseMetric] {
        &self.metric
    }

    /// Number of chart directions along which fields may vary.
    pub fn active_dims(&self) -> usize {
        match self.chart {
            Chart::Torus2d => 2,
            Chart::AxisymSphere => 1,
        }
    }

    pub fn field<F: Fn([f64; 2]) -> f64>(&self, f: F) -> ScalarField {
        ScalarField {
            values: self.coords.iter().map(|&y| f(y)).collect(),
        }
    }

    pub fn constant(&self, c: f64) -> ScalarField {
        ScalarField {
            values: vec![c; self.len()],
        }
    }

    /// Sixth-order partials `(∂₁, ∂₂, ∂₁₁, ∂₁₂, ∂₂₂)` of a field.
    pub fn partials(&self, f: &ScalarField) -> Partials {
        let mut out = Partials::zeros(self.len());
        self.partials_into(&f.values, &mut out);
        out
    }

    pub(crate) fn partials_into(&self, f: &[f64], out: &mut Partials) {
        debug_assert_eq!(f.len(), self.len());
        out.resize(self.len());
        let h = self.spacing;
        match self.chart {
            Chart::Torus2d => {
                let n = self.resolution;
                // periodic neighbour indices at offsets −3..=3
                let nb: Vec<[usize; 7]> = (0..n)
                    .map(|i| std::array::from_fn(|k| (i + n + k - 3) % n))
                    .collect();
                for i in 0..n {
                    let rows = &nb[i];
                    let row = i * n;
                    for j in 0..n {
                        let idx = row + j;
                        let cols = &nb[j];
                        let at1 = |k: isize| f[rows[(k + 3) as usize] * n + j];
                        let at2 = |k: isize| f[row + cols[(k + 3) as usize]];
                        out.d1[idx] = first(at1, h);
                        out.d2[idx] = first(at2, h);
                        out.d11[idx] = second(f[idx], at1, h);
                        out.d22[idx] = second(f[idx], at2, h);
                    }
                }
                // mixed derivative: ∂₁ applied to ∂₂
                for i in 0..n {
                    let rows = &nb[i];
                    for j in 0..n {
                        let d2 = &out.d2;
                        out.d12[i * n + j] = first(|k| d2[rows[(k + 3) as usize] * n + j], h);
                    }
                }
            }
            Chart::AxisymSphere => {
                let m = self.resolution as isize;
                // even reflection across φ = 0 and φ = π for cell-centred nodes
                let reflect = |k: isize| -> usize {
                    let k = if k < 0 { -k - 1 } else { k };
                    let k = if k >= m { 2 * m - 1 - k } else { k };
                    k as usize
                };
                for j in 0..self.resolution {
                    let jj = j as isize;
                    out.d1[j] = first(|k| f[reflect(jj + k)], h);
                    out.d11[j] = second(f[j], |k| f[reflect(jj + k)], h);
                    out.d2[j] = 0.0;
                    out.d12[j] = 0.0;
                    out.d22[j] = 0.0;
                }
            }
        }
    }

    /// `Σ f · density · weight`.
    pub fn integrate(&self, f: &ScalarField, density: Option<&[f64]>) -> f64 {
        match density {
            None => f.values.iter().zip(&self.weights).map(|(v, w)| v * w).sum(),
            Some(d) => f
                .values
                .iter()
                .zip(d)
                .zip(&self.weights)
                .map(|((v, d), w)| v * d * w)
                .sum(),
        }
    }

    /// Same as [`Self::integrate`] on a raw slice.
    pub fn integrate_values(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }

    /// Writes the plain-text field dump: a header `chart resolution time`
    /// followed by one node value per line in node order.
    pub fn write_dump<W: Write>(&self, mut w: W, field: &ScalarField, time: f64) -> io::Result<()> {
        writeln!(w, "{} {} {:.16e}", self.chart.name(), self.resolution, time)?;
        for v in &field.values {
            writeln!(w, "{v:.16e}")?;
        }
        Ok(())
    }

    /// Parses a field dump, returning the grid, the field and the time stamp.
    pub fn read_dump<R: BufRead>(r: R) -> Result<(BaseGrid, ScalarField, f64), GridError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| GridError::Format("missing header".into()))??;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(GridError::Format(format!("bad header {header:?}")));
        }
        let chart = Chart::parse(parts[0])
            .ok_or_else(|| GridError::Format(format!("unknown chart {:?}", parts[0])))?;
        let resolution: usize = parts[1]
            .parse()
            .map_err(|_| GridError::Format(format!("bad resolution {:?}", parts[1])))?;
        let time: f64 = parts[2]
            .parse()
            .map_err(|_| GridError::Format(format!("bad time {:?}", parts[2])))?;
        let grid = BaseGrid::new(chart, resolution)?;
        let mut values = Vec::with_capacity(grid.len());
        for line in lines {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            values.push(
                t.parse::<f64>()
                    .map_err(|_| GridError::Format(format!("bad value {t:?}")))?,
            );
        }
        let field = ScalarField::new(&grid, values)?;
        Ok((grid, field, time))
    }
}

#[inline(always)]
fn first<F: Fn(isize) -> f64>(f: F, h: f64) -> f64 {
    (D1[0] * (f(1) - f(-1)) + D1[1] * (f(2) - f(-2)) + D1[2] * (f(3) - f(-3))) / h
}

#[inline(always)]
fn second<F: Fn(isize) -> f64>(c: f64, f: F, h: f64) -> f64 {
    (D2[0] * ((f(1) - c) + (f(-1) - c))
        + D2[1] * ((f(2) - c) + (f(-2) - c))
        + D2[2] * ((f(3) - c) + (f(-3) - c)))
        / (h * h)
}

/// Fejér's first rule on the cell-centred angles: weights `wⱼ` with
/// `Σ wⱼ g(cos φⱼ) ≈ ∫₀^π g(cos φ) sin φ dφ`, exact for polynomials in `cos φ`
/// of degree below `M`.
fn fejer_weights(phis: &[f64]) -> Vec<f64> {
    let m = phis.len();
    phis.iter()
        .map(|&p| {
            let mut s = 0.0;
            for k in 1..=m / 2 {
                let k = k as f64;
                s += (2.0 * k * p).cos() / (4.0 * k * k - 1.0);
            }
            2.0 / m as f64 * (1.0 - 2.0 * s)
        })
        .collect()
}

/// One real value per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: &BaseGrid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::Length {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some((node, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(GridError::NonFinite { node, value });
        }
        Ok(Self { values })
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn oscillation(&self) -> f64 {
        self.max() - self.min()
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> ScalarField {
        ScalarField {
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Chart partial derivatives of a scalar field.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Partials {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub d11: Vec<f64>,
    pub d12: Vec<f64>,
    pub d22: Vec<f64>,
}

impl Partials {
    pub fn zeros(n: usize) -> Self {
        Self {
            d1: vec![0.0; n],
            d2: vec![0.0; n],
            d11: vec![0.0; n],
            d12: vec![0.0; n],
            d22: vec![0.0; n],
        }
    }

    fn resize(&mut self, n: usize) {
        for v in [&mut self.d1, &mut self.d2, &mut self.d11, &mut self.d12, &mut self.d22] {
            v.resize(n, 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn torus_grid_layout() {
        let g = BaseGrid::new(Chart::Torus2d, 64).unwrap();
        assert_eq!(g.len(), 4096);
        assert_eq!(g.spacing(), 2.0 * PI / 64.0);
        assert!((g.integrate(&g.constant(1.0), None) - 4.0 * PI * PI).abs() < 1e-11);
    }

    #[test]
    fn sphere_weights_sum_to_area() {
        for m in [8, 33, 256] {
            let g = BaseGrid::new(Chart::AxisymSphere, m).unwrap();
            let total: f64 = g.weights().iter().sum();
            assert!((total / (4.0 * PI) - 1.0).abs() < 1e-13, "M = {m}: {total}");
        }
    }

    #[test]
    fn sphere_weights_integrate_polynomials_in_cos() {
        let g = BaseGrid::new(Chart::AxisymSphere, 16).unwrap();
        // ∫ cos²φ dσ = 4π/3
        let f = g.field(|y| y[0].cos().powi(2));
        assert!((g.integrate(&f, None) - 4.0 * PI / 3.0).abs() < 1e-13);
        // odd in cos φ
        let f = g.field(|y| y[0].cos().powi(3));
        assert!(g.integrate(&f, None).abs() < 1e-14);
    }

    #[test]
    fn low_resolution_rejected() {
        assert!(matches!(BaseGrid::new(Chart::Torus2d, 4), Err(GridError::Resolution(4))));
        assert!(BaseGrid::new(Chart::AxisymSphere, 7).is_err());
    }

    #[test]
    fn constants_have_zero_derivatives() {
        for chart in [Chart::Torus2d, Chart::AxisymSphere] {
            let g = BaseGrid::new(chart, 32).unwrap();
            let p = g.partials(&g.constant(1.2345678901));
            for v in [&p.d1, &p.d2, &p.d11, &p.d12, &p.d22] {
                assert!(v.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn torus_sine_derivative() {
        let g = BaseGrid::new(Chart::Torus2d, 64).unwrap();
        let p = g.partials(&g.field(|y| y[0].sin()));
        let exact: Vec<f64> = g.coords().iter().map(|y| y[0].cos()).collect();
        assert!(max_err(&p.d1, &exact) <= 1e-6);
        assert!(p.d2.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn torus_mixed_partials() {
        let g = BaseGrid::new(Chart::Torus2d, 64).unwrap();
        let p = g.partials(&g.field(|y| (y[0] + 2.0 * y[1]).sin()));
        let d12: Vec<f64> = g.coords().iter().map(|y| -2.0 * (y[0] + 2.0 * y[1]).sin()).collect();
        let d22: Vec<f64> = g.coords().iter().map(|y| -4.0 * (y[0] + 2.0 * y[1]).sin()).collect();
        assert!(max_err(&p.d12, &d12) < 1e-6);
        assert!(max_err(&p.d22, &d22) < 1e-5);
    }

    #[test]
    fn sphere_cosine_derivative() {
        let g = BaseGrid::new(Chart::AxisymSphere, 128).unwrap();
        let p = g.partials(&g.field(|y| y[0].cos()));
        let d1: Vec<f64> = g.coords().iter().map(|y| -y[0].sin()).collect();
        let d11: Vec<f64> = g.coords().iter().map(|y| -y[0].cos()).collect();
        assert!(max_err(&p.d1, &d1) < 1e-9);
        assert!(max_err(&p.d11, &d11) < 1e-8);
        assert!(p.d2.iter().chain(&p.d12).chain(&p.d22).all(|&v| v == 0.0));
    }

    #[test]
    fn observed_order_under_refinement() {
        let errs: Vec<f64> = [16usize, 32, 64]
            .iter()
            .map(|&n| {
                let g = BaseGrid::new(Chart::Torus2d, n).unwrap();
                let f = g.field(|y| (3.0 * y[0]).sin() + (2.0 * y[1]).cos());
                let p = g.partials(&f);
                let ex: Vec<f64> = g.coords().iter().map(|y| -9.0 * (3.0 * y[0]).sin()).collect();
                max_err(&p.d11, &ex)
            })
            .collect();
        for w in errs.windows(2) {
            assert!((w[0] / w[1]).log2() >= 3.8, "{errs:?}");
        }
    }

    #[test]
    fn sine_has_zero_mean() {
        let g = BaseGrid::new(Chart::Torus2d, 64).unwrap();
        assert!(g.integrate(&g.field(|y| y[0].sin()), None).abs() < 1e-12);
    }

    #[test]
    fn dump_round_trip_is_exact() {
        let g = BaseGrid::new(Chart::AxisymSphere, 12).unwrap();
        let f = g.field(|y| 1.0 + 0.1 * y[0].cos() + 1e-17 * y[0]);
        let mut buf = Vec::new();
        g.write_dump(&mut buf, &f, 0.375).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("axisym-sphere 12 "));
        let (g2, f2, t) = BaseGrid::read_dump(buf.as_slice()).unwrap();
        assert_eq!(g2, g);
        assert_eq!(f2, f);
        assert_eq!(t, 0.375);
    }

    #[test]
    fn dump_rejects_wrong_length() {
        let text = "torus2d 8 0\n1.0\n2.0\n";
        assert!(matches!(
            BaseGrid::read_dump(text.as_bytes()),
            Err(GridError::Length { expected: 64, got: 2 })
        ));
        assert!(BaseGrid::read_dump("cube 8 0\n".as_bytes()).is_err());
    }

    #[test]
    fn non_finite_field_rejected() {
        let g = BaseGrid::new(Chart::AxisymSphere, 8).unwrap();
        let mut v = vec![1.0; 8];
        v[3] = f64::NAN;
        assert!(matches!(ScalarField::new(&g, v), Err(GridError::NonFinite { node: 3, .. })));
    }
}
