//! Extrinsic geometry of the radial graph `M = {(u(y), y)}`.
//!
//! Per node, with `uᵢ`, `uᵢⱼ` the chart partials of `u` and `ϑ = ϑ(u)`:
//!
//! ```text
//! gᵢⱼ  = uᵢuⱼ + ϑ²σᵢⱼ
//! v²   = 1 + ϑ⁻² σⁱʲuᵢuⱼ,      s = ϑ / v
//! hᵢⱼ  = (ϑ′ϑ²σᵢⱼ − ϑ u;ᵢⱼ) / s
//! ```
//!
//! where `u;ᵢⱼ = uᵢⱼ − Γᵏᵢⱼ uₖ` is the Hessian of the induced metric. The
//! Christoffel symbols are assembled from the analytic expansion
//! `∂ₖgᵢⱼ = uᵢₖuⱼ + uᵢuⱼₖ + 2ϑϑ′uₖσᵢⱼ + ϑ²∂ₖσᵢⱼ`. Curvatures follow the
//! outward-normal convention in which slices `u ≡ r` have `κ = ϑ′/ϑ > 0`.

use thiserror::Error;

use crate::ambient::{WarpJet, WarpedSpace};
use crate::basegrid::{BaseGrid, BaseMetric, Partials, ScalarField};

/// Relative size below which a negative discriminant is treated as rounding.
pub const DISCRIMINANT_CLAMP: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("u = {value} at node {node} leaves the radial domain ({a}, {b})")]
    RadialRange { node: usize, value: f64, a: f64, b: f64 },
    #[error("induced metric is not positive definite at node {node} (det = {det})")]
    SingularMetric { node: usize, det: f64 },
    #[error("non-finite geometry at node {node}")]
    NonFinite { node: usize },
    #[error("Weingarten map has complex eigenvalues at node {node} (discriminant {disc})")]
    ComplexCurvatures { node: usize, disc: f64 },
    #[error("strict convexity lost at node {node}: κ = ({k1}, {k2})")]
    ConvexityLoss { node: usize, k1: f64, k2: f64 },
    #[error("mean convexity lost at node {node}: κ = ({k1}, {k2})")]
    MeanConvexityLoss { node: usize, k1: f64, k2: f64 },
}

/// Symmetric 2×2 tensor `[[xx, xy], [xy, yy]]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub const fn new(xx: f64, xy: f64, yy: f64) -> Self {
        Self { xx, xy, yy }
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::new(c * self.xx, c * self.xy, c * self.yy)
    }
}

/// The curvature function driving the normal speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureFunction {
    /// `F = H₂/H₁ = 2κ₁κ₂/(κ₁ + κ₂)`, requires `κ ∈ Γ₊`.
    Quotient,
    /// `F = H₁`, requires `κ₁ + κ₂ > 0`.
    Mean,
    None,
}

impl CurvatureFunction {
    /// Evaluates `F(κ₁, κ₂)`. `node` only labels the error.
    pub fn eval(&self, k1: f64, k2: f64, node: usize) -> Result<f64, GeometryError> {
        if !(k1.is_finite() && k2.is_finite()) {
            return Err(GeometryError::NonFinite { node });
        }
        match self {
            CurvatureFunction::Quotient => {
                if !(k1 > 0.0 && k2 > 0.0) {
                    return Err(GeometryError::ConvexityLoss { node, k1, k2 });
                }
                Ok(2.0 * k1 * k2 / (k1 + k2))
            }
            CurvatureFunction::Mean => {
                if !(k1 + k2 > 0.0) {
                    return Err(GeometryError::MeanConvexityLoss { node, k1, k2 });
                }
                Ok(0.5 * (k1 + k2))
            }
            CurvatureFunction::None => Ok(0.0),
        }
    }

    /// Largest `∂F/∂κᵢ`.
    pub fn max_derivative(&self, k1: f64, k2: f64) -> f64 {
        match self {
            CurvatureFunction::Quotient => {
                let s = k1 + k2;
                2.0 * k1.abs().max(k2.abs()).powi(2) / (s * s)
            }
            CurvatureFunction::Mean => 0.5,
            CurvatureFunction::None => 0.0,
        }
    }
}

/// Induced metric quantities at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricData {
    pub g: Sym2,
    pub det_g: f64,
    pub v: f64,
    pub s: f64,
}

/// Complete extrinsic geometry at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeGeometry {
    pub metric: MetricData,
    pub h: Sym2,
    pub k1: f64,
    pub k2: f64,
}

impl NodeGeometry {
    pub fn h1(&self) -> f64 {
        0.5 * (self.k1 + self.k2)
    }

    pub fn h2(&self) -> f64 {
        self.k1 * self.k2
    }
}

/// Chart derivatives of `u` at one node.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jet2 {
    pub u1: f64,
    pub u2: f64,
    pub u11: f64,
    pub u12: f64,
    pub u22: f64,
}

impl Jet2 {
    pub fn at(p: &Partials, i: usize) -> Self {
        Self {
            u1: p.d1[i],
            u2: p.d2[i],
            u11: p.d11[i],
            u12: p.d12[i],
            u22: p.d22[i],
        }
    }
}

/// `g`, `v` and `s` from the warp jet at `u` and the gradient of `u`.
pub fn induced_metric(w: &WarpJet, d: &Jet2, sigma: &BaseMetric) -> MetricData {
    let th2 = w.value * w.value;
    let g = Sym2::new(d.u1 * d.u1 + th2, d.u1 * d.u2, d.u2 * d.u2 + th2 * sigma.s22);
    let grad2 = d.u1 * d.u1 + d.u2 * d.u2 / sigma.s22;
    let v = (1.0 + grad2 / th2).sqrt();
    MetricData {
        g,
        det_g: g.det(),
        v,
        s: w.value / v,
    }
}

/// Second fundamental form through `s hᵢⱼ = ϑ′ϑ²σᵢⱼ − ϑ u;ᵢⱼ`.
pub fn second_fundamental_form(
    w: &WarpJet,
    d: &Jet2,
    sigma: &BaseMetric,
    m: &MetricData,
    node: usize,
) -> Result<Sym2, GeometryError> {
    if !(m.det_g > 0.0 && m.g.xx > 0.0) {
        return Err(GeometryError::SingularMetric { node, det: m.det_g });
    }
    let (th, thp) = (w.value, w.d1);
    let tt = 2.0 * th * thp;
    // ∂ₖgᵢⱼ
    let d1g11 = 2.0 * d.u11 * d.u1 + tt * d.u1;
    let d1g12 = d.u11 * d.u2 + d.u1 * d.u12;
    let d1g22 = 2.0 * d.u12 * d.u2 + tt * d.u1 * sigma.s22 + th * th * sigma.d1_s22;
    let d2g11 = 2.0 * d.u12 * d.u1 + tt * d.u2;
    let d2g12 = d.u12 * d.u2 + d.u1 * d.u22;
    let d2g22 = 2.0 * d.u22 * d.u2 + tt * d.u2 * sigma.s22;
    // Christoffel symbols of the first kind Γ_{l,ij}
    let c1_11 = 0.5 * d1g11;
    let c2_11 = d1g12 - 0.5 * d2g11;
    let c1_12 = 0.5 * d2g11;
    let c2_12 = 0.5 * d1g22;
    let c1_22 = d2g12 - 0.5 * d1g22;
    let c2_22 = 0.5 * d2g22;
    // raised gradient wˡ = gˡᵏuₖ
    let inv = 1.0 / m.det_g;
    let w1 = (m.g.yy * d.u1 - m.g.xy * d.u2) * inv;
    let w2 = (-m.g.xy * d.u1 + m.g.xx * d.u2) * inv;
    let hess11 = d.u11 - c1_11 * w1 - c2_11 * w2;
    let hess12 = d.u12 - c1_12 * w1 - c2_12 * w2;
    let hess22 = d.u22 - c1_22 * w1 - c2_22 * w2;
    let a = thp * th * th;
    let inv_s = 1.0 / m.s;
    Ok(Sym2::new(
        (a - th * hess11) * inv_s,
        -th * hess12 * inv_s,
        (a * sigma.s22 - th * hess22) * inv_s,
    ))
}

/// Eigenvalues `κ₁ ≤ κ₂` of the pencil `det(h − κ g) = 0`.
pub fn principal_curvatures(g: &Sym2, h: &Sym2, node: usize) -> Result<(f64, f64), GeometryError> {
    let det_g = g.det();
    if !(det_g > 0.0 && g.xx > 0.0) {
        return Err(GeometryError::SingularMetric { node, det: det_g });
    }
    let inv = 1.0 / det_g;
    // Weingarten map W = g⁻¹h
    let w11 = (g.yy * h.xx - g.xy * h.xy) * inv;
    let w12 = (g.yy * h.xy - g.xy * h.yy) * inv;
    let w21 = (g.xx * h.xy - g.xy * h.xx) * inv;
    let w22 = (g.xx * h.yy - g.xy * h.xy) * inv;
    if ![w11, w12, w21, w22].iter().all(|x| x.is_finite()) {
        return Err(GeometryError::NonFinite { node });
    }
    let tr = w11 + w22;
    let diff = w11 - w22;
    let mut disc = diff * diff + 4.0 * w12 * w21;
    if disc < 0.0 {
        let scale = w11.abs() + w22.abs() + w12.abs() + w21.abs();
        if -disc <= DISCRIMINANT_CLAMP * scale * scale {
            disc = 0.0;
        } else {
            return Err(GeometryError::ComplexCurvatures { node, disc });
        }
    }
    let root = disc.sqrt();
    let det_w = h.det() * inv;
    // avoid cancellation in the smaller-magnitude root
    let (k1, k2) = if tr >= 0.0 {
        let big = 0.5 * (tr + root);
        let small = if big != 0.0 { det_w / big } else { 0.5 * (tr - root) };
        (small, big)
    } else {
        let big = 0.5 * (tr - root);
        (big, det_w / big)
    };
    Ok(if k1 <= k2 { (k1, k2) } else { (k2, k1) })
}

/// Full per-node geometry.
pub fn node_geometry(
    w: &WarpJet,
    d: &Jet2,
    sigma: &BaseMetric,
    node: usize,
) -> Result<NodeGeometry, GeometryError> {
    let metric = induced_metric(w, d, sigma);
    let h = second_fundamental_form(w, d, sigma, &metric, node)?;
    let (k1, k2) = principal_curvatures(&metric.g, &h, node)?;
    Ok(NodeGeometry { metric, h, k1, k2 })
}

/// Per-node geometry of a graph, stored by quantity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GeometryFields {
    pub g: Vec<Sym2>,
    pub det_g: Vec<f64>,
    pub v: Vec<f64>,
    pub s: Vec<f64>,
    pub h: Vec<Sym2>,
    pub k1: Vec<f64>,
    pub k2: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    /// `√(det g / det σ)`: area density relative to `dμ_σ`.
    pub density: Vec<f64>,
    /// `ϑ(u)`, `ϑ′(u)`, `ϑ″(u)` per node.
    pub theta: Vec<f64>,
    pub theta_d1: Vec<f64>,
    pub theta_d2: Vec<f64>,
    /// `|∇u|²_g = gⁱʲuᵢuⱼ`
    pub grad_sq: Vec<f64>,
}

impl GeometryFields {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    fn with_capacity(n: usize) -> Self {
        Self {
            g: Vec::with_capacity(n),
            det_g: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
            s: Vec::with_capacity(n),
            h: Vec::with_capacity(n),
            k1: Vec::with_capacity(n),
            k2: Vec::with_capacity(n),
            h1: Vec::with_capacity(n),
            h2: Vec::with_capacity(n),
            density: Vec::with_capacity(n),
            theta: Vec::with_capacity(n),
            theta_d1: Vec::with_capacity(n),
            theta_d2: Vec::with_capacity(n),
            grad_sq: Vec::with_capacity(n),
        }
    }

    fn clear(&mut self) {
        self.g.clear();
        self.det_g.clear();
        self.v.clear();
        self.s.clear();
        self.h.clear();
        self.k1.clear();
        self.k2.clear();
        self.h1.clear();
        self.h2.clear();
        self.density.clear();
        self.theta.clear();
        self.theta_d1.clear();
        self.theta_d2.clear();
        self.grad_sq.clear();
    }

    pub fn kappa_min(&self) -> f64 {
        self.k1.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn kappa_max(&self) -> f64 {
        self.k2.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max (κ₂ − κ₁)/(κ₁ + κ₂)` over nodes; zero exactly at umbilic states.
    pub fn umbilicity(&self) -> f64 {
        self.k1
            .iter()
            .zip(&self.k2)
            .map(|(a, b)| (b - a) / (a + b))
            .fold(0.0, f64::max)
    }
}

/// Computes every geometric field of the graph `u`.
pub fn compute(grid: &BaseGrid, space: &WarpedSpace, u: &ScalarField) -> Result<GeometryFields, GeometryError> {
    let p = grid.partials(u);
    compute_with_partials(grid, space, u.values(), &p)
}

pub(crate) fn compute_with_partials(
    grid: &BaseGrid,
    space: &WarpedSpace,
    u: &[f64],
    p: &Partials,
) -> Result<GeometryFields, GeometryError> {
    let mut out = GeometryFields::with_capacity(grid.len());
    compute_into(grid, space, u, p, &mut out)?;
    Ok(out)
}

/// Fills `out`, reusing its buffers.
pub(crate) fn compute_into(
    grid: &BaseGrid,
    space: &WarpedSpace,
    u: &[f64],
    p: &Partials,
    out: &mut GeometryFields,
) -> Result<(), GeometryError> {
    check_range(space, u)?;
    out.clear();
    let warp = space.warp();
    for (i, (&ui, sigma)) in u.iter().zip(grid.metric()).enumerate() {
        let w = warp.jet(ui);
        let d = Jet2::at(p, i);
        let geo = node_geometry(&w, &d, sigma, i)?;
        let m = &geo.metric;
        let inv = 1.0 / m.det_g;
        let grad_sq = (m.g.yy * d.u1 * d.u1 - 2.0 * m.g.xy * d.u1 * d.u2 + m.g.xx * d.u2 * d.u2) * inv;
        out.g.push(m.g);
        out.det_g.push(m.det_g);
        out.v.push(m.v);
        out.s.push(m.s);
        out.h.push(geo.h);
        out.k1.push(geo.k1);
        out.k2.push(geo.k2);
        out.h1.push(geo.h1());
        out.h2.push(geo.h2());
        // √(det g/det σ) = ϑ² v for n = 2
        out.density.push(w.value * w.value * m.v);
        out.theta.push(w.value);
        out.theta_d1.push(w.d1);
        out.theta_d2.push(w.d2);
        out.grad_sq.push(grad_sq);
    }
    Ok(())
}

pub(crate) fn check_range(space: &WarpedSpace, u: &[f64]) -> Result<(), GeometryError> {
    let (a, b) = space.domain();
    let mut worst: Option<(usize, f64, f64)> = None;
    for (node, &value) in u.iter().enumerate() {
        let excess = if !value.is_finite() {
            f64::INFINITY
        } else {
            (a - value).max(value - b)
        };
        if excess >= 0.0 && worst.is_none_or(|(_, _, e)| excess > e) {
            worst = Some((node, value, excess));
        }
    }
    match worst {
        Some((node, value, _)) => Err(GeometryError::RadialRange { node, value, a, b }),
        None => Ok(()),
    }
}

/// Normal speeds of the three supported flows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeedLaw {
    /// `ϑ′/F − s` with `F = H₂/H₁`
    LocallyConstrained,
    /// `1/H = 1/(n H₁)`
    InverseMean,
    /// `ϑ′ − s H₁`
    GuanLi,
}

impl SpeedLaw {
    pub fn curvature_function(&self) -> CurvatureFunction {
        match self {
            SpeedLaw::LocallyConstrained => CurvatureFunction::Quotient,
            SpeedLaw::InverseMean => CurvatureFunction::Mean,
            SpeedLaw::GuanLi => CurvatureFunction::None,
        }
    }
}

/// `F` and the normal speed `ψ` per node.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpeedField {
    pub f_value: Vec<f64>,
    pub speed: Vec<f64>,
}

pub fn speed_field(geom: &GeometryFields, law: SpeedLaw) -> Result<SpeedField, GeometryError> {
    let mut out = SpeedField::default();
    speed_field_into(geom, law, &mut out)?;
    Ok(out)
}

pub(crate) fn speed_field_into(geom: &GeometryFields, law: SpeedLaw, out: &mut SpeedField) -> Result<(), GeometryError> {
    let cf = law.curvature_function();
    out.f_value.clear();
    out.speed.clear();
    for i in 0..geom.len() {
        let (k1, k2) = (geom.k1[i], geom.k2[i]);
        let f = cf.eval(k1, k2, i)?;
        let psi = match law {
            SpeedLaw::LocallyConstrained => geom.theta_d1[i] / f - geom.s[i],
            // H = 2H₁ for surfaces
            SpeedLaw::InverseMean => 1.0 / (2.0 * f),
            SpeedLaw::GuanLi => geom.theta_d1[i] - geom.s[i] * geom.h1[i],
        };
        if !psi.is_finite() {
            return Err(GeometryError::NonFinite { node: i });
        }
        out.f_value.push(f);
        out.speed.push(psi);
    }
    Ok(())
}
