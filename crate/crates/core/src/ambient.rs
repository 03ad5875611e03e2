//! The ambient warped product `N = (a, b) × S₀` with metric
//! `ḡ = dr² + ϑ(r)² σ`.
//!
//! Everything here is a pure function of the warp function and the base
//! manifold. The base is restricted to constant-curvature metrics (flat torus,
//! round sphere), so the base Ricci tensor is `c_base · σ` and all curvature
//! conditions reduce to scalar inequalities in `r`.

use std::f64::consts::PI;

use thiserror::Error;

use crate::quadrature;

/// Relative tolerance for radial quadrature.
pub const RADIAL_QUAD_TOL: f64 = 1e-13;
/// Default number of radial samples used by [`WarpedSpace::check_assumptions`].
pub const DEFAULT_ASSUMPTION_SAMPLES: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AmbientError {
    #[error("radius {r} lies outside the open radial domain ({a}, {b})")]
    OutOfDomain { r: f64, a: f64, b: f64 },
    #[error("{quantity} {value} lies outside the attainable range [{lo}, {hi}]")]
    OutOfRange {
        quantity: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("invalid warp function: {0}")]
    InvalidWarp(String),
    #[error("base dimension must be at least 2, got {0}")]
    Dimension(usize),
}

/// Closed-form families of warp functions.
#[derive(Debug, Clone, PartialEq)]
pub enum WarpFamily {
    Sinh,
    Cosh,
    /// `α sinh r + β cosh r`
    Combination { alpha: f64, beta: f64 },
    /// `r + shift`
    Affine { shift: f64 },
    /// `Σ cₖ rᵏ`, coefficients in ascending order of power.
    Polynomial { coeffs: Vec<f64> },
}

impl WarpFamily {
    /// `(α, β)` when the family is of the form `α sinh + β cosh`.
    pub fn hyperbolic_coefficients(&self) -> Option<(f64, f64)> {
        match *self {
            WarpFamily::Sinh => Some((1.0, 0.0)),
            WarpFamily::Cosh => Some((0.0, 1.0)),
            WarpFamily::Combination { alpha, beta } => Some((alpha, beta)),
            _ => None,
        }
    }

    fn polynomial_coefficients(&self) -> Option<Vec<f64>> {
        match self {
            WarpFamily::Affine { shift } => Some(vec![*shift, 1.0]),
            WarpFamily::Polynomial { coeffs } => Some(coeffs.clone()),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WarpFamily::Sinh => "sinh",
            WarpFamily::Cosh => "cosh",
            WarpFamily::Combination { .. } => "combination",
            WarpFamily::Affine { .. } => "affine",
            WarpFamily::Polynomial { .. } => "polynomial",
        }
    }
}

/// `ϑ` and its first three derivatives at one radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpJet {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

/// A warp function restricted to the open radial interval `(a, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpFunction {
    family: WarpFamily,
    a: f64,
    b: f64,
}

/// `(sinh r, cosh r)` from one exponential away from the origin.
#[inline]
fn sinh_cosh(r: f64) -> (f64, f64) {
    if r.abs() < 1.0 {
        (r.sinh(), r.cosh())
    } else {
        let e = r.exp();
        let inv = 1.0 / e;
        (0.5 * (e - inv), 0.5 * (e + inv))
    }
}

impl WarpFunction {
    pub fn new(family: WarpFamily, a: f64, b: f64) -> Result<Self, AmbientError> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(AmbientError::InvalidWarp(format!(
                "radial domain ({a}, {b}) must be a finite interval with a < b"
            )));
        }
        match &family {
            WarpFamily::Combination { alpha, beta } if !(alpha.is_finite() && beta.is_finite()) => {
                return Err(AmbientError::InvalidWarp("non-finite coefficient".into()));
            }
            WarpFamily::Affine { shift } if !shift.is_finite() => {
                return Err(AmbientError::InvalidWarp("non-finite shift".into()));
            }
            WarpFamily::Polynomial { coeffs }
                if (coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite())) => {
                    return Err(AmbientError::InvalidWarp(
                        "polynomial needs at least one finite coefficient".into(),
                    ));
                }
            _ => {}
        }
        let warp = Self { family, a, b };
        // ϑ > 0 on the open interval, checked on a fine interior grid
        let samples = 4 * DEFAULT_ASSUMPTION_SAMPLES;
        for k in 0..samples {
            let r = a + (k as f64 + 0.5) * (b - a) / samples as f64;
            let v = warp.jet(r).value;
            if !(v > 0.0 && v.is_finite()) {
                return Err(AmbientError::InvalidWarp(format!(
                    "ϑ({r}) = {v} is not positive on ({a}, {b})"
                )));
            }
        }
        Ok(warp)
    }

    pub fn family(&self) -> &WarpFamily {
        &self.family
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn contains(&self, r: f64) -> bool {
        r > self.a && r < self.b
    }

    fn check(&self, r: f64) -> Result<(), AmbientError> {
        if self.contains(r) {
            Ok(())
        } else {
            Err(AmbientError::OutOfDomain {
                r,
                a: self.a,
                b: self.b,
            })
        }
    }

    /// `(ϑ, ϑ′, ϑ″, ϑ‴)` at `r`, which must lie strictly inside `(a, b)`.
    pub fn eval(&self, r: f64) -> Result<WarpJet, AmbientError> {
        self.check(r)?;
        Ok(self.jet(r))
    }

    /// Closed-form evaluation without the domain check. Also valid at the
    /// closed endpoints.
    pub fn jet(&self, r: f64) -> WarpJet {
        match &self.family {
            WarpFamily::Sinh => {
                let (s, c) = sinh_cosh(r);
                WarpJet { value: s, d1: c, d2: s, d3: c }
            }
            WarpFamily::Cosh => {
                let (s, c) = sinh_cosh(r);
                WarpJet { value: c, d1: s, d2: c, d3: s }
            }
            WarpFamily::Combination { alpha, beta } => {
                let (s, c) = sinh_cosh(r);
                let v = alpha * s + beta * c;
                let d = alpha * c + beta * s;
                WarpJet { value: v, d1: d, d2: v, d3: d }
            }
            WarpFamily::Affine { shift } => WarpJet {
                value: r + shift,
                d1: 1.0,
                d2: 0.0,
                d3: 0.0,
            },
            WarpFamily::Polynomial { coeffs } => poly_jet(coeffs, r),
        }
    }

    /// Primitive `Θ(r) = ∫ₐʳ ϑ`, normalised by `Θ(a) = 0`.
    pub fn theta_primitive(&self, r: f64) -> Result<f64, AmbientError> {
        self.check(r)?;
        Ok(self.primitive(r))
    }

    pub(crate) fn primitive(&self, r: f64) -> f64 {
        let a = self.a;
        match &self.family {
            WarpFamily::Sinh => cosh_diff(r, a),
            WarpFamily::Cosh => sinh_diff(r, a),
            WarpFamily::Combination { alpha, beta } => {
                alpha * cosh_diff(r, a) + beta * sinh_diff(r, a)
            }
            WarpFamily::Affine { shift } => 0.5 * (r - a) * (r + a + 2.0 * shift),
            WarpFamily::Polynomial { coeffs } => {
                let anti = antiderivative(coeffs);
                poly_eval(&anti, r) - poly_eval(&anti, a)
            }
        }
    }
}

/// `cosh r − cosh a` without cancellation for nearby arguments.
fn cosh_diff(r: f64, a: f64) -> f64 {
    2.0 * (0.5 * (r + a)).sinh() * (0.5 * (r - a)).sinh()
}

/// `sinh r − sinh a` without cancellation for nearby arguments.
fn sinh_diff(r: f64, a: f64) -> f64 {
    2.0 * (0.5 * (r + a)).cosh() * (0.5 * (r - a)).sinh()
}

fn poly_jet(coeffs: &[f64], r: f64) -> WarpJet {
    let (mut p, mut d1, mut d2, mut d3) = (0.0, 0.0, 0.0, 0.0);
    for &c in coeffs.iter().rev() {
        d3 = d3 * r + 3.0 * d2;
        d2 = d2 * r + 2.0 * d1;
        d1 = d1 * r + p;
        p = p * r + c;
    }
    WarpJet { value: p, d1, d2, d3 }
}

fn poly_eval(coeffs: &[f64], r: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * r + c)
}

fn poly_mul(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len() + q.len() - 1];
    for (i, &x) in p.iter().enumerate() {
        for (j, &y) in q.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_pow(p: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![1.0];
    for _ in 0..n {
        out = poly_mul(&out, p);
    }
    out
}

fn poly_derivative(p: &[f64]) -> Vec<f64> {
    if p.len() <= 1 {
        return vec![0.0];
    }
    p.iter()
        .enumerate()
        .skip(1)
        .map(|(k, &c)| k as f64 * c)
        .collect()
}

fn antiderivative(p: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.len() + 1);
    out.push(0.0);
    out.extend(p.iter().enumerate().map(|(k, &c)| c / (k as f64 + 1.0)));
    out
}

/// The compact base `(S₀, σ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaseManifold {
    /// Flat torus `ℝⁿ / (2πℤ)ⁿ`.
    FlatTorus,
    /// Round unit sphere `Sⁿ`.
    RoundSphere,
}

impl BaseManifold {
    pub fn name(&self) -> &'static str {
        match self {
            BaseManifold::FlatTorus => "torus",
            BaseManifold::RoundSphere => "sphere",
        }
    }
}

/// Components of an ambient tangent vector: the `∂_r` coefficient and the
/// base part expressed in a `σ`-orthonormal frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbientVector {
    pub radial: f64,
    pub base: Vec<f64>,
}

/// Block coefficients of the ambient Ricci tensor at one radius:
/// `Rc(X, Y) = radial · XʳYʳ + base · σ(X̂, Ŷ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RicciBlocks {
    pub radial: f64,
    pub base: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureBranch {
    /// `ϑ″ ≥ 0`
    NonNegative,
    /// `ϑ″ ≤ 0` and `∂_r(ϑ″/ϑ) ≤ 0`
    NonPositiveDecreasing,
    Neither,
}

/// Sampled slack of a Ricci lower-bound condition `ĥRc ≥ q σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionMargin {
    /// Minimal sampled value of `c_base − q`.
    pub margin: f64,
    pub holds: bool,
    pub strict: bool,
}

impl ConditionMargin {
    fn from_margin(margin: f64, tol: f64) -> Self {
        Self {
            margin,
            holds: margin >= -tol,
            strict: margin > tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub samples: usize,
    pub theta_positive_derivative: bool,
    pub nonnegative_second_derivative: bool,
    pub nonpositive_decreasing: bool,
    pub branch: CurvatureBranch,
    /// `ĥRc ≥ (n−1)(ϑ′² − ϑ″ϑ) σ` for all sampled `r`.
    pub mink_condition: ConditionMargin,
    /// `ĥRc ≥ (n−1)(α² − β²) σ`, only for `α sinh + β cosh` warps.
    pub genmink_condition: Option<ConditionMargin>,
    /// `α ≥ β ≥ 0` with one strict inequality.
    pub genmink_coefficients: bool,
    pub strict: bool,
}

impl AssumptionReport {
    /// Whether the space satisfies the structural assumptions needed for
    /// convergence of the locally constrained flow.
    pub fn supports_flow(&self) -> bool {
        self.theta_positive_derivative && self.branch != CurvatureBranch::Neither
    }
}

/// Reference quantities of the radial slice `S_r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceData {
    pub r: f64,
    pub area: f64,
    pub volume: f64,
    pub int_h1: f64,
    /// `(1/n) ∫_{Ŝ_r} Rc(∂_r, ∂_r) = −|S₀| ∫ₐʳ ϑ″ϑⁿ⁻¹`
    pub bulk_ricci: f64,
    pub w2: f64,
    pub h1: f64,
}

impl SliceData {
    /// `∫ H₁ − |Ŝ_r|`
    pub fn genmink_w2(&self) -> f64 {
        self.int_h1 - self.volume
    }

    pub fn functional(&self, which: SliceFunctional) -> f64 {
        match which {
            SliceFunctional::W2 => self.w2,
            SliceFunctional::GenMink => self.genmink_w2(),
        }
    }
}

/// Which slice functional `φ` reproduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SliceFunctional {
    /// `W₂ = ∫ H₁ + (1/n) ∫ Rc(∂_r, ∂_r)`
    #[default]
    W2,
    /// `∫ H₁ − |M̂|`
    GenMink,
}

#[derive(Debug, Clone, PartialEq)]
enum RadialIntegrals {
    Polynomial { volume: Vec<f64>, bulk: Vec<f64> },
    /// `α sinh + β cosh` with `n = 2`.
    Hyperbolic { alpha: f64, beta: f64, at_a: f64 },
    Quadrature,
}

/// The warped product `(a, b) × S₀` of base dimension `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedSpace {
    warp: WarpFunction,
    base: BaseManifold,
    n: usize,
    integrals: RadialIntegrals,
}

impl WarpedSpace {
    pub fn new(warp: WarpFunction, base: BaseManifold, n: usize) -> Result<Self, AmbientError> {
        if n < 2 {
            return Err(AmbientError::Dimension(n));
        }
        let integrals = if let Some(p) = warp.family.polynomial_coefficients() {
            let pn = poly_pow(&p, n);
            let d2 = poly_derivative(&poly_derivative(&p));
            let bulk = poly_mul(&d2, &poly_pow(&p, n - 1));
            RadialIntegrals::Polynomial {
                volume: antiderivative(&pn),
                bulk: antiderivative(&bulk),
            }
        } else {
            match warp.family.hyperbolic_coefficients() {
                Some((alpha, beta)) if n == 2 => RadialIntegrals::Hyperbolic {
                    alpha,
                    beta,
                    at_a: hyperbolic_square_antiderivative(alpha, beta, warp.a),
                },
                _ => RadialIntegrals::Quadrature,
            }
        };
        Ok(Self {
            warp,
            base,
            n,
            integrals,
        })
    }

    /// The two-dimensional space used by the flows.
    pub fn surface(warp: WarpFunction, base: BaseManifold) -> Self {
        Self::new(warp, base, 2).expect("n = 2 is always admissible")
    }

    pub fn warp(&self) -> &WarpFunction {
        &self.warp
    }

    pub fn base(&self) -> BaseManifold {
        self.base
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn domain(&self) -> (f64, f64) {
        self.warp.domain()
    }

    /// `c_base` with `ĥRc = c_base σ`.
    pub fn base_ricci_constant(&self) -> f64 {
        match self.base {
            BaseManifold::FlatTorus => 0.0,
            BaseManifold::RoundSphere => (self.n - 1) as f64,
        }
    }

    /// `|S₀|_σ`
    pub fn base_area(&self) -> f64 {
        match self.base {
            BaseManifold::FlatTorus => (2.0 * PI).powi(self.n as i32),
            BaseManifold::RoundSphere => sphere_area(self.n),
        }
    }

    pub fn eval(&self, r: f64) -> Result<WarpJet, AmbientError> {
        self.warp.eval(r)
    }

    pub fn check_assumptions(&self, samples: usize) -> AssumptionReport {
        let samples = samples.max(2);
        let (a, b) = self.domain();
        let nm1 = (self.n - 1) as f64;
        let c_base = self.base_ricci_constant();

        let mut positive_d1 = true;
        let mut min_d2 = f64::INFINITY;
        let mut max_d2 = f64::NEG_INFINITY;
        let mut max_ratio_slope = f64::NEG_INFINITY;
        let mut max_quad = f64::NEG_INFINITY;
        let mut scale: f64 = 0.0;
        let mut d2_scale: f64 = 0.0;
        let mut slope_scale: f64 = 0.0;
        for k in 0..samples {
            let r = a + (k as f64 + 0.5) * (b - a) / samples as f64;
            let j = self.warp.jet(r);
            positive_d1 &= j.d1 > 0.0;
            min_d2 = min_d2.min(j.d2);
            max_d2 = max_d2.max(j.d2);
            // ∂_r(ϑ″/ϑ) = (ϑ‴ϑ − ϑ″ϑ′)/ϑ²
            let slope = (j.d3 * j.value - j.d2 * j.d1) / (j.value * j.value);
            max_ratio_slope = max_ratio_slope.max(slope);
            max_quad = max_quad.max(j.d1 * j.d1 - j.d2 * j.value);
            scale = scale.max(j.d1 * j.d1 + (j.d2 * j.value).abs());
            d2_scale = d2_scale.max(j.d2.abs()).max(j.value);
            slope_scale =
                slope_scale.max(((j.d3 * j.value).abs() + (j.d2 * j.d1).abs()) / (j.value * j.value));
        }
        let tol = 64.0 * f64::EPSILON;
        let nonneg = min_d2 >= -tol * d2_scale;
        let nonpos = max_d2 <= tol * d2_scale && max_ratio_slope <= tol * slope_scale;
        let branch = if nonneg {
            CurvatureBranch::NonNegative
        } else if nonpos {
            CurvatureBranch::NonPositiveDecreasing
        } else {
            CurvatureBranch::Neither
        };

        let cond_tol = tol * (c_base.abs() + nm1 * scale).max(1.0);
        let mink = ConditionMargin::from_margin(c_base - nm1 * max_quad, cond_tol);
        let coeffs = self.warp.family.hyperbolic_coefficients();
        let genmink = coeffs.map(|(alpha, beta)| {
            let q = nm1 * (alpha * alpha - beta * beta);
            ConditionMargin::from_margin(c_base - q, tol * (c_base.abs() + q.abs()).max(1.0))
        });
        let genmink_coefficients = coeffs
            .map(|(alpha, beta)| alpha >= beta && beta >= 0.0 && (alpha > beta || beta > 0.0))
            .unwrap_or(false);

        AssumptionReport {
            samples,
            theta_positive_derivative: positive_d1,
            nonnegative_second_derivative: nonneg,
            nonpositive_decreasing: nonpos,
            branch,
            mink_condition: mink,
            genmink_condition: genmink,
            genmink_coefficients,
            strict: mink.strict,
        }
    }

    pub fn ricci_blocks(&self, r: f64) -> Result<RicciBlocks, AmbientError> {
        Ok(self.ricci_blocks_at(&self.warp.eval(r)?))
    }

    pub(crate) fn ricci_blocks_at(&self, j: &WarpJet) -> RicciBlocks {
        let n = self.n as f64;
        RicciBlocks {
            radial: -n * j.d2 / j.value,
            base: self.base_ricci_constant() - j.value * j.d2 - (n - 1.0) * j.d1 * j.d1,
        }
    }

    /// `Rc(X, Y)` at radius `r`; base components are taken in a
    /// `σ`-orthonormal frame.
    pub fn ricci(&self, r: f64, x: &AmbientVector, y: &AmbientVector) -> Result<f64, AmbientError> {
        let blocks = self.ricci_blocks(r)?;
        Ok(blocks.radial * x.radial * y.radial + blocks.base * dot(&x.base, &y.base))
    }

    /// `ḡ(X, Y)` at radius `r`, same conventions as [`Self::ricci`].
    pub fn metric(&self, r: f64, x: &AmbientVector, y: &AmbientVector) -> Result<f64, AmbientError> {
        let th = self.warp.eval(r)?.value;
        Ok(x.radial * y.radial + th * th * dot(&x.base, &y.base))
    }

    pub fn theta_primitive(&self, r: f64) -> Result<f64, AmbientError> {
        self.warp.theta_primitive(r)
    }

    /// `∫ₐʳ ϑⁿ dρ`
    pub fn radial_volume(&self, r: f64) -> f64 {
        let a = self.warp.a;
        match &self.integrals {
            RadialIntegrals::Polynomial { volume, .. } => poly_eval(volume, r) - poly_eval(volume, a),
            RadialIntegrals::Hyperbolic { alpha, beta, at_a } => {
                hyperbolic_square_antiderivative(*alpha, *beta, r) - at_a
            }
            RadialIntegrals::Quadrature => self.radial_volume_quadrature(r),
        }
    }

    /// `∫ₐʳ ϑ″ϑⁿ⁻¹ dρ`
    pub fn radial_bulk(&self, r: f64) -> f64 {
        let a = self.warp.a;
        match &self.integrals {
            RadialIntegrals::Polynomial { bulk, .. } => poly_eval(bulk, r) - poly_eval(bulk, a),
            // ϑ″ = ϑ
            RadialIntegrals::Hyperbolic { .. } => self.radial_volume(r),
            RadialIntegrals::Quadrature => self.radial_bulk_quadrature(r),
        }
    }

    /// `(radial_volume(r), radial_bulk(r))`.
    pub(crate) fn radial_integrals(&self, r: f64) -> (f64, f64) {
        match &self.integrals {
            RadialIntegrals::Hyperbolic { .. } => {
                let v = self.radial_volume(r);
                (v, v)
            }
            _ => (self.radial_volume(r), self.radial_bulk(r)),
        }
    }

    /// `∫ₐʳ ϑⁿ` by adaptive Gauss–Legendre, bypassing closed forms.
    pub fn radial_volume_quadrature(&self, r: f64) -> f64 {
        let n = self.n as i32;
        quadrature::integrate(|x| self.warp.jet(x).value.powi(n), self.warp.a, r, RADIAL_QUAD_TOL)
    }

    /// `∫ₐʳ ϑ″ϑⁿ⁻¹` by adaptive Gauss–Legendre, bypassing closed forms.
    pub fn radial_bulk_quadrature(&self, r: f64) -> f64 {
        let n = self.n as i32;
        quadrature::integrate(
            |x| {
                let j = self.warp.jet(x);
                j.d2 * j.value.powi(n - 1)
            },
            self.warp.a,
            r,
            RADIAL_QUAD_TOL,
        )
    }

    pub fn slice_functionals(&self, r: f64) -> Result<SliceData, AmbientError> {
        self.warp.check(r)?;
        Ok(self.slice_at(r))
    }

    fn slice_at(&self, r: f64) -> SliceData {
        let j = self.warp.jet(r);
        let s0 = self.base_area();
        let area = j.value.powi(self.n as i32) * s0;
        let h1 = j.d1 / j.value;
        let int_h1 = h1 * area;
        let volume = s0 * self.radial_volume(r);
        let bulk_ricci = -s0 * self.radial_bulk(r);
        SliceData {
            r,
            area,
            volume,
            int_h1,
            bulk_ricci,
            w2: int_h1 + bulk_ricci,
            h1,
        }
    }

    /// Radius of the slice with the given area.
    pub fn slice_radius_for_area(&self, area: f64) -> Result<f64, AmbientError> {
        let s0 = self.base_area();
        let n = self.n as i32;
        self.invert("area", area, |r| self.warp.jet(r).value.powi(n) * s0)
    }

    /// Radius of the slice enclosing the given volume.
    pub fn slice_radius_for_volume(&self, volume: f64) -> Result<f64, AmbientError> {
        let s0 = self.base_area();
        self.invert("volume", volume, |r| s0 * self.radial_volume(r))
    }

    /// `φ(A)`: the slice functional of the slice with area `A`.
    pub fn phi_of_area(&self, area: f64, which: SliceFunctional) -> Result<f64, AmbientError> {
        let r = self.slice_radius_for_area(area)?;
        Ok(self.slice_at(r).functional(which))
    }

    /// `ψ(V)`: `W₂` of the slice enclosing volume `V`.
    pub fn psi_of_volume(&self, volume: f64) -> Result<f64, AmbientError> {
        let r = self.slice_radius_for_volume(volume)?;
        Ok(self.slice_at(r).w2)
    }

    /// Bisection on a strictly increasing map `[a, b] → ℝ` down to adjacent
    /// floating-point radii.
    fn invert<F: Fn(f64) -> f64>(&self, quantity: &'static str, target: f64, f: F) -> Result<f64, AmbientError> {
        let (mut lo, mut hi) = self.domain();
        let (flo, fhi) = (f(lo), f(hi));
        if !(target >= flo && target <= fhi) {
            return Err(AmbientError::OutOfRange {
                quantity,
                value: target,
                lo: flo,
                hi: fhi,
            });
        }
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if f(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        // pick the closer endpoint of the final bracket
        Ok(if (f(hi) - target).abs() < (target - f(lo)).abs() { hi } else { lo })
    }
}

/// `∫ₐʳ (α sinh + β cosh)²`
fn hyperbolic_square_antiderivative(alpha: f64, beta: f64, x: f64) -> f64 {
    let (sh, ch) = sinh_cosh(x);
    (alpha * alpha + beta * beta) * sh * ch / 2.0 + (beta * beta - alpha * alpha) * x / 2.0 + alpha * beta * sh * sh
}

/// `|Sⁿ|` from `|S⁰| = 2`, `|S¹| = 2π`, `|Sⁿ| = 2π/(n−1) |Sⁿ⁻²|`.
fn sphere_area(n: usize) -> f64 {
    let mut area = if n.is_multiple_of(2) { 2.0 } else { 2.0 * PI };
    let mut k = if n.is_multiple_of(2) { 2 } else { 3 };
    while k <= n {
        area *= 2.0 * PI / (k - 1) as f64;
        k += 2;
    }
    area
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    fn space(family: WarpFamily, a: f64, b: f64, base: BaseManifold) -> WarpedSpace {
        WarpedSpace::surface(WarpFunction::new(family, a, b).unwrap(), base)
    }

    #[test]
    fn warp_eval_matches_closed_forms() {
        let w = WarpFunction::new(WarpFamily::Sinh, 0.0, 5.0).unwrap();
        let j = w.eval(1.0).unwrap();
        assert!(close(j.value, 1.175201, 1e-6));
        assert!(close(j.d1, 1.543081, 1e-6));
        assert!(close(j.d2, 1.175201, 1e-6));
        assert!(close(j.d3, 1.543081, 1e-6));

        let c = WarpFunction::new(WarpFamily::Cosh, -1.0, 5.0).unwrap();
        assert_eq!(c.eval(0.0).unwrap(), WarpJet { value: 1.0, d1: 0.0, d2: 1.0, d3: 0.0 });

        let comb = WarpFunction::new(WarpFamily::Combination { alpha: 1.0, beta: 0.0 }, 0.0, 5.0).unwrap();
        assert_eq!(comb.eval(1.0).unwrap(), j);
    }

    #[test]
    fn warp_derivatives_agree_with_central_differences() {
        let families = [
            WarpFamily::Sinh,
            WarpFamily::Cosh,
            WarpFamily::Combination { alpha: 1.0, beta: 0.5 },
            WarpFamily::Affine { shift: 0.3 },
            WarpFamily::Polynomial { coeffs: vec![1.0, 0.5, 0.25, 0.1] },
        ];
        let h = 1e-4;
        for fam in families {
            let w = WarpFunction::new(fam, 0.5, 3.0).unwrap();
            for &r in &[0.8, 1.3, 2.4] {
                let j = w.jet(r);
                let (m, p) = (w.jet(r - h), w.jet(r + h));
                assert!((j.d1 - (p.value - m.value) / (2.0 * h)).abs() < 1e-6);
                assert!((j.d2 - (p.d1 - m.d1) / (2.0 * h)).abs() < 1e-6);
                assert!((j.d3 - (p.d2 - m.d2) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn eval_outside_domain_names_radius() {
        let w = WarpFunction::new(WarpFamily::Sinh, 0.0, 2.0).unwrap();
        let err = w.eval(2.0).unwrap_err();
        assert_eq!(err, AmbientError::OutOfDomain { r: 2.0, a: 0.0, b: 2.0 });
        assert!(err.to_string().contains('2'));
        assert!(w.eval(0.0).is_err());
    }

    #[test]
    fn nonpositive_warp_is_rejected() {
        assert!(WarpFunction::new(WarpFamily::Sinh, -1.0, 2.0).is_err());
        assert!(WarpFunction::new(WarpFamily::Polynomial { coeffs: vec![] }, 0.0, 1.0).is_err());
        assert!(WarpFunction::new(WarpFamily::Cosh, 2.0, 1.0).is_err());
    }

    #[test]
    fn assumptions_for_hyperbolic_space_are_non_strict() {
        let sp = space(WarpFamily::Sinh, 0.1, 4.0, BaseManifold::RoundSphere);
        let rep = sp.check_assumptions(DEFAULT_ASSUMPTION_SAMPLES);
        assert!(rep.theta_positive_derivative);
        assert_eq!(rep.branch, CurvatureBranch::NonNegative);
        assert!(rep.mink_condition.margin.abs() < 1e-9);
        assert!(rep.mink_condition.holds);
        assert!(!rep.mink_condition.strict);
        assert!(!rep.strict);
        assert!(rep.supports_flow());
    }

    #[test]
    fn assumptions_for_cosh_torus_are_strict() {
        let sp = space(WarpFamily::Cosh, 0.1, 4.0, BaseManifold::FlatTorus);
        let rep = sp.check_assumptions(DEFAULT_ASSUMPTION_SAMPLES);
        assert_eq!(rep.branch, CurvatureBranch::NonNegative);
        assert!(close(rep.mink_condition.margin, 1.0, 1e-9));
        assert!(rep.mink_condition.strict);
    }

    #[test]
    fn linear_warp_satisfies_both_branches() {
        let sp = space(WarpFamily::Affine { shift: 0.0 }, 1.0, 5.0, BaseManifold::FlatTorus);
        let rep = sp.check_assumptions(64);
        assert!(rep.nonnegative_second_derivative);
        assert!(rep.nonpositive_decreasing);
        assert!(rep.genmink_condition.is_none());
    }

    #[test]
    fn concave_warp_without_decreasing_ratio_is_neither() {
        // ϑ = 1 + r − r²/8 on (0, 3): ϑ″ < 0, but ϑ″/ϑ = −1/(4ϑ) increases with ϑ
        let sp = space(
            WarpFamily::Polynomial { coeffs: vec![1.0, 1.0, -0.125] },
            0.0,
            3.0,
            BaseManifold::FlatTorus,
        );
        let rep = sp.check_assumptions(256);
        assert!(rep.theta_positive_derivative);
        assert!(!rep.nonnegative_second_derivative);
        assert_eq!(rep.branch, CurvatureBranch::Neither);
        assert!(!rep.supports_flow());
    }

    #[test]
    fn genmink_margin_for_shifted_combination() {
        let sp = space(
            WarpFamily::Combination { alpha: 1.0, beta: 0.5 },
            0.0,
            5.0,
            BaseManifold::RoundSphere,
        );
        let rep = sp.check_assumptions(128);
        let g = rep.genmink_condition.unwrap();
        assert!(close(g.margin, 0.25, 1e-12));
        assert!(g.strict);
        assert!(rep.genmink_coefficients);
    }

    #[test]
    fn ricci_blocks_on_hyperbolic_space() {
        let sp = space(WarpFamily::Sinh, 0.0, 5.0, BaseManifold::RoundSphere);
        let dr = AmbientVector { radial: 1.0, base: vec![0.0, 0.0] };
        assert!(close(sp.ricci(1.0, &dr, &dr).unwrap(), -2.0, 1e-14));
        let th = 1.0f64.sinh();
        let horiz = AmbientVector { radial: 0.0, base: vec![1.0 / th, 0.0] };
        assert!(close(sp.ricci(1.0, &horiz, &horiz).unwrap(), -2.0, 1e-14));
        assert_eq!(sp.ricci(1.0, &dr, &horiz).unwrap(), 0.0);
        assert!(sp.ricci(6.0, &dr, &dr).is_err());
    }

    #[test]
    fn theta_primitive_closed_forms() {
        let w = WarpFunction::new(WarpFamily::Sinh, 0.0, 5.0).unwrap();
        assert!(close(w.theta_primitive(1.0).unwrap(), 1.0f64.cosh() - 1.0, 1e-15));
        assert!(w.theta_primitive(1e-12).unwrap().abs() < 1e-20);
        let aff = WarpFunction::new(WarpFamily::Affine { shift: 0.0 }, 1.0, 5.0).unwrap();
        assert!(close(aff.theta_primitive(2.0).unwrap(), 1.5, 1e-15));
        let poly = WarpFunction::new(WarpFamily::Polynomial { coeffs: vec![0.0, 1.0] }, 1.0, 5.0).unwrap();
        assert!(close(poly.theta_primitive(2.0).unwrap(), 1.5, 1e-15));
    }

    #[test]
    fn hyperbolic_slice_values() {
        let sp = space(WarpFamily::Sinh, 0.0, 5.0, BaseManifold::RoundSphere);
        let s = sp.slice_functionals(1.0).unwrap();
        let sh = 1.0f64.sinh();
        assert!(close(s.area, 4.0 * PI * sh * sh, 1e-14));
        assert!(close(s.area, 17.3555, 1e-5));
        assert!(close(s.h1, 1.313035, 1e-6));
        assert!(close(s.volume, PI * (2.0f64.sinh() - 2.0), 1e-13));
        let w2 = 2.0 * PI * 2.0f64.sinh() - PI * (2.0f64.sinh() - 2.0);
        assert!(close(s.w2, w2, 1e-13));
        assert!(close(s.w2, 17.677303320067462, 1e-14));
    }

    #[test]
    fn cosh_torus_slice_area() {
        let sp = space(WarpFamily::Cosh, 0.0, 5.0, BaseManifold::FlatTorus);
        let s = sp.slice_functionals(1.0).unwrap();
        assert!((s.area - 94.00).abs() < 0.01);
    }

    #[test]
    fn volume_vanishes_at_lower_boundary() {
        for fam in [WarpFamily::Sinh, WarpFamily::Cosh, WarpFamily::Affine { shift: 1.0 }] {
            let sp = space(fam, 0.0, 3.0, BaseManifold::RoundSphere);
            assert!(sp.slice_functionals(1e-12).unwrap().volume.abs() < 1e-10);
        }
    }

    #[test]
    fn closed_form_integrals_match_quadrature() {
        let cases = [
            (WarpFamily::Sinh, 2),
            (WarpFamily::Combination { alpha: 1.0, beta: 0.5 }, 2),
            (WarpFamily::Affine { shift: 0.5 }, 2),
            (WarpFamily::Polynomial { coeffs: vec![1.0, 0.3, 0.2] }, 3),
        ];
        for (fam, n) in cases {
            let sp = WarpedSpace::new(WarpFunction::new(fam, 0.2, 3.0).unwrap(), BaseManifold::RoundSphere, n)
                .unwrap();
            for &r in &[0.5, 1.7, 2.9] {
                let (v, vq) = (sp.radial_volume(r), sp.radial_volume_quadrature(r));
                assert!(close(v, vq, 1e-12), "{v} vs {vq}");
                let (b, bq) = (sp.radial_bulk(r), sp.radial_bulk_quadrature(r));
                assert!((b - bq).abs() <= 1e-12 * vq.abs().max(1.0), "{b} vs {bq}");
            }
        }
    }

    #[test]
    fn hyperbolic_family_has_bulk_equal_to_minus_volume() {
        let sp = space(WarpFamily::Combination { alpha: 1.0, beta: 0.5 }, 0.0, 4.0, BaseManifold::RoundSphere);
        for &r in &[0.3, 1.0, 3.5] {
            let s = sp.slice_functionals(r).unwrap();
            assert!(close(s.bulk_ricci, -s.volume, 1e-10));
            assert!(close(s.w2, s.genmink_w2(), 1e-10));
            // dual route
            let q = -sp.base_area() * sp.radial_bulk_quadrature(r);
            assert!(close(q, -s.volume, 1e-10));
        }
    }

    #[test]
    fn sphere_areas() {
        assert!(close(sphere_area(2), 4.0 * PI, 1e-15));
        assert!(close(sphere_area(3), 2.0 * PI * PI, 1e-15));
        assert!(close(sphere_area(4), 8.0 * PI * PI / 3.0, 1e-15));
    }

    #[test]
    fn phi_and_psi_round_trip_at_r_one() {
        let sp = space(WarpFamily::Sinh, 0.0, 5.0, BaseManifold::RoundSphere);
        let sh = 1.0f64.sinh();
        let phi = sp.phi_of_area(4.0 * PI * sh * sh, SliceFunctional::W2).unwrap();
        assert!(close(phi, 17.677303320067462, 1e-12));
        let psi = sp.psi_of_volume(PI * (2.0f64.sinh() - 2.0)).unwrap();
        assert!(close(psi, phi, 1e-10));

        let cs = space(WarpFamily::Cosh, 0.0, 5.0, BaseManifold::FlatTorus);
        let area = cs.slice_functionals(1.0).unwrap().area;
        assert!((cs.slice_radius_for_area(area).unwrap() - 1.0).abs() < 1e-10);
        let vol = cs.slice_functionals(1.0).unwrap().volume;
        let w2 = cs.slice_functionals(1.0).unwrap().w2;
        assert!(close(cs.psi_of_volume(vol).unwrap(), w2, 1e-10));
    }

    #[test]
    fn psi_at_vanishing_volume() {
        let sp = space(WarpFamily::Cosh, 0.0, 5.0, BaseManifold::FlatTorus);
        let psi = sp.psi_of_volume(1e-300).unwrap();
        let w2a = sp.slice_functionals(1e-12).unwrap().w2;
        assert!(close(psi, w2a, 1e-10));
    }

    #[test]
    fn inversion_out_of_range() {
        let sp = space(WarpFamily::Sinh, 0.0, 2.0, BaseManifold::RoundSphere);
        let err = sp.phi_of_area(1e6, SliceFunctional::W2).unwrap_err();
        match err {
            AmbientError::OutOfRange { quantity, lo, hi, .. } => {
                assert_eq!(quantity, "area");
                assert_eq!(lo, 0.0);
                assert!(close(hi, 4.0 * PI * 2.0f64.sinh().powi(2), 1e-14));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(sp.psi_of_volume(-1.0).is_err());
    }
}
