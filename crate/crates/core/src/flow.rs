//! Time stepping of radial graphs, initial data, run loop and checkpoints.
//!
//! A graph `r = u(y)` moving with normal speed `ψ` satisfies, in the fixed
//! chart, `∂_t u = ψ v`.

use std::io::{self, BufRead, Write};
use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ambient::WarpedSpace;
use crate::audit;
use crate::basegrid::{BaseGrid, Chart, GridError, Partials, ScalarField};
use crate::geometry::{self, GeometryError, GeometryFields, SpeedField, SpeedLaw};

/// Strict convexity margin required of random initial data.
pub const CONVEXITY_MARGIN: f64 = 1e-6;
/// Maximal number of amplitude halvings in [`FlowState::init_random`].
pub const MAX_HALVINGS: u32 = 20;
/// Highest trigonometric mode of random perturbations.
pub const MAX_MODE: i32 = 4;
/// `max |Δu|` per step as a fraction of the distance to the domain boundary.
pub const DOMAIN_MARGIN_FRACTION: f64 = 0.1;
/// Upper bound of `h² · (spectral radius) / ρ` for the sixth-order stencils,
/// summed over two directions (`2 · (3 + 1/45) · 2`).
const STENCIL_SPECTRAL_BOUND: f64 = 12.09;
const RKC_DAMPING: f64 = 2.0 / 13.0;
const RKC_SAFETY: f64 = 1.25;
const RKC_MAX_STAGES: usize = 400;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error("initial data: {0}")]
    Init(String),
    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: GeometryError,
    },
    #[error("step {step}: time step underflow (dt = {dt})")]
    TimeStep { step: usize, dt: f64 },
}

impl FlowError {
    /// Index of the step at which a terminal error occurred.
    pub fn step(&self) -> Option<usize> {
        match self {
            FlowError::Step { step, .. } | FlowError::TimeStep { step, .. } => Some(*step),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint belongs to a different space or configuration (digest {found}, expected {expected})")]
    Digest { found: String, expected: String },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlowType {
    /// `ψ = ϑ′/F − s`, `F = H₂/H₁`
    LocallyConstrained,
    /// `ψ = 1/H`
    InverseMean,
    /// `ψ = ϑ′ − s H₁`
    GuanLi,
}

impl FlowType {
    pub fn name(&self) -> &'static str {
        match self {
            FlowType::LocallyConstrained => "lcf-h2h1",
            FlowType::InverseMean => "imcf",
            FlowType::GuanLi => "gl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lcf-h2h1" => Some(FlowType::LocallyConstrained),
            "imcf" => Some(FlowType::InverseMean),
            "gl" => Some(FlowType::GuanLi),
            _ => None,
        }
    }

    pub fn speed_law(&self) -> SpeedLaw {
        match self {
            FlowType::LocallyConstrained => SpeedLaw::LocallyConstrained,
            FlowType::InverseMean => SpeedLaw::InverseMean,
            FlowType::GuanLi => SpeedLaw::GuanLi,
        }
    }
}

/// Time integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Integrator {
    /// Classical fourth-order Runge–Kutta at the parabolic step limit.
    Rk4,
    /// Second-order Runge–Kutta–Chebyshev. The step is `min(max_dt, cap)`
    /// and the stage count follows the stiffness estimate.
    Rkc { max_dt: f64 },
}

impl Integrator {
    pub fn name(&self) -> &'static str {
        match self {
            Integrator::Rk4 => "rk4",
            Integrator::Rkc { .. } => "rkc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub flow_type: FlowType,
    pub cfl: f64,
    pub t_max: f64,
    /// Convergence threshold on `osc u`.
    pub tol_converged: f64,
    pub max_steps: usize,
    pub record_every: usize,
    pub integrator: Integrator,
}

impl FlowConfig {
    pub fn new(flow_type: FlowType) -> Self {
        Self {
            flow_type,
            cfl: 0.2,
            t_max: 50.0,
            tol_converged: 1e-8,
            max_steps: 10_000_000,
            record_every: 1,
            integrator: Integrator::Rk4,
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: String| Err(FlowError::Config(m));
        if !(self.cfl > 0.0 && self.cfl <= 0.5) {
            return bad(format!("cfl = {} must lie in (0, 0.5]", self.cfl));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return bad(format!("t_max = {} must be positive", self.t_max));
        }
        if !(self.tol_converged > 0.0) {
            return bad(format!("tol_converged = {} must be positive", self.tol_converged));
        }
        if self.record_every == 0 {
            return bad("record_every must be at least 1".into());
        }
        if let Integrator::Rkc { max_dt } = self.integrator {
            if !(max_dt > 0.0 && max_dt.is_finite()) {
                return bad(format!("rkc max_dt = {max_dt} must be positive"));
            }
        }
        Ok(())
    }
}

/// One row of the run log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    /// Step that produced this state; 0 for the initial record.
    pub dt: f64,
    pub area: f64,
    pub volume: f64,
    pub w2: f64,
    pub osc_u: f64,
    pub osc_theta: f64,
    pub min_u: f64,
    pub max_u: f64,
    pub kappa_min: f64,
    pub kappa_max: f64,
    /// `max ψ` over nodes (signed).
    pub speed_max: f64,
    pub umbilicity: f64,
    pub mink1_residual: f64,
    pub mink2_residual: f64,
}

impl StepRecord {
    pub const COLUMNS: [&'static str; 15] = [
        "t",
        "dt",
        "area",
        "volume",
        "w2",
        "osc_u",
        "osc_theta",
        "min_u",
        "max_u",
        "kappa_min",
        "kappa_max",
        "speed_max",
        "umbilicity",
        "mink1_residual",
        "mink2_residual",
    ];

    pub fn values(&self) -> [f64; 15] {
        [
            self.t,
            self.dt,
            self.area,
            self.volume,
            self.w2,
            self.osc_u,
            self.osc_theta,
            self.min_u,
            self.max_u,
            self.kappa_min,
            self.kappa_max,
            self.speed_max,
            self.umbilicity,
            self.mink1_residual,
            self.mink2_residual,
        ]
    }

    pub fn from_values(v: [f64; 15]) -> Self {
        Self {
            t: v[0],
            dt: v[1],
            area: v[2],
            volume: v[3],
            w2: v[4],
            osc_u: v[5],
            osc_theta: v[6],
            min_u: v[7],
            max_u: v[8],
            kappa_min: v[9],
            kappa_max: v[10],
            speed_max: v[11],
            umbilicity: v[12],
            mink1_residual: v[13],
            mink2_residual: v[14],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// A graph at a flow time, with its geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub step_index: usize,
    u: ScalarField,
    grid: Arc<BaseGrid>,
    geometry: GeometryFields,
    eps: f64,
}

impl FlowState {
    /// State with `u` given; the geometry is computed here.
    pub fn from_field(space: &WarpedSpace, grid: Arc<BaseGrid>, u: ScalarField, t: f64) -> Result<Self, FlowError> {
        let geometry = geometry::compute(&grid, space, &u).map_err(|e| FlowError::Init(e.to_string()))?;
        Ok(Self {
            t,
            step_index: 0,
            u,
            grid,
            geometry,
            eps: 0.0,
        })
    }

    /// The slice `u ≡ r0`.
    pub fn init_slice(space: &WarpedSpace, grid: Arc<BaseGrid>, r0: f64) -> Result<Self, FlowError> {
        let (a, b) = space.domain();
        if !(r0 > a && r0 < b) {
            return Err(FlowError::Init(format!("r0 = {r0} is outside the radial domain ({a}, {b})")));
        }
        let u = grid.constant(r0);
        Self::from_field(space, grid, u, 0.0)
    }

    /// `u = r0 + eps·P` with `P` the seeded perturbation of
    /// [`random_perturbation`]. `eps` is halved until the graph is strictly
    /// convex with margin [`CONVEXITY_MARGIN`].
    pub fn init_random(
        space: &WarpedSpace,
        grid: Arc<BaseGrid>,
        r0: f64,
        eps: f64,
        seed: u64,
    ) -> Result<Self, FlowError> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(FlowError::Init(format!("eps = {eps} must be non-negative")));
        }
        let (a, b) = space.domain();
        if !(r0 - 2.0 * eps > a && r0 + 2.0 * eps < b) {
            return Err(FlowError::Init(format!(
                "r0 ± 2 eps = [{}, {}] is not inside the radial domain ({a}, {b})",
                r0 - 2.0 * eps,
                r0 + 2.0 * eps
            )));
        }
        if eps == 0.0 {
            return Self::init_slice(space, grid, r0);
        }
        let p = random_perturbation(&grid, seed);
        let mut e = eps;
        let mut last_error = String::new();
        for _ in 0..=MAX_HALVINGS {
            let u = ScalarField::from_vec_unchecked(p.iter().map(|x| r0 + e * x).collect());
            match geometry::compute(&grid, space, &u) {
                Ok(geo) if geo.kappa_min() > CONVEXITY_MARGIN => {
                    return Ok(Self {
                        t: 0.0,
                        step_index: 0,
                        u,
                        grid,
                        geometry: geo,
                        eps: e,
                    });
                }
                Ok(geo) => last_error = format!("kappa_min = {:e}", geo.kappa_min()),
                Err(err) => last_error = err.to_string(),
            }
            e *= 0.5;
        }
        Err(FlowError::Init(format!(
            "no strictly convex graph after {MAX_HALVINGS} halvings of eps = {eps} ({last_error})"
        )))
    }

    pub fn u(&self) -> &ScalarField {
        &self.u
    }

    pub fn grid(&self) -> &BaseGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<BaseGrid> {
        &self.grid
    }

    pub fn geometry(&self) -> &GeometryFields {
        &self.geometry
    }

    /// Perturbation amplitude actually used at initialisation.
    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Functionals of the current state.
    pub fn functionals(&self, space: &WarpedSpace) -> audit::Functionals {
        audit::functionals(&self.grid, space, self.u.values(), &self.geometry)
    }

    /// Record of the current state under `flow`, with `dt` the last step.
    pub fn record(&self, space: &WarpedSpace, flow: FlowType, dt: f64) -> Result<StepRecord, FlowError> {
        let speed = geometry::speed_field(&self.geometry, flow.speed_law()).map_err(|e| FlowError::Step {
            step: self.step_index,
            source: e,
        })?;
        Ok(self.record_with(space, &speed, dt))
    }

    fn record_with(&self, space: &WarpedSpace, speed: &SpeedField, dt: f64) -> StepRecord {
        let f = self.functionals(space);
        let (min_u, max_u) = (self.u.min(), self.u.max());
        StepRecord {
            t: self.t,
            dt,
            area: f.area,
            volume: f.volume,
            w2: f.w2,
            osc_u: max_u - min_u,
            osc_theta: audit::theta_oscillation(space, self.u.values()),
            min_u,
            max_u,
            kappa_min: self.geometry.kappa_min(),
            kappa_max: self.geometry.kappa_max(),
            speed_max: speed.speed.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            umbilicity: self.geometry.umbilicity(),
            mink1_residual: audit::minkowski_residual_1(&self.grid, &self.geometry),
            mink2_residual: audit::minkowski_residual_2(&self.grid, space, &self.geometry),
        }
    }

    /// Writes a checkpoint: a header with `digest` and the step index,
    /// followed by the field dump.
    pub fn write_checkpoint<W: Write>(&self, mut w: W, digest: &str) -> io::Result<()> {
        writeln!(w, "warpflow-checkpoint 1")?;
        writeln!(w, "digest {digest}")?;
        writeln!(w, "step {}", self.step_index)?;
        writeln!(w, "eps {:.16e}", self.eps)?;
        self.grid.write_dump(&mut w, &self.u, self.t)
    }

    /// Restores a checkpoint written by [`Self::write_checkpoint`].
    pub fn read_checkpoint<R: BufRead>(
        mut r: R,
        space: &WarpedSpace,
        expected_digest: &str,
    ) -> Result<Self, CheckpointError> {
        let mut line = String::new();
        let mut header = |key: &str| -> Result<String, CheckpointError> {
            line.clear();
            r.read_line(&mut line)?;
            let rest = line
                .trim_end()
                .strip_prefix(key)
                .and_then(|s| s.strip_prefix(' '))
                .ok_or_else(|| CheckpointError::Format(format!("expected {key:?}, got {:?}", line.trim_end())))?;
            Ok(rest.to_string())
        };
        let version = header("warpflow-checkpoint")?;
        if version != "1" {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let digest = header("digest")?;
        if digest != expected_digest {
            return Err(CheckpointError::Digest {
                found: digest,
                expected: expected_digest.to_string(),
            });
        }
        let step: usize = header("step")?
            .parse()
            .map_err(|_| CheckpointError::Format("bad step index".into()))?;
        let eps: f64 = header("eps")?
            .parse()
            .map_err(|_| CheckpointError::Format("bad eps".into()))?;
        let (grid, u, t) = BaseGrid::read_dump(r)?;
        let mut state = Self::from_field(space, Arc::new(grid), u, t)?;
        state.step_index = step;
        state.eps = eps;
        Ok(state)
    }
}

/// Hex SHA-256 of a canonical description of the space and flow settings.
pub fn run_digest(space: &WarpedSpace, grid: &BaseGrid, config: &FlowConfig) -> String {
    let canon = format!(
        "{:?}|{}|{}|{:?}|{:?}|{:?}",
        space.warp(),
        space.base().name(),
        space.dim(),
        grid.chart(),
        grid.resolution(),
        (config.flow_type, config.cfl, config.integrator)
    );
    let d = Sha256::digest(canon.as_bytes());
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Uniform value in `[−1, 1)` from the top 53 bits of one `u64` draw.
fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    let unit = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    2.0 * unit - 1.0
}

/// Side of the torus lattice, and node count on `[0, π]`, on which the
/// perturbation's sup norm is taken.
const REFERENCE_TORUS: usize = 256;
const REFERENCE_SPHERE: usize = 4096;

/// Seeded mean-zero band-limited perturbation `P` with `max |P| = 1`,
/// defined independently of any production grid.
///
/// The stream is `ChaCha8Rng::seed_from_u64(seed)`; each uniform consumes one
/// `u64` and maps its top 53 bits to `[−1, 1)`. Torus: for `k₁ = 0..=4`,
/// `k₂ = −4..=4`, skipping `k₁ = 0, k₂ ≤ 0`, draw `a` then `b` and add
/// `(a cos(k·y) + b sin(k·y))/|k|²`. Sphere: for `k = 1..=4` draw `c` and add
/// `c (cos kφ − m_k)/k²` with `m_k` the exact `σ`-mean of `cos kφ`. The sum is
/// divided by its maximum modulus on a fixed reference lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    chart: Chart,
    /// `(k₁, k₂, a, b)` on the torus, `(k, 0, c, 0)` on the sphere.
    modes: Vec<(i32, i32, f64, f64)>,
    scale: f64,
}

impl Perturbation {
    pub fn new(chart: Chart, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut modes = Vec::new();
        match chart {
            Chart::Torus2d => {
                for k1 in 0..=MAX_MODE {
                    for k2 in -MAX_MODE..=MAX_MODE {
                        if k1 == 0 && k2 <= 0 {
                            continue;
                        }
                        let a = uniform(&mut rng);
                        let b = uniform(&mut rng);
                        modes.push((k1, k2, a, b));
                    }
                }
            }
            Chart::AxisymSphere => {
                for k in 1..=MAX_MODE {
                    modes.push((k, 0, uniform(&mut rng), 0.0));
                }
            }
        }
        let mut p = Self { chart, modes, scale: 1.0 };
        let sup = match chart {
            Chart::Torus2d => {
                let h = 2.0 * std::f64::consts::PI / REFERENCE_TORUS as f64;
                let mut m = 0.0f64;
                for i in 0..REFERENCE_TORUS {
                    for j in 0..REFERENCE_TORUS {
                        m = m.max(p.raw([i as f64 * h, j as f64 * h]).abs());
                    }
                }
                m
            }
            Chart::AxisymSphere => (0..=REFERENCE_SPHERE)
                .map(|j| p.raw([std::f64::consts::PI * j as f64 / REFERENCE_SPHERE as f64, 0.0]).abs())
                .fold(0.0, f64::max),
        };
        if sup > 0.0 {
            p.scale = 1.0 / sup;
        }
        p
    }

    fn raw(&self, y: [f64; 2]) -> f64 {
        match self.chart {
            Chart::Torus2d => self
                .modes
                .iter()
                .map(|&(k1, k2, a, b)| {
                    let arg = k1 as f64 * y[0] + k2 as f64 * y[1];
                    (a * arg.cos() + b * arg.sin()) / (k1 * k1 + k2 * k2) as f64
                })
                .sum(),
            Chart::AxisymSphere => self
                .modes
                .iter()
                .map(|&(k, _, c, _)| c * ((k as f64 * y[0]).cos() - sphere_cos_mean(k)) / (k * k) as f64)
                .sum(),
        }
    }

    /// `P(y)` at chart coordinates `y`.
    pub fn eval(&self, y: [f64; 2]) -> f64 {
        self.scale * self.raw(y)
    }

    /// `P` sampled at the nodes of `grid`, whose chart must match.
    pub fn sample(&self, grid: &BaseGrid) -> Vec<f64> {
        debug_assert_eq!(grid.chart(), self.chart);
        grid.coords().iter().map(|&y| self.eval(y)).collect()
    }
}

/// `(1/2)∫₀^π cos(kφ) sin φ dφ`.
fn sphere_cos_mean(k: i32) -> f64 {
    if k % 2 == 1 {
        0.0
    } else {
        1.0 / (1.0 - (k * k) as f64)
    }
}

/// [`Perturbation`] of the grid's chart sampled on the grid.
pub fn random_perturbation(grid: &BaseGrid, seed: u64) -> Vec<f64> {
    Perturbation::new(grid.chart(), seed).sample(grid)
}

/// Evaluation buffers reused across stages.
struct Stage {
    partials: Partials,
    geo: GeometryFields,
    speed: SpeedField,
}

impl Stage {
    fn new(n: usize) -> Self {
        Self {
            partials: Partials::zeros(n),
            geo: GeometryFields::default(),
            speed: SpeedField::default(),
        }
    }

    /// Evaluates geometry and speed at `u` and writes `ψ v` into `k`.
    fn eval(
        &mut self,
        grid: &BaseGrid,
        space: &WarpedSpace,
        law: SpeedLaw,
        u: &[f64],
        step: usize,
        k: &mut Vec<f64>,
    ) -> Result<(), FlowError> {
        let wrap = |e| FlowError::Step { step, source: e };
        grid.partials_into(u, &mut self.partials);
        geometry::compute_into(grid, space, u, &self.partials, &mut self.geo).map_err(wrap)?;
        geometry::speed_field_into(&self.geo, law, &mut self.speed).map_err(wrap)?;
        rhs_into(&self.geo, &self.speed, k);
        Ok(())
    }
}

/// `∂_t u = ψ v`.
fn rhs_into(geo: &GeometryFields, speed: &SpeedField, k: &mut Vec<f64>) {
    k.clear();
    k.extend(speed.speed.iter().zip(&geo.v).map(|(p, v)| p * v));
}

/// Largest coefficient `ρ` of the linearised operator `∂_t w ≈ ρ ∂²w`.
fn parabolic_scale(grid: &BaseGrid, geo: &GeometryFields, speed: &SpeedField, law: SpeedLaw) -> f64 {
    let cf = law.curvature_function();
    let mut rho = 0.0f64;
    for i in 0..geo.len() {
        let g = geo.g[i];
        // largest eigenvalue of g⁻¹ over the active directions
        let lambda = match grid.chart() {
            Chart::Torus2d => {
                let tr = g.xx + g.yy;
                let disc = ((g.xx - g.yy).powi(2) + 4.0 * g.xy * g.xy).sqrt();
                2.0 / (tr - disc).max(f64::MIN_POSITIVE)
            }
            Chart::AxisymSphere => 1.0 / g.xx,
        };
        let v = geo.v[i];
        let r = match law {
            SpeedLaw::LocallyConstrained => {
                let f = speed.f_value[i];
                v * v * geo.theta_d1[i] / (f * f) * cf.max_derivative(geo.k1[i], geo.k2[i]) * lambda
            }
            SpeedLaw::InverseMean => {
                let h = 2.0 * geo.h1[i];
                v * v * lambda / (h * h)
            }
            SpeedLaw::GuanLi => 0.5 * v * geo.theta[i] * lambda,
        };
        rho = rho.max(r);
    }
    rho
}

/// `dt` cap from the distance of `u` to the domain boundary.
fn margin_cap(space: &WarpedSpace, u: &ScalarField, k: &[f64]) -> f64 {
    let (a, b) = space.domain();
    let margin = (u.min() - a).min(b - u.max());
    let kmax = k.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if kmax > 0.0 {
        DOMAIN_MARGIN_FRACTION * margin / kmax
    } else {
        f64::INFINITY
    }
}

/// Stage count and Chebyshev coefficients of the damped RKC2 scheme.
struct RkcCoefficients {
    stages: usize,
    w0: f64,
    w1: f64,
    b: Vec<f64>,
}

impl RkcCoefficients {
    /// `(T_j, T′_j, T″_j)` at `w0` for `j = 0..=s`.
    fn chebyshev(s: usize, w0: f64) -> Vec<[f64; 3]> {
        let mut t = vec![[0.0; 3]; s + 1];
        t[0] = [1.0, 0.0, 0.0];
        if s >= 1 {
            t[1] = [w0, 1.0, 0.0];
        }
        for j in 2..=s {
            let (p, q) = (t[j - 1], t[j - 2]);
            t[j] = [
                2.0 * w0 * p[0] - q[0],
                2.0 * p[0] + 2.0 * w0 * p[1] - q[1],
                4.0 * p[1] + 2.0 * w0 * p[2] - q[2],
            ];
        }
        t
    }

    fn stability_bound(s: usize) -> f64 {
        let w0 = 1.0 + RKC_DAMPING / (s * s) as f64;
        let t = Self::chebyshev(s, w0);
        (1.0 + w0) * t[s][2] / t[s][1]
    }

    fn for_stiffness(z: f64) -> Option<Self> {
        let mut s = 2;
        while Self::stability_bound(s) < z {
            s += 1;
            if s > RKC_MAX_STAGES {
                return None;
            }
        }
        let w0 = 1.0 + RKC_DAMPING / (s * s) as f64;
        let t = Self::chebyshev(s, w0);
        let w1 = t[s][1] / t[s][2];
        let mut b = vec![0.0; s + 1];
        for j in 2..=s {
            b[j] = t[j][2] / (t[j][1] * t[j][1]);
        }
        b[0] = b[2];
        b[1] = b[2];
        Some(Self { stages: s, w0, w1, b })
    }

    fn t_values(&self) -> Vec<f64> {
        Self::chebyshev(self.stages, self.w0).iter().map(|x| x[0]).collect()
    }
}

/// Advances `state` by one step; leaves the speed field of the new state in
/// `speed` and returns the step size.
fn advance(
    state: &mut FlowState,
    config: &FlowConfig,
    space: &WarpedSpace,
    stage: &mut Stage,
    speed: &mut SpeedField,
) -> Result<f64, FlowError> {
    let law = config.flow_type.speed_law();
    let grid = Arc::clone(&state.grid);
    let step = state.step_index + 1;
    let n = grid.len();
    let u0 = state.u.values();
    let mut k1 = Vec::with_capacity(n);
    rhs_into(&state.geometry, speed, &mut k1);
    let rho = parabolic_scale(&grid, &state.geometry, speed, law);
    let h2 = grid.spacing() * grid.spacing();
    let remaining = config.t_max - state.t;
    let cap = margin_cap(space, &state.u, &k1);
    let mut y = vec![0.0; n];
    let mut k = Vec::with_capacity(n);

    let (u_new, dt) = match config.integrator {
        Integrator::Rk4 => {
            let mut dt = if rho > 0.0 { config.cfl * h2 / rho } else { f64::INFINITY };
            dt = dt.min(cap).min(remaining);
            check_dt(dt, step)?;
            let axpy = |k: &[f64], c: f64, y: &mut Vec<f64>| {
                y.clear();
                y.extend(u0.iter().zip(k).map(|(u, k)| u + c * k));
            };
            let mut sum = k1.clone();
            axpy(&k1, 0.5 * dt, &mut y);
            stage.eval(&grid, space, law, &y, step, &mut k)?;
            sum.iter_mut().zip(&k).for_each(|(s, k)| *s += 2.0 * k);
            axpy(&k, 0.5 * dt, &mut y);
            stage.eval(&grid, space, law, &y, step, &mut k)?;
            sum.iter_mut().zip(&k).for_each(|(s, k)| *s += 2.0 * k);
            axpy(&k, dt, &mut y);
            stage.eval(&grid, space, law, &y, step, &mut k)?;
            sum.iter_mut().zip(&k).for_each(|(s, k)| *s += k);
            let u: Vec<f64> = u0.iter().zip(&sum).map(|(u, s)| u + dt / 6.0 * s).collect();
            (u, dt)
        }
        Integrator::Rkc { max_dt } => {
            let dt = max_dt.min(cap).min(remaining);
            check_dt(dt, step)?;
            let z = dt * rho * STENCIL_SPECTRAL_BOUND / h2 * RKC_SAFETY;
            let c = RkcCoefficients::for_stiffness(z).ok_or(FlowError::TimeStep { step, dt })?;
            let t = c.t_values();
            let b = &c.b;
            let a_of = |j: usize| 1.0 - b[j] * t[j];
            let mut y_prev2 = u0.to_vec();
            let mu1 = b[1] * c.w1;
            let mut y_prev: Vec<f64> = u0.iter().zip(&k1).map(|(u, k)| u + mu1 * dt * k).collect();
            for j in 2..=c.stages {
                stage.eval(&grid, space, law, &y_prev, step, &mut k)?;
                let mu = 2.0 * b[j] * c.w0 / b[j - 1];
                let nu = -b[j] / b[j - 2];
                let mu_t = 2.0 * b[j] * c.w1 / b[j - 1];
                let gamma_t = -a_of(j - 1) * mu_t;
                for i in 0..n {
                    y[i] = (1.0 - mu - nu) * u0[i]
                        + mu * y_prev[i]
                        + nu * y_prev2[i]
                        + mu_t * dt * k[i]
                        + gamma_t * dt * k1[i];
                }
                // rotate: y_prev2 ← y_prev ← y
                std::mem::swap(&mut y_prev2, &mut y_prev);
                std::mem::swap(&mut y_prev, &mut y);
            }
            (y_prev, dt)
        }
    };

    if let Some(i) = u_new.iter().position(|x| !x.is_finite()) {
        return Err(FlowError::Step {
            step,
            source: GeometryError::NonFinite { node: i },
        });
    }
    stage.eval(&grid, space, law, &u_new, step, &mut k)?;
    std::mem::swap(&mut state.geometry, &mut stage.geo);
    std::mem::swap(speed, &mut stage.speed);
    state.u = ScalarField::from_vec_unchecked(u_new);
    state.step_index = step;
    // land exactly on t_max when the step was clipped to it
    state.t = if dt == remaining { config.t_max } else { state.t + dt };
    Ok(dt)
}

fn check_dt(dt: f64, step: usize) -> Result<(), FlowError> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(FlowError::TimeStep { step, dt })
    }
}

/// One step of the configured flow, with the record of the new state.
pub fn step(state: &FlowState, config: &FlowConfig, space: &WarpedSpace) -> Result<(FlowState, StepRecord), FlowError> {
    config.validate()?;
    let law = config.flow_type.speed_law();
    let mut speed = geometry::speed_field(&state.geometry, law).map_err(|e| FlowError::Step {
        step: state.step_index,
        source: e,
    })?;
    let mut next = state.clone();
    let mut stage = Stage::new(state.grid.len());
    let dt = advance(&mut next, config, space, &mut stage, &mut speed)?;
    let rec = next.record_with(space, &speed, dt);
    Ok((next, rec))
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunVerdict {
    Converged,
    TMaxReached,
    MaxStepsReached,
    Error(FlowError),
}

impl RunVerdict {
    pub fn name(&self) -> &'static str {
        match self {
            RunVerdict::Converged => "converged",
            RunVerdict::TMaxReached => "t_max_reached",
            RunVerdict::MaxStepsReached => "max_steps_reached",
            RunVerdict::Error(_) => "error",
        }
    }

    pub fn is_error(&self) -> bool {
        matches!(self, RunVerdict::Error(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub final_state: FlowState,
    pub verdict: RunVerdict,
    pub records: Vec<StepRecord>,
}

/// Runs the flow until convergence, `t_max` or `max_steps`. Every record is
/// passed to `sink` as it is produced.
pub fn run<S: FnMut(&StepRecord)>(initial: FlowState, config: &FlowConfig, space: &WarpedSpace, sink: S) -> RunResult {
    run_observed(initial, config, space, sink, |_| {})
}

/// [`run`] with `observe` called on the state after every step, once its
/// record (if any) has gone to `sink`.
pub fn run_observed<S, O>(
    initial: FlowState,
    config: &FlowConfig,
    space: &WarpedSpace,
    mut sink: S,
    mut observe: O,
) -> RunResult
where
    S: FnMut(&StepRecord),
    O: FnMut(&FlowState),
{
    let mut state = initial;
    let mut records = Vec::new();
    let mut emit = |rec: StepRecord, records: &mut Vec<StepRecord>| {
        sink(&rec);
        records.push(rec);
    };
    let fail = |state: FlowState, records: Vec<StepRecord>, e: FlowError| RunResult {
        final_state: state,
        verdict: RunVerdict::Error(e),
        records,
    };
    if let Err(e) = config.validate() {
        return fail(state, records, e);
    }
    let law = config.flow_type.speed_law();
    let mut speed = match geometry::speed_field(&state.geometry, law) {
        Ok(s) => s,
        Err(source) => {
            let step = state.step_index;
            return fail(state, records, FlowError::Step { step, source });
        }
    };
    emit(state.record_with(space, &speed, 0.0), &mut records);
    let converges = config.flow_type != FlowType::InverseMean;
    let mut stage = Stage::new(state.grid.len());
    let mut steps_taken = 0usize;
    let verdict = loop {
        if converges && state.u.oscillation() <= config.tol_converged {
            break RunVerdict::Converged;
        }
        if state.t >= config.t_max {
            break RunVerdict::TMaxReached;
        }
        if steps_taken >= config.max_steps {
            break RunVerdict::MaxStepsReached;
        }
        match advance(&mut state, config, space, &mut stage, &mut speed) {
            Ok(dt) => {
                steps_taken += 1;
                let last = (converges && state.u.oscillation() <= config.tol_converged)
                    || state.t >= config.t_max
                    || steps_taken >= config.max_steps;
                if state.step_index.is_multiple_of(config.record_every) || last {
                    emit(state.record_with(space, &speed, dt), &mut records);
                }
                observe(&state);
            }
            Err(e) => break RunVerdict::Error(e),
        }
    };
    RunResult {
        final_state: state,
        verdict,
        records,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ambient::{BaseManifold, WarpFamily, WarpFunction};

    fn cosh_torus() -> (WarpedSpace, Arc<BaseGrid>) {
        let sp = WarpedSpace::surface(WarpFunction::new(WarpFamily::Cosh, 0.0, 5.0).unwrap(), BaseManifold::FlatTorus);
        (sp, Arc::new(BaseGrid::new(Chart::Torus2d, 16).unwrap()))
    }

    fn sinh_sphere(m: usize) -> (WarpedSpace, Arc<BaseGrid>) {
        let sp = WarpedSpace::surface(WarpFunction::new(WarpFamily::Sinh, 0.0, 5.0).unwrap(), BaseManifold::RoundSphere);
        (sp, Arc::new(BaseGrid::new(Chart::AxisymSphere, m).unwrap()))
    }

    #[test]
    fn slice_state_curvature() {
        let (sp, g) = cosh_torus();
        let s = FlowState::init_slice(&sp, g, 1.0).unwrap();
        let t = 1.0f64.tanh();
        assert!((s.geometry().kappa_min() - t).abs() < 1e-12);
        assert!((s.geometry().kappa_max() - t).abs() < 1e-12);
    }

    #[test]
    fn slice_outside_domain() {
        let (sp, g) = cosh_torus();
        assert!(matches!(FlowState::init_slice(&sp, g, 5.0), Err(FlowError::Init(_))));
    }

    #[test]
    fn zero_eps_is_slice() {
        let (sp, g) = cosh_torus();
        let a = FlowState::init_random(&sp, g.clone(), 1.0, 0.0, 3).unwrap();
        let b = FlowState::init_slice(&sp, g, 1.0).unwrap();
        assert_eq!(a.u(), b.u());
    }

    #[test]
    fn perturbation_is_normalised_mean_zero_and_deterministic() {
        for (_, g) in [cosh_torus(), sinh_sphere(64)] {
            let p = random_perturbation(&g, 7);
            let sup = p.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(sup <= 1.0 + 1e-12 && sup > 0.9, "{sup}");
            let total: f64 = g.weights().iter().sum();
            assert!(g.integrate_values(&p).abs() / total < 1e-13);
            assert_eq!(p, random_perturbation(&g, 7));
            assert_ne!(p, random_perturbation(&g, 8));
        }
    }

    #[test]
    fn random_state_is_strictly_convex() {
        let (sp, g) = sinh_sphere(128);
        let s = FlowState::init_random(&sp, g, 1.0, 0.1, 7).unwrap();
        assert!(s.geometry().kappa_min() > CONVEXITY_MARGIN);
        assert!(s.eps() > 0.0 && s.eps() <= 0.1);
    }

    #[test]
    fn eps_is_halved_until_convex() {
        // small r0 makes the slice weakly curved relative to the perturbation
        let (sp, g) = cosh_torus();
        let s = FlowState::init_random(&sp, g, 0.3, 0.14, 1).unwrap();
        assert!(s.eps() < 0.14);
        assert!(s.geometry().kappa_min() > CONVEXITY_MARGIN);
    }

    #[test]
    fn config_validation() {
        let mut c = FlowConfig::new(FlowType::LocallyConstrained);
        assert!(c.validate().is_ok());
        c.cfl = 0.6;
        assert!(c.validate().is_err());
        c.cfl = 0.2;
        c.record_every = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn slice_is_fixed_and_converges_immediately() {
        let (sp, g) = cosh_torus();
        let s = FlowState::init_slice(&sp, g, 1.0).unwrap();
        let mut c = FlowConfig::new(FlowType::LocallyConstrained);
        c.t_max = 1.0;
        let (next, rec) = step(&s, &c, &sp).unwrap();
        for (a, b) in next.u().values().iter().zip(s.u().values()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(rec.speed_max.abs() < 1e-12);
        let res = run(s, &c, &sp, |_| {});
        assert_eq!(res.verdict, RunVerdict::Converged);
        assert_eq!(res.records.len(), 1);
    }

    #[test]
    fn oscillation_decays_on_sphere() {
        let (sp, g) = sinh_sphere(64);
        let s = FlowState::init_random(&sp, g, 1.0, 0.1, 7).unwrap();
        let mut c = FlowConfig::new(FlowType::LocallyConstrained);
        c.max_steps = 200;
        let res = run(s, &c, &sp, |_| {});
        assert_eq!(res.verdict, RunVerdict::MaxStepsReached);
        for w in res.records.windows(2) {
            assert!(w[1].osc_u < w[0].osc_u);
            assert!(w[1].area >= w[0].area * (1.0 - 1e-12));
        }
    }

    #[test]
    fn t_max_is_hit_exactly() {
        let (sp, g) = sinh_sphere(32);
        let s = FlowState::init_random(&sp, g, 1.0, 0.05, 2).unwrap();
        let mut c = FlowConfig::new(FlowType::InverseMean);
        c.t_max = 0.05;
        c.record_every = 1000;
        let res = run(s, &c, &sp, |_| {});
        assert_eq!(res.verdict, RunVerdict::TMaxReached);
        assert_eq!(res.final_state.t, 0.05);
        assert_eq!(res.records.last().unwrap().t, 0.05);
        assert_eq!(res.records.len(), 2);
    }

    #[test]
    fn margin_cap_keeps_expanding_flow_inside_domain() {
        // IMCF expands; the step cap shrinks steps as u approaches b
        let sp = WarpedSpace::surface(WarpFunction::new(WarpFamily::Sinh, 0.0, 1.2).unwrap(), BaseManifold::RoundSphere);
        let g = Arc::new(BaseGrid::new(Chart::AxisymSphere, 32).unwrap());
        let s = FlowState::init_slice(&sp, g, 1.0).unwrap();
        let mut c = FlowConfig::new(FlowType::InverseMean);
        c.t_max = 10.0;
        c.max_steps = 2000;
        c.record_every = 100;
        let res = run(s, &c, &sp, |_| {});
        assert_eq!(res.verdict, RunVerdict::MaxStepsReached);
        assert!(res.final_state.u().max() < 1.2);
        assert!(res.final_state.u().max() > 1.19);
    }

    #[test]
    fn terminal_error_carries_step_index() {
        // a non-convex graph stops the locally constrained flow at step 1
        let (sp, g) = cosh_torus();
        let u = g.field(|y| 1.0 + 0.3 * (2.0 * y[0]).cos());
        let s = FlowState::from_field(&sp, g, u, 0.0).unwrap();
        assert!(s.geometry().kappa_min() < 0.0);
        let res = run(s, &FlowConfig::new(FlowType::LocallyConstrained), &sp, |_| {});
        match res.verdict {
            RunVerdict::Error(e) => {
                assert_eq!(e.step(), Some(0));
                assert!(matches!(e, FlowError::Step { source: GeometryError::ConvexityLoss { .. }, .. }));
            }
            v => panic!("{v:?}"),
        }
        assert!(res.records.is_empty());
    }

    #[test]
    fn rkc_matches_rk4_on_short_run() {
        let (sp, g) = sinh_sphere(32);
        let s = FlowState::init_random(&sp, g, 1.0, 0.1, 4).unwrap();
        let mut c = FlowConfig::new(FlowType::LocallyConstrained);
        c.t_max = 0.5;
        let a = run(s.clone(), &c, &sp, |_| {});
        c.integrator = Integrator::Rkc { max_dt: 0.01 };
        let b = run(s, &c, &sp, |_| {});
        assert_eq!(a.verdict, RunVerdict::TMaxReached);
        assert_eq!(b.verdict, RunVerdict::TMaxReached);
        let d = a
            .final_state
            .u()
            .values()
            .iter()
            .zip(b.final_state.u().values())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(d < 1e-5, "{d}");
    }

    #[test]
    fn rkc_stability_bound_grows_quadratically() {
        let b10 = RkcCoefficients::stability_bound(10);
        let b20 = RkcCoefficients::stability_bound(20);
        assert!((b10 / 100.0 - 0.65).abs() < 0.02, "{b10}");
        assert!((b20 / b10 - 4.0).abs() < 0.1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (sp, g) = sinh_sphere(32);
        let s = FlowState::init_random(&sp, g, 1.0, 0.1, 9).unwrap();
        let c = FlowConfig::new(FlowType::LocallyConstrained);
        let (s1, _) = step(&s, &c, &sp).unwrap();
        let digest = run_digest(&sp, s1.grid(), &c);
        let mut buf = Vec::new();
        s1.write_checkpoint(&mut buf, &digest).unwrap();
        let back = FlowState::read_checkpoint(&buf[..], &sp, &digest).unwrap();
        assert_eq!(back, s1);
        assert!(matches!(
            FlowState::read_checkpoint(&buf[..], &sp, "other"),
            Err(CheckpointError::Digest { .. })
        ));
    }
}
