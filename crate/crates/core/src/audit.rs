//! Integral functionals, identity residuals, inequality gaps and trajectory
//! verdicts.

use std::fmt::Write as _;

use thiserror::Error;

use crate::ambient::{AmbientError, BaseManifold, CurvatureBranch, SliceFunctional, WarpFamily, WarpedSpace};
use crate::basegrid::BaseGrid;
use crate::flow::{FlowState, FlowType, StepRecord};
use crate::geometry::{GeometryError, GeometryFields};

/// Absolute slack of the speed bound, relevant when the initial speed vanishes.
const SPEED_ABS_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuditError {
    #[error("trajectory audit needs at least 2 records, got {0}")]
    TooFewRecords(usize),
    #[error(transparent)]
    Ambient(#[from] AmbientError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Integral quantities of a graph and its enclosed region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Functionals {
    pub area: f64,
    pub volume: f64,
    pub int_h1: f64,
    /// `(1/n) ∫_{M̂} Rc(∂_r, ∂_r) = −∫_{M̂} ϑ″/ϑ`
    pub bulk_ricci: f64,
    pub w2: f64,
    /// `∫ H₁ − |M̂|`
    pub genmink_w2: f64,
}

/// Functionals of the graph `u` with geometry `geom`.
pub fn functionals(grid: &BaseGrid, space: &WarpedSpace, u: &[f64], geom: &GeometryFields) -> Functionals {
    let w = grid.weights();
    let mut area = 0.0;
    let mut int_h1 = 0.0;
    let mut volume = 0.0;
    let mut bulk = 0.0;
    for i in 0..grid.len() {
        let dm = w[i] * geom.density[i];
        area += dm;
        int_h1 += geom.h1[i] * dm;
        let (vol, blk) = space.radial_integrals(u[i]);
        volume += w[i] * vol;
        bulk += w[i] * blk;
    }
    let bulk_ricci = -bulk;
    Functionals {
        area,
        volume,
        int_h1,
        bulk_ricci,
        w2: int_h1 + bulk_ricci,
        genmink_w2: int_h1 - volume,
    }
}

/// `∫ s H₁ − ∫ ϑ′` over `M`.
pub fn minkowski_residual_1(grid: &BaseGrid, geom: &GeometryFields) -> f64 {
    surface_integral(grid, geom, |i| geom.s[i] * geom.h1[i] - geom.theta_d1[i])
}

/// `∫ ϑ′` over `M`, the natural scale of the first Minkowski residual.
pub fn minkowski_scale(grid: &BaseGrid, geom: &GeometryFields) -> f64 {
    surface_integral(grid, geom, |i| geom.theta_d1[i])
}

/// `Rc(ν, ∇Θ)` at one node.
///
/// With `ν = v⁻¹(∂_r − ϑ⁻²σⁱʲuⱼ∂ᵢ)` and `∇Θ = ϑ uⁱ x_{;i}` (radial part
/// `ϑ|∇u|²`), the block form of the ambient Ricci tensor gives the value
/// below.
fn ricci_normal_grad_theta(space: &WarpedSpace, geom: &GeometryFields, i: usize) -> f64 {
    let jet = crate::ambient::WarpJet {
        value: geom.theta[i],
        d1: geom.theta_d1[i],
        d2: geom.theta_d2[i],
        d3: 0.0,
    };
    let blocks = space.ricci_blocks_at(&jet);
    let (th, v, grad_sq) = (geom.theta[i], geom.v[i], geom.grad_sq[i]);
    let nu_r = 1.0 / v;
    let x_r = th * grad_sq;
    // σ(ν̂, X̂) = Σᵢ σᵢᵢ νⁱ Xⁱ = −|∇u|²/(vϑ)
    let sigma_nu_x = -grad_sq / (v * th);
    blocks.radial * nu_r * x_r + blocks.base * sigma_nu_x
}

/// `∫ sH₂ − ∫ ϑ′H₁ + (1/(n(n−1))) ∫ Rc(ν, ∇Θ)` over `M`.
pub fn minkowski_residual_2(grid: &BaseGrid, space: &WarpedSpace, geom: &GeometryFields) -> f64 {
    let n = 2.0;
    let c = 1.0 / (n * (n - 1.0));
    surface_integral(grid, geom, |i| {
        geom.s[i] * geom.h2[i] - geom.theta_d1[i] * geom.h1[i] + c * ricci_normal_grad_theta(space, geom, i)
    })
}

/// `∫ ϑ′/H₁ − ∫ s`.
pub fn heintze_karcher_gap(grid: &BaseGrid, geom: &GeometryFields) -> Result<f64, GeometryError> {
    if let Some(i) = (0..geom.len()).find(|&i| !(geom.h1[i] > 0.0)) {
        return Err(GeometryError::MeanConvexityLoss {
            node: i,
            k1: geom.k1[i],
            k2: geom.k2[i],
        });
    }
    Ok(surface_integral(grid, geom, |i| geom.theta_d1[i] / geom.h1[i] - geom.s[i]))
}

/// `∫ s` over `M`.
pub fn support_integral(grid: &BaseGrid, geom: &GeometryFields) -> f64 {
    surface_integral(grid, geom, |i| geom.s[i])
}

fn surface_integral<F: Fn(usize) -> f64>(grid: &BaseGrid, geom: &GeometryFields, f: F) -> f64 {
    grid.weights()
        .iter()
        .enumerate()
        .map(|(i, w)| f(i) * geom.density[i] * w)
        .sum()
}

/// `osc Θ = max Θ(u) − min Θ(u)`; `Θ` is increasing.
pub fn theta_oscillation(space: &WarpedSpace, u: &[f64]) -> f64 {
    let warp = space.warp();
    let (lo, hi) = u
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    warp.primitive(hi) - warp.primitive(lo)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InequalityGaps {
    /// `W₂ − φ(|M|)`
    pub mink_gap: f64,
    /// `W₂ − ψ(|M̂|)`
    pub psi_gap: f64,
    /// `(∫H₁ − |M̂|) − φ̃(|M|)` with `φ̃` built from the same functional.
    pub genmink_gap: f64,
    /// `|M̂| − |Ŝ_r|` for the slice with `|S_r| = |M|`.
    pub isoperimetric_gap: f64,
}

pub fn inequality_gaps(space: &WarpedSpace, f: &Functionals) -> Result<InequalityGaps, AmbientError> {
    let r_area = space.slice_radius_for_area(f.area)?;
    let slice = space.slice_functionals(r_area).or_else(|_| {
        // area at a domain endpoint: evaluate the closed form directly
        space.slice_functionals(r_area.clamp(
            space.domain().0 + f64::EPSILON,
            space.domain().1 - f64::EPSILON,
        ))
    })?;
    Ok(InequalityGaps {
        mink_gap: f.w2 - slice.w2,
        psi_gap: f.w2 - space.psi_of_volume(f.volume)?,
        genmink_gap: f.genmink_w2 - slice.genmink_w2(),
        isoperimetric_gap: f.volume - slice.volume,
    })
}

/// Everything the audit can say about a single state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateAudit {
    pub functionals: Functionals,
    pub gaps: Result<InequalityGaps, AmbientError>,
    pub hk_gap: Result<f64, GeometryError>,
    /// `∫ s`, the scale of the Heintze–Karcher gap.
    pub support_integral: f64,
    pub mink1_residual: f64,
    pub mink2_residual: f64,
    /// `∫ ϑ′`, the scale of both residuals.
    pub residual_scale: f64,
    pub umbilicity: f64,
    pub kappa_min: f64,
}

pub fn audit_state(space: &WarpedSpace, state: &FlowState) -> StateAudit {
    let grid = state.grid();
    let geom = state.geometry();
    let functionals = functionals(grid, space, state.u().values(), geom);
    StateAudit {
        functionals,
        gaps: inequality_gaps(space, &functionals),
        hk_gap: heintze_karcher_gap(grid, geom),
        support_integral: support_integral(grid, geom),
        mink1_residual: minkowski_residual_1(grid, geom),
        mink2_residual: minkowski_residual_2(grid, space, geom),
        residual_scale: minkowski_scale(grid, geom),
        umbilicity: geom.umbilicity(),
        kappa_min: geom.kappa_min(),
    }
}

/// Gaps reconstructed from a single record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordGaps {
    pub t: f64,
    pub mink_gap: Option<f64>,
    pub psi_gap: Option<f64>,
    /// Only when `ϑ″ = ϑ`, where `W₂` and `∫H₁ − |M̂|` coincide.
    pub genmink_gap: Option<f64>,
    pub isoperimetric_gap: Option<f64>,
}

fn record_gaps(space: &WarpedSpace, rec: &StepRecord) -> RecordGaps {
    let slice = space
        .slice_radius_for_area(rec.area)
        .ok()
        .and_then(|r| space.slice_functionals(r).ok());
    let hyperbolic = space.warp().family().hyperbolic_coefficients().is_some();
    RecordGaps {
        t: rec.t,
        mink_gap: slice.map(|s| rec.w2 - s.w2),
        psi_gap: space.psi_of_volume(rec.volume).ok().map(|p| rec.w2 - p),
        genmink_gap: if hyperbolic { slice.map(|s| rec.w2 - s.genmink_w2()) } else { None },
        isoperimetric_gap: slice.map(|s| rec.volume - s.volume),
    }
}

/// Per-quantity tolerances for trajectory verdicts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditTolerances {
    /// Relative slack per recorded step for monotone quantities.
    pub per_step_rel: f64,
    /// Absolute slack per recorded step for the barriers `min u`, `max u`.
    pub barrier_abs: f64,
    /// `osc Θ` below this value is treated as converged.
    pub osc_floor: f64,
    /// Maximal relative drift of the enclosed volume along the GL flow.
    pub volume_drift_rel: f64,
    /// `|d log|M| / dt − 1|` bound along IMCF.
    pub imcf_rate: f64,
    /// Relative per-step slack of `e^{−(n−1)t/n}(W₂ − φ(|M|))` along IMCF.
    pub imcf_monotone_rel: f64,
    /// Allowed growth of `max |ψ|` relative to its initial value.
    pub speed_factor: f64,
    /// `κ_min(t) ≥ factor · min(κ_min(0), ϑ′/ϑ(r_∞))`.
    pub convexity_factor: f64,
}

impl Default for AuditTolerances {
    fn default() -> Self {
        Self {
            per_step_rel: 1e-8,
            barrier_abs: 1e-10,
            osc_floor: 1e-7,
            volume_drift_rel: 1e-7,
            imcf_rate: 1e-6,
            imcf_monotone_rel: 1e-7,
            speed_factor: 1.05,
            convexity_factor: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expectation {
    Nondecreasing,
    Nonincreasing,
    StrictlyDecreasing,
    Constant,
    UnitLogRate,
    Bounded,
}

impl Expectation {
    fn name(&self) -> &'static str {
        match self {
            Expectation::Nondecreasing => "nondecreasing",
            Expectation::Nonincreasing => "nonincreasing",
            Expectation::StrictlyDecreasing => "strictly-decreasing",
            Expectation::Constant => "constant",
            Expectation::UnitLogRate => "unit-log-rate",
            Expectation::Bounded => "bounded",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub quantity: &'static str,
    pub expectation: Expectation,
    pub passed: bool,
    /// Largest violation in the quantity's own (relative or absolute) units;
    /// non-positive when nothing was violated.
    pub worst: f64,
    /// Record index at which `worst` occurred.
    pub worst_record: Option<usize>,
    pub tolerance: f64,
    pub note: Option<&'static str>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub flow: FlowType,
    pub records: usize,
    pub verdicts: Vec<Verdict>,
    pub initial_gaps: RecordGaps,
    pub final_gaps: RecordGaps,
    pub umbilicity_initial: f64,
    pub umbilicity_final: f64,
    pub max_abs_mink1_residual: f64,
    pub max_abs_mink2_residual: f64,
    /// Least-squares slope of `−log osc u` against `t` over records above the
    /// floor; an observation, not a check.
    pub osc_decay_rate: Option<f64>,
    /// Whether `∫ϑ′/H₁ ≥ ∫s` is known in this space or only assumed.
    pub hk_hypothesis: &'static str,
    /// State-based extras filled in by callers holding the final state.
    pub hk_gap_final: Option<f64>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    pub fn verdict(&self, quantity: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.quantity == quantity)
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "audit: {} flow, {} records", self.flow.name(), self.records);
        for v in &self.verdicts {
            let _ = write!(
                s,
                "  [{}] {} {} (worst {:.3e}, tol {:.1e}",
                if v.passed { "PASS" } else { "FAIL" },
                v.quantity,
                v.expectation.name(),
                v.worst,
                v.tolerance
            );
            if let Some(k) = v.worst_record {
                let _ = write!(s, ", record {k}");
            }
            s.push(')');
            if let Some(n) = v.note {
                let _ = write!(s, " [{n}]");
            }
            s.push('\n');
        }
        for (label, g) in [("initial", &self.initial_gaps), ("final", &self.final_gaps)] {
            let _ = writeln!(
                s,
                "  gaps ({label}, t = {}): mink {} psi {} genmink {} isoperimetric {}",
                g.t,
                opt(g.mink_gap),
                opt(g.psi_gap),
                opt(g.genmink_gap),
                opt(g.isoperimetric_gap)
            );
        }
        let _ = writeln!(
            s,
            "  umbilicity: initial {:.6e}, final {:.6e}",
            self.umbilicity_initial, self.umbilicity_final
        );
        let _ = writeln!(
            s,
            "  max |residual|: mink1 {:.3e}, mink2 {:.3e}",
            self.max_abs_mink1_residual, self.max_abs_mink2_residual
        );
        if let Some(r) = self.osc_decay_rate {
            let _ = writeln!(s, "  observed osc u decay rate: {r:.6}");
        }
        let _ = writeln!(s, "  heintze-karcher: {}", self.hk_hypothesis);
        if let Some(g) = self.hk_gap_final {
            let _ = writeln!(s, "  hk gap (final state): {g:.6e}");
        }
        let _ = writeln!(s, "  overall: {}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }

    /// Flat `key = value` lines.
    pub fn render_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "flow = {}", self.flow.name());
        let _ = writeln!(s, "records = {}", self.records);
        let _ = writeln!(s, "passed = {}", self.passed());
        for v in &self.verdicts {
            let k = format!("verdict.{}.{}", v.quantity, v.expectation.name());
            let _ = writeln!(s, "{k}.passed = {}", v.passed);
            let _ = writeln!(s, "{k}.worst = {:.16e}", v.worst);
            let _ = writeln!(s, "{k}.tolerance = {:.16e}", v.tolerance);
            if let Some(r) = v.worst_record {
                let _ = writeln!(s, "{k}.worst_record = {r}");
            }
        }
        for (label, g) in [("initial", &self.initial_gaps), ("final", &self.final_gaps)] {
            let _ = writeln!(s, "gaps.{label}.t = {:.16e}", g.t);
            for (name, val) in [
                ("mink", g.mink_gap),
                ("psi", g.psi_gap),
                ("genmink", g.genmink_gap),
                ("isoperimetric", g.isoperimetric_gap),
            ] {
                if let Some(x) = val {
                    let _ = writeln!(s, "gaps.{label}.{name} = {x:.16e}");
                }
            }
        }
        let _ = writeln!(s, "umbilicity.initial = {:.16e}", self.umbilicity_initial);
        let _ = writeln!(s, "umbilicity.final = {:.16e}", self.umbilicity_final);
        let _ = writeln!(s, "residual.mink1.max_abs = {:.16e}", self.max_abs_mink1_residual);
        let _ = writeln!(s, "residual.mink2.max_abs = {:.16e}", self.max_abs_mink2_residual);
        if let Some(r) = self.osc_decay_rate {
            let _ = writeln!(s, "osc_u.decay_rate = {r:.16e}");
        }
        let _ = writeln!(s, "hk.hypothesis = {}", self.hk_hypothesis);
        if let Some(g) = self.hk_gap_final {
            let _ = writeln!(s, "hk.gap_final = {g:.16e}");
        }
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "n/a".into())
}

fn hk_label(space: &WarpedSpace) -> &'static str {
    if *space.warp().family() == WarpFamily::Sinh && space.base() == BaseManifold::RoundSphere {
        "known (substatic space)"
    } else {
        "hypothesis assumed"
    }
}

struct Monotone<'a> {
    records: &'a [StepRecord],
}

impl Monotone<'_> {
    /// Relative per-step check; `sign = +1` for nondecreasing, `−1` for
    /// nonincreasing.
    fn relative(&self, quantity: &'static str, get: fn(&StepRecord) -> f64, sign: f64, tol: f64) -> Verdict {
        let mut worst = f64::NEG_INFINITY;
        let mut at = None;
        for (k, w) in self.records.windows(2).enumerate() {
            let (a, b) = (get(&w[0]), get(&w[1]));
            let viol = sign * (a - b) / a.abs().max(f64::MIN_POSITIVE);
            if viol > worst {
                worst = viol;
                at = Some(k + 1);
            }
        }
        Verdict {
            quantity,
            expectation: if sign > 0.0 { Expectation::Nondecreasing } else { Expectation::Nonincreasing },
            passed: worst <= tol,
            worst,
            worst_record: at,
            tolerance: tol,
            note: None,
        }
    }

    fn absolute(&self, quantity: &'static str, get: fn(&StepRecord) -> f64, sign: f64, tol: f64) -> Verdict {
        let mut worst = f64::NEG_INFINITY;
        let mut at = None;
        for (k, w) in self.records.windows(2).enumerate() {
            let viol = sign * (get(&w[0]) - get(&w[1]));
            if viol > worst {
                worst = viol;
                at = Some(k + 1);
            }
        }
        Verdict {
            quantity,
            expectation: if sign > 0.0 { Expectation::Nondecreasing } else { Expectation::Nonincreasing },
            passed: worst <= tol,
            worst,
            worst_record: at,
            tolerance: tol,
            note: None,
        }
    }
}

/// Renders verdicts from a record stream alone.
pub fn audit_trajectory(
    records: &[StepRecord],
    flow: FlowType,
    space: &WarpedSpace,
    tol: &AuditTolerances,
) -> Result<AuditReport, AuditError> {
    if records.len() < 2 {
        return Err(AuditError::TooFewRecords(records.len()));
    }
    let first = &records[0];
    let last = &records[records.len() - 1];
    let mono = Monotone { records };
    let mut verdicts = Vec::new();
    let hk = hk_label(space);

    match flow {
        FlowType::LocallyConstrained => {
            verdicts.push(mono.relative("area", |r| r.area, 1.0, tol.per_step_rel));
            verdicts.push(mono.relative("w2", |r| r.w2, -1.0, tol.per_step_rel));
            let assumptions = space.check_assumptions(crate::ambient::DEFAULT_ASSUMPTION_SAMPLES);
            if assumptions.branch == CurvatureBranch::NonNegative {
                let mut v = mono.relative("volume", |r| r.volume, 1.0, tol.per_step_rel);
                if hk != "known (substatic space)" {
                    v.note = Some("hypothesis assumed");
                }
                verdicts.push(v);
            }
            verdicts.push(osc_theta_verdict(records, tol));
            verdicts.push(mono.absolute("min_u", |r| r.min_u, 1.0, tol.barrier_abs));
            verdicts.push(mono.absolute("max_u", |r| r.max_u, -1.0, tol.barrier_abs));
            verdicts.push(speed_verdict(records, tol));
            verdicts.push(convexity_verdict(records, space, tol));
        }
        FlowType::GuanLi => {
            let v0 = first.volume;
            let (mut worst, mut at) = (0.0f64, None);
            for (k, r) in records.iter().enumerate() {
                let d = (r.volume - v0).abs() / v0.abs().max(f64::MIN_POSITIVE);
                if d > worst {
                    worst = d;
                    at = Some(k);
                }
            }
            verdicts.push(Verdict {
                quantity: "volume",
                expectation: Expectation::Constant,
                passed: worst <= tol.volume_drift_rel,
                worst,
                worst_record: at,
                tolerance: tol.volume_drift_rel,
                note: None,
            });
        }
        FlowType::InverseMean => {
            let (mut worst, mut at) = (0.0f64, None);
            for (k, w) in records.windows(2).enumerate() {
                let dt = w[1].t - w[0].t;
                if dt <= 0.0 {
                    continue;
                }
                let rate = (w[1].area / w[0].area).ln() / dt;
                let d = (rate - 1.0).abs();
                if d > worst {
                    worst = d;
                    at = Some(k + 1);
                }
            }
            verdicts.push(Verdict {
                quantity: "log_area_rate",
                expectation: Expectation::UnitLogRate,
                passed: worst <= tol.imcf_rate,
                worst,
                worst_record: at,
                tolerance: tol.imcf_rate,
                note: None,
            });
            verdicts.push(imcf_quantity_verdict(records, space, tol)?);
        }
    }

    let osc_decay_rate = decay_rate(records, tol.osc_floor);
    Ok(AuditReport {
        flow,
        records: records.len(),
        verdicts,
        initial_gaps: record_gaps(space, first),
        final_gaps: record_gaps(space, last),
        umbilicity_initial: first.umbilicity,
        umbilicity_final: last.umbilicity,
        max_abs_mink1_residual: records.iter().map(|r| r.mink1_residual.abs()).fold(0.0, f64::max),
        max_abs_mink2_residual: records.iter().map(|r| r.mink2_residual.abs()).fold(0.0, f64::max),
        osc_decay_rate,
        hk_hypothesis: hk,
        hk_gap_final: None,
    })
}

/// `osc Θ` must strictly decrease (up to relative slack) while above the floor.
fn osc_theta_verdict(records: &[StepRecord], tol: &AuditTolerances) -> Verdict {
    let mut worst = f64::NEG_INFINITY;
    let mut at = None;
    let mut passed = true;
    for (k, w) in records.windows(2).enumerate() {
        let (a, b) = (w[0].osc_theta, w[1].osc_theta);
        if a <= tol.osc_floor {
            continue;
        }
        let viol = (b - a) / a;
        if viol > worst {
            worst = viol;
            at = Some(k + 1);
        }
        // strict: equal consecutive values above the floor also fail
        if viol > tol.per_step_rel || (b == a && w[1].t > w[0].t) {
            passed = false;
        }
    }
    Verdict {
        quantity: "osc_theta",
        expectation: Expectation::StrictlyDecreasing,
        passed,
        worst: if worst.is_finite() { worst } else { 0.0 },
        worst_record: at,
        tolerance: tol.per_step_rel,
        note: None,
    }
}

fn speed_verdict(records: &[StepRecord], tol: &AuditTolerances) -> Verdict {
    let bound = records[0].speed_max * tol.speed_factor;
    let (mut worst, mut at) = (f64::NEG_INFINITY, None);
    for (k, r) in records.iter().enumerate() {
        let excess = r.speed_max - bound;
        if excess > worst {
            worst = excess;
            at = Some(k);
        }
    }
    Verdict {
        quantity: "speed_max",
        expectation: Expectation::Bounded,
        passed: worst <= SPEED_ABS_SLACK,
        worst,
        worst_record: at,
        tolerance: tol.speed_factor,
        note: Some("bound = factor x initial value"),
    }
}

fn convexity_verdict(records: &[StepRecord], space: &WarpedSpace, tol: &AuditTolerances) -> Verdict {
    let last = &records[records.len() - 1];
    let r_inf = 0.5 * (last.min_u + last.max_u);
    let j = space.warp().jet(r_inf);
    let floor = tol.convexity_factor * records[0].kappa_min.min(j.d1 / j.value);
    let (mut worst, mut at) = (f64::NEG_INFINITY, None);
    for (k, r) in records.iter().enumerate() {
        let d = floor - r.kappa_min;
        if d > worst {
            worst = d;
            at = Some(k);
        }
    }
    Verdict {
        quantity: "kappa_min",
        expectation: Expectation::Bounded,
        passed: worst < 0.0,
        worst,
        worst_record: at,
        tolerance: tol.convexity_factor,
        note: Some("floor = factor x min(kappa_min(0), slice curvature)"),
    }
}

fn imcf_quantity_verdict(records: &[StepRecord], space: &WarpedSpace, tol: &AuditTolerances) -> Result<Verdict, AuditError> {
    let n = space.dim() as f64;
    let c = (n - 1.0) / n;
    let mut q = Vec::with_capacity(records.len());
    for r in records {
        let phi = space.phi_of_area(r.area, SliceFunctional::W2)?;
        let damp = (-c * r.t).exp();
        q.push((damp * (r.w2 - phi), damp * r.w2.abs()));
    }
    let (mut worst, mut at) = (f64::NEG_INFINITY, None);
    for (k, w) in q.windows(2).enumerate() {
        let viol = (w[1].0 - w[0].0) / w[0].1.max(f64::MIN_POSITIVE);
        if viol > worst {
            worst = viol;
            at = Some(k + 1);
        }
    }
    Ok(Verdict {
        quantity: "imcf_damped_mink_gap",
        expectation: Expectation::Nonincreasing,
        passed: worst <= tol.imcf_monotone_rel,
        worst,
        worst_record: at,
        tolerance: tol.imcf_monotone_rel,
        note: Some("e^{-(n-1)t/n}(W2 - phi(area))"),
    })
}

fn decay_rate(records: &[StepRecord], floor: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.osc_u > floor)
        .map(|r| (r.t, r.osc_u.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let m = pts.len() as f64;
    let (st, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mt, my) = (st / m, sy / m);
    let (mut num, mut den) = (0.0, 0.0);
    for (t, y) in &pts {
        num += (t - mt) * (y - my);
        den += (t - mt) * (t - mt);
    }
    (den > 0.0).then(|| -num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ambient::WarpFunction;
    use crate::basegrid::Chart;
    use crate::geometry;
    use std::f64::consts::PI;

    fn hyperbolic() -> WarpedSpace {
        WarpedSpace::surface(WarpFunction::new(WarpFamily::Sinh, 0.0, 5.0).unwrap(), BaseManifold::RoundSphere)
    }

    #[test]
    fn slice_functionals_match_ambient() {
        let sp = hyperbolic();
        let grid = BaseGrid::new(Chart::AxisymSphere, 64).unwrap();
        let u = grid.constant(1.0);
        let geo = geometry::compute(&grid, &sp, &u).unwrap();
        let f = functionals(&grid, &sp, u.values(), &geo);
        let s = sp.slice_functionals(1.0).unwrap();
        for (a, b) in [(f.area, s.area), (f.volume, s.volume), (f.w2, s.w2), (f.int_h1, s.int_h1)] {
            assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} vs {b}");
        }
        assert!((f.volume - PI * (2.0f64.sinh() - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn residuals_and_gaps_vanish_on_slices() {
        let sp = hyperbolic();
        let grid = BaseGrid::new(Chart::AxisymSphere, 32).unwrap();
        let u = grid.constant(1.2);
        let geo = geometry::compute(&grid, &sp, &u).unwrap();
        assert!(minkowski_residual_1(&grid, &geo).abs() < 1e-12);
        assert!(minkowski_residual_2(&grid, &sp, &geo).abs() < 1e-12);
        assert!(heintze_karcher_gap(&grid, &geo).unwrap().abs() < 1e-12);
        let f = functionals(&grid, &sp, u.values(), &geo);
        let g = inequality_gaps(&sp, &f).unwrap();
        for x in [g.mink_gap, g.psi_gap, g.genmink_gap, g.isoperimetric_gap] {
            assert!(x.abs() <= 1e-9 * f.w2.abs(), "{g:?}");
        }
    }

    #[test]
    fn ricci_of_normal_and_gradient_vanishes_in_hyperbolic_space() {
        let sp = hyperbolic();
        let grid = BaseGrid::new(Chart::AxisymSphere, 64).unwrap();
        let u = grid.field(|y| 1.0 + 0.1 * (2.0 * y[0]).cos());
        let geo = geometry::compute(&grid, &sp, &u).unwrap();
        for i in 0..grid.len() {
            assert!(ricci_normal_grad_theta(&sp, &geo, i).abs() < 1e-13);
        }
    }

    #[test]
    fn ricci_term_agrees_with_ambient_bilinear_form() {
        // cosh warp over the torus is not Einstein; compare with AmbientVector route
        let sp = WarpedSpace::surface(WarpFunction::new(WarpFamily::Cosh, 0.0, 5.0).unwrap(), BaseManifold::FlatTorus);
        let grid = BaseGrid::new(Chart::Torus2d, 16).unwrap();
        let u = grid.field(|y| 1.0 + 0.1 * y[0].sin() * y[1].cos());
        let geo = geometry::compute(&grid, &sp, &u).unwrap();
        let p = grid.partials(&u);
        for i in (0..grid.len()).step_by(7) {
            let (ui, th, v) = (u.values()[i], geo.theta[i], geo.v[i]);
            let (u1, u2) = (p.d1[i], p.d2[i]);
            let g = geo.g[i];
            let det = g.det();
            let up1 = (g.yy * u1 - g.xy * u2) / det;
            let up2 = (-g.xy * u1 + g.xx * u2) / det;
            // torus: σ-orthonormal components equal chart components
            let nu = crate::ambient::AmbientVector {
                radial: 1.0 / v,
                base: vec![-u1 / (v * th * th), -u2 / (v * th * th)],
            };
            let grad = crate::ambient::AmbientVector {
                radial: th * (up1 * u1 + up2 * u2),
                base: vec![th * up1, th * up2],
            };
            let expected = sp.ricci(ui, &nu, &grad).unwrap();
            assert!((ricci_normal_grad_theta(&sp, &geo, i) - expected).abs() < 1e-13);
            // ν is a unit normal and ∇Θ is tangent
            assert!((sp.metric(ui, &nu, &nu).unwrap() - 1.0).abs() < 1e-13);
            assert!(sp.metric(ui, &nu, &grad).unwrap().abs() < 1e-13);
        }
    }

    #[test]
    fn oscillation_of_theta() {
        let sp = hyperbolic();
        let osc = theta_oscillation(&sp, &[1.0, 2.0, 1.5]);
        assert!((osc - (2.0f64.cosh() - 1.0f64.cosh())).abs() < 1e-14);
    }

    fn rec(t: f64, area: f64, w2: f64, volume: f64, osc: f64) -> StepRecord {
        StepRecord {
            t,
            dt: 0.1,
            area,
            volume,
            w2,
            osc_u: osc,
            osc_theta: osc,
            min_u: 1.0,
            max_u: 1.0 + osc,
            kappa_min: 1.0,
            kappa_max: 1.0,
            speed_max: 0.0,
            umbilicity: 0.0,
            mink1_residual: 0.0,
            mink2_residual: 0.0,
        }
    }

    #[test]
    fn too_few_records() {
        let sp = hyperbolic();
        let r = vec![rec(0.0, 1.0, 1.0, 1.0, 0.0)];
        assert_eq!(
            audit_trajectory(&r, FlowType::GuanLi, &sp, &AuditTolerances::default()).unwrap_err(),
            AuditError::TooFewRecords(1)
        );
    }

    #[test]
    fn violations_are_reported_with_record_index() {
        let sp = hyperbolic();
        let recs = vec![
            rec(0.0, 20.0, 18.0, 5.0, 0.1),
            rec(0.1, 20.5, 17.9, 5.1, 0.05),
            rec(0.2, 20.4, 18.2, 5.2, 0.06),
        ];
        let rep = audit_trajectory(&recs, FlowType::LocallyConstrained, &sp, &AuditTolerances::default()).unwrap();
        let area = rep.verdict("area").unwrap();
        assert!(!area.passed);
        assert_eq!(area.worst_record, Some(2));
        assert!(!rep.verdict("w2").unwrap().passed);
        assert!(!rep.verdict("osc_theta").unwrap().passed);
        assert!(rep.verdict("volume").unwrap().passed);
        assert!(!rep.passed());
        let text = rep.render_text();
        assert!(text.contains("[FAIL] area"));
        assert!(rep.render_kv().contains("verdict.area.nondecreasing.passed = false"));
    }
}
