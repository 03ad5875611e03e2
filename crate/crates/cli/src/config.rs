//! Run configuration: a flat TOML file with dotted keys.
//!
//! ```toml
//! space.warp = "sinh"          # sinh | cosh | combination | affine | polynomial
//! space.alpha = 1.0            # combination only
//! space.beta = 0.5             # combination only
//! space.shift = 0.0            # affine only
//! space.coeffs = [1.0, 1.0]    # polynomial only, increasing degree
//! space.a = 0.0
//! space.b = 5.0
//! space.base = "sphere"        # sphere (axisymmetric chart) | torus
//! space.resolution = 128
//!
//! flow.type = "lcf-h2h1"       # lcf-h2h1 | imcf | gl
//! flow.cfl = 0.2
//! flow.t_max = 50.0
//! flow.tol_converged = 1e-8
//! flow.max_steps = 10000000
//! flow.record_every = 1
//! flow.integrator = "rk4"      # rk4 | rkc
//! flow.rkc_max_dt = 0.1
//!
//! init.kind = "random"         # slice | random
//! init.r0 = 1.0
//! init.eps = 0.1
//! init.seed = 7
//!
//! output.csv = "run.csv"
//! output.report = "run.report.txt"
//! output.report_kv = "run.report.kv"
//! output.checkpoint = "run.ckpt"
//! output.checkpoint_every = 1000
//!
//! sweep.workers = 1
//! sweep.dir = "sweep"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;
use warpflow_core::{
    BaseGrid, BaseManifold, Chart, FlowConfig, FlowState, FlowType, Integrator, WarpFamily, WarpFunction,
    WarpedSpace,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn invalid<T>(path: &str, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid {
        path: path.to_string(),
        message: message.into(),
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    space: RawSpace,
    #[serde(default)]
    flow: RawFlow,
    #[serde(default)]
    init: RawInit,
    #[serde(default)]
    output: RawOutput,
    #[serde(default)]
    sweep: RawSweep,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpace {
    warp: String,
    alpha: Option<f64>,
    beta: Option<f64>,
    shift: Option<f64>,
    coeffs: Option<Vec<f64>>,
    a: f64,
    b: f64,
    base: String,
    resolution: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFlow {
    #[serde(rename = "type")]
    flow_type: Option<String>,
    cfl: Option<f64>,
    t_max: Option<f64>,
    tol_converged: Option<f64>,
    max_steps: Option<usize>,
    record_every: Option<usize>,
    integrator: Option<String>,
    rkc_max_dt: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInit {
    kind: Option<String>,
    r0: Option<f64>,
    eps: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    csv: Option<PathBuf>,
    report: Option<PathBuf>,
    report_kv: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    workers: Option<usize>,
    dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceConfig {
    pub family: WarpFamily,
    pub a: f64,
    pub b: f64,
    pub base: BaseManifold,
    pub resolution: usize,
}

impl SpaceConfig {
    pub fn space(&self) -> WarpedSpace {
        // validated at load time
        let warp = WarpFunction::new(self.family.clone(), self.a, self.b).expect("validated warp");
        WarpedSpace::surface(warp, self.base)
    }

    pub fn chart(&self) -> Chart {
        match self.base {
            BaseManifold::FlatTorus => Chart::Torus2d,
            BaseManifold::RoundSphere => Chart::AxisymSphere,
        }
    }

    pub fn grid(&self) -> Arc<BaseGrid> {
        Arc::new(BaseGrid::new(self.chart(), self.resolution).expect("validated resolution"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitConfig {
    Slice { r0: f64 },
    Random { r0: f64, eps: f64, seed: u64 },
}

impl InitConfig {
    pub fn r0(&self) -> f64 {
        match *self {
            InitConfig::Slice { r0 } | InitConfig::Random { r0, .. } => r0,
        }
    }

    pub fn build(&self, space: &WarpedSpace, grid: Arc<BaseGrid>) -> Result<FlowState, warpflow_core::FlowError> {
        match *self {
            InitConfig::Slice { r0 } => FlowState::init_slice(space, grid, r0),
            InitConfig::Random { r0, eps, seed } => FlowState::init_random(space, grid, r0, eps, seed),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutputConfig {
    pub csv: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub report_kv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub workers: usize,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub space: SpaceConfig,
    pub flow: FlowConfig,
    pub init: InitConfig,
    pub output: OutputConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses and validates config text; relative paths are joined to `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let space = parse_space(&raw.space)?;
        let flow = parse_flow(&raw.flow)?;
        let init = parse_init(&raw.init, &space)?;
        let resolve = |p: Option<PathBuf>| p.map(|p| if p.is_absolute() { p } else { base_dir.join(p) });
        let checkpoint_every = raw.output.checkpoint_every.unwrap_or(0);
        if checkpoint_every > 0 && !checkpoint_every.is_multiple_of(flow.record_every) {
            return invalid(
                "output.checkpoint_every",
                format!("{checkpoint_every} must be a multiple of flow.record_every = {}", flow.record_every),
            );
        }
        if checkpoint_every > 0 && raw.output.checkpoint.is_none() {
            return invalid("output.checkpoint", "required when output.checkpoint_every > 0");
        }
        let output = OutputConfig {
            csv: resolve(raw.output.csv),
            report: resolve(raw.output.report),
            report_kv: resolve(raw.output.report_kv),
            checkpoint: resolve(raw.output.checkpoint),
            checkpoint_every,
        };
        let workers = raw.sweep.workers.unwrap_or(1);
        if workers == 0 {
            return invalid("sweep.workers", "must be at least 1");
        }
        let sweep = SweepConfig {
            workers,
            dir: resolve(raw.sweep.dir).unwrap_or_else(|| base_dir.join("sweep")),
        };
        Ok(Self {
            space,
            flow,
            init,
            output,
            sweep,
        })
    }
}

impl RunConfig {
    /// Canonical text of the space, flow and init sections, enough to
    /// re-audit a run's records.
    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        let sp = &self.space;
        let (warp, params) = match &sp.family {
            WarpFamily::Sinh => ("sinh", String::new()),
            WarpFamily::Cosh => ("cosh", String::new()),
            WarpFamily::Combination { alpha, beta } => {
                ("combination", format!("space.alpha = {alpha:?}\nspace.beta = {beta:?}\n"))
            }
            WarpFamily::Affine { shift } => ("affine", format!("space.shift = {shift:?}\n")),
            WarpFamily::Polynomial { coeffs } => ("polynomial", format!("space.coeffs = {coeffs:?}\n")),
        };
        s += &format!("space.warp = \"{warp}\"\n{params}");
        s += &format!("space.a = {:?}\nspace.b = {:?}\n", sp.a, sp.b);
        let base = match sp.base {
            BaseManifold::FlatTorus => "torus",
            BaseManifold::RoundSphere => "sphere",
        };
        s += &format!("space.base = \"{base}\"\nspace.resolution = {}\n", sp.resolution);
        let f = &self.flow;
        s += &format!("flow.type = \"{}\"\n", f.flow_type.name());
        s += &format!("flow.cfl = {:?}\nflow.t_max = {:?}\n", f.cfl, f.t_max);
        s += &format!("flow.tol_converged = {:?}\nflow.max_steps = {}\n", f.tol_converged, f.max_steps);
        s += &format!("flow.record_every = {}\n", f.record_every);
        match f.integrator {
            Integrator::Rk4 => s += "flow.integrator = \"rk4\"\n",
            Integrator::Rkc { max_dt } => s += &format!("flow.integrator = \"rkc\"\nflow.rkc_max_dt = {max_dt:?}\n"),
        }
        match self.init {
            InitConfig::Slice { r0 } => s += &format!("init.kind = \"slice\"\ninit.r0 = {r0:?}\n"),
            InitConfig::Random { r0, eps, seed } => {
                s += &format!("init.kind = \"random\"\ninit.r0 = {r0:?}\ninit.eps = {eps:?}\ninit.seed = {seed}\n")
            }
        }
        s
    }
}

fn finite(path: &str, x: f64) -> Result<f64, ConfigError> {
    if x.is_finite() {
        Ok(x)
    } else {
        invalid(path, format!("{x} is not finite"))
    }
}

fn parse_space(raw: &RawSpace) -> Result<SpaceConfig, ConfigError> {
    let need = |name: &str, v: Option<f64>| -> Result<f64, ConfigError> {
        let path = format!("space.{name}");
        match v {
            Some(x) => finite(&path, x),
            None => invalid(&path, format!("required for warp = {:?}", raw.warp)),
        }
    };
    let family = match raw.warp.as_str() {
        "sinh" => WarpFamily::Sinh,
        "cosh" => WarpFamily::Cosh,
        "combination" => WarpFamily::Combination {
            alpha: need("alpha", raw.alpha)?,
            beta: need("beta", raw.beta)?,
        },
        "affine" => WarpFamily::Affine {
            shift: need("shift", raw.shift)?,
        },
        "polynomial" => match &raw.coeffs {
            Some(c) if !c.is_empty() => WarpFamily::Polynomial { coeffs: c.clone() },
            _ => return invalid("space.coeffs", "a non-empty list is required for warp = \"polynomial\""),
        },
        other => {
            return invalid(
                "space.warp",
                format!("unknown family {other:?} (expected sinh, cosh, combination, affine or polynomial)"),
            )
        }
    };
    let base = match raw.base.as_str() {
        "sphere" => BaseManifold::RoundSphere,
        "torus" => BaseManifold::FlatTorus,
        other => return invalid("space.base", format!("unknown base {other:?} (expected sphere or torus)")),
    };
    let (a, b) = (finite("space.a", raw.a)?, finite("space.b", raw.b)?);
    if !(a < b) {
        return invalid("space.b", format!("radial domain ({a}, {b}) is empty"));
    }
    if let Err(e) = WarpFunction::new(family.clone(), a, b) {
        return invalid("space.warp", e.to_string());
    }
    if raw.resolution < warpflow_core::basegrid::MIN_RESOLUTION {
        return invalid(
            "space.resolution",
            format!("{} is below the minimum {}", raw.resolution, warpflow_core::basegrid::MIN_RESOLUTION),
        );
    }
    Ok(SpaceConfig {
        family,
        a,
        b,
        base,
        resolution: raw.resolution,
    })
}

fn parse_flow(raw: &RawFlow) -> Result<FlowConfig, ConfigError> {
    let flow_type = match raw.flow_type.as_deref() {
        None => FlowType::LocallyConstrained,
        Some(s) => match FlowType::parse(s) {
            Some(t) => t,
            None => return invalid("flow.type", format!("unknown flow {s:?} (expected lcf-h2h1, imcf or gl)")),
        },
    };
    let mut c = FlowConfig::new(flow_type);
    if let Some(x) = raw.cfl {
        if !(x > 0.0 && x <= 0.5) {
            return invalid("flow.cfl", format!("{x} must lie in (0, 0.5]"));
        }
        c.cfl = x;
    }
    if let Some(x) = raw.t_max {
        if !(x > 0.0 && x.is_finite()) {
            return invalid("flow.t_max", format!("{x} must be positive"));
        }
        c.t_max = x;
    }
    if let Some(x) = raw.tol_converged {
        if !(x > 0.0 && x.is_finite()) {
            return invalid("flow.tol_converged", format!("{x} must be positive"));
        }
        c.tol_converged = x;
    }
    if let Some(x) = raw.max_steps {
        c.max_steps = x;
    }
    if let Some(x) = raw.record_every {
        if x == 0 {
            return invalid("flow.record_every", "must be at least 1");
        }
        c.record_every = x;
    }
    c.integrator = match raw.integrator.as_deref() {
        None | Some("rk4") => {
            if raw.rkc_max_dt.is_some() {
                return invalid("flow.rkc_max_dt", "only valid with flow.integrator = \"rkc\"");
            }
            Integrator::Rk4
        }
        Some("rkc") => {
            let max_dt = raw.rkc_max_dt.unwrap_or(0.1);
            if !(max_dt > 0.0 && max_dt.is_finite()) {
                return invalid("flow.rkc_max_dt", format!("{max_dt} must be positive"));
            }
            Integrator::Rkc { max_dt }
        }
        Some(s) => return invalid("flow.integrator", format!("unknown integrator {s:?} (expected rk4 or rkc)")),
    };
    c.validate().map_err(|e| ConfigError::Invalid {
        path: "flow".into(),
        message: e.to_string(),
    })?;
    Ok(c)
}

fn parse_init(raw: &RawInit, space: &SpaceConfig) -> Result<InitConfig, ConfigError> {
    let r0 = match raw.r0 {
        Some(x) => finite("init.r0", x)?,
        None => return invalid("init.r0", "required"),
    };
    let (a, b) = (space.a, space.b);
    if !(r0 > a && r0 < b) {
        return invalid("init.r0", format!("{r0} is outside the radial domain ({a}, {b})"));
    }
    match raw.kind.as_deref().unwrap_or("slice") {
        "slice" => {
            if raw.eps.is_some() || raw.seed.is_some() {
                return invalid("init.kind", "eps and seed are only valid with kind = \"random\"");
            }
            Ok(InitConfig::Slice { r0 })
        }
        "random" => {
            let eps = match raw.eps {
                Some(x) if x >= 0.0 && x.is_finite() => x,
                Some(x) => return invalid("init.eps", format!("{x} must be non-negative")),
                None => return invalid("init.eps", "required for kind = \"random\""),
            };
            let seed = match raw.seed {
                Some(s) => s,
                None => return invalid("init.seed", "required for kind = \"random\""),
            };
            if !(r0 - 2.0 * eps > a && r0 + 2.0 * eps < b) {
                return invalid(
                    "init.eps",
                    format!("r0 ± 2 eps = [{}, {}] leaves the radial domain ({a}, {b})", r0 - 2.0 * eps, r0 + 2.0 * eps),
                );
            }
            Ok(InitConfig::Random { r0, eps, seed })
        }
        other => invalid("init.kind", format!("unknown kind {other:?} (expected slice or random)")),
    }
}
