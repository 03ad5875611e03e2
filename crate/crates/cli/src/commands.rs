//! Subcommand implementations.

use std::cell::RefCell;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;
use warpflow_core::audit::{self, AuditReport, AuditTolerances, StateAudit};
use warpflow_core::flow::{self, run_digest};
use warpflow_core::{FlowState, RunVerdict, StepRecord, WarpedSpace};

use crate::config::{ConfigError, InitConfig, RunConfig};
use crate::records::{fmt_f64, read_records, ReadError, RecordWriter};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FLOW: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("flow: {0}")]
    Flow(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Records {
        path: PathBuf,
        #[source]
        source: ReadError,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(ConfigError::Read { .. }) => EXIT_IO,
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Flow(_) => EXIT_FLOW,
            CliError::Io { .. } | CliError::Records { .. } => EXIT_IO,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Sidecar holding the canonical config next to a run CSV.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".config.toml");
    PathBuf::from(s)
}

/// Result of a completed (possibly failed) run.
#[derive(Debug)]
pub struct RunOutcome {
    pub verdict: RunVerdict,
    pub records: Vec<StepRecord>,
    pub report: Option<AuditReport>,
    pub initial: StateAudit,
    pub final_audit: StateAudit,
    pub final_state: FlowState,
    pub eps_used: f64,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.verdict.is_error() {
            EXIT_FLOW
        } else {
            EXIT_OK
        }
    }
}

/// Runs one flow from `initial`, streaming records to `csv` when given and
/// writing checkpoints as configured. A non-empty `prefix` holds records of
/// an earlier run ending at `initial`; they are written first and the
/// duplicate record for `initial` is dropped.
fn run_flow(
    config: &RunConfig,
    space: &WarpedSpace,
    initial: FlowState,
    csv: Option<&Path>,
    checkpoint: Option<(&Path, usize)>,
    prefix: Vec<StepRecord>,
) -> Result<RunOutcome, CliError> {
    let initial_audit = audit::audit_state(space, &initial);
    let eps_used = initial.eps();
    let writer = match csv {
        Some(p) => Some(RecordWriter::new(create(p)?).map_err(|e| CliError::Io {
            path: p.to_path_buf(),
            source: e.into(),
        })?),
        None => None,
    };
    let mut writer = writer;
    if let Some(w) = writer.as_mut() {
        for rec in &prefix {
            w.write(rec).map_err(|e| CliError::Io {
                path: csv.unwrap_or(Path::new("")).to_path_buf(),
                source: e.into(),
            })?;
        }
    }
    let mut skip = !prefix.is_empty();
    let writer = RefCell::new(writer);
    let write_error: RefCell<Option<CliError>> = RefCell::new(None);
    let digest = run_digest(space, initial.grid(), &config.flow);
    let sink = |rec: &StepRecord| {
        if std::mem::take(&mut skip) {
            return;
        }
        if let Some(w) = writer.borrow_mut().as_mut() {
            if let Err(e) = w.write(rec) {
                write_error.borrow_mut().get_or_insert(CliError::Io {
                    path: csv.unwrap_or(Path::new("")).to_path_buf(),
                    source: e.into(),
                });
            }
        }
    };
    let observe = |state: &FlowState| {
        if let Some((path, every)) = checkpoint {
            if every > 0 && state.step_index.is_multiple_of(every) {
                // records up to the checkpoint must reach the disk first
                if let Some(w) = writer.borrow_mut().as_mut() {
                    if let Err(e) = w.flush() {
                        write_error.borrow_mut().get_or_insert(io_err(csv.unwrap_or(Path::new("")))(e));
                    }
                }
                if let Err(e) = write_checkpoint(path, state, &digest) {
                    write_error.borrow_mut().get_or_insert(e);
                }
            }
        }
    };
    let result = flow::run_observed(initial, &config.flow, space, sink, observe);
    if let Some(w) = writer.borrow_mut().as_mut() {
        w.flush().map_err(io_err(csv.unwrap_or(Path::new(""))))?;
    }
    if let Some(e) = write_error.into_inner() {
        return Err(e);
    }
    let records = if prefix.is_empty() {
        result.records
    } else {
        let mut all = prefix;
        all.extend(result.records.into_iter().skip(1));
        all
    };
    let report = if records.len() >= 2 {
        audit::audit_trajectory(&records, config.flow.flow_type, space, &AuditTolerances {
            osc_floor: 10.0 * config.flow.tol_converged,
            ..AuditTolerances::default()
        })
        .ok()
    } else {
        None
    };
    let final_audit = audit::audit_state(space, &result.final_state);
    let report = report.map(|mut r| {
        r.hk_gap_final = final_audit.hk_gap.clone().ok();
        r
    });
    Ok(RunOutcome {
        verdict: result.verdict,
        records,
        report,
        initial: initial_audit,
        final_audit,
        final_state: result.final_state,
        eps_used,
    })
}

fn write_checkpoint(path: &Path, state: &FlowState, digest: &str) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut w = create(&tmp)?;
    state.write_checkpoint(&mut w, digest).map_err(io_err(&tmp))?;
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Records of an interrupted run up to and including time `t`.
fn earlier_records(csv: &Path, t: f64) -> Result<Vec<StepRecord>, CliError> {
    let file = match File::open(csv) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(csv)(e)),
    };
    let mut records = read_records(BufReader::new(file)).map_err(|source| CliError::Records {
        path: csv.to_path_buf(),
        source,
    })?;
    records.retain(|r| r.t <= t);
    if records.last().is_some_and(|r| r.t == t) {
        Ok(records)
    } else {
        Ok(Vec::new())
    }
}

/// `warpflow run`. With `resume`, starts from the configured checkpoint.
pub fn cmd_run(config: &RunConfig, resume: bool) -> Result<RunOutcome, CliError> {
    let space = config.space.space();
    let grid = config.space.grid();
    let mut prefix = Vec::new();
    let initial = if resume {
        let path = config
            .output
            .checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Usage("--resume needs output.checkpoint".into()))?;
        let file = File::open(path).map_err(io_err(path))?;
        let digest = run_digest(&space, &grid, &config.flow);
        let state = FlowState::read_checkpoint(BufReader::new(file), &space, &digest).map_err(|e| match e {
            flow::CheckpointError::Io(source) => CliError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => CliError::Usage(format!("{}: {other}", path.display())),
        })?;
        if let Some(csv) = config.output.csv.as_deref() {
            prefix = earlier_records(csv, state.t)?;
        }
        state
    } else {
        config.init.build(&space, grid).map_err(|e| CliError::Flow(e.to_string()))?
    };
    let csv = config.output.csv.as_deref();
    if let Some(p) = csv {
        write_file(&sidecar_path(p), &config.to_toml())?;
    }
    let checkpoint = config.output.checkpoint.as_deref().map(|p| (p, config.output.checkpoint_every));
    let outcome = run_flow(config, &space, initial, csv, checkpoint, prefix)?;
    if let Some(report) = &outcome.report {
        if let Some(p) = &config.output.report {
            write_file(p, &report.render_text())?;
        }
        let kv = config
            .output
            .report_kv
            .clone()
            .or_else(|| config.output.report.as_ref().map(|p| p.with_extension("kv")));
        if let Some(p) = kv {
            write_file(&p, &report.render_kv())?;
        }
    }
    Ok(outcome)
}

/// `warpflow slice-table`: `r, area, volume, h1, w2` for `count` radii.
pub fn cmd_slice_table<W: Write>(
    config: &RunConfig,
    r_min: f64,
    r_max: f64,
    count: usize,
    out: W,
) -> Result<(), CliError> {
    let space = config.space.space();
    let (a, b) = space.domain();
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    if !(r_min <= r_max) {
        return Err(CliError::Usage(format!("--r-min {r_min} exceeds --r-max {r_max}")));
    }
    for r in [r_min, r_max] {
        if !space.warp().contains(r) {
            return Err(CliError::Usage(format!("radius {r} is outside the radial domain ({a}, {b})")));
        }
    }
    let mut w = csv::Writer::from_writer(out);
    let fail = |e: csv::Error| CliError::Io {
        path: PathBuf::from("<slice-table>"),
        source: e.into(),
    };
    w.write_record(["r", "area", "volume", "h1", "w2"]).map_err(fail)?;
    for k in 0..count {
        let r = if count == 1 {
            r_min
        } else {
            r_min + (r_max - r_min) * k as f64 / (count - 1) as f64
        };
        let s = space
            .slice_functionals(r)
            .map_err(|_| CliError::Usage(format!("radius {r} is outside the radial domain ({a}, {b})")))?;
        w.write_record([s.r, s.area, s.volume, s.h1, s.w2].map(fmt_f64)).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::Io {
        path: PathBuf::from("<slice-table>"),
        source: e,
    })
}

/// One row of a sweep summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub seed: u64,
    pub eps: f64,
    pub eps_used: Option<f64>,
    pub verdict: String,
    pub steps: Option<usize>,
    pub t_final: Option<f64>,
    pub audit_passed: Option<bool>,
    pub w2_initial: Option<f64>,
    pub support_initial: Option<f64>,
    pub umbilicity_initial: Option<f64>,
    pub mink_gap_initial: Option<f64>,
    pub psi_gap_initial: Option<f64>,
    pub genmink_gap_initial: Option<f64>,
    pub hk_gap_initial: Option<f64>,
    pub isoperimetric_gap_initial: Option<f64>,
    pub umbilicity_final: Option<f64>,
    pub mink_gap_final: Option<f64>,
    pub psi_gap_final: Option<f64>,
    pub hk_gap_final: Option<f64>,
    pub error: String,
}

pub const SWEEP_HEADER: [&str; 20] = [
    "seed",
    "eps",
    "eps_used",
    "verdict",
    "steps",
    "t_final",
    "audit_passed",
    "w2_initial",
    "support_initial",
    "umbilicity_initial",
    "mink_gap_initial",
    "psi_gap_initial",
    "genmink_gap_initial",
    "hk_gap_initial",
    "isoperimetric_gap_initial",
    "umbilicity_final",
    "mink_gap_final",
    "psi_gap_final",
    "hk_gap_final",
    "error",
];

impl SweepRow {
    fn failed(seed: u64, eps: f64, error: String) -> Self {
        Self {
            seed,
            eps,
            eps_used: None,
            verdict: "error".into(),
            steps: None,
            t_final: None,
            audit_passed: None,
            w2_initial: None,
            support_initial: None,
            umbilicity_initial: None,
            mink_gap_initial: None,
            psi_gap_initial: None,
            genmink_gap_initial: None,
            hk_gap_initial: None,
            isoperimetric_gap_initial: None,
            umbilicity_final: None,
            mink_gap_final: None,
            psi_gap_final: None,
            hk_gap_final: None,
            error,
        }
    }

    fn fields(&self) -> Vec<String> {
        let f = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
        vec![
            self.seed.to_string(),
            fmt_f64(self.eps),
            f(self.eps_used),
            self.verdict.clone(),
            self.steps.map(|s| s.to_string()).unwrap_or_default(),
            f(self.t_final),
            self.audit_passed.map(|b| b.to_string()).unwrap_or_default(),
            f(self.w2_initial),
            f(self.support_initial),
            f(self.umbilicity_initial),
            f(self.mink_gap_initial),
            f(self.psi_gap_initial),
            f(self.genmink_gap_initial),
            f(self.hk_gap_initial),
            f(self.isoperimetric_gap_initial),
            f(self.umbilicity_final),
            f(self.mink_gap_final),
            f(self.psi_gap_final),
            f(self.hk_gap_final),
            self.error.clone(),
        ]
    }
}

/// Per-run CSV name inside the sweep directory.
pub fn sweep_run_path(dir: &Path, seed: u64, eps: f64) -> PathBuf {
    dir.join(format!("run_eps{eps}_seed{seed}.csv"))
}

fn sweep_one(config: &RunConfig, seed: u64, eps: f64) -> Result<SweepRow, CliError> {
    let mut cfg = config.clone();
    cfg.init = InitConfig::Random {
        r0: config.init.r0(),
        eps,
        seed,
    };
    let space = cfg.space.space();
    let initial = match cfg.init.build(&space, cfg.space.grid()) {
        Ok(s) => s,
        Err(e) => return Ok(SweepRow::failed(seed, eps, e.to_string())),
    };
    let csv = sweep_run_path(&config.sweep.dir, seed, eps);
    write_file(&sidecar_path(&csv), &cfg.to_toml())?;
    let out = run_flow(&cfg, &space, initial, Some(&csv), None, Vec::new())?;
    let gap = |a: &StateAudit, f: fn(&audit::InequalityGaps) -> f64| a.gaps.as_ref().ok().map(f);
    let (i, fin) = (&out.initial, &out.final_audit);
    Ok(SweepRow {
        seed,
        eps,
        eps_used: Some(out.eps_used),
        verdict: out.verdict.name().to_string(),
        steps: Some(out.final_state.step_index),
        t_final: Some(out.final_state.t),
        audit_passed: out.report.as_ref().map(|r| r.passed()),
        w2_initial: Some(i.functionals.w2),
        support_initial: Some(i.support_integral),
        umbilicity_initial: Some(i.umbilicity),
        mink_gap_initial: gap(i, |g| g.mink_gap),
        psi_gap_initial: gap(i, |g| g.psi_gap),
        genmink_gap_initial: gap(i, |g| g.genmink_gap),
        hk_gap_initial: i.hk_gap.as_ref().ok().copied(),
        isoperimetric_gap_initial: gap(i, |g| g.isoperimetric_gap),
        umbilicity_final: Some(fin.umbilicity),
        mink_gap_final: gap(fin, |g| g.mink_gap),
        psi_gap_final: gap(fin, |g| g.psi_gap),
        hk_gap_final: fin.hk_gap.as_ref().ok().copied(),
        error: match &out.verdict {
            RunVerdict::Error(e) => e.to_string(),
            _ => String::new(),
        },
    })
}

/// `warpflow sweep`: every `(eps, seed)` pair, `eps` outermost. Returns the
/// summary rows in that order; the summary CSV goes to `sweep.dir`.
pub fn cmd_sweep(config: &RunConfig, seeds: &[u64], eps_list: &[f64]) -> Result<Vec<SweepRow>, CliError> {
    if seeds.is_empty() || eps_list.is_empty() {
        return Err(CliError::Usage("--seeds and --eps must be non-empty".into()));
    }
    if let Some(e) = eps_list.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(CliError::Usage(format!("eps {e} must be non-negative")));
    }
    let (a, b) = (config.space.a, config.space.b);
    let r0 = config.init.r0();
    if let Some(e) = eps_list.iter().find(|e| !(r0 - 2.0 * **e > a && r0 + 2.0 * **e < b)) {
        return Err(CliError::Usage(format!(
            "eps {e}: r0 ± 2 eps leaves the radial domain ({a}, {b})"
        )));
    }
    fs::create_dir_all(&config.sweep.dir).map_err(io_err(&config.sweep.dir))?;
    let jobs: Vec<(u64, f64)> = eps_list
        .iter()
        .flat_map(|&e| seeds.iter().map(move |&s| (s, e)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepRow, CliError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let workers = config.sweep.workers.min(jobs.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= jobs.len() {
                    break;
                }
                let (seed, eps) = jobs[k];
                let row = sweep_one(config, seed, eps);
                results.lock().expect("sweep results")[k] = Some(row);
            });
        }
    });
    let mut rows = Vec::with_capacity(jobs.len());
    for r in results.into_inner().expect("sweep results") {
        rows.push(r.expect("every job ran")?);
    }
    let path = config.sweep.dir.join("summary.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let fail = |e: csv::Error| CliError::Io {
        path: path.clone(),
        source: e.into(),
    };
    w.write_record(SWEEP_HEADER).map_err(fail)?;
    for row in &rows {
        w.write_record(row.fields()).map_err(fail)?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(rows)
}

/// `warpflow audit`: re-audits persisted records. The space and flow come
/// from `config`, or from the sidecar written next to the CSV.
pub fn cmd_audit(csv: &Path, config: Option<&RunConfig>) -> Result<AuditReport, CliError> {
    let loaded;
    let config = match config {
        Some(c) => c,
        None => {
            loaded = RunConfig::load(&sidecar_path(csv))?;
            &loaded
        }
    };
    let file = File::open(csv).map_err(io_err(csv))?;
    let records = read_records(BufReader::new(file)).map_err(|source| CliError::Records {
        path: csv.to_path_buf(),
        source,
    })?;
    let space = config.space.space();
    audit::audit_trajectory(&records, config.flow.flow_type, &space, &AuditTolerances {
        osc_floor: 10.0 * config.flow.tol_converged,
        ..AuditTolerances::default()
    })
    .map_err(|e| CliError::Usage(format!("{}: {e}", csv.display())))
}
