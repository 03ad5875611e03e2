use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use warpflow_cli::commands::{self, CliError, EXIT_OK};
use warpflow_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "warpflow", version, about = "Curvature flows of radial graphs in warped products")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one flow and audit it.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Continue from `output.checkpoint`.
        #[arg(long)]
        resume: bool,
    },
    /// Reference functionals of radial slices.
    SliceTable {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        r_min: f64,
        #[arg(long)]
        r_max: f64,
        #[arg(long, default_value_t = 11)]
        count: usize,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random initial data over seeds and amplitudes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        eps: Vec<f64>,
    },
    /// Re-audit a run CSV.
    Audit {
        #[arg(long)]
        csv: PathBuf,
        /// Defaults to the config saved next to the CSV.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Run { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let out = commands::cmd_run(&cfg, resume)?;
            println!(
                "{}: {} steps, t = {}",
                out.verdict.name(),
                out.final_state.step_index,
                out.final_state.t
            );
            if let warpflow_core::RunVerdict::Error(e) = &out.verdict {
                eprintln!("error: {e}");
            }
            if let Some(r) = &out.report {
                print!("{}", r.render_text());
            }
            Ok(out.exit_code())
        }
        Command::SliceTable {
            config,
            r_min,
            r_max,
            count,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            match out {
                Some(p) => {
                    let f = std::fs::File::create(&p).map_err(|source| CliError::Io { path: p.clone(), source })?;
                    commands::cmd_slice_table(&cfg, r_min, r_max, count, io::BufWriter::new(f))?;
                }
                None => commands::cmd_slice_table(&cfg, r_min, r_max, count, io::stdout().lock())?,
            }
            Ok(EXIT_OK)
        }
        Command::Sweep { config, seeds, eps } => {
            let cfg = RunConfig::load(&config)?;
            let rows = commands::cmd_sweep(&cfg, &seeds, &eps)?;
            let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
            println!(
                "{} runs, {} failed, summary in {}",
                rows.len(),
                failed,
                cfg.sweep.dir.join("summary.csv").display()
            );
            Ok(EXIT_OK)
        }
        Command::Audit { csv, config } => {
            let cfg = config.map(|p| RunConfig::load(&p)).transpose()?;
            let report = commands::cmd_audit(&csv, cfg.as_ref())?;
            let mut stdout = io::stdout().lock();
            stdout
                .write_all(report.render_text().as_bytes())
                .map_err(|source| CliError::Io { path: "<stdout>".into(), source })?;
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
