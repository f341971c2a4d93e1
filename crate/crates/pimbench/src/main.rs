//! `pimbench` — experiment runner for the pimsim simulator.
//!
//! Exit codes: 0 success, 1 configuration error, 2 invariant violation,
//! 3 I/O error. `PIMBENCH_THREADS` caps sweep parallelism.

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

use pimsim::coherence::system::CoherenceSystem;
use pimsim::harness::config::{parse_config, ExperimentConfig, ExperimentKind};
use pimsim::harness::experiment::{
    build_coherence_workload, compare_mechanisms, run_experiment, run_sweep,
};
use pimsim::harness::export::{to_csv, to_json, write_output};
use pimsim::harness::metrics::MetricsReport;
use pimsim::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Parser)]
#[command(name = "pimbench", version, about = "Run pimsim experiments")]
struct Cli {
    /// Experiment configuration file (key = value with dotted sections)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the report here instead of stdout
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Export format
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Use the full-scale workload presets
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Emit a JSON-lines trace next to the report (`<out>.trace.jsonl`,
    /// or stderr without --out)
    #[arg(long, global = true)]
    trace: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// One experiment run with the configured mechanism
    Run,
    /// One run per configured mechanism, normalized to the CPU-only arm
    Compare,
    /// The configured experiment across a range of seeds
    Sweep {
        /// Number of consecutive seeds, starting from the configured seed
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, SimError> {
    let Some(path) = &cli.config else {
        return Err(SimError::Config("--config PATH is required".into()));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| SimError::Io(format!("reading {}: {e}", path.display())))?;
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.paper_scale {
        cfg.apply_paper_scale();
    }
    Ok(cfg)
}

fn emit_trace(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), SimError> {
    if cfg.kind != ExperimentKind::Coherence {
        eprintln!("note: --trace is only recorded for coherence experiments");
        return Ok(());
    }
    let workload = build_coherence_workload(cfg)?;
    let mut sys = CoherenceSystem::new(cfg.mechanism, &workload, cfg.seed);
    sys.run();
    let mut lines = String::new();
    for entry in &sys.order_log {
        lines.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
        lines.push('\n');
    }
    match &cli.out {
        Some(out) => {
            let mut path = out.clone();
            path.set_extension("trace.jsonl");
            write_output(&path, &lines)
        }
        None => {
            eprint!("{lines}");
            Ok(())
        }
    }
}

fn emit(cli: &Cli, reports: &[MetricsReport]) -> Result<(), SimError> {
    let body = match cli.format {
        Format::Csv => to_csv(reports),
        Format::Json => to_json(reports),
    };
    match &cli.out {
        Some(path) => write_output(path, &body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn thread_cap() -> usize {
    std::env::var("PIMBENCH_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

fn run(cli: &Cli) -> Result<(), SimError> {
    let cfg = load_config(cli)?;
    let reports = match cli.cmd {
        Cmd::Run => vec![run_experiment(&cfg)?],
        Cmd::Compare => compare_mechanisms(&cfg, &cfg.mechanisms)?,
        Cmd::Sweep { seeds } => {
            let seed_list: Vec<u64> = (cfg.seed..cfg.seed + seeds).collect();
            run_sweep(&cfg, &seed_list, thread_cap())?
        }
    };
    if cli.trace {
        emit_trace(cli, &cfg)?;
    }
    emit(cli, &reports)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("pimbench: {err}");
            match err {
                SimError::Config(_) | SimError::NonCanonicalVa(_) => ExitCode::from(1),
                SimError::Io(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
