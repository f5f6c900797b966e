use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use gridchain_core::config::{load_spec, ConfigError, ExperimentSpec, Mode};
use gridchain_core::experiment::{
    mainnet_config, partition_report, run_e2e_demo, run_point, run_sweep, thread_pool, trace_run, ExperimentError,
    PointResult,
};
use gridchain_core::metrics::write_csv;
use gridchain_core::netsim::format_trace;

/// Default directory for output files when --out is not given.
const OUT_DIR_ENV: &str = "GRIDCHAIN_OUT_DIR";

/// Private proof-of-work chain simulator: single runs, threshold sweeps,
/// the public-network comparison point and the meter-to-chain demo.
#[derive(Parser, Debug, Default)]
#[command(name = "gridchain", version)]
struct Cli {
    /// single | sweep | mainnet-compare | e2e-demo
    #[arg(long)]
    mode: Option<String>,
    /// Difficulty threshold in seconds.
    #[arg(long)]
    lambda: Option<String>,
    /// Thresholds for sweep mode, e.g. `1,2,3` or `1..12`.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long)]
    nodes: Option<String>,
    /// Comma-separated, one per node, summing to 1.
    #[arg(long)]
    hash_shares: Option<String>,
    /// Total hashes per second.
    #[arg(long)]
    hashrate: Option<String>,
    /// Propagation delay in seconds.
    #[arg(long)]
    delay: Option<String>,
    /// Transactions per second.
    #[arg(long)]
    tx_rate: Option<String>,
    #[arg(long)]
    gas_limit: Option<String>,
    #[arg(long)]
    tx_gas: Option<String>,
    /// Simulated seconds per run.
    #[arg(long)]
    duration: Option<String>,
    #[arg(long)]
    runs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Canonical blocks discarded before measuring.
    #[arg(long)]
    warmup: Option<String>,
    /// minimum | equilibrium | <integer>
    #[arg(long)]
    genesis_difficulty: Option<String>,
    /// td | ghost
    #[arg(long)]
    fork_choice: Option<String>,
    #[arg(long)]
    threads: Option<String>,
    /// Adds a never-whitelisted meter to the demo.
    #[arg(long)]
    untrusted_meter: bool,
    /// Output file; defaults to stdout, or a file under $GRIDCHAIN_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
    /// key = value settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Event trace of run 0 (single and mainnet-compare modes).
    #[arg(long)]
    trace: Option<PathBuf>,
}

impl Cli {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut v: Vec<(String, String)> = [
            ("mode", &self.mode),
            ("lambda", &self.lambda),
            ("sweep", &self.sweep),
            ("nodes", &self.nodes),
            ("hash-shares", &self.hash_shares),
            ("hashrate", &self.hashrate),
            ("delay", &self.delay),
            ("tx-rate", &self.tx_rate),
            ("gas-limit", &self.gas_limit),
            ("tx-gas", &self.tx_gas),
            ("duration", &self.duration),
            ("runs", &self.runs),
            ("seed", &self.seed),
            ("warmup", &self.warmup),
            ("genesis-difficulty", &self.genesis_difficulty),
            ("fork-choice", &self.fork_choice),
            ("threads", &self.threads),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
        .collect();
        for (k, p) in [("out", &self.out), ("trace", &self.trace)] {
            if let Some(p) = p {
                v.push((k.to_string(), p.display().to_string()));
            }
        }
        if self.untrusted_meter {
            v.push(("untrusted-meter".into(), "true".into()));
        }
        v
    }
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn default_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Single => "single.csv",
        Mode::Sweep => "sweep.csv",
        Mode::MainnetCompare => "mainnet-compare.csv",
        Mode::E2eDemo => "e2e-demo.txt",
    }
}

fn emit(spec: &ExperimentSpec, bytes: &[u8]) -> Result<(), Failure> {
    let path = spec
        .output_path
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(|d| Path::new(&d).join(default_name(spec.mode))));
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&p, bytes)?;
            eprintln!("wrote {}", p.display());
        }
        None => io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn progress(r: &PointResult) {
    let p = &r.point;
    eprintln!(
        "lambda {:>2}: interval {:.3} s, throughput {:.2} tx/s, uncle rate {:.4} ({:.4} per block), {} runs",
        p.lambda, p.interval.mean, p.throughput.mean, p.uncle_rate.mean, p.uncles_per_block.mean, p.runs
    );
}

fn csv(points: &[PointResult]) -> Result<Vec<u8>, Failure> {
    let rows: Vec<_> = points.iter().map(|r| r.point.clone()).collect();
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf)?;
    Ok(buf)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| {
            Failure::Config(ConfigError::Io { path: p.display().to_string(), message: e.to_string() }.to_string())
        })?),
        None => None,
    };
    let spec = load_spec(file.as_deref(), &cli.overrides())?;
    let pool = thread_pool(spec.threads)?;
    match spec.mode {
        Mode::Single | Mode::MainnetCompare => {
            let config = match spec.mode {
                Mode::MainnetCompare => mainnet_config(&spec.config),
                _ => spec.config.clone(),
            };
            if let Some(path) = &spec.trace_path {
                fs::write(path, format_trace(&trace_run(&config)?))?;
                eprintln!("wrote {}", path.display());
            }
            let r = run_point(&config, &pool)?;
            progress(&r);
            eprint!("{}", partition_report(std::slice::from_ref(&r)));
            emit(&spec, &csv(&[r])?)
        }
        Mode::Sweep => {
            let results = run_sweep(&spec.config, &spec.sweep_lambdas, &pool, progress)?;
            eprint!("{}", partition_report(&results));
            emit(&spec, &csv(&results)?)
        }
        Mode::E2eDemo => {
            let report = run_e2e_demo(&spec)?;
            emit(&spec, format!("{report}\n").as_bytes())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
