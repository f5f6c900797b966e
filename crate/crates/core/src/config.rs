//! Experiment description from a flat `key = value` file and command-line
//! overrides.
//!
//! Keys mirror the long flag names (`tx-rate`, `gas-limit`, ...);
//! underscores are accepted in place of dashes. Later settings win, so
//! flags applied after the file override it.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::consensus::ForkChoiceRule;
use crate::netsim::{equal_shares, GenesisDifficulty, SimConfig};

/// Where a setting came from, for error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Flag => f.write_str("command line"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{origin}: unknown setting `{key}`")]
    UnknownKey { key: String, origin: Origin },
    #[error("{origin}: invalid value `{value}` for `{field}`: {message}")]
    Value { field: String, value: String, origin: Origin, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    #[default]
    Single,
    Sweep,
    MainnetCompare,
    E2eDemo,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Mode::Single),
            "sweep" => Ok(Mode::Sweep),
            "mainnet-compare" => Ok(Mode::MainnetCompare),
            "e2e-demo" => Ok(Mode::E2eDemo),
            _ => Err("expected single, sweep, mainnet-compare or e2e-demo".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub mode: Mode,
    pub config: SimConfig,
    pub sweep_lambdas: Vec<u64>,
    pub output_path: Option<PathBuf>,
    pub trace_path: Option<PathBuf>,
    /// Worker threads; 0 lets the pool pick.
    pub threads: usize,
    /// Adds a meter account the owner never whitelists to the demo.
    pub untrusted_meter: bool,
    /// Seconds between readings of a demo meter.
    pub meter_interval: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            mode: Mode::Single,
            config: SimConfig::default(),
            sweep_lambdas: (1..=12).collect(),
            output_path: None,
            trace_path: None,
            threads: 0,
            untrusted_meter: false,
            meter_interval: 10,
        }
    }
}

/// Every recognized key.
pub const KEYS: &[&str] = &[
    "mode",
    "lambda",
    "sweep",
    "nodes",
    "hash-shares",
    "hashrate",
    "delay",
    "link-delays",
    "tx-rate",
    "gas-limit",
    "tx-gas",
    "tx-gas-spread",
    "tx-size",
    "duration",
    "runs",
    "seed",
    "warmup",
    "genesis-difficulty",
    "fork-choice",
    "out",
    "trace",
    "threads",
    "untrusted-meter",
    "meter-interval",
];

/// Parses `key = value` lines. `#` starts a comment line.
pub fn parse_file(text: &str) -> Result<Vec<(String, String, usize)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            message: format!("expected key = value, got `{l}`"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line, message: "missing key".into() });
        }
        out.push((key.to_string(), v.trim().to_string(), line));
    }
    Ok(out)
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

/// Comma list of integers or inclusive ranges `a..b`.
pub fn parse_lambda_list(s: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|e| format!("`{part}`: {e}"))?;
            let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|e| format!("`{part}`: {e}"))?;
            if a > b {
                return Err(format!("`{part}` is an empty range"));
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|e| format!("`{part}`: {e}"))?);
        }
    }
    Ok(out)
}

type LinkDelay = ((usize, usize), f64);

/// `from:to=seconds` entries, comma separated.
fn parse_link_delays(s: &str) -> Result<Vec<LinkDelay>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (link, d) = p.split_once('=').ok_or_else(|| format!("`{p}` is not from:to=seconds"))?;
            let (a, b) = link.split_once(':').ok_or_else(|| format!("`{p}` is not from:to=seconds"))?;
            let a = a.trim().parse().map_err(|e| format!("`{p}`: {e}"))?;
            let b = b.trim().parse().map_err(|e| format!("`{p}`: {e}"))?;
            let d = d.trim().parse().map_err(|e| format!("`{p}`: {e}"))?;
            Ok(((a, b), d))
        })
        .collect()
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn scalar<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

/// Accumulates settings on top of the defaults.
#[derive(Debug, Default)]
pub struct SpecBuilder {
    spec: ExperimentSpec,
    nodes_set: bool,
    shares_set: bool,
}

impl SpecBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply_file(&mut self, text: &str) -> Result<&mut Self, ConfigError> {
        for (k, v, line) in parse_file(text)? {
            self.set(&k, &v, Origin::Line(line))?;
        }
        Ok(self)
    }

    pub fn set(&mut self, key: &str, value: &str, origin: Origin) -> Result<&mut Self, ConfigError> {
        let field = key.replace('_', "-");
        let err = |message: String| ConfigError::Value {
            field: field.clone(),
            value: value.to_string(),
            origin: origin.clone(),
            message,
        };
        let s = &mut self.spec;
        let c = &mut s.config;
        match field.as_str() {
            "mode" => s.mode = value.parse().map_err(err)?,
            "lambda" => c.lambda = scalar(value).map_err(err)?,
            "sweep" => s.sweep_lambdas = parse_lambda_list(value).map_err(err)?,
            "nodes" => {
                c.num_nodes = scalar(value).map_err(err)?;
                self.nodes_set = true;
            }
            "hash-shares" => {
                c.hash_shares = parse_list(value).map_err(err)?;
                self.shares_set = true;
            }
            "hashrate" => c.total_hashrate = scalar(value).map_err(err)?,
            "delay" => c.propagation_delay = scalar(value).map_err(err)?,
            "link-delays" => c.link_delays = parse_link_delays(value).map_err(err)?.into_iter().collect(),
            "tx-rate" => c.tx_rate = scalar(value).map_err(err)?,
            "gas-limit" => c.block_gas_limit = scalar(value).map_err(err)?,
            "tx-gas" => c.mean_tx_gas = scalar(value).map_err(err)?,
            "tx-gas-spread" => c.tx_gas_spread = scalar(value).map_err(err)?,
            "tx-size" => c.tx_size_kb = scalar(value).map_err(err)?,
            "duration" => c.sim_duration = scalar(value).map_err(err)?,
            "runs" => c.num_runs = scalar(value).map_err(err)?,
            "seed" => c.seed = scalar(value).map_err(err)?,
            "warmup" => c.warmup_blocks = scalar(value).map_err(err)?,
            "genesis-difficulty" => c.genesis = value.parse::<GenesisDifficulty>().map_err(err)?,
            "fork-choice" => c.fork_choice = value.parse::<ForkChoiceRule>().map_err(|e| err(e.to_string()))?,
            "out" => s.output_path = Some(PathBuf::from(value)),
            "trace" => s.trace_path = Some(PathBuf::from(value)),
            "threads" => s.threads = scalar(value).map_err(err)?,
            "untrusted-meter" => s.untrusted_meter = parse_bool(value).map_err(err)?,
            "meter-interval" => s.meter_interval = scalar(value).map_err(err)?,
            _ => return Err(ConfigError::UnknownKey { key: key.to_string(), origin }),
        }
        Ok(self)
    }

    /// Validates and returns the spec. A node count given without shares
    /// gets equal shares.
    pub fn build(mut self) -> Result<ExperimentSpec, ConfigError> {
        if self.nodes_set && !self.shares_set {
            self.spec.config.hash_shares = equal_shares(self.spec.config.num_nodes);
        }
        let spec = self.spec;
        spec.config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if spec.mode == Mode::Sweep && spec.sweep_lambdas.is_empty() {
            return Err(ConfigError::Invalid("sweep needs at least one lambda".into()));
        }
        if spec.sweep_lambdas.contains(&0) {
            return Err(ConfigError::Invalid("sweep lambdas must be positive".into()));
        }
        if spec.meter_interval == 0 {
            return Err(ConfigError::Invalid("meter interval must be positive".into()));
        }
        Ok(spec)
    }
}

/// File settings first, then `overrides` in order.
pub fn load_spec(file: Option<&str>, overrides: &[(String, String)]) -> Result<ExperimentSpec, ConfigError> {
    let mut b = SpecBuilder::new();
    if let Some(text) = file {
        b.apply_file(text)?;
    }
    for (k, v) in overrides {
        b.set(k, v, Origin::Flag)?;
    }
    b.build()
}
