//! Throughput, uncle rate and block interval of finished runs, and their
//! aggregation across runs.

use std::collections::HashSet;
use std::io::{self, Write};

use thiserror::Error;

use crate::chain::{BlockId, BlockTree};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("canonical chain of {len} blocks is too short for warm-up {warmup}")]
    ChainTooShort { len: usize, warmup: usize },
    #[error("no runs to aggregate")]
    EmptyInput,
    #[error("unknown head block {0:?}")]
    UnknownBlock(BlockId),
}

/// Figures of merit for one run, measured over the canonical chain after
/// the warm-up blocks.
///
/// The window starts at the first post-warm-up block (the anchor); the
/// measured blocks are the ones after it, each closing one interval.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    /// Confirmed transactions per second of timestamp span.
    pub throughput: f64,
    /// included_uncles / (canonical_blocks + included_uncles).
    pub uncle_rate: f64,
    pub mean_block_interval: f64,
    pub canonical_blocks: u64,
    pub included_uncles: u64,
    /// Mined in the window but neither canonical nor referenced as uncle.
    pub orphaned_blocks: u64,
    pub confirmed_tx: u64,
    /// Generated transactions not on the canonical chain at the end of the
    /// run. Filled in by the simulator.
    pub pending_tx: u64,
    pub warmup_blocks_discarded: u64,
    /// Alternative uncle convention: uncles per canonical block.
    pub uncles_per_block: f64,
}

pub fn compute_run_stats(tree: &BlockTree, head: &BlockId, warmup: usize) -> Result<RunStats, MetricsError> {
    let chain = tree.canonical_chain(head).map_err(|_| MetricsError::UnknownBlock(*head))?;
    if chain.len() < warmup + 2 {
        return Err(MetricsError::ChainTooShort { len: chain.len(), warmup });
    }
    let anchor = &chain[warmup];
    let measured = &chain[warmup + 1..];
    let last = measured.last().expect("at least one measured block");
    let span = (last.header.timestamp - anchor.header.timestamp) as f64;

    let mut seen = HashSet::with_capacity(measured.iter().map(|b| b.transactions.len()).sum());
    for b in measured {
        for tx in &b.transactions {
            seen.insert(tx.id);
        }
    }
    let confirmed_tx = seen.len() as u64;
    let canonical_blocks = measured.len() as u64;
    let included_uncles: u64 = measured.iter().map(|b| b.header.uncle_ids.len() as u64).sum();

    let canonical: HashSet<BlockId> = chain.iter().map(|b| b.id()).collect();
    let referenced: HashSet<BlockId> = chain.iter().flat_map(|b| b.header.uncle_ids.iter().copied()).collect();
    let orphaned_blocks = tree
        .blocks()
        .filter(|b| b.header.number > anchor.header.number)
        .filter(|b| !canonical.contains(&b.id()) && !referenced.contains(&b.id()))
        .count() as u64;

    Ok(RunStats {
        throughput: confirmed_tx as f64 / span,
        uncle_rate: included_uncles as f64 / (canonical_blocks + included_uncles) as f64,
        mean_block_interval: span / canonical_blocks as f64,
        canonical_blocks,
        included_uncles,
        orphaned_blocks,
        confirmed_tx,
        pending_tx: 0,
        warmup_blocks_discarded: warmup as u64,
        uncles_per_block: included_uncles as f64 / canonical_blocks as f64,
    })
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Values are sorted before summation so the result does not depend on
    /// input order.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Summary {
        let mut v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Summary::default();
        }
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        if v.len() < 2 {
            return Summary { mean, std: 0.0 };
        }
        let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
        sq.sort_by(f64::total_cmp);
        let var = sq.iter().sum::<f64>() / (n - 1.0);
        Summary { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub lambda: u64,
    pub runs: usize,
    pub interval: Summary,
    pub throughput: Summary,
    pub uncle_rate: Summary,
    pub uncles_per_block: Summary,
    pub canonical_blocks: Summary,
    pub included_uncles: Summary,
    pub orphans: Summary,
    pub confirmed: Summary,
    pub pending: Summary,
}

pub fn aggregate_runs(lambda: u64, stats: &[RunStats]) -> Result<SweepPoint, MetricsError> {
    if stats.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let field = |f: fn(&RunStats) -> f64| Summary::of(stats.iter().map(f));
    Ok(SweepPoint {
        lambda,
        runs: stats.len(),
        interval: field(|s| s.mean_block_interval),
        throughput: field(|s| s.throughput),
        uncle_rate: field(|s| s.uncle_rate),
        uncles_per_block: field(|s| s.uncles_per_block),
        canonical_blocks: field(|s| s.canonical_blocks as f64),
        included_uncles: field(|s| s.included_uncles as f64),
        orphans: field(|s| s.orphaned_blocks as f64),
        confirmed: field(|s| s.confirmed_tx as f64),
        pending: field(|s| s.pending_tx as f64),
    })
}

pub const CSV_HEADER: &str =
    "lambda,mean_interval_s,interval_std,throughput_tps,throughput_std,uncle_rate,uncle_rate_std,orphans,confirmed,pending,runs";

pub fn csv_row(p: &SweepPoint) -> String {
    let g = format_sig6;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        p.lambda,
        g(p.interval.mean),
        g(p.interval.std),
        g(p.throughput.mean),
        g(p.throughput.std),
        g(p.uncle_rate.mean),
        g(p.uncle_rate.std),
        g(p.orphans.mean),
        g(p.confirmed.mean),
        g(p.pending.mean),
        p.runs
    )
}

pub fn write_csv<W: Write>(points: &[SweepPoint], mut out: W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for p in points {
        writeln!(out, "{}", csv_row(p))?;
    }
    Ok(())
}

/// Six significant digits, trailing zeros trimmed (printf `%.6g`).
pub fn format_sig6(v: f64) -> String {
    const DIGITS: i32 = 6;
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..DIGITS).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim_zeros(mantissa), sign, exp.abs())
    } else {
        let decimals = (DIGITS - 1 - exp) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
