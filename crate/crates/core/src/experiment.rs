//! Multi-run experiments: parameter sweeps, the public-network comparison
//! point and the meter-to-chain demo.
//!
//! Runs fan out over a rayon pool; results are collected in run-index order
//! so the thread count never changes the output.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;
use thiserror::Error;

use crate::chain::{Address, ContractId, Payload, Transaction, TxId};
use crate::config::ExperimentSpec;
use crate::consensus::PUBLIC_LAMBDA;
use crate::contract::{replay_chain, ContractError};
use crate::meter::{
    build_record_tx, decrypt_record, encrypt_record, simulate_meter_stream, Account, EncryptedRecord, MeterError,
    MeterRecord,
};
use crate::metrics::{aggregate_runs, MetricsError, RunStats, Summary, SweepPoint};
use crate::netsim::{SimConfig, SimError, Simulation, TraceRecord, TxArrival, TxPartition};

/// Mean propagation delay of the public network, seconds.
pub const PUBLIC_NETWORK_DELAY: f64 = 12.6;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Meter(#[from] MeterError),
    #[error("thread pool: {0}")]
    Pool(String),
}

pub fn thread_pool(threads: usize) -> Result<ThreadPool, ExperimentError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))
}

/// Transaction partition means over the runs of one point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PartitionSummary {
    pub generated: Summary,
    pub confirmed: Summary,
    pub pending: Summary,
    pub stale_only: Summary,
    /// Exact sums over all runs.
    pub totals: TxPartition,
}

impl PartitionSummary {
    pub fn of(parts: &[TxPartition]) -> Self {
        let f = |g: fn(&TxPartition) -> u64| Summary::of(parts.iter().map(|p| g(p) as f64));
        PartitionSummary {
            generated: f(|p| p.generated),
            confirmed: f(|p| p.confirmed),
            pending: f(|p| p.pending),
            stale_only: f(|p| p.stale_only),
            totals: parts.iter().fold(TxPartition::default(), |t, p| TxPartition {
                generated: t.generated + p.generated,
                confirmed: t.confirmed + p.confirmed,
                pending: t.pending + p.pending,
                stale_only: t.stale_only + p.stale_only,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointResult {
    pub point: SweepPoint,
    pub partition: PartitionSummary,
    pub runs: Vec<RunStats>,
}

/// All `num_runs` runs of one configuration.
pub fn run_point(config: &SimConfig, pool: &ThreadPool) -> Result<PointResult, ExperimentError> {
    config.validate()?;
    let outcomes: Vec<(RunStats, TxPartition)> = pool.install(|| {
        (0..config.num_runs as u64)
            .into_par_iter()
            .map(|i| Simulation::new(config.clone(), i).run().map(|o| (o.stats, o.partition)))
            .collect::<Result<_, _>>()
    })?;
    let (runs, parts): (Vec<RunStats>, Vec<TxPartition>) = outcomes.into_iter().unzip();
    Ok(PointResult {
        point: aggregate_runs(config.lambda, &runs)?,
        partition: PartitionSummary::of(&parts),
        runs,
    })
}

/// One point per threshold, in the given order.
pub fn run_sweep(
    base: &SimConfig,
    lambdas: &[u64],
    pool: &ThreadPool,
    mut progress: impl FnMut(&PointResult),
) -> Result<Vec<PointResult>, ExperimentError> {
    if lambdas.is_empty() {
        return Err(SimError::InvalidConfig("sweep needs at least one lambda".into()).into());
    }
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let config = SimConfig { lambda, ..base.clone() };
        let r = run_point(&config, pool)?;
        progress(&r);
        out.push(r);
    }
    Ok(out)
}

/// The public-network setting: threshold 9 and 12.6 s propagation.
pub fn mainnet_config(base: &SimConfig) -> SimConfig {
    SimConfig {
        lambda: PUBLIC_LAMBDA,
        propagation_delay: PUBLIC_NETWORK_DELAY,
        link_delays: Default::default(),
        ..base.clone()
    }
}

/// Event trace of run 0.
pub fn trace_run(config: &SimConfig) -> Result<Vec<TraceRecord>, ExperimentError> {
    Ok(Simulation::new(config.clone(), 0).with_trace().run()?.trace)
}

/// Text table of the transaction partition per point.
pub fn partition_report(results: &[PointResult]) -> String {
    let mut out = String::from("lambda interval_s generated confirmed pending stale_only\n");
    for r in results {
        let p = &r.partition;
        out.push_str(&format!(
            "{} {:.3} {:.1} {:.1} {:.1} {:.1}\n",
            r.point.lambda, r.point.interval.mean, p.generated.mean, p.confirmed.mean, p.pending.mean, p.stale_only.mean
        ));
    }
    out
}

/// Unix time of simulated second 0 in the demo.
pub const DEMO_EPOCH: u64 = 1_622_966_400;
/// Demo meters start reporting after this many simulated seconds.
pub const DEMO_METER_START: u64 = 60;

#[derive(Clone, Debug, PartialEq)]
pub struct DemoReport {
    pub records_sent: u64,
    /// Accepted and stored by the contract.
    pub records_confirmed: u64,
    /// Stored records that decrypt to exactly what was sent.
    pub records_recovered: u64,
    pub decryption_failures: u64,
    pub untrusted_sent: u64,
    /// Calls on chain rejected because the sender was not trusted.
    pub records_rejected: u64,
    /// Stored records whose sender was never whitelisted; always 0.
    pub untrusted_stored: u64,
    /// Record transactions that never reached the canonical chain.
    pub records_unconfirmed: u64,
    pub duplicate_nonces: u64,
    pub failed_calls: u64,
    pub stats: RunStats,
    pub partition: TxPartition,
}

impl fmt::Display for DemoReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "records_sent {}", self.records_sent)?;
        writeln!(f, "records_confirmed {}", self.records_confirmed)?;
        writeln!(f, "records_recovered {}", self.records_recovered)?;
        writeln!(f, "decryption_failures {}", self.decryption_failures)?;
        writeln!(f, "records_unconfirmed {}", self.records_unconfirmed)?;
        writeln!(f, "untrusted_sent {}", self.untrusted_sent)?;
        writeln!(f, "records_rejected {}", self.records_rejected)?;
        writeln!(f, "untrusted_stored {}", self.untrusted_stored)?;
        writeln!(f, "failed_calls {}", self.failed_calls)?;
        writeln!(f, "duplicate_nonces {}", self.duplicate_nonces)?;
        writeln!(f, "mean_interval_s {:.3}", self.stats.mean_block_interval)?;
        writeln!(f, "throughput_tps {:.3}", self.stats.throughput)?;
        writeln!(f, "uncle_rate {:.5}", self.stats.uncle_rate)?;
        write!(
            f,
            "transactions generated {} confirmed {} pending {} stale_only {}",
            self.partition.generated, self.partition.confirmed, self.partition.pending, self.partition.stale_only
        )
    }
}

fn call(sender: Address, payload: Payload, gas: u64, size_kb: f64) -> Transaction {
    Transaction {
        id: TxId(0),
        sender,
        contract: ContractId(0),
        payload: payload.into(),
        gas,
        size_kb,
    }
}

/// Owner deploys the contract and whitelists two meters; the meters (and
/// optionally a third, never whitelisted one) stream encrypted readings on
/// top of the configured load. The canonical chain of node 0 is replayed
/// and every stored record decrypted.
pub fn run_e2e_demo(spec: &ExperimentSpec) -> Result<DemoReport, ExperimentError> {
    let config = &spec.config;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x006d_6574_6572);
    let owner = Account::random(&mut rng);
    let trusted = [Account::random(&mut rng), Account::random(&mut rng)];
    let outsider = Account::random(&mut rng);

    let (gas, size) = (config.mean_tx_gas, config.tx_size_kb);
    let mut script = vec![
        TxArrival { time: 0.0, origin: 0, tx: call(owner.address, Payload::Deploy, gas, size) },
        TxArrival { time: 0.0, origin: 0, tx: call(owner.address, Payload::AddAcc(trusted[0].address), gas, size) },
        TxArrival { time: 0.0, origin: 0, tx: call(owner.address, Payload::AddAcc(trusted[1].address), gas, size) },
    ];

    let mut meters: Vec<(&Account, bool)> = trusted.iter().map(|a| (a, true)).collect();
    if spec.untrusted_meter {
        meters.push((&outsider, false));
    }
    let span = (config.sim_duration as u64).saturating_sub(DEMO_METER_START);
    let mut sent: HashMap<(Address, u64), MeterRecord> = HashMap::new();
    let mut nonces: HashMap<Address, HashSet<[u8; 16]>> = HashMap::new();
    let mut duplicate_nonces = 0;
    let (mut records_sent, mut untrusted_sent) = (0, 0);
    for (k, (acct, is_trusted)) in meters.iter().enumerate() {
        let device = format!("SM-{:02}", k + 1);
        let stream = simulate_meter_stream(&device, DEMO_EPOCH + DEMO_METER_START, spec.meter_interval, span, &mut rng)?;
        for rec in stream {
            let enc = encrypt_record(&rec, &acct.key, &mut rng)?;
            if !nonces.entry(acct.address).or_default().insert(enc.nonce) {
                duplicate_nonces += 1;
            }
            let tx = build_record_tx(&enc, acct.address, ContractId(0), TxId(0), gas, size);
            script.push(TxArrival {
                time: (rec.collected_at - DEMO_EPOCH) as f64,
                origin: (k + 1) % config.num_nodes,
                tx,
            });
            if *is_trusted {
                records_sent += 1;
            } else {
                untrusted_sent += 1;
            }
            sent.insert((acct.address, rec.collected_at), rec);
        }
    }

    let outcome = Simulation::new(config.clone(), 0).with_transactions(script).run()?;
    let chain = outcome.canonical_chain();
    let replay = replay_chain(chain.iter().map(|b| b.as_ref()));
    let keys: HashMap<Address, &Account> = meters.iter().map(|(a, _)| (a.address, *a)).collect();

    let mut records_confirmed = 0;
    let mut records_recovered = 0;
    let mut decryption_failures = 0;
    let mut untrusted_stored = 0;
    if let Some(state) = replay.contract(ContractId(0)) {
        for ev in state.events() {
            records_confirmed += 1;
            if !trusted.iter().any(|a| a.address == ev.addr) {
                untrusted_stored += 1;
            }
            let Some(acct) = keys.get(&ev.addr) else {
                decryption_failures += 1;
                continue;
            };
            let decoded = EncryptedRecord::from_stored(&ev.id, &ev.time, &ev.value)
                .and_then(|enc| decrypt_record(&enc, &acct.key));
            match decoded {
                Ok(rec) if sent.get(&(ev.addr, rec.collected_at)) == Some(&rec) => records_recovered += 1,
                _ => decryption_failures += 1,
            }
        }
    }
    let records_rejected = replay
        .failures
        .iter()
        .filter(|f| f.error == ContractError::Untrusted)
        .count() as u64;
    let on_chain_records = chain
        .iter()
        .flat_map(|b| b.transactions.iter())
        .filter(|t| matches!(*t.payload, Payload::NewReco { .. }))
        .count() as u64;

    Ok(DemoReport {
        records_sent,
        records_confirmed,
        records_recovered,
        decryption_failures,
        untrusted_sent,
        records_rejected,
        untrusted_stored,
        records_unconfirmed: records_sent + untrusted_sent - on_chain_records,
        duplicate_nonces,
        failed_calls: replay.failure_count() as u64,
        stats: outcome.stats,
        partition: outcome.partition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> SimConfig {
        SimConfig { sim_duration: 400.0, warmup_blocks: 10, num_runs: 3, ..SimConfig::default() }
    }

    #[test]
    fn point_is_thread_count_independent() {
        let c = quick();
        let one = run_point(&c, &thread_pool(1).unwrap()).unwrap();
        let three = run_point(&c, &thread_pool(3).unwrap()).unwrap();
        assert_eq!(one, three);
        assert_eq!(one.runs.len(), 3);
        let t = &one.partition.totals;
        assert_eq!(t.generated, t.confirmed + t.pending + t.stale_only);
    }

    #[test]
    fn empty_sweep_rejected() {
        let pool = thread_pool(1).unwrap();
        assert!(run_sweep(&quick(), &[], &pool, |_| {}).is_err());
    }

    #[test]
    fn mainnet_setting() {
        let c = mainnet_config(&quick());
        assert_eq!((c.lambda, c.propagation_delay), (9, 12.6));
    }

    #[test]
    fn demo_recovers_every_record() {
        let spec = ExperimentSpec {
            config: SimConfig { sim_duration: 600.0, warmup_blocks: 10, ..SimConfig::default() },
            untrusted_meter: true,
            ..ExperimentSpec::default()
        };
        let r = run_e2e_demo(&spec).unwrap();
        assert_eq!(r.records_sent, 2 * 54);
        assert!(r.records_confirmed > 0);
        assert_eq!(r.records_recovered, r.records_confirmed);
        assert_eq!(r.decryption_failures, 0);
        assert_eq!(r.duplicate_nonces, 0);
        assert_eq!(r.untrusted_sent, 54);
        assert!(r.records_rejected > 0);
        assert_eq!(r.untrusted_stored, 0);
        assert_eq!(
            r.records_confirmed + r.records_rejected + r.records_unconfirmed,
            r.records_sent + r.untrusted_sent
        );
        assert!(r.to_string().contains("records_recovered"));
    }
}
