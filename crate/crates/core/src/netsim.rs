//! Discrete-event mining and propagation experiment.
//!
//! Each run owns one event queue processed in `(time, sequence)` order.
//! Mining is a memoryless race: a node holds one pending `BlockMined` event
//! for its current head and redraws it whenever the head changes. Blocks
//! reach every peer after a fixed (optionally per-link) delay over a full
//! mesh. Transactions arrive as a Poisson stream at a random origin node and
//! become visible to the other nodes after the same delay.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Exp1};
use thiserror::Error;

use crate::chain::{
    Address, Block, BlockHeader, BlockId, BlockTree, ChainError, ContractId, Payload, Transaction, TxId,
    DEFAULT_HEADER_OVERHEAD_KB,
};
use crate::consensus::{
    compare_heads, compute_difficulty, eligible_uncles, ghost_head, validate_header, ConsensusError,
    DifficultyParams, ForkChoiceRule, MIN_DIFFICULTY,
};
use crate::metrics::{compute_run_stats, MetricsError, RunStats};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Difficulty of the genesis block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GenesisDifficulty {
    /// The protocol minimum.
    Minimum,
    /// The difficulty at which the controller is stationary for the
    /// configured threshold and hashrate (never below the minimum).
    #[default]
    Equilibrium,
    Fixed(u64),
}

impl FromStr for GenesisDifficulty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "minimum" | "min" => Ok(GenesisDifficulty::Minimum),
            "equilibrium" | "eq" => Ok(GenesisDifficulty::Equilibrium),
            other => other
                .parse::<u64>()
                .map(GenesisDifficulty::Fixed)
                .map_err(|_| format!("expected minimum, equilibrium or an integer, got `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    /// Difficulty interval threshold, seconds.
    pub lambda: u64,
    pub num_nodes: usize,
    pub hash_shares: Vec<f64>,
    /// Network-wide hashes per second.
    pub total_hashrate: f64,
    /// Default one-way delay, seconds.
    pub propagation_delay: f64,
    /// Overrides keyed by (from, to).
    pub link_delays: BTreeMap<(usize, usize), f64>,
    /// Transactions per second.
    pub tx_rate: f64,
    pub block_gas_limit: u64,
    pub mean_tx_gas: u64,
    /// Per-transaction gas is uniform in `mean ± spread`; 0 means fixed.
    pub tx_gas_spread: u64,
    pub tx_size_kb: f64,
    pub header_overhead_kb: f64,
    pub sim_duration: f64,
    pub num_runs: usize,
    pub seed: u64,
    pub warmup_blocks: usize,
    pub genesis: GenesisDifficulty,
    pub fork_choice: ForkChoiceRule,
}

pub fn equal_shares(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

impl Default for SimConfig {
    /// The pre-set network: 3 equal miners, 0.25 s propagation, 100 tx/s,
    /// 15M block gas limit and 0.759808 kB transactions.
    fn default() -> Self {
        SimConfig {
            lambda: 3,
            num_nodes: 3,
            hash_shares: equal_shares(3),
            total_hashrate: MIN_DIFFICULTY as f64,
            propagation_delay: 0.25,
            link_delays: BTreeMap::new(),
            tx_rate: 100.0,
            block_gas_limit: 15_000_000,
            mean_tx_gas: 45_000,
            tx_gas_spread: 0,
            tx_size_kb: 0.759808,
            header_overhead_kb: DEFAULT_HEADER_OVERHEAD_KB,
            sim_duration: 3600.0,
            num_runs: 100,
            seed: 1,
            warmup_blocks: 100,
            genesis: GenesisDifficulty::Equilibrium,
            fork_choice: ForkChoiceRule::HeaviestTotalDifficulty,
        }
    }
}

impl SimConfig {
    pub fn difficulty_params(&self) -> DifficultyParams {
        DifficultyParams::with_lambda(self.lambda)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        self.difficulty_params()
            .validate()
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        if self.num_nodes == 0 {
            return bad("num_nodes must be positive".into());
        }
        if self.hash_shares.len() != self.num_nodes {
            return bad(format!(
                "hash_shares has {} entries for {} nodes",
                self.hash_shares.len(),
                self.num_nodes
            ));
        }
        if self.hash_shares.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("every hash share must be positive".into());
        }
        let total: f64 = self.hash_shares.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("hash shares sum to {total}, expected 1"));
        }
        if !(self.total_hashrate.is_finite() && self.total_hashrate > 0.0) {
            return bad("total_hashrate must be positive".into());
        }
        if !(self.propagation_delay.is_finite() && self.propagation_delay >= 0.0) {
            return bad("propagation delay must be non-negative".into());
        }
        for (&(a, b), d) in &self.link_delays {
            if a >= self.num_nodes || b >= self.num_nodes {
                return bad(format!("link delay {a}->{b} names a missing node"));
            }
            if !(d.is_finite() && *d >= 0.0) {
                return bad(format!("link delay {a}->{b} must be non-negative"));
            }
        }
        if !(self.tx_rate.is_finite() && self.tx_rate >= 0.0) {
            return bad("tx_rate must be non-negative".into());
        }
        if self.block_gas_limit == 0 {
            return bad("block gas limit must be positive".into());
        }
        if self.mean_tx_gas == 0 || self.mean_tx_gas > self.block_gas_limit {
            return bad("mean tx gas must be in 1..=block gas limit".into());
        }
        if self.tx_gas_spread >= self.mean_tx_gas || self.mean_tx_gas + self.tx_gas_spread > self.block_gas_limit {
            return bad("tx gas spread must keep every transaction in 1..=block gas limit".into());
        }
        if !(self.tx_size_kb.is_finite() && self.tx_size_kb > 0.0) {
            return bad("tx size must be positive".into());
        }
        if !(self.sim_duration.is_finite() && self.sim_duration > 0.0) {
            return bad("sim duration must be positive".into());
        }
        if self.num_runs == 0 {
            return bad("num_runs must be positive".into());
        }
        Ok(())
    }

    /// One-way delay from `from` to `to`.
    pub fn delay(&self, from: usize, to: usize) -> f64 {
        if from == to {
            return 0.0;
        }
        self.link_delays.get(&(from, to)).copied().unwrap_or(self.propagation_delay)
    }

    pub fn node_hashrate(&self, node: usize) -> f64 {
        self.hash_shares[node] * self.total_hashrate
    }

    pub fn genesis_difficulty(&self) -> u64 {
        let params = self.difficulty_params();
        match self.genesis {
            GenesisDifficulty::Minimum => params.d0,
            GenesisDifficulty::Fixed(d) => d.max(params.d0),
            GenesisDifficulty::Equilibrium => {
                let target = equilibrium_interval(self.lambda) * self.total_hashrate;
                (target.round() as u64).max(params.d0)
            }
        }
    }
}

/// Mean block interval at which the expected difficulty step is zero for a
/// parent without uncles, given exponential solve times and integer-second
/// timestamps.
///
/// With `T = floor(u + X)`, `u` uniform on [0,1) and `X ~ Exp(mean mu)`,
/// `P(T >= m) = mu (e^{1/mu} - 1) e^{-m/mu}` for `m >= 1`, so
/// `E[floor(T / lambda)] = mu (e^{1/mu} - 1) / (e^{lambda/mu} - 1)`, which is
/// increasing in `mu`; the fixed point is where it equals 1. At
/// `lambda = 1` the step is never positive and the difficulty sinks to the
/// minimum, reported as 0.
pub fn equilibrium_interval(lambda: u64) -> f64 {
    if lambda <= 1 {
        return 0.0;
    }
    let l = lambda as f64;
    let steps = |mu: f64| mu * (1.0 / mu).exp_m1() / (l / mu).exp_m1();
    let (mut lo, mut hi) = (1e-2, 1e4);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if steps(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exponential solve time with mean `difficulty / hashrate`.
pub fn sample_mining_time<R: Rng + ?Sized>(rng: &mut R, difficulty: u64, hashrate: f64) -> f64 {
    let unit: f64 = Exp1.sample(rng);
    unit * difficulty as f64 / hashrate
}

/// Time at which a miner starting at `start` on `parent` accumulates `work`
/// units of normalized effort (a unit exponential draw), where the hazard at
/// time `t` is `hashrate / D(t)` and `D(t)` is the difficulty of a block
/// stamped at `t`.
///
/// The difficulty is piecewise constant in whole `lambda` steps of the
/// stamped interval, so the integral is walked segment by segment.
pub fn solve_time(
    params: &DifficultyParams,
    parent: &BlockHeader,
    start: f64,
    hashrate: f64,
    mut work: f64,
) -> Result<f64, ConsensusError> {
    let number = parent.number + 1;
    let y = if parent.uncle_ids.is_empty() { 1 } else { 2 };
    let mut t = start;
    loop {
        let stamp = block_timestamp(parent, t);
        let difficulty = compute_difficulty(params, parent, number, stamp)?.result;
        let rate = hashrate / difficulty as f64;
        let steps = (stamp - parent.timestamp) / params.lambda;
        let frozen = difficulty == params.d0 || y - steps as i64 <= params.zeta_floor;
        let end = if frozen {
            f64::INFINITY
        } else {
            (parent.timestamp + params.lambda * (steps + 1)) as f64
        };
        let budget = rate * (end - t);
        if work <= budget {
            return Ok(t + work / rate);
        }
        work -= budget;
        t = end;
    }
}

/// Integer timestamp for a block found at `now` on `parent`.
pub fn block_timestamp(parent: &BlockHeader, now: f64) -> u64 {
    (parent.timestamp + 1).max(now.max(0.0).floor() as u64)
}

/// A transaction entering the network at `origin`.
#[derive(Clone, Debug, PartialEq)]
pub struct TxArrival {
    pub time: f64,
    pub origin: usize,
    pub tx: Transaction,
}

/// Sender used for synthetic load entering at `node`.
pub fn load_sender(node: usize) -> Address {
    Address::from_label(&format!("load-{node}"))
}

/// Poisson arrivals over `[0, sim_duration]` at uniformly random origins.
pub fn generate_tx_arrivals<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Vec<TxArrival> {
    if config.tx_rate <= 0.0 {
        return Vec::new();
    }
    let gap = Exp::new(config.tx_rate).expect("positive rate");
    let payload = Arc::new(Payload::Filler);
    let senders: Vec<Address> = (0..config.num_nodes).map(load_sender).collect();
    let mut out = Vec::with_capacity((config.tx_rate * config.sim_duration * 1.05) as usize + 16);
    let mut t = 0.0;
    loop {
        t += gap.sample(rng);
        if t > config.sim_duration {
            break;
        }
        let origin = rng.random_range(0..config.num_nodes);
        let gas = if config.tx_gas_spread == 0 {
            config.mean_tx_gas
        } else {
            rng.random_range(config.mean_tx_gas - config.tx_gas_spread..=config.mean_tx_gas + config.tx_gas_spread)
        };
        out.push(TxArrival {
            time: t,
            origin,
            tx: Transaction {
                id: TxId(out.len() as u64),
                sender: senders[origin],
                contract: ContractId(0),
                payload: Arc::clone(&payload),
                gas,
                size_kb: config.tx_size_kb,
            },
        });
    }
    out
}

/// Greedy selection in pool order; stops at the first transaction that
/// would overflow the gas limit.
pub fn fill_block<'a, I>(pool: I, gas_limit: u64) -> Vec<Transaction>
where
    I: IntoIterator<Item = &'a Transaction>,
{
    let mut used = 0u64;
    let mut out = Vec::new();
    for tx in pool {
        if used + tx.gas > gas_limit {
            break;
        }
        used += tx.gas;
        out.push(tx.clone());
    }
    out
}

#[derive(Clone, Debug)]
pub enum EventKind {
    TxArrival(usize),
    BlockMined { node: usize, epoch: u64 },
    BlockReceived { node: usize, block: Arc<Block> },
}

#[derive(Clone, Debug)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: BinaryHeap pops the earliest (time, seq) first
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Min-queue on `(time, seq)`; `seq` is assigned at push time.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: f64, kind: EventKind) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
        seq
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// One full node: its block tree, head, and view of the transaction pool.
///
/// The pool is implicit: every generated transaction that is visible to the
/// node and not on its canonical chain.
#[derive(Clone, Debug)]
pub struct NodeState {
    pub index: usize,
    pub tree: BlockTree,
    pub head: BlockId,
    on_chain: Vec<bool>,
    /// No transaction below this index is pending.
    cursor: usize,
    /// Blocks waiting for a missing parent or uncle, keyed by that id.
    waiting: HashMap<BlockId, Vec<(Arc<Block>, f64)>>,
    mining_epoch: u64,
    pub invalid_blocks: u64,
}

impl NodeState {
    pub fn new(index: usize, genesis: Arc<Block>) -> Self {
        let tree = BlockTree::new(genesis);
        let head = tree.genesis_id();
        NodeState {
            index,
            tree,
            head,
            on_chain: Vec::new(),
            cursor: 0,
            waiting: HashMap::new(),
            mining_epoch: 0,
            invalid_blocks: 0,
        }
    }

    pub fn is_on_chain(&self, tx: TxId) -> bool {
        self.on_chain.get(tx.0 as usize).copied().unwrap_or(false)
    }

    /// Number of blocks waiting for a missing dependency.
    pub fn buffered(&self) -> usize {
        self.waiting.values().map(Vec::len).sum()
    }

    fn missing_dependency(&self, block: &Block) -> Option<BlockId> {
        let h = &block.header;
        std::iter::once(&h.parent_id)
            .chain(h.uncle_ids.iter())
            .find(|id| !self.tree.contains(id))
            .copied()
    }

    /// Handles a block arriving at `now`. Returns true if the head moved.
    ///
    /// Blocks with unknown dependencies are buffered and applied, with their
    /// original receive time, once the dependency arrives. Invalid headers
    /// are dropped.
    pub fn receive(
        &mut self,
        params: &DifficultyParams,
        rule: ForkChoiceRule,
        block: Arc<Block>,
        now: f64,
    ) -> Result<bool, SimError> {
        let mut queue = vec![(block, now)];
        let mut inserted = Vec::new();
        while let Some((b, at)) = queue.pop() {
            let id = b.id();
            if self.tree.contains(&id) {
                continue;
            }
            if let Some(missing) = self.missing_dependency(&b) {
                let slot = self.waiting.entry(missing).or_default();
                if !slot.iter().any(|(w, _)| w.id() == id) {
                    slot.push((b, at));
                }
                continue;
            }
            if !validate_header(params, &self.tree, &b.header)? {
                self.invalid_blocks += 1;
                continue;
            }
            self.tree.insert_block(b, at)?;
            inserted.push(id);
            if let Some(waiters) = self.waiting.remove(&id) {
                queue.extend(waiters.into_iter().rev());
            }
        }
        if inserted.is_empty() {
            return Ok(false);
        }
        let best = match rule {
            ForkChoiceRule::HeaviestTotalDifficulty => inserted.iter().fold(self.head, |best, id| {
                if compare_heads(&self.tree, id, &best) == Ordering::Greater {
                    *id
                } else {
                    best
                }
            }),
            ForkChoiceRule::Ghost => ghost_head(&self.tree),
        };
        if best == self.head {
            return Ok(false);
        }
        self.switch_head(best)?;
        Ok(true)
    }

    /// Moves the head, returning transactions of abandoned blocks to the
    /// pool and removing those of newly canonical blocks.
    fn switch_head(&mut self, new_head: BlockId) -> Result<(), ChainError> {
        let mut old = Arc::clone(self.tree.block(&self.head)?);
        let mut new = Arc::clone(self.tree.block(&new_head)?);
        let mut abandoned = Vec::new();
        let mut adopted = Vec::new();
        while old.id() != new.id() {
            if old.header.number >= new.header.number {
                let parent = Arc::clone(self.tree.block(&old.header.parent_id)?);
                abandoned.push(old);
                old = parent;
            } else {
                let parent = Arc::clone(self.tree.block(&new.header.parent_id)?);
                adopted.push(new);
                new = parent;
            }
        }
        for b in &abandoned {
            for tx in &b.transactions {
                let i = tx.id.0 as usize;
                if i < self.on_chain.len() {
                    self.on_chain[i] = false;
                }
                self.cursor = self.cursor.min(i);
            }
        }
        for b in &adopted {
            for tx in &b.transactions {
                let i = tx.id.0 as usize;
                if i >= self.on_chain.len() {
                    self.on_chain.resize(i + 1, false);
                }
                self.on_chain[i] = true;
            }
        }
        self.head = new_head;
        Ok(())
    }

    /// Pending transactions visible at `now`, in arrival order.
    fn pending<'a>(
        &'a mut self,
        txs: &'a [TxArrival],
        arrived: usize,
        now: f64,
        config: &'a SimConfig,
    ) -> impl Iterator<Item = &'a Transaction> + 'a {
        while self.cursor < arrived && self.is_on_chain(TxId(self.cursor as u64)) {
            self.cursor += 1;
        }
        let node = self.index;
        let on_chain = &self.on_chain;
        txs[self.cursor.min(arrived)..arrived]
            .iter()
            .filter(move |a| !on_chain.get(a.tx.id.0 as usize).copied().unwrap_or(false))
            .filter(move |a| a.time + config.delay(a.origin, node) <= now)
            .map(|a| &a.tx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceKind {
    Mined,
    Received,
}

/// One block event of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub time: f64,
    pub kind: TraceKind,
    pub node: usize,
    pub block_id: BlockId,
    pub number: u64,
    pub difficulty: u64,
    pub timestamp: u64,
    pub n_tx: usize,
    pub n_uncles: usize,
}

pub const TRACE_HEADER: &str = "time,kind,node,block_id,number,difficulty,timestamp,n_tx,n_uncles";

/// Renders a trace as comma-separated text with [`TRACE_HEADER`].
pub fn format_trace(records: &[TraceRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 120 + TRACE_HEADER.len() + 1);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in records {
        let kind = match r.kind {
            TraceKind::Mined => "mined",
            TraceKind::Received => "received",
        };
        let _ = writeln!(
            out,
            "{:.6},{},{},{},{},{},{},{},{}",
            r.time, kind, r.node, r.block_id, r.number, r.difficulty, r.timestamp, r.n_tx, r.n_uncles
        );
    }
    out
}

/// Where every generated transaction ended up on node 0's view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TxPartition {
    pub generated: u64,
    pub confirmed: u64,
    pub pending: u64,
    /// Carried only by uncle or orphan blocks.
    pub stale_only: u64,
}

#[derive(Debug)]
pub struct RunOutcome {
    /// Node 0's final tree.
    pub tree: BlockTree,
    pub head: BlockId,
    pub node_heads: Vec<BlockId>,
    /// Total difficulty of each node's head.
    pub node_head_weights: Vec<u128>,
    /// Blocks known to each node.
    pub node_tree_sizes: Vec<usize>,
    pub stats: RunStats,
    pub partition: TxPartition,
    pub trace: Vec<TraceRecord>,
    pub invalid_blocks: u64,
}

impl RunOutcome {
    pub fn canonical_chain(&self) -> Vec<Arc<Block>> {
        self.tree.canonical_chain(&self.head).expect("head is in tree")
    }
}

/// One simulation run, configured builder-style.
pub struct Simulation {
    config: SimConfig,
    run_index: u64,
    scripted: Vec<TxArrival>,
    trace: bool,
}

impl Simulation {
    pub fn new(config: SimConfig, run_index: u64) -> Self {
        Simulation { config, run_index, scripted: Vec::new(), trace: false }
    }

    /// Adds transactions on top of the Poisson load. Ids are reassigned in
    /// arrival order.
    pub fn with_transactions(mut self, txs: Vec<TxArrival>) -> Self {
        self.scripted.extend(txs);
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = true;
        self
    }

    pub fn run(self) -> Result<RunOutcome, SimError> {
        self.config.validate()?;
        if let Some(a) = self.scripted.iter().find(|a| a.origin >= self.config.num_nodes || a.time.is_nan() || a.time < 0.0) {
            return Err(SimError::InvalidConfig(format!(
                "scripted transaction at t={} from node {} is out of range",
                a.time, a.origin
            )));
        }
        Engine::new(self)?.run()
    }
}

pub fn run_simulation(config: &SimConfig, run_index: u64) -> Result<RunOutcome, SimError> {
    Simulation::new(config.clone(), run_index).run()
}

struct Engine {
    config: SimConfig,
    params: DifficultyParams,
    nodes: Vec<NodeState>,
    queue: EventQueue,
    txs: Vec<TxArrival>,
    arrived: usize,
    rng: ChaCha8Rng,
    trace: Option<Vec<TraceRecord>>,
}

impl Engine {
    fn new(sim: Simulation) -> Result<Self, SimError> {
        let config = sim.config;
        let mut tx_rng = ChaCha8Rng::seed_from_u64(config.seed);
        tx_rng.set_stream(2 * sim.run_index);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2 * sim.run_index + 1);

        let mut txs = sim.scripted;
        txs.extend(generate_tx_arrivals(&config, &mut tx_rng));
        // stable: scripted transactions precede load arriving at the same instant
        txs.sort_by(|a, b| a.time.total_cmp(&b.time));
        for (i, a) in txs.iter_mut().enumerate() {
            a.tx.id = TxId(i as u64);
        }

        let genesis = Arc::new(Block::genesis(config.genesis_difficulty()));
        let nodes = (0..config.num_nodes).map(|i| NodeState::new(i, Arc::clone(&genesis))).collect();
        Ok(Engine {
            params: config.difficulty_params(),
            config,
            nodes,
            queue: EventQueue::new(),
            txs,
            arrived: 0,
            rng,
            trace: sim.trace.then(Vec::new),
        })
    }

    fn run(mut self) -> Result<RunOutcome, SimError> {
        if let Some(first) = self.txs.first() {
            self.queue.push(first.time, EventKind::TxArrival(0));
        }
        for node in 0..self.nodes.len() {
            self.schedule_mining(node, 0.0)?;
        }
        while let Some(ev) = self.queue.pop() {
            match ev.kind {
                EventKind::TxArrival(i) => {
                    self.arrived = i + 1;
                    if let Some(next) = self.txs.get(i + 1) {
                        self.queue.push(next.time, EventKind::TxArrival(i + 1));
                    }
                }
                EventKind::BlockMined { node, epoch } => {
                    if epoch == self.nodes[node].mining_epoch {
                        self.on_block_mined(node, ev.time)?;
                    }
                }
                EventKind::BlockReceived { node, block } => self.on_block_received(node, block, ev.time)?,
            }
        }
        self.finish()
    }

    fn schedule_mining(&mut self, node: usize, now: f64) -> Result<(), SimError> {
        let state = &mut self.nodes[node];
        state.mining_epoch += 1;
        if now > self.config.sim_duration {
            return Ok(());
        }
        let parent = &state.tree.header(&state.head)?.clone();
        let work: f64 = Exp1.sample(&mut self.rng);
        let at = solve_time(&self.params, parent, now, self.config.node_hashrate(node), work)?;
        if at <= self.config.sim_duration {
            let epoch = state.mining_epoch;
            self.queue.push(at, EventKind::BlockMined { node, epoch });
        }
        Ok(())
    }

    fn on_block_mined(&mut self, node: usize, now: f64) -> Result<(), SimError> {
        let state = &mut self.nodes[node];
        let parent = state.tree.header(&state.head)?.clone();
        let parent_id = state.head;
        let timestamp = block_timestamp(&parent, now);
        let number = parent.number + 1;
        let difficulty = compute_difficulty(&self.params, &parent, number, timestamp)?.result;
        let uncle_ids = eligible_uncles(&state.tree, &parent_id)?;
        let gas_limit = self.config.block_gas_limit;
        let transactions = fill_block(state.pending(&self.txs, self.arrived, now, &self.config), gas_limit);
        let gas_used = transactions.iter().map(|tx| tx.gas).sum();
        let header = BlockHeader {
            number,
            parent_id,
            miner: Some(node),
            difficulty,
            timestamp,
            uncle_ids,
            gas_used,
        };
        let block = Arc::new(Block::new(header, transactions)?);
        self.record(TraceKind::Mined, node, &block, now);
        self.nodes[node].receive(&self.params, self.config.fork_choice, Arc::clone(&block), now)?;
        for peer in 0..self.nodes.len() {
            if peer != node {
                let at = now + self.config.delay(node, peer);
                self.queue.push(at, EventKind::BlockReceived { node: peer, block: Arc::clone(&block) });
            }
        }
        self.schedule_mining(node, now)
    }

    fn on_block_received(&mut self, node: usize, block: Arc<Block>, now: f64) -> Result<(), SimError> {
        self.record(TraceKind::Received, node, &block, now);
        if self.nodes[node].receive(&self.params, self.config.fork_choice, block, now)? {
            self.schedule_mining(node, now)?;
        }
        Ok(())
    }

    fn record(&mut self, kind: TraceKind, node: usize, block: &Block, now: f64) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRecord {
                time: now,
                kind,
                node,
                block_id: block.id(),
                number: block.header.number,
                difficulty: block.header.difficulty,
                timestamp: block.header.timestamp,
                n_tx: block.transactions.len(),
                n_uncles: block.header.uncle_ids.len(),
            });
        }
    }

    fn finish(self) -> Result<RunOutcome, SimError> {
        let node_heads = self.nodes.iter().map(|n| n.head).collect();
        let node_head_weights = self
            .nodes
            .iter()
            .map(|n| n.tree.total_difficulty(&n.head).expect("head is in tree"))
            .collect();
        let node_tree_sizes = self.nodes.iter().map(|n| n.tree.len()).collect();
        let invalid_blocks = self.nodes.iter().map(|n| n.invalid_blocks).sum();
        let generated = self.txs.len() as u64;
        let node0 = self.nodes.into_iter().next().expect("at least one node");
        let chain = node0.tree.canonical_chain(&node0.head)?;
        let canonical: HashSet<BlockId> = chain.iter().map(|b| b.id()).collect();
        let confirmed_ids: HashSet<TxId> = chain.iter().flat_map(|b| b.transactions.iter().map(|t| t.id)).collect();
        let stale_ids: HashSet<TxId> = node0
            .tree
            .blocks()
            .filter(|b| !canonical.contains(&b.id()))
            .flat_map(|b| b.transactions.iter().map(|t| t.id))
            .filter(|id| !confirmed_ids.contains(id))
            .collect();
        let confirmed = confirmed_ids.len() as u64;
        let stale_only = stale_ids.len() as u64;
        // the pool view comes from incremental reorg bookkeeping, so this
        // count is independent of the chain walk above
        let pending = (0..generated)
            .filter(|i| !node0.is_on_chain(TxId(*i)) && !stale_ids.contains(&TxId(*i)))
            .count() as u64;
        let partition = TxPartition { generated, confirmed, pending, stale_only };
        let mut stats = compute_run_stats(&node0.tree, &node0.head, self.config.warmup_blocks)?;
        stats.pending_tx = generated - confirmed;
        Ok(RunOutcome {
            tree: node0.tree,
            head: node0.head,
            node_heads,
            node_head_weights,
            node_tree_sizes,
            stats,
            partition,
            trace: self.trace.unwrap_or_default(),
            invalid_blocks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(lambda: u64) -> SimConfig {
        SimConfig {
            lambda,
            sim_duration: 600.0,
            warmup_blocks: 10,
            num_runs: 1,
            ..SimConfig::default()
        }
    }

    #[test]
    fn defaults_validate() {
        SimConfig::default().validate().unwrap();
        let mut c = SimConfig::default();
        c.hash_shares = vec![0.5, 0.5];
        assert!(matches!(c.validate(), Err(SimError::InvalidConfig(_))));
        let mut c = SimConfig::default();
        c.mean_tx_gas = c.block_gas_limit + 1;
        assert!(c.validate().is_err());
        let mut c = SimConfig::default();
        c.link_delays.insert((0, 5), 1.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn event_queue_orders_by_time_then_sequence() {
        let mut q = EventQueue::new();
        q.push(2.0, EventKind::TxArrival(0));
        q.push(1.0, EventKind::TxArrival(1));
        q.push(1.0, EventKind::TxArrival(2));
        let order: Vec<usize> = std::iter::from_fn(|| q.pop())
            .map(|e| match e.kind {
                EventKind::TxArrival(i) => i,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(order, vec![1, 2, 0]);
    }

    #[test]
    fn timestamp_rule() {
        let mut parent = Block::genesis(1).header;
        parent.timestamp = 5;
        assert_eq!(block_timestamp(&parent, 5.2), 6);
        assert_eq!(block_timestamp(&parent, 9.9), 9);
    }

    #[test]
    fn equilibrium_fixed_points() {
        assert_eq!(equilibrium_interval(1), 0.0);
        for lambda in [2u64, 3, 9, 12] {
            let mu = equilibrium_interval(lambda);
            let l = lambda as f64;
            let steps = mu * (1.0 / mu).exp_m1() / (l / mu).exp_m1();
            assert!((steps - 1.0).abs() < 1e-9, "lambda {lambda}");
            // integer stamps pull the fixed point below the continuous lambda / ln 2
            assert!(mu < l / std::f64::consts::LN_2 && mu > 0.8 * l);
        }
    }

    #[test]
    fn mining_time_mean_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let h = 131_072.0 / 3.0;
        let mean = (0..n).map(|_| sample_mining_time(&mut rng, 131_072, h)).sum::<f64>() / n as f64;
        assert!((mean - 3.0).abs() / 3.0 < 0.01, "mean {mean}");
        let doubled = (0..n).map(|_| sample_mining_time(&mut rng, 262_144, h)).sum::<f64>() / n as f64;
        assert!((doubled / mean - 2.0).abs() < 0.02, "ratio {}", doubled / mean);
        let fast = sample_mining_time(&mut rng, 131_072, 1e18);
        assert!(fast < 1e-9);
    }

    #[test]
    fn solve_time_constant_difficulty_matches_exponential_scaling() {
        // at the minimum the difficulty is frozen, so work maps linearly to time
        let p = DifficultyParams::with_lambda(1);
        let mut parent = Block::genesis(131_072).header;
        parent.timestamp = 10;
        let t = solve_time(&p, &parent, 10.0, 131_072.0, 2.5).unwrap();
        assert!((t - 12.5).abs() < 1e-12);
    }

    #[test]
    fn solve_time_accounts_for_falling_difficulty() {
        let p = DifficultyParams::with_lambda(2);
        let parent = Block::genesis(2_048_000).header;
        let h = 2_048_000.0 / 10.0;
        let work = 3.0;
        let t = solve_time(&p, &parent, 0.0, h, work).unwrap();
        // brute-force integral of the hazard in 1 ms steps
        let mut acc = 0.0;
        let mut s = 0.0;
        let dt = 1e-3;
        while acc < work {
            let d = compute_difficulty(&p, &parent, 1, block_timestamp(&parent, s)).unwrap().result;
            acc += h / d as f64 * dt;
            s += dt;
        }
        assert!((t - s).abs() < 2e-3, "{t} vs {s}");
        // faster than at a frozen parent difficulty, since difficulty only falls
        assert!(t < 30.0);
    }

    #[test]
    fn arrivals() {
        let mut c = small(3);
        c.tx_rate = 100.0;
        c.sim_duration = 1000.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = generate_tx_arrivals(&c, &mut rng);
        let n = a.len() as f64;
        assert!((n - 100_000.0).abs() < 3.0 * 100_000f64.sqrt(), "count {n}");
        assert!(a.windows(2).all(|w| w[0].time <= w[1].time));
        assert!(a.iter().all(|x| x.time <= 1000.0 && x.tx.gas == 45_000));

        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(a, generate_tx_arrivals(&c, &mut rng2));

        c.tx_rate = 0.0;
        assert!(generate_tx_arrivals(&c, &mut rng).is_empty());
    }

    #[test]
    fn gas_spread_stays_in_bounds() {
        let mut c = small(3);
        c.tx_gas_spread = 20_000;
        c.sim_duration = 50.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = generate_tx_arrivals(&c, &mut rng);
        assert!(a.iter().all(|x| (25_000..=65_000).contains(&x.tx.gas)));
        assert!(a.iter().any(|x| x.tx.gas != 45_000));
    }

    fn filler(n: usize, gas: u64) -> Vec<Transaction> {
        let payload = Arc::new(Payload::Filler);
        (0..n)
            .map(|i| Transaction {
                id: TxId(i as u64),
                sender: Address::default(),
                contract: ContractId(0),
                payload: Arc::clone(&payload),
                gas,
                size_kb: 0.759808,
            })
            .collect()
    }

    #[test]
    fn block_filling() {
        assert!(fill_block(&[], 15_000_000).is_empty());
        let pool = filler(400, 45_000);
        let picked = fill_block(&pool, 15_000_000);
        assert_eq!(picked.len(), 333);
        assert_eq!(picked.iter().map(|t| t.gas).sum::<u64>(), 14_985_000);
        assert!(picked.iter().zip(&pool).all(|(a, b)| a.id == b.id));
        let small_pool = filler(10, 45_000);
        assert_eq!(fill_block(&small_pool, 15_000_000), small_pool);
    }

    #[test]
    fn empty_load_single_node() {
        let mut c = small(3);
        c.tx_rate = 0.0;
        c.num_nodes = 1;
        c.hash_shares = vec![1.0];
        let out = run_simulation(&c, 0).unwrap();
        assert_eq!(out.stats.throughput, 0.0);
        assert_eq!(out.stats.uncle_rate, 0.0);
        assert!(out.canonical_chain().iter().all(|b| b.transactions.is_empty()));
        assert_eq!(out.tree.len(), out.canonical_chain().len());
    }

    #[test]
    fn first_block_follows_recurrence() {
        let c = small(3);
        let out = Simulation::new(c.clone(), 0).with_trace().run().unwrap();
        let chain = out.canonical_chain();
        let b1 = &chain[1];
        assert_eq!(b1.header.number, 1);
        assert_eq!(b1.header.parent_id, chain[0].id());
        let expected = compute_difficulty(&c.difficulty_params(), &chain[0].header, 1, b1.header.timestamp).unwrap();
        assert_eq!(b1.header.difficulty, expected.result);
        let mined = out.trace.iter().filter(|r| r.kind == TraceKind::Mined).count();
        assert_eq!(mined, out.tree.len() - 1);
        assert_eq!(out.invalid_blocks, 0);
    }

    #[test]
    fn deterministic_per_run_index() {
        let c = small(3);
        let a = Simulation::new(c.clone(), 4).with_trace().run().unwrap();
        let b = Simulation::new(c.clone(), 4).with_trace().run().unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.stats, b.stats);
        let other = Simulation::new(c, 5).with_trace().run().unwrap();
        assert_ne!(a.trace, other.trace);
    }

    #[test]
    fn trace_format() {
        let out = Simulation::new(small(3), 0).with_trace().run().unwrap();
        let text = format_trace(&out.trace);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(TRACE_HEADER));
        let first = lines.next().unwrap();
        assert_eq!(first.split(',').count(), 9);
        assert!(first.contains(",mined,"));
    }

    #[test]
    fn scripted_transactions_are_merged_and_renumbered() {
        let mut c = small(3);
        c.tx_rate = 1.0;
        let tx = Transaction {
            id: TxId(999),
            sender: Address::from_label("x"),
            contract: ContractId(0),
            payload: Arc::new(Payload::Deploy),
            gas: 21_000,
            size_kb: 0.2,
        };
        let out = Simulation::new(c.clone(), 0)
            .with_transactions(vec![TxArrival { time: 0.0, origin: 0, tx }])
            .run()
            .unwrap();
        let chain = out.canonical_chain();
        let first = chain.iter().flat_map(|b| b.transactions.iter()).next().unwrap();
        assert_eq!(first.id, TxId(0));
        assert_eq!(*first.payload, Payload::Deploy);

        let bad = TxArrival { time: 1.0, origin: 9, tx: first.clone() };
        assert!(Simulation::new(c, 0).with_transactions(vec![bad]).run().is_err());
    }

    #[test]
    fn genesis_difficulty_modes() {
        let mut c = SimConfig::default();
        c.genesis = GenesisDifficulty::Minimum;
        assert_eq!(c.genesis_difficulty(), MIN_DIFFICULTY);
        c.genesis = GenesisDifficulty::Fixed(5);
        assert_eq!(c.genesis_difficulty(), MIN_DIFFICULTY);
        c.genesis = GenesisDifficulty::Equilibrium;
        c.lambda = 1;
        assert_eq!(c.genesis_difficulty(), MIN_DIFFICULTY);
        c.lambda = 9;
        let expected = (equilibrium_interval(9) * MIN_DIFFICULTY as f64).round() as u64;
        assert_eq!(c.genesis_difficulty(), expected);
        assert_eq!("eq".parse::<GenesisDifficulty>(), Ok(GenesisDifficulty::Equilibrium));
        assert_eq!("42".parse::<GenesisDifficulty>(), Ok(GenesisDifficulty::Fixed(42)));
        assert!("x".parse::<GenesisDifficulty>().is_err());
    }
}
