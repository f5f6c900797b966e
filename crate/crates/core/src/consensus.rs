//! Difficulty adjustment with a tunable interval threshold, uncle validity
//! rules and fork choice.
//!
//! The difficulty of block `i` with parent `P` is
//!
//! ```text
//! D_0 = 131072                                   (genesis)
//! D_i = max(D_0, P_D + x * zeta + epsilon)
//! x       = P_D / 2048
//! zeta    = max(y - T / lambda, -99),   y = 1 if P has no uncles else 2
//! epsilon = 2^(max(i - 5_000_000, 0) / 100_000 - 2)   (0 for negative exponents)
//! T       = timestamp - P_s
//! ```
//!
//! All divisions are floor divisions. `lambda = 9` is the public-network
//! rule; smaller thresholds shorten the block interval the controller
//! settles at.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::chain::{BlockHeader, BlockId, BlockTree, ChainError, MAX_UNCLES};

/// Threshold used by the public network.
pub const PUBLIC_LAMBDA: u64 = 9;
/// Threshold chosen for the private smart-grid network.
pub const PRIVATE_LAMBDA: u64 = 3;
/// Minimum (and genesis) difficulty.
pub const MIN_DIFFICULTY: u64 = 131_072;
/// An uncle may be at most this many blocks below its nephew.
pub const MAX_UNCLE_DEPTH: u64 = 6;
/// Number of nephew ancestors searched for an uncle's parent.
const UNCLE_ANCESTRY: usize = MAX_UNCLE_DEPTH as usize + 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConsensusError {
    #[error("timestamp {timestamp} is not after parent timestamp {parent}")]
    NonMonotonicTimestamp { parent: u64, timestamp: u64 },
    #[error("difficulty does not fit in 64 bits")]
    DifficultyOverflow,
    #[error("unknown parent {0:?}")]
    UnknownParent(BlockId),
    #[error("unknown block {0:?}")]
    UnknownBlock(BlockId),
    #[error("invalid difficulty parameters: {0}")]
    InvalidParams(&'static str),
}

impl From<ChainError> for ConsensusError {
    fn from(e: ChainError) -> Self {
        match e {
            ChainError::UnknownParent(id) => ConsensusError::UnknownParent(id),
            ChainError::UnknownBlock(id) | ChainError::DuplicateBlock(id) => ConsensusError::UnknownBlock(id),
            ChainError::GasMismatch { .. } | ChainError::BadLinkage { .. } => {
                ConsensusError::InvalidParams("malformed block")
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DifficultyParams {
    /// Interval threshold in seconds.
    pub lambda: u64,
    pub d0: u64,
    pub divisor: u64,
    pub zeta_floor: i64,
    pub bomb_offset: u64,
    pub bomb_period: u64,
}

impl DifficultyParams {
    pub fn with_lambda(lambda: u64) -> Self {
        DifficultyParams {
            lambda,
            d0: MIN_DIFFICULTY,
            divisor: 2048,
            zeta_floor: -99,
            bomb_offset: 5_000_000,
            bomb_period: 100_000,
        }
    }

    pub fn validate(&self) -> Result<(), ConsensusError> {
        if self.lambda < 1 {
            return Err(ConsensusError::InvalidParams("lambda must be >= 1"));
        }
        if self.d0 == 0 {
            return Err(ConsensusError::InvalidParams("d0 must be positive"));
        }
        if self.divisor == 0 {
            return Err(ConsensusError::InvalidParams("divisor must be positive"));
        }
        if self.zeta_floor >= 0 {
            return Err(ConsensusError::InvalidParams("zeta floor must be negative"));
        }
        if self.bomb_period == 0 {
            return Err(ConsensusError::InvalidParams("bomb period must be positive"));
        }
        Ok(())
    }
}

impl Default for DifficultyParams {
    fn default() -> Self {
        DifficultyParams::with_lambda(PRIVATE_LAMBDA)
    }
}

/// Every intermediate of one difficulty evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DifficultyTrace {
    pub t: u64,
    pub x: u64,
    pub y: i64,
    pub zeta: i64,
    pub epsilon: u64,
    pub result: u64,
}

/// Difficulty bomb term in exact integer arithmetic.
pub fn bomb(params: &DifficultyParams, block_number: u64) -> Result<u64, ConsensusError> {
    let periods = block_number.saturating_sub(params.bomb_offset) / params.bomb_period;
    if periods < 2 {
        return Ok(0);
    }
    1u64.checked_shl((periods - 2) as u32)
        .filter(|_| periods - 2 < 64)
        .ok_or(ConsensusError::DifficultyOverflow)
}

pub fn compute_difficulty(
    params: &DifficultyParams,
    parent: &BlockHeader,
    block_number: u64,
    timestamp: u64,
) -> Result<DifficultyTrace, ConsensusError> {
    if block_number == 0 {
        return Ok(DifficultyTrace { t: 0, x: 0, y: 1, zeta: 0, epsilon: 0, result: params.d0 });
    }
    if timestamp <= parent.timestamp {
        return Err(ConsensusError::NonMonotonicTimestamp { parent: parent.timestamp, timestamp });
    }
    let t = timestamp - parent.timestamp;
    let x = parent.difficulty / params.divisor;
    let y: i64 = if parent.uncle_ids.is_empty() { 1 } else { 2 };
    let steps = i64::try_from(t / params.lambda).unwrap_or(i64::MAX);
    let zeta = y.saturating_sub(steps).max(params.zeta_floor);
    let epsilon = bomb(params, block_number)?;
    let raw = parent.difficulty as i128 + x as i128 * zeta as i128 + epsilon as i128;
    let result = raw.max(params.d0 as i128);
    let result = u64::try_from(result).map_err(|_| ConsensusError::DifficultyOverflow)?;
    Ok(DifficultyTrace { t, x, y, zeta, epsilon, result })
}

/// Is `uncle_id` a valid uncle for a block with header `nephew`?
///
/// The uncle must not be an ancestor, its parent must be one of the
/// nephew's 2nd..7th ancestors, and no ancestor may already reference it.
pub fn validate_uncle(tree: &BlockTree, nephew: &BlockHeader, uncle_id: &BlockId) -> Result<bool, ConsensusError> {
    let uncle = tree.block(uncle_id)?;
    if !tree.contains(&nephew.parent_id) {
        return Err(ConsensusError::UnknownParent(nephew.parent_id));
    }
    let ancestry = nephew_ancestry(tree, &nephew.parent_id)?;
    if ancestry.contains(uncle_id) {
        return Ok(false);
    }
    if uncle.header.number >= nephew.number || uncle.header.number + MAX_UNCLE_DEPTH < nephew.number {
        return Ok(false);
    }
    if !ancestry[1..].contains(&uncle.header.parent_id) {
        return Ok(false);
    }
    for a in &ancestry {
        if tree.header(a)?.uncle_ids.contains(uncle_id) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `parent` followed by its ancestors, i.e. the nephew's ancestors at depth
/// 1..=7.
fn nephew_ancestry(tree: &BlockTree, parent: &BlockId) -> Result<Vec<BlockId>, ConsensusError> {
    let mut ancestry = Vec::with_capacity(UNCLE_ANCESTRY);
    ancestry.push(*parent);
    ancestry.extend(tree.ancestors(parent, UNCLE_ANCESTRY - 1)?);
    Ok(ancestry)
}

/// At most two uncle candidates for a child of `new_parent`, ordered by
/// block number then id.
pub fn eligible_uncles(tree: &BlockTree, new_parent: &BlockId) -> Result<Vec<BlockId>, ConsensusError> {
    let ancestry = nephew_ancestry(tree, new_parent)?;
    let included: HashSet<BlockId> = ancestry
        .iter()
        .map(|a| tree.header(a).map(|h| h.uncle_ids.clone()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut candidates = Vec::new();
    for k in 1..ancestry.len() {
        for c in tree.children(&ancestry[k]) {
            if *c != ancestry[k - 1] && !included.contains(c) {
                candidates.push((tree.header(c)?.number, *c));
            }
        }
    }
    candidates.sort();
    Ok(candidates.into_iter().take(MAX_UNCLES).map(|(_, id)| id).collect())
}

pub fn validate_header(params: &DifficultyParams, tree: &BlockTree, header: &BlockHeader) -> Result<bool, ConsensusError> {
    let parent = tree
        .get(&header.parent_id)
        .ok_or(ConsensusError::UnknownParent(header.parent_id))?;
    let parent = &parent.header;
    if header.number != parent.number + 1 || header.timestamp <= parent.timestamp {
        return Ok(false);
    }
    let expected = compute_difficulty(params, parent, header.number, header.timestamp)?;
    if header.difficulty != expected.result {
        return Ok(false);
    }
    if header.uncle_ids.len() > MAX_UNCLES {
        return Ok(false);
    }
    if header.uncle_ids.len() == 2 && header.uncle_ids[0] == header.uncle_ids[1] {
        return Ok(false);
    }
    for uncle in &header.uncle_ids {
        if !validate_uncle(tree, header, uncle)? {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ForkChoiceRule {
    /// Tip with the largest cumulative difficulty.
    #[default]
    HeaviestTotalDifficulty,
    /// Greedy descent into the heaviest subtree, stale blocks included.
    Ghost,
}

impl std::str::FromStr for ForkChoiceRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "td" | "total-difficulty" => Ok(ForkChoiceRule::HeaviestTotalDifficulty),
            "ghost" => Ok(ForkChoiceRule::Ghost),
            other => Err(format!("unknown fork choice rule `{other}` (expected td or ghost)")),
        }
    }
}

/// Orders two blocks by weight, then by earlier local receive time, then by
/// smaller id. `Greater` means `a` is preferred.
fn tie_break(tree: &BlockTree, a: &BlockId, b: &BlockId) -> Ordering {
    let ra = tree.received_at(a).unwrap_or(f64::INFINITY);
    let rb = tree.received_at(b).unwrap_or(f64::INFINITY);
    rb.total_cmp(&ra).then_with(|| b.cmp(a))
}

/// `Greater` if `a` beats `b` under heaviest-total-difficulty.
pub fn compare_heads(tree: &BlockTree, a: &BlockId, b: &BlockId) -> Ordering {
    tree.total_difficulty(a)
        .cmp(&tree.total_difficulty(b))
        .then_with(|| tie_break(tree, a, b))
}

pub fn fork_choice_head(tree: &BlockTree) -> BlockId {
    let mut best = tree.genesis_id();
    for id in tree.ids() {
        if compare_heads(tree, id, &best) == Ordering::Greater {
            best = *id;
        }
    }
    best
}

pub fn ghost_head(tree: &BlockTree) -> BlockId {
    let mut by_height: Vec<(u64, BlockId)> = tree
        .blocks()
        .map(|b| (b.header.number, b.id()))
        .collect();
    by_height.sort_by(|a, b| b.cmp(a));
    let mut weight: HashMap<BlockId, u128> = HashMap::with_capacity(by_height.len());
    for (_, id) in &by_height {
        let own = tree.header(id).map(|h| h.difficulty as u128).unwrap_or(0);
        let below: u128 = tree.children(id).iter().map(|c| weight[c]).sum();
        weight.insert(*id, own + below);
    }
    let mut cur = tree.genesis_id();
    loop {
        let next = tree.children(&cur).iter().copied().max_by(|a, b| {
            weight[a].cmp(&weight[b]).then_with(|| tie_break(tree, a, b))
        });
        match next {
            Some(n) => cur = n,
            None => return cur,
        }
    }
}

pub fn select_head(rule: ForkChoiceRule, tree: &BlockTree) -> BlockId {
    match rule {
        ForkChoiceRule::HeaviestTotalDifficulty => fork_choice_head(tree),
        ForkChoiceRule::Ghost => ghost_head(tree),
    }
}
