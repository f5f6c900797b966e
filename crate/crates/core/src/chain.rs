//! Hash-linked block and transaction model, and the block tree every node
//! keeps.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Maximum number of uncle references a header may carry.
pub const MAX_UNCLES: usize = 2;

/// Header overhead used when modeling block size, in kB.
pub const DEFAULT_HEADER_OVERHEAD_KB: f64 = 0.5;

/// 20-byte account identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Address(pub [u8; 20]);

impl Address {
    /// Deterministic address derived from an arbitrary label. Used for
    /// synthetic load senders and tests.
    pub fn from_label(label: &str) -> Self {
        let digest = Sha256::digest(label.as_bytes());
        let mut bytes = [0u8; 20];
        bytes.copy_from_slice(&digest[..20]);
        Address(bytes)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({})", hex::encode(self.0))
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", hex::encode(self.0))
    }
}

/// Block identifier: SHA-256 over the header fields and the ordered
/// transaction ids.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct BlockId(pub [u8; 32]);

impl BlockId {
    pub const ZERO: BlockId = BlockId([0u8; 32]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlockId({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Transaction identifier, unique within one simulation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TxId(pub u64);

/// Contract instance a call is addressed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ContractId(pub u32);

/// What a transaction asks the record contract to do.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    /// Synthetic load traffic with no contract effect.
    Filler,
    Deploy,
    AddAcc(Address),
    RmAcc(Address),
    NewReco {
        id: Vec<u8>,
        time: Vec<u8>,
        value: Vec<u8>,
    },
}

impl Payload {
    /// Bytes of call arguments carried by the payload.
    pub fn argument_bytes(&self) -> usize {
        match self {
            Payload::Filler | Payload::Deploy => 0,
            Payload::AddAcc(_) | Payload::RmAcc(_) => 20,
            Payload::NewReco { id, time, value } => id.len() + time.len() + value.len(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Filler => "filler",
            Payload::Deploy => "deploy",
            Payload::AddAcc(_) => "add_acc",
            Payload::RmAcc(_) => "rm_acc",
            Payload::NewReco { .. } => "new_reco",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transaction {
    pub id: TxId,
    pub sender: Address,
    pub contract: ContractId,
    pub payload: Arc<Payload>,
    /// Gas units charged against the block gas limit.
    pub gas: u64,
    /// Serialized size in kB.
    pub size_kb: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockHeader {
    pub number: u64,
    pub parent_id: BlockId,
    /// Index of the mining node; `None` for genesis.
    pub miner: Option<usize>,
    pub difficulty: u64,
    /// Integer seconds.
    pub timestamp: u64,
    pub uncle_ids: Vec<BlockId>,
    pub gas_used: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    id: BlockId,
    pub header: BlockHeader,
    pub transactions: Vec<Transaction>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChainError {
    #[error("unknown parent {0:?}")]
    UnknownParent(BlockId),
    #[error("duplicate block {0:?}")]
    DuplicateBlock(BlockId),
    #[error("unknown block {0:?}")]
    UnknownBlock(BlockId),
    #[error("gas_used {declared} does not match transaction gas {actual}")]
    GasMismatch { declared: u64, actual: u64 },
    #[error("block {id:?} violates header linkage: {reason}")]
    BadLinkage { id: BlockId, reason: &'static str },
}

impl Block {
    /// Builds a block and derives its id. `header.gas_used` must equal the
    /// summed transaction gas.
    pub fn new(header: BlockHeader, transactions: Vec<Transaction>) -> Result<Self, ChainError> {
        let actual: u64 = transactions.iter().map(|tx| tx.gas).sum();
        if actual != header.gas_used {
            return Err(ChainError::GasMismatch { declared: header.gas_used, actual });
        }
        let id = block_digest(&header, &transactions);
        Ok(Block { id, header, transactions })
    }

    pub fn genesis(difficulty: u64) -> Self {
        let header = BlockHeader {
            number: 0,
            parent_id: BlockId::ZERO,
            miner: None,
            difficulty,
            timestamp: 0,
            uncle_ids: Vec::new(),
            gas_used: 0,
        };
        Block::new(header, Vec::new()).expect("empty genesis is consistent")
    }

    pub fn id(&self) -> BlockId {
        self.id
    }

    /// Size used for propagation modeling: transactions plus header overhead.
    pub fn size_kb(&self, header_overhead_kb: f64) -> f64 {
        header_overhead_kb + self.transactions.iter().map(|tx| tx.size_kb).sum::<f64>()
    }
}

fn block_digest(header: &BlockHeader, transactions: &[Transaction]) -> BlockId {
    let mut h = Sha256::new();
    h.update(header.number.to_be_bytes());
    h.update(header.parent_id.0);
    match header.miner {
        Some(m) => {
            h.update([1u8]);
            h.update((m as u64).to_be_bytes());
        }
        None => h.update([0u8]),
    }
    h.update(header.difficulty.to_be_bytes());
    h.update(header.timestamp.to_be_bytes());
    h.update((header.uncle_ids.len() as u64).to_be_bytes());
    for uncle in &header.uncle_ids {
        h.update(uncle.0);
    }
    h.update(header.gas_used.to_be_bytes());
    h.update((transactions.len() as u64).to_be_bytes());
    for tx in transactions {
        h.update(tx.id.0.to_be_bytes());
    }
    BlockId(h.finalize().into())
}

#[derive(Clone, Debug)]
struct Entry {
    block: Arc<Block>,
    total_difficulty: u128,
    received_at: f64,
    children: Vec<BlockId>,
}

/// All blocks a node knows about, indexed by id, with cumulative difficulty.
///
/// Iteration order (`ids`) is insertion order, which keeps every derived
/// output deterministic.
#[derive(Clone, Debug)]
pub struct BlockTree {
    entries: HashMap<BlockId, Entry>,
    order: Vec<BlockId>,
    genesis_id: BlockId,
}

impl BlockTree {
    pub fn new(genesis: Arc<Block>) -> Self {
        let id = genesis.id();
        let entry = Entry {
            total_difficulty: genesis.header.difficulty as u128,
            block: genesis,
            received_at: 0.0,
            children: Vec::new(),
        };
        let mut entries = HashMap::new();
        entries.insert(id, entry);
        BlockTree { entries, order: vec![id], genesis_id: id }
    }

    pub fn genesis_id(&self) -> BlockId {
        self.genesis_id
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn contains(&self, id: &BlockId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn get(&self, id: &BlockId) -> Option<&Arc<Block>> {
        self.entries.get(id).map(|e| &e.block)
    }

    pub fn block(&self, id: &BlockId) -> Result<&Arc<Block>, ChainError> {
        self.get(id).ok_or(ChainError::UnknownBlock(*id))
    }

    pub fn header(&self, id: &BlockId) -> Result<&BlockHeader, ChainError> {
        self.block(id).map(|b| &b.header)
    }

    pub fn total_difficulty(&self, id: &BlockId) -> Option<u128> {
        self.entries.get(id).map(|e| e.total_difficulty)
    }

    /// Local time at which this node first saw the block.
    pub fn received_at(&self, id: &BlockId) -> Option<f64> {
        self.entries.get(id).map(|e| e.received_at)
    }

    pub fn children(&self, id: &BlockId) -> &[BlockId] {
        self.entries.get(id).map(|e| e.children.as_slice()).unwrap_or(&[])
    }

    /// Block ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = &BlockId> + '_ {
        self.order.iter()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Arc<Block>> + '_ {
        self.order.iter().map(move |id| &self.entries[id].block)
    }

    /// Adds a block whose parent is already present.
    ///
    /// Only structural linkage is checked here; difficulty and uncle rules
    /// are the consensus module's job.
    pub fn insert_block(&mut self, block: Arc<Block>, received_at: f64) -> Result<(), ChainError> {
        let id = block.id();
        if self.entries.contains_key(&id) {
            return Err(ChainError::DuplicateBlock(id));
        }
        let parent_id = block.header.parent_id;
        let parent = self.entries.get(&parent_id).ok_or(ChainError::UnknownParent(parent_id))?;
        let ph = &parent.block.header;
        if block.header.number != ph.number + 1 {
            return Err(ChainError::BadLinkage { id, reason: "number is not parent + 1" });
        }
        if block.header.timestamp <= ph.timestamp {
            return Err(ChainError::BadLinkage { id, reason: "timestamp not after parent" });
        }
        if block.header.uncle_ids.len() > MAX_UNCLES {
            return Err(ChainError::BadLinkage { id, reason: "too many uncles" });
        }
        let total_difficulty = parent.total_difficulty + block.header.difficulty as u128;
        self.entries.get_mut(&parent_id).expect("parent checked").children.push(id);
        self.entries.insert(id, Entry { block, total_difficulty, received_at, children: Vec::new() });
        self.order.push(id);
        Ok(())
    }

    /// Parent path from genesis to `head`, inclusive.
    pub fn canonical_chain(&self, head: &BlockId) -> Result<Vec<Arc<Block>>, ChainError> {
        let mut cur = self.block(head)?;
        let mut out = Vec::with_capacity(cur.header.number as usize + 1);
        loop {
            out.push(Arc::clone(cur));
            if cur.header.number == 0 {
                break;
            }
            cur = self.block(&cur.header.parent_id)?;
        }
        out.reverse();
        Ok(out)
    }

    /// Up to `depth` ancestors of `id`, nearest first.
    pub fn ancestors(&self, id: &BlockId, depth: usize) -> Result<Vec<BlockId>, ChainError> {
        let mut cur = self.block(id)?;
        let mut out = Vec::with_capacity(depth);
        while out.len() < depth && cur.header.number > 0 {
            let parent = cur.header.parent_id;
            out.push(parent);
            cur = self.block(&parent)?;
        }
        Ok(out)
    }

    /// True if `ancestor` lies on the parent path of `id` (or equals it).
    pub fn is_ancestor_or_self(&self, ancestor: &BlockId, id: &BlockId) -> bool {
        let Some(target) = self.get(ancestor) else { return false };
        let target_number = target.header.number;
        let mut cur = match self.get(id) {
            Some(b) => b,
            None => return false,
        };
        while cur.header.number > target_number {
            cur = match self.get(&cur.header.parent_id) {
                Some(b) => b,
                None => return false,
            };
        }
        cur.id() == *ancestor
    }
}


#[cfg(test)]
mod tests {
    use super::test_util::child;
    use super::*;

    fn tree() -> (BlockTree, Arc<Block>) {
        let g = Arc::new(Block::genesis(131_072));
        (BlockTree::new(Arc::clone(&g)), g)
    }

    #[test]
    fn genesis_child_total_difficulty() {
        let (mut t, g) = tree();
        let b = child(&g, 131_072, 3, 0);
        t.insert_block(Arc::clone(&b), 1.0).unwrap();
        assert_eq!(t.total_difficulty(&b.id()), Some(2 * 131_072));
    }

    #[test]
    fn duplicate_insert_is_signaled_and_harmless() {
        let (mut t, g) = tree();
        let b = child(&g, 131_072, 3, 0);
        t.insert_block(Arc::clone(&b), 1.0).unwrap();
        assert_eq!(t.insert_block(Arc::clone(&b), 2.0), Err(ChainError::DuplicateBlock(b.id())));
        assert_eq!(t.len(), 2);
        assert_eq!(t.received_at(&b.id()), Some(1.0));
        assert_eq!(t.children(&g.id()).len(), 1);
    }

    #[test]
    fn three_block_chain_total() {
        // genesis is the first of the three addends
        let g = Arc::new(Block::genesis(131_072));
        let mut t = BlockTree::new(Arc::clone(&g));
        let b1 = child(&g, 131_136, 1, 0);
        let b2 = child(&b1, 131_200, 1, 0);
        t.insert_block(Arc::clone(&b1), 0.0).unwrap();
        t.insert_block(Arc::clone(&b2), 0.0).unwrap();
        assert_eq!(t.total_difficulty(&b2.id()), Some(393_408));
    }

    #[test]
    fn unknown_parent_rejected() {
        let (mut t, g) = tree();
        let b1 = child(&g, 1, 1, 0);
        let b2 = child(&b1, 1, 1, 0);
        assert_eq!(t.insert_block(b2, 0.0), Err(ChainError::UnknownParent(b1.id())));
    }

    #[test]
    fn linkage_violations_rejected() {
        let (mut t, g) = tree();
        let mut header = child(&g, 5, 1, 0).header.clone();
        header.timestamp = 0;
        let b = Arc::new(Block::new(header, vec![]).unwrap());
        assert!(matches!(t.insert_block(b, 0.0), Err(ChainError::BadLinkage { .. })));

        let mut header = child(&g, 5, 1, 0).header.clone();
        header.uncle_ids = vec![BlockId([1; 32]), BlockId([2; 32]), BlockId([3; 32])];
        let b = Arc::new(Block::new(header, vec![]).unwrap());
        assert!(matches!(t.insert_block(b, 0.0), Err(ChainError::BadLinkage { .. })));
    }

    #[test]
    fn gas_mismatch_rejected() {
        let g = Block::genesis(1);
        let mut header = child(&g, 1, 1, 0).header.clone();
        header.gas_used = 7;
        assert_eq!(Block::new(header, vec![]), Err(ChainError::GasMismatch { declared: 7, actual: 0 }));
    }

    #[test]
    fn canonical_chain_paths() {
        let (mut t, g) = tree();
        assert_eq!(t.canonical_chain(&g.id()).unwrap().len(), 1);

        let mut tip = Arc::clone(&g);
        for _ in 0..4 {
            let next = child(&tip, 10, 1, 0);
            t.insert_block(Arc::clone(&next), 0.0).unwrap();
            tip = next;
        }
        let chain = t.canonical_chain(&tip.id()).unwrap();
        assert_eq!(chain.len(), 5);
        assert!(chain.windows(2).all(|w| w[1].header.number == w[0].header.number + 1));

        // branch B off genesis never shows up on branch A's path
        let b = child(&g, 10, 2, 1);
        t.insert_block(Arc::clone(&b), 0.0).unwrap();
        let chain = t.canonical_chain(&tip.id()).unwrap();
        assert!(chain.iter().all(|blk| blk.id() != b.id()));

        assert!(matches!(t.canonical_chain(&BlockId([9; 32])), Err(ChainError::UnknownBlock(_))));
    }

    #[test]
    fn ancestors_truncate_at_genesis() {
        let (mut t, g) = tree();
        assert!(t.ancestors(&g.id(), 6).unwrap().is_empty());
        let mut chain = vec![Arc::clone(&g)];
        for _ in 0..4 {
            let next = child(chain.last().unwrap(), 10, 1, 0);
            t.insert_block(Arc::clone(&next), 0.0).unwrap();
            chain.push(next);
        }
        assert_eq!(t.ancestors(&chain[3].id(), 2).unwrap(), vec![chain[2].id(), chain[1].id()]);
        let up = t.ancestors(&chain[4].id(), 6).unwrap();
        assert_eq!(up.len(), 4);
        assert_eq!(*up.last().unwrap(), g.id());
    }

    #[test]
    fn block_size_includes_header_overhead() {
        let g = Block::genesis(1);
        assert!((g.size_kb(DEFAULT_HEADER_OVERHEAD_KB) - 0.5).abs() < 1e-12);
    }
}
