//! Trusted-account record store.
//!
//! The owner (the deploying account) manages a whitelist; whitelisted
//! accounts append encrypted meter records. Records are dense, 1-based and
//! never modified. [`replay_chain`] executes the contract calls of a
//! canonical chain in block and transaction order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::{Address, Block, ContractId, Payload, TxId};

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
pub enum ContractError {
    #[error("sender is not the contract owner")]
    NotOwner,
    #[error("the owner cannot be removed")]
    OwnerIrremovable,
    #[error("sender is not a trusted account")]
    Untrusted,
    #[error("contract is not deployed")]
    NotDeployed,
    #[error("contract is already deployed")]
    AlreadyDeployed,
}

/// One stored record; all fields are ciphertext and kept verbatim.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Reco {
    pub id: Vec<u8>,
    pub time: Vec<u8>,
    pub value: Vec<u8>,
}

impl Reco {
    /// SHA-256 over the length-prefixed fields.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for field in [&self.id, &self.time, &self.value] {
            h.update((field.len() as u64).to_be_bytes());
            h.update(field);
        }
        h.finalize().into()
    }
}

/// Emitted on every stored record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecoEvent {
    pub addr: Address,
    pub id: Vec<u8>,
    pub time: Vec<u8>,
    pub value: Vec<u8>,
    /// Equals `total_of_reco` right after the append.
    pub record_index: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractState {
    init_addr: Address,
    total_of_reco: u64,
    reco: BTreeMap<u64, Reco>,
    trusted_acc: BTreeMap<Address, bool>,
    event_log: Vec<RecoEvent>,
}

impl ContractState {
    pub fn deploy(sender: Address) -> Self {
        ContractState {
            init_addr: sender,
            total_of_reco: 0,
            reco: BTreeMap::new(),
            trusted_acc: BTreeMap::from([(sender, true)]),
            event_log: Vec::new(),
        }
    }

    pub fn owner(&self) -> Address {
        self.init_addr
    }

    pub fn total_of_reco(&self) -> u64 {
        self.total_of_reco
    }

    pub fn is_trusted(&self, addr: &Address) -> bool {
        self.trusted_acc.get(addr).copied().unwrap_or(false)
    }

    /// Trusted accounts in address order.
    pub fn trusted(&self) -> impl Iterator<Item = &Address> + '_ {
        self.trusted_acc.iter().filter(|(_, t)| **t).map(|(a, _)| a)
    }

    /// Record `index`, 1-based.
    pub fn record(&self, index: u64) -> Option<&Reco> {
        self.reco.get(&index)
    }

    pub fn records(&self) -> impl Iterator<Item = (u64, &Reco)> + '_ {
        self.reco.iter().map(|(k, v)| (*k, v))
    }

    pub fn events(&self) -> &[RecoEvent] {
        &self.event_log
    }

    pub fn add_acc(&mut self, sender: Address, addr: Address) -> Result<(), ContractError> {
        if sender != self.init_addr {
            return Err(ContractError::NotOwner);
        }
        self.trusted_acc.insert(addr, true);
        Ok(())
    }

    pub fn rm_acc(&mut self, sender: Address, addr: Address) -> Result<(), ContractError> {
        if sender != self.init_addr {
            return Err(ContractError::NotOwner);
        }
        if addr == self.init_addr {
            return Err(ContractError::OwnerIrremovable);
        }
        self.trusted_acc.remove(&addr);
        Ok(())
    }

    pub fn new_reco(
        &mut self,
        sender: Address,
        id: Vec<u8>,
        time: Vec<u8>,
        value: Vec<u8>,
    ) -> Result<&RecoEvent, ContractError> {
        if !self.is_trusted(&sender) {
            return Err(ContractError::Untrusted);
        }
        self.total_of_reco += 1;
        let index = self.total_of_reco;
        self.reco.insert(index, Reco { id: id.clone(), time: time.clone(), value: value.clone() });
        self.event_log.push(RecoEvent { addr: sender, id, time, value, record_index: index });
        Ok(self.event_log.last().expect("just pushed"))
    }

    /// Line-oriented dump:
    ///
    /// ```text
    /// owner 0x<40 hex>
    /// records <n>
    /// trusted 0x<40 hex>        one line per trusted account, address order
    /// reco <k> <64 hex digest>  one line per record, k = 1..n
    /// ```
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "owner {}", self.init_addr);
        let _ = writeln!(out, "records {}", self.total_of_reco);
        for a in self.trusted() {
            let _ = writeln!(out, "trusted {a}");
        }
        for (k, r) in &self.reco {
            let _ = writeln!(out, "reco {k} {}", hex::encode(r.digest()));
        }
        out
    }
}

/// A contract call that was included on chain but rejected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FailedCall {
    pub tx: TxId,
    pub block_number: u64,
    pub contract: ContractId,
    pub sender: Address,
    pub kind: &'static str,
    pub error: ContractError,
}

/// A call that changed contract state, with the sender's trust status at
/// execution time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditEntry {
    pub tx: TxId,
    pub contract: ContractId,
    pub sender: Address,
    pub kind: &'static str,
    pub sender_trusted: bool,
}

/// Result of executing a chain against fresh contract instances.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Replay {
    pub contracts: BTreeMap<ContractId, ContractState>,
    pub failures: Vec<FailedCall>,
    pub audit: Vec<AuditEntry>,
    /// Contract calls seen, failed or not. Filler load is not counted.
    pub calls: u64,
}

impl Replay {
    pub fn contract(&self, id: ContractId) -> Option<&ContractState> {
        self.contracts.get(&id)
    }

    pub fn failure_count(&self) -> usize {
        self.failures.len()
    }

    /// Dump of every instance, each preceded by `contract <id>`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (id, state) in &self.contracts {
            let _ = writeln!(out, "contract {}", id.0);
            out.push_str(&state.dump());
        }
        out
    }

    fn apply(&mut self, contract: ContractId, sender: Address, payload: &Payload) -> Result<(), ContractError> {
        if let Payload::Deploy = payload {
            if self.contracts.contains_key(&contract) {
                return Err(ContractError::AlreadyDeployed);
            }
            self.contracts.insert(contract, ContractState::deploy(sender));
            return Ok(());
        }
        let state = self.contracts.get_mut(&contract).ok_or(ContractError::NotDeployed)?;
        match payload {
            Payload::AddAcc(addr) => state.add_acc(sender, *addr),
            Payload::RmAcc(addr) => state.rm_acc(sender, *addr),
            Payload::NewReco { id, time, value } => state
                .new_reco(sender, id.clone(), time.clone(), value.clone())
                .map(|_| ()),
            Payload::Filler | Payload::Deploy => unreachable!("handled above"),
        }
    }
}

/// Executes every contract call in block order, then transaction order.
/// Failed calls leave state untouched and are recorded.
pub fn replay_chain<'a, I>(chain: I) -> Replay
where
    I: IntoIterator<Item = &'a Block>,
{
    let mut replay = Replay::default();
    for block in chain {
        for tx in &block.transactions {
            if let Payload::Filler = *tx.payload {
                continue;
            }
            replay.calls += 1;
            let trusted_before = replay
                .contracts
                .get(&tx.contract)
                .is_some_and(|s| s.is_trusted(&tx.sender));
            match replay.apply(tx.contract, tx.sender, &tx.payload) {
                Ok(()) => replay.audit.push(AuditEntry {
                    tx: tx.id,
                    contract: tx.contract,
                    sender: tx.sender,
                    kind: tx.payload.kind(),
                    sender_trusted: trusted_before,
                }),
                Err(error) => replay.failures.push(FailedCall {
                    tx: tx.id,
                    block_number: block.header.number,
                    contract: tx.contract,
                    sender: tx.sender,
                    kind: tx.payload.kind(),
                    error,
                }),
            }
        }
    }
    replay
}
