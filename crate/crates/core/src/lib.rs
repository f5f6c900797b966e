//! Deterministic discrete-event simulator of a small private proof-of-work
//! chain for smart-grid metering data.
//!
//! The crate is split along the data flow:
//!
//! * [`chain`] holds the block/transaction model and the block tree.
//! * [`consensus`] implements the threshold-based difficulty recurrence,
//!   uncle rules and fork choice.
//! * [`netsim`] runs the event-driven mining and propagation experiment.
//! * [`metrics`] turns finished runs into throughput / uncle rate / interval
//!   figures and aggregates them.
//! * [`contract`] is the trusted-account record store executed over the
//!   canonical chain.
//! * [`meter`] encodes and AES-256-CTR encrypts smart-meter readings.
//! * [`experiment`] wires the pieces into sweeps, the main-network
//!   comparison point and the end-to-end demo.

pub mod chain;
pub mod config;
pub mod consensus;
pub mod contract;
pub mod experiment;
pub mod meter;
pub mod metrics;
pub mod netsim;

pub use chain::{Address, Block, BlockHeader, BlockId, BlockTree, ContractId, Payload, Transaction, TxId};
pub use consensus::{DifficultyParams, DifficultyTrace, ForkChoiceRule};
pub use metrics::{RunStats, SweepPoint};
pub use netsim::{SimConfig, Simulation};
