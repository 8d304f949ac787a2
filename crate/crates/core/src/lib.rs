//! Two-chain simulation library for cross-chain smart contract result
//! validation.
//!
//! A *producer* chain runs smart contracts and records their results. A
//! *consumer* chain imports the producer's header chain plus Merkle-proven
//! contract transactions, re-executes the contracts in an isolated
//! environment, compares results byte-for-byte and then confirms the
//! producer data inside its own blocks under a dual-subtree Merkle root.
//!
//! Module map:
//!
//! - [`chain`]: blocks, transactions, proof-of-work sealing, fork choice.
//! - [`merkle`]: domain-separated dual Merkle tree and inclusion proofs.
//! - [`vm`]: deterministic contract interpreter and burden metrics.
//! - [`sync`]: header and cross-chain transaction propagation.
//! - [`scl`]: contract-level validation and collective validation.
//! - [`confirmation`]: segment planning, confirmation and conflict detection.
//! - [`simlab`]: Monte-Carlo mining races and the storage-sharing scenario.
//! - [`scenario`]: scenario file format and the end-to-end harness.

pub mod chain;
pub mod confirmation;
pub mod encoding;
pub mod hash;
pub mod merkle;
pub mod rng;
pub mod scenario;
pub mod scl;
pub mod simlab;
pub mod sync;
pub mod vm;

pub use hash::Hash256;
