//! Context-parallel HSTU attention over jagged (variable-length) batches.
//!
//! The crate simulates a context-parallel group in one process: each rank's
//! jagged batch is split into mini-chunks, redistributed with AllGather or
//! AllToAll, processed by ring attention and returned to its original rank.
//! Communication is accounted per rank so protocols can be compared.

pub mod attention;
pub mod comm;
pub mod engine;
pub mod harness;
pub mod jagged;
pub mod matrix;
pub mod scalar;
