//! Corpus IO, checkpoints, latency benchmarks, the verification suite and the
//! `flashkit` command line on top of `flashkit-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod verify;

pub use flashkit_core as core;
