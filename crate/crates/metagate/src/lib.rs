//! Harness for the layer-gated meta-optimizer: run configuration, checkpoint
//! and family file formats, experiment orchestration, reports and the oracle
//! self-test.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod family_io;
pub mod report;
pub mod runner;
pub mod selftest;

pub use config::RunConfig;
