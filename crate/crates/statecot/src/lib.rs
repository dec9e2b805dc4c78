//! File formats, run configuration, the pipeline commands, benchmarks and
//! the oracle suite on top of `statecot-core`.

pub mod bench;
pub mod cli;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod verify;
