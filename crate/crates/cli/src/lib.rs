//! Library backing the `prnn` binary. Commands live here so integration
//! tests can call them in-process; `main.rs` only parses arguments and maps
//! failures to exit codes.

pub mod bench;
pub mod config;
pub mod driver;
pub mod failure;
pub mod pipeline;
