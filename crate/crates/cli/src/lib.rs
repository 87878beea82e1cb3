//! Library half of the command-line frontend. The binary in `main.rs` is a
//! thin argument-parsing shell over these modules so the config schema,
//! artifact writers, and command logic stay unit-testable.

pub mod commands;
pub mod config;
pub mod output;
