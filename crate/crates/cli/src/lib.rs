//! Library surface of the `flowgeo` binary: run configs, presets, and the
//! command implementations, exposed for integration tests.

pub mod commands;
pub mod config;
