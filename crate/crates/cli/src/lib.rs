//! Command-line surface for densepan: tensor bundles, panoptic archives,
//! subcommands and the benchmark harness.

pub mod bench;
pub mod bundle;
pub mod codec;
pub mod commands;
