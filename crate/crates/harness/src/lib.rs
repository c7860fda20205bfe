//! Operational shell around `maskdiff`: procedural datasets and masks, PNG
//! and JSON artifacts, proxy metrics, toy-model training and the CLI.

pub mod artifacts;
pub mod imageio;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod textures;
pub mod cli;
pub mod selftest;
