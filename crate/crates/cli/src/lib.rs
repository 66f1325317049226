//! Command-line pipeline over the core library: dataset generation,
//! calibrated training, rollout export, and evaluation reports, all driven
//! by one JSON config per run.

pub mod commands;
pub mod config;
