//! Data generation, ingestion, training, evaluation and ablation.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod synth;
pub mod train;
