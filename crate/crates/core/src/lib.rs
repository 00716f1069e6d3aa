pub mod align;
pub mod analysis;
pub mod config;
pub mod metrics;
pub mod scoring;
pub mod synth;
pub mod tokenize;
pub mod train;
