//! Benchmark harness comparing merged and exact transformer pipelines on
//! synthetic workloads.

pub mod breakdown;
pub mod config;
pub mod pipeline;
pub mod sweep;

pub use breakdown::{runtime_breakdown, Breakdown, BreakdownConfig};
pub use config::{ConfidenceOrigin, Strategy, SweepConfig};
pub use sweep::{
    run_sweep, tradeoff_table, write_csv, write_json, BenchRecord, Measurement, SweepContext, SweepPoint, TimingStats,
};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] come_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
