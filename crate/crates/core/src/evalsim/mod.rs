//! Offline metrics and the closed-loop exposure simulator.

mod metrics;
mod sim;

pub use metrics::{auc, exposure_concentration, recall_at_k};
pub use sim::{
    build_holdout, evaluate, offline_comparison, run_loop, top_k, write_loop_csv, Holdout, LoopConfig, Policy, RoundMetrics,
    RunMeta, LOOP_CSV_HEADER,
};
