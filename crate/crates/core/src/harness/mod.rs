//! Metrics, ablation grids and the desk-scale metamer experiment.

pub mod ablation;
pub mod experiment;
pub mod metrics;

pub use ablation::{evaluate_model, grid, run_ablation, table_csv, track_all, AblationCell, AblationConfig, GridCell};
pub use metrics::{aggregate, center_error, evaluate, iou, BenchmarkEvaluation, Curve, SeqEvaluation};
