//! Files, configuration, evaluation and experiment orchestration.

pub mod config;
pub mod eval;
pub mod format;
pub mod heatmap;
pub mod pipeline;
pub mod report;

pub use config::{AblationFlags, DataConfig, ExperimentConfig};
pub use eval::{evaluate, EvalReport, Summary, Timing};
pub use heatmap::{export_similarity_heatmap, Heatmap, HeatmapMode};
pub use pipeline::{fit, prepare_data, run_ablation_suite, zeroshot_reports, AblationTable, ExperimentData, Fitted};
