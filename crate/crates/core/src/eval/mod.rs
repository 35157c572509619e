//! Metrics, linear baselines, the ablation/shot/seed experiment runner and
//! report files.

pub mod baseline;
pub mod experiment;
pub mod metrics;
pub mod report;

pub use baseline::{baseline, linear_baseline, logistic_baseline};
pub use experiment::{run_experiment, ExperimentConfig, Variant, VariantName};
pub use metrics::{auc, auc_multiclass, mse};
pub use report::{
    emit_report, fmt_mean_std, parse_results, read_results, regenerate_aggregate, render_aggregate, ExperimentReport,
    Metric, MetricResult,
};
