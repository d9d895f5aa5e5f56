//! Per-block measurements on a frozen model. Every probe runs in eval mode
//! on its own tape and leaves the model untouched.

mod blocks;
mod gradient;
mod record;

pub use blocks::{
    block_probes, block_vectors, borderline_groups, borderline_report, borderline_split, cosine, cosine_loss_probe,
    cosine_rows, drop_block_eval, drop_scan, entropy, group_metric, group_metrics, group_metrics_from,
    intermediate_accuracy, intermediate_eval, l2_ratio_probe, l2_ratio_rows, margin, BlockGroupMetrics, BlockProbe,
    BlockVectors, BorderlineReport, Group, GroupMetric, Groups, Measured,
};
pub use gradient::{
    first_layer_gradient_step_check, grad_norm_ratio, loglog_slope, taylor_residual_check, taylor_residuals,
    GradNormReport, StepCheck, TaylorReport, TaylorSample, TAYLOR_SCALES,
};
pub use record::{ProbeKind, ProbeRecord, ProbeRow, PROBES_SCHEMA_VERSION};
