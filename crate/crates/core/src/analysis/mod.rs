//! Compute accounting, pruning sensitivity and attention attribution.

mod attribution;
mod compute;
mod sensitivity;

pub use attribution::{aggregate_attention, attribution_maps, cosine, resize_bilinear, AttributionMaps};
pub use compute::{conv_macs, count_macs, count_params, linear_macs, ComputeReport, ComputeRow, StageTotal, MAC_CONVENTION};
pub use sensitivity::{
    default_metrics, probe_targets, probe_variant, sensitivity_analysis, Granularity, MetricFn, ProbeKind, SensitivityReport,
    SensitivityRow,
};
