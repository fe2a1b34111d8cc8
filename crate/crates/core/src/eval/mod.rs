//! Fidelity, privacy and utility metrics.

mod fidelity;
mod packed;
mod privacy;
mod report;
mod utility;

pub use fidelity::{
    average_ranks, cmd, cmd_with, covariance, covariance_distance, mcad, mmd, mmd_at_bandwidth, spearman, CmdMode, MmdConfig, MmdValue,
};
pub use privacy::{attribute_inference_risk, membership_inference_risk, sample_exposed};
pub use report::{fidelity_report, prevalence_csv, EvalConfig, MetricReport};
pub use utility::{auprc, auroc, train_downstream, LogisticModel};
