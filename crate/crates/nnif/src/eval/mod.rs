//! Metrics, experiment drivers, and report emission.

pub mod experiments;
pub mod metrics;
pub mod report;

pub use experiments::{
    run_ablation, run_detection, run_generalization, run_whitebox, DetectionSettings, FeatureSet,
    LayerMode,
};
pub use metrics::{detection_accuracy, roc_auc, roc_auc_pairwise, roc_points};
pub use report::ExperimentReport;
