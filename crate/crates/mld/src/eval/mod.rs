//! Evaluation stack: joint-space errors, feature-space metrics, the small
//! feature extractors they rely on, and the sampling-speed benchmark.

mod bench;
mod extractor;
mod features;
mod joints;

pub use bench::{aits_bench, raw_baseline_aits, AitsReport};

pub use extractor::{
    action_accuracy, train_classifier, train_dual_encoder, ActionClassifier, ClassifierReport,
    DualEncoder, DualReport, ExtractorConfig,
};

pub use features::{
    diversity, fid, frechet_distance, mean_and_cov, multimodality, retrieval_metrics,
    FeatureSet, MetricEntry, MetricReport, RetrievalReport, DEFAULT_METRIC_REPS,
};
pub use joints::{joint_errors, joint_positions, similarity_aligned_error, JointErrorReport};
