//! Evaluation: classifier accuracy, Fréchet feature distance and
//! multimodality.

mod classifier;
mod report;
mod stats;

pub use classifier::{train_classifier, AccuracyReport, ClassifierConfig, ClassifierWeights};
pub use report::{evaluate_all, EvalReport, EvalSuite, ReferenceScores, PUBLISHED_NTU26};
pub use stats::{
    draw_split, feature_stats, frechet_distance, multimodality, multimodality_with_splits, split_distance,
    ClassMultimodality, FeatureStats, Multimodality, SplitRecord, EIG_CLAMP,
};
