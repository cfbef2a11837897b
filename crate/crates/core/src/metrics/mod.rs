//! Image-set quality measures and segmentation scores.

mod distribution;
mod features;
mod seg;

pub use distribution::{
    frechet_distance, gaussian_mmd, kid, median_bandwidth, mmd_unbiased, KidResult, MmdResult,
};
pub use features::{
    toy_feature_extractor, FeatureExtractor, PerceptualDistance, ToyExtractorConfig,
    ToyFeatureExtractor,
};
pub use seg::{
    aggregate_reports, boundary_pixels, directed_hausdorff, hausdorff, seg_metrics, ClassScores,
    Exclusion, MacroScores, SegMetricReport, ABSENT, ONE_SIDED_EMPTY,
};
