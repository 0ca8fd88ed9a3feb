//! The context-aware refiner: mixed sampling with surface freezing, learned
//! rigid canonicalization of patches, non-local similarity against the
//! partial input, and per-point displacement prediction.

mod canonical;
mod refiner;
mod sampling;
mod similarity;

pub use canonical::{canonicalize_backward, canonicalize_batch, canonicalize_patch, AngleNets, CanonicalBatch, CosSin};
pub use refiner::{
    refine, train_cref, train_prepared, train_prepared_monitored, trained_steps, CrefConfig, CrefModel, CrefSample, CrefTrainConfig,
    PreparedShape, RefinePass,
};
pub use sampling::{mixed_sample, SampledCloud};
pub use similarity::{
    aggregate_topk, combine_similarity, cosine_matrix, euclidean_similarity, feature_similarity,
    similarity_heatmap, similarity_matrix, sq_distance_matrix, topk_indices, Aggregation, SimilarityMatrix,
    SimilarityMode,
};
