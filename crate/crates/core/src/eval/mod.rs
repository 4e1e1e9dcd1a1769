//! Measurements on frozen embeddings: k-NN, linear probe, low-shot
//! logistic regression, clustering quality, effective invariance and the
//! colour-histogram shortcut probe.

mod classify;
mod cluster;
mod shortcut;

pub use classify::{
    accuracy, column_stats, encode_block_cls, encode_images, extract_embeddings,
    extract_head_embeddings, fit_logreg, knn_classify, linear_probe, logistic_regression_lowshot,
    lowshot_split, standardize, EmbeddingSet, KnnResult, LinearProbe, LogReg, LowShotConfig,
    LowShotResult, ProbeConfig, ProbeResult, Source,
};
pub use cluster::{
    cluster_accuracy, hungarian, kmeans, kmeans_single, nmi_ami_ari, silhouette, ClusterResult,
    KMeansOutput, PartitionScores, SILHOUETTE_MAX_POINTS,
};
pub use shortcut::{
    color_histogram_target, effective_invariance, histogram_probe, histogram_probe_error,
    mean_effective_invariance, probe_effective_invariance, top_predictions, uniform_baseline,
    EiTransform, HistProbeConfig, Prediction,
};
