//! Training-free compression of dense checkpoints into shared atoms.

pub mod grouping;
pub mod pca;
pub mod pipeline;
pub mod refine;

pub use grouping::{
    group_blocks, groups_from_kl, kl_divergence, layer_pmfs, BlockProbe, GroupSpec,
    LayerPmfSequence,
};
pub use pca::{matrix_pca, pca_reconstruction_error, PcaResult};
pub use pipeline::{
    compress_model, thread_cap, CompressOptions, CompressionReport, GroupSelection, PairingPolicy,
    ReportRow, THREADS_ENV,
};
pub use refine::{
    autocorrelation, balanced_rank_allocation, refine_residual, residual_budget, tail_sums,
    RankAllocation, ResidualFactor,
};
