//! Top-k sparse autoencoder with an optional archetypal dictionary.

mod adamw;
mod anchors;
mod codes;
mod config;
mod dictionary;
mod model;
mod schedule;
mod state;
mod train;

pub use adamw::AdamW;
pub use anchors::{fit_anchors, kmeans, KmeansResult, KMEANS_MAX_ITERS};
pub use codes::SparseCodeMatrix;
pub use config::{AnchorStrategy, SaeConfig};
pub use dictionary::{decode, Archetypes, Dictionary};
pub use model::{
    encode, top_k_positive, DecoderParams, Gradients, LossParts, Param, RowSelection, Sae,
};
pub use schedule::WarmupCosine;
pub use train::{evaluate, train, EpochStats, Evaluation, TrainReport};
