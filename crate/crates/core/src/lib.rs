//! Deterministic simulator for graph-guided federated sequential
//! recommendation.
//!
//! Clients own private interaction logs and a small neural recommender
//! (text-derived user embedding, item embeddings, one transformer block,
//! user MLP and scoring MLP). Each round the server builds a top-k user
//! similarity graph from the uploaded joint-embedding weights, propagates
//! the uploaded item tables over it with one normalized graph convolution
//! and broadcasts the result back.

pub mod data;
pub mod error;
pub mod federation;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod server;
pub mod snapshot;
pub mod text;

pub use data::{EvalCandidates, InteractionDataset, RawDataset, SplitMode, UserProfile};
pub use error::{Error, Result};
pub use federation::{
    run_ablation, run_experiment, AggregationKind, ExperimentOutcome, FederationConfig, ReduceMode,
    RoundMetrics, Variant,
};
pub use linalg::Matrix;
pub use model::{ClientModelParams, ModelShape, UploadPacket};
pub use server::{GlobalItemEmbedding, SimilarityMatrix, UserGraph};
pub use text::{EmbeddingTable, HashEncoder, TextEmbedding};
