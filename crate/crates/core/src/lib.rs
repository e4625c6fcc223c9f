//! Training-free composed image retrieval over precomputed embeddings.
//!
//! The pipeline fuses generated proxy images with the query image and the
//! caption edit direction into a robust proxy vector, scores it against the
//! gallery next to a text-side baseline, balances the two similarity vectors
//! and evaluates the resulting rankings.
//!
//! ```no_run
//! use cirfuse::{pipeline, resolve_manifest_file, RunConfig};
//!
//! let ds = resolve_manifest_file("data/manifest.json")?;
//! let mut config = RunConfig::new("data/manifest.json");
//! config.lambda = 0.3;
//! let out = pipeline::retrieve(&ds, &config)?;
//! println!("{}", out.report.to_json());
//! # Ok::<(), cirfuse::Error>(())
//! ```

pub mod cli;
pub mod engine;
pub mod error;
pub mod fusion;
pub mod kernel;
pub mod layout;
pub mod metrics;
pub mod pipeline;
pub mod store;
pub mod synth;

pub use engine::{
    balance, balanced_similarity, cosine_scores, lambda_crossover, minmax_normalize, top_k,
    BalanceParams, Normalization, RankedList, ScoreMatrix, SimilarityVector,
};
pub use error::{Error, Result};
pub use fusion::{
    robust_proxy, robust_proxy_with, semantic_perturbation, AggregationMode, FusionConfig,
    FusionInputs, FusionWeights, MaxMode, RobustProxy,
};
pub use kernel::Kernel;
pub use layout::{
    duplicate_image_instances, parse_layout, validate_layout, BBox, LayoutInstance, Modality,
    ProxyLayout, Violation,
};
pub use metrics::{map_at_k, recall_at_k, subset_recall_at_k, EvalConfig, EvalReport, Metric};
pub use pipeline::{RunConfig, Threads};
pub use store::{
    l2_normalize, load_embedding_set, mean_embedding, resolve_manifest, resolve_manifest_file,
    write_embedding_set, Dataset, DatasetManifest, Embedding, EmbeddingSet, MetricProtocol, Role,
};
pub use synth::{generate, oracle_evaluate, SynthSpec};
