//! Principle-based prompt experts.
//!
//! A training set is embedded and clustered; for each cluster a
//! [`Constitution`] (per-class lists of natural-language principles) is
//! evolved by beam search. Each iteration samples misclassified examples,
//! asks an optimizer model for single-principle edits and keeps the best
//! candidates by UCB bandit selection on validation data. At inference an
//! example is routed to the expert with the nearest centroid.
//!
//! All model calls go through [`gateway::Gateway`], which adds caching,
//! retries, rate limiting and transcripts over pluggable backends, including
//! the deterministic [`gateway::mock`] oracle used for offline runs.

pub mod clustering;
pub mod data;
pub mod domain;
pub mod gateway;
pub mod metrics;
pub mod optimizer;
pub mod persist;
pub mod prompts;
pub mod rng;
pub mod toy;
pub mod vector;

pub use clustering::{ClusterModel, EmbeddingMatrix};
pub use data::{Dataset, Splits, Task};
pub use domain::{
    BanditConfig, ClassLabel, Constitution, Example, Expert, ExpertEnsemble, MutationOp, Prediction, Principle,
    Provenance, TrainConfig,
};
pub use gateway::{Gateway, GatewayError, Role};
pub use metrics::EvalReport;
pub use optimizer::{predict, train_ensemble, train_expert, OptimizerError, TrainControl};
pub use persist::{load_ensemble, save_ensemble, PersistError};
