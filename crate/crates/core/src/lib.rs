//! Simulated personalized federated learning.
//!
//! Each client trains one binary (one-vs-all) classifier head per class on
//! top of a shared feed-forward feature extractor. Classes are split per
//! client into those with at least one local positive sample and those with
//! none, and the two groups get different loss terms. Easy samples are
//! dropped from the loss by probability thresholds and the remaining ones
//! are reweighted focal-style. The server averages client models weighted by
//! dataset size; every client keeps its last locally trained model as its
//! personalized model.
//!
//! Module map:
//!
//! * [`nn`]: feed-forward network, backprop and SGD with momentum.
//! * [`loss`]: the binary loss family, plain BCE and softmax cross-entropy.
//! * [`data`]: MNIST IDX loading, synthetic blobs, Dirichlet partitioning.
//! * [`federation`]: the training loop, baselines, checkpoints.
//! * [`eval`]: personalized accuracy, drift score, per-class accuracy.

pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod loss;
pub mod nn;
pub mod rng;

pub use data::{ClientDataset, IidTestSet, PartitionSpec, Sample};
pub use error::{Error, Result};
pub use eval::MetricsRecord;
pub use federation::{
    Aggregation, FederationConfig, FederationOutput, FederationState, OptimizerConfig, Strategy,
};
pub use loss::{ClassKind, ClassPresence, LossConfig};
pub use nn::{ModelParams, Sgd};
