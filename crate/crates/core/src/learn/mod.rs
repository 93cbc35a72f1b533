//! Small neural networks, architecture search, the model registry, and
//! noisy-embedding nearest-neighbor inference.

pub mod artifact;
pub mod dnas;
pub mod features;
pub mod knn;
pub mod net;
pub mod registry;
pub mod train;

pub use artifact::{ModelArtifact, ModelSignature, OutputDecoder, Provenance};
pub use dnas::{dnas_search, finalize_with_dpsgd, Architecture, SearchOptions, SearchResult, SearchSpace, Supernet};
pub use features::{FeatureEncoder, FeatureKind, LabelSet};
pub use knn::{knn_predict, NoisyStore};
pub use net::{Activation, Dataset, LayerSpec, Loss, Mlp, Target};
pub use registry::{registry_match, ModelRegistry, RegistryMatch};
pub use train::{init_layer, train_dpsgd, train_sgd, TrainReport};

use crate::dp::DpError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LearnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty training data")]
    EmptyData,
    #[error("empty embedding store")]
    EmptyStore,
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error("model file: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(String),
}
