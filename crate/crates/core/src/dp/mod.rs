//! Differential-privacy mechanisms, DP-SGD, and Rényi-DP accounting.

pub mod accountant;
pub mod mechanisms;
pub mod rng;
pub mod sgd;

pub use accountant::{
    calibrate_noise_multiplier, dp_sgd_epsilon, rdp_compose_gaussian, to_epsilon, AccountingReceipt, RdpCurve,
    RDP_ORDERS,
};
pub use mechanisms::{clip_l2, embedding_epsilon, gaussian_perturb_embedding, laplace_mechanism, laplace_scale};
pub use rng::{derive_seed, NoiseRng};
pub use sgd::{dp_sgd_step, ClippedSum, DpSgdConfig, StepReport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DpError {
    #[error("invalid DP parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite gradient or input vector")]
    NonFiniteGradient,
}
