//! Noise-regression losses (weighted and unweighted), the two-arm oracle
//! target loss, and the end-to-end training loop with checkpointing.

pub mod config;
pub mod loss;
pub mod trainer;

pub use config::{EarlyStopping, LossKind, TrainConfig};
pub use loss::{
    diffusion_loss_term, ipw_loss_estimate, orthogonal_loss, per_sample_terms, tape_loss, target_loss, weighted_loss,
    LossEstimate, NoiseDraws,
};
pub use trainer::{train, train_denoiser, TrainReport, TrainedModel, DENOISER_FILE, PROPENSITY_FILE};
