//! Noise schedules, the forward process, reverse-step parameterization,
//! ancestral sampling and evidence-lower-bound diagnostics.

pub mod elbo;
pub mod process;
pub mod sampler;
pub mod schedule;

pub use elbo::{elbo_terms, ElboTerms};
pub use process::{forward_kernel_step, forward_sample, forward_step_sample, reverse_mean, DiffusionStepSample};
pub use sampler::{ancestral_sample, sample_units, sample_with_noise, NoisePredictor};
pub use schedule::{build_schedule, NoiseSchedule, ScheduleConfig, ScheduleKind, SigmaKind};
