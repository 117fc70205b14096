//! Numerical substrate: tensors, reverse-mode differentiation, MLP layers,
//! the Adam optimizer and seeded random streams.

pub mod mlp;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use mlp::{forward_mlp, Activation, Linear, MlpParams, Parameterized};
pub use optim::{clip_grad_norm, Adam};
pub use rng::{seeded_rng, stream_rng, DetRng, RngExt};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
