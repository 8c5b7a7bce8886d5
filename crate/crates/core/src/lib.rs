//! Multi-resolution demoiréing network with hand-written backpropagation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`params`], [`gradcheck`]: dense NCHW tensors, named
//!   parameter storage and the finite-difference gradient checker.
//! * [`layers`]: convolution, PReLU, channel attention, resampling, AdaIN,
//!   the feature-encoding bypass, the residual attention block and the
//!   region non-local block.
//! * [`network`]: the multi-branch model, branch-scaled reconstruction,
//!   Charbonnier loss and parameter/FLOP accounting.
//! * [`synth`]: synthetic moiré pairs, datasets and PNG/manifest I/O.
//! * [`train`]: Adam, the step-decay schedule, metrics, checkpoints and the
//!   training loop.
//!
//! All arithmetic is `f64`. Batch-level and channel-level loops run on rayon
//! when the `parallel` feature is on (the default); reductions are always
//! combined in index order, so results do not depend on the thread count.

pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod layers;
pub mod network;
pub mod par;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{GradStore, ParamId, ParamStore};
pub use tensor::{Fill, Shape, Tensor};
