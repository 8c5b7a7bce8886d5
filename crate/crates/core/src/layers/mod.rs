//! Parametric and structural layers, each with a hand-written backward rule.
//!
//! Layers hold [`ParamId`](crate::params::ParamId) handles into a
//! [`ParamStore`](crate::params::ParamStore); forward passes read parameters
//! from the store and backward passes accumulate into a matching
//! [`GradStore`](crate::params::GradStore). Composite layers return a cache
//! from `forward_cached` that their `backward` consumes.

pub mod activation;
pub mod adain;
pub mod attention;
pub mod cdr;
pub mod conv;
pub mod dfe;
pub mod nonlocal;
pub mod pool;
pub mod resample;
pub mod shuffle;

pub use activation::{prelu, prelu_backward, sigmoid, PRelu};
pub use adain::{adain, adain_backward, instance_moments, DfeStats, ADAIN_EPS};
pub use attention::ChannelAttention;
pub use cdr::{CdrBlock, CdrConfig};
pub use conv::{conv2d, conv2d_backward, Conv2d, Init};
pub use dfe::{DfeEncoder, DfeLayer};
pub use nonlocal::NonLocal;
pub use pool::{global_avg_pool, global_avg_pool_backward};
pub use resample::{Downsample, Upsample};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};
