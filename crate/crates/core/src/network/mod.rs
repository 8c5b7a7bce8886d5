//! Model assembly, reconstruction, loss and complexity accounting.

pub mod complexity;
pub mod config;
pub mod loss;
pub mod model;

pub use complexity::{branch_costs, count_flops, count_params, BranchCost};
pub use config::ModelConfig;
pub use loss::{charbonnier_backward, charbonnier_loss, LossConfig};
pub use model::{reconstruct, reconstruct_backward, Branch, BranchOutput, ForwardCache, Mddm, Model, GROWTH_SCALE};
