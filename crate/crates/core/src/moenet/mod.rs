//! Sparse mixture-of-experts velocity regressor.

pub mod accounting;
pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod model;
pub mod routing;
pub mod train;

pub use accounting::{count_params_flops, Accounting};
pub use config::{expert_capacity, MoeConfig, INPUT_ROWS};
pub use model::{ImuWindow, MoeForward, MoeModel, VelocityEstimate};
pub use routing::{topk_route, Capacity, GateDecision};
pub use train::{evaluate, train, Phase, Sample, TrainConfig, TrainLog, Trainer};
