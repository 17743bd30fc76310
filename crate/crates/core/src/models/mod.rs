//! Full models: encoder, a residual, reversible or equilibrium stack, and a
//! decoder head.

pub mod checkpoint;
pub mod config;
pub mod params;
pub mod run;

pub use config::{parse_norm, Arch, ModelConfig, ModelDims, Operator};
pub use params::{build_model, param_count, ModelParams, StackParams};
pub use run::{
    backward, forward, forward_with_stats, topology, Batch, DeqStepStats, Mode, StepOptions, StepOutput, Targets,
};
