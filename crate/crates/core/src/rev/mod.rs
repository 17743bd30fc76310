//! Reversible and residual GNN stacks.

pub mod block;
pub mod coupling;
pub mod grouped;
pub mod layers;
pub mod reference;
pub mod residual;
pub mod shared;

pub use block::{sub_block_forward, sub_block_forward_taped, sub_block_vjp, BlockSpec, SubBlockParams, SubBlockTape};
pub use coupling::{
    check_groups, rev_backward, rev_forward, rev_inverse, stack_backward, stack_forward, stack_infer, BlockEnv,
    DriftProbe, RevBlockParams, RevStackGrads, RevStackOutput, DRIFT_WARN,
};
pub use grouped::{group_split, GroupedFeatures};
pub use layers::Layers;
pub use reference::{reference_stack, rev_backward_cached, rev_forward_cached};
pub use residual::{
    checkpointed_backward, checkpointed_forward, res_backward_cached, res_forward, res_forward_cached, Checkpoints,
    LayerDropout, ResCache,
};
pub use shared::{make_shared_mask, SharedDropoutState};
