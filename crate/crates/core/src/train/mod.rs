//! Optimisation loop, losses, metrics, partitioned mini-batching and
//! multi-view evaluation.

pub mod adam;
pub mod bench;
pub mod epoch;
pub mod loss;
pub mod metrics;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use bench::{bench_memory, parse_bench_json, render_table, BenchCell, BenchSpec};
pub use epoch::{
    average_views, evaluate_multiview, probabilities, probability_loss, split_metric, view_probabilities, EpochLog,
    Evaluation, Trainer,
};
pub use loss::{loss_and_grad, sigmoid, softmax_row, softplus, LossKind};
pub use metrics::{accuracy, argmax, roc_auc};
