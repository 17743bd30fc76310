//! Partitioned training epochs and multi-view evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::loss::{sigmoid, softmax_row, LossKind};
use super::metrics::{accuracy, roc_auc};
use crate::error::{Error, Result};
use crate::graph::{induced_subgraph, random_partition, scatter_rows, Dataset, Labels, Split};
use crate::meter::MemoryMeter;
use crate::models::{backward, build_model, forward, Batch, Mode, ModelConfig, ModelDims, ModelParams, StepOptions, Targets};
use crate::seed::derive_seed;
use crate::tensor::{Real, Tensor};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    /// Accuracy (multiclass) or mean ROC-AUC (multilabel).
    pub metric: f64,
    /// Largest retained-activation peak of any step in the epoch.
    pub peak_bytes: usize,
    pub wall_seconds: f64,
    /// Mean forward solver iterations per step (`deq` only).
    pub deq_iters: Option<f64>,
    /// Largest final forward residual of the epoch (`deq` only).
    pub deq_residual: Option<f64>,
    /// Forward or adjoint solves that stopped at the iteration cap.
    pub deq_unconverged: Option<usize>,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain data serialises")
    }
}

/// Accuracy or ROC-AUC of `scores` over the rows selected by `mask`.
pub fn split_metric(scores: &Tensor<f64>, labels: &Labels, mask: &[bool]) -> Result<f64> {
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::Metric("empty split".into()));
    }
    let s = scores.gather_rows(&rows);
    match labels {
        Labels::Class(c) => accuracy(&s, &rows.iter().map(|&i| c[i]).collect::<Vec<_>>()),
        Labels::Multi(y) => roc_auc(&s, &y.gather_rows(&rows)),
    }
}

/// Softmax or sigmoid of every row, in `f64`.
pub fn probabilities<T: Real>(logits: &Tensor<T>, loss: LossKind) -> Tensor<f64> {
    let (n, t) = logits.shape();
    let mut out = Tensor::zeros(n, t);
    for i in 0..n {
        let row = out.row_mut(i);
        match loss {
            LossKind::SoftmaxCe => row.copy_from_slice(&softmax_row(logits.row(i))),
            LossKind::BceLogits => {
                for (o, v) in row.iter_mut().zip(logits.row(i)) {
                    *o = sigmoid(v.f64());
                }
            }
        }
    }
    out
}

/// Mean negative log-likelihood of probabilities over the masked rows.
pub fn probability_loss(probs: &Tensor<f64>, labels: &Labels, mask: &[bool]) -> Result<f64> {
    let ln = |p: f64| p.max(f64::MIN_POSITIVE).ln();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        count += 1;
        sum -= match labels {
            Labels::Class(c) => ln(probs.get(i, c[i])),
            Labels::Multi(y) => {
                let t = y.cols() as f64;
                (0..y.cols())
                    .map(|j| {
                        let p = probs.get(i, j);
                        if y.get(i, j) == 1.0 { ln(p) } else { ln(1.0 - p) }
                    })
                    .sum::<f64>()
                    / t
            }
        };
    }
    if count == 0 {
        return Err(Error::Metric("empty split".into()));
    }
    Ok(sum / count as f64)
}

/// Everything one training run carries between epochs.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub cfg: ModelConfig,
    pub dims: ModelDims,
    pub params: ModelParams<T>,
    pub opt: AdamState<T>,
    pub loss: LossKind,
    pub base_seed: u64,
}

impl<T: Real> Trainer<T> {
    /// Fresh model for `data` (already preprocessed). Model weights come
    /// from a seed derived from `base_seed`.
    pub fn new(cfg: ModelConfig, data: &Dataset, adam: AdamConfig, base_seed: u64) -> Result<Self> {
        let dims = ModelDims {
            features: data.features.dim(),
            outputs: data.labels.num_outputs,
            edge_dim: Some(data.graph.edge_feat_dim()).filter(|&f| f > 0),
        };
        let params = build_model(&cfg, &dims, derive_seed(base_seed, u64::MAX))?;
        Ok(Self {
            opt: AdamState::new(&params, adam),
            cfg,
            dims,
            params,
            loss: LossKind::for_task(data.task()),
            base_seed,
        })
    }

    pub fn with_params(mut self, params: ModelParams<T>) -> Result<Self> {
        params.check(&self.cfg, &self.dims)?;
        self.opt = AdamState::new(&params, self.opt.cfg);
        self.params = params;
        Ok(self)
    }

    /// One pass over a fresh random partition: one optimiser step per
    /// part. The meter's peak is reset before each step and must be back to
    /// zero live bytes after it.
    pub fn train_epoch(&mut self, data: &Dataset, parts: usize, epoch: usize, meter: &MemoryMeter) -> Result<EpochLog> {
        let start = Instant::now();
        let epoch_seed = derive_seed(self.base_seed, epoch as u64);
        let partition = random_partition(&data.graph, parts, derive_seed(epoch_seed, 0))?;
        let n = data.num_nodes();
        let mut scores = Tensor::<f64>::zeros(n, self.dims.outputs);
        let mut loss_sum = 0.0;
        let mut active_total = 0usize;
        let mut peak = 0;
        let mut deq_iters = 0usize;
        let mut deq_residual: f64 = 0.0;
        let mut deq_unconverged = 0usize;
        let mut steps = 0usize;
        for part in 0..parts {
            let sub = induced_subgraph(&data.graph, &data.features, &data.labels, &partition, part)?;
            let active = sub.labels.mask(Split::Train);
            let count = active.iter().filter(|&&b| b).count();
            if count == 0 {
                continue;
            }
            let x: Tensor<T> = sub.features.data.cast();
            meter.reset_peak();
            let out = backward(
                &self.params,
                &self.cfg,
                Batch { graph: &sub.graph, x: &x },
                Targets { labels: &sub.labels.labels, active, loss: self.loss },
                StepOptions { drop_seed: derive_seed(epoch_seed, 1 + part as u64), probe_layer: None },
                meter,
            )
            .map_err(|e| e.context(format_args!("epoch {epoch}, part {part}")))?;
            meter.check_balanced().map_err(|e| e.context(format_args!("epoch {epoch}, part {part}")))?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}, part {part}: loss is {}", out.loss)));
            }
            adam_step(&mut self.params, &out.grads, &mut self.opt)
                .map_err(|e| e.context(format_args!("epoch {epoch}, part {part}")))?;
            scatter_rows(&mut scores, &out.logits.cast(), &sub.nodes);
            loss_sum += out.loss * count as f64;
            active_total += count;
            peak = peak.max(out.report.peak_activation_bytes);
            if let Some(d) = out.deq {
                deq_iters += d.forward.iters;
                deq_residual = deq_residual.max(d.forward.residual);
                deq_unconverged += usize::from(!d.forward.converged) + usize::from(!d.backward.converged);
            }
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::Input("no training nodes in any part".into()));
        }
        let is_deq = self.cfg.arch == crate::models::Arch::Deq;
        Ok(EpochLog {
            epoch,
            split: Split::Train.name().into(),
            loss: loss_sum / active_total as f64,
            metric: split_metric(&scores, &data.labels.labels, &data.labels.train)?,
            peak_bytes: peak,
            wall_seconds: start.elapsed().as_secs_f64(),
            deq_iters: is_deq.then(|| deq_iters as f64 / steps as f64),
            deq_residual: is_deq.then_some(deq_residual),
            deq_unconverged: is_deq.then_some(deq_unconverged),
        })
    }

    pub fn evaluate(&self, data: &Dataset, views: usize, parts: usize, seed: u64) -> Result<Evaluation> {
        evaluate_multiview(&self.params, &self.cfg, self.loss, data, views, parts, seed)
    }
}

/// Averaged class probabilities plus split scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub probs: Tensor<f64>,
    pub valid_loss: f64,
    pub valid_metric: f64,
    pub test_loss: f64,
    pub test_metric: f64,
}

impl Evaluation {
    pub fn logs(&self, epoch: usize, wall_seconds: f64) -> [EpochLog; 2] {
        let mk = |split: Split, loss, metric| EpochLog {
            epoch,
            split: split.name().into(),
            loss,
            metric,
            peak_bytes: 0,
            wall_seconds,
            deq_iters: None,
            deq_residual: None,
            deq_unconverged: None,
        };
        [
            mk(Split::Valid, self.valid_loss, self.valid_metric),
            mk(Split::Test, self.test_loss, self.test_metric),
        ]
    }
}

/// Eval-mode probabilities of one view: the graph cut into `parts` random
/// parts by `seed`, each part run on its own induced subgraph.
pub fn view_probabilities<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    loss: LossKind,
    data: &Dataset,
    parts: usize,
    seed: u64,
) -> Result<Tensor<f64>> {
    let partition = random_partition(&data.graph, parts, seed)?;
    let mut logits = Tensor::<T>::zeros(data.num_nodes(), params.decoder.d_out());
    for part in 0..parts {
        let sub = induced_subgraph(&data.graph, &data.features, &data.labels, &partition, part)?;
        let x: Tensor<T> = sub.features.data.cast();
        let out = forward(params, cfg, Batch { graph: &sub.graph, x: &x }, Mode::Eval)?;
        scatter_rows(&mut logits, &out, &sub.nodes);
    }
    Ok(probabilities(&logits, loss))
}

/// Mean of the per-view probabilities for the given view seeds.
pub fn average_views<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    loss: LossKind,
    data: &Dataset,
    parts: usize,
    view_seeds: &[u64],
) -> Result<Tensor<f64>> {
    if view_seeds.is_empty() {
        return Err(Error::Input("at least one view is needed".into()));
    }
    let mut sum = Tensor::zeros(data.num_nodes(), params.decoder.d_out());
    for &s in view_seeds {
        sum.add_assign(&view_probabilities(params, cfg, loss, data, parts, s)?)?;
    }
    let v = view_seeds.len() as f64;
    Ok(sum.map(|p| p / v))
}

/// `views` independent partitions into `parts` parts, probabilities
/// averaged, metrics computed once on the average.
pub fn evaluate_multiview<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    loss: LossKind,
    data: &Dataset,
    views: usize,
    parts: usize,
    seed: u64,
) -> Result<Evaluation> {
    let seeds: Vec<u64> = (0..views as u64).map(|v| derive_seed(seed, v)).collect();
    let probs = average_views(params, cfg, loss, data, parts, &seeds)?;
    let l = &data.labels;
    Ok(Evaluation {
        valid_loss: probability_loss(&probs, &l.labels, &l.valid)?,
        valid_metric: split_metric(&probs, &l.labels, &l.valid)?,
        test_loss: probability_loss(&probs, &l.labels, &l.test)?,
        test_metric: split_metric(&probs, &l.labels, &l.test)?,
        probs,
    })
}
