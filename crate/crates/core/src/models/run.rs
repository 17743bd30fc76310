//! Forward and backward passes of a whole model.

use serde::{Deserialize, Serialize};

use super::config::{Arch, ModelConfig, Operator};
use super::params::{ModelParams, StackParams};
use crate::deq::{deq_backward, deq_forward, SolveStats, SolverConfig};
use crate::error::{Error, Result};
use crate::graph::{CsrGraph, Labels};
use crate::kernels::{
    linear, linear_param_vjp, linear_vjp, norm, norm_vjp, relu, relu_vjp, DropoutMask, ParamSet, Topology,
};
use crate::meter::{MemoryMeter, MeterReport, Tag};
use crate::rev::{
    checkpointed_backward, checkpointed_forward, group_split, make_shared_mask, res_backward_cached,
    res_forward, res_forward_cached, stack_backward, stack_forward, stack_infer, BlockEnv, LayerDropout, SharedDropoutState,
};
use crate::tensor::{Real, Tensor};
use crate::train::{loss_and_grad, LossKind};

/// A graph (with self-loops) and its raw node features.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a, T> {
    pub graph: &'a CsrGraph,
    pub x: &'a Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// No dropout.
    Eval,
    /// Dropout patterns derived from `drop_seed`.
    Train { drop_seed: u64 },
}

/// Graph view the operator works on.
pub fn topology<'g, T: Real>(cfg: &ModelConfig, graph: &'g CsrGraph) -> Result<Topology<'g, T>> {
    match cfg.operator {
        Operator::Gcn => Topology {
            graph,
            edge_feat: None,
            edge_weight: None,
        }
        .with_gcn_weights(),
        Operator::Sage => Ok(Topology {
            graph,
            edge_feat: None,
            edge_weight: None,
        }),
        Operator::Gen => Ok(Topology::new(graph)),
    }
}

fn solver(cfg: &ModelConfig) -> Result<&SolverConfig> {
    cfg.solver.as_ref().ok_or_else(|| Error::Input("deq needs a solver configuration".into()))
}

fn check_batch<T: Real>(params: &ModelParams<T>, batch: &Batch<'_, T>) -> Result<()> {
    if batch.x.cols() != params.encoder.d_in() {
        return Err(Error::Input(format!(
            "features have width {} but the encoder expects {}",
            batch.x.cols(),
            params.encoder.d_in()
        )));
    }
    if batch.x.rows() != batch.graph.num_nodes() {
        return Err(Error::Input("feature rows differ from the node count".into()));
    }
    Ok(())
}

/// Logits of every node. Never touches a meter. Also returns the solver
/// stats for `deq`.
pub fn forward_with_stats<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: Batch<'_, T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<SolveStats>)> {
    cfg.validate()?;
    check_batch(params, &batch)?;
    let topo = topology(cfg, batch.graph)?;
    let spec = cfg.block_spec();
    let meter = MemoryMeter::disabled();
    let env = BlockEnv { topo: &topo, spec: &spec, meter: &meter };
    let n = batch.x.rows();
    let seed = match mode {
        Mode::Train { drop_seed } if cfg.dropout > 0.0 => Some(drop_seed),
        _ => None,
    };
    let h0 = linear(batch.x, &params.encoder)?;
    let mut stats = None;
    let h = match cfg.arch {
        Arch::Res | Arch::WtRes => {
            let layers = params.res_layers(cfg).expect("residual params");
            let drop = seed.map(|s| LayerDropout { drop_prob: cfg.dropout, step_seed: s });
            res_forward(layers, h0, env, drop.as_ref())?
        }
        Arch::Rev | Arch::WtRev => {
            let layers = params.rev_layers(cfg).expect("reversible params");
            let xs = group_split(&h0, cfg.groups)?;
            match seed {
                Some(s) => {
                    let drop = make_shared_mask(n, cfg.channels / cfg.groups, cfg.dropout, s)?;
                    stack_forward(layers, xs, env, Some(&drop), None)?.ys.into_inner().concat()
                }
                None => stack_infer(layers, xs, env)?.concat(),
            }
        }
        Arch::Deq => {
            let StackParams::Deq(p) = &params.stack else {
                return Err(Error::Input("deq config with non-deq parameters".into()));
            };
            let mask = seed.map(|s| DropoutMask::sample(n, cfg.channels, cfg.dropout, s)).transpose()?;
            let (z, st) = deq_forward(&h0, p, env, mask.as_ref(), solver(cfg)?)?;
            stats = Some(st);
            z
        }
    };
    let (hn, _) = norm(cfg.norm, &h, &params.head_norm)?;
    Ok((linear(&relu(&hn), &params.decoder)?, stats))
}

pub fn forward<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig, batch: Batch<'_, T>, mode: Mode) -> Result<Tensor<T>> {
    Ok(forward_with_stats(params, cfg, batch, mode)?.0)
}

/// Which nodes a training step learns from.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub labels: &'a Labels,
    pub active: &'a [bool],
    pub loss: LossKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub drop_seed: u64,
    /// Reversible stacks: keep this layer's input to measure how far the
    /// reconstruction drifts from it.
    pub probe_layer: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeqStepStats {
    pub forward: SolveStats,
    pub backward: SolveStats,
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub loss: f64,
    /// Training-mode logits of every node in the batch.
    pub logits: Tensor<T>,
    pub grads: ModelParams<T>,
    pub report: MeterReport,
    pub deq: Option<DeqStepStats>,
    pub drift: Option<f64>,
}

enum StackTape<T> {
    Res(crate::rev::ResCache<T>),
    Ckpt(crate::rev::Checkpoints<T>),
    Rev(crate::rev::RevStackOutput<T>),
    Deq {
        x: crate::meter::Retained<Tensor<T>>,
        z: crate::meter::Retained<Tensor<T>>,
        stats: SolveStats,
    },
}

/// One training step's loss and full gradient. Every buffer kept between
/// the forward and backward halves is registered with `meter`, whose
/// report (taken after the step) is returned.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: Batch<'_, T>,
    targets: Targets<'_>,
    opts: StepOptions,
    meter: &MemoryMeter,
) -> Result<StepOutput<T>> {
    cfg.validate()?;
    check_batch(params, &batch)?;
    let topo = topology(cfg, batch.graph)?;
    let spec = cfg.block_spec();
    let env = BlockEnv { topo: &topo, spec: &spec, meter };
    let n = batch.x.rows();
    let use_drop = cfg.dropout > 0.0;

    let res_drop = use_drop.then_some(LayerDropout { drop_prob: cfg.dropout, step_seed: opts.drop_seed });
    let rev_drop = if use_drop && cfg.arch.is_reversible() {
        let s = make_shared_mask(n, cfg.channels / cfg.groups, cfg.dropout, opts.drop_seed)?;
        Some(meter.retain(s, Tag::Mask))
    } else {
        None
    };
    let rev_drop: Option<&SharedDropoutState> = rev_drop.as_deref();
    let deq_mask = if use_drop && cfg.arch == Arch::Deq {
        Some(meter.retain(DropoutMask::sample(n, cfg.channels, cfg.dropout, opts.drop_seed)?, Tag::Mask))
    } else {
        None
    };
    let deq_mask: Option<&DropoutMask> = deq_mask.as_deref();

    // forward
    let h0 = linear(batch.x, &params.encoder)?;
    let (h, tape) = match cfg.arch {
        Arch::Res | Arch::WtRes => {
            let layers = params.res_layers(cfg).expect("residual params");
            match cfg.checkpoint_every {
                Some(k) => {
                    let (h, c) = checkpointed_forward(layers, h0, env, res_drop.as_ref(), k)?;
                    (h, StackTape::Ckpt(c))
                }
                None => {
                    let (h, c) = res_forward_cached(layers, h0, env, res_drop.as_ref())?;
                    (h, StackTape::Res(c))
                }
            }
        }
        Arch::Rev | Arch::WtRev => {
            let layers = params.rev_layers(cfg).expect("reversible params");
            let out = stack_forward(layers, group_split(&h0, cfg.groups)?, env, rev_drop, opts.probe_layer)?;
            std::mem::drop(h0);
            (out.ys.concat(), StackTape::Rev(out))
        }
        Arch::Deq => {
            let StackParams::Deq(p) = &params.stack else {
                return Err(Error::Input("deq config with non-deq parameters".into()));
            };
            let x = meter.retain(h0, Tag::Activation);
            let (z, stats) = deq_forward(&x, p, env, deq_mask, solver(cfg)?)?;
            let z = meter.retain(z, Tag::Activation);
            ((*z).clone(), StackTape::Deq { x, z, stats })
        }
    };
    let (hn, head_cache) = norm(cfg.norm, &h, &params.head_norm)?;
    std::mem::drop(h);
    let head_cache = meter.retain(head_cache, Tag::Activation);
    let logits = linear(&relu(&hn), &params.decoder)?;
    std::mem::drop(hn);
    let (loss, gl) = loss_and_grad(&logits, targets.labels, targets.active, targets.loss)?;

    // head backward
    let hn = head_cache.output(&params.head_norm);
    let a = relu(&hn);
    let (ga, g_decoder) = linear_vjp(&a, &params.decoder, &gl)?;
    std::mem::drop(a);
    let ghn = relu_vjp(&hn, &ga)?;
    std::mem::drop(hn);
    let (gh, g_head_norm) = norm_vjp(cfg.norm, &head_cache, &params.head_norm, &ghn)?;
    std::mem::drop(head_cache);

    // stack backward
    let mut drift = None;
    let mut deq = None;
    let (g0, g_stack) = match tape {
        StackTape::Res(cache) => {
            let layers = params.res_layers(cfg).expect("residual params");
            let mut grads = zero_bundles(&params.stack);
            let g0 = res_backward_cached(layers, cache, gh, env, as_res(&mut grads))?;
            (g0, grads)
        }
        StackTape::Ckpt(ckpts) => {
            let layers = params.res_layers(cfg).expect("residual params");
            let mut grads = zero_bundles(&params.stack);
            let g0 = checkpointed_backward(layers, ckpts, gh, env, res_drop.as_ref(), as_res(&mut grads))?;
            (g0, grads)
        }
        StackTape::Rev(out) => {
            let layers = params.rev_layers(cfg).expect("reversible params");
            let mut grads = zero_bundles(&params.stack);
            let StackParams::Rev(g) = &mut grads else { unreachable!() };
            let res = stack_backward(layers, out, group_split(&gh, cfg.groups)?, env, rev_drop, g)?;
            drift = res.drift;
            (res.gxs.concat(), grads)
        }
        StackTape::Deq { x, z, stats } => {
            let StackParams::Deq(p) = &params.stack else { unreachable!() };
            let (gx, gp, bstats) = deq_backward(&z, &x, p, env, deq_mask, &gh, solver(cfg)?)?;
            deq = Some(DeqStepStats { forward: stats, backward: bstats });
            (gx, StackParams::Deq(gp))
        }
    };
    let g_encoder = linear_param_vjp(batch.x, &g0)?;
    let grads = ModelParams {
        encoder: g_encoder,
        stack: g_stack,
        head_norm: g_head_norm,
        decoder: g_decoder,
    };
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!("gradient of a {} step (loss {loss})", cfg.arch)));
    }
    Ok(StepOutput {
        loss,
        logits,
        grads,
        report: meter.report(),
        deq,
        drift,
    })
}

fn zero_bundles<T: Real>(stack: &StackParams<T>) -> StackParams<T> {
    stack.zeros_like()
}

fn as_res<T>(s: &mut StackParams<T>) -> &mut [crate::rev::SubBlockParams<T>] {
    match s {
        StackParams::Res(v) => v,
        _ => unreachable!("residual gradient bundles"),
    }
}
