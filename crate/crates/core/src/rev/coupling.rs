//! Grouped reversible coupling and its depth-independent backward pass.
//!
//! With groups `X_1..X_C` the block computes
//! `X'_0 = X_2 + … + X_C` and then `X'_i = f_i(X'_{i-1}) + X_i` in order.
//! Every step can be undone from the outputs alone, so the backward pass
//! rebuilds each layer's input from its output instead of storing it.

use log::warn;
use rand::Rng;

use super::block::{sub_block_forward, sub_block_forward_taped, sub_block_vjp, BlockSpec, SubBlockParams};
use super::grouped::GroupedFeatures;
use super::layers::Layers;
use super::shared::{mask_for, SharedDropoutState};
use crate::error::{Error, Result};
use crate::kernels::{ConvKind, ParamSet, Topology};
use crate::meter::{MemoryMeter, Retained, Tag};
use crate::tensor::{Real, Tensor};

/// Reconstruction drift above this is logged as a warning.
pub const DRIFT_WARN: f64 = 1e-3;

/// What every block of a stack sees besides its parameters.
#[derive(Debug)]
pub struct BlockEnv<'a, 'g, T> {
    pub topo: &'a Topology<'g, T>,
    pub spec: &'a BlockSpec,
    pub meter: &'a MemoryMeter,
}

impl<T> Clone for BlockEnv<'_, '_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for BlockEnv<'_, '_, T> {}

#[derive(Debug, Clone, PartialEq)]
pub struct RevBlockParams<T> {
    pub sub_blocks: Vec<SubBlockParams<T>>,
}

impl<T: Real> ParamSet<T> for RevBlockParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        self.sub_blocks.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.sub_blocks.tensors_mut()
    }
}

impl<T: Real> RevBlockParams<T> {
    pub fn init(
        channels: usize,
        groups: usize,
        conv: ConvKind,
        edge_dim: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_groups(channels, groups)?;
        let w = channels / groups;
        Ok(Self {
            sub_blocks: (0..groups).map(|_| SubBlockParams::init(w, conv, edge_dim, rng)).collect(),
        })
    }

    pub fn count(channels: usize, groups: usize, conv: ConvKind, edge_dim: Option<usize>) -> usize {
        groups * SubBlockParams::<T>::count(channels / groups, conv, edge_dim)
    }

    pub fn num_groups(&self) -> usize {
        self.sub_blocks.len()
    }

    pub fn zero_conv(&mut self) {
        self.sub_blocks.iter_mut().for_each(SubBlockParams::zero_conv);
    }
}

pub fn check_groups(channels: usize, groups: usize) -> Result<()> {
    if groups < 2 {
        return Err(Error::Input(format!(
            "reversible blocks need at least 2 groups, got {groups}"
        )));
    }
    if channels % groups != 0 {
        return Err(Error::Input(format!(
            "{channels} channels are not divisible into {groups} groups"
        )));
    }
    Ok(())
}

fn check_block<T: Real>(block: &RevBlockParams<T>, xs: &GroupedFeatures<T>) -> Result<usize> {
    let c = block.num_groups();
    if c < 2 {
        return Err(Error::Input("reversible blocks need at least 2 groups".into()));
    }
    if xs.num_groups() != c {
        return Err(Error::Input(format!(
            "block has {c} sub-blocks but the features have {} groups",
            xs.num_groups()
        )));
    }
    if block.sub_blocks.iter().any(|s| s.width() != xs.group_width()) {
        return Err(Error::Input("sub-block width differs from group width".into()));
    }
    Ok(c)
}

fn check_pattern<T>(ys: &GroupedFeatures<T>, drop: Option<&SharedDropoutState>) -> Result<()> {
    match (ys.mask_seed, drop.map(SharedDropoutState::step_seed)) {
        (None, None) => Ok(()),
        (Some(a), Some(b)) if a == b => Ok(()),
        (Some(_), None) => Err(Error::Contract(
            "features were produced under a dropout pattern that was not supplied".into(),
        )),
        (None, Some(_)) => Err(Error::Contract(
            "a dropout pattern was supplied for features produced without one".into(),
        )),
        (Some(a), Some(b)) => Err(Error::Contract(format!(
            "stale dropout pattern: features were produced with step seed {a}, got {b}"
        ))),
    }
}

/// `X'_0 = X_2 + … + X_C`.
pub(crate) fn exchange_sum<T: Real>(groups: &[Tensor<T>]) -> Tensor<T> {
    let mut s = groups[1].clone();
    for g in &groups[2..] {
        s.add_assign(g).expect("groups share a shape");
    }
    s
}

pub fn rev_forward<T: Real>(
    block: &RevBlockParams<T>,
    xs: &GroupedFeatures<T>,
    env: BlockEnv<'_, '_, T>,
    drop: Option<&SharedDropoutState>,
) -> Result<GroupedFeatures<T>> {
    let mut ys = xs.clone();
    rev_forward_in_place(block, &mut ys, env, drop)?;
    Ok(ys)
}

pub(crate) fn rev_forward_in_place<T: Real>(
    block: &RevBlockParams<T>,
    xs: &mut GroupedFeatures<T>,
    env: BlockEnv<'_, '_, T>,
    drop: Option<&SharedDropoutState>,
) -> Result<()> {
    let c = check_block(block, xs)?;
    let mask = mask_for(drop, xs.num_nodes(), xs.group_width())?;
    let f = {
        let x0 = env.meter.retain(exchange_sum(&xs.groups), Tag::Activation);
        sub_block_forward(env.topo, &x0, &block.sub_blocks[0], env.spec, mask)?
    };
    xs.groups[0].add_assign(&f)?;
    for i in 1..c {
        let f = sub_block_forward(env.topo, &xs.groups[i - 1], &block.sub_blocks[i], env.spec, mask)?;
        xs.groups[i].add_assign(&f)?;
    }
    xs.mask_seed = drop.map(SharedDropoutState::step_seed);
    Ok(())
}

/// Rebuilds the block input from its output. The dropout pattern must be
/// the one the forward pass used.
pub fn rev_inverse<T: Real>(
    block: &RevBlockParams<T>,
    ys: &GroupedFeatures<T>,
    env: BlockEnv<'_, '_, T>,
    drop: Option<&SharedDropoutState>,
) -> Result<GroupedFeatures<T>> {
    let mut xs = ys.clone();
    rev_inverse_in_place(block, &mut xs, env, drop)?;
    Ok(xs)
}

pub(crate) fn rev_inverse_in_place<T: Real>(
    block: &RevBlockParams<T>,
    ys: &mut GroupedFeatures<T>,
    env: BlockEnv<'_, '_, T>,
    drop: Option<&SharedDropoutState>,
) -> Result<()> {
    let c = check_block(block, ys)?;
    check_pattern(ys, drop)?;
    let mask = mask_for(drop, ys.num_nodes(), ys.group_width())?;
    // descending order keeps X'_{i-1} intact until X_i is recovered
    for i in (1..c).rev() {
        let f = sub_block_forward(env.topo, &ys.groups[i - 1], &block.sub_blocks[i], env.spec, mask)?;
        ys.groups[i].sub_assign(&f)?;
    }
    let f = {
        let x0 = env.meter.retain(exchange_sum(&ys.groups), Tag::Activation);
        sub_block_forward(env.topo, &x0, &block.sub_blocks[0], env.spec, mask)?
    };
    ys.groups[0].sub_assign(&f)?;
    Ok(())
}

/// Single-block backward: returns the reconstructed input, its gradient and
/// the parameter gradients.
pub fn rev_backward<T: Real>(
    block: &RevBlockParams<T>,
    ys: &GroupedFeatures<T>,
    gys: &GroupedFeatures<T>,
    env: BlockEnv<'_, '_, T>,
    drop: Option<&SharedDropoutState>,
) -> Result<(GroupedFeatures<T>, GroupedFeatures<T>, RevBlockParams<T>)> {
    let mut xs = ys.clone();
    let mut gxs = gys.clone();
    let mut grads = block.zeros_like();
    rev_backward_in_place(block, &mut xs, &mut gxs, env, drop, &mut grads)?;
    Ok((xs, gxs, grads))
}

/// Turns `ys` into the block input and `gys` into its gradient, adding the
/// parameter gradients into `grads`. One sub-block tape is alive at a time.
pub(crate) fn rev_backward_in_place<T: Real>(
    block: &RevBlockParams<T>,
    ys: &mut GroupedFeatures<T>,
    gys: &mut GroupedFeatures<T>,
    env: BlockEnv<'_, '_, T>,
    drop: Option<&SharedDropoutState>,
    grads: &mut RevBlockParams<T>,
) -> Result<()> {
    let c = check_block(block, ys)?;
    check_pattern(ys, drop)?;
    if gys.num_groups() != c || gys.groups[0].shape() != ys.groups[0].shape() {
        return Err(Error::Input("gradient groups do not match the activations".into()));
    }
    let mask = mask_for(drop, ys.num_nodes(), ys.group_width())?;
    let BlockEnv { topo, spec, meter } = env;

    for i in (1..c).rev() {
        let (f, tape) = sub_block_forward_taped(topo, &ys.groups[i - 1], &block.sub_blocks[i], spec, mask)?;
        let tape = meter.retain(tape, Tag::Activation);
        ys.groups[i].sub_assign(&f)?;
        std::mem::drop(f);
        let (g_prev, gp) = sub_block_vjp(topo, &block.sub_blocks[i], spec, mask, &tape, &gys.groups[i])?;
        grads.sub_blocks[i].accumulate(&gp)?;
        gys.groups[i - 1].add_assign(&g_prev)?;
    }

    let x0 = meter.retain(exchange_sum(&ys.groups), Tag::Activation);
    let (f, tape) = sub_block_forward_taped(topo, &x0, &block.sub_blocks[0], spec, mask)?;
    std::mem::drop(x0);
    let tape = meter.retain(tape, Tag::Activation);
    ys.groups[0].sub_assign(&f)?;
    std::mem::drop(f);
    let (g0, gp) = sub_block_vjp(topo, &block.sub_blocks[0], spec, mask, &tape, &gys.groups[0])?;
    grads.sub_blocks[0].accumulate(&gp)?;
    for g in &mut gys.groups[1..] {
        g.add_assign(&g0)?;
    }
    Ok(())
}

/// A copy of one layer's input kept to measure reconstruction drift.
#[derive(Debug)]
pub struct DriftProbe<T> {
    pub layer: usize,
    pub input: Retained<GroupedFeatures<T>>,
}

/// Forward result of a reversible stack: only the final activations.
#[derive(Debug)]
pub struct RevStackOutput<T> {
    pub ys: Retained<GroupedFeatures<T>>,
    pub probe: Option<DriftProbe<T>>,
}

#[derive(Debug)]
pub struct RevStackGrads<T> {
    /// Reconstructed stack input.
    pub xs: GroupedFeatures<T>,
    pub gxs: GroupedFeatures<T>,
    /// `‖reconstructed − original‖∞` at the probed layer, if any.
    pub drift: Option<f64>,
}

/// Runs all layers in place, keeping nothing but the running activations.
pub fn stack_forward<T: Real>(
    layers: Layers<'_, RevBlockParams<T>>,
    xs: GroupedFeatures<T>,
    env: BlockEnv<'_, '_, T>,
    drop: Option<&SharedDropoutState>,
    probe_layer: Option<usize>,
) -> Result<RevStackOutput<T>> {
    let mut state = env.meter.retain(xs, Tag::Activation);
    let mut probe = None;
    for l in 0..layers.depth() {
        if probe_layer == Some(l) {
            probe = Some(DriftProbe {
                layer: l,
                input: env.meter.retain((*state).clone(), Tag::Monitor),
            });
        }
        rev_forward_in_place(layers.get(l), &mut state, env, drop)?;
    }
    Ok(RevStackOutput { ys: state, probe })
}

/// Walks the layers from last to first, reconstructing each input from its
/// output. `grads` holds one bundle per distinct parameter set.
pub fn stack_backward<T: Real>(
    layers: Layers<'_, RevBlockParams<T>>,
    out: RevStackOutput<T>,
    gys: GroupedFeatures<T>,
    env: BlockEnv<'_, '_, T>,
    drop: Option<&SharedDropoutState>,
    grads: &mut [RevBlockParams<T>],
) -> Result<RevStackGrads<T>> {
    if grads.len() != layers.num_bundles() {
        return Err(Error::Input(format!(
            "{} gradient bundles for {} parameter bundles",
            grads.len(),
            layers.num_bundles()
        )));
    }
    let RevStackOutput { mut ys, probe } = out;
    let mut g = env.meter.retain(gys, Tag::Gradient);
    let mut drift = None;
    for l in (0..layers.depth()).rev() {
        rev_backward_in_place(layers.get(l), &mut ys, &mut g, env, drop, &mut grads[layers.slot(l)])?;
        if let Some(p) = probe.as_ref().filter(|p| p.layer == l) {
            let d = ys.max_abs_diff(&p.input)?.f64();
            if d > DRIFT_WARN {
                warn!("reversible reconstruction drift {d:.3e} at layer {l}");
            }
            drift = Some(d);
        }
    }
    Ok(RevStackGrads {
        xs: ys.into_inner(),
        gxs: g.into_inner(),
        drift,
    })
}

/// Eval-mode stack: no dropout and no drift probe.
pub fn stack_infer<T: Real>(
    layers: Layers<'_, RevBlockParams<T>>,
    mut xs: GroupedFeatures<T>,
    env: BlockEnv<'_, '_, T>,
) -> Result<GroupedFeatures<T>> {
    for l in 0..layers.depth() {
        rev_forward_in_place(layers.get(l), &mut xs, env, None)?;
    }
    Ok(xs)
}
