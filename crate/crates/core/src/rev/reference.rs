//! Straightforward cached-activation backprop through a reversible stack.
//!
//! Keeps every sub-block tape of every layer and never inverts anything. It
//! exists as the oracle the reconstruction-based backward is checked against.

use super::block::{sub_block_forward_taped, sub_block_vjp, SubBlockTape};
use super::coupling::{exchange_sum, BlockEnv, RevBlockParams};
use super::grouped::GroupedFeatures;
use super::layers::Layers;
use super::shared::{mask_for, SharedDropoutState};
use crate::error::{Error, Result};
use crate::kernels::ParamSet;
use crate::meter::{Retained, Tag};
use crate::tensor::{Real, Tensor};

/// Tapes of one block, indexed by sub-block.
pub type RevBlockCache<T> = Vec<Retained<SubBlockTape<T>>>;

pub fn rev_forward_cached<T: Real>(
    block: &RevBlockParams<T>,
    xs: &GroupedFeatures<T>,
    env: BlockEnv<'_, '_, T>,
    drop: Option<&SharedDropoutState>,
) -> Result<(GroupedFeatures<T>, RevBlockCache<T>)> {
    let c = block.num_groups();
    if c < 2 || xs.num_groups() != c {
        return Err(Error::Input("group count differs from block arity".into()));
    }
    let mask = mask_for(drop, xs.num_nodes(), xs.group_width())?;
    let mut prev = exchange_sum(&xs.groups);
    let mut ys = Vec::with_capacity(c);
    let mut tapes = Vec::with_capacity(c);
    for (i, sub) in block.sub_blocks.iter().enumerate() {
        let (f, tape) = sub_block_forward_taped(env.topo, &prev, sub, env.spec, mask)?;
        let y = f.add(&xs.groups[i])?;
        tapes.push(env.meter.retain(tape, Tag::Activation));
        prev = y.clone();
        ys.push(y);
    }
    let mut out = GroupedFeatures::new(ys)?;
    out.mask_seed = drop.map(SharedDropoutState::step_seed);
    Ok((out, tapes))
}

/// Backprop through the block DAG using the stored tapes.
pub fn rev_backward_cached<T: Real>(
    block: &RevBlockParams<T>,
    tapes: &RevBlockCache<T>,
    gys: &GroupedFeatures<T>,
    env: BlockEnv<'_, '_, T>,
    drop: Option<&SharedDropoutState>,
) -> Result<(GroupedFeatures<T>, RevBlockParams<T>)> {
    let c = block.num_groups();
    let mask = mask_for(drop, gys.num_nodes(), gys.group_width())?;
    // adjoints of X'_1..X'_C
    let mut adj: Vec<Tensor<T>> = gys.groups.clone();
    let mut grads = block.zeros_like();
    let mut g_exchange = None;
    for i in (0..c).rev() {
        let (g_in, gp) = sub_block_vjp(env.topo, &block.sub_blocks[i], env.spec, mask, &tapes[i], &adj[i])?;
        grads.sub_blocks[i] = gp;
        if i > 0 {
            adj[i - 1].add_assign(&g_in)?;
        } else {
            g_exchange = Some(g_in);
        }
    }
    let g_exchange = g_exchange.expect("c >= 2");
    for a in &mut adj[1..] {
        a.add_assign(&g_exchange)?;
    }
    Ok((GroupedFeatures::new(adj)?, grads))
}

/// Full forward + backward of a stack with every tape cached. Returns the
/// stack output, the input gradient and one gradient bundle per parameter
/// bundle.
pub fn reference_stack<T: Real>(
    layers: Layers<'_, RevBlockParams<T>>,
    xs: &GroupedFeatures<T>,
    gys: &GroupedFeatures<T>,
    env: BlockEnv<'_, '_, T>,
    drop: Option<&SharedDropoutState>,
) -> Result<(GroupedFeatures<T>, GroupedFeatures<T>, Vec<RevBlockParams<T>>)> {
    let mut caches = Vec::with_capacity(layers.depth());
    let mut state = xs.clone();
    for l in 0..layers.depth() {
        let (next, cache) = rev_forward_cached(layers.get(l), &state, env, drop)?;
        caches.push(cache);
        state = next;
    }
    let mut grads: Vec<RevBlockParams<T>> =
        (0..layers.num_bundles()).map(|b| layers.get(b).zeros_like()).collect();
    let mut g = gys.clone();
    for l in (0..layers.depth()).rev() {
        let (g_in, gp) = rev_backward_cached(layers.get(l), &caches[l], &g, env, drop)?;
        grads[layers.slot(l)].accumulate(&gp)?;
        g = g_in;
    }
    Ok((state, g, grads))
}
