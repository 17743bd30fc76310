//! Non-reversible pre-activation residual stack `x ← x + f(x)`, with full
//! activation caching or segment checkpointing.

use super::block::{sub_block_forward, sub_block_forward_taped, sub_block_vjp, SubBlockParams, SubBlockTape};
use super::coupling::BlockEnv;
use super::layers::Layers;
use crate::error::{Error, Result};
use crate::kernels::{DropoutMask, ParamSet};
use crate::meter::{Retained, Tag};
use crate::seed::derive_seed;
use crate::tensor::{Real, Tensor};

/// Independent dropout pattern per layer, regenerated on demand from the
/// step seed so that recomputation sees the same pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerDropout {
    pub drop_prob: f64,
    pub step_seed: u64,
}

impl LayerDropout {
    pub fn mask(&self, layer: usize, n: usize, d: usize) -> Result<DropoutMask> {
        DropoutMask::sample(n, d, self.drop_prob, derive_seed(self.step_seed, layer as u64))
    }
}

fn layer_mask(drop: Option<&LayerDropout>, layer: usize, x: &Tensor<impl Real>) -> Result<Option<DropoutMask>> {
    drop.map(|d| d.mask(layer, x.rows(), x.cols())).transpose()
}

/// Per-layer tapes and masks of a cached forward pass.
#[derive(Debug, Default)]
pub struct ResCache<T> {
    first_layer: usize,
    tapes: Vec<Retained<SubBlockTape<T>>>,
    masks: Vec<Option<Retained<DropoutMask>>>,
}

impl<T> ResCache<T> {
    pub fn len(&self) -> usize {
        self.tapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tapes.is_empty()
    }
}

/// Eval-mode or no-grad forward: nothing is kept.
pub fn res_forward<T: Real>(
    layers: Layers<'_, SubBlockParams<T>>,
    mut x: Tensor<T>,
    env: BlockEnv<'_, '_, T>,
    drop: Option<&LayerDropout>,
) -> Result<Tensor<T>> {
    for l in 0..layers.depth() {
        let mask = layer_mask(drop, l, &x)?;
        let f = sub_block_forward(env.topo, &x, layers.get(l), env.spec, mask.as_ref())?;
        x.add_assign(&f)?;
    }
    Ok(x)
}

fn forward_range<T: Real>(
    layers: Layers<'_, SubBlockParams<T>>,
    range: std::ops::Range<usize>,
    x: Tensor<T>,
    env: BlockEnv<'_, '_, T>,
    drop: Option<&LayerDropout>,
) -> Result<(Tensor<T>, ResCache<T>)> {
    let mut cache = ResCache {
        first_layer: range.start,
        tapes: Vec::with_capacity(range.len()),
        masks: Vec::with_capacity(range.len()),
    };
    let mut state = env.meter.retain(x, Tag::Activation);
    for l in range {
        let mask = layer_mask(drop, l, &state)?.map(|m| env.meter.retain(m, Tag::Mask));
        let (f, tape) = sub_block_forward_taped(env.topo, &state, layers.get(l), env.spec, mask.as_deref())?;
        cache.tapes.push(env.meter.retain(tape, Tag::Activation));
        cache.masks.push(mask);
        state.add_assign(&f)?;
    }
    Ok((state.into_inner(), cache))
}

/// Training forward that keeps every layer's tape.
pub fn res_forward_cached<T: Real>(
    layers: Layers<'_, SubBlockParams<T>>,
    x: Tensor<T>,
    env: BlockEnv<'_, '_, T>,
    drop: Option<&LayerDropout>,
) -> Result<(Tensor<T>, ResCache<T>)> {
    forward_range(layers, 0..layers.depth(), x, env, drop)
}

/// Consumes the cache from the last layer down, releasing each tape as soon
/// as its layer is done. Returns the input gradient.
pub fn res_backward_cached<T: Real>(
    layers: Layers<'_, SubBlockParams<T>>,
    mut cache: ResCache<T>,
    g: Tensor<T>,
    env: BlockEnv<'_, '_, T>,
    grads: &mut [SubBlockParams<T>],
) -> Result<Tensor<T>> {
    if grads.len() != layers.num_bundles() {
        return Err(Error::Input("gradient bundle count differs from parameter bundles".into()));
    }
    let mut g = env.meter.retain(g, Tag::Gradient);
    while let Some(tape) = cache.tapes.pop() {
        let mask = cache.masks.pop().expect("one mask slot per tape");
        let l = cache.first_layer + cache.tapes.len();
        let (gx, gp) = sub_block_vjp(env.topo, layers.get(l), env.spec, mask.as_deref(), &tape, &g)?;
        grads[layers.slot(l)].accumulate(&gp)?;
        g.add_assign(&gx)?;
    }
    Ok(g.into_inner())
}

/// Layer inputs saved every `every` layers.
#[derive(Debug)]
pub struct Checkpoints<T> {
    every: usize,
    saved: Vec<Retained<Tensor<T>>>,
}

impl<T> Checkpoints<T> {
    pub fn every(&self) -> usize {
        self.every
    }

    pub fn num_saved(&self) -> usize {
        self.saved.len()
    }
}

/// Training forward that stores only the inputs of layers `0, every, 2·every, …`.
pub fn checkpointed_forward<T: Real>(
    layers: Layers<'_, SubBlockParams<T>>,
    x: Tensor<T>,
    env: BlockEnv<'_, '_, T>,
    drop: Option<&LayerDropout>,
    every: usize,
) -> Result<(Tensor<T>, Checkpoints<T>)> {
    if every == 0 {
        return Err(Error::Input("checkpoint interval must be at least 1".into()));
    }
    let mut saved = Vec::new();
    let mut state = env.meter.retain(x, Tag::Activation);
    for l in 0..layers.depth() {
        if l % every == 0 {
            saved.push(env.meter.retain((*state).clone(), Tag::Activation));
        }
        let mask = layer_mask(drop, l, &state)?;
        let f = sub_block_forward(env.topo, &state, layers.get(l), env.spec, mask.as_ref())?;
        state.add_assign(&f)?;
    }
    Ok((state.into_inner(), Checkpoints { every, saved }))
}

/// Recomputes one segment at a time from its checkpoint, then backprops
/// through it with the segment's tapes.
pub fn checkpointed_backward<T: Real>(
    layers: Layers<'_, SubBlockParams<T>>,
    mut ckpts: Checkpoints<T>,
    g: Tensor<T>,
    env: BlockEnv<'_, '_, T>,
    drop: Option<&LayerDropout>,
    grads: &mut [SubBlockParams<T>],
) -> Result<Tensor<T>> {
    let depth = layers.depth();
    let expected = depth.div_ceil(ckpts.every);
    if ckpts.saved.len() != expected {
        return Err(Error::Contract(format!(
            "{} checkpoints for {depth} layers at interval {}",
            ckpts.saved.len(),
            ckpts.every
        )));
    }
    let mut g = g;
    while let Some(x) = ckpts.saved.pop() {
        let start = ckpts.saved.len() * ckpts.every;
        let end = (start + ckpts.every).min(depth);
        let (_, cache) = forward_range(layers, start..end, x.into_inner(), env, drop)?;
        g = res_backward_cached(layers, cache, g, env, grads)?;
    }
    Ok(g)
}
