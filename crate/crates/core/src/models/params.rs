use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Arch, ModelConfig, ModelDims};
use crate::deq::DeqParams;
use crate::error::{Error, Result};
use crate::kernels::{ConvKind, LinearParams, NormParams, ParamSet};
use crate::rev::{Layers, RevBlockParams, SubBlockParams};
use crate::tensor::{Real, Tensor};

/// Parameters of the architecture-specific middle of the model.
#[derive(Debug, Clone, PartialEq)]
pub enum StackParams<T> {
    /// One bundle per layer, or a single bundle when weight-tied.
    Res(Vec<SubBlockParams<T>>),
    Rev(Vec<RevBlockParams<T>>),
    Deq(DeqParams<T>),
}

impl<T: Real> ParamSet<T> for StackParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        match self {
            StackParams::Res(v) => v.tensors(),
            StackParams::Rev(v) => v.tensors(),
            StackParams::Deq(p) => p.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            StackParams::Res(v) => v.tensors_mut(),
            StackParams::Rev(v) => v.tensors_mut(),
            StackParams::Deq(p) => p.tensors_mut(),
        }
    }
}

impl<T: Real> StackParams<T> {
    pub fn num_bundles(&self) -> usize {
        match self {
            StackParams::Res(v) => v.len(),
            StackParams::Rev(v) => v.len(),
            StackParams::Deq(_) => 1,
        }
    }
}

/// Encoder → stack → final norm + relu → decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: LinearParams<T>,
    pub stack: StackParams<T>,
    pub head_norm: NormParams<T>,
    pub decoder: LinearParams<T>,
}

/// Declaration order: encoder, stack bundles in layer order, head norm,
/// decoder. Checkpoints and optimizer state rely on it.
impl<T: Real> ParamSet<T> for ModelParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.encoder.tensors();
        v.extend(self.stack.tensors());
        v.extend(self.head_norm.tensors());
        v.extend(self.decoder.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.stack.tensors_mut());
        v.extend(self.head_norm.tensors_mut());
        v.extend(self.decoder.tensors_mut());
        v
    }
}

impl<T: Real> ModelParams<T> {
    pub fn res_layers(&self, cfg: &ModelConfig) -> Option<Layers<'_, SubBlockParams<T>>> {
        match &self.stack {
            StackParams::Res(v) if cfg.arch.is_tied() => Some(Layers::Tied { params: &v[0], depth: cfg.layers }),
            StackParams::Res(v) => Some(Layers::Distinct(v)),
            _ => None,
        }
    }

    pub fn rev_layers(&self, cfg: &ModelConfig) -> Option<Layers<'_, RevBlockParams<T>>> {
        match &self.stack {
            StackParams::Rev(v) if cfg.arch.is_tied() => Some(Layers::Tied { params: &v[0], depth: cfg.layers }),
            StackParams::Rev(v) => Some(Layers::Distinct(v)),
            _ => None,
        }
    }

    /// Checks that the parameter layout fits `cfg` and `dims`.
    pub fn check(&self, cfg: &ModelConfig, dims: &ModelDims) -> Result<()> {
        let expected = param_count(cfg, dims)?;
        let bundles = match cfg.arch {
            Arch::Res | Arch::Rev => cfg.layers,
            Arch::WtRes | Arch::WtRev | Arch::Deq => 1,
        };
        let kind_ok = matches!(
            (cfg.arch, &self.stack),
            (Arch::Res | Arch::WtRes, StackParams::Res(_))
                | (Arch::Rev | Arch::WtRev, StackParams::Rev(_))
                | (Arch::Deq, StackParams::Deq(_))
        );
        if !kind_ok || self.stack.num_bundles() != bundles || self.num_params() != expected {
            return Err(Error::Input(format!(
                "parameters ({} values, {} bundles) do not fit a {} model expecting {expected} values in {bundles} bundles",
                self.num_params(),
                self.stack.num_bundles(),
                cfg.arch
            )));
        }
        if self.encoder.d_in() != dims.features || self.decoder.d_out() != dims.outputs {
            return Err(Error::Input("encoder/decoder widths do not match the data".into()));
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases, identity norms; deterministic in
/// `seed`.
pub fn build_model<T: Real>(cfg: &ModelConfig, dims: &ModelDims, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.channels;
    let spec = cfg.block_spec();
    let edge = cfg.conv_edge_dim(dims.edge_dim);
    let encoder = LinearParams::glorot(dims.features, d, &mut rng);
    let bundles = if cfg.arch.is_tied() { 1 } else { cfg.layers };
    let stack = match cfg.arch {
        Arch::Res | Arch::WtRes => {
            StackParams::Res((0..bundles).map(|_| SubBlockParams::init(d, spec.conv, edge, &mut rng)).collect())
        }
        Arch::Rev | Arch::WtRev => StackParams::Rev(
            (0..bundles)
                .map(|_| RevBlockParams::init(d, cfg.groups, spec.conv, edge, &mut rng))
                .collect::<Result<_>>()?,
        ),
        Arch::Deq => StackParams::Deq(DeqParams::init(d, spec.conv, edge, cfg.dropout, &mut rng)),
    };
    Ok(ModelParams {
        encoder,
        stack,
        head_norm: NormParams::identity(d),
        decoder: LinearParams::glorot(d, dims.outputs, &mut rng),
    })
}

/// Closed-form parameter count of [`build_model`]'s output.
pub fn param_count(cfg: &ModelConfig, dims: &ModelDims) -> Result<usize> {
    cfg.validate()?;
    let d = cfg.channels;
    let conv = cfg.block_spec().conv;
    let edge = cfg.conv_edge_dim(dims.edge_dim);
    // norm (2w) + conv weight (in·w) + conv bias (w) + edge projection (f·w + w)
    let sub_block = |w: usize| {
        let fan_in = match conv {
            ConvKind::Plain => w,
            ConvKind::Sage => 2 * w,
        };
        2 * w + fan_in * w + w + edge.map_or(0, |f| f * w + w)
    };
    let bundle = match cfg.arch {
        Arch::Res | Arch::WtRes => sub_block(d),
        Arch::Rev | Arch::WtRev => cfg.groups * sub_block(d / cfg.groups),
        // two convs and two norms
        Arch::Deq => 2 * sub_block(d),
    };
    let bundles = match cfg.arch {
        Arch::Res | Arch::Rev => cfg.layers,
        _ => 1,
    };
    Ok((dims.features * d + d) + bundles * bundle + 2 * d + (d * dims.outputs + dims.outputs))
}
