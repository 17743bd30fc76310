use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// A bundle of learnable tensors visited in a fixed declaration order.
///
/// The order is part of the checkpoint format and of the optimizer state
/// layout, so implementations must never reorder their fields.
pub trait ParamSet<T: Real>: Clone {
    fn tensors(&self) -> Vec<&Tensor<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.as_slice().iter().map(|v| v.f64()))
            .collect()
    }

    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(shape_err("assign_flat", format!("{} values for {n} parameters", flat.len())));
        }
        let mut it = flat.iter();
        for t in self.tensors_mut() {
            for v in t.as_mut_slice() {
                *v = T::of(*it.next().unwrap());
            }
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

impl<T: Real, P: ParamSet<T>> ParamSet<T> for Vec<P> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        self.iter().flat_map(|p| p.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.iter_mut().flat_map(|p| p.tensors_mut()).collect()
    }
}

impl<T: Real, P: ParamSet<T>> ParamSet<T> for Option<P> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        self.iter().flat_map(|p| p.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.iter_mut().flat_map(|p| p.tensors_mut()).collect()
    }
}

/// Affine map `x·W + b`; `weight` is `D_in × D_out`, `bias` is `1 × D_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LinearParams<T> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(d_in, d_out),
            bias: Tensor::zeros(1, d_out),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (d_in + d_out).max(1) as f64).sqrt();
        let data = (0..d_in * d_out)
            .map(|_| T::of(rng.gen_range(-a..=a)))
            .collect();
        Self {
            weight: Tensor::from_vec(d_in, d_out, data).expect("sized above"),
            bias: Tensor::zeros(1, d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

impl<T: Real> ParamSet<T> for LinearParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Per-channel affine parameters of a normalisation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub epsilon: f64,
}

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

impl<T: Real> NormParams<T> {
    pub fn identity(d: usize) -> Self {
        Self {
            scale: Tensor::filled(1, d, T::one()),
            shift: Tensor::zeros(1, d),
            epsilon: DEFAULT_NORM_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.cols()
    }

    pub fn count(d: usize) -> usize {
        2 * d
    }
}

impl<T: Real> ParamSet<T> for NormParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![&self.scale, &self.shift]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.scale, &mut self.shift]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Per-node statistics over channels.
    Layer,
    /// Per-channel statistics over the nodes of the current (sub)graph.
    Batch,
}

impl<T: Real> ParamSet<T> for Tensor<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![self]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![self]
    }
}
