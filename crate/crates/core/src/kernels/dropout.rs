use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::meter::ByteSize;
use crate::tensor::{Real, Tensor};

/// Binary keep-pattern with inverted-dropout scaling `1 / keep_prob`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    rows: usize,
    cols: usize,
    keep: Vec<u8>,
    keep_prob: f64,
}

impl ByteSize for DropoutMask {
    fn byte_size(&self) -> usize {
        self.keep.len()
    }
}

impl DropoutMask {
    pub fn from_bits(rows: usize, cols: usize, keep: Vec<u8>, keep_prob: f64) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(shape_err("DropoutMask", format!("{} bits for {rows}x{cols}", keep.len())));
        }
        if keep.iter().any(|&b| b > 1) {
            return Err(Error::Input("mask entries must be 0 or 1".into()));
        }
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Input(format!("keep_prob {keep_prob} outside (0, 1]")));
        }
        Ok(Self {
            rows,
            cols,
            keep,
            keep_prob,
        })
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![1; rows * cols],
            keep_prob: 1.0,
        }
    }

    /// Independent Bernoulli(1 − `drop_prob`) entries drawn from a ChaCha
    /// stream keyed by `seed`; the same seed always yields the same mask.
    pub fn sample(rows: usize, cols: usize, drop_prob: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(Error::Input(format!("drop probability {drop_prob} outside [0, 1)")));
        }
        let keep_prob = 1.0 - drop_prob;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = (0..rows * cols)
            .map(|_| u8::from(rng.gen::<f64>() < keep_prob))
            .collect();
        Ok(Self {
            rows,
            cols,
            keep,
            keep_prob,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }

    pub fn bits(&self) -> &[u8] {
        &self.keep
    }

    pub fn kept_fraction(&self) -> f64 {
        self.keep.iter().map(|&b| b as usize).sum::<usize>() as f64 / self.keep.len().max(1) as f64
    }
}

/// `x ⊙ mask / keep_prob`. Also serves as its own vector-Jacobian product.
pub fn dropout_apply<T: Real>(x: &Tensor<T>, m: &DropoutMask) -> Result<Tensor<T>> {
    if x.shape() != m.shape() {
        return Err(shape_err(
            "dropout_apply",
            format!("input {:?} vs mask {:?}", x.shape(), m.shape()),
        ));
    }
    let s = T::of(1.0 / m.keep_prob);
    let data = x
        .as_slice()
        .iter()
        .zip(&m.keep)
        .map(|(&v, &k)| if k == 1 { v * s } else { T::zero() })
        .collect();
    Tensor::from_vec(x.rows(), x.cols(), data)
}
