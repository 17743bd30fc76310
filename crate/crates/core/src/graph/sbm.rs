//! Stochastic block model generator for desk-scale experiments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::csr::build_csr;
use super::data::{Dataset, LabelSet, Labels, NodeFeatures};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub num_nodes: usize,
    pub num_classes: usize,
    /// Edge probability inside a class.
    pub p_in: f64,
    /// Edge probability across classes.
    pub p_out: f64,
    /// At least `num_classes`; the first `num_classes` columns carry the
    /// one-hot class centroid.
    pub feature_dim: usize,
    /// Standard deviation of the Gaussian feature noise.
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        Self {
            num_nodes: 2000,
            num_classes: 4,
            p_in: 0.02,
            p_out: 0.002,
            feature_dim: 16,
            feature_noise: 1.0,
            seed: 0,
        }
    }
}

impl SbmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_nodes < 5 || self.num_classes < 2 {
            return Err(Error::Input("an SBM needs at least 5 nodes and 2 classes".into()));
        }
        if !(0.0 <= self.p_out && self.p_out < self.p_in && self.p_in <= 1.0) {
            return Err(Error::Input(format!(
                "edge probabilities must satisfy 0 <= p_out < p_in <= 1 (got p_in={}, p_out={})",
                self.p_in, self.p_out
            )));
        }
        if self.feature_dim < self.num_classes {
            return Err(Error::Input("feature_dim must be at least num_classes".into()));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::Input("feature_noise must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Expected number of undirected edges.
    pub fn expected_edges(&self) -> f64 {
        let n = self.num_nodes as f64;
        let k = self.num_classes as f64;
        // classes are balanced up to one node
        let same = k * (n / k) * (n / k - 1.0) / 2.0;
        let pairs = n * (n - 1.0) / 2.0;
        same * self.p_in + (pairs - same) * self.p_out
    }
}

/// Balanced classes (`i mod K`, shuffled), each unordered pair joined with
/// probability `p_in` or `p_out`, features = one-hot centroid + noise,
/// and a random 60/20/20 train/valid/test split. Edges are stored once
/// (`u < v`) in an undirected dataset.
pub fn generate_sbm(spec: &SbmSpec) -> Result<Dataset> {
    spec.validate()?;
    let (n, k) = (spec.num_nodes, spec.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0));
    let mut class: Vec<usize> = (0..n).map(|i| i % k).collect();
    class.shuffle(&mut rng);

    let mut edges = Vec::new();
    let mut erng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1));
    for u in 0..n {
        for v in u + 1..n {
            let p = if class[u] == class[v] { spec.p_in } else { spec.p_out };
            if p > 0.0 && erng.gen_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let graph = build_csr(&edges, n, None)?;

    let mut frng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2));
    let noise = Normal::new(0.0, spec.feature_noise).map_err(|e| Error::Input(e.to_string()))?;
    let mut x = Tensor::zeros(n, spec.feature_dim);
    for u in 0..n {
        let row = x.row_mut(u);
        for v in row.iter_mut() {
            *v = if spec.feature_noise > 0.0 { noise.sample(&mut frng) } else { 0.0 };
        }
        row[class[u]] += 1.0;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 3)));
    let n_train = n * 6 / 10;
    let n_valid = n * 2 / 10;
    let (mut train, mut valid, mut test) = (vec![false; n], vec![false; n], vec![false; n]);
    for (i, &u) in order.iter().enumerate() {
        if i < n_train {
            train[u] = true;
        } else if i < n_train + n_valid {
            valid[u] = true;
        } else {
            test[u] = true;
        }
    }
    Ok(Dataset {
        graph,
        features: NodeFeatures::new(x),
        labels: LabelSet::new(Labels::Class(class), k, train, valid, test)?,
        directed: false,
    })
}
