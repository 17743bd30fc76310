//! Neighbourhood aggregation over CSR rows.
//!
//! Row `u` gathers one message per edge slot `e = (u, v)`:
//! `m_e = w_e · (x_v + p_e)` where `p_e` is an optional projected edge
//! feature and `w_e` an optional scalar edge weight (GCN normalisation).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::CsrGraph;
use crate::meter::ByteSize;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggKind {
    Sum,
    Mean,
    Max,
    /// Per-channel softmax-weighted sum with temperature `beta`.
    Softmax,
}

impl std::str::FromStr for AggKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(AggKind::Sum),
            "mean" => Ok(AggKind::Mean),
            "max" => Ok(AggKind::Max),
            "softmax" => Ok(AggKind::Softmax),
            other => Err(Error::Input(format!("unknown aggregator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggSpec {
    pub kind: AggKind,
    /// Softmax temperature; ignored by the other kinds.
    pub beta: f64,
}

impl AggSpec {
    pub const fn new(kind: AggKind) -> Self {
        Self { kind, beta: 1.0 }
    }

    pub const fn softmax(beta: f64) -> Self {
        Self {
            kind: AggKind::Softmax,
            beta,
        }
    }
}

/// Edge-level inputs to a message-passing step.
#[derive(Debug, Clone, Copy, Default)]
pub struct EdgeInputs<'a, T> {
    /// `M × D` additive message term.
    pub msg: Option<&'a Tensor<T>>,
    /// Length-`M` multiplicative weights.
    pub weight: Option<&'a [T]>,
}

/// State the backward pass needs beyond the forward inputs: for max, the
/// winning edge slot of each output entry.
#[derive(Debug, Clone, Default)]
pub struct AggCache {
    pub argmax: Option<Vec<u32>>,
}

impl ByteSize for AggCache {
    fn byte_size(&self) -> usize {
        self.argmax.as_ref().map_or(0, |a| a.byte_size())
    }
}

fn check<T: Real>(g: &CsrGraph, x: &Tensor<T>, edges: &EdgeInputs<'_, T>) -> Result<()> {
    if x.rows() != g.num_nodes() {
        return Err(shape_err(
            "aggregate",
            format!("{} feature rows for {} nodes", x.rows(), g.num_nodes()),
        ));
    }
    if let Some(m) = edges.msg {
        if m.shape() != (g.num_edges(), x.cols()) {
            return Err(shape_err(
                "aggregate",
                format!("edge messages {:?}, expected ({}, {})", m.shape(), g.num_edges(), x.cols()),
            ));
        }
    }
    if let Some(w) = edges.weight {
        if w.len() != g.num_edges() {
            return Err(shape_err("aggregate", "edge weight length differs from edge count"));
        }
    }
    Ok(())
}

#[inline]
fn message<T: Real>(
    x: &Tensor<T>,
    edges: &EdgeInputs<'_, T>,
    v: usize,
    slot: usize,
    out: &mut [T],
) {
    let w = edges.weight.map_or(T::one(), |w| w[slot]);
    match edges.msg {
        Some(m) => {
            for ((o, &a), &b) in out.iter_mut().zip(x.row(v)).zip(m.row(slot)) {
                *o = (a + b) * w;
            }
        }
        None if edges.weight.is_some() => {
            for (o, &a) in out.iter_mut().zip(x.row(v)) {
                *o = a * w;
            }
        }
        None => out.copy_from_slice(x.row(v)),
    }
}

fn empty_row_error(kind: AggKind, u: usize) -> Error {
    Error::Precondition(format!(
        "{kind:?} aggregation at node {u} with no incoming edges (add self-loops)"
    ))
}

pub fn aggregate<T: Real>(
    g: &CsrGraph,
    x: &Tensor<T>,
    edges: EdgeInputs<'_, T>,
    spec: &AggSpec,
) -> Result<(Tensor<T>, AggCache)> {
    check(g, x, &edges)?;
    if !spec.beta.is_finite() {
        return Err(Error::Input("softmax temperature must be finite".into()));
    }
    let (n, d) = x.shape();
    let mut out = Tensor::zeros(n, d);
    let mut msg = vec![T::zero(); d];
    let mut cache = AggCache::default();
    match spec.kind {
        AggKind::Sum | AggKind::Mean => {
            for u in 0..n {
                let range = g.edge_range(u);
                if range.is_empty() && spec.kind == AggKind::Mean {
                    return Err(empty_row_error(spec.kind, u));
                }
                let deg = range.len();
                let row = out.row_mut(u);
                for slot in range {
                    message(x, &edges, g.col_idx()[slot], slot, &mut msg);
                    for (o, &m) in row.iter_mut().zip(&msg) {
                        *o += m;
                    }
                }
                if spec.kind == AggKind::Mean {
                    let k = T::of(deg as f64);
                    row.iter_mut().for_each(|o| *o = *o / k);
                }
            }
        }
        AggKind::Max => {
            let mut argmax = vec![0u32; n * d];
            for u in 0..n {
                let mut range = g.edge_range(u);
                let first = range.next().ok_or_else(|| empty_row_error(spec.kind, u))?;
                let row = out.row_mut(u);
                let arg = &mut argmax[u * d..(u + 1) * d];
                message(x, &edges, g.col_idx()[first], first, row);
                arg.fill(first as u32);
                for slot in range {
                    message(x, &edges, g.col_idx()[slot], slot, &mut msg);
                    for c in 0..d {
                        // strict comparison keeps the lowest slot among ties
                        if msg[c] > row[c] {
                            row[c] = msg[c];
                            arg[c] = slot as u32;
                        }
                    }
                }
            }
            cache.argmax = Some(argmax);
        }
        AggKind::Softmax => {
            let beta = T::of(spec.beta);
            let mut msgs = Vec::new();
            let mut mx = vec![T::zero(); d];
            let mut den = vec![T::zero(); d];
            for u in 0..n {
                let range = g.edge_range(u);
                let deg = range.len();
                if deg == 0 {
                    continue;
                }
                msgs.resize(deg * d, T::zero());
                for (k, slot) in range.enumerate() {
                    message(x, &edges, g.col_idx()[slot], slot, &mut msgs[k * d..(k + 1) * d]);
                }
                softmax_stats(&msgs, deg, d, beta, &mut mx, &mut den);
                let row = out.row_mut(u);
                for k in 0..deg {
                    for c in 0..d {
                        let m = msgs[k * d + c];
                        row[c] += (beta * m - mx[c]).exp() * m;
                    }
                }
                for c in 0..d {
                    row[c] = row[c] / den[c];
                }
            }
        }
    }
    debug_assert!(out.all_finite(), "aggregate produced non-finite output");
    Ok((out, cache))
}

fn softmax_stats<T: Real>(msgs: &[T], deg: usize, d: usize, beta: T, mx: &mut [T], den: &mut [T]) {
    mx.fill(T::neg_infinity());
    for k in 0..deg {
        for c in 0..d {
            mx[c] = mx[c].max(beta * msgs[k * d + c]);
        }
    }
    den.fill(T::zero());
    for k in 0..deg {
        for c in 0..d {
            den[c] += (beta * msgs[k * d + c] - mx[c]).exp();
        }
    }
}

/// Vector-Jacobian product of [`aggregate`]. Returns the gradient for `x`
/// and, when edge messages were supplied, for the `M × D` message term.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_vjp<T: Real>(
    g: &CsrGraph,
    x: &Tensor<T>,
    edges: EdgeInputs<'_, T>,
    spec: &AggSpec,
    out: &Tensor<T>,
    cache: &AggCache,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    check(g, x, &edges)?;
    let (n, d) = x.shape();
    if gy.shape() != (n, d) {
        return Err(shape_err("aggregate_vjp", "upstream gradient shape"));
    }
    let mut gx = Tensor::zeros(n, d);
    let mut gmsg = edges.msg.map(|_| Tensor::zeros(g.num_edges(), d));
    let weight = |slot: usize| edges.weight.map_or(T::one(), |w| w[slot]);

    // Scatter one message gradient `gm` (w.r.t. m_e) into x_v and p_e.
    let mut scatter = |slot: usize, v: usize, c: usize, gm: T| {
        let w = weight(slot);
        let gx_row = gx.row_mut(v);
        gx_row[c] += gm * w;
        if let Some(gmsg) = gmsg.as_mut() {
            gmsg.row_mut(slot)[c] += gm * w;
        }
    };

    match spec.kind {
        AggKind::Sum | AggKind::Mean => {
            for u in 0..n {
                let range = g.edge_range(u);
                let scale = if spec.kind == AggKind::Mean {
                    if range.is_empty() {
                        return Err(empty_row_error(spec.kind, u));
                    }
                    T::one() / T::of(range.len() as f64)
                } else {
                    T::one()
                };
                for slot in range {
                    let v = g.col_idx()[slot];
                    for c in 0..d {
                        scatter(slot, v, c, gy.get(u, c) * scale);
                    }
                }
            }
        }
        AggKind::Max => {
            let argmax = cache
                .argmax
                .as_ref()
                .ok_or_else(|| Error::Contract("max aggregation vjp needs its argmax cache".into()))?;
            if argmax.len() != n * d {
                return Err(Error::Contract("stale argmax cache".into()));
            }
            for u in 0..n {
                for c in 0..d {
                    let slot = argmax[u * d + c] as usize;
                    scatter(slot, g.col_idx()[slot], c, gy.get(u, c));
                }
            }
        }
        AggKind::Softmax => {
            let beta = T::of(spec.beta);
            let mut msgs = Vec::new();
            let mut mx = vec![T::zero(); d];
            let mut den = vec![T::zero(); d];
            for u in 0..n {
                let range = g.edge_range(u);
                let deg = range.len();
                if deg == 0 {
                    continue;
                }
                msgs.resize(deg * d, T::zero());
                for (k, slot) in range.clone().enumerate() {
                    message(x, &edges, g.col_idx()[slot], slot, &mut msgs[k * d..(k + 1) * d]);
                }
                softmax_stats(&msgs, deg, d, beta, &mut mx, &mut den);
                for (k, slot) in range.enumerate() {
                    let v = g.col_idx()[slot];
                    for c in 0..d {
                        let m = msgs[k * d + c];
                        let a = (beta * m - mx[c]).exp() / den[c];
                        let gm = gy.get(u, c) * a * (T::one() + beta * (m - out.get(u, c)));
                        scatter(slot, v, c, gm);
                    }
                }
            }
        }
    }
    Ok((gx, gmsg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{add_self_loops, build_csr};
    use proptest::prelude::*;

    fn two_cycle() -> CsrGraph {
        build_csr(&[(0, 1), (1, 0)], 2, None).unwrap()
    }

    #[test]
    fn sum_on_edgeless_graph_is_zero() {
        let g = CsrGraph::empty(3);
        let x = Tensor::<f64>::filled(3, 2, 7.0);
        let (y, _) = aggregate(&g, &x, EdgeInputs::default(), &AggSpec::new(AggKind::Sum)).unwrap();
        assert_eq!(y, Tensor::zeros(3, 2));
    }

    #[test]
    fn max_on_two_cycle() {
        let x = Tensor::<f64>::from_rows(&[&[1.0], &[3.0]]);
        let (y, _) = aggregate(&two_cycle(), &x, EdgeInputs::default(), &AggSpec::new(AggKind::Max)).unwrap();
        assert_eq!(y.as_slice(), &[3.0, 1.0]);
    }

    #[test]
    fn softmax_high_temperature_approaches_max() {
        let x = Tensor::<f64>::from_rows(&[&[1.0], &[3.0]]);
        let g = add_self_loops(&two_cycle()).unwrap();
        let (hard, _) = aggregate(&g, &x, EdgeInputs::default(), &AggSpec::new(AggKind::Max)).unwrap();
        let (soft, _) = aggregate(&g, &x, EdgeInputs::default(), &AggSpec::softmax(1e6)).unwrap();
        assert!(soft.max_abs_diff(&hard).unwrap() < 1e-6);
    }

    #[test]
    fn mean_and_max_need_incoming_edges() {
        let g = CsrGraph::empty(2);
        let x = Tensor::<f64>::zeros(2, 1);
        for k in [AggKind::Mean, AggKind::Max] {
            let r = aggregate(&g, &x, EdgeInputs::default(), &AggSpec::new(k));
            assert!(matches!(r, Err(Error::Precondition(_))));
        }
    }

    #[test]
    fn max_tie_routes_to_lowest_slot() {
        let g = add_self_loops(&build_csr(&[(0, 1), (0, 2)], 3, None).unwrap()).unwrap();
        let x = Tensor::<f64>::from_rows(&[&[1.0], &[5.0], &[5.0]]);
        let spec = AggSpec::new(AggKind::Max);
        let (y, cache) = aggregate(&g, &x, EdgeInputs::default(), &spec).unwrap();
        assert_eq!(cache.argmax.as_ref().unwrap()[0], 1);
        let gy = Tensor::from_rows(&[&[1.0], &[0.0], &[0.0]]);
        let (gx, _) = aggregate_vjp(&g, &x, EdgeInputs::default(), &spec, &y, &cache, &gy).unwrap();
        assert_eq!(gx.as_slice(), &[0.0, 1.0, 0.0]);
        let (gx2, _) = aggregate_vjp(&g, &x, EdgeInputs::default(), &spec, &y, &cache, &gy).unwrap();
        assert_eq!(gx.to_f64().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   gx2.to_f64().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn weighted_sum_uses_edge_weights() {
        let g = add_self_loops(&two_cycle()).unwrap();
        let w = crate::graph::gcn_norm_weights(&g).unwrap();
        let x = Tensor::<f64>::from_rows(&[&[1.0], &[1.0]]);
        let e = EdgeInputs { msg: None, weight: Some(&w) };
        let (y, _) = aggregate(&g, &x, e, &AggSpec::new(AggKind::Sum)).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 1.0]);
    }

    fn random_case(n: usize, seed: u64) -> (CsrGraph, Tensor<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let edges: Vec<_> = (0..3 * n).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
        let g = add_self_loops(&build_csr(&edges, n, None).unwrap()).unwrap();
        let x = Tensor::from_vec(n, 3, (0..n * 3).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        (g, x)
    }

    proptest! {
        #[test]
        fn sum_matches_dense_adjacency_product(n in 1usize..32, seed: u64) {
            let (g, x) = random_case(n, seed);
            let mut a = Tensor::<f64>::zeros(n, n);
            for (u, v) in g.edges() {
                a.set(u, v, 1.0);
            }
            let dense = a.matmul(&x).unwrap();
            let (y, _) = aggregate(&g, &x, EdgeInputs::default(), &AggSpec::new(AggKind::Sum)).unwrap();
            prop_assert!(y.max_abs_diff(&dense).unwrap() <= 1e-12);
        }

        #[test]
        fn softmax_at_zero_temperature_is_mean(n in 1usize..32, seed: u64) {
            let (g, x) = random_case(n, seed);
            let (m, _) = aggregate(&g, &x, EdgeInputs::default(), &AggSpec::new(AggKind::Mean)).unwrap();
            let (s, _) = aggregate(&g, &x, EdgeInputs::default(), &AggSpec::softmax(0.0)).unwrap();
            prop_assert_eq!(m, s);
        }
    }
}
