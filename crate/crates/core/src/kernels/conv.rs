use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate, aggregate_vjp, AggCache, AggSpec, EdgeInputs};
use super::dense::{linear, linear_param_vjp, linear_vjp};
use super::params::{LinearParams, ParamSet};
use crate::error::{Error, Result};
use crate::graph::{gcn_norm_weights, CsrGraph};
use crate::meter::ByteSize;
use crate::tensor::{Real, Tensor};

/// Graph structure as seen by the kernels of one (sub)graph: adjacency,
/// edge features in the working precision, optional GCN edge weights.
#[derive(Debug, Clone)]
pub struct Topology<'g, T> {
    pub graph: &'g CsrGraph,
    pub edge_feat: Option<Tensor<T>>,
    pub edge_weight: Option<Vec<T>>,
}

impl<'g, T: Real> Topology<'g, T> {
    pub fn new(graph: &'g CsrGraph) -> Self {
        Self {
            graph,
            edge_feat: graph.edge_feat().map(|f| f.cast()),
            edge_weight: None,
        }
    }

    /// Adds symmetric GCN normalisation weights (requires self-loops).
    pub fn with_gcn_weights(mut self) -> Result<Self> {
        self.edge_weight = Some(gcn_norm_weights(self.graph)?.into_iter().map(T::of).collect());
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }
}

/// Whether the root node's own features join the aggregated ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    /// `linear(aggregate(x))`
    Plain,
    /// `linear([x ‖ aggregate(x)])`
    Sage,
}

impl ConvKind {
    pub fn input_width(self, width: usize) -> usize {
        match self {
            ConvKind::Plain => width,
            ConvKind::Sage => 2 * width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub lin: LinearParams<T>,
    /// Maps raw edge features to the working width before messaging.
    pub edge_proj: Option<LinearParams<T>>,
}

impl<T: Real> ParamSet<T> for ConvParams<T> {
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.lin.tensors();
        v.extend(self.edge_proj.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.lin.tensors_mut();
        v.extend(self.edge_proj.tensors_mut());
        v
    }
}

impl<T: Real> ConvParams<T> {
    pub fn count(width: usize, kind: ConvKind, edge_dim: Option<usize>) -> usize {
        LinearParams::<T>::count(kind.input_width(width), width)
            + edge_dim.map_or(0, |f| LinearParams::<T>::count(f, width))
    }
}

/// Aggregated messages (input of the linear map) plus aggregation state.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    pub agg: Tensor<T>,
    pub agg_cache: AggCache,
}

impl<T: Real> ByteSize for ConvCache<T> {
    fn byte_size(&self) -> usize {
        self.agg.byte_size() + self.agg_cache.byte_size()
    }
}

fn edge_messages<T: Real>(topo: &Topology<'_, T>, p: &ConvParams<T>) -> Result<Option<Tensor<T>>> {
    match (&p.edge_proj, &topo.edge_feat) {
        (Some(proj), Some(u)) => Ok(Some(linear(u, proj)?)),
        (Some(_), None) => Err(Error::Input("edge projection given but graph has no edge features".into())),
        (None, _) => Ok(None),
    }
}

pub fn graph_conv<T: Real>(
    topo: &Topology<'_, T>,
    x: &Tensor<T>,
    p: &ConvParams<T>,
    spec: &AggSpec,
    kind: ConvKind,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let msg = edge_messages(topo, p)?;
    let edges = EdgeInputs {
        msg: msg.as_ref(),
        weight: topo.edge_weight.as_deref(),
    };
    let (agg, agg_cache) = aggregate(topo.graph, x, edges, spec)?;
    let out = match kind {
        ConvKind::Plain => linear(&agg, &p.lin)?,
        ConvKind::Sage => linear(&Tensor::hcat(&[x, &agg])?, &p.lin)?,
    };
    Ok((out, ConvCache { agg, agg_cache }))
}

/// Backward of [`graph_conv`]; `x` is the forward input.
pub fn graph_conv_vjp<T: Real>(
    topo: &Topology<'_, T>,
    x: &Tensor<T>,
    p: &ConvParams<T>,
    spec: &AggSpec,
    kind: ConvKind,
    cache: &ConvCache<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, ConvParams<T>)> {
    let w = x.cols();
    let (mut gx, g_agg, glin) = match kind {
        ConvKind::Plain => {
            let (g_agg, glin) = linear_vjp(&cache.agg, &p.lin, gy)?;
            (Tensor::zeros(x.rows(), w), g_agg, glin)
        }
        ConvKind::Sage => {
            let cat = Tensor::hcat(&[x, &cache.agg])?;
            let (gcat, glin) = linear_vjp(&cat, &p.lin, gy)?;
            (gcat.slice_cols(0, w), gcat.slice_cols(w, 2 * w), glin)
        }
    };
    // softmax needs the message term again; the other kinds only need its presence
    let msg = edge_messages(topo, p)?;
    let edges = EdgeInputs {
        msg: msg.as_ref(),
        weight: topo.edge_weight.as_deref(),
    };
    let (gx_agg, gmsg) = aggregate_vjp(topo.graph, x, edges, spec, &cache.agg, &cache.agg_cache, &g_agg)?;
    gx.add_assign(&gx_agg)?;
    let gproj = match (&p.edge_proj, gmsg, &topo.edge_feat) {
        (Some(_), Some(gm), Some(u)) => Some(linear_param_vjp(u, &gm)?),
        _ => None,
    };
    Ok((
        gx,
        ConvParams {
            lin: glin,
            edge_proj: gproj,
        },
    ))
}
