use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compressed sparse row adjacency. Row `u` lists the nodes `u` gathers
/// messages from; `edge_feat` row `e` belongs to edge slot `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrGraph {
    num_nodes: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    edge_feat: Option<Tensor<f64>>,
}

impl CsrGraph {
    /// Graph with `num_nodes` nodes and no edges.
    pub fn empty(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            row_ptr: vec![0; num_nodes + 1],
            col_idx: Vec::new(),
            edge_feat: None,
        }
    }

    /// Assembles a graph from raw CSR arrays, validating every invariant.
    pub fn from_parts(
        num_nodes: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        edge_feat: Option<Tensor<f64>>,
    ) -> Result<Self> {
        let g = Self {
            num_nodes,
            row_ptr,
            col_idx,
            edge_feat,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes;
        if self.row_ptr.len() != n + 1 || self.row_ptr[0] != 0 {
            return Err(Error::Input("row_ptr must have N+1 entries starting at 0".into()));
        }
        if self.row_ptr[n] != self.col_idx.len() {
            return Err(Error::Input("row_ptr[N] must equal the edge count".into()));
        }
        for u in 0..n {
            let (s, e) = (self.row_ptr[u], self.row_ptr[u + 1]);
            if s > e {
                return Err(Error::Input(format!("row_ptr decreases at row {u}")));
            }
            let row = &self.col_idx[s..e];
            if row.iter().any(|&v| v >= n) {
                return Err(Error::Input(format!("column index out of range in row {u}")));
            }
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Input(format!("row {u} is not strictly increasing")));
            }
        }
        if let Some(f) = &self.edge_feat {
            if f.rows() != self.col_idx.len() {
                return Err(Error::Input(format!(
                    "{} edge feature rows for {} edges",
                    f.rows(),
                    self.col_idx.len()
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    #[inline]
    pub fn num_edges(&self) -> usize {
        self.col_idx.len()
    }

    #[inline]
    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    #[inline]
    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn edge_feat(&self) -> Option<&Tensor<f64>> {
        self.edge_feat.as_ref()
    }

    pub fn edge_feat_dim(&self) -> usize {
        self.edge_feat.as_ref().map_or(0, |f| f.cols())
    }

    #[inline]
    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[u]..self.row_ptr[u + 1]]
    }

    /// Edge slots of row `u`.
    #[inline]
    pub fn edge_range(&self, u: usize) -> std::ops::Range<usize> {
        self.row_ptr[u]..self.row_ptr[u + 1]
    }

    #[inline]
    pub fn degree(&self, u: usize) -> usize {
        self.row_ptr[u + 1] - self.row_ptr[u]
    }

    /// Slot of edge `(u, v)`, if present.
    pub fn find_edge(&self, u: usize, v: usize) -> Option<usize> {
        self.neighbors(u)
            .binary_search(&v)
            .ok()
            .map(|i| self.row_ptr[u] + i)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.find_edge(u, v).is_some()
    }

    /// `(src, dst)` pairs in slot order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes)
            .flat_map(|u| self.neighbors(u).iter().map(move |&v| (u, v)))
            .collect()
    }

    pub fn is_symmetric(&self) -> bool {
        self.edges().iter().all(|&(u, v)| self.has_edge(v, u))
    }
}

/// Builds a canonical CSR graph. Duplicate pairs are merged, averaging their
/// edge features.
pub fn build_csr(
    edges: &[(usize, usize)],
    num_nodes: usize,
    edge_feat: Option<&Tensor<f64>>,
) -> Result<CsrGraph> {
    if let Some(&(s, d)) = edges.iter().find(|&&(s, d)| s >= num_nodes || d >= num_nodes) {
        return Err(Error::Input(format!(
            "edge ({s}, {d}) out of range for {num_nodes} nodes"
        )));
    }
    if let Some(f) = edge_feat {
        if f.rows() != edges.len() {
            return Err(Error::Input(format!(
                "{} edge feature rows for {} edges",
                f.rows(),
                edges.len()
            )));
        }
    }

    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by_key(|&i| edges[i]);

    let fdim = edge_feat.map_or(0, |f| f.cols());
    let mut row_ptr = vec![0usize; num_nodes + 1];
    let mut col_idx = Vec::with_capacity(edges.len());
    let mut feat: Vec<f64> = Vec::with_capacity(if edge_feat.is_some() { edges.len() * fdim } else { 0 });

    let mut i = 0;
    while i < order.len() {
        let key = edges[order[i]];
        let mut j = i;
        while j < order.len() && edges[order[j]] == key {
            j += 1;
        }
        col_idx.push(key.1);
        row_ptr[key.0 + 1] += 1;
        if let Some(f) = edge_feat {
            let k = (j - i) as f64;
            let mut acc = vec![0.0; fdim];
            for &slot in &order[i..j] {
                for (a, &v) in acc.iter_mut().zip(f.row(slot)) {
                    *a += v;
                }
            }
            feat.extend(acc.into_iter().map(|a| a / k));
        }
        i = j;
    }
    for u in 0..num_nodes {
        row_ptr[u + 1] += row_ptr[u];
    }
    let edge_feat = match edge_feat {
        Some(_) => Some(Tensor::from_vec(col_idx.len(), fdim, feat)?),
        None => None,
    };
    Ok(CsrGraph {
        num_nodes,
        row_ptr,
        col_idx,
        edge_feat,
    })
}

fn rebuild_with_extra(
    g: &CsrGraph,
    extra: Vec<(usize, usize)>,
    extra_feat: Vec<Vec<f64>>,
) -> Result<CsrGraph> {
    if extra.is_empty() {
        return Ok(g.clone());
    }
    let mut edges = g.edges();
    edges.extend(extra);
    let feat = match g.edge_feat() {
        Some(f) => {
            let mut data = f.as_slice().to_vec();
            for row in extra_feat {
                data.extend(row);
            }
            Some(Tensor::from_vec(edges.len(), f.cols(), data)?)
        }
        None => None,
    };
    build_csr(&edges, g.num_nodes(), feat.as_ref())
}

/// Adds the reverse of every one-way edge; reversed edges copy the forward
/// edge's features.
pub fn to_undirected(g: &CsrGraph) -> Result<CsrGraph> {
    let mut extra = Vec::new();
    let mut extra_feat = Vec::new();
    for u in 0..g.num_nodes() {
        for slot in g.edge_range(u) {
            let v = g.col_idx()[slot];
            if !g.has_edge(v, u) {
                extra.push((v, u));
                if let Some(f) = g.edge_feat() {
                    extra_feat.push(f.row(slot).to_vec());
                }
            }
        }
    }
    rebuild_with_extra(g, extra, extra_feat)
}

/// Gives every node exactly one self-loop; new loops carry zero features.
pub fn add_self_loops(g: &CsrGraph) -> Result<CsrGraph> {
    let fdim = g.edge_feat_dim();
    let mut extra = Vec::new();
    let mut extra_feat = Vec::new();
    for u in 0..g.num_nodes() {
        if !g.has_edge(u, u) {
            extra.push((u, u));
            if g.edge_feat().is_some() {
                extra_feat.push(vec![0.0; fdim]);
            }
        }
    }
    rebuild_with_extra(g, extra, extra_feat)
}

/// Symmetric GCN normalisation `1/√(deg(u)·deg(v))` per edge slot, degrees
/// counted on the self-looped graph.
pub fn gcn_norm_weights(g: &CsrGraph) -> Result<Vec<f64>> {
    if let Some(u) = (0..g.num_nodes()).find(|&u| !g.has_edge(u, u)) {
        return Err(Error::Precondition(format!(
            "gcn normalisation needs self-loops; node {u} has none"
        )));
    }
    let deg: Vec<f64> = (0..g.num_nodes()).map(|u| g.degree(u) as f64).collect();
    let mut w = Vec::with_capacity(g.num_edges());
    for u in 0..g.num_nodes() {
        for &v in g.neighbors(u) {
            w.push(1.0 / (deg[u] * deg[v]).sqrt());
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_cycle() {
        let g = build_csr(&[(0, 1), (1, 0)], 2, None).unwrap();
        assert_eq!(g.row_ptr(), &[0, 1, 2]);
        assert_eq!(g.col_idx(), &[1, 0]);
    }

    #[test]
    fn empty_graph() {
        let g = build_csr(&[], 3, None).unwrap();
        assert_eq!(g.row_ptr(), &[0, 0, 0, 0]);
        assert!(g.col_idx().is_empty());
    }

    #[test]
    fn unsorted_edges_are_sorted() {
        let g = build_csr(&[(1, 0), (0, 2), (0, 1)], 3, None).unwrap();
        assert_eq!(g.row_ptr(), &[0, 2, 3, 3]);
        assert_eq!(g.col_idx(), &[1, 2, 0]);
    }

    #[test]
    fn duplicates_merge_and_average_features() {
        let f = Tensor::from_rows(&[&[1.0, 0.0], &[5.0, 7.0], &[3.0, 2.0]]);
        let g = build_csr(&[(0, 1), (1, 0), (0, 1)], 2, Some(&f)).unwrap();
        assert_eq!(g.num_edges(), 2);
        let ef = g.edge_feat().unwrap();
        assert_eq!(ef.row(0), &[2.0, 1.0]);
        assert_eq!(ef.row(1), &[5.0, 7.0]);
    }

    #[test]
    fn features_follow_sorting() {
        let f = Tensor::from_rows(&[&[10.0], &[20.0], &[30.0]]);
        let g = build_csr(&[(1, 0), (0, 2), (0, 1)], 3, Some(&f)).unwrap();
        assert_eq!(g.edge_feat().unwrap().as_slice(), &[30.0, 20.0, 10.0]);
    }

    #[test]
    fn build_rejects_bad_input() {
        assert!(matches!(build_csr(&[(0, 3)], 3, None), Err(Error::Input(_))));
        let f = Tensor::from_rows(&[&[1.0]]);
        assert!(matches!(
            build_csr(&[(0, 1), (1, 0)], 2, Some(&f)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn undirected_examples() {
        let cyc = build_csr(&[(0, 1), (1, 0)], 2, None).unwrap();
        assert_eq!(to_undirected(&cyc).unwrap(), cyc);

        let arc = build_csr(&[(0, 1)], 2, None).unwrap();
        assert_eq!(to_undirected(&arc).unwrap().edges(), vec![(0, 1), (1, 0)]);

        let tri = build_csr(&[(0, 1), (1, 2), (2, 0)], 3, None).unwrap();
        let u = to_undirected(&tri).unwrap();
        assert_eq!(u.num_edges(), 6);
        assert!(u.is_symmetric());
    }

    #[test]
    fn reversed_edge_copies_features() {
        let f = Tensor::from_rows(&[&[4.0, -1.0]]);
        let g = build_csr(&[(0, 1)], 2, Some(&f)).unwrap();
        let u = to_undirected(&g).unwrap();
        let slot = u.find_edge(1, 0).unwrap();
        assert_eq!(u.edge_feat().unwrap().row(slot), &[4.0, -1.0]);
    }

    #[test]
    fn self_loop_examples() {
        let e = CsrGraph::empty(2);
        assert_eq!(add_self_loops(&e).unwrap().edges(), vec![(0, 0), (1, 1)]);

        let g = build_csr(&[(0, 0), (0, 1)], 2, None).unwrap();
        let l = add_self_loops(&g).unwrap();
        assert_eq!(l.edges().iter().filter(|&&e| e == (0, 0)).count(), 1);

        let cyc = build_csr(&[(0, 1), (1, 0)], 2, None).unwrap();
        assert_eq!(add_self_loops(&cyc).unwrap().num_edges(), 4);
    }

    #[test]
    fn self_loop_features_are_zero() {
        let f = Tensor::from_rows(&[&[2.0, 3.0]]);
        let g = build_csr(&[(0, 1)], 2, Some(&f)).unwrap();
        let l = add_self_loops(&g).unwrap();
        for u in 0..2 {
            let s = l.find_edge(u, u).unwrap();
            assert_eq!(l.edge_feat().unwrap().row(s), &[0.0, 0.0]);
        }
    }

    #[test]
    fn gcn_weight_examples() {
        let single = add_self_loops(&CsrGraph::empty(1)).unwrap();
        assert_eq!(gcn_norm_weights(&single).unwrap(), vec![1.0]);

        let cyc = add_self_loops(&build_csr(&[(0, 1), (1, 0)], 2, None).unwrap()).unwrap();
        assert!(gcn_norm_weights(&cyc).unwrap().iter().all(|&w| w == 0.5));

        let star = to_undirected(&build_csr(&[(0, 1), (0, 2)], 3, None).unwrap()).unwrap();
        let star = add_self_loops(&star).unwrap();
        let w = gcn_norm_weights(&star).unwrap();
        let s = star.find_edge(0, 1).unwrap();
        assert!((w[s] - 1.0 / 6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn gcn_weights_need_self_loops() {
        let cyc = build_csr(&[(0, 1), (1, 0)], 2, None).unwrap();
        assert!(matches!(gcn_norm_weights(&cyc), Err(Error::Precondition(_))));
    }

    fn arb_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (1usize..64).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 0..200)))
    }

    proptest! {
        #[test]
        fn csr_invariants_hold((n, edges) in arb_graph()) {
            let g = build_csr(&edges, n, None).unwrap();
            g.validate().unwrap();
            // rebuild from enumeration is the identity
            prop_assert_eq!(build_csr(&g.edges(), n, None).unwrap(), g.clone());
        }

        #[test]
        fn undirected_is_symmetric_and_idempotent((n, edges) in arb_graph()) {
            let g = build_csr(&edges, n, None).unwrap();
            let u = to_undirected(&g).unwrap();
            for a in 0..n {
                for b in 0..n {
                    prop_assert_eq!(u.has_edge(a, b), u.has_edge(b, a));
                }
            }
            prop_assert_eq!(to_undirected(&u).unwrap(), u);
        }

        #[test]
        fn self_loops_exactly_once((n, edges) in arb_graph()) {
            let g = add_self_loops(&build_csr(&edges, n, None).unwrap()).unwrap();
            for a in 0..n {
                prop_assert_eq!(g.neighbors(a).iter().filter(|&&v| v == a).count(), 1);
            }
            let w = gcn_norm_weights(&g).unwrap();
            prop_assert!(w.iter().all(|x| x.is_finite() && *x > 0.0));
        }
    }
}
