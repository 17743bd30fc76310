use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::csr::CsrGraph;
use super::data::{LabelSet, NodeFeatures};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Node → part assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    part_of: Vec<usize>,
    num_parts: usize,
}

impl Partition {
    /// Every node in part 0.
    pub fn whole(num_nodes: usize) -> Self {
        Self {
            part_of: vec![0; num_nodes],
            num_parts: 1,
        }
    }

    pub fn from_assignment(part_of: Vec<usize>, num_parts: usize) -> Result<Self> {
        if let Some(p) = part_of.iter().find(|&&p| p >= num_parts) {
            return Err(Error::Input(format!("part id {p} >= {num_parts}")));
        }
        Ok(Self { part_of, num_parts })
    }

    pub fn part_of(&self) -> &[usize] {
        &self.part_of
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }

    /// Nodes of `part`, ascending.
    pub fn members(&self, part: usize) -> Vec<usize> {
        (0..self.part_of.len())
            .filter(|&u| self.part_of[u] == part)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.num_parts];
        for &p in &self.part_of {
            s[p] += 1;
        }
        s
    }
}

/// Uniform random partition: a seeded permutation cut into `num_parts`
/// chunks whose sizes differ by at most one.
pub fn random_partition(g: &CsrGraph, num_parts: usize, seed: u64) -> Result<Partition> {
    let n = g.num_nodes();
    if num_parts == 0 || num_parts > n {
        return Err(Error::Input(format!(
            "num_parts must be in [1, {n}], got {num_parts}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / num_parts;
    let extra = n % num_parts;
    let mut part_of = vec![0; n];
    let mut pos = 0;
    for p in 0..num_parts {
        let size = base + usize::from(p < extra);
        for &u in &perm[pos..pos + size] {
            part_of[u] = p;
        }
        pos += size;
    }
    Ok(Partition { part_of, num_parts })
}

/// One part's induced subgraph plus its sliced node data.
#[derive(Debug, Clone)]
pub struct Subgraph {
    pub graph: CsrGraph,
    pub features: NodeFeatures,
    pub labels: LabelSet,
    /// Local id → global id.
    pub nodes: Vec<usize>,
}

/// Keeps the nodes of `part_id` (relabelled densely in ascending global
/// order) and the edges with both endpoints inside the part.
pub fn induced_subgraph(
    g: &CsrGraph,
    x: &NodeFeatures,
    labels: &LabelSet,
    part: &Partition,
    part_id: usize,
) -> Result<Subgraph> {
    if part_id >= part.num_parts() {
        return Err(Error::Input(format!(
            "part {part_id} out of range for {} parts",
            part.num_parts()
        )));
    }
    let nodes = part.members(part_id);
    let mut local = vec![usize::MAX; g.num_nodes()];
    for (i, &u) in nodes.iter().enumerate() {
        local[u] = i;
    }
    let mut row_ptr = Vec::with_capacity(nodes.len() + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::new();
    let mut slots = Vec::new();
    for &u in &nodes {
        // global ids ascend within a row and `local` is monotone, so rows stay sorted
        for slot in g.edge_range(u) {
            let v = g.col_idx()[slot];
            if local[v] != usize::MAX {
                col_idx.push(local[v]);
                slots.push(slot);
            }
        }
        row_ptr.push(col_idx.len());
    }
    let edge_feat = g.edge_feat().map(|f| f.gather_rows(&slots));
    let graph = CsrGraph::from_parts(nodes.len(), row_ptr, col_idx, edge_feat)?;
    Ok(Subgraph {
        graph,
        features: NodeFeatures::new(x.data.gather_rows(&nodes)),
        labels: labels.subset(&nodes),
        nodes,
    })
}

/// Helper used by evaluation: scatter local rows back to global order.
pub fn scatter_rows<T: crate::tensor::Real>(dst: &mut Tensor<T>, local: &Tensor<T>, nodes: &[usize]) {
    for (i, &u) in nodes.iter().enumerate() {
        dst.row_mut(u).copy_from_slice(local.row(i));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::csr::{add_self_loops, build_csr};
    use crate::graph::data::Labels;
    use proptest::prelude::*;

    fn dummy(n: usize) -> (NodeFeatures, LabelSet) {
        let x = NodeFeatures::new(Tensor::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap());
        let labels = LabelSet::new(Labels::Class((0..n).map(|i| i % 2).collect()), 2, vec![true; n], vec![false; n], vec![false; n]).unwrap();
        (x, labels)
    }

    #[test]
    fn partition_examples() {
        let g = CsrGraph::empty(4);
        assert_eq!(random_partition(&g, 1, 3).unwrap().part_of(), &[0, 0, 0, 0]);
        let mut s = random_partition(&g, 4, 3).unwrap().sizes();
        s.sort();
        assert_eq!(s, vec![1, 1, 1, 1]);
        let g10 = CsrGraph::empty(10);
        let mut s = random_partition(&g10, 3, 7).unwrap().sizes();
        s.sort();
        assert_eq!(s, vec![3, 3, 4]);
    }

    #[test]
    fn partition_range_checked() {
        let g = CsrGraph::empty(4);
        assert!(random_partition(&g, 0, 0).is_err());
        assert!(random_partition(&g, 5, 0).is_err());
    }

    #[test]
    fn partition_is_deterministic() {
        let g = CsrGraph::empty(50);
        assert_eq!(random_partition(&g, 7, 11).unwrap(), random_partition(&g, 7, 11).unwrap());
    }

    #[test]
    fn single_part_subgraph_is_whole_graph() {
        let g = build_csr(&[(0, 1), (1, 2), (2, 0)], 3, None).unwrap();
        let (x, l) = dummy(3);
        let s = induced_subgraph(&g, &x, &l, &Partition::whole(3), 0).unwrap();
        assert_eq!(s.graph, g);
        assert_eq!(s.nodes, vec![0, 1, 2]);
        assert_eq!(s.features, x);
    }

    #[test]
    fn singleton_with_self_loop() {
        let g = add_self_loops(&build_csr(&[(0, 1), (1, 0)], 2, None).unwrap()).unwrap();
        let (x, l) = dummy(2);
        let p = Partition::from_assignment(vec![0, 1], 2).unwrap();
        let s = induced_subgraph(&g, &x, &l, &p, 1).unwrap();
        assert_eq!(s.graph.num_nodes(), 1);
        assert_eq!(s.graph.edges(), vec![(0, 0)]);
        assert_eq!(s.features.data.as_slice(), &[1.0]);
    }

    #[test]
    fn split_two_cycle_is_edgeless() {
        let g = build_csr(&[(0, 1), (1, 0)], 2, None).unwrap();
        let (x, l) = dummy(2);
        let p = Partition::from_assignment(vec![0, 1], 2).unwrap();
        for part in 0..2 {
            assert_eq!(induced_subgraph(&g, &x, &l, &p, part).unwrap().graph.num_edges(), 0);
        }
    }

    #[test]
    fn edge_features_sliced_with_edges() {
        let f = Tensor::from_rows(&[&[1.0], &[2.0], &[3.0]]);
        let g = build_csr(&[(0, 2), (2, 0), (0, 1)], 3, Some(&f)).unwrap();
        let (x, l) = dummy(3);
        let p = Partition::from_assignment(vec![0, 1, 0], 2).unwrap();
        let s = induced_subgraph(&g, &x, &l, &p, 0).unwrap();
        assert_eq!(s.graph.edges(), vec![(0, 1), (1, 0)]);
        assert_eq!(s.graph.edge_feat().unwrap().as_slice(), &[1.0, 2.0]);
    }

    proptest! {
        #[test]
        fn sizes_depend_only_on_n_and_p(n in 1usize..200, p_frac in 0.0f64..1.0, s1: u64, s2: u64) {
            let p = 1 + ((n - 1) as f64 * p_frac) as usize;
            let g = CsrGraph::empty(n);
            let a = random_partition(&g, p, s1).unwrap();
            let b = random_partition(&g, p, s2).unwrap();
            let (mut sa, mut sb) = (a.sizes(), b.sizes());
            sa.sort();
            sb.sort();
            prop_assert_eq!(&sa, &sb);
            prop_assert!(sa.iter().all(|&s| s > 0));
            prop_assert!(sa[sa.len() - 1] - sa[0] <= 1);
            prop_assert_eq!(sa.iter().sum::<usize>(), n);
        }

        #[test]
        fn subgraph_edges_bounded(n in 2usize..40, edges in prop::collection::vec((0usize..40, 0usize..40), 1..120), p in 1usize..5, seed: u64) {
            let edges: Vec<_> = edges.into_iter().map(|(a, b)| (a % n, b % n)).collect();
            let g = build_csr(&edges, n, None).unwrap();
            let p = p.min(n);
            let part = random_partition(&g, p, seed).unwrap();
            let (x, l) = dummy(n);
            let total: usize = (0..p).map(|i| induced_subgraph(&g, &x, &l, &part, i).unwrap().graph.num_edges()).sum();
            prop_assert!(total <= g.num_edges());
            if p == 1 {
                prop_assert_eq!(total, g.num_edges());
            }
        }
    }
}
