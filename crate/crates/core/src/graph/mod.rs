//! Graph storage, normalisation transforms, random partitioning and
//! mini-batch subgraph extraction.

pub mod csr;
pub mod data;
pub mod partition;
pub mod sbm;

pub use csr::{add_self_loops, build_csr, gcn_norm_weights, to_undirected, CsrGraph};
pub use data::{Dataset, LabelSet, Labels, NodeFeatures, Split, Task};
pub use partition::{induced_subgraph, random_partition, scatter_rows, Partition, Subgraph};
pub use sbm::{generate_sbm, SbmSpec};
