//! Node data and the tab-separated dataset directory format.
//!
//! A dataset directory holds five UTF-8 files:
//!
//! | file         | row layout                                           |
//! |--------------|------------------------------------------------------|
//! | `nodes.tsv`  | `node_id`, then D feature columns                    |
//! | `edges.tsv`  | `src`, `dst`, then F optional edge-feature columns   |
//! | `labels.tsv` | `node_id`, then one class index or T binary columns  |
//! | `splits.tsv` | `node_id`, `train` \| `valid` \| `test`              |
//! | `meta.tsv`   | `key`, `value` for `num_nodes`, `num_classes`, `task`, `directed` |
//!
//! Node ids are `0..N-1` and every node appears exactly once in `nodes.tsv`
//! and `labels.tsv`. Any malformed row aborts the load with its line number.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::csr::{add_self_loops, build_csr, to_undirected, CsrGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `N × D` node feature matrix, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub data: Tensor<f64>,
}

impl NodeFeatures {
    pub fn new(data: Tensor<f64>) -> Self {
        debug_assert!(data.all_finite());
        Self { data }
    }

    pub fn num_nodes(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Multiclass,
    Multilabel,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiclass" => Ok(Task::Multiclass),
            "multilabel" => Ok(Task::Multilabel),
            other => Err(Error::Input(format!("unknown task `{other}`"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Multiclass => "multiclass",
            Task::Multilabel => "multilabel",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// One class index per node.
    Class(Vec<usize>),
    /// `N × T` binary targets stored as 0.0 / 1.0.
    Multi(Tensor<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Targets plus disjoint train/valid/test masks.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub labels: Labels,
    /// Class count (multiclass) or target count (multilabel).
    pub num_outputs: usize,
    pub train: Vec<bool>,
    pub valid: Vec<bool>,
    pub test: Vec<bool>,
}

impl LabelSet {
    pub fn new(
        labels: Labels,
        num_outputs: usize,
        train: Vec<bool>,
        valid: Vec<bool>,
        test: Vec<bool>,
    ) -> Result<Self> {
        let n = match &labels {
            Labels::Class(c) => {
                if let Some(&bad) = c.iter().find(|&&c| c >= num_outputs) {
                    return Err(Error::Input(format!(
                        "class index {bad} >= num_classes {num_outputs}"
                    )));
                }
                c.len()
            }
            Labels::Multi(m) => {
                if m.cols() != num_outputs {
                    return Err(Error::Input(format!(
                        "{} label columns for {num_outputs} targets",
                        m.cols()
                    )));
                }
                if m.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Input("multilabel targets must be 0 or 1".into()));
                }
                m.rows()
            }
        };
        if train.len() != n || valid.len() != n || test.len() != n {
            return Err(Error::Input("split masks must cover every node".into()));
        }
        if (0..n).any(|i| u8::from(train[i]) + u8::from(valid[i]) + u8::from(test[i]) > 1) {
            return Err(Error::Input("split masks overlap".into()));
        }
        Ok(Self {
            labels,
            num_outputs,
            train,
            valid,
            test,
        })
    }

    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    pub fn task(&self) -> Task {
        match self.labels {
            Labels::Class(_) => Task::Multiclass,
            Labels::Multi(_) => Task::Multilabel,
        }
    }

    pub fn mask(&self, split: Split) -> &[bool] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Rows `nodes`, in that order.
    pub fn subset(&self, nodes: &[usize]) -> LabelSet {
        let pick = |m: &[bool]| nodes.iter().map(|&u| m[u]).collect::<Vec<_>>();
        LabelSet {
            labels: match &self.labels {
                Labels::Class(c) => Labels::Class(nodes.iter().map(|&u| c[u]).collect()),
                Labels::Multi(m) => Labels::Multi(m.gather_rows(nodes)),
            },
            num_outputs: self.num_outputs,
            train: pick(&self.train),
            valid: pick(&self.valid),
            test: pick(&self.test),
        }
    }
}

/// A complete node-prediction dataset as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph: CsrGraph,
    pub features: NodeFeatures,
    pub labels: LabelSet,
    pub directed: bool,
}

impl Dataset {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn task(&self) -> Task {
        self.labels.task()
    }

    /// Training-ready copy: symmetrised when undirected, with self-loops.
    pub fn preprocessed(&self) -> Result<Dataset> {
        let mut g = if self.directed {
            self.graph.clone()
        } else {
            to_undirected(&self.graph)?
        };
        g = add_self_loops(&g)?;
        Ok(Dataset {
            graph: g,
            ..self.clone()
        })
    }

    /// Replaces node features by the sum of each node's incident edge
    /// features (for graphs whose only signal lives on edges).
    pub fn with_edge_sum_features(&self) -> Result<Dataset> {
        let ef = self.graph.edge_feat().ok_or_else(|| {
            Error::Input("edge-sum node features need edge features".into())
        })?;
        let mut x = Tensor::zeros(self.num_nodes(), ef.cols());
        for u in 0..self.num_nodes() {
            for slot in self.graph.edge_range(u) {
                for (o, &v) in x.row_mut(u).iter_mut().zip(ef.row(slot)) {
                    *o += v;
                }
            }
        }
        Ok(Dataset {
            features: NodeFeatures::new(x),
            ..self.clone()
        })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        load_dir(dir.as_ref())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_dir(self, dir.as_ref())
    }
}

struct TsvRows {
    path: PathBuf,
    text: String,
}

impl TsvRows {
    fn open(dir: &Path, name: &str) -> Result<Self> {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(|e| Error::Parse {
            path: path.clone(),
            line: 0,
            msg: e.to_string(),
        })?;
        Ok(Self { path, text })
    }

    /// Non-empty lines with 1-based line numbers.
    fn rows(&self) -> impl Iterator<Item = (usize, Vec<&str>)> {
        self.text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i + 1, l.split('\t').map(str::trim).collect()))
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            msg: msg.into(),
        }
    }

    fn parse<V: FromStr>(&self, line: usize, field: &str, what: &str) -> Result<V> {
        field
            .parse()
            .map_err(|_| self.err(line, format!("invalid {what} `{field}`")))
    }
}

fn load_dir(dir: &Path) -> Result<Dataset> {
    let meta = TsvRows::open(dir, "meta.tsv")?;
    let (mut num_nodes, mut num_classes, mut task, mut directed) = (None, None, None, None);
    for (line, f) in meta.rows() {
        if f.len() != 2 {
            return Err(meta.err(line, "expected `key<TAB>value`"));
        }
        match f[0] {
            "num_nodes" => num_nodes = Some(meta.parse::<usize>(line, f[1], "num_nodes")?),
            "num_classes" => num_classes = Some(meta.parse::<usize>(line, f[1], "num_classes")?),
            "task" => {
                task = Some(f[1].parse::<Task>().map_err(|e| meta.err(line, e.to_string()))?)
            }
            "directed" => {
                directed = Some(match f[1] {
                    "0" => false,
                    "1" => true,
                    v => return Err(meta.err(line, format!("directed must be 0 or 1, got `{v}`"))),
                })
            }
            k => return Err(meta.err(line, format!("unknown key `{k}`"))),
        }
    }
    let missing = |k: &str| meta.err(0, format!("missing key `{k}`"));
    let n = num_nodes.ok_or_else(|| missing("num_nodes"))?;
    let num_classes = num_classes.ok_or_else(|| missing("num_classes"))?;
    let task = task.ok_or_else(|| missing("task"))?;
    let directed = directed.ok_or_else(|| missing("directed"))?;

    let node_id = |t: &TsvRows, line: usize, s: &str| -> Result<usize> {
        let id: usize = t.parse(line, s, "node id")?;
        if id >= n {
            return Err(t.err(line, format!("node id {id} >= num_nodes {n}")));
        }
        Ok(id)
    };

    // nodes
    let nodes = TsvRows::open(dir, "nodes.tsv")?;
    let mut dim = None;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; n];
    for (line, f) in nodes.rows() {
        let id = node_id(&nodes, line, f[0])?;
        let d = f.len() - 1;
        if *dim.get_or_insert(d) != d {
            return Err(nodes.err(line, format!("expected {} feature columns, got {d}", dim.unwrap())));
        }
        let vals = f[1..]
            .iter()
            .map(|s| nodes.parse::<f64>(line, s, "feature"))
            .collect::<Result<Vec<_>>>()?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(nodes.err(line, "non-finite feature"));
        }
        if rows[id].replace(vals).is_some() {
            return Err(nodes.err(line, format!("duplicate node id {id}")));
        }
    }
    let dim = dim.unwrap_or(0);
    let mut feat = Vec::with_capacity(n * dim);
    for (id, r) in rows.into_iter().enumerate() {
        feat.extend(r.ok_or_else(|| nodes.err(0, format!("node {id} missing")))?);
    }
    let features = NodeFeatures::new(Tensor::from_vec(n, dim, feat)?);

    // edges
    let edges_f = TsvRows::open(dir, "edges.tsv")?;
    let mut edges = Vec::new();
    let mut efeat = Vec::new();
    let mut fdim = None;
    for (line, f) in edges_f.rows() {
        if f.len() < 2 {
            return Err(edges_f.err(line, "expected `src<TAB>dst[<TAB>features]`"));
        }
        let s = node_id(&edges_f, line, f[0])?;
        let d = node_id(&edges_f, line, f[1])?;
        let k = f.len() - 2;
        if *fdim.get_or_insert(k) != k {
            return Err(edges_f.err(line, "inconsistent edge feature width"));
        }
        for v in &f[2..] {
            efeat.push(edges_f.parse::<f64>(line, v, "edge feature")?);
        }
        edges.push((s, d));
    }
    let fdim = fdim.unwrap_or(0);
    let ef = if fdim > 0 {
        Some(Tensor::from_vec(edges.len(), fdim, efeat)?)
    } else {
        None
    };
    let graph = build_csr(&edges, n, ef.as_ref())?;

    // labels
    let lab = TsvRows::open(dir, "labels.tsv")?;
    let mut seen = vec![false; n];
    let labels = match task {
        Task::Multiclass => {
            let mut c = vec![0usize; n];
            for (line, f) in lab.rows() {
                let id = node_id(&lab, line, f[0])?;
                if f.len() != 2 {
                    return Err(lab.err(line, "expected `node_id<TAB>class`"));
                }
                let k: usize = lab.parse(line, f[1], "class index")?;
                if k >= num_classes {
                    return Err(lab.err(line, format!("class {k} >= num_classes {num_classes}")));
                }
                if std::mem::replace(&mut seen[id], true) {
                    return Err(lab.err(line, format!("duplicate node id {id}")));
                }
                c[id] = k;
            }
            Labels::Class(c)
        }
        Task::Multilabel => {
            let mut m = Tensor::zeros(n, num_classes);
            for (line, f) in lab.rows() {
                let id = node_id(&lab, line, f[0])?;
                if f.len() != num_classes + 1 {
                    return Err(lab.err(line, format!("expected {num_classes} label columns")));
                }
                for (t, s) in f[1..].iter().enumerate() {
                    let v = match *s {
                        "0" => 0.0,
                        "1" => 1.0,
                        other => return Err(lab.err(line, format!("label must be 0 or 1, got `{other}`"))),
                    };
                    m.set(id, t, v);
                }
                if std::mem::replace(&mut seen[id], true) {
                    return Err(lab.err(line, format!("duplicate node id {id}")));
                }
            }
            Labels::Multi(m)
        }
    };
    if let Some(id) = seen.iter().position(|s| !s) {
        return Err(lab.err(0, format!("node {id} has no label")));
    }

    // splits
    let sp = TsvRows::open(dir, "splits.tsv")?;
    let (mut train, mut valid, mut test) = (vec![false; n], vec![false; n], vec![false; n]);
    for (line, f) in sp.rows() {
        if f.len() != 2 {
            return Err(sp.err(line, "expected `node_id<TAB>split`"));
        }
        let id = node_id(&sp, line, f[0])?;
        if train[id] || valid[id] || test[id] {
            return Err(sp.err(line, format!("node {id} assigned twice")));
        }
        match f[1] {
            "train" => train[id] = true,
            "valid" => valid[id] = true,
            "test" => test[id] = true,
            other => return Err(sp.err(line, format!("unknown split `{other}`"))),
        }
    }

    Ok(Dataset {
        graph,
        features,
        labels: LabelSet::new(labels, num_classes, train, valid, test)?,
        directed,
    })
}

fn save_dir(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = ds.num_nodes();

    let mut s = String::new();
    for u in 0..n {
        write!(s, "{u}").unwrap();
        for v in ds.features.data.row(u) {
            write!(s, "\t{v}").unwrap();
        }
        s.push('\n');
    }
    fs::write(dir.join("nodes.tsv"), &s)?;

    s.clear();
    for (slot, (u, v)) in ds.graph.edges().into_iter().enumerate() {
        write!(s, "{u}\t{v}").unwrap();
        if let Some(f) = ds.graph.edge_feat() {
            for x in f.row(slot) {
                write!(s, "\t{x}").unwrap();
            }
        }
        s.push('\n');
    }
    fs::write(dir.join("edges.tsv"), &s)?;

    s.clear();
    for u in 0..n {
        match &ds.labels.labels {
            Labels::Class(c) => writeln!(s, "{u}\t{}", c[u]).unwrap(),
            Labels::Multi(m) => {
                write!(s, "{u}").unwrap();
                for &v in m.row(u) {
                    write!(s, "\t{}", v as u8).unwrap();
                }
                s.push('\n');
            }
        }
    }
    fs::write(dir.join("labels.tsv"), &s)?;

    s.clear();
    for u in 0..n {
        let l = &ds.labels;
        let name = if l.train[u] {
            "train"
        } else if l.valid[u] {
            "valid"
        } else if l.test[u] {
            "test"
        } else {
            continue;
        };
        writeln!(s, "{u}\t{name}").unwrap();
    }
    fs::write(dir.join("splits.tsv"), &s)?;

    let meta = format!(
        "num_nodes\t{n}\nnum_classes\t{}\ntask\t{}\ndirected\t{}\n",
        ds.labels.num_outputs,
        ds.task(),
        u8::from(ds.directed)
    );
    fs::write(dir.join("meta.tsv"), meta)?;
    Ok(())
}
