//! Run configuration: defaults, then a flat `key = value` file, then
//! command-line flags. Keys are the long flag names; `-` and `_` are
//! interchangeable.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use revgnn_core::deq::SolverConfig;
use revgnn_core::graph::SbmSpec;
use revgnn_core::kernels::{AggKind, AggSpec, NormKind};
use revgnn_core::models::{parse_norm, Arch, ModelConfig, Operator};
use revgnn_core::train::AdamConfig;
use revgnn_core::{Error, Precision, Result};

/// Environment variable consulted when no seed is configured.
pub const SEED_ENV: &str = "REVGNN_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Dataset directory; a synthetic SBM graph is generated when absent.
    pub data: Option<PathBuf>,
    pub edge_sum_features: bool,
    pub sbm_nodes: usize,
    pub sbm_classes: usize,
    pub sbm_p_in: f64,
    pub sbm_p_out: f64,
    pub sbm_feature_dim: usize,
    pub sbm_noise: f64,
    /// Defaults to the run seed.
    pub sbm_seed: Option<u64>,

    pub arch: Arch,
    pub operator: Operator,
    pub layers: usize,
    pub channels: usize,
    pub groups: usize,
    pub agg: AggKind,
    pub softmax_beta: f64,
    pub dropout: f64,
    pub norm: NormKind,
    pub deq_max_iter: usize,
    pub deq_tol_forward: Option<f64>,
    pub deq_tol_backward: Option<f64>,
    pub checkpoint_every: Option<usize>,

    pub parts_train: usize,
    pub parts_eval: usize,
    pub views: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: Option<u64>,
    pub precision: Precision,
    /// Evaluate every this many epochs; 0 evaluates after the last only.
    pub eval_every: usize,

    pub log_file: Option<PathBuf>,
    pub ckpt_dir: Option<PathBuf>,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub ckpt_every: usize,
    pub summary: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let s = SbmSpec::default();
        Self {
            data: None,
            edge_sum_features: false,
            sbm_nodes: s.num_nodes,
            sbm_classes: s.num_classes,
            sbm_p_in: s.p_in,
            sbm_p_out: s.p_out,
            sbm_feature_dim: s.feature_dim,
            sbm_noise: s.feature_noise,
            sbm_seed: None,
            arch: m.arch,
            operator: m.operator,
            layers: m.layers,
            channels: m.channels,
            groups: m.groups,
            agg: m.agg.kind,
            softmax_beta: m.agg.beta,
            dropout: m.dropout,
            norm: m.norm,
            deq_max_iter: 32,
            deq_tol_forward: None,
            deq_tol_backward: None,
            checkpoint_every: None,
            parts_train: 10,
            parts_eval: 5,
            views: 1,
            epochs: 200,
            lr: AdamConfig::default().lr,
            seed: None,
            precision: Precision::Single,
            eval_every: 0,
            log_file: None,
            ckpt_dir: None,
            ckpt_every: 0,
            summary: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Input(format!("bad value `{value}` for {key}: {e}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match value {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "" | "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Input(format!("bad value `{other}` for {key}: expected true or false"))),
    }
}

pub fn parse_precision(s: &str) -> Result<Precision> {
    match s {
        "single" | "f32" => Ok(Precision::Single),
        "double" | "f64" => Ok(Precision::Double),
        other => Err(Error::Input(format!("unknown precision `{other}` (single, double)"))),
    }
}

fn norm_name(n: NormKind) -> &'static str {
    match n {
        NormKind::Layer => "layer",
        NormKind::Batch => "batch",
    }
}

impl RunConfig {
    /// Every settable key, in the spelling of the long flags.
    pub const KEYS: &'static [&'static str] = &[
        "data",
        "edge-sum-features",
        "sbm-nodes",
        "sbm-classes",
        "sbm-p-in",
        "sbm-p-out",
        "sbm-feature-dim",
        "sbm-noise",
        "sbm-seed",
        "arch",
        "operator",
        "layers",
        "channels",
        "groups",
        "agg",
        "softmax-beta",
        "dropout",
        "norm",
        "deq-max-iter",
        "deq-tol-forward",
        "deq-tol-backward",
        "checkpoint-every",
        "parts-train",
        "parts-eval",
        "views",
        "epochs",
        "lr",
        "seed",
        "precision",
        "eval-every",
        "log-file",
        "ckpt-dir",
        "ckpt-every",
        "summary",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let k = key.as_str();
        match k {
            "data" => self.data = parse_opt(k, value)?,
            "edge-sum-features" => self.edge_sum_features = parse_bool(k, value)?,
            "sbm-nodes" => self.sbm_nodes = parse(k, value)?,
            "sbm-classes" => self.sbm_classes = parse(k, value)?,
            "sbm-p-in" => self.sbm_p_in = parse(k, value)?,
            "sbm-p-out" => self.sbm_p_out = parse(k, value)?,
            "sbm-feature-dim" => self.sbm_feature_dim = parse(k, value)?,
            "sbm-noise" => self.sbm_noise = parse(k, value)?,
            "sbm-seed" => self.sbm_seed = parse_opt(k, value)?,
            "arch" => self.arch = value.parse()?,
            "operator" => self.operator = value.parse()?,
            "layers" => self.layers = parse(k, value)?,
            "channels" => self.channels = parse(k, value)?,
            "groups" => self.groups = parse(k, value)?,
            "agg" => self.agg = value.parse()?,
            "softmax-beta" => self.softmax_beta = parse(k, value)?,
            "dropout" => self.dropout = parse(k, value)?,
            "norm" => self.norm = parse_norm(value)?,
            "deq-max-iter" => self.deq_max_iter = parse(k, value)?,
            "deq-tol-forward" => self.deq_tol_forward = parse_opt(k, value)?,
            "deq-tol-backward" => self.deq_tol_backward = parse_opt(k, value)?,
            "checkpoint-every" => self.checkpoint_every = parse_opt(k, value)?,
            "parts-train" => self.parts_train = parse(k, value)?,
            "parts-eval" => self.parts_eval = parse(k, value)?,
            "views" => self.views = parse(k, value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "lr" => self.lr = parse(k, value)?,
            "seed" => self.seed = parse_opt(k, value)?,
            "precision" => self.precision = parse_precision(value)?,
            "eval-every" => self.eval_every = parse(k, value)?,
            "log-file" => self.log_file = parse_opt(k, value)?,
            "ckpt-dir" => self.ckpt_dir = parse_opt(k, value)?,
            "ckpt-every" => self.ckpt_every = parse(k, value)?,
            "summary" => self.summary = parse_opt(k, value)?,
            other => return Err(Error::Input(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a flat config file: one `key = value` per line, `#` starts
    /// a comment, blank lines are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            self.set(k, v).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    /// Configured seed, else `REVGNN_SEED`, else 0.
    pub fn resolved_seed(&self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => parse(SEED_ENV, &v),
            Err(_) => Ok(0),
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            arch: self.arch,
            operator: self.operator,
            layers: self.layers,
            channels: self.channels,
            groups: self.groups,
            agg: AggSpec { kind: self.agg, beta: self.softmax_beta },
            dropout: self.dropout,
            norm: self.norm,
            solver: (self.arch == Arch::Deq).then_some(SolverConfig {
                max_iter: self.deq_max_iter,
                tol_forward: self.deq_tol_forward,
                tol_backward: self.deq_tol_backward,
            }),
            checkpoint_every: self.checkpoint_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sbm(&self) -> Result<SbmSpec> {
        let spec = SbmSpec {
            num_nodes: self.sbm_nodes,
            num_classes: self.sbm_classes,
            p_in: self.sbm_p_in,
            p_out: self.sbm_p_out,
            feature_dim: self.sbm_feature_dim,
            feature_noise: self.sbm_noise,
            seed: match self.sbm_seed {
                Some(s) => s,
                None => self.resolved_seed()?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?;
        if self.data.is_none() {
            self.sbm()?;
        }
        for (name, v) in [("parts-train", self.parts_train), ("parts-eval", self.parts_eval), ("views", self.views)] {
            if v == 0 {
                return Err(Error::Input(format!("{name} must be at least 1")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Input("lr must be positive".into()));
        }
        if self.ckpt_every > 0 && self.ckpt_dir.is_none() {
            return Err(Error::Input("ckpt-every needs ckpt-dir".into()));
        }
        Ok(())
    }

    /// The flat file form of this configuration; applying it to the
    /// defaults reproduces `self`.
    pub fn to_flat(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let path = |p: &Option<PathBuf>| opt(p.as_ref().map(|p| p.display().to_string()));
        let agg = serde_json::to_value(self.agg).expect("enum").as_str().unwrap_or_default().to_string();
        let precision = match self.precision {
            Precision::Single => "single",
            Precision::Double => "double",
        };
        let rows: Vec<(&str, String)> = vec![
            ("data", path(&self.data)),
            ("edge-sum-features", self.edge_sum_features.to_string()),
            ("sbm-nodes", self.sbm_nodes.to_string()),
            ("sbm-classes", self.sbm_classes.to_string()),
            ("sbm-p-in", self.sbm_p_in.to_string()),
            ("sbm-p-out", self.sbm_p_out.to_string()),
            ("sbm-feature-dim", self.sbm_feature_dim.to_string()),
            ("sbm-noise", self.sbm_noise.to_string()),
            ("sbm-seed", opt(self.sbm_seed.map(|s| s.to_string()))),
            ("arch", self.arch.to_string()),
            ("operator", self.operator.to_string()),
            ("layers", self.layers.to_string()),
            ("channels", self.channels.to_string()),
            ("groups", self.groups.to_string()),
            ("agg", agg),
            ("softmax-beta", self.softmax_beta.to_string()),
            ("dropout", self.dropout.to_string()),
            ("norm", norm_name(self.norm).to_string()),
            ("deq-max-iter", self.deq_max_iter.to_string()),
            ("deq-tol-forward", opt(self.deq_tol_forward.map(|v| v.to_string()))),
            ("deq-tol-backward", opt(self.deq_tol_backward.map(|v| v.to_string()))),
            ("checkpoint-every", opt(self.checkpoint_every.map(|v| v.to_string()))),
            ("parts-train", self.parts_train.to_string()),
            ("parts-eval", self.parts_eval.to_string()),
            ("views", self.views.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("seed", opt(self.seed.map(|v| v.to_string()))),
            ("precision", precision.to_string()),
            ("eval-every", self.eval_every.to_string()),
            ("log-file", path(&self.log_file)),
            ("ckpt-dir", path(&self.ckpt_dir)),
            ("ckpt-every", self.ckpt_every.to_string()),
            ("summary", path(&self.summary)),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
