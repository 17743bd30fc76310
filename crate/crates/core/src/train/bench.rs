//! Memory benchmark: one metered training step per (architecture, depth)
//! cell on a synthetic graph.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::deq::SolverConfig;
use crate::error::{Error, Result};
use crate::graph::{generate_sbm, Dataset, SbmSpec, Split};
use crate::meter::MemoryMeter;
use crate::models::{backward, build_model, param_count, Arch, Batch, ModelConfig, ModelDims, StepOptions, Targets};
use crate::train::LossKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub nodes: usize,
    pub channels: usize,
    pub groups: usize,
    /// Mean degree of the synthetic graph.
    pub degree: f64,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            nodes: 1024,
            channels: 64,
            groups: 2,
            degree: 8.0,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn config(&self, arch: Arch, depth: usize) -> ModelConfig {
        ModelConfig {
            arch,
            layers: depth,
            channels: self.channels,
            groups: self.groups,
            // tolerances below reach so every solve runs all K iterations
            solver: (arch == Arch::Deq).then_some(SolverConfig {
                max_iter: depth,
                tol_forward: Some(1e-30),
                tol_backward: Some(1e-30),
            }),
            ..ModelConfig::default()
        }
    }

    /// Residual stack that keeps every ⌈√L⌉-th layer input.
    pub fn checkpointed(&self, depth: usize) -> ModelConfig {
        ModelConfig {
            checkpoint_every: Some(((depth as f64).sqrt().ceil() as usize).max(1)),
            ..self.config(Arch::Res, depth)
        }
    }

    /// Depth sweep of every architecture plus checkpointed res; `deq` sweeps
    /// its iteration cap instead.
    pub fn grid(&self, depths: &[usize], deq_iters: &[usize]) -> Vec<ModelConfig> {
        let mut cells = Vec::new();
        for arch in [Arch::Res, Arch::Rev, Arch::WtRes, Arch::WtRev] {
            cells.extend(depths.iter().map(|&l| self.config(arch, l)));
        }
        cells.extend(depths.iter().map(|&l| self.checkpointed(l)));
        cells.extend(deq_iters.iter().map(|&k| self.config(Arch::Deq, k)));
        cells
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let classes = 4;
        let block = self.nodes as f64 / classes as f64;
        generate_sbm(&SbmSpec {
            num_nodes: self.nodes,
            num_classes: classes,
            p_in: (0.8 * self.degree / block).min(1.0),
            p_out: 0.2 * self.degree / (self.nodes as f64 - block),
            feature_dim: 16,
            feature_noise: 1.0,
            seed: self.seed,
        })?
        .preprocessed()
    }
}

/// One row of the benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    /// Architecture name, with `+ckpt` for checkpointed residual stacks.
    pub arch: String,
    /// `L`, or the iteration cap `K` for `deq`.
    pub depth: usize,
    pub params: Option<usize>,
    /// Retained-activation peak (activations and dropout masks).
    pub peak_activation_bytes: Option<usize>,
    /// Peak of everything registered, gradients and solver scratch included.
    pub peak_bytes: Option<usize>,
    pub error: Option<String>,
}

fn label(cfg: &ModelConfig) -> String {
    match cfg.checkpoint_every {
        Some(_) => format!("{}+ckpt", cfg.arch),
        None => cfg.arch.to_string(),
    }
}

fn depth(cfg: &ModelConfig) -> usize {
    match (cfg.arch, &cfg.solver) {
        (Arch::Deq, Some(s)) => s.max_iter,
        _ => cfg.layers,
    }
}

fn run_cell(data: &Dataset, cfg: &ModelConfig, seed: u64) -> Result<(usize, usize, usize)> {
    let dims = ModelDims {
        features: data.features.dim(),
        outputs: data.labels.num_outputs,
        edge_dim: None,
    };
    let params = build_model::<f32>(cfg, &dims, seed)?;
    let x = data.features.data.cast::<f32>();
    let meter = MemoryMeter::new();
    let out = backward(
        &params,
        cfg,
        Batch { graph: &data.graph, x: &x },
        Targets {
            labels: &data.labels.labels,
            active: data.labels.mask(Split::Train),
            loss: LossKind::SoftmaxCe,
        },
        StepOptions { drop_seed: seed, probe_layer: None },
        &meter,
    )?;
    meter.check_balanced()?;
    Ok((param_count(cfg, &dims)?, out.report.peak_activation_bytes, out.report.peak_bytes))
}

/// Runs the cells in order, each with a fresh meter, in single precision.
/// A failing cell is recorded and the run continues.
pub fn bench_memory(spec: &BenchSpec, cells: &[ModelConfig]) -> Result<Vec<BenchCell>> {
    let data = spec.dataset()?;
    Ok(cells
        .iter()
        .map(|cfg| {
            let mut cell = BenchCell {
                arch: label(cfg),
                depth: depth(cfg),
                params: None,
                peak_activation_bytes: None,
                peak_bytes: None,
                error: None,
            };
            match run_cell(&data, cfg, spec.seed) {
                Ok((p, act, all)) => {
                    cell.params = Some(p);
                    cell.peak_activation_bytes = Some(act);
                    cell.peak_bytes = Some(all);
                }
                Err(e) => cell.error = Some(e.to_string()),
            }
            cell
        })
        .collect())
}

/// Aligned text table, one row per cell.
pub fn render_table(cells: &[BenchCell]) -> String {
    let opt = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
    let mut rows = vec![[
        "arch".to_string(),
        "depth".to_string(),
        "params".to_string(),
        "act_peak_bytes".to_string(),
        "peak_bytes".to_string(),
        "status".to_string(),
    ]];
    for c in cells {
        rows.push([
            c.arch.clone(),
            c.depth.to_string(),
            opt(c.params),
            opt(c.peak_activation_bytes),
            opt(c.peak_bytes),
            c.error.as_ref().map_or_else(|| "ok".to_string(), |e| format!("FAILED: {e}")),
        ]);
    }
    let widths: Vec<usize> = (0..6).map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in &rows {
        let line: Vec<String> = (0..6)
            .map(|j| if j == 0 || j == 5 { format!("{:<w$}", r[j], w = widths[j]) } else { format!("{:>w$}", r[j], w = widths[j]) })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

pub fn parse_bench_json(s: &str) -> Result<Vec<BenchCell>> {
    serde_json::from_str(s).map_err(|e| Error::Input(format!("benchmark json: {e}")))
}
