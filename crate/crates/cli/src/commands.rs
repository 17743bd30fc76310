//! Subcommand implementations. Each returns its result instead of
//! printing it, so tests can drive them directly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use revgnn_core::gradcheck::{deq_checks, kernel_checks, model_checks, rev_block_checks, GradCheck, RevShape};
use revgnn_core::graph::{generate_sbm, Dataset};
use revgnn_core::kernels::{AggSpec, ConvKind};
use revgnn_core::meter::MemoryMeter;
use revgnn_core::models::checkpoint;
use revgnn_core::models::{param_count, ModelConfig};
use revgnn_core::seed::derive_seed;
use revgnn_core::train::{bench_memory, render_table, BenchCell, BenchSpec, EpochLog, Evaluation, Trainer};
use revgnn_core::{Error, Precision, Real, Result};

use crate::config::RunConfig;

/// Seed stream of the evaluation partitions.
const EVAL_STREAM: u64 = 0xE7A1;

/// Final outcome of a run. Contains no timings, so identical runs produce
/// identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub arch: String,
    pub operator: String,
    pub layers: usize,
    pub channels: usize,
    pub groups: usize,
    pub precision: Precision,
    pub seed: u64,
    pub nodes: usize,
    pub params: usize,
    pub epochs: usize,
    pub train_loss: Option<f64>,
    pub train_metric: Option<f64>,
    pub valid_loss: f64,
    pub valid_metric: f64,
    pub test_loss: f64,
    pub test_metric: f64,
    /// Largest retained-activation peak over all training steps.
    pub peak_activation_bytes: usize,
    /// Solver runs that hit the iteration cap (`deq` only).
    pub deq_unconverged: Option<usize>,
}

impl Summary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serialises") + "\n"
    }

    /// Metric, peak bytes and parameter count on one line.
    pub fn headline(&self) -> String {
        format!(
            "{} L={} D={} C={}: test {:.4} (valid {:.4}), activation peak {} bytes, {} params",
            self.arch, self.layers, self.channels, self.groups, self.test_metric, self.valid_metric,
            self.peak_activation_bytes, self.params
        )
    }
}

/// Loads `--data` (or generates the SBM graph) and applies the usual
/// preprocessing.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let raw = match &cfg.data {
        Some(dir) => Dataset::load(dir)?,
        None => generate_sbm(&cfg.sbm()?)?,
    };
    let raw = if cfg.edge_sum_features { raw.with_edge_sum_features()? } else { raw };
    raw.preprocessed()
}

struct LogSink {
    out: Box<dyn Write>,
}

impl LogSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        let out: Box<dyn Write> = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                Box::new(BufWriter::new(File::create(p)?))
            }
            None => Box::new(std::io::stdout()),
        };
        Ok(Self { out })
    }

    fn write(&mut self, log: &EpochLog) -> Result<()> {
        writeln!(self.out, "{}", log.to_json_line())?;
        Ok(())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

/// Training totals carried into the summary.
#[derive(Default)]
struct Progress {
    last: Option<EpochLog>,
    peak: usize,
    deq_unconverged: Option<usize>,
}

fn summarize<T: Real>(
    cfg: &RunConfig,
    trainer: &Trainer<T>,
    data: &Dataset,
    seed: u64,
    progress: &Progress,
    ev: &Evaluation,
) -> Result<Summary> {
    let last = progress.last.as_ref();
    Ok(Summary {
        arch: trainer.cfg.arch.to_string(),
        operator: trainer.cfg.operator.to_string(),
        layers: trainer.cfg.layers,
        channels: trainer.cfg.channels,
        groups: trainer.cfg.groups,
        precision: cfg.precision,
        seed,
        nodes: data.num_nodes(),
        params: param_count(&trainer.cfg, &trainer.dims)?,
        epochs: cfg.epochs,
        train_loss: last.map(|l| l.loss),
        train_metric: last.map(|l| l.metric),
        valid_loss: ev.valid_loss,
        valid_metric: ev.valid_metric,
        test_loss: ev.test_loss,
        test_metric: ev.test_metric,
        peak_activation_bytes: progress.peak,
        deq_unconverged: progress.deq_unconverged,
    })
}

fn train_typed<T: Real>(cfg: &RunConfig) -> Result<Summary> {
    let seed = cfg.resolved_seed()?;
    let model = cfg.model()?;
    let data = load_data(cfg)?;
    let mut trainer = Trainer::<T>::new(model, &data, cfg.adam(), seed)?;
    info!(
        "training {} on {} nodes: {} parameters",
        model.arch,
        data.num_nodes(),
        param_count(&model, &trainer.dims)?
    );
    let mut sink = LogSink::open(cfg.log_file.as_deref())?;
    let meter = MemoryMeter::new();
    let mut progress = Progress::default();
    for epoch in 0..cfg.epochs {
        let log = trainer.train_epoch(&data, cfg.parts_train, epoch, &meter)?;
        sink.write(&log)?;
        progress.peak = progress.peak.max(log.peak_bytes);
        if let Some(u) = log.deq_unconverged {
            *progress.deq_unconverged.get_or_insert(0) += u;
        }
        let done = epoch + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.epochs {
            let start = std::time::Instant::now();
            let ev = trainer.evaluate(&data, cfg.views, cfg.parts_eval, derive_seed(seed, EVAL_STREAM))?;
            for l in ev.logs(epoch, start.elapsed().as_secs_f64()) {
                sink.write(&l)?;
            }
        }
        if cfg.ckpt_every > 0 && done % cfg.ckpt_every == 0 {
            let dir = cfg.ckpt_dir.as_ref().expect("validated");
            std::fs::create_dir_all(dir)?;
            checkpoint::save(&dir.join(format!("epoch-{done:05}.ckpt")), &trainer.params, &trainer.cfg, &trainer.dims)?;
        }
        progress.last = Some(log);
    }
    if let Some(u) = progress.deq_unconverged.filter(|&u| u > 0) {
        warn!("{u} solver runs stopped at the iteration cap");
    }
    let start = std::time::Instant::now();
    let ev = trainer.evaluate(&data, cfg.views, cfg.parts_eval, derive_seed(seed, EVAL_STREAM))?;
    for l in ev.logs(cfg.epochs, start.elapsed().as_secs_f64()) {
        sink.write(&l)?;
    }
    if let Some(dir) = &cfg.ckpt_dir {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&dir.join("final.ckpt"), &trainer.params, &trainer.cfg, &trainer.dims)?;
    }
    let summary = summarize(cfg, &trainer, &data, seed, &progress, &ev)?;
    if let Some(p) = &cfg.summary {
        write_file(p, &summary.to_json())?;
    }
    Ok(summary)
}

/// `train`: fit, evaluate, write logs, checkpoints and the summary.
pub fn train(cfg: &RunConfig) -> Result<Summary> {
    cfg.validate()?;
    match cfg.precision {
        Precision::Single => train_typed::<f32>(cfg),
        Precision::Double => train_typed::<f64>(cfg),
    }
}

fn eval_typed<T: Real>(cfg: &RunConfig, ckpt: &Path) -> Result<Summary> {
    let seed = cfg.resolved_seed()?;
    let (params, model, _) = checkpoint::load::<T>(ckpt)?;
    let data = load_data(cfg)?;
    let trainer = Trainer::<T>::new(model, &data, cfg.adam(), seed)?.with_params(params)?;
    let start = std::time::Instant::now();
    let ev = trainer.evaluate(&data, cfg.views, cfg.parts_eval, derive_seed(seed, EVAL_STREAM))?;
    let mut sink = LogSink::open(cfg.log_file.as_deref())?;
    for l in ev.logs(0, start.elapsed().as_secs_f64()) {
        sink.write(&l)?;
    }
    let mut run = cfg.clone();
    run.epochs = 0;
    let summary = summarize(&run, &trainer, &data, seed, &Progress::default(), &ev)?;
    if let Some(p) = &cfg.summary {
        write_file(p, &summary.to_json())?;
    }
    Ok(summary)
}

/// `eval`: multi-view evaluation of a saved model. The architecture comes
/// from the checkpoint; the model flags of `cfg` are not used.
pub fn eval(cfg: &RunConfig, ckpt: &Path) -> Result<Summary> {
    match cfg.precision {
        Precision::Single => eval_typed::<f32>(cfg, ckpt),
        Precision::Double => eval_typed::<f64>(cfg, ckpt),
    }
}

/// `gen-sbm`: writes the synthetic dataset (before preprocessing).
pub fn gen_sbm(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let data = generate_sbm(&cfg.sbm()?)?;
    data.save(out)?;
    Ok(data)
}

#[derive(Debug, Clone)]
pub struct BenchRequest {
    pub spec: BenchSpec,
    pub depths: Vec<usize>,
    pub deq_iters: Vec<usize>,
    pub table: Option<PathBuf>,
    pub json: Option<PathBuf>,
}

/// `bench-mem`: the memory table, written as text and JSON when asked.
pub fn bench_mem(req: &BenchRequest) -> Result<(String, Vec<BenchCell>)> {
    let cells: Vec<ModelConfig> = req.spec.grid(&req.depths, &req.deq_iters);
    let rows = bench_memory(&req.spec, &cells)?;
    let table = render_table(&rows);
    if let Some(p) = &req.table {
        write_file(p, &table)?;
    }
    if let Some(p) = &req.json {
        write_file(p, &(serde_json::to_string_pretty(&rows).expect("plain data serialises") + "\n"))?;
    }
    Ok((table, rows))
}

/// `grad-check`: every finite-difference suite on `rounds` random
/// instances.
pub fn grad_check(base_seed: u64, rounds: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for r in 0..rounds {
        let seed = derive_seed(base_seed, r);
        out.extend(kernel_checks(seed)?);
        for (groups, conv, edge) in [(2, ConvKind::Plain, Some(2)), (3, ConvKind::Sage, None)] {
            let shape = RevShape {
                nodes: 9,
                channels: 2 * groups,
                groups,
                agg: AggSpec::softmax(1.3),
                conv,
                edge_dim: edge,
                ..RevShape::default()
            };
            out.extend(rev_block_checks(shape, seed)?);
        }
        out.extend(deq_checks(seed)?);
        out.extend(model_checks(seed)?);
    }
    Ok(out)
}

/// Largest relative error per check name, in first-seen order.
pub fn max_errors(checks: &[GradCheck]) -> Vec<(String, f64, f64)> {
    let mut out: Vec<(String, f64, f64)> = Vec::new();
    for c in checks {
        match out.iter_mut().find(|(n, _, _)| *n == c.name) {
            Some(e) => e.1 = e.1.max(c.rel_err),
            None => out.push((c.name.clone(), c.rel_err, c.tol)),
        }
    }
    out
}

pub fn ensure_passed(checks: &[GradCheck]) -> Result<()> {
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Oracle(format!("{} checks failed: {}", failed.len(), failed.join(", "))))
    }
}
