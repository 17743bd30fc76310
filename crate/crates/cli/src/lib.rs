//! `revgnn` command line: argument parsing and dispatch.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use revgnn_core::train::BenchSpec;
use revgnn_core::Result;

pub use commands::{BenchRequest, Summary};
pub use config::{RunConfig, SEED_ENV};

#[derive(Debug, Parser)]
#[command(name = "revgnn", version, about = "Deep reversible and equilibrium graph networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model, evaluate it and write logs, checkpoints and a summary.
    Train(RunArgs),
    /// Evaluate a saved checkpoint. The model comes from the checkpoint; model flags are ignored.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write the synthetic SBM dataset to a directory.
    GenSbm {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Measure the activation peak of one training step per architecture and depth.
    BenchMem(BenchArgs),
    /// Finite-difference checks of every analytic gradient.
    GradCheck(GradCheckArgs),
}

/// Run settings. Every flag except `--config` names one configuration key.
/// Values are parsed by the configuration, after the file given by
/// `--config` has been applied.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Flat `key = value` file applied before the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Dataset directory; without it a synthetic SBM graph is used.
    #[arg(long, value_name = "DIR")]
    pub data: Option<String>,
    /// Use summed incident edge features as extra node features.
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    pub edge_sum_features: Option<String>,
    #[arg(long, value_name = "N")]
    pub sbm_nodes: Option<String>,
    #[arg(long, value_name = "K")]
    pub sbm_classes: Option<String>,
    #[arg(long, value_name = "P")]
    pub sbm_p_in: Option<String>,
    #[arg(long, value_name = "P")]
    pub sbm_p_out: Option<String>,
    #[arg(long, value_name = "F")]
    pub sbm_feature_dim: Option<String>,
    /// Standard deviation of the feature noise.
    #[arg(long, value_name = "SIGMA")]
    pub sbm_noise: Option<String>,
    /// Graph seed; defaults to the run seed.
    #[arg(long, value_name = "SEED")]
    pub sbm_seed: Option<String>,

    /// res, rev, wt_res, wt_rev or deq.
    #[arg(long)]
    pub arch: Option<String>,
    /// gcn, sage or gen.
    #[arg(long)]
    pub operator: Option<String>,
    #[arg(long, value_name = "L")]
    pub layers: Option<String>,
    #[arg(long, value_name = "D")]
    pub channels: Option<String>,
    #[arg(long, value_name = "C")]
    pub groups: Option<String>,
    /// sum, mean, max or softmax.
    #[arg(long)]
    pub agg: Option<String>,
    #[arg(long, value_name = "BETA")]
    pub softmax_beta: Option<String>,
    #[arg(long, value_name = "P")]
    pub dropout: Option<String>,
    /// layer or batch.
    #[arg(long)]
    pub norm: Option<String>,
    #[arg(long, value_name = "K")]
    pub deq_max_iter: Option<String>,
    #[arg(long, value_name = "TOL")]
    pub deq_tol_forward: Option<String>,
    #[arg(long, value_name = "TOL")]
    pub deq_tol_backward: Option<String>,
    /// Keep every k-th layer input of a residual stack and recompute the rest.
    #[arg(long, value_name = "K")]
    pub checkpoint_every: Option<String>,

    #[arg(long, value_name = "P")]
    pub parts_train: Option<String>,
    #[arg(long, value_name = "P")]
    pub parts_eval: Option<String>,
    /// Number of random partitions averaged at evaluation.
    #[arg(long, value_name = "V")]
    pub views: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    /// Base seed; falls back to the REVGNN_SEED environment variable, then 0.
    #[arg(long)]
    pub seed: Option<String>,
    /// single (f32) or double (f64).
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long, value_name = "N")]
    pub eval_every: Option<String>,

    /// JSON-lines log; stdout when absent.
    #[arg(long, value_name = "FILE")]
    pub log_file: Option<String>,
    #[arg(long, value_name = "DIR")]
    pub ckpt_dir: Option<String>,
    #[arg(long, value_name = "N")]
    pub ckpt_every: Option<String>,
    /// Summary JSON file.
    #[arg(long, value_name = "FILE")]
    pub summary: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 1024)]
    pub nodes: usize,
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    #[arg(long, default_value_t = 2)]
    pub groups: usize,
    #[arg(long, default_value_t = 8.0)]
    pub degree: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64")]
    pub depths: Vec<usize>,
    /// Iteration caps swept for `deq`.
    #[arg(long, value_delimiter = ',', default_value = "8,32,128")]
    pub deq_iters: Vec<usize>,
    /// Write the text table here as well.
    #[arg(long, value_name = "FILE")]
    pub table: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradCheckArgs {
    /// Random instances per suite.
    #[arg(long, default_value_t = 3)]
    pub rounds: u64,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Defaults, then the `--config` file, then the flags given on the command
/// line.
pub fn resolve_config(args: &RunArgs, matches: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    for key in RunConfig::KEYS {
        let id = key.replace('-', "_");
        if let Ok(Some(v)) = matches.try_get_one::<String>(&id) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

/// The run configuration a `train`, `eval` or `gen-sbm` invocation
/// resolves to, without running it.
pub fn parse_run_config<I, S>(args: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = Cli::command()
        .try_get_matches_from(args)
        .map_err(|e| revgnn_core::Error::Input(e.render().to_string()))?;
    let cli = Cli::from_arg_matches(&matches).map_err(|e| revgnn_core::Error::Input(e.to_string()))?;
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    match &cli.command {
        Command::Train(run) | Command::Eval { run, .. } | Command::GenSbm { run, .. } => resolve_config(run, sub),
        _ => Err(revgnn_core::Error::Input("command takes no run configuration".into())),
    }
}

/// Parses `args` (program name first) and runs the command, writing
/// human-readable output to `out`.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                write!(out, "{e}")?;
                return Ok(());
            }
            _ => return Err(revgnn_core::Error::Input(e.render().to_string())),
        },
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| revgnn_core::Error::Input(e.to_string()))?;
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    match &cli.command {
        Command::Train(args) => {
            let cfg = resolve_config(args, sub)?;
            let s = commands::train(&cfg)?;
            writeln!(out, "{}", s.headline())?;
        }
        Command::Eval { checkpoint, run } => {
            let cfg = resolve_config(run, sub)?;
            let s = commands::eval(&cfg, checkpoint)?;
            writeln!(out, "{}", s.headline())?;
        }
        Command::GenSbm { out: dir, run } => {
            let cfg = resolve_config(run, sub)?;
            let data = commands::gen_sbm(&cfg, dir)?;
            writeln!(
                out,
                "wrote {} nodes, {} edges to {}",
                data.num_nodes(),
                data.graph.num_edges(),
                dir.display()
            )?;
        }
        Command::BenchMem(b) => {
            let req = BenchRequest {
                spec: BenchSpec { nodes: b.nodes, channels: b.channels, groups: b.groups, degree: b.degree, seed: b.seed },
                depths: b.depths.clone(),
                deq_iters: b.deq_iters.clone(),
                table: b.table.clone(),
                json: b.json.clone(),
            };
            let (table, _) = commands::bench_mem(&req)?;
            write!(out, "{table}")?;
        }
        Command::GradCheck(g) => {
            let seed = match g.seed {
                Some(s) => s,
                None => RunConfig::default().resolved_seed()?,
            };
            let checks = commands::grad_check(seed, g.rounds)?;
            for c in &checks {
                writeln!(
                    out,
                    "{:<4} {:<32} analytic {:+.6e} numeric {:+.6e} rel {:.2e}",
                    if c.passed() { "ok" } else { "FAIL" },
                    c.name,
                    c.analytic,
                    c.numeric,
                    c.rel_err
                )?;
            }
            writeln!(out, "max relative error per check:")?;
            for (name, err, tol) in commands::max_errors(&checks) {
                writeln!(out, "  {name:<32} {err:.2e} (tol {tol:.0e})")?;
            }
            commands::ensure_passed(&checks)?;
        }
    }
    Ok(())
}
