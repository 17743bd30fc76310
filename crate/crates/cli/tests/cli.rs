use std::path::Path;

use clap::CommandFactory;

use revgnn_cli::{parse_run_config, run, Cli, RunConfig, Summary, SEED_ENV};
use revgnn_core::graph::{generate_sbm, Dataset};
use revgnn_core::train::parse_bench_json;

fn run_ok(args: &[&str]) -> String {
    let mut out = Vec::new();
    let mut full = vec!["revgnn"];
    full.extend_from_slice(args);
    run(full, &mut out).unwrap_or_else(|e| panic!("{args:?}: {e}"));
    String::from_utf8(out).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--sbm-nodes", "160", "--sbm-feature-dim", "6", "--layers", "2", "--channels", "8", "--epochs", "3", "--parts-train",
    "2", "--parts-eval", "2", "--views", "2", "--seed", "5",
];

#[test]
fn unknown_flags_are_rejected_with_usage() {
    let err = run(["revgnn", "train", "--no-such-flag", "1"], &mut Vec::new()).unwrap_err().to_string();
    assert!(err.contains("--no-such-flag"), "{err}");
    assert!(err.contains("Usage"), "{err}");
    let err = run(["revgnn", "train", "--layers", "many"], &mut Vec::new()).unwrap_err().to_string();
    assert!(err.contains("layers"), "{err}");
}

#[test]
fn every_run_flag_is_a_config_key() {
    for sub in ["train", "eval", "gen-sbm"] {
        let cmd = Cli::command();
        let cmd = cmd.find_subcommand(sub).unwrap();
        let mut flags: Vec<String> = cmd
            .get_arguments()
            .filter_map(|a| a.get_long().map(str::to_string))
            .filter(|l| !["config", "checkpoint", "out", "help"].contains(&l.as_str()))
            .collect();
        let mut keys: Vec<String> = RunConfig::KEYS.iter().map(|k| k.to_string()).collect();
        flags.sort();
        keys.sort();
        assert_eq!(flags, keys, "{sub}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    std::fs::write(&file, "# protocol\nlayers = 7\nlr = 0.01\nagg = softmax\n").unwrap();
    let cfg = parse_run_config(["revgnn", "train", "--config", s(&file), "--layers", "9"]).unwrap();
    assert_eq!(cfg.layers, 9);
    assert_eq!(cfg.lr, 0.01);
    assert_eq!(cfg.model().unwrap().agg.kind, revgnn_core::kernels::AggKind::Softmax);
    let bare = parse_run_config(["revgnn", "train", "--edge-sum-features"]).unwrap();
    assert!(bare.edge_sum_features);
    assert_eq!(parse_run_config(["revgnn", "train"]).unwrap(), RunConfig::default());
}

#[test]
fn seed_falls_back_to_the_environment() {
    std::env::set_var(SEED_ENV, "31");
    let cfg = parse_run_config(["revgnn", "train"]).unwrap();
    assert_eq!(cfg.resolved_seed().unwrap(), 31);
    let cfg = parse_run_config(["revgnn", "train", "--seed", "2"]).unwrap();
    assert_eq!(cfg.resolved_seed().unwrap(), 2);
    std::env::remove_var(SEED_ENV);
}

#[test]
fn generated_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sbm");
    let msg = run_ok(&["gen-sbm", "--out", s(&out), "--sbm-nodes", "120", "--sbm-seed", "4"]);
    assert!(msg.contains("120 nodes"), "{msg}");
    let cfg = parse_run_config(["revgnn", "gen-sbm", "--out", "x", "--sbm-nodes", "120", "--sbm-seed", "4"]).unwrap();
    assert_eq!(Dataset::load(&out).unwrap(), generate_sbm(&cfg.sbm().unwrap()).unwrap());

    // training from the saved copy matches training on the generated graph
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let log = dir.path().join("log.jsonl");
    let common = ["--sbm-nodes", "120", "--sbm-seed", "4", "--epochs", "2", "--layers", "2", "--channels", "8", "--seed", "3"];
    run_ok(&[&["train", "--summary", s(&a), "--log-file", s(&log)][..], &common].concat());
    run_ok(&[&["train", "--data", s(&out), "--summary", s(&b), "--log-file", s(&log)][..], &common].concat());
    assert_eq!(std::fs::read_to_string(a).unwrap(), std::fs::read_to_string(b).unwrap());
}

#[test]
fn identical_runs_write_identical_summaries() {
    let dir = tempfile::tempdir().unwrap();
    for arch in ["rev", "deq"] {
        let summaries: Vec<String> = (0..2)
            .map(|i| {
                let sum = dir.path().join(format!("{arch}{i}.json"));
                let log = dir.path().join(format!("{arch}{i}.jsonl"));
                run_ok(&[&["train", "--arch", arch, "--summary", s(&sum), "--log-file", s(&log)][..], SMALL].concat());
                std::fs::read_to_string(sum).unwrap()
            })
            .collect();
        assert_eq!(summaries[0], summaries[1], "{arch}");
        let parsed: Summary = serde_json::from_str(&summaries[0]).unwrap();
        assert_eq!(parsed.epochs, 3);
        assert!(parsed.peak_activation_bytes > 0);
    }
}

#[test]
fn logs_have_one_line_per_epoch_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    run_ok(&[&["train", "--log-file", s(&log), "--eval-every", "2"][..], SMALL].concat());
    let lines: Vec<serde_json::Value> =
        std::fs::read_to_string(&log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let splits: Vec<&str> = lines.iter().map(|v| v["split"].as_str().unwrap()).collect();
    // 3 epochs, a mid-run evaluation after epoch 2, the final evaluation
    assert_eq!(splits, ["train", "train", "valid", "test", "train", "valid", "test"]);
}

#[test]
fn checkpoints_evaluate_like_the_finished_run() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    let train_sum = dir.path().join("train.json");
    let eval_sum = dir.path().join("eval.json");
    let log = dir.path().join("log.jsonl");
    for precision in ["single", "double"] {
        run_ok(
            &[
                &[
                    "train", "--arch", "wt-rev", "--precision", precision, "--ckpt-dir", s(&ckpt), "--ckpt-every", "2",
                    "--summary", s(&train_sum), "--log-file", s(&log),
                ][..],
                SMALL,
            ]
            .concat(),
        );
        assert!(ckpt.join("epoch-00002.ckpt").exists());
        run_ok(
            &[
                &[
                    "eval", "--checkpoint", s(&ckpt.join("final.ckpt")), "--precision", precision, "--summary", s(&eval_sum),
                    "--log-file", s(&log),
                ][..],
                SMALL,
            ]
            .concat(),
        );
        let t: Summary = serde_json::from_str(&std::fs::read_to_string(&train_sum).unwrap()).unwrap();
        let e: Summary = serde_json::from_str(&std::fs::read_to_string(&eval_sum).unwrap()).unwrap();
        assert_eq!((t.test_metric, t.test_loss, t.valid_metric), (e.test_metric, e.test_loss, e.valid_metric));
        assert_eq!(t.params, e.params);
    }
}

#[test]
fn bench_mem_writes_table_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("bench.json");
    let table = run_ok(&[
        "bench-mem", "--nodes", "64", "--channels", "8", "--depths", "2,4", "--deq-iters", "3", "--json", s(&json),
    ]);
    // header, 5 depth sweeps of 2 rows, one deq row
    assert_eq!(table.lines().count(), 1 + 10 + 1, "{table}");
    let cells = parse_bench_json(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(cells.len(), 11);
    assert!(cells.iter().all(|c| c.error.is_none()));
}

#[test]
fn grad_check_reports_every_suite() {
    let out = run_ok(&["grad-check", "--rounds", "1", "--seed", "9"]);
    for name in ["aggregate_", "rev_block/params", "deq/", "model/rev", "loss/"] {
        assert!(out.contains(name), "missing {name}:\n{out}");
    }
    assert!(!out.contains("FAIL"));
    assert!(out.contains("max relative error"));
}
