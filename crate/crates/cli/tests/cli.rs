use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use polyadapt_cli::checkpoint;
use polyadapt_cli::commands::{
    checkpoint_root, cmd_adapt_eval, cmd_align, cmd_pretrain, cmd_suite,
};
use polyadapt_cli::config::ExperimentConfig;
use polyadapt_cli::output::{
    read_csv, read_json, AlignRow, LogRow, ResultRow, ResultsTable, SeedAlignment,
};

const TINY: &str = r#"
seeds = [0]

[backbone]
model_dim = 16
num_layers = 1

[strategy]
method = "poly-s"
skills = 4
heads = 2
rank = 2

[tasks.generator]
num_generator_skills = 4
num_train_tasks = 3
num_test_tasks = 2
skills_per_task = 2
examples_per_task = 24
seq_len = 4
symbols_per_skill = 2

[trainer]
pretrain_steps = 12
adapt_steps = 3
eval_every = 6
val_examples = 4
k_shots = 4
align_every = 6
align_batch = 8
"#;

fn tiny(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.in.toml");
    let out = dir.join("out");
    let text = format!(
        "output_dir = {:?}\n{extra}\n{TINY}",
        out.display().to_string()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn load(path: &Path, overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::load(Some(path), &o).unwrap()
}

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polyadapt"))
        .args(args)
        .env_remove("POLYADAPT_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_exits_with_a_config_error_naming_the_path() {
    let o = bin(&["pretrain", "--config", "/no/such/dir/exp.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/dir/exp.toml"));
}

#[test]
fn missing_task_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "");
    let o = bin(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "tasks.jsonl=\"/no/such/tasks.jsonl\"",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn count_reproduces_the_reference_budgets() {
    let o = bin(&[
        "count", "--method", "poly-s", "--d", "16", "--r", "4", "--skills", "8", "--tasks", "10",
        "--heads", "8",
    ]);
    assert!(o.status.success());
    let pretrain = stdout(&o)
        .lines()
        .find(|l| l.starts_with("pretrain"))
        .unwrap()
        .to_string();
    assert_eq!(pretrain.split_whitespace().nth(1), Some("1664"));

    let o = bin(&["count", "--method", "shared", "--d", "16", "--r", "4"]);
    let text = stdout(&o);
    for phase in ["pretrain", "finetune", "inference"] {
        let line = text.lines().find(|l| l.starts_with(phase)).unwrap();
        assert_eq!(line.split_whitespace().nth(1), Some("128"), "{line}");
    }

    let o = bin(&["count", "--method", "poly-x", "--d", "16", "--r", "4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("poly-s-z") && stderr(&o).contains("adapter-soup"));
}

#[test]
fn dry_run_prints_the_budget_and_trains_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "");
    let o = bin(&["pretrain", "--dry-run", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let census: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("live pretrain census "))
        .unwrap()
        .parse()
        .unwrap();
    let whole: usize = text
        .lines()
        .find(|l| l.starts_with("pretrain"))
        .unwrap()
        .split_whitespace()
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(census, whole);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn pretrain_writes_a_loadable_checkpoint_and_parseable_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "");
    let o = bin(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = dir.path().join("out/checkpoints/seed-0");
    for f in [
        "backbone.bin",
        "inventory.bin",
        "routing.json",
        "manifest.json",
        "vocab.json",
        "config.toml",
    ] {
        assert!(ck.join(f).is_file(), "{f}");
    }
    let loaded = checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.manifest.seed, 0);
    let log: Vec<LogRow> = read_csv(&ck.join("train_log.csv")).unwrap();
    assert!(log.iter().any(|r| r.kind == "val"));
    let align: Vec<AlignRow> = read_csv(&ck.join("alignment.csv")).unwrap();
    assert_eq!(align.len(), 2 * 9);
    let runs: Vec<SeedAlignment> = read_json(&ck.join("alignment.json")).unwrap();
    assert_eq!(runs[0].reports.len(), 2);
    // the persisted config reproduces the run
    let again = ExperimentConfig::load(Some(&ck.join("config.toml")), &[]).unwrap();
    assert_eq!(again, load(&cfg, &[]));
}

#[test]
fn output_dir_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "");
    let elsewhere = dir.path().join("elsewhere");
    let o = Command::new(env!("CARGO_BIN_EXE_polyadapt"))
        .args(["pretrain", "--config", cfg.to_str().unwrap()])
        .env("POLYADAPT_OUTPUT_DIR", &elsewhere)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(elsewhere.join("checkpoints/seed-0/manifest.json").is_file());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn adapt_eval_writes_one_row_per_seed_and_test_task() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(&tiny(dir.path(), ""), &["seeds=[1, 2, 3]"]);
    cmd_pretrain(&cfg).unwrap();
    let table = cmd_adapt_eval(&cfg, &checkpoint_root(&cfg)).unwrap();
    assert_eq!(table.rows.len(), 3 * 2);
    for t in ["test_000", "test_001"] {
        assert_eq!(table.rows.iter().filter(|r| r.task == t).count(), 3);
    }
    let csv: Vec<ResultRow> = read_csv(&cfg.output_dir.join("results.csv")).unwrap();
    assert_eq!(csv, table.rows);
    let json = ResultsTable::read_json(&cfg.output_dir.join("results.json")).unwrap();
    assert_eq!(json, table);
    assert_eq!(
        ResultsTable::from_rows(json.rows.clone()).aggregates,
        json.aggregates
    );
}

#[test]
fn zero_shot_seeds_from_one_checkpoint_have_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(&tiny(dir.path(), ""), &["strategy.method=\"shared\""]);
    cmd_pretrain(&cfg).unwrap();
    let single = checkpoint_root(&cfg).join("seed-0");
    let eval = load(
        &tiny(dir.path(), ""),
        &[
            "strategy.method=\"shared\"",
            "seeds=[1, 2, 3]",
            "trainer.k_shots=0",
        ],
    );
    let table = cmd_adapt_eval(&eval, &single).unwrap();
    assert_eq!(table.rows.len(), 6);
    let agg = table.aggregate("shared").unwrap();
    assert_eq!(agg.seeds, 3);
    assert_eq!(agg.exact_match_std, 0.0);
    assert_eq!(agg.token_accuracy_std, 0.0);
    assert_eq!(agg.perplexity_std, 0.0);
}

#[test]
fn no_test_tasks_gives_an_empty_table_and_success() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "");
    let set = ["--set", "tasks.generator.num_test_tasks=0"];
    let p = cfg.to_str().unwrap();
    assert!(bin(&["pretrain", "--config", p, set[0], set[1]])
        .status
        .success());
    let o = bin(&["adapt-eval", "--config", p, set[0], set[1]]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
    let rows: Vec<ResultRow> = read_csv(&dir.path().join("out/results.csv")).unwrap();
    assert!(rows.is_empty());
    let header = std::fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert_eq!(header.trim(), ResultRow::HEADER.join(","));
}

#[test]
fn a_shared_only_suite_matches_pretrain_then_adapt_eval() {
    let dir = tempfile::tempdir().unwrap();
    let a = load(
        &tiny(dir.path(), ""),
        &["strategy.method=\"shared\"", "seeds=[0, 1]"],
    );
    let a = ExperimentConfig {
        output_dir: dir.path().join("manual"),
        ..a
    };
    cmd_pretrain(&a).unwrap();
    cmd_adapt_eval(&a, &checkpoint_root(&a)).unwrap();
    let s = load(
        &tiny(dir.path(), ""),
        &["suite.methods=[\"shared\"]", "seeds=[0, 1]"],
    );
    let table = cmd_suite(&s).unwrap();
    assert_eq!(table.aggregates.len(), 1);
    for f in ["results.csv", "summary.csv", "results.json"] {
        let manual = std::fs::read(a.output_dir.join(f)).unwrap();
        assert_eq!(std::fs::read(s.output_dir.join(f)).unwrap(), manual, "{f}");
        assert_eq!(
            std::fs::read(s.output_dir.join("shared").join(f)).unwrap(),
            manual,
            "{f}"
        );
    }
}

#[test]
fn suite_table_has_one_aggregate_per_strategy_ordered_by_exact_match() {
    let dir = tempfile::tempdir().unwrap();
    let s = load(
        &tiny(dir.path(), ""),
        &[
            "suite.methods=[\"shared\", \"poly\", \"poly-s\"]",
            "trainer.align_every=0",
        ],
    );
    let table = cmd_suite(&s).unwrap();
    assert_eq!(table.aggregates.len(), 3);
    assert!(table
        .aggregates
        .windows(2)
        .all(|w| w[0].exact_match_mean >= w[1].exact_match_mean));
}

/// Three training tasks where the first two share every example; under a
/// shared adapter their gradients coincide.
fn alignment_tasks(order: [usize; 3]) -> String {
    let pairs = [
        ("a b c", "c b a"),
        ("b c d", "d c b"),
        ("c d a", "a d c"),
        ("d a b", "b a d"),
    ];
    let twin: Vec<(&str, &str)> = pairs.to_vec();
    let other: Vec<(&str, &str)> = pairs.iter().map(|(i, _)| (*i, *i)).collect();
    let tasks = [("twin_a", &twin), ("twin_b", &twin), ("copy", &other)];
    // a leading test-task line fixes the vocabulary order
    let mut lines = vec![
        r#"{"task":"held","split":"test-task","input":"a b c d","target":"a b c d"}"#.to_string(),
    ];
    for &k in &order {
        let (name, examples) = tasks[k];
        for (i, t) in examples.iter() {
            lines.push(format!(
                r#"{{"task":"{name}","split":"train-task","input":"{i}","target":"{t}"}}"#
            ));
        }
    }
    lines.join("\n") + "\n"
}

#[test]
fn align_reports_unit_twins_symmetry_and_order_equivariance() {
    let dir = tempfile::tempdir().unwrap();
    let config_for = |order: [usize; 3], sub: &str| {
        let tasks = dir.path().join(format!("{sub}.jsonl"));
        std::fs::write(&tasks, alignment_tasks(order)).unwrap();
        let mut cfg = load(
            &tiny(dir.path(), ""),
            &[
                "strategy.method=\"shared\"",
                "trainer.val_examples=1",
                "trainer.align_every=0",
            ],
        );
        cfg.tasks.jsonl = Some(tasks);
        cfg.output_dir = dir.path().join(sub);
        cfg
    };
    let forward = config_for([0, 1, 2], "forward");
    cmd_pretrain(&forward).unwrap();
    let root = checkpoint_root(&forward);
    let r = cmd_align(&forward, &root)
        .unwrap()
        .remove(0)
        .reports
        .remove(0);
    assert!((r.matrix[0][1].unwrap() - 1.0).abs() < 1e-9);
    for i in 0..3 {
        assert_eq!(r.matrix[i][i], Some(1.0));
        for j in 0..3 {
            let c = r.matrix[i][j].unwrap();
            assert_eq!(Some(c), r.matrix[j][i]);
            assert!(c.abs() <= 1.0 + 1e-9);
        }
    }
    let rows: Vec<AlignRow> = read_csv(&dir.path().join("forward/alignment.csv")).unwrap();
    assert_eq!(rows.len(), 9);

    // the same checkpoint probed with the tasks listed in another order
    let permuted = config_for([2, 0, 1], "permuted");
    let p = cmd_align(&permuted, &root)
        .unwrap()
        .remove(0)
        .reports
        .remove(0);
    assert_eq!(p.tasks, vec!["copy", "twin_a", "twin_b"]);
    let pos = |rep: &polyadapt_core::trainer::AlignmentReport, name: &str| {
        rep.tasks.iter().position(|t| t == name).unwrap()
    };
    for a in ["twin_a", "twin_b", "copy"] {
        for b in ["twin_a", "twin_b", "copy"] {
            let x = r.matrix[pos(&r, a)][pos(&r, b)].unwrap();
            let y = p.matrix[pos(&p, a)][pos(&p, b)].unwrap();
            assert_eq!(x, y, "{a} {b}");
        }
    }
}

#[test]
fn rerunning_a_command_reproduces_its_files_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "");
    let p = cfg.to_str().unwrap();
    let snapshot = || {
        assert!(bin(&["pretrain", "--config", p]).status.success());
        assert!(bin(&["adapt-eval", "--config", p]).status.success());
        let ck = dir.path().join("out/checkpoints/seed-0");
        let files = [
            ck.join("train_log.csv"),
            ck.join("train_log.json"),
            ck.join("alignment.csv"),
            ck.join("alignment.json"),
            ck.join("routing.json"),
            ck.join("inventory.bin"),
            dir.path().join("out/results.csv"),
            dir.path().join("out/results.json"),
        ];
        files
            .iter()
            .map(|f| std::fs::read(f).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(snapshot(), snapshot());
}
