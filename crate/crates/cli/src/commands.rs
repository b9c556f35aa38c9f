//! The five subcommands. Each returns its results and writes its files;
//! printing is left to the binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use polyadapt_core::backbone::FrozenBackbone;
use polyadapt_core::model::{task_embedding, PolyModel};
use polyadapt_core::strategies::{
    count_parameters, model_parameters, Dims, Method, Phase, TestInit,
};
use polyadapt_core::tasks::{few_shot_split, TaskSet};
use polyadapt_core::trainer::{
    adapt, evaluate, gradient_alignment, pretrain, AlignmentReport, TrainLog,
};

use crate::checkpoint::{self, seed_dir};
use crate::config::{parse_method, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::output::{
    write_alignment, write_text, write_train_log, ResultRow, ResultsTable, SeedAlignment,
};

/// Checkpoints live under `<output_dir>/checkpoints/seed-<s>`.
pub fn checkpoint_root(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("checkpoints")
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn train_names(tasks: &TaskSet) -> CliResult<Vec<String>> {
    let names: Vec<String> = tasks.train_tasks().map(|t| t.name.clone()).collect();
    if names.is_empty() {
        return Err(CliError::Data("the task set has no training tasks".into()));
    }
    Ok(names)
}

/// The freshly assembled pre-training model of run seed `seed`.
pub fn assemble(
    cfg: &ExperimentConfig,
    method: Method,
    tasks: &TaskSet,
    seed: u64,
) -> CliResult<PolyModel> {
    let names = train_names(tasks)?;
    let backbone = FrozenBackbone::build(cfg.backbone_config(tasks.vocab.len(), seed))?;
    let strategy = cfg.strategy_for(method, names.len())?;
    Ok(PolyModel::assemble(
        Arc::new(backbone),
        strategy,
        &names,
        cfg.adapter_config(seed),
    )?)
}

pub struct PretrainRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub model: PolyModel,
    pub log: TrainLog,
    pub reports: Vec<AlignmentReport>,
}

/// Pre-trains one checkpoint per seed.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> CliResult<Vec<PretrainRun>> {
    let method = cfg.method()?;
    let tasks = cfg.load_tasks()?;
    let names = train_names(&tasks)?;
    let root = checkpoint_root(cfg);
    create_dir(&root)?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let model = assemble(cfg, method, &tasks, seed)?;
        let (model, log, reports) = pretrain(&model, &tasks, &cfg.trainer_for(seed))?;
        let dir = seed_dir(&root, seed);
        checkpoint::save(&dir, &model, cfg, &tasks.vocab, &names, seed, &log)?;
        write_train_log(&dir, seed, &log)?;
        write_alignment(
            &dir,
            &[SeedAlignment {
                seed,
                reports: reports.clone(),
            }],
        )?;
        runs.push(PretrainRun {
            seed,
            dir,
            model,
            log,
            reports,
        });
    }
    Ok(runs)
}

/// Validates the configuration and reports the parameter budget without
/// training.
pub fn dry_run(cfg: &ExperimentConfig) -> CliResult<String> {
    let method = cfg.method()?;
    let tasks = cfg.load_tasks()?;
    let model = assemble(cfg, method, &tasks, cfg.seeds[0])?;
    let s = model.strategy();
    let dims = Dims {
        d: cfg.backbone.model_dim,
        r: cfg.strategy.rank,
        skills: s.num_skills,
        tasks: tasks.train_tasks().count(),
        heads: s.heads,
    };
    let mut out = budget_table(method, dims, model.num_sites(), model.groups().num_groups())?;
    writeln!(out, "live pretrain census {}", model.trainable_census()).expect("string write");
    writeln!(
        out,
        "frozen backbone weights {}",
        model.backbone().weight_census()
    )
    .expect("string write");
    Ok(out)
}

fn budget_table(method: Method, dims: Dims, sites: usize, groups: usize) -> CliResult<String> {
    let mut out = String::new();
    let Dims {
        d,
        r,
        skills,
        tasks,
        heads,
    } = dims;
    writeln!(
        out,
        "method {method} d={d} r={r} skills={skills} tasks={tasks} heads={heads} sites={sites} groups={groups}"
    )
    .expect("string write");
    writeln!(
        out,
        "{:<10} {:>12} {:>12}",
        "phase", "per-layer", "whole-model"
    )
    .expect("string write");
    for phase in Phase::ALL {
        let per_layer = count_parameters(method, dims, phase)?;
        let whole = model_parameters(method, dims, phase, sites, groups)?;
        writeln!(out, "{:<10} {per_layer:>12} {whole:>12}", phase.name()).expect("string write");
    }
    Ok(out)
}

/// Per-layer and whole-model counts for a LoRA model with `layers`
/// encoder-decoder layers, whose 12 projections per layer are adapted.
pub fn cmd_count(method: &str, dims: Dims, layers: usize, period: usize) -> CliResult<String> {
    let method: Method = method.parse()?;
    if layers == 0 || period == 0 {
        return Err(CliError::Config(
            "layers and period must be positive".into(),
        ));
    }
    let sites = 12 * layers;
    budget_table(method, dims, sites, sites.div_ceil(period))
}

/// Adapts and evaluates every test task for every seed, starting from the
/// checkpoints under `root`.
pub fn cmd_adapt_eval(cfg: &ExperimentConfig, root: &Path) -> CliResult<ResultsTable> {
    let tasks = cfg.load_tasks()?;
    let test: Vec<_> = tasks.test_tasks().collect();
    if test.is_empty() {
        eprintln!("warning: the task set has no test tasks; writing an empty table");
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        if test.is_empty() {
            break;
        }
        let dir = checkpoint::resolve(root, seed)?;
        let ck = checkpoint::load(&dir)?;
        if ck.vocab != tasks.vocab {
            return Err(CliError::Data(format!(
                "{}: checkpoint vocabulary differs from the configured tasks",
                dir.display()
            )));
        }
        let embeddings = match ck.model.strategy().test_init {
            TestInit::Soup { .. } => Some(
                tasks
                    .train_tasks()
                    .map(|t| task_embedding(ck.model.backbone(), &t.examples))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            _ => None,
        };
        let trainer = cfg.trainer_for(seed);
        for t in &test {
            let (support, query) = few_shot_split(t, trainer.k_shots, seed)?;
            let query = if trainer.eval_examples > 0 && query.len() > trainer.eval_examples {
                &query[..trainer.eval_examples]
            } else {
                &query[..]
            };
            let init = ck
                .model
                .for_test_task(&t.name, &support, embeddings.as_deref())?;
            let (adapted, _) = adapt(&init, &t.name, &support, &trainer)?;
            let m = evaluate(&adapted, &t.name, query)?;
            rows.push(ResultRow {
                strategy: ck.manifest.method.name().to_string(),
                seed,
                task: t.name.clone(),
                support: support.len(),
                query: query.len(),
                token_accuracy: m.token_accuracy,
                exact_match: m.exact_match,
                perplexity: m.perplexity,
            });
        }
    }
    let table = ResultsTable::from_rows(rows);
    create_dir(&cfg.output_dir)?;
    table.write(&cfg.output_dir)?;
    Ok(table)
}

/// Gradient alignment of each seed's checkpoint, written to
/// `alignment.csv` and `alignment.json`.
pub fn cmd_align(cfg: &ExperimentConfig, root: &Path) -> CliResult<Vec<SeedAlignment>> {
    let tasks = cfg.load_tasks()?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let ck = checkpoint::load(&checkpoint::resolve(root, seed)?)?;
        let report = gradient_alignment(
            &ck.model,
            &tasks,
            cfg.trainer.align_batch,
            seed,
            ck.manifest.best_step,
        )?;
        runs.push(SeedAlignment {
            seed,
            reports: vec![report],
        });
    }
    create_dir(&cfg.output_dir)?;
    write_alignment(&cfg.output_dir, &runs)?;
    Ok(runs)
}

/// Output directory of one suite member.
pub fn suite_member_dir(cfg: &ExperimentConfig, method: Method) -> PathBuf {
    cfg.output_dir.join(method.name())
}

/// Pre-trains, adapts and evaluates every listed strategy under the same
/// seeds and tasks; each member writes what `pretrain` followed by
/// `adapt-eval` would into its own subdirectory.
pub fn cmd_suite(cfg: &ExperimentConfig) -> CliResult<ResultsTable> {
    if cfg.suite.methods.is_empty() {
        return Err(CliError::Config("suite.methods is empty".into()));
    }
    let mut rows = Vec::new();
    for name in &cfg.suite.methods {
        let method = parse_method(name)?;
        let mut member = cfg.clone();
        member.strategy.method = method.name().to_string();
        member.output_dir = suite_member_dir(cfg, method);
        cmd_pretrain(&member)?;
        let table = cmd_adapt_eval(&member, &checkpoint_root(&member))?;
        rows.extend(table.rows);
    }
    let table = ResultsTable::from_rows(rows);
    create_dir(&cfg.output_dir)?;
    table.write(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join("config.toml"), &cfg.to_toml()?)?;
    Ok(table)
}

/// Human-readable summary, best strategy first.
pub fn format_summary(table: &ResultsTable) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<14} {:>5} {:>10} {:>10} {:>10} {:>10}",
        "strategy", "seeds", "em_mean", "em_std", "acc_mean", "ppl_mean"
    )
    .expect("string write");
    for a in &table.aggregates {
        writeln!(
            out,
            "{:<14} {:>5} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            a.strategy,
            a.seeds,
            a.exact_match_mean,
            a.exact_match_std,
            a.token_accuracy_mean,
            a.perplexity_mean
        )
        .expect("string write");
    }
    out
}
