//! Machine-readable outputs: results tables, training logs and alignment
//! reports as CSV and JSON.

use std::collections::BTreeMap;
use std::path::Path;

use polyadapt_core::trainer::{AlignmentReport, TrainLog};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// One (strategy, seed, test task) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: String,
    pub seed: u64,
    pub task: String,
    pub support: usize,
    pub query: usize,
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub perplexity: f64,
}

impl ResultRow {
    pub const HEADER: [&'static str; 8] = [
        "strategy",
        "seed",
        "task",
        "support",
        "query",
        "token_accuracy",
        "exact_match",
        "perplexity",
    ];
}

/// Per-strategy summary: each seed's mean over test tasks, then mean and
/// sample standard deviation across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub strategy: String,
    pub seeds: usize,
    pub token_accuracy_mean: f64,
    pub token_accuracy_std: f64,
    pub exact_match_mean: f64,
    pub exact_match_std: f64,
    pub perplexity_mean: f64,
    pub perplexity_std: f64,
}

impl Aggregate {
    pub const HEADER: [&'static str; 8] = [
        "strategy",
        "seeds",
        "token_accuracy_mean",
        "token_accuracy_std",
        "exact_match_mean",
        "exact_match_std",
        "perplexity_mean",
        "perplexity_std",
    ];

    /// Standard error of the seed-mean exact match.
    pub fn exact_match_se(&self) -> f64 {
        self.exact_match_std / (self.seeds as f64).sqrt()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
    /// Ordered by mean exact match, best first; ties by strategy name.
    pub aggregates: Vec<Aggregate>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    // shifted by the first value so equal inputs give exactly zero spread
    let (s1, s2) = xs.iter().fold((0.0, 0.0), |(a, b), x| {
        (a + (x - xs[0]), b + (x - xs[0]).powi(2))
    });
    let var = ((s2 - s1 * s1 / n) / (n - 1.0)).max(0.0);
    (mean, var.sqrt())
}

impl ResultsTable {
    pub fn from_rows(rows: Vec<ResultRow>) -> Self {
        let mut per_seed: BTreeMap<&str, BTreeMap<u64, Vec<&ResultRow>>> = BTreeMap::new();
        for r in &rows {
            per_seed
                .entry(&r.strategy)
                .or_default()
                .entry(r.seed)
                .or_default()
                .push(r);
        }
        let mut aggregates: Vec<Aggregate> = per_seed
            .iter()
            .map(|(strategy, seeds)| {
                let seed_mean = |f: fn(&ResultRow) -> f64| -> Vec<f64> {
                    seeds
                        .values()
                        .map(|rs| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64)
                        .collect()
                };
                let (ta, ta_s) = mean_std(&seed_mean(|r| r.token_accuracy));
                let (em, em_s) = mean_std(&seed_mean(|r| r.exact_match));
                let (pp, pp_s) = mean_std(&seed_mean(|r| r.perplexity));
                Aggregate {
                    strategy: strategy.to_string(),
                    seeds: seeds.len(),
                    token_accuracy_mean: ta,
                    token_accuracy_std: ta_s,
                    exact_match_mean: em,
                    exact_match_std: em_s,
                    perplexity_mean: pp,
                    perplexity_std: pp_s,
                }
            })
            .collect();
        aggregates.sort_by(|a, b| {
            b.exact_match_mean
                .total_cmp(&a.exact_match_mean)
                .then_with(|| a.strategy.cmp(&b.strategy))
        });
        Self { rows, aggregates }
    }

    pub fn aggregate(&self, strategy: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.strategy == strategy)
    }

    /// Writes `results.csv`, `summary.csv` and `results.json` into `dir`.
    pub fn write(&self, dir: &Path) -> CliResult<()> {
        write_csv(&dir.join("results.csv"), &ResultRow::HEADER, &self.rows)?;
        write_csv(
            &dir.join("summary.csv"),
            &Aggregate::HEADER,
            &self.aggregates,
        )?;
        write_json(&dir.join("results.json"), self)
    }

    pub fn read_json(path: &Path) -> CliResult<Self> {
        read_json(path)
    }
}

/// One training-log record tagged with its run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub seed: u64,
    pub phase: String,
    pub step: usize,
    pub kind: String,
    pub task: String,
    pub loss: Option<f64>,
    pub perplexity: Option<f64>,
    pub alignment: Option<f64>,
}

impl LogRow {
    pub const HEADER: [&'static str; 8] = [
        "seed",
        "phase",
        "step",
        "kind",
        "task",
        "loss",
        "perplexity",
        "alignment",
    ];

    pub fn from_log(seed: u64, log: &TrainLog) -> Vec<Self> {
        log.records
            .iter()
            .map(|r| LogRow {
                seed,
                phase: r.phase.clone(),
                step: r.step,
                kind: r.kind.clone(),
                task: r.task.clone(),
                loss: r.loss,
                perplexity: r.perplexity,
                alignment: r.alignment,
            })
            .collect()
    }
}

/// One entry of an alignment matrix; `cosine` is empty where a gradient
/// vanished.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignRow {
    pub seed: u64,
    pub step: usize,
    pub task_a: String,
    pub task_b: String,
    pub cosine: Option<f64>,
}

impl AlignRow {
    pub const HEADER: [&'static str; 5] = ["seed", "step", "task_a", "task_b", "cosine"];

    pub fn from_report(seed: u64, r: &AlignmentReport) -> Vec<Self> {
        let mut rows = Vec::new();
        for (i, a) in r.tasks.iter().enumerate() {
            for (j, b) in r.tasks.iter().enumerate() {
                rows.push(AlignRow {
                    seed,
                    step: r.step,
                    task_a: a.clone(),
                    task_b: b.clone(),
                    cosine: r.matrix[i][j],
                });
            }
        }
        rows
    }
}

/// Alignment reports of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAlignment {
    pub seed: u64,
    pub reports: Vec<AlignmentReport>,
}

pub fn write_alignment(dir: &Path, runs: &[SeedAlignment]) -> CliResult<()> {
    let rows: Vec<AlignRow> = runs
        .iter()
        .flat_map(|s| {
            s.reports
                .iter()
                .flat_map(move |r| AlignRow::from_report(s.seed, r))
        })
        .collect();
    write_csv(&dir.join("alignment.csv"), &AlignRow::HEADER, &rows)?;
    write_json(&dir.join("alignment.json"), &runs)
}

pub fn write_train_log(dir: &Path, seed: u64, log: &TrainLog) -> CliResult<()> {
    write_csv(
        &dir.join("train_log.csv"),
        &LogRow::HEADER,
        &LogRow::from_log(seed, log),
    )?;
    write_json(&dir.join("train_log.json"), log)
}

/// Header is written even for an empty table.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(CliError::from))
        .collect()
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
