//! Experiment configuration: one TOML file plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use polyadapt_core::backbone::{AdapterFamily, BackboneConfig};
use polyadapt_core::model::AdapterConfig;
use polyadapt_core::strategies::{build_strategy, Method, StrategyDescriptor, StrategyDims};
use polyadapt_core::tasks::{generate_compositional_tasks, load_tasks, GeneratorConfig, TaskSet};
use polyadapt_core::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "POLYADAPT_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub model_dim: usize,
    pub num_layers: usize,
    /// Feed-forward width; 0 means four times `model_dim`.
    pub ff_dim: usize,
    pub max_seq_len: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            model_dim: 32,
            num_layers: 2,
            ff_dim: 0,
            max_seq_len: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySection {
    pub method: String,
    pub skills: usize,
    pub heads: usize,
    pub rank: usize,
    pub family: AdapterFamily,
    /// Consecutive adapted sites sharing one routing tensor.
    pub period: usize,
    pub soup_k: usize,
}

impl Default for StrategySection {
    fn default() -> Self {
        Self {
            method: Method::PolyS.name().to_string(),
            skills: 8,
            heads: 8,
            rank: 4,
            family: AdapterFamily::Lora,
            period: 1,
            soup_k: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasksSection {
    /// JSONL task file; when absent the generator builds the tasks.
    pub jsonl: Option<PathBuf>,
    pub generator: GeneratorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSection {
    pub methods: Vec<String>,
}

impl Default for SuiteSection {
    fn default() -> Self {
        Self {
            methods: [Method::Shared, Method::Poly, Method::PolyS]
                .iter()
                .map(|m| m.name().to_string())
                .collect(),
        }
    }
}

/// Everything a run depends on. A run with seed `s` seeds the backbone,
/// the adapter initialization, the trainer and the few-shot splits with `s`;
/// `trainer.seed` is overwritten per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub backbone: BackboneSection,
    pub strategy: StrategySection,
    pub tasks: TasksSection,
    pub trainer: TrainerConfig,
    pub suite: SuiteSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            seeds: vec![0],
            backbone: BackboneSection::default(),
            strategy: StrategySection::default(),
            tasks: TasksSection::default(),
            trainer: TrainerConfig {
                routing_lr: Some(0.1),
                ..TrainerConfig::default()
            },
            suite: SuiteSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or the defaults when `None`), applies `overrides` of the
    /// form `dotted.key=value` and the output-directory environment variable,
    /// then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::try_from(Self::default())
                .map_err(|e| CliError::Config(e.to_string()))?,
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must list at least one seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(CliError::Config("seeds must be distinct".into()));
        }
        self.method()?;
        for m in &self.suite.methods {
            parse_method(m)?;
        }
        let s = &self.strategy;
        if s.rank == 0 || s.period == 0 {
            return Err(CliError::Config(
                "strategy.rank and strategy.period must be positive".into(),
            ));
        }
        self.trainer.validate()?;
        self.backbone_config(4, 0).validate()?;
        Ok(())
    }

    pub fn method(&self) -> CliResult<Method> {
        parse_method(&self.strategy.method)
    }

    pub fn load_tasks(&self) -> CliResult<TaskSet> {
        let set = match &self.tasks.jsonl {
            Some(p) => load_tasks(p)?,
            None => generate_compositional_tasks(&self.tasks.generator)?,
        };
        let (src, tgt) = set.max_lengths();
        let need = src.max(tgt + 1);
        if need > self.backbone.max_seq_len {
            return Err(CliError::Config(format!(
                "backbone.max_seq_len {} is shorter than the longest sequence ({need})",
                self.backbone.max_seq_len
            )));
        }
        Ok(set)
    }

    pub fn backbone_config(&self, vocab_size: usize, seed: u64) -> BackboneConfig {
        let b = &self.backbone;
        let mut c = BackboneConfig::new(vocab_size, b.model_dim, b.num_layers, seed);
        if b.ff_dim > 0 {
            c.ff_dim = b.ff_dim;
        }
        c.max_seq_len = b.max_seq_len;
        c
    }

    pub fn adapter_config(&self, seed: u64) -> AdapterConfig {
        AdapterConfig {
            family: self.strategy.family,
            rank: self.strategy.rank,
            period: self.strategy.period,
            seed,
        }
    }

    /// Private allocations force one skill per training task.
    pub fn strategy_for(
        &self,
        method: Method,
        train_tasks: usize,
    ) -> CliResult<StrategyDescriptor> {
        let skills = if method == Method::PrivateMu {
            train_tasks
        } else {
            self.strategy.skills
        };
        Ok(build_strategy(
            method,
            StrategyDims {
                skills,
                heads: self.strategy.heads,
                train_tasks,
                soup_k: self.strategy.soup_k,
            },
        )?)
    }

    pub fn trainer_for(&self, seed: u64) -> TrainerConfig {
        TrainerConfig {
            seed,
            ..self.trainer.clone()
        }
    }
}

pub fn parse_method(name: &str) -> CliResult<Method> {
    let m: Method = name.parse()?;
    if m == Method::FullFt {
        return Err(CliError::Config(
            "full-ft is accounted for by `count` only".into(),
        ));
    }
    Ok(m)
}

/// Sets `a.b.c=value`; the value is read as a TOML literal and falls back to
/// a bare string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!(
            "override key {key:?} is malformed"
        )));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("override key {key:?} descends into a non-table"))
        })?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut t = toml::Table::try_from(ExperimentConfig::default()).unwrap();
        apply_override(&mut t, "trainer.lr=0.5").unwrap();
        apply_override(&mut t, "strategy.method=poly").unwrap();
        apply_override(&mut t, "seeds=[1, 2]").unwrap();
        let cfg: ExperimentConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.trainer.lr, 0.5);
        assert_eq!(cfg.strategy.method, "poly");
        assert_eq!(cfg.seeds, vec![1, 2]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut t = toml::Table::try_from(ExperimentConfig::default()).unwrap();
        apply_override(&mut t, "trainer.lr_typo=0.5").unwrap();
        assert!(toml::Value::Table(t)
            .try_into::<ExperimentConfig>()
            .is_err());
    }
}
