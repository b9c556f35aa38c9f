//! Checkpoint directory layout: `backbone.bin`, `inventory.bin`,
//! `routing.json`, `manifest.json`, plus `vocab.json` and the canonical
//! `config.toml`. Only `manifest.json` carries a timestamp.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use polyadapt_core::adapters::{InventoryManifest, SkillInventory};
use polyadapt_core::backbone::{BackboneConfig, FrozenBackbone};
use polyadapt_core::model::{AdapterConfig, PolyModel};
use polyadapt_core::strategies::{Method, StrategyDescriptor};
use polyadapt_core::tasks::Vocabulary;
use polyadapt_core::trainer::TrainLog;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::output::{read_json, write_json, write_text};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub method: Method,
    pub seed: u64,
    pub strategy: StrategyDescriptor,
    pub adapter: AdapterConfig,
    pub backbone: BackboneConfig,
    pub backbone_sha256: String,
    pub inventory: InventoryManifest,
    pub train_tasks: Vec<String>,
    pub best_step: usize,
    pub best_perplexity: Option<f64>,
    pub created_unix_secs: u64,
}

pub struct Checkpoint {
    pub model: PolyModel,
    pub manifest: Manifest,
    pub vocab: Vocabulary,
}

/// Directory of the checkpoint for run seed `seed` under `root`.
pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

/// `root/seed-<seed>` when present, else `root` itself if it holds a single
/// checkpoint.
pub fn resolve(root: &Path, seed: u64) -> CliResult<PathBuf> {
    let per_seed = seed_dir(root, seed);
    if per_seed.join("manifest.json").is_file() {
        return Ok(per_seed);
    }
    if root.join("manifest.json").is_file() {
        return Ok(root.to_path_buf());
    }
    Err(CliError::Data(format!(
        "no checkpoint for seed {seed} under {}",
        root.display()
    )))
}

pub fn save(
    dir: &Path,
    model: &PolyModel,
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
    train_tasks: &[String],
    seed: u64,
    log: &TrainLog,
) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let bb = model.backbone();
    let write_bin = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))
    };
    write_bin("backbone.bin", &bb.to_bytes())?;
    write_bin("inventory.bin", &model.inventory().to_bytes())?;
    write_text(&dir.join("routing.json"), &(model.router_json()? + "\n"))?;
    write_text(&dir.join("vocab.json"), &(vocab.to_json()? + "\n"))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        method: model.strategy().method,
        seed,
        strategy: *model.strategy(),
        adapter: *model.adapter_config(),
        backbone: bb.config().clone(),
        backbone_sha256: bb.fingerprint(),
        inventory: model.inventory().manifest(),
        train_tasks: train_tasks.to_vec(),
        best_step: log.best_step,
        best_perplexity: log.best_perplexity,
        created_unix_secs: created,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load(dir: &Path) -> CliResult<Checkpoint> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CliError::Data(format!(
            "{}: unsupported checkpoint format {}",
            dir.display(),
            manifest.format_version
        )));
    }
    let read_bin = |name: &str| {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| CliError::io(&p, e))
    };
    let read_text = |name: &str| {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))
    };
    let backbone =
        FrozenBackbone::from_bytes(manifest.backbone.clone(), &read_bin("backbone.bin")?)?;
    if backbone.fingerprint() != manifest.backbone_sha256 {
        return Err(CliError::Data(format!(
            "{}: backbone hash mismatch",
            dir.display()
        )));
    }
    let inventory = SkillInventory::from_parts(&manifest.inventory, &read_bin("inventory.bin")?)?;
    let router = PolyModel::router_from_json(&read_text("routing.json")?)?;
    let vocab = Vocabulary::from_json(&read_text("vocab.json")?)?;
    let model = PolyModel::from_parts(
        Arc::new(backbone),
        manifest.strategy,
        manifest.adapter,
        inventory,
        router,
    )?;
    Ok(Checkpoint {
        model,
        manifest,
        vocab,
    })
}
