//! Two-phase optimization: multi-task pre-training, per-task few-shot
//! adaptation, evaluation and the gradient-alignment probe.

use std::collections::BTreeMap;

use polyadapt_tensor::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Batch;
use crate::error::{config, data, Error, Result};
use crate::model::{ParamId, PolyModel};
use crate::routing::{RouteMode, TauSchedule};
use crate::strategies::Phase;
use crate::tasks::{few_shot_split, stable_hash, Example, TaskSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub pretrain_steps: usize,
    pub adapt_steps: usize,
    pub lr: f64,
    /// Learning rate for routing logits; `None` uses `lr`.
    pub routing_lr: Option<f64>,
    pub batch_size: usize,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,
    /// Held-out examples per training task for early stopping.
    pub val_examples: usize,
    pub tau: TauSchedule,
    pub k_shots: usize,
    /// Stop adaptation on an 80/20 split of the support set instead of a
    /// fixed step budget.
    pub adapt_early_stop: bool,
    /// Query examples scored per test task; 0 scores all of them.
    pub eval_examples: usize,
    /// Alignment probe period in pre-training steps; 0 disables probes.
    pub align_every: usize,
    pub align_batch: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            pretrain_steps: 2000,
            adapt_steps: 100,
            lr: 1e-2,
            routing_lr: None,
            batch_size: 16,
            patience: 5,
            eval_every: 100,
            val_examples: 32,
            tau: TauSchedule::default(),
            k_shots: 16,
            adapt_early_stop: false,
            eval_examples: 0,
            align_every: 50,
            align_batch: 32,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config(format!("learning rate {} must be positive", self.lr));
        }
        if let Some(r) = self.routing_lr {
            if !(r > 0.0 && r.is_finite()) {
                return config(format!("routing learning rate {r} must be positive"));
            }
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.align_batch == 0 {
            return config("batch_size, eval_every and align_batch must be positive");
        }
        self.tau.validate()
    }
}

/// Adam with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    routing_lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    /// Running `β₁ᵗ` and `β₂ᵗ`; plain products round identically in every
    /// build, unlike `powi`.
    beta1_t: f64,
    beta2_t: f64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, routing_lr: f64) -> Self {
        Self {
            lr,
            routing_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            beta1_t: 1.0,
            beta2_t: 1.0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut PolyModel, grads: &[(ParamId, Vec<f64>)]) {
        self.beta1_t *= self.beta1;
        self.beta2_t *= self.beta2;
        let c1 = 1.0 - self.beta1_t;
        let c2 = 1.0 - self.beta2_t;
        for (id, g) in grads {
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let lr = match id {
                ParamId::Route { .. } => self.routing_lr,
                ParamId::Skill { .. } => self.lr,
            };
            let t = model.tensor_mut(*id);
            for (((p, gi), mi), vi) in t
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }

    pub fn num_buffers(&self) -> usize {
        self.moments.len()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub step: usize,
    /// `train`, `val` or `align`.
    pub kind: String,
    pub task: String,
    pub loss: Option<f64>,
    pub perplexity: Option<f64>,
    pub alignment: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Step whose parameters were kept.
    pub best_step: usize,
    pub best_perplexity: Option<f64>,
}

impl TrainLog {
    fn push(&mut self, phase: Phase, step: usize, kind: &str, task: &str) -> &mut LogRecord {
        self.records.push(LogRecord {
            phase: phase.name().to_string(),
            step,
            kind: kind.to_string(),
            task: task.to_string(),
            loss: None,
            perplexity: None,
            alignment: None,
        });
        self.records.last_mut().expect("just pushed")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub perplexity: f64,
}

/// Pairwise cosine similarities of per-task gradients at one probe step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub step: usize,
    pub tasks: Vec<String>,
    /// `None` where a task's gradient vanished.
    pub matrix: Vec<Vec<Option<f64>>>,
    /// Mean over defined off-diagonal entries.
    pub mean_offdiag: Option<f64>,
}

fn sample_batch<'a>(
    examples: &'a [Example],
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a Example> {
    if examples.len() <= size {
        return examples.iter().collect();
    }
    rand::seq::index::sample(rng, examples.len(), size)
        .into_iter()
        .map(|i| &examples[i])
        .collect()
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::Tensor(t) => Error::Training(format!("diverged at step {step}: {t}")),
        other => other,
    }
}

/// One optimizer step on a single-task batch; returns the loss.
fn train_step(
    model: &mut PolyModel,
    opt: &mut Adam,
    batch: &Batch,
    task: &str,
    mode: RouteMode,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let (out, params) = model.forward(&mut g, batch, task, mode, rng)?;
    let loss = g.scalar_value(out.loss);
    if !loss.is_finite() {
        return Err(Error::Training(format!("non-finite loss on task {task}")));
    }
    let grads = g.backward(out.loss)?;
    let collected: Vec<(ParamId, Vec<f64>)> = params
        .into_iter()
        .filter_map(|(id, v)| grads.get(v).map(|gr| (id, gr.to_vec())))
        .collect();
    opt.step(model, &collected);
    Ok(loss)
}

/// Teacher-forced perplexity `exp(mean token NLL)` over `examples`.
pub fn perplexity(model: &PolyModel, task: &str, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return data("perplexity of an empty example set");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut nll = 0.0;
    let mut tokens = 0.0;
    for chunk in examples.chunks(64) {
        let batch = Batch::from_owned(chunk)?;
        let mut g = Graph::new();
        let (out, _) = model.forward(&mut g, &batch, task, RouteMode::Eval, &mut rng)?;
        let n = batch.targets.iter().filter(|t| t.is_some()).count() as f64;
        nll += g.scalar_value(out.loss) * n;
        tokens += n;
    }
    Ok((nll / tokens).exp())
}

struct Split {
    name: String,
    train: Vec<Example>,
    val: Vec<Example>,
}

/// Multi-task pre-training with early stopping on mean validation
/// perplexity. Returns the best model seen, its log and any alignment probes.
pub fn pretrain(
    model: &PolyModel,
    tasks: &TaskSet,
    cfg: &TrainerConfig,
) -> Result<(PolyModel, TrainLog, Vec<AlignmentReport>)> {
    cfg.validate()?;
    let mut splits = Vec::new();
    for t in tasks.train_tasks() {
        let n_val = cfg.val_examples.min(t.examples.len().saturating_sub(1));
        let (val, train) = few_shot_split(t, n_val, cfg.seed)?;
        splits.push(Split {
            name: t.name.clone(),
            train,
            val,
        });
    }
    if splits.is_empty() {
        return data("no training tasks");
    }
    let mut model = model.clone();
    model.enter_phase(Phase::Pretrain);
    let mut opt = Adam::new(cfg.lr, cfg.routing_lr.unwrap_or(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut reports = Vec::new();

    let validate = |m: &PolyModel| -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0.0;
        for s in &splits {
            if !s.val.is_empty() {
                total += perplexity(m, &s.name, &s.val)?;
                count += 1.0;
            }
        }
        Ok(if count > 0.0 { total / count } else { f64::NAN })
    };

    let mut best = model.clone();
    let mut best_ppl = validate(&model)?;
    let mut stale = 0;
    log.push(Phase::Pretrain, 0, "val", "mean").perplexity = Some(best_ppl);
    // alignment is undefined for a single task
    let probing = cfg.align_every > 0 && splits.len() >= 2;
    for step in 0..cfg.pretrain_steps {
        if probing && step % cfg.align_every == 0 {
            let r = gradient_alignment(&model, tasks, cfg.align_batch, cfg.seed, step)?;
            log.push(Phase::Pretrain, step, "align", "mean").alignment = r.mean_offdiag;
            reports.push(r);
        }
        let split = &splits[step % splits.len()];
        let batch = Batch::new(&sample_batch(&split.train, cfg.batch_size, &mut rng))?;
        let tau = cfg.tau.at(step, cfg.pretrain_steps);
        let loss = train_step(
            &mut model,
            &mut opt,
            &batch,
            &split.name,
            RouteMode::Sample { tau },
            &mut rng,
        )
        .map_err(|e| diverged(step, e))?;
        log.push(Phase::Pretrain, step + 1, "train", &split.name)
            .loss = Some(loss);
        let done = step + 1 == cfg.pretrain_steps;
        if (step + 1) % cfg.eval_every == 0 || done {
            let ppl = validate(&model)?;
            log.push(Phase::Pretrain, step + 1, "val", "mean")
                .perplexity = Some(ppl);
            if ppl < best_ppl || best_ppl.is_nan() {
                best_ppl = ppl;
                best = model.clone();
                log.best_step = step + 1;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    log.best_perplexity = Some(best_ppl).filter(|p| p.is_finite());
    Ok((best, log, reports))
}

/// Few-shot fine-tuning of a model prepared by `PolyModel::for_test_task`.
pub fn adapt(
    model: &PolyModel,
    task: &str,
    support: &[Example],
    cfg: &TrainerConfig,
) -> Result<(PolyModel, TrainLog)> {
    cfg.validate()?;
    let mut model = model.clone();
    model.enter_phase(Phase::Finetune);
    let mut log = TrainLog::default();
    if support.is_empty() || cfg.adapt_steps == 0 || model.trainable_census() == 0 {
        return Ok((model, log));
    }
    let (fit, held): (Vec<Example>, Vec<Example>) = if cfg.adapt_early_stop && support.len() >= 5 {
        let n_held = support.len() / 5;
        (support[n_held..].to_vec(), support[..n_held].to_vec())
    } else {
        (support.to_vec(), Vec::new())
    };
    let mut opt = Adam::new(cfg.lr, cfg.routing_lr.unwrap_or(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stable_hash(task));
    let tau = cfg.tau.end;
    let mut best = model.clone();
    let mut best_ppl = if held.is_empty() {
        f64::NAN
    } else {
        perplexity(&model, task, &held)?
    };
    let mut stale = 0;
    for step in 0..cfg.adapt_steps {
        let batch = Batch::new(&sample_batch(&fit, cfg.batch_size, &mut rng))?;
        let loss = train_step(
            &mut model,
            &mut opt,
            &batch,
            task,
            RouteMode::Sample { tau },
            &mut rng,
        )
        .map_err(|e| diverged(step, e))?;
        log.push(Phase::Finetune, step + 1, "train", task).loss = Some(loss);
        if !held.is_empty()
            && ((step + 1) % cfg.eval_every.min(10) == 0 || step + 1 == cfg.adapt_steps)
        {
            let ppl = perplexity(&model, task, &held)?;
            log.push(Phase::Finetune, step + 1, "val", task).perplexity = Some(ppl);
            if ppl < best_ppl {
                best_ppl = ppl;
                best = model.clone();
                log.best_step = step + 1;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    if held.is_empty() {
        log.best_step = cfg.adapt_steps;
        return Ok((model, log));
    }
    log.best_perplexity = Some(best_ppl);
    Ok((best, log))
}

/// Greedy-decode metrics over `query`.
pub fn evaluate(model: &PolyModel, task: &str, query: &[Example]) -> Result<Metrics> {
    if query.is_empty() {
        return data(format!("no query examples for task {task}"));
    }
    let mut correct_tokens = 0usize;
    let mut total_tokens = 0usize;
    let mut exact = 0usize;
    for chunk in query.chunks(64) {
        let batch = Batch::from_owned(chunk)?;
        let max_len = chunk.iter().map(|e| e.target.len()).max().unwrap_or(0);
        let preds = model.decode(&batch, task, max_len)?;
        for (e, p) in chunk.iter().zip(&preds) {
            let want = e
                .target
                .iter()
                .map(|&t| Some(t))
                .chain(std::iter::once(None));
            let got = p.iter().map(|&t| Some(t)).chain(std::iter::repeat(None));
            correct_tokens += want.zip(got).filter(|(w, g)| w == g).count();
            total_tokens += e.target.len() + 1;
            exact += usize::from(p == &e.target);
        }
    }
    Ok(Metrics {
        token_accuracy: correct_tokens as f64 / total_tokens as f64,
        exact_match: exact as f64 / query.len() as f64,
        perplexity: perplexity(model, task, query)?,
    })
}

/// Cosine similarity of per-task gradients with respect to the skill
/// inventory, with deterministic routing.
pub fn gradient_alignment(
    model: &PolyModel,
    tasks: &TaskSet,
    probe_batch: usize,
    seed: u64,
    step: usize,
) -> Result<AlignmentReport> {
    let names: Vec<String> = tasks.train_tasks().map(|t| t.name.clone()).collect();
    if names.len() < 2 {
        return data("alignment needs at least two training tasks");
    }
    let mut probe = model.clone();
    probe.enter_phase(Phase::Pretrain);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut grads = Vec::with_capacity(names.len());
    for t in tasks.train_tasks() {
        let mut pick = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(&t.name));
        let batch = Batch::new(&sample_batch(&t.examples, probe_batch, &mut pick))?;
        let mut g = Graph::new();
        let (out, params) = probe.forward(&mut g, &batch, &t.name, RouteMode::Eval, &mut rng)?;
        let gr = g.backward(out.loss)?;
        let mut by_id: Vec<(ParamId, Vec<f64>)> = params
            .into_iter()
            .filter(|(id, _)| matches!(id, ParamId::Skill { .. }))
            .filter_map(|(id, v)| gr.get(v).map(|x| (id, x.to_vec())))
            .collect();
        by_id.sort_by_key(|(id, _)| *id);
        grads.push(by_id.into_iter().flat_map(|(_, v)| v).collect::<Vec<f64>>());
    }
    Ok(alignment_from_gradients(names, &grads, step))
}

/// Builds the report from flattened per-task gradients.
pub fn alignment_from_gradients(
    tasks: Vec<String>,
    grads: &[Vec<f64>],
    step: usize,
) -> AlignmentReport {
    let n = grads.len();
    let norms: Vec<f64> = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut matrix = vec![vec![None; n]; n];
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        if norms[i] > 0.0 {
            matrix[i][i] = Some(1.0);
        }
        for j in i + 1..n {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum();
                let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                matrix[i][j] = Some(c);
                matrix[j][i] = Some(c);
                sum += 2.0 * c;
                count += 2;
            }
        }
    }
    AlignmentReport {
        step,
        tasks,
        matrix,
        mean_offdiag: (count > 0).then(|| sum / count as f64),
    }
}
