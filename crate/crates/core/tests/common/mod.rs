#![allow(dead_code)]

use std::sync::Arc;

use polyadapt_core::backbone::{AdapterFamily, BackboneConfig, Batch, FrozenBackbone};
use polyadapt_core::model::{AdapterConfig, ParamId, PolyModel};
use polyadapt_core::routing::RouteMode;
use polyadapt_core::strategies::{build_strategy, Method, StrategyDims};
use polyadapt_core::tasks::{generate_compositional_tasks, GeneratorConfig, TaskSet};
use polyadapt_tensor::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-4)
}

pub fn small_tasks(seed: u64) -> TaskSet {
    generate_compositional_tasks(&GeneratorConfig {
        num_generator_skills: 4,
        num_train_tasks: 3,
        num_test_tasks: 2,
        skills_per_task: 2,
        examples_per_task: 24,
        seq_len: 4,
        symbols_per_skill: 2,
        seed,
    })
    .unwrap()
}

pub fn backbone(vocab: usize, d: usize, seed: u64) -> Arc<FrozenBackbone> {
    Arc::new(FrozenBackbone::build(BackboneConfig::new(vocab, d, 2, seed)).unwrap())
}

pub fn train_names(ts: &TaskSet) -> Vec<String> {
    ts.train_tasks().map(|t| t.name.clone()).collect()
}

pub fn model(
    ts: &TaskSet,
    bb: &Arc<FrozenBackbone>,
    method: Method,
    family: AdapterFamily,
    skills: usize,
    heads: usize,
    seed: u64,
) -> PolyModel {
    let names = train_names(ts);
    let strategy = build_strategy(
        method,
        StrategyDims {
            skills,
            heads,
            train_tasks: names.len(),
            soup_k: 1,
        },
    )
    .unwrap();
    let adapter = AdapterConfig {
        family,
        rank: 2,
        period: 1,
        seed,
    };
    PolyModel::assemble(Arc::clone(bb), strategy, &names, adapter).unwrap()
}

/// Moves every trainable value by uniform noise so no parameter sits at a
/// symmetric initialization.
pub fn perturb(m: &mut PolyModel, seed: u64, width: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in m.trainable_ids() {
        for v in m.tensor_mut(id).data_mut() {
            *v += rng.gen_range(-width..width);
        }
    }
}

pub fn eval_loss(m: &PolyModel, batch: &Batch, task: &str) -> f64 {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, _) = m
        .forward(&mut g, batch, task, RouteMode::Eval, &mut rng)
        .unwrap();
    g.scalar_value(out.loss)
}

pub fn eval_logits(m: &PolyModel, batch: &Batch, task: &str) -> Vec<f64> {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, _) = m
        .forward(&mut g, batch, task, RouteMode::Eval, &mut rng)
        .unwrap();
    g.value(out.logits).to_vec()
}

/// Worst relative error between analytic and central-difference gradients
/// over `per_tensor` random coordinates of each listed parameter.
pub fn gradient_check(
    m: &PolyModel,
    batch: &Batch,
    task: &str,
    ids: &[ParamId],
    per_tensor: usize,
    seed: u64,
) -> f64 {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, params) = m
        .forward(&mut g, batch, task, RouteMode::Eval, &mut rng)
        .unwrap();
    let grads = g.backward(out.loss).unwrap();
    let mut pick = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for id in ids {
        let var = params
            .iter()
            .find(|(p, _)| p == id)
            .expect("parameter used by forward")
            .1;
        let analytic = grads.get(var).unwrap().to_vec();
        for _ in 0..per_tensor {
            let i = pick.gen_range(0..analytic.len());
            let mut probe = m.clone();
            let orig = probe.tensor(*id).data()[i];
            probe.tensor_mut(*id).data_mut()[i] = orig + STEP;
            let up = eval_loss(&probe, batch, task);
            probe.tensor_mut(*id).data_mut()[i] = orig - STEP;
            let down = eval_loss(&probe, batch, task);
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}
