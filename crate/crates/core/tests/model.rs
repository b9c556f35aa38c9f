mod common;

use common::*;
use polyadapt_core::adapters::Skill;
use polyadapt_core::backbone::{AdapterFamily, Batch, NoAdapters};
use polyadapt_core::model::{ParamId, PolyModel};
use polyadapt_core::strategies::{Method, Phase};
use polyadapt_tensor::Graph;

fn batch_for(ts: &polyadapt_core::tasks::TaskSet, n: usize) -> (Batch, String) {
    let t = ts.train_tasks().next().unwrap();
    let refs: Vec<_> = t.examples.iter().take(n).collect();
    (Batch::new(&refs).unwrap(), t.name.clone())
}

fn bare_logits(m: &PolyModel, batch: &Batch) -> Vec<f64> {
    let mut g = Graph::new();
    let out = m
        .backbone()
        .forward(&mut g, batch, &mut NoAdapters)
        .unwrap();
    g.value(out.logits).to_vec()
}

#[test]
fn fresh_lora_and_ia3_adapters_leave_logits_unchanged() {
    let ts = small_tasks(0);
    let bb = backbone(ts.vocab.len(), 16, 0);
    let (batch, task) = batch_for(&ts, 4);
    for family in [AdapterFamily::Lora, AdapterFamily::Ia3] {
        for method in [Method::Shared, Method::Poly, Method::PolyS] {
            let m = model(&ts, &bb, method, family, 4, 2, 1);
            let (got, want) = (eval_logits(&m, &batch, &task), bare_logits(&m, &batch));
            if method == Method::Shared || family == AdapterFamily::Lora {
                assert_eq!(got, want, "{family:?} {method}");
            } else {
                // routed mixing weights sum to 1 up to the 1e-12 normalization guard
                let worst = got
                    .iter()
                    .zip(&want)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(worst < 1e-10, "{family:?} {method}: {worst}");
            }
        }
    }
}

#[test]
fn lora_contribution_is_linear_in_the_input() {
    // delta(x) = (1/r)·x·B·Aᵀ, so delta(c·x) = c·delta(x)
    let ts = small_tasks(0);
    let bb = backbone(ts.vocab.len(), 16, 0);
    let mut m = model(&ts, &bb, Method::Shared, AdapterFamily::Lora, 1, 1, 2);
    perturb(&mut m, 5, 0.3);
    let (a, b) = match &m.inventory().skills_at(0)[0] {
        Skill::Lora { a, b } => (a.clone(), b.clone()),
        Skill::Ia3 { .. } => unreachable!(),
    };
    let delta = |x: &[f64]| -> Vec<f64> {
        let mut g = Graph::new();
        let xv = g.constant_from(&[1, 16], x.to_vec()).unwrap();
        let av = g.constant(&a).unwrap();
        let bv = g.constant(&b).unwrap();
        let xb = g.matmul(xv, bv).unwrap();
        let at = g.transpose(av).unwrap();
        let d = g.matmul(xb, at).unwrap();
        let d = g.scale(d, 0.5).unwrap();
        g.value(d).to_vec()
    };
    let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
    let cx: Vec<f64> = x.iter().map(|v| -2.5 * v).collect();
    for (p, q) in delta(&cx).iter().zip(delta(&x)) {
        assert!((p - (-2.5 * q)).abs() < 1e-12);
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let ts = small_tasks(3);
    let bb = backbone(ts.vocab.len(), 16, 3);
    let (batch, task) = batch_for(&ts, 3);
    for (family, method, heads) in [
        (AdapterFamily::Lora, Method::Poly, 1),
        (AdapterFamily::Lora, Method::PolyS, 4),
        (AdapterFamily::Ia3, Method::PolyS, 2),
    ] {
        let mut m = model(&ts, &bb, method, family, 3, heads, 4);
        perturb(&mut m, 6, 0.2);
        // only the batch task's routing rows enter its loss
        let ids: Vec<ParamId> = m
            .trainable_ids()
            .into_iter()
            .filter(|id| !matches!(id, ParamId::Route { task, .. } if *task != 0))
            .collect();
        let chosen: Vec<ParamId> = ids.iter().step_by(ids.len() / 7).copied().collect();
        let worst = gradient_check(&m, &batch, &task, &chosen, 2, 8);
        assert!(worst < REL_TOL, "{family:?} {method}: {worst}");
    }
}

#[test]
fn unknown_task_is_a_routing_error() {
    let ts = small_tasks(0);
    let bb = backbone(ts.vocab.len(), 16, 0);
    let (batch, _) = batch_for(&ts, 2);
    for method in [Method::Poly, Method::RandomMu] {
        let m = model(&ts, &bb, method, AdapterFamily::Lora, 4, 1, 0);
        let mut g = Graph::new();
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let err = m
            .forward(
                &mut g,
                &batch,
                "nope",
                polyadapt_core::routing::RouteMode::Eval,
                &mut rng,
            )
            .unwrap_err();
        assert!(matches!(err, polyadapt_core::Error::Routing(_)));
    }
}

#[test]
fn grouped_sites_share_mixing_weights() {
    let ts = small_tasks(0);
    let bb = backbone(ts.vocab.len(), 16, 0);
    let names = train_names(&ts);
    let strategy = polyadapt_core::strategies::build_strategy(
        Method::Poly,
        polyadapt_core::strategies::StrategyDims {
            skills: 4,
            heads: 1,
            train_tasks: names.len(),
            soup_k: 1,
        },
    )
    .unwrap();
    let sites = bb.injection_sites(AdapterFamily::Lora).len();
    let shared = PolyModel::assemble(
        bb.clone(),
        strategy,
        &names,
        polyadapt_core::model::AdapterConfig {
            family: AdapterFamily::Lora,
            rank: 2,
            period: sites,
            seed: 0,
        },
    )
    .unwrap();
    assert_eq!(shared.routing_tensor().unwrap().num_groups(), 1);
    let per_site = model(&ts, &bb, Method::Poly, AdapterFamily::Lora, 4, 1, 0);
    assert_eq!(per_site.routing_tensor().unwrap().num_groups(), sites);
    let pretrain_routes = |m: &PolyModel| {
        m.trainable_ids()
            .iter()
            .filter(|i| matches!(i, ParamId::Route { .. }))
            .count()
    };
    assert_eq!(pretrain_routes(&shared) * sites, pretrain_routes(&per_site));
}

#[test]
fn test_tasks_start_from_independent_copies() {
    let ts = small_tasks(0);
    let bb = backbone(ts.vocab.len(), 16, 0);
    let m = model(&ts, &bb, Method::Poly, AdapterFamily::Lora, 4, 1, 0);
    let tests: Vec<_> = ts.test_tasks().collect();
    let mut a = m.for_test_task(&tests[0].name, &[], None).unwrap();
    let b = m.for_test_task(&tests[1].name, &[], None).unwrap();
    let before = b.inventory().to_bytes();
    for id in a.trainable_ids() {
        a.tensor_mut(id).data_mut()[0] += 1.0;
    }
    assert_eq!(b.inventory().to_bytes(), before);
    assert_eq!(m.inventory().to_bytes(), before);
    assert_eq!(a.phase(), Phase::Finetune);
}

#[test]
fn checkpoint_parts_rebuild_an_identical_model() {
    let ts = small_tasks(0);
    let bb = backbone(ts.vocab.len(), 16, 0);
    let (batch, task) = batch_for(&ts, 3);
    for method in [Method::Poly, Method::RandomMu, Method::Shared] {
        let mut m = model(&ts, &bb, method, AdapterFamily::Lora, 4, 1, 0);
        perturb(&mut m, 1, 0.1);
        let inv = polyadapt_core::adapters::SkillInventory::from_parts(
            &m.inventory().manifest(),
            &m.inventory().to_bytes(),
        )
        .unwrap();
        let router = PolyModel::router_from_json(&m.router_json().unwrap()).unwrap();
        let back =
            PolyModel::from_parts(bb.clone(), *m.strategy(), *m.adapter_config(), inv, router)
                .unwrap();
        assert_eq!(back.router(), m.router());
        assert_eq!(
            eval_logits(&back, &batch, &task),
            eval_logits(&m, &batch, &task)
        );
    }
}
