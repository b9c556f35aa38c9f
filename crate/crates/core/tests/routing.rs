use polyadapt_core::routing::{combine_mhr, combine_poly, normalize, relax_scalar, RouteMode};
use polyadapt_tensor::Graph;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn logistic_cdf(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mhr(alpha: &[f64], skills: &[Vec<f64>], d: usize, r: usize, h: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let a = g.constant_from(&[skills.len(), h], alpha.to_vec()).unwrap();
    let items: Vec<_> = skills
        .iter()
        .map(|s| g.constant_from(&[d, r], s.clone()).unwrap())
        .collect();
    let out = combine_mhr(&mut g, a, &items, h).unwrap();
    g.value(out).to_vec()
}

#[test]
fn two_head_hand_example() {
    let a1 = vec![1.0; 4];
    let a2 = vec![3.0; 4];
    // head 0 picks skill 0, head 1 picks skill 1
    let alpha = [1.0, 0.0, 0.0, 1.0];
    assert_eq!(mhr(&alpha, &[a1, a2], 4, 1, 2), vec![1.0, 1.0, 3.0, 3.0]);
}

#[test]
fn scalar_skills_mix_by_hand() {
    let mut g = Graph::new();
    let a = g.constant_from(&[2], vec![0.25, 0.75]).unwrap();
    let s1 = g.constant_from(&[1, 1], vec![2.0]).unwrap();
    let s2 = g.constant_from(&[1, 1], vec![6.0]).unwrap();
    let out = combine_poly(&mut g, a, &[s1, s2]).unwrap();
    assert_eq!(g.value(out), &[5.0]);
}

#[test]
fn heads_must_divide_rows() {
    let mut g = Graph::new();
    let a = g.constant_from(&[2, 3], vec![0.5; 6]).unwrap();
    let s = g.constant_from(&[4, 1], vec![1.0; 4]).unwrap();
    assert!(combine_mhr(&mut g, a, &[s, s], 3).is_err());
}

#[test]
fn low_temperature_on_large_logit_is_nearly_one() {
    // P(ẑ > 0.999) = P(L > logit(0.999)·τ − z) for a standard logistic L
    let (tau, z) = (0.01, 10.0);
    let threshold = (0.999f64 / 0.001).ln() * tau - z;
    let oracle = 1.0 - logistic_cdf(threshold);
    assert!(oracle > 0.9999);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let hits = (0..1000)
        .filter(|_| relax_scalar(z, RouteMode::Sample { tau }, &mut rng) > 0.999)
        .count();
    assert!(hits >= 990, "{hits}");
}

#[test]
fn sampled_near_binary_rate_matches_logistic_oracle() {
    // ẑ is within 1e-3 of {0,1} iff |z + L| > τ·logit(0.999)
    let tau = 0.05;
    let band = tau * (0.999f64 / 0.001).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for z in [1.0, -1.0, 2.0, 4.0] {
        let oracle = 1.0 - (logistic_cdf(band - z) - logistic_cdf(-band - z));
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| {
                let v = relax_scalar(z, RouteMode::Sample { tau }, &mut rng);
                !(1e-3..=1.0 - 1e-3).contains(&v)
            })
            .count();
        let rate = hits as f64 / n as f64;
        let se = (oracle * (1.0 - oracle) / n as f64).sqrt();
        assert!(
            (rate - oracle).abs() < 4.0 * se + 1e-4,
            "z={z}: {rate} vs {oracle}"
        );
    }
}

#[test]
fn tiny_columns_deviate_by_exactly_the_guard_term() {
    let mut g = Graph::new();
    let z = g.constant_from(&[2, 1], vec![1e-3, 1e-3]).unwrap();
    let a = normalize(&mut g, z).unwrap();
    let expected = 1e-3 / (2e-3 + 1e-12);
    for v in g.value(a) {
        assert!((v - expected).abs() < 1e-16);
    }
}

#[test]
fn eval_relaxation_is_deterministic() {
    let mut a = ChaCha8Rng::seed_from_u64(1);
    let mut b = ChaCha8Rng::seed_from_u64(2);
    for z in [-3.0, 0.0, 0.7] {
        assert_eq!(
            relax_scalar(z, RouteMode::Eval, &mut a).to_bits(),
            relax_scalar(z, RouteMode::Eval, &mut b).to_bits()
        );
    }
    assert_eq!(relax_scalar(0.0, RouteMode::Eval, &mut a), 0.5);
}

fn skills_strategy(s: usize, len: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0..5.0f64, len), s)
}

proptest! {
    #[test]
    fn normalization_is_scale_invariant(
        col in prop::collection::vec(0.5..10.0f64, 2..9),
        c in 0.1..50.0f64,
    ) {
        // the ε guard perturbs α by about ε/(c·Σ), negligible once c·Σ ≥ 1
        prop_assume!(c * col.iter().sum::<f64>() >= 1.0);
        let s = col.len();
        let mut g = Graph::new();
        let z = g.constant_from(&[s, 1], col.clone()).unwrap();
        let zs = g.constant_from(&[s, 1], col.iter().map(|v| v * c).collect()).unwrap();
        let a = normalize(&mut g, z).unwrap();
        let b = normalize(&mut g, zs).unwrap();
        for (x, y) in g.value(a).iter().zip(g.value(b)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((g.value(a).iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn combination_is_convex_per_entry(
        skills in skills_strategy(3, 8),
        raw in prop::collection::vec(0.01..1.0f64, 6),
    ) {
        let mut g = Graph::new();
        let z = g.constant_from(&[3, 2], raw).unwrap();
        let alpha = normalize(&mut g, z).unwrap();
        let items: Vec<_> = skills.iter().map(|s| g.constant_from(&[4, 2], s.clone()).unwrap()).collect();
        let out = combine_mhr(&mut g, alpha, &items, 2).unwrap();
        for (i, v) in g.value(out).iter().enumerate() {
            let lo = skills.iter().map(|s| s[i]).fold(f64::INFINITY, f64::min);
            let hi = skills.iter().map(|s| s[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }

    #[test]
    fn identical_head_weights_reduce_to_single_head(
        skills in skills_strategy(4, 16),
        w in prop::collection::vec(0.0..1.0f64, 4),
        h in prop::sample::select(vec![1usize, 2, 4, 8]),
    ) {
        let alpha: Vec<f64> = w.iter().flat_map(|x| std::iter::repeat_n(*x, h)).collect();
        let multi = mhr(&alpha, &skills, 8, 2, h);
        let single = mhr(&w, &skills, 8, 2, 1);
        for (a, b) in multi.iter().zip(&single) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn perturbing_one_head_changes_only_its_rows(
        skills in skills_strategy(3, 8),
        w in prop::collection::vec(0.1..1.0f64, 6),
        k in 0usize..2,
        delta in 0.05..0.5f64,
    ) {
        let base = mhr(&w, &skills, 4, 2, 2);
        let mut moved = w.clone();
        for s in 0..3 {
            moved[s * 2 + k] += delta * (s as f64 + 1.0);
        }
        let after = mhr(&moved, &skills, 4, 2, 2);
        // rows [2k, 2k+2) of a 4×2 matrix
        for (i, (a, b)) in base.iter().zip(&after).enumerate() {
            if i / 2 / 2 != k {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
