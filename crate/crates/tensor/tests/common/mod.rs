//! Central finite-difference oracle, independent of the tape.

use polyadapt_tensor::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-4)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let up = f(&probe);
            probe[i] = orig - STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

pub type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Checks every input's analytic gradient of `sum(op(inputs) ⊙ R)` against
/// central differences, with `R` a fixed random projection. Returns the worst
/// relative error seen.
pub fn check_op(seed: u64, inputs: &[Tensor], build: &Build) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).len()
    };
    let proj: Vec<f64> = (0..probe).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let loss_of = |tensors: &[Tensor], track: bool| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| if track { g.variable(t) } else { g.constant(t) }.unwrap())
            .collect();
        let out = build(&mut g, &vars).unwrap();
        let shape = g.shape(out).to_vec();
        let r = g.constant_from(&shape, proj.clone()).unwrap();
        let prod = g.mul(out, r).unwrap();
        let loss = g.sum(prod).unwrap();
        let value = g.scalar_value(loss);
        if !track {
            return (value, None);
        }
        let grads = g.backward(loss).unwrap();
        let gs = vars
            .iter()
            .map(|v| {
                grads
                    .get(*v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; g_len(tensors, *v)])
            })
            .collect();
        (value, Some(gs))
    };

    let (_, analytic) = loss_of(inputs, true);
    let analytic = analytic.unwrap();
    let mut worst: f64 = 0.0;
    for (idx, t) in inputs.iter().enumerate() {
        let f = |x: &[f64]| {
            let mut ts = inputs.to_vec();
            ts[idx] = Tensor::from_vec(t.shape(), x.to_vec()).unwrap();
            loss_of(&ts, false).0
        };
        let numeric = numeric_grad(&f, t.data());
        for (a, n) in analytic[idx].iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

fn g_len(tensors: &[Tensor], v: Var) -> usize {
    tensors[v.index()].numel()
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}
