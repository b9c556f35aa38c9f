//! Task-skill routing: logits, Gumbel-sigmoid relaxation, normalized mixing
//! and single- or multi-head combination.

use polyadapt_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{config, routing, Result};

/// Denominator guard in the column normalization.
pub const NORM_EPS: f64 = 1e-12;
/// Half-width of the uniform logit initialization.
pub const Z_INIT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RouteMode {
    /// `sigmoid(z)`, no noise.
    Eval,
    /// `sigmoid((z + g₁ − g₂)/τ)` with fresh standard Gumbel draws.
    Sample { tau: f64 },
}

/// Linear temperature annealing from `start` to `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.1,
        }
    }
}

impl TauSchedule {
    pub fn at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.start;
        }
        let f = (step.min(total - 1)) as f64 / (total - 1) as f64;
        self.start + (self.end - self.start) * f
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.end > 0.0) {
            return config("temperatures must be positive");
        }
        Ok(())
    }
}

/// Difference of two standard Gumbel draws (a standard logistic sample).
pub fn gumbel_difference<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let g = Gumbel::new(0.0, 1.0).expect("unit scale");
    g.sample(rng) - g.sample(rng)
}

/// Scalar form of the relaxation for one logit.
pub fn relax_scalar<R: Rng + ?Sized>(z: f64, mode: RouteMode, rng: &mut R) -> f64 {
    let u = match mode {
        RouteMode::Eval => z,
        RouteMode::Sample { tau } => (z + gumbel_difference(rng)) / tau,
    };
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Relaxed routing values `ẑ ∈ (0,1)`, same shape as `z`.
pub fn relax<R: Rng + ?Sized>(g: &mut Graph, z: Var, mode: RouteMode, rng: &mut R) -> Result<Var> {
    if g.value(z).iter().any(|v| !v.is_finite()) {
        return routing("non-finite routing logits");
    }
    let u = match mode {
        RouteMode::Eval => z,
        RouteMode::Sample { tau } => {
            if !(tau > 0.0) {
                return config(format!("temperature {tau} must be positive"));
            }
            let shape = g.shape(z).to_vec();
            let noise: Vec<f64> = (0..g.value(z).len())
                .map(|_| gumbel_difference(rng))
                .collect();
            let n = g.constant_from(&shape, noise)?;
            let shifted = g.add(z, n)?;
            g.scale(shifted, 1.0 / tau)?
        }
    };
    Ok(g.sigmoid(u)?)
}

/// Per-column `ẑ / (Σẑ + ε)`; an all-zero column becomes uniform.
pub fn normalize(g: &mut Graph, zhat: Var) -> Result<Var> {
    Ok(g.normalize_columns(zhat, NORM_EPS)?)
}

/// `Σᵢ αᵢ·itemᵢ` for a single routing head.
pub fn combine_poly(g: &mut Graph, alpha: Var, items: &[Var]) -> Result<Var> {
    Ok(g.mix(alpha, items)?)
}

/// Head `k` mixes the `k`-th row slice of every item with column `k` of
/// `alpha [S×h]`; the head results are stacked back along rows.
pub fn combine_mhr(g: &mut Graph, alpha: Var, items: &[Var], heads: usize) -> Result<Var> {
    let shape = g.shape(alpha).to_vec();
    let cols = if shape.len() == 2 { shape[1] } else { 1 };
    if cols != heads {
        return config(format!(
            "routing weights have {cols} heads, expected {heads}"
        ));
    }
    if heads == 1 {
        return combine_poly(g, alpha, items);
    }
    let rows = g.shape(items[0])[0];
    if !rows.is_multiple_of(heads) {
        return config(format!("{heads} heads do not divide {rows} rows"));
    }
    let by_head = g.transpose(alpha)?;
    let mut parts = Vec::with_capacity(heads);
    for k in 0..heads {
        let w = g.slice_rows(by_head, k, heads)?;
        let slices = items
            .iter()
            .map(|&it| g.slice_rows(it, k, heads))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        parts.push(g.mix(w, &slices)?);
    }
    Ok(g.concat_rows(&parts)?)
}

/// Assignment of adapted sites to routing groups: `period` consecutive
/// sites share one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingGroupMap {
    pub num_sites: usize,
    pub period: usize,
}

impl RoutingGroupMap {
    pub fn new(num_sites: usize, period: usize) -> Result<Self> {
        if period == 0 {
            return config("routing group period must be positive");
        }
        Ok(Self { num_sites, period })
    }

    pub fn num_groups(&self) -> usize {
        self.num_sites.div_ceil(self.period)
    }

    pub fn group(&self, site: usize) -> usize {
        site / self.period
    }
}

/// Learned logits: one `[S×h]` matrix per (task, group).
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTensor {
    num_skills: usize,
    heads: usize,
    num_groups: usize,
    tasks: Vec<String>,
    /// `rows[task][group]`
    rows: Vec<Vec<Tensor>>,
}

#[derive(Serialize, Deserialize)]
struct RoutingFile {
    num_skills: usize,
    heads: usize,
    num_groups: usize,
    tasks: Vec<RoutingFileRow>,
}

#[derive(Serialize, Deserialize)]
struct RoutingFileRow {
    task: String,
    logits: Vec<Vec<f64>>,
}

impl RoutingTensor {
    pub fn new(num_skills: usize, heads: usize, num_groups: usize) -> Result<Self> {
        if num_skills == 0 || heads == 0 || num_groups == 0 {
            return config("routing needs at least one skill, head and group");
        }
        Ok(Self {
            num_skills,
            heads,
            num_groups,
            tasks: Vec::new(),
            rows: Vec::new(),
        })
    }

    /// Registers `task` with logits drawn uniformly from `[-Z_INIT, Z_INIT]`.
    pub fn add_task(&mut self, task: &str, rng: &mut ChaCha8Rng) -> Result<usize> {
        if self.tasks.iter().any(|t| t == task) {
            return routing(format!("task {task:?} already registered"));
        }
        let rows = (0..self.num_groups)
            .map(|_| {
                Tensor::uniform(&[self.num_skills, self.heads], -Z_INIT, Z_INIT, rng)
                    .with_grad(true)
            })
            .collect();
        self.tasks.push(task.to_string());
        self.rows.push(rows);
        Ok(self.tasks.len() - 1)
    }

    /// Registers every task from one seed, in order.
    pub fn with_tasks(
        num_skills: usize,
        heads: usize,
        num_groups: usize,
        tasks: &[String],
        seed: u64,
    ) -> Result<Self> {
        let mut rt = Self::new(num_skills, heads, num_groups)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in tasks {
            rt.add_task(t, &mut rng)?;
        }
        Ok(rt)
    }

    pub fn index(&self, task: &str) -> Result<usize> {
        match self.tasks.iter().position(|t| t == task) {
            Some(i) => Ok(i),
            None => routing(format!("unregistered task {task:?}")),
        }
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn num_skills(&self) -> usize {
        self.num_skills
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn logits(&self, task: usize, group: usize) -> &Tensor {
        &self.rows[task][group]
    }

    pub fn logits_mut(&mut self, task: usize, group: usize) -> &mut Tensor {
        &mut self.rows[task][group]
    }

    /// Eval-mode `sigmoid(z)` for one (task, group), shape `[S×h]` flattened.
    pub fn probabilities(&self, task: usize, group: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.rows[task][group]
            .data()
            .iter()
            .map(|&z| relax_scalar(z, RouteMode::Eval, &mut rng))
            .collect()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for t in self.rows.iter_mut().flatten() {
            t.requires_grad = trainable;
            t.grad = None;
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.rows.iter().flatten()
    }

    pub fn parameter_count(&self) -> usize {
        self.tasks.len() * self.num_groups * self.num_skills * self.heads
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors()
            .filter(|t| t.requires_grad)
            .map(Tensor::numel)
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = RoutingFile {
            num_skills: self.num_skills,
            heads: self.heads,
            num_groups: self.num_groups,
            tasks: self
                .tasks
                .iter()
                .zip(&self.rows)
                .map(|(t, rows)| RoutingFileRow {
                    task: t.clone(),
                    logits: rows.iter().map(|r| r.data().to_vec()).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RoutingFile = serde_json::from_str(text)?;
        let mut rt = Self::new(file.num_skills, file.heads, file.num_groups)?;
        for row in file.tasks {
            if row.logits.len() != rt.num_groups {
                return routing(format!(
                    "task {:?} has {} groups",
                    row.task,
                    row.logits.len()
                ));
            }
            let rows = row
                .logits
                .into_iter()
                .map(|v| Tensor::from_vec(&[rt.num_skills, rt.heads], v).map(|t| t.with_grad(true)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            rt.tasks.push(row.task);
            rt.rows.push(rows);
        }
        Ok(rt)
    }
}

/// Frozen binary task-skill allocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedAllocation {
    pub tasks: Vec<String>,
    pub rows: Vec<Vec<bool>>,
}

impl FixedAllocation {
    /// Every row activates exactly `⌊S/2⌋` skills.
    pub fn random(tasks: &[String], num_skills: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = tasks
            .iter()
            .map(|_| {
                let chosen = rand::seq::index::sample(&mut rng, num_skills, num_skills / 2);
                let mut row = vec![false; num_skills];
                chosen.iter().for_each(|i| row[i] = true);
                row
            })
            .collect();
        Self {
            tasks: tasks.to_vec(),
            rows,
        }
    }

    /// Task `i` owns skill `i` alone.
    pub fn identity(tasks: &[String]) -> Self {
        let n = tasks.len();
        Self {
            tasks: tasks.to_vec(),
            rows: (0..n).map(|i| (0..n).map(|j| i == j).collect()).collect(),
        }
    }

    pub fn index(&self, task: &str) -> Result<usize> {
        match self.tasks.iter().position(|t| t == task) {
            Some(i) => Ok(i),
            None => routing(format!("unregistered task {task:?}")),
        }
    }

    /// Normalized mixing weights for one task; an empty row is uniform.
    pub fn weights(&self, task: usize) -> Vec<f64> {
        let row = &self.rows[task];
        let active = row.iter().filter(|b| **b).count();
        if active == 0 {
            return vec![1.0 / row.len() as f64; row.len()];
        }
        let total = active as f64 + NORM_EPS;
        row.iter()
            .map(|&b| if b { 1.0 / total } else { 0.0 })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_relaxation_at_zero_is_half() {
        let mut g = Graph::new();
        let z = g.constant_from(&[1, 1], vec![0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = relax(&mut g, z, RouteMode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(r), &[0.5]);
    }

    #[test]
    fn zero_temperature_is_config_error() {
        let mut g = Graph::new();
        let z = g.constant_from(&[1], vec![0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(relax(&mut g, z, RouteMode::Sample { tau: 0.0 }, &mut rng).is_err());
        assert!(TauSchedule {
            start: 1.0,
            end: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn tau_schedule_is_linear_between_endpoints() {
        let s = TauSchedule::default();
        assert_eq!(s.at(0, 11), 1.0);
        assert!((s.at(5, 11) - 0.55).abs() < 1e-12);
        assert!((s.at(10, 11) - 0.1).abs() < 1e-12);
        assert!((s.at(99, 11) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn group_count_is_ceiling_of_sites_over_period() {
        assert_eq!(RoutingGroupMap::new(12, 1).unwrap().num_groups(), 12);
        assert_eq!(RoutingGroupMap::new(12, 5).unwrap().num_groups(), 3);
        assert_eq!(RoutingGroupMap::new(12, 12).unwrap().num_groups(), 1);
        let m = RoutingGroupMap::new(12, 4).unwrap();
        assert_eq!(m.group(3), m.group(0));
        assert_ne!(m.group(4), m.group(3));
        assert!(RoutingGroupMap::new(12, 0).is_err());
    }

    #[test]
    fn unknown_task_is_routing_error() {
        let rt = RoutingTensor::with_tasks(4, 1, 2, &["a".into()], 0).unwrap();
        assert!(matches!(rt.index("b"), Err(crate::Error::Routing(_))));
        assert!(rt.logits(0, 1).data().iter().all(|z| z.abs() <= Z_INIT));
    }

    #[test]
    fn routing_json_round_trips_bit_exactly() {
        let names: Vec<String> = (0..3).map(|i| format!("t{i}")).collect();
        let rt = RoutingTensor::with_tasks(8, 2, 3, &names, 11).unwrap();
        let back = RoutingTensor::from_json(&rt.to_json().unwrap()).unwrap();
        assert_eq!(back, rt);
    }

    #[test]
    fn random_allocation_rows_use_half_the_skills() {
        let names: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        let a = FixedAllocation::random(&names, 8, 4);
        assert!(a.rows.iter().all(|r| r.iter().filter(|b| **b).count() == 4));
        assert_eq!(a, FixedAllocation::random(&names, 8, 4));
        let w = a.weights(0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn identity_allocation_selects_own_skill() {
        let names: Vec<String> = (0..3).map(|i| format!("t{i}")).collect();
        let a = FixedAllocation::identity(&names);
        let w = a.weights(1);
        assert_eq!(w[0], 0.0);
        assert!((w[1] - 1.0).abs() < 1e-11);
    }
}
