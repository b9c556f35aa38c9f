//! A frozen backbone plus a strategy's inventory and router.

use std::collections::HashMap;
use std::sync::Arc;

use polyadapt_tensor::{Graph, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{Skill, SkillInventory};
use crate::backbone::{
    AdapterFamily, AdapterSource, Batch, ForwardOutput, FrozenBackbone, InjectionSite, SiteAdapter,
};
use crate::error::{config, data, routing, Result};
use crate::routing::{self, FixedAllocation, RouteMode, RoutingGroupMap, RoutingTensor};
use crate::strategies::{Combination, Phase, StrategyDescriptor, TestInit};
use crate::tasks::Example;

const ROUTING_SEED_SALT: u64 = 0x5eed_0001;
const ALLOCATION_SEED_SALT: u64 = 0x5eed_0002;
const TEST_ROUTE_SEED_SALT: u64 = 0x5eed_0003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub family: AdapterFamily,
    pub rank: usize,
    /// Consecutive adapted sites sharing one routing tensor.
    pub period: usize,
    pub seed: u64,
}

/// Per-task combination rule in force.
#[derive(Debug, Clone, PartialEq)]
pub enum Router {
    Single,
    Fixed(FixedAllocation),
    Learned(RoutingTensor),
}

/// Address of one trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Skill {
        site: usize,
        skill: usize,
        slot: usize,
    },
    Route {
        task: usize,
        group: usize,
    },
}

#[derive(Debug, Clone)]
pub struct PolyModel {
    backbone: Arc<FrozenBackbone>,
    strategy: StrategyDescriptor,
    adapter: AdapterConfig,
    inventory: SkillInventory,
    router: Router,
    groups: RoutingGroupMap,
    site_index: HashMap<InjectionSite, usize>,
    phase: Phase,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RouterFile {
    Single,
    Fixed { allocation: FixedAllocation },
    Learned { routing: serde_json::Value },
}

impl PolyModel {
    /// Builds the pre-training model for `train_tasks`.
    pub fn assemble(
        backbone: Arc<FrozenBackbone>,
        strategy: StrategyDescriptor,
        train_tasks: &[String],
        adapter: AdapterConfig,
    ) -> Result<Self> {
        if train_tasks.is_empty() {
            return data("no training tasks");
        }
        let bc = backbone.config();
        bc.check_heads(strategy.heads)?;
        if adapter.family == AdapterFamily::Ia3 && !bc.ff_dim.is_multiple_of(strategy.heads) {
            return config(format!(
                "ff_dim {} is not divisible by {} heads",
                bc.ff_dim, strategy.heads
            ));
        }
        let sites = backbone.injection_sites(adapter.family);
        let inventory = SkillInventory::init(
            adapter.family,
            adapter.rank,
            &sites,
            strategy.num_skills,
            adapter.seed,
        )?;
        let groups = RoutingGroupMap::new(sites.len(), adapter.period)?;
        let router = match strategy.combination {
            Combination::Single => Router::Single,
            Combination::Learned { heads } => Router::Learned(RoutingTensor::with_tasks(
                strategy.num_skills,
                heads,
                groups.num_groups(),
                train_tasks,
                adapter.seed ^ ROUTING_SEED_SALT,
            )?),
            Combination::RandomFixed => Router::Fixed(FixedAllocation::random(
                train_tasks,
                strategy.num_skills,
                adapter.seed ^ ALLOCATION_SEED_SALT,
            )),
            Combination::Private => {
                if strategy.num_skills != train_tasks.len() {
                    return config("private allocation needs one skill per training task");
                }
                Router::Fixed(FixedAllocation::identity(train_tasks))
            }
        };
        let site_index = sites.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        Ok(Self {
            backbone,
            strategy,
            adapter,
            inventory,
            router,
            groups,
            site_index,
            phase: Phase::Pretrain,
        })
    }

    /// Rebuilds a model from checkpointed parts.
    pub fn from_parts(
        backbone: Arc<FrozenBackbone>,
        strategy: StrategyDescriptor,
        adapter: AdapterConfig,
        inventory: SkillInventory,
        router: Router,
    ) -> Result<Self> {
        let sites = backbone.injection_sites(adapter.family);
        if inventory.sites() != sites.as_slice() {
            return data("inventory sites do not match the backbone");
        }
        let groups = RoutingGroupMap::new(sites.len(), adapter.period)?;
        if let Router::Learned(rt) = &router {
            if rt.num_groups() != groups.num_groups() || rt.num_skills() != inventory.num_skills() {
                return data("routing checkpoint does not match the inventory");
            }
        }
        let site_index = sites.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        Ok(Self {
            backbone,
            strategy,
            adapter,
            inventory,
            router,
            groups,
            site_index,
            phase: Phase::Pretrain,
        })
    }

    pub fn backbone(&self) -> &FrozenBackbone {
        &self.backbone
    }

    pub fn shared_backbone(&self) -> Arc<FrozenBackbone> {
        Arc::clone(&self.backbone)
    }

    pub fn strategy(&self) -> &StrategyDescriptor {
        &self.strategy
    }

    pub fn adapter_config(&self) -> &AdapterConfig {
        &self.adapter
    }

    pub fn inventory(&self) -> &SkillInventory {
        &self.inventory
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn routing_tensor(&self) -> Option<&RoutingTensor> {
        match &self.router {
            Router::Learned(rt) => Some(rt),
            _ => None,
        }
    }

    pub fn groups(&self) -> &RoutingGroupMap {
        &self.groups
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn num_sites(&self) -> usize {
        self.inventory.sites().len()
    }

    /// Heads used when combining skills for the current router.
    fn heads(&self) -> usize {
        match &self.router {
            Router::Learned(rt) => rt.heads(),
            _ => 1,
        }
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        match id {
            ParamId::Skill { site, skill, slot } => {
                self.inventory.skills_at(site)[skill].tensors()[slot]
            }
            ParamId::Route { task, group } => match &self.router {
                Router::Learned(rt) => rt.logits(task, group),
                _ => unreachable!("route parameters exist only under learned routing"),
            },
        }
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        match id {
            ParamId::Skill { site, skill, slot } => self
                .inventory
                .skill_mut(site, skill)
                .tensors_mut()
                .into_iter()
                .nth(slot)
                .expect("slot in range"),
            ParamId::Route { task, group } => match &mut self.router {
                Router::Learned(rt) => rt.logits_mut(task, group),
                _ => unreachable!("route parameters exist only under learned routing"),
            },
        }
    }

    /// Addresses of every trainable tensor, skills first.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for site in 0..self.num_sites() {
            for (skill, s) in self.inventory.skills_at(site).iter().enumerate() {
                for (slot, t) in s.tensors().iter().enumerate() {
                    if t.requires_grad {
                        ids.push(ParamId::Skill { site, skill, slot });
                    }
                }
            }
        }
        if let Router::Learned(rt) = &self.router {
            for task in 0..rt.tasks().len() {
                for group in 0..rt.num_groups() {
                    if rt.logits(task, group).requires_grad {
                        ids.push(ParamId::Route { task, group });
                    }
                }
            }
        }
        ids
    }

    /// Trainable scalars in the current phase.
    pub fn trainable_census(&self) -> usize {
        let routes = self
            .routing_tensor()
            .map_or(0, RoutingTensor::trainable_count);
        self.inventory.trainable_count() + routes
    }

    /// Tasks the router can resolve.
    pub fn known_tasks(&self) -> Vec<String> {
        match &self.router {
            Router::Single => Vec::new(),
            Router::Fixed(a) => a.tasks.clone(),
            Router::Learned(rt) => rt.tasks().to_vec(),
        }
    }

    fn task_slot(&self, task: &str) -> Result<Option<usize>> {
        match &self.router {
            Router::Single => Ok(None),
            Router::Fixed(a) => a.index(task).map(Some),
            Router::Learned(rt) => rt.index(task).map(Some),
        }
    }

    /// Teacher-forced loss and logits for one single-task batch, together
    /// with the graph leaves of every trainable tensor that was used.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &Batch,
        task: &str,
        mode: RouteMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ForwardOutput, Vec<(ParamId, Var)>)> {
        let mut r = Resolver::new(self, task, mode, rng)?;
        let out = self.backbone.forward(g, batch, &mut r)?;
        Ok((out, r.params))
    }

    /// Greedy decode with deterministic routing.
    pub fn decode(&self, batch: &Batch, task: &str, max_len: usize) -> Result<Vec<Vec<usize>>> {
        let mut g = Graph::new();
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(0);
        let mut r = Resolver::new(self, task, RouteMode::Eval, &mut rng)?;
        self.backbone.greedy_decode(&mut g, batch, max_len, &mut r)
    }

    /// The task's eval-mode adapter materialized at every site.
    pub fn collapse(&self, task: &str) -> Result<SkillInventory> {
        let mut g = Graph::new();
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(0);
        let mut r = Resolver::new(self, task, RouteMode::Eval, &mut rng)?;
        let mut out = self.inventory.subset_average(&[0])?;
        for (i, site) in self.inventory.sites().iter().enumerate() {
            let resolved = r.adapter(&mut g, site)?;
            let skill = out.skill_mut(i, 0);
            match (resolved, skill) {
                (SiteAdapter::Lora { a, b, .. }, Skill::Lora { a: ta, b: tb }) => {
                    ta.data_mut().copy_from_slice(g.value(a));
                    tb.data_mut().copy_from_slice(g.value(b));
                }
                (SiteAdapter::Ia3 { l }, Skill::Ia3 { l: tl }) => {
                    tl.data_mut().copy_from_slice(g.value(l))
                }
                _ => unreachable!("resolver follows the inventory family"),
            }
        }
        out.set_trainable(false);
        Ok(out)
    }

    /// Sets trainability for `phase` according to the strategy.
    pub fn enter_phase(&mut self, phase: Phase) {
        let (skills, routes) = match phase {
            Phase::Pretrain => (true, true),
            Phase::Finetune => (
                self.strategy.finetune_skills,
                self.strategy.finetune_routing,
            ),
            Phase::Inference => (false, false),
        };
        self.inventory.set_trainable(skills);
        if let Router::Learned(rt) = &mut self.router {
            rt.set_trainable(routes);
        }
        self.phase = phase;
    }

    /// The model a test task starts fine-tuning from. `embeddings` holds one
    /// mean encoder embedding per training task, needed only for soups.
    pub fn for_test_task(
        &self,
        task: &str,
        support: &[Example],
        embeddings: Option<&[Vec<f64>]>,
    ) -> Result<Self> {
        let mut m = self.clone();
        match self.strategy.test_init {
            TestInit::Keep => {}
            TestInit::NewRoute => {
                let rt = match &self.router {
                    Router::Learned(rt) => rt,
                    _ => return routing("fresh routing rows need learned routing"),
                };
                let seed =
                    self.adapter.seed ^ TEST_ROUTE_SEED_SALT ^ crate::tasks::stable_hash(task);
                let fresh = RoutingTensor::with_tasks(
                    rt.num_skills(),
                    rt.heads(),
                    rt.num_groups(),
                    &[task.to_string()],
                    seed,
                )?;
                m.router = Router::Learned(fresh);
            }
            TestInit::Average => {
                m.inventory = self.inventory.average()?;
                m.router = Router::Single;
            }
            TestInit::Soup { k } => {
                let embeddings = match embeddings {
                    Some(e) => e,
                    None => return config("adapter soups need training-task embeddings"),
                };
                if k > embeddings.len() {
                    return config(format!(
                        "soup size {k} exceeds {} training tasks",
                        embeddings.len()
                    ));
                }
                if support.is_empty() {
                    return data("adapter soups need a nonempty support set");
                }
                let target = task_embedding(&self.backbone, support)?;
                let chosen = soup_members(&target, embeddings, k);
                m.inventory = self.inventory.subset_average(&chosen)?;
                m.router = Router::Single;
            }
        }
        m.enter_phase(Phase::Finetune);
        Ok(m)
    }

    pub fn router_json(&self) -> Result<String> {
        let file = match &self.router {
            Router::Single => RouterFile::Single,
            Router::Fixed(a) => RouterFile::Fixed {
                allocation: a.clone(),
            },
            Router::Learned(rt) => RouterFile::Learned {
                routing: serde_json::from_str(&rt.to_json()?)?,
            },
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn router_from_json(text: &str) -> Result<Router> {
        Ok(match serde_json::from_str::<RouterFile>(text)? {
            RouterFile::Single => Router::Single,
            RouterFile::Fixed { allocation } => Router::Fixed(allocation),
            RouterFile::Learned { routing } => {
                Router::Learned(RoutingTensor::from_json(&routing.to_string())?)
            }
        })
    }
}

/// Mean-pooled frozen encoder embedding over a task's inputs.
pub fn task_embedding(backbone: &FrozenBackbone, examples: &[Example]) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return data("cannot embed an empty example set");
    }
    let d = backbone.config().model_dim;
    let mut acc = vec![0.0; d];
    let mut weight = 0.0;
    for chunk in examples.chunks(64) {
        let batch = Batch::from_owned(chunk)?;
        let tokens = batch.src_keep.iter().filter(|k| **k).count() as f64;
        let e = backbone.mean_embedding(&batch)?;
        acc.iter_mut().zip(&e).for_each(|(a, x)| *a += tokens * x);
        weight += tokens;
    }
    acc.iter_mut().for_each(|a| *a /= weight);
    Ok(acc)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Indices of the `k` most similar embeddings; ties go to the lower index.
pub fn soup_members(target: &[f64], candidates: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = candidates
        .iter()
        .map(|c| cosine(target, c))
        .enumerate()
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut chosen: Vec<usize> = scored.into_iter().take(k).map(|(i, _)| i).collect();
    chosen.sort_unstable();
    chosen
}

/// Resolves per-site adapters for one task within one graph.
struct Resolver<'a> {
    model: &'a PolyModel,
    task: Option<usize>,
    mode: RouteMode,
    rng: &'a mut ChaCha8Rng,
    alphas: HashMap<usize, Var>,
    resolved: Vec<Option<SiteAdapter>>,
    params: Vec<(ParamId, Var)>,
}

impl<'a> Resolver<'a> {
    fn new(
        model: &'a PolyModel,
        task: &str,
        mode: RouteMode,
        rng: &'a mut ChaCha8Rng,
    ) -> Result<Self> {
        let task = model.task_slot(task)?;
        Ok(Self {
            model,
            task,
            mode,
            rng,
            alphas: HashMap::new(),
            resolved: vec![None; model.num_sites()],
            params: Vec::new(),
        })
    }

    fn leaf(&mut self, g: &mut Graph, id: ParamId) -> Result<Var> {
        let t = self.model.tensor(id);
        let v = g.tensor(t)?;
        if t.requires_grad {
            self.params.push((id, v));
        }
        Ok(v)
    }

    /// Mixing weights `[S×h]` for the site's group, one draw per group.
    fn alpha(&mut self, g: &mut Graph, site: usize) -> Result<Option<Var>> {
        let group = self.model.groups.group(site);
        if let Some(v) = self.alphas.get(&group) {
            return Ok(Some(*v));
        }
        let alpha = match (&self.model.router, self.task) {
            (Router::Single, _) => return Ok(None),
            (Router::Fixed(a), Some(t)) => {
                let w = a.weights(t);
                g.constant_from(&[w.len(), 1], w)?
            }
            (Router::Learned(_), Some(t)) => {
                let z = self.leaf(g, ParamId::Route { task: t, group })?;
                let zhat = routing::relax(g, z, self.mode, self.rng)?;
                routing::normalize(g, zhat)?
            }
            _ => unreachable!("task slot present for every routed model"),
        };
        self.alphas.insert(group, alpha);
        Ok(Some(alpha))
    }
}

impl AdapterSource for Resolver<'_> {
    fn adapter(&mut self, g: &mut Graph, site: &InjectionSite) -> Result<SiteAdapter> {
        let idx = match self.model.site_index.get(site) {
            Some(i) => *i,
            None => return Ok(SiteAdapter::Identity),
        };
        if let Some(r) = self.resolved[idx] {
            return Ok(r);
        }
        let inv = &self.model.inventory;
        let n_skills = inv.num_skills();
        let slots = inv.skills_at(idx)[0].tensors().len();
        let alpha = self.alpha(g, idx)?;
        let mut combined = Vec::with_capacity(slots);
        for slot in 0..slots {
            let items = (0..n_skills)
                .map(|skill| {
                    self.leaf(
                        g,
                        ParamId::Skill {
                            site: idx,
                            skill,
                            slot,
                        },
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            combined.push(match alpha {
                None => items[0],
                Some(a) => routing::combine_mhr(g, a, &items, self.model.heads())?,
            });
        }
        let r = match inv.family() {
            AdapterFamily::Lora => SiteAdapter::Lora {
                a: combined[0],
                b: combined[1],
                scale: inv.scale(),
            },
            AdapterFamily::Ia3 => SiteAdapter::Ia3 { l: combined[0] },
        };
        self.resolved[idx] = Some(r);
        Ok(r)
    }
}
