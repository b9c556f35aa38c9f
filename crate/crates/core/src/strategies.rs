//! The method zoo as declarative recipes, plus the per-layer parameter
//! accountant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Shared,
    PrivateMu,
    RandomMu,
    Poly,
    PolyMu,
    PolyS,
    MhrMu,
    PolyZ,
    PolySZ,
    AdapterSoup,
    /// Accounted for but never trained.
    FullFt,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Shared,
        Method::PrivateMu,
        Method::RandomMu,
        Method::Poly,
        Method::PolyMu,
        Method::PolyS,
        Method::MhrMu,
        Method::PolyZ,
        Method::PolySZ,
        Method::AdapterSoup,
        Method::FullFt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Shared => "shared",
            Method::PrivateMu => "private-mu",
            Method::RandomMu => "random-mu",
            Method::Poly => "poly",
            Method::PolyMu => "poly-mu",
            Method::PolyS => "poly-s",
            Method::MhrMu => "mhr-mu",
            Method::PolyZ => "poly-z",
            Method::PolySZ => "poly-s-z",
            Method::AdapterSoup => "adapter-soup",
            Method::FullFt => "full-ft",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL
            .iter()
            .map(|m| m.name())
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Pre-training uses multi-head routing.
    pub fn multi_head(self) -> bool {
        matches!(self, Method::PolyS | Method::MhrMu | Method::PolySZ)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s
            .trim()
            .to_ascii_lowercase()
            .replace('_', "-")
            .replace('μ', "mu");
        match Self::ALL.iter().find(|m| m.name() == key) {
            Some(m) => Ok(*m),
            None => config(format!(
                "unknown method {s:?}; valid: {}",
                Self::valid_names()
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Finetune,
    Inference,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Pretrain, Phase::Finetune, Phase::Inference];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
            Phase::Inference => "inference",
        }
    }
}

/// Dimensions entering the per-layer counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d: usize,
    pub r: usize,
    pub skills: usize,
    pub tasks: usize,
    pub heads: usize,
}

/// Trainable parameters per adapted linear layer.
pub fn count_parameters(method: Method, dims: Dims, phase: Phase) -> Result<usize> {
    let Dims {
        d,
        r,
        skills: s,
        tasks: t,
        heads: h,
    } = dims;
    if d == 0 || r == 0 || s == 0 || t == 0 || h == 0 {
        return config("all dimensions must be positive");
    }
    let lora = 2 * d * r;
    let n = match (method, phase) {
        (Method::FullFt, _) => d * d,
        (_, Phase::Inference) => lora,
        (Method::Shared, _) => lora,
        (Method::PrivateMu | Method::AdapterSoup, Phase::Pretrain) => lora * t,
        (Method::RandomMu, Phase::Pretrain) => lora * s,
        (Method::Poly | Method::PolyMu | Method::PolyZ, Phase::Pretrain) => lora * s + t * s,
        (Method::PolyS | Method::MhrMu | Method::PolySZ, Phase::Pretrain) => lora * s + t * s * h,
        (Method::Poly, Phase::Finetune) => lora * s + s,
        (Method::PolyS, Phase::Finetune) => lora * s + s * h,
        (Method::PolyZ, Phase::Finetune) => s,
        (Method::PolySZ, Phase::Finetune) => s * h,
        (
            Method::PolyMu
            | Method::MhrMu
            | Method::PrivateMu
            | Method::RandomMu
            | Method::AdapterSoup,
            Phase::Finetune,
        ) => lora,
    };
    Ok(n)
}

/// Routing share of the per-layer count.
pub fn routing_parameters(method: Method, dims: Dims, phase: Phase) -> Result<usize> {
    count_parameters(method, dims, phase)?;
    let Dims {
        skills: s,
        tasks: t,
        heads: h,
        ..
    } = dims;
    let h = if method.multi_head() { h } else { 1 };
    Ok(match (method, phase) {
        (
            Method::Poly
            | Method::PolyMu
            | Method::PolyZ
            | Method::PolyS
            | Method::MhrMu
            | Method::PolySZ,
            Phase::Pretrain,
        ) => t * s * h,
        (Method::Poly | Method::PolyZ | Method::PolyS | Method::PolySZ, Phase::Finetune) => s * h,
        _ => 0,
    })
}

/// Whole-model count when `sites` adapted layers share `groups` routing
/// tensors.
pub fn model_parameters(
    method: Method,
    dims: Dims,
    phase: Phase,
    sites: usize,
    groups: usize,
) -> Result<usize> {
    let total = count_parameters(method, dims, phase)?;
    let routing = routing_parameters(method, dims, phase)?;
    Ok((total - routing) * sites + routing * groups)
}

/// How per-task adapters are formed during pre-training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Combination {
    /// One skill used by every task.
    Single,
    /// Learned logits with `heads` routing heads.
    Learned { heads: usize },
    /// Frozen random allocation with half the skills per task.
    RandomFixed,
    /// Frozen identity allocation: one private skill per task.
    Private,
}

/// How the test-task adapter starts fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestInit {
    /// Keep the pre-trained single adapter.
    Keep,
    /// Register a fresh routing row over the full inventory.
    NewRoute,
    /// Collapse the inventory to its per-site mean.
    Average,
    /// Average the adapters of the `k` most similar training tasks.
    Soup { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyDescriptor {
    pub method: Method,
    pub num_skills: usize,
    pub heads: usize,
    pub combination: Combination,
    pub test_init: TestInit,
    pub finetune_skills: bool,
    pub finetune_routing: bool,
}

/// Overrides a strategy is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrategyDims {
    pub skills: usize,
    pub heads: usize,
    pub train_tasks: usize,
    pub soup_k: usize,
}

pub fn build_strategy(method: Method, dims: StrategyDims) -> Result<StrategyDescriptor> {
    let StrategyDims {
        skills,
        heads,
        train_tasks,
        soup_k,
    } = dims;
    if skills == 0 || heads == 0 || train_tasks == 0 {
        return config("skills, heads and train task count must be positive");
    }
    let heads = if method.multi_head() { heads } else { 1 };
    let (num_skills, combination, test_init, finetune_skills, finetune_routing) = match method {
        Method::Shared => (1, Combination::Single, TestInit::Keep, true, false),
        Method::PrivateMu => {
            if skills != train_tasks {
                return config(format!(
                    "private-mu needs one skill per training task ({skills} skills, {train_tasks} tasks)"
                ));
            }
            (skills, Combination::Private, TestInit::Average, true, false)
        }
        Method::AdapterSoup => {
            if soup_k == 0 || soup_k > train_tasks {
                return config(format!("soup size {soup_k} must be in 1..={train_tasks}"));
            }
            (
                train_tasks,
                Combination::Private,
                TestInit::Soup { k: soup_k },
                true,
                false,
            )
        }
        Method::RandomMu => (
            skills,
            Combination::RandomFixed,
            TestInit::Average,
            true,
            false,
        ),
        Method::Poly | Method::PolyS => (
            skills,
            Combination::Learned { heads },
            TestInit::NewRoute,
            true,
            true,
        ),
        Method::PolyMu | Method::MhrMu => (
            skills,
            Combination::Learned { heads },
            TestInit::Average,
            true,
            false,
        ),
        Method::PolyZ | Method::PolySZ => (
            skills,
            Combination::Learned { heads },
            TestInit::NewRoute,
            false,
            true,
        ),
        Method::FullFt => return config("full-ft is accounted for but not trainable"),
    };
    Ok(StrategyDescriptor {
        method,
        num_skills,
        heads,
        combination,
        test_init,
        finetune_skills,
        finetune_routing,
    })
}
