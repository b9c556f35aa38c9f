//! Skill inventories: per-site lists of LoRA pairs or IA3 scaling vectors.

use polyadapt_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterFamily, InjectionSite};
use crate::error::{config, data, Result};

/// One adapter parameter set at one site.
#[derive(Debug, Clone, PartialEq)]
pub enum Skill {
    /// `A, B ∈ ℝ^{d×r}`; contributes `(1/r)·A Bᵀ x`.
    Lora { a: Tensor, b: Tensor },
    /// Elementwise scale over the wrapped activation.
    Ia3 { l: Tensor },
}

impl Skill {
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Skill::Lora { a, b } => vec![a, b],
            Skill::Ia3 { l } => vec![l],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Skill::Lora { a, b } => vec![a, b],
            Skill::Ia3 { l } => vec![l],
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    fn mean(items: &[&Skill]) -> Result<Skill> {
        let slots = items[0].tensors().len();
        let mut out = Vec::with_capacity(slots);
        for slot in 0..slots {
            let parts: Vec<&Tensor> = items.iter().map(|s| s.tensors()[slot]).collect();
            out.push(Tensor::mean_of(&parts)?);
        }
        Ok(match items[0] {
            Skill::Lora { .. } => {
                let b = out.pop().expect("two slots");
                let a = out.pop().expect("two slots");
                Skill::Lora { a, b }
            }
            Skill::Ia3 { .. } => Skill::Ia3 {
                l: out.pop().expect("one slot"),
            },
        })
    }
}

/// Serializable description of an inventory's layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InventoryManifest {
    pub family: AdapterFamily,
    pub rank: usize,
    pub num_skills: usize,
    pub sites: Vec<InjectionSite>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillInventory {
    family: AdapterFamily,
    rank: usize,
    sites: Vec<InjectionSite>,
    /// `skills[site][skill]`
    skills: Vec<Vec<Skill>>,
}

fn check_site(family: AdapterFamily, site: &InjectionSite) -> Result<()> {
    if !family.kinds().contains(&site.kind) {
        return config(format!(
            "{family:?} adapters cannot attach to {:?} sites",
            site.kind
        ));
    }
    Ok(())
}

impl SkillInventory {
    /// LoRA: `A ~ N(0, 1/√r)`, `B = 0`. IA3: all ones.
    pub fn init(
        family: AdapterFamily,
        rank: usize,
        sites: &[InjectionSite],
        num_skills: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_skills == 0 {
            return config("an inventory needs at least one skill");
        }
        if family == AdapterFamily::Lora && rank == 0 {
            return config("LoRA rank must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (rank.max(1) as f64).sqrt();
        let mut skills = Vec::with_capacity(sites.len());
        for site in sites {
            check_site(family, site)?;
            let at_site = (0..num_skills)
                .map(|_| match family {
                    AdapterFamily::Lora => Skill::Lora {
                        a: Tensor::randn(&[site.dim, rank], std, &mut rng).with_grad(true),
                        b: Tensor::zeros(&[site.dim, rank]).with_grad(true),
                    },
                    AdapterFamily::Ia3 => Skill::Ia3 {
                        l: Tensor::ones(&[site.dim]).with_grad(true),
                    },
                })
                .collect();
            skills.push(at_site);
        }
        Ok(Self {
            family,
            rank: if family == AdapterFamily::Lora {
                rank
            } else {
                0
            },
            sites: sites.to_vec(),
            skills,
        })
    }

    pub fn family(&self) -> AdapterFamily {
        self.family
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// LoRA scaling `1/r`.
    pub fn scale(&self) -> f64 {
        1.0 / self.rank.max(1) as f64
    }

    pub fn num_skills(&self) -> usize {
        self.skills.first().map_or(0, Vec::len)
    }

    pub fn sites(&self) -> &[InjectionSite] {
        &self.sites
    }

    pub fn skills_at(&self, site: usize) -> &[Skill] {
        &self.skills[site]
    }

    pub fn skill_mut(&mut self, site: usize, skill: usize) -> &mut Skill {
        &mut self.skills[site][skill]
    }

    /// Per-site mean over all skills.
    pub fn average(&self) -> Result<Self> {
        let all: Vec<usize> = (0..self.num_skills()).collect();
        self.subset_average(&all)
    }

    /// Per-site mean over the chosen skills; the result has one skill.
    pub fn subset_average(&self, chosen: &[usize]) -> Result<Self> {
        if chosen.is_empty() {
            return data("cannot average an empty skill subset");
        }
        if let Some(bad) = chosen.iter().find(|&&i| i >= self.num_skills()) {
            return data(format!(
                "skill {bad} out of range for {} skills",
                self.num_skills()
            ));
        }
        let mut skills = Vec::with_capacity(self.sites.len());
        for at_site in &self.skills {
            let items: Vec<&Skill> = chosen.iter().map(|&i| &at_site[i]).collect();
            let mut mean = Skill::mean(&items)?;
            for t in mean.tensors_mut() {
                t.requires_grad = at_site[0].tensors()[0].requires_grad;
            }
            skills.push(vec![mean]);
        }
        Ok(Self {
            family: self.family,
            rank: self.rank,
            sites: self.sites.clone(),
            skills,
        })
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for t in self.tensors_mut() {
            t.requires_grad = trainable;
            t.grad = None;
        }
    }

    /// Tensors in canonical order: site, then skill, then `A, B` or `l`.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.skills.iter().flatten().flat_map(|s| s.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.skills
            .iter_mut()
            .flatten()
            .flat_map(|s| s.tensors_mut())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors()
            .filter(|t| t.requires_grad)
            .map(Tensor::numel)
            .sum()
    }

    pub fn manifest(&self) -> InventoryManifest {
        InventoryManifest {
            family: self.family,
            rank: self.rank,
            num_skills: self.num_skills(),
            sites: self.sites.clone(),
        }
    }

    /// Flat little-endian `f64` values in canonical order.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tensors()
            .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub fn from_parts(manifest: &InventoryManifest, bytes: &[u8]) -> Result<Self> {
        let mut inv = Self::init(
            manifest.family,
            manifest.rank,
            &manifest.sites,
            manifest.num_skills,
            0,
        )?;
        let expected = inv.parameter_count() * 8;
        if bytes.len() != expected {
            return data(format!(
                "inventory checkpoint has {} bytes, expected {expected}",
                bytes.len()
            ));
        }
        let mut chunks = bytes.chunks_exact(8);
        for t in inv.tensors_mut() {
            for v in t.data_mut() {
                *v = f64::from_le_bytes(
                    chunks
                        .next()
                        .expect("length checked")
                        .try_into()
                        .expect("8 bytes"),
                );
            }
        }
        Ok(inv)
    }

    /// Whether every site holds the kinds its family allows.
    pub fn is_consistent(&self) -> bool {
        self.sites
            .iter()
            .all(|s| check_site(self.family, s).is_ok())
            && self
                .skills
                .iter()
                .all(|at| !at.is_empty() && at.iter().all(|s| s.numel() == at[0].numel()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BlockKind, SiteKind};

    fn site(kind: SiteKind, dim: usize) -> InjectionSite {
        InjectionSite {
            block: BlockKind::EncoderSelfAttention,
            layer: 0,
            kind,
            dim,
        }
    }

    #[test]
    fn same_seed_inits_are_bitwise_equal() {
        let sites = [site(SiteKind::Q, 8), site(SiteKind::V, 8)];
        let a = SkillInventory::init(AdapterFamily::Lora, 2, &sites, 4, 3).unwrap();
        let b = SkillInventory::init(AdapterFamily::Lora, 2, &sites, 4, 3).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert!(a.is_consistent());
        assert_eq!(a.parameter_count(), 2 * 4 * 2 * 8 * 2);
    }

    #[test]
    fn mismatched_site_and_family_is_config_error() {
        assert!(
            SkillInventory::init(AdapterFamily::Lora, 2, &[site(SiteKind::Ff, 32)], 1, 0).is_err()
        );
        assert!(
            SkillInventory::init(AdapterFamily::Ia3, 0, &[site(SiteKind::Q, 8)], 1, 0).is_err()
        );
        assert!(
            SkillInventory::init(AdapterFamily::Lora, 2, &[site(SiteKind::Q, 8)], 0, 0).is_err()
        );
    }

    #[test]
    fn two_scalar_skills_average_to_their_midpoint() {
        let mut inv =
            SkillInventory::init(AdapterFamily::Lora, 1, &[site(SiteKind::Q, 1)], 2, 0).unwrap();
        if let Skill::Lora { a, .. } = inv.skill_mut(0, 0) {
            a.data_mut()[0] = 2.0;
        }
        if let Skill::Lora { a, .. } = inv.skill_mut(0, 1) {
            a.data_mut()[0] = 4.0;
        }
        let avg = inv.average().unwrap();
        assert_eq!(avg.num_skills(), 1);
        match &avg.skills_at(0)[0] {
            Skill::Lora { a, .. } => assert_eq!(a.data(), &[3.0]),
            Skill::Ia3 { .. } => unreachable!(),
        }
    }

    #[test]
    fn averaging_is_idempotent() {
        let inv =
            SkillInventory::init(AdapterFamily::Lora, 2, &[site(SiteKind::K, 4)], 3, 9).unwrap();
        let once = inv.average().unwrap();
        assert_eq!(once.average().unwrap(), once);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let inv =
            SkillInventory::init(AdapterFamily::Ia3, 0, &[site(SiteKind::Ff, 16)], 2, 0).unwrap();
        let back = SkillInventory::from_parts(&inv.manifest(), &inv.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), inv.to_bytes());
        assert!(SkillInventory::from_parts(&inv.manifest(), &[1, 2, 3]).is_err());
    }
}
