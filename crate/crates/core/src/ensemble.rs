//! Independently trained ensemble members and their on-disk manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormStats};
use crate::error::{Error, Result};
use crate::hetero::{train_map, HeteroNet, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Serial,
    #[default]
    Parallel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<HeteroNet>,
    seeds: Vec<u64>,
    config: TrainConfig,
    norm: Option<NormStats>,
}

/// Seed of member `index` for an ensemble seeded with `ensemble_seed`.
pub fn member_seed(ensemble_seed: u64, index: usize) -> u64 {
    ensemble_seed.wrapping_add(index as u64)
}

/// Train `size` members on the full dataset. `cfg.seed` is the ensemble seed.
pub fn train_ensemble(
    data: &Dataset,
    cfg: &TrainConfig,
    size: usize,
    exec: Execution,
) -> Result<Ensemble> {
    if size == 0 {
        return Err(Error::config("ensemble needs at least one member"));
    }
    cfg.validate(data.len())?;
    let seeds: Vec<u64> = (0..size).map(|l| member_seed(cfg.seed, l)).collect();
    let train_one = |(l, &seed): (usize, &u64)| {
        let member_cfg = TrainConfig {
            seed,
            ..cfg.clone()
        };
        train_map(data, &member_cfg).map_err(|e| e.with_member(l))
    };
    let members = match exec {
        Execution::Serial => seeds
            .iter()
            .enumerate()
            .map(train_one)
            .collect::<Result<Vec<_>>>()?,
        Execution::Parallel => seeds
            .par_iter()
            .enumerate()
            .map(train_one)
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(Ensemble {
        members,
        seeds,
        config: cfg.clone(),
        norm: None,
    })
}

impl Ensemble {
    /// Assemble an ensemble from already trained members.
    pub fn from_members(
        members: Vec<HeteroNet>,
        seeds: Vec<u64>,
        config: TrainConfig,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::config("ensemble needs at least one member"));
        }
        if seeds.len() != members.len() {
            return Err(Error::shape("one seed per member required"));
        }
        let first = &members[0];
        for m in &members[1..] {
            if m.p_x() != first.p_x() || m.p_y() != first.p_y() || m.p_feat() != first.p_feat() {
                return Err(Error::shape("members must share an architecture"));
            }
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("member seeds must be pairwise distinct"));
        }
        Ok(Self {
            members,
            seeds,
            config,
            norm: None,
        })
    }

    pub fn with_norm(mut self, norm: NormStats) -> Self {
        self.norm = Some(norm);
        self
    }

    pub fn members(&self) -> &[HeteroNet] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    pub fn p_x(&self) -> usize {
        self.members[0].p_x()
    }

    pub fn p_y(&self) -> usize {
        self.members[0].p_y()
    }

    pub fn p_feat(&self) -> usize {
        self.members[0].p_feat()
    }

    /// Members reordered by `order`, seeds following.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        for &i in order {
            if i >= self.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::shape("order is not a permutation of the members"));
            }
        }
        if order.len() != self.len() {
            return Err(Error::shape("order is not a permutation of the members"));
        }
        Ok(Self {
            members: order.iter().map(|&i| self.members[i].clone()).collect(),
            seeds: order.iter().map(|&i| self.seeds[i]).collect(),
            config: self.config.clone(),
            norm: self.norm.clone(),
        })
    }
}

/// Activations of the last hidden layer, the input of the mean head.
pub fn penultimate_features(member: &HeteroNet, x: &[f64]) -> Result<Vec<f64>> {
    member.features(x)
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    members: Vec<MemberEntry>,
    train_config: TrainConfig,
    norm: Option<NormStats>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MemberEntry {
    file: String,
    seed: u64,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

impl Ensemble {
    /// Write `manifest.json` plus one text parameter file per member into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for (l, (member, &seed)) in self.members.iter().zip(&self.seeds).enumerate() {
            let file = format!("member_{l:03}.txt");
            write_file(&dir.join(&file), &member.to_text())?;
            entries.push(MemberEntry { file, seed });
        }
        let manifest = Manifest {
            format: "debayes-ensemble".into(),
            version: 1,
            members: entries,
            train_config: self.config.clone(),
            norm: self.norm.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        let path = dir.join(MANIFEST_FILE);
        write_file(&path, &json)?;
        Ok(path)
    }

    /// Load an ensemble from a directory holding `manifest.json`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if manifest.format != "debayes-ensemble" || manifest.version != 1 {
            return Err(Error::Format(format!(
                "{}: unsupported manifest format",
                path.display()
            )));
        }
        let mut members = Vec::with_capacity(manifest.members.len());
        let mut seeds = Vec::with_capacity(manifest.members.len());
        for entry in &manifest.members {
            let p = dir.join(&entry.file);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            members.push(
                HeteroNet::from_text(&text)
                    .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?,
            );
            seeds.push(entry.seed);
        }
        let mut ens = Self::from_members(members, seeds, manifest.train_config)?;
        ens.norm = manifest.norm;
        Ok(ens)
    }
}
