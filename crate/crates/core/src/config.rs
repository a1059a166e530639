//! Run configuration: one TOML document with `seed`, `space`, `train`,
//! `distill`, `search` and `paths`. Unknown keys are rejected everywhere.
//!
//! Every section may be omitted; the defaults describe the small desk-scale
//! setup (`SearchSpace::desk_small`, 400 steps of batch 4 over 64-frame crops,
//! `p = 0.65`, span 10, top-8 targets, 1000 search candidates).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distillation::DistillConfig;
use crate::error::{config_err, Result};
use crate::search::SearchBudget;
use crate::supernet::SearchSpace;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default = "d_train")]
    pub train_data: PathBuf,
    #[serde(default = "d_val")]
    pub val_data: PathBuf,
    #[serde(default = "d_teacher")]
    pub teacher: PathBuf,
}

fn d_train() -> PathBuf {
    "runs/train.ofad".into()
}
fn d_val() -> PathBuf {
    "runs/val.ofad".into()
}
fn d_teacher() -> PathBuf {
    "runs/teacher.ofat".into()
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            train_data: d_train(),
            val_data: d_val(),
            teacher: d_teacher(),
        }
    }
}

/// `search` section. `max_params = 0` means "not set"; the search command then
/// needs `--max-params`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    #[serde(default)]
    pub max_params: u64,
    #[serde(default = "d_candidates")]
    pub n_candidates: usize,
    #[serde(default = "d_eval")]
    pub eval_batches: usize,
    #[serde(default)]
    pub includes_frontend: bool,
    #[serde(default = "d_true")]
    pub includes_head: bool,
}

fn d_candidates() -> usize {
    1000
}
fn d_eval() -> usize {
    4
}
fn d_true() -> bool {
    true
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            max_params: 0,
            n_candidates: d_candidates(),
            eval_batches: d_eval(),
            includes_frontend: false,
            includes_head: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "SearchSpace::desk_small")]
    pub space: SearchSpace,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            space: SearchSpace::desk_small(),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            search: SearchSection::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse and validate. Errors name the offending line or field.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            crate::Error::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.space
            .validate()
            .map_err(|e| config_err(format!("[space] {e}")))?;
        self.train
            .validate()
            .map_err(|e| config_err(format!("[train] {e}")))?;
        self.distill
            .validate()
            .map_err(|e| config_err(format!("[distill] {e}")))?;
        if self.distill.teacher.embed_dim != self.space.teacher_dim {
            return Err(config_err(format!(
                "[distill.teacher] embed_dim {} must equal space.teacher_dim {}",
                self.distill.teacher.embed_dim, self.space.teacher_dim
            )));
        }
        if self.search.n_candidates == 0 || self.search.eval_batches == 0 {
            return Err(config_err(
                "[search] n_candidates and eval_batches must be positive",
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML echo, hex encoded.
    pub fn digest(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }

    /// Training settings with the run seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Search budget with the run seed, `max_params` overridden when given.
    pub fn search_budget(&self, max_params: Option<u64>) -> Result<SearchBudget> {
        let max_params = max_params.unwrap_or(self.search.max_params);
        if max_params == 0 {
            return Err(config_err(
                "[search] max_params is not set; pass --max-params or set it in the config",
            ));
        }
        Ok(SearchBudget {
            max_params,
            n_candidates: self.search.n_candidates,
            eval_batches: self.search.eval_batches,
            seed: self.seed,
            includes_frontend: self.search.includes_frontend,
            includes_head: self.search.includes_head,
        })
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Provenance written next to artifacts whose format has no metadata slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: String,
    pub config_digest: String,
    pub seed: u64,
    pub file_digest: String,
}

impl Sidecar {
    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut s = artifact.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    pub fn write(artifact: &Path, kind: &str, cfg: &RunConfig) -> Result<Sidecar> {
        let car = Sidecar {
            kind: kind.into(),
            config_digest: cfg.digest(),
            seed: cfg.seed,
            file_digest: hex_digest(&fs::read(artifact)?),
        };
        let text = serde_json::to_string_pretty(&car).expect("sidecar serializes");
        fs::write(Self::path_for(artifact), text + "\n")?;
        Ok(car)
    }
}
