//! Run configuration, read from JSON.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "seed": 0,
//!   "model": { "num_queries": 20, "width": 64, "...": "see ModelConfig" },
//!   "loss": { "lambda_cls": 2.0, "lambda_taxo": 0.5, "...": "see LossConfig" },
//!   "data": { "corpus": "corpus", "ratios": { "synth_a": 1.0 } },
//!   "optim": { "lr": 0.001, "iterations": 2000, "...": "see OptimConfig" }
//! }
//! ```
//!
//! Every section except `schema_version` may be omitted and falls back to
//! its defaults. The environment variable `TAXOVIS_SEED` replaces `seed`.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::matching::CostWeights;
use crate::model::ModelConfig;
use crate::taxonomy::DatasetId;

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "TAXOVIS_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaxoMatching {
    /// One assignment from the final heads serves every term.
    #[default]
    Shared,
    /// The taxonomy term gets its own assignment from the taxonomy logits.
    Separate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_taxo: f64,
    /// Mask BCE weight in the matching cost.
    pub lambda_bce: f64,
    /// Mask Dice weight in the matching cost.
    pub lambda_dice: f64,
    pub no_object_weight: f64,
    /// Auxiliary presence loss on the taxonomy scores; 0 disables it.
    pub lambda_score: f64,
    pub taxo_matching: TaxoMatching,
    /// Restrict each clip's softmax to its dataset's labels.
    pub dataset_masking: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_taxo: 0.5,
            lambda_bce: 5.0,
            lambda_dice: 5.0,
            no_object_weight: 0.1,
            lambda_score: 1.0,
            taxo_matching: TaxoMatching::Shared,
            dataset_masking: true,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            cls: self.lambda_cls,
            taxo: self.lambda_taxo,
            no_object: self.no_object_weight,
            score: self.lambda_score,
        }
    }

    pub fn cost(&self) -> CostWeights {
        CostWeights {
            class: self.lambda_cls,
            bce: self.lambda_bce,
            dice: self.lambda_dice,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus directory, relative to the config file.
    pub corpus: PathBuf,
    /// Sampling ratio per training dataset.
    pub ratios: IndexMap<DatasetId, f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            ratios: [("synth_a", 1.0), ("synth_c", 1.0), ("synth_b", 0.75)]
                .into_iter()
                .map(|(d, r)| (DatasetId::new(d), r))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// Fraction of training after which the step size is multiplied by
    /// `lr_drop_factor`; 1 keeps it constant.
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Held-out evaluation period in iterations; 0 disables it.
    pub eval_every: usize,
    /// Parameters whose names start with any of these stay fixed.
    pub frozen_prefixes: Vec<String>,
}

impl OptimConfig {
    /// Step size at iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        if (it as f64) < self.lr_drop_at * self.iterations as f64 {
            self.lr
        } else {
            self.lr * self.lr_drop_factor
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            iterations: 2000,
            lr_drop_at: 0.8,
            lr_drop_factor: 0.1,
            grad_clip: 1.0,
            eval_every: 0,
            frozen_prefixes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file, resolves the corpus path against the file's
    /// directory and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::from_json(&std::fs::read_to_string(path)?)?;
        if c.data.corpus.is_relative() {
            if let Some(dir) = path.parent() {
                c.data.corpus = dir.join(&c.data.corpus);
            }
        }
        c.apply_env()?;
        Ok(c)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v.trim().parse().map_err(|_| Error::InvalidArgument {
                arg: SEED_ENV,
                reason: format!("`{v}` is not an unsigned integer"),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |arg: &'static str, reason: String| Error::InvalidArgument { arg, reason };
        if self.schema_version != SCHEMA_VERSION {
            return Err(bad(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        let l = &self.loss;
        for (name, v) in [
            ("lambda_cls", l.lambda_cls),
            ("lambda_taxo", l.lambda_taxo),
            ("lambda_bce", l.lambda_bce),
            ("lambda_dice", l.lambda_dice),
            ("no_object_weight", l.no_object_weight),
            ("lambda_score", l.lambda_score),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad("loss", format!("{name} = {v}")));
            }
        }
        if self.data.ratios.values().any(|&r| !(r.is_finite() && r >= 0.0))
            || !self.data.ratios.values().any(|&r| r > 0.0)
        {
            return Err(bad("data.ratios", "need nonnegative ratios, one positive".into()));
        }
        if !(self.optim.lr > 0.0) {
            return Err(bad("optim.lr", format!("{}", self.optim.lr)));
        }
        let o = &self.optim;
        if !(0.0..=1.0).contains(&o.lr_drop_at) || !(o.lr_drop_factor > 0.0) {
            return Err(bad(
                "optim.lr_drop_at",
                format!("drop at {} by {}", o.lr_drop_at, o.lr_drop_factor),
            ));
        }
        let m = &self.model;
        if m.n_t == 0 || m.num_queries == 0 || m.layers == 0 {
            return Err(bad("model", "n_t, num_queries and layers must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Training datasets (positive ratio), in ratio order.
    pub fn train_datasets(&self) -> Vec<DatasetId> {
        self.data
            .ratios
            .iter()
            .filter(|(_, &r)| r > 0.0)
            .map(|(d, _)| d.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::from_json(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.model.n_t, c.model.layers), (10, 9));
        assert_eq!((c.loss.lambda_cls, c.loss.lambda_taxo), (2.0, 0.5));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_json(r#"{"schema_version": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{}"#).is_err());
        assert!(RunConfig::from_json(r#"{"schema_version": 1, "loss": {"lambda_taxo": -1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"schema_version": 1, "bogus": 3}"#).is_err());
        assert!(RunConfig::from_json(
            r#"{"schema_version": 1, "data": {"ratios": {"a": 0}}}"#
        )
        .is_err());
    }

    #[test]
    fn seed_override() {
        let mut c = RunConfig::default();
        c.apply_seed_override(Some("42")).unwrap();
        assert_eq!(c.seed, 42);
        assert!(c.apply_seed_override(Some("x")).is_err());
        let h = c.hash();
        c.apply_seed_override(None).unwrap();
        assert_eq!(h, c.hash());
    }
}
