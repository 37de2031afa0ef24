use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decor_embedding::DecorConfig;
use crate::error::{Error, Result};
use crate::recommender::RecommenderConfig;
use crate::semantic_indexer::RqVaeConfig;

/// Input files of a pipeline run. Commands fill these in as they consume
/// them so later stages can find the same data from a checkpoint alone.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub items: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub sids: Option<PathBuf>,
    pub tokenizer_checkpoint: Option<PathBuf>,
}

/// Every tunable of the pipeline in one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub tokenizer: RqVaeConfig,
    pub recommender: RecommenderConfig,
    pub decor: DecorConfig,
    pub data: DataPaths,
    /// Copied into the tokenizer and recommender sections.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let seed = 2025;
        let mut c = PipelineConfig {
            tokenizer: RqVaeConfig::default(),
            recommender: RecommenderConfig::default(),
            decor: DecorConfig::default(),
            data: DataPaths::default(),
            seed,
        };
        c.propagate_seed();
        c
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.propagate_seed();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.propagate_seed();
    }

    fn propagate_seed(&mut self) {
        self.tokenizer.seed = self.seed;
        self.recommender.seed = self.seed;
    }

    /// Applies `section.key=value`; `value` is parsed as JSON, falling back
    /// to a plain string. The key must already exist.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut node = &mut doc;
        for key in path.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?;
        }
        *node = value;
        let seed_changed = path == "seed";
        let mut next: PipelineConfig =
            serde_json::from_value(doc).map_err(|e| Error::Config(format!("{path}: {e}")))?;
        if seed_changed {
            next.propagate_seed();
        }
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.recommender.validate()?;
        self.decor.validate()?;
        if self.tokenizer.latent_dim != self.recommender.d_model {
            return Err(Error::Config(format!(
                "tokenizer.latent_dim {} must equal recommender.d_model {}",
                self.tokenizer.latent_dim, self.recommender.d_model
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_rejects_unknown_keys() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(matches!(
            PipelineConfig::from_json(r#"{"decor": {"alpah": 0.1}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_json(r#"{"extra": 1}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dotted_overrides() {
        let mut c = PipelineConfig::default();
        c.apply_override("decor.alpha=0.25").unwrap();
        c.apply_override("recommender.val_users=500").unwrap();
        c.apply_override("data.items=some/items.jsonl").unwrap();
        c.apply_override("seed=7").unwrap();
        assert_eq!(c.decor.alpha, 0.25);
        assert_eq!(c.recommender.val_users, Some(500));
        assert_eq!(c.data.items, Some(PathBuf::from("some/items.jsonl")));
        assert_eq!((c.tokenizer.seed, c.recommender.seed), (7, 7));
        assert!(c.apply_override("decor.nope=1").is_err());
        assert!(c.apply_override("decor.alpha").is_err());
        assert!(c.apply_override("decor.alpha=\"x\"").is_err());
    }

    #[test]
    fn width_mismatch_is_invalid() {
        let mut c = PipelineConfig::default();
        c.recommender.d_model = 64;
        assert!(c.validate().is_err());
    }
}
