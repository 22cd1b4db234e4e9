//! Merged run configuration: model + training + corpus + seed, parsed from
//! a JSON file with CLI-level overrides applied afterwards.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{BlockKind, FusionKind, ModelConfig};
use crate::synth::CorpusConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Tiny,
    Paper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
}

impl RunConfig {
    pub fn defaults(profile: Profile, seed: u64) -> Self {
        let (model, train) = match profile {
            Profile::Tiny => (
                ModelConfig::tiny(BlockKind::Conformer, FusionKind::Flcma),
                TrainConfig::tiny(seed),
            ),
            Profile::Paper => (
                ModelConfig::paper(BlockKind::Conformer, FusionKind::Flcma),
                TrainConfig::paper(seed),
            ),
        };
        let mut corpus = CorpusConfig::tiny(seed);
        corpus.video_size = model.video_size;
        Self {
            profile,
            seed,
            model,
            train,
            corpus,
        }
    }

    /// Parse from a JSON file; missing fields take profile defaults.
    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Partial {
            profile: Option<Profile>,
            seed: Option<u64>,
            model: Option<serde_json::Value>,
            train: Option<serde_json::Value>,
            corpus: Option<serde_json::Value>,
        }
        if !path.exists() {
            return Err(crate::error::Error::MissingInput(path.to_path_buf()));
        }
        let partial: Partial = serde_json::from_slice(&std::fs::read(path)?)?;
        let profile = partial.profile.unwrap_or(Profile::Tiny);
        let seed = partial.seed.unwrap_or(0);
        let mut cfg = Self::defaults(profile, seed);
        // section-level overlay: present sections replace fields they name
        if let Some(v) = partial.model {
            cfg.model = merge(&cfg.model, v)?;
        }
        if let Some(v) = partial.train {
            cfg.train = merge(&cfg.train, v)?;
        }
        if let Some(v) = partial.corpus {
            cfg.corpus = merge(&cfg.corpus, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply CLI-level overrides, then re-validate.
    pub fn with_overrides(
        mut self,
        seed: Option<u64>,
        profile: Option<Profile>,
    ) -> Result<Self> {
        if let Some(p) = profile {
            if p != self.profile {
                let seed = seed.unwrap_or(self.seed);
                self = Self::defaults(p, seed);
            }
        }
        if let Some(s) = seed {
            self.seed = s;
            self.train.seed = s;
            self.corpus.seed = s;
        }
        self.validate()?;
        Ok(self)
    }

    /// Re-check every cross-field invariant of the constituent configs.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        if self.corpus.video_size != self.model.video_size {
            return Err(crate::error::Error::config(
                "corpus.video_size",
                format!(
                    "must match model.video_size ({} vs {})",
                    self.corpus.video_size, self.model.video_size
                ),
            ));
        }
        Ok(())
    }
}

/// Overlay the fields named in `patch` onto a serializable base struct.
fn merge<T: Serialize + for<'de> Deserialize<'de>>(base: &T, patch: serde_json::Value) -> Result<T> {
    let mut value = serde_json::to_value(base)?;
    if let (serde_json::Value::Object(base_map), serde_json::Value::Object(patch_map)) =
        (&mut value, patch)
    {
        for (k, v) in patch_map {
            base_map.insert(k, v);
        }
    }
    Ok(serde_json::from_value(value)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::defaults(Profile::Tiny, 1).validate().unwrap();
        RunConfig::defaults(Profile::Paper, 1).validate().unwrap();
    }

    #[test]
    fn partial_file_overlays_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"seed": 9, "train": {"max_steps": 17}, "corpus": {"n_dev": 24}}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.max_steps, 17);
        assert_eq!(cfg.corpus.n_dev, 24);
        // untouched fields keep defaults
        assert_eq!(cfg.train.batch_size, 16);
    }

    #[test]
    fn invalid_field_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"corpus": {"pos_fraction": 1.5}}"#).unwrap();
        match RunConfig::load(&path) {
            Err(crate::error::Error::Config { field, .. }) => {
                assert_eq!(field, "corpus.pos_fraction");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn override_seed_propagates() {
        let cfg = RunConfig::defaults(Profile::Tiny, 1)
            .with_overrides(Some(77), None)
            .unwrap();
        assert_eq!(cfg.seed, 77);
        assert_eq!(cfg.train.seed, 77);
        assert_eq!(cfg.corpus.seed, 77);
    }
}
