//! Resolved run configuration: profile defaults, overlaid by an optional
//! TOML file, overlaid by command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{GeneratorSpec, SplitRatios};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Full,
}

/// Default BPE budget; the trained vocabulary may come out smaller.
pub const DEFAULT_VOCAB_BUDGET: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub vocab_size: usize,
    pub generator: GeneratorSpec,
    pub split: SplitRatios,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (model, train) = match profile {
            Profile::Desk => (ModelConfig::desk(DEFAULT_VOCAB_BUDGET), TrainConfig::desk()),
            Profile::Full => (ModelConfig::full(DEFAULT_VOCAB_BUDGET), TrainConfig::full()),
        };
        let generator = GeneratorSpec {
            max_scope: model.q,
            ..GeneratorSpec::default()
        };
        RunConfig {
            profile,
            seed: 0,
            vocab_size: DEFAULT_VOCAB_BUDGET,
            generator,
            split: SplitRatios::default(),
            model,
            train,
        }
    }

    /// Profile defaults with `overlay` (a possibly partial TOML document)
    /// merged on top, table by table.
    pub fn from_toml_overlay(profile: Profile, overlay: &str) -> Result<Self> {
        let base = toml::Value::try_from(Self::for_profile(profile))
            .map_err(|e| Error::Config(format!("cannot serialise defaults: {e}")))?;
        let overlay: toml::Value = toml::from_str(overlay).map_err(|e| Error::Config(format!("bad config file: {e}")))?;
        let merged = merge(base, overlay);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("bad config file: {e}")))?;
        Ok(cfg)
    }

    pub fn load(profile: Profile, path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::for_profile(profile)),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml_overlay(profile, &text)
            }
        }
    }

    /// Propagates the global seed into the sub-configs.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.generator.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let r = self.split;
        let sum = r.train + r.validation + r.test;
        if (sum - 1.0).abs() > 1e-9 || [r.train, r.validation, r.test].iter().any(|x| *x < 0.0) {
            return Err(Error::Config(format!("split ratios must be non-negative and sum to 1, got {sum}")));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config(format!("vocab_size {} too small", self.vocab_size)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

fn merge(base: toml::Value, overlay: toml::Value) -> toml::Value {
    match (base, overlay) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(existing) => merge(existing, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, o) => o,
    }
}
