//! Top-level run configuration, read from TOML with `gen.*` and `train.*` keys.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub gen: GenConfig,
    pub train: TrainConfig,
}

impl Config {
    /// Parses and validates. Unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let field = unknown_field(&message).unwrap_or("config").to_string();
            Error::Config { field, message }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()
    }

    /// Sets every seed from the single command-line seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.gen.seed = seed;
        self.train.seed = seed;
        self
    }
}

fn unknown_field(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("unknown field `")?;
    rest.split('`').next()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn dotted_keys() {
        let c = Config::from_toml("train.alpha = 0.3\ngen.seed = 9\ntrain.sgd.momentum = 0.5\n").unwrap();
        assert_eq!(c.train.alpha, 0.3);
        assert_eq!(c.gen.seed, 9);
        assert_eq!(c.train.sgd.momentum, 0.5);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::from_toml("train.alpah = 0.3\n").unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "alpah"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn field_level_validation() {
        let err = Config::from_toml("gen.easy_fraction = 1.2\n").unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "gen.easy_fraction"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn variant_names() {
        let c = Config::from_toml("train.variant = \"v3\"\n").unwrap();
        assert_eq!(c.train.variant, crate::trainer::Variant::V3);
    }

    #[test]
    fn round_trips() {
        let c = Config::default().with_seed(4);
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }
}
