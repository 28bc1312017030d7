use std::path::Path;

use layoutgen_core::graph::GraphConfig;
use layoutgen_core::metrics::TokenizerConfig;
use layoutgen_core::model::TrainingConfig;
use layoutgen_core::synthesis::ValidationRuleConfig;
use layoutgen_core::{io, Error, Result};
use serde::Deserialize;

/// The JSON configuration file. Every section and field is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub graph: GraphConfig,
    pub training: TrainingConfig,
    pub validation: ValidationRuleConfig,
    pub tokenizer: TokenizerConfig,
}

impl CliConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: CliConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                Error::Config(e.into_inner().to_string())
            } else {
                Error::Config(format!("{path}: {}", e.into_inner()))
            }
        })?;
        de.end().map_err(|e| Error::Config(e.to_string()))?;
        cfg.graph.validate()?;
        cfg.training.validate()?;
        cfg.validation.validate()?;
        cfg.tokenizer.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::from_str(&io::read_to_string(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
        }
    }
}
