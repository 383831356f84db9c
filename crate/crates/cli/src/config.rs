//! TOML run configuration with sections `[model]`, `[train]`, `[bench]` and
//! `[data]`. Every key is optional; unknown keys and sections are errors.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use slab_core::bench::BenchSpec;
use slab_core::model::ModelConfig;
use slab_core::training::{DataSource, DatasetSpec, TrainConfig};
use slab_core::{Result, SlabError};

pub const SECTIONS: [&str; 4] = ["model", "train", "bench", "data"];

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub bench: BenchSpec,
    pub data: DatasetSpec,
}

fn config_err(section: &str, message: impl Into<String>) -> SlabError {
    SlabError::Config {
        section: section.to_string(),
        message: message.into(),
    }
}

fn section<T: DeserializeOwned>(name: &str, table: toml::Table) -> Result<T> {
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| config_err(name, e.message().to_string()))
}

pub fn parse(text: &str) -> Result<CliConfig> {
    let doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| config_err("file", e.message().to_string()))?;
    let mut cfg = CliConfig::default();
    for (key, value) in doc {
        let toml::Value::Table(t) = value else {
            return Err(config_err(
                "file",
                format!("unknown top-level key `{key}`; expected sections {}", SECTIONS.join(", ")),
            ));
        };
        match key.as_str() {
            "model" => cfg.model = section("model", t)?,
            "train" => cfg.train = section("train", t)?,
            "bench" => cfg.bench = section("bench", t)?,
            "data" => cfg.data = section("data", t)?,
            _ => {
                return Err(config_err(
                    &key,
                    format!("unknown section `{key}`; expected one of {}", SECTIONS.join(", ")),
                ))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<CliConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| SlabError::io(path, e))?;
    parse(&text)
}

pub fn to_toml(cfg: &CliConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| config_err("file", e.to_string()))
}

impl CliConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.bench.validate()?;
        Ok(())
    }

    /// The model must accept the data's samples and label range.
    pub fn check_model_matches_data(&self) -> Result<()> {
        let (m, d) = (&self.model, &self.data);
        if m.num_classes != d.num_classes {
            return Err(config_err(
                "data",
                format!("num_classes {} differs from [model] num_classes {}", d.num_classes, m.num_classes),
            ));
        }
        let want = match d.source {
            DataSource::CsvTokens => vec![m.tokens(), m.patch_dim()],
            _ => {
                let (h, w) = m.image_size();
                vec![m.in_channels, h, w]
            }
        };
        if d.input_shape != want {
            return Err(config_err(
                "data",
                format!("input_shape {:?} does not fit the model, which expects {want:?}", d.input_shape),
            ));
        }
        Ok(())
    }
}
