//! Experiment configuration: one TOML file plus `key.path=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Arch, GeneratorConfig, ModelScope, ModelSpec};
use crate::phantom::{split_sizes, PhantomConfig, DEFAULT_SPLIT_FRACTIONS};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_patients: usize,
    /// Train, validation, test.
    pub split_fractions: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_patients: 20,
            split_fractions: DEFAULT_SPLIT_FRACTIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub patch_size: usize,
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let g = GeneratorConfig::toy(32);
        Self {
            arch: Arch::Pix2pix,
            patch_size: g.patch_size,
            base_channels: g.base_channels,
            depth: g.depth,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, scope: ModelScope) -> ModelSpec {
        let g = GeneratorConfig {
            base_channels: self.base_channels,
            depth: self.depth,
            ..GeneratorConfig::toy(self.patch_size)
        };
        ModelSpec::new(scope, self.arch, g)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub phantom: PhantomConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.dataset.split_fractions;
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 || f.iter().any(|v| *v < 0.0) {
            return Err(Error::Config(format!(
                "dataset.split_fractions {f:?} must be non-negative and sum to 1"
            )));
        }
        split_sizes(self.dataset.n_patients, f)
            .map_err(|e| Error::Config(format!("dataset.n_patients: {e}")))?;
        self.phantom.validate()?;
        self.train.validate()?;
        self.model.spec(ModelScope::WholeBody).validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        Ok(())
    }

    /// Parses TOML text, applies overrides, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config parse error: {e}")))?;
        // Layer the file over the full default tree so partial nested
        // tables (e.g. one district's transfer) are accepted.
        let mut root = toml::Table::try_from(Self::default()).expect("defaults serialize");
        merge(&mut root, user);
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let c: Self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config error: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads `path` (or the defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c=value`; the value is read as a TOML literal, falling back to
/// a bare string.
pub fn apply_override(root: &mut toml::Table, kv: &str) -> Result<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key '{key}' is malformed")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(ExperimentConfig::from_toml("", &[]).unwrap(), c);
    }

    #[test]
    fn overrides_apply() {
        let c = ExperimentConfig::from_toml(
            "[train]\ntotal_epochs = 20\ndecay_start_epoch = 11\n",
            &[
                "train.seed=42".into(),
                "model.arch=cyclegan".into(),
                "phantom.transfers.head.scale=0.7".into(),
                "train.augment.enabled=false".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.total_epochs, 20);
        assert_eq!(c.train.seed, 42);
        assert_eq!(c.model.arch, Arch::Cyclegan);
        assert_eq!(c.phantom.transfers.head.scale, 0.7);
        assert!(!c.train.augment.enabled);
    }

    #[test]
    fn errors_name_the_problem() {
        let e = ExperimentConfig::from_toml("[dataset]\nsplit_fractions = [0.5, 0.1, 0.2]\n", &[]).unwrap_err();
        assert!(e.to_string().contains("split_fractions"), "{e}");
        let e = ExperimentConfig::from_toml("[train]\nbogus = 1\n", &[]).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = ExperimentConfig::from_toml("[train]\nlr = \n", &[]).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(ExperimentConfig::from_toml("", &["noequals".into()]).is_err());
        assert!(ExperimentConfig::from_toml("", &["train.seed.x=1".into()]).is_err());
    }
}
