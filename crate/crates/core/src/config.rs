//! Experiment configuration files: TOML with `[train]` and `[synth]` tables.
//!
//! Any field can be overridden from the command line with a dotted key,
//! e.g. `train.epochs=10` or `synth.domain_shift.severity=0.5`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Applies one `a.b.c=value` override to a table, creating tables as needed.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override {key:?} descends into a non-table value"))),
        };
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Builds a config from optional TOML text, overrides and a seed applied to both sections.
    pub fn from_parts(text: Option<&str>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table: toml::Table = match text {
            Some(t) => t.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.train.seed = s;
            cfg.synth.seed = s;
        }
        cfg.train.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p)?),
            None => None,
        };
        Self::from_parts(text.as_deref(), overrides, seed)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::TrainingMode;

    #[test]
    fn file_then_overrides_then_seed() {
        let text = "[train]\nepochs = 5\nmode = \"unsupervised\"\n\n[synth]\nn_eyes = 40\n";
        let cfg = ExperimentConfig::from_parts(
            Some(text),
            &["train.epochs=7".into(), "synth.domain_shift.severity=0.25".into(), "train.encoder_layers=[8, 4]".into()],
            Some(99),
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.mode, TrainingMode::Unsupervised);
        assert_eq!(cfg.train.encoder_layers, vec![8, 4]);
        assert_eq!(cfg.synth.n_eyes, 40);
        assert_eq!(cfg.synth.domain_shift.severity, 0.25);
        assert_eq!((cfg.train.seed, cfg.synth.seed), (99, 99));
        assert_eq!(cfg.train.batch_pairs, 16);
    }

    #[test]
    fn bare_strings_and_errors() {
        let cfg = ExperimentConfig::from_parts(None, &["train.mode=unsupervised".into()], None).unwrap();
        assert_eq!(cfg.train.mode, TrainingMode::Unsupervised);
        assert!(ExperimentConfig::from_parts(Some("[train]\nepoch = 3"), &[], None).is_err());
        assert!(ExperimentConfig::from_parts(Some("[train\n"), &[], None).is_err());
        assert!(ExperimentConfig::from_parts(None, &["train.epochs".into()], None).is_err());
        assert!(ExperimentConfig::from_parts(None, &["train.lr_min=1.0".into()], None).is_err());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_parts(Some(&text), &[], None).unwrap(), cfg);
    }
}
