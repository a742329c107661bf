//! Run configuration: a TOML file with `[train]`, `[data]`, `[output]` and
//! `[eval]` sections. Unknown keys are rejected. Any key can be overridden
//! from the command line with `--set section.key=value`, where `value` is
//! a TOML literal (bare words are taken as strings).

use std::path::{Path, PathBuf};

use geoflow::networks::Variant;
use geoflow::synthdata::Attribute;
use geoflow::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_FORMAT: &str = "geoflow-config v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory written by `synth-gen` and read by the other commands.
    pub dir: PathBuf,
    pub n_per_domain: usize,
    pub seed: u64,
    pub attribute: Attribute,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: "data".into(),
            n_per_domain: 2000,
            seed: 0,
            attribute: Attribute::Mustache,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: "runs/default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub classifier_steps: usize,
    pub classifier_seed: u64,
    /// Training seeds of the ablation.
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Minimum per-channel skin tint difference of ablation test pairs.
    pub min_tint_gap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            classifier_steps: 800,
            classifier_seed: 0,
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
            min_tint_gap: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub format: String,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            format: CONFIG_FORMAT.into(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            output: OutputConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `section.key=value` overrides to a parsed table.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| usage(format!("`{key}`: `{part}` is not a section")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl Config {
    /// Reads `path` (or defaults when `None`) and applies overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| usage(format!("configuration: {}", e.message())))?;
        if cfg.format != CONFIG_FORMAT {
            return Err(usage(format!(
                "configuration format `{}` is not supported (expected `{CONFIG_FORMAT}`)",
                cfg.format
            )));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        if self.data.n_per_domain == 0 {
            return Err(usage("data.n_per_domain must be ≥ 1"));
        }
        if self.eval.seeds.is_empty() || self.eval.variants.is_empty() {
            return Err(usage("eval.seeds and eval.variants must not be empty"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the effective configuration into `dir/config.toml`.
    pub fn echo_into(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| geoflow::Error::io(dir, e))?;
        let p = dir.join("config.toml");
        std::fs::write(&p, self.to_toml()).map_err(|e| geoflow::Error::io(&p, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = Config::default();
        let back: Config = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let c = Config::load(
            None,
            &[
                "train.total_steps=12".into(),
                "train.variant=no_flow".into(),
                "data.attribute=goatee".into(),
                "train.weights.rec=2.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.total_steps, 12);
        assert_eq!(c.train.variant, Variant::NoFlow);
        assert_eq!(c.data.attribute, Attribute::Goatee);
        assert_eq!(c.train.weights.rec, 2.5);
        assert!(matches!(Config::load(None, &["train.bogus=1".into()]), Err(CliError::Usage(_))));
        assert!(matches!(Config::load(None, &["nonsense".into()]), Err(CliError::Usage(_))));
    }
}
