//! Layered run configuration: defaults, then a TOML file, then
//! `section.key=value` overrides from flags.

use std::path::{Path, PathBuf};

use ciac_core::experiment::{DatasetSpec, ExperimentSpec};
use ciac_core::gesture::TrainConfig;
use ciac_core::stream::LabelStrategy;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub strategy: LabelStrategy,
    /// Window stride over the recordings, frames.
    pub stride: usize,
    /// Cross-validation folds; below 2 skips cross-validation.
    pub folds: usize,
    pub model: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            strategy: LabelStrategy::Broad,
            stride: 15,
            folds: 5,
            model: TrainConfig {
                epochs: 8,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeSection {
    pub addr: String,
    pub log_dir: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            log_dir: None,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub dataset: DatasetSpec,
    pub train: TrainSection,
    pub reach: ExperimentSpec,
    pub suture: ExperimentSpec,
    pub serve: ServeSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            train: TrainSection::default(),
            reach: ExperimentSpec::reaching(),
            suture: ExperimentSpec::suturing(),
            serve: ServeSection::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("x = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<(), CliError> {
    let mut keys = path.split('.').peekable();
    let mut node = root;
    while let Some(k) = keys.next() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("{path}: {k} is not inside a table")))?;
        if keys.peek().is_none() {
            table.insert(k.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(CliError::Usage("empty override key".into()))
}

pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Config, CliError> {
    let mut tree = toml::Value::try_from(Config::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        merge(&mut tree, toml::Value::Table(text.parse::<toml::Table>()?));
    }
    for (k, v) in overrides {
        set_path(&mut tree, k, parse_value(v))?;
    }
    Ok(tree.try_into()?)
}

pub fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ciac_core::teleop::LambdaSource;

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = toml::to_string(&Config::default()).unwrap();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(back, Config::default());
    }

    #[test]
    fn partial_sections_keep_their_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[reach]\nseeds = [1, 2]\n[dataset]\nthrows = 2\n").unwrap();
        let c = load(Some(&p), &[("train.model.epochs".into(), "3".into())]).unwrap();
        assert_eq!(c.reach.seeds, vec![1, 2]);
        assert_eq!(c.reach.lambda, LambdaSource::LinearRamp { duration: 2.0 });
        assert_eq!(c.dataset.throws, 2);
        assert_eq!(c.dataset.recordings, 10);
        assert_eq!(c.train.model.epochs, 3);
    }

    #[test]
    fn bad_overrides_fail() {
        assert!(load(None, &[("dataset.throws".into(), "many".into())]).is_err());
        assert!(load(None, &[("dataset.throws.x".into(), "1".into())]).is_err());
        assert!(parse_override("novalue").is_err());
        assert_eq!(parse_override("a.b = 3").unwrap(), ("a.b".into(), "3".into()));
    }
}
