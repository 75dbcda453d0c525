use std::fmt;
use std::path::{Path, PathBuf};

use frn_core::train::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Anything wrong with the experiment configuration. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Bad or missing input data. Maps to exit code 3.
#[derive(Debug)]
pub struct DataError(pub String);

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of `.frnc` cubes and/or PNG band-stack subdirectories.
    pub dir: PathBuf,
    /// CRF CSV. Defaults to `<dir>/crf.csv` when present, otherwise the
    /// built-in Gaussian response.
    pub crf: Option<PathBuf>,
    /// The last `holdout` scenes (by name) are kept out of training and
    /// used for the final report.
    pub holdout: usize,
    /// Resample every cube to this many bands on load.
    pub bands: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            crf: None,
            holdout: 0,
            bands: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            out_dir: PathBuf::from("runs/frn"),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults) and applies `--a.b value`
    /// overrides in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| ConfigError(format!("config {} is not valid JSON: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let known = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
        for (key, raw) in parse_overrides(overrides)? {
            set_path(&mut doc, &known, &key, &raw)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| ConfigError(format!("invalid config: {e}")))?;
        cfg.train.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Splits `["--train.lr0", "1e-3", "--out_dir=x"]` into key/value pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            return Err(ConfigError(format!("expected --key value, found {arg:?}")));
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| ConfigError(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

/// Writes `raw` at dotted `key` inside `doc`, refusing keys absent from
/// `known`. The value is parsed as JSON when possible, else kept as a
/// string.
fn set_path(doc: &mut Value, known: &Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut schema = known;
    for p in &parts {
        schema = schema
            .get(p)
            .ok_or_else(|| ConfigError(format!("unknown config key `{key}`")))?;
    }
    if schema.is_object() {
        return Err(ConfigError(format!("`{key}` is a section, not a value")));
    }
    let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for p in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| ConfigError(format!("config section above `{key}` is not an object")))?;
        node = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| ConfigError(format!("config section above `{key}` is not an object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
