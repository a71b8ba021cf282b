//! The run configuration file: one JSON document with `data`, `separator`,
//! `schedule` and `eval` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sidesep::bsseval::EvalConfig;
use sidesep::separator::{Method, SeparatorConfig};
use sidesep::trainer::TrainSchedule;

use crate::exit::Failure;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub root: PathBuf,
    #[serde(default = "default_train")]
    pub train: String,
    #[serde(default = "default_valid")]
    pub valid: String,
    #[serde(default = "default_test")]
    pub test: String,
}

fn default_train() -> String {
    "train".into()
}

fn default_valid() -> String {
    "valid".into()
}

fn default_test() -> String {
    "test".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    pub seed: u64,
    pub include_silence: bool,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            seed: 0,
            include_silence: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    version: u32,
    data: DataSection,
    separator: Map<String, Value>,
    #[serde(default)]
    schedule: TrainSchedule,
    #[serde(default)]
    eval: EvalConfig,
    #[serde(default)]
    analyze: AnalyzeSection,
}

/// A fully resolved configuration; every field carries its effective value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub data: DataSection,
    pub separator: SeparatorConfig,
    pub schedule: TrainSchedule,
    pub eval: EvalConfig,
    pub analyze: AnalyzeSection,
}

fn schema(msg: impl std::fmt::Display) -> Failure {
    Failure::Schema(msg.to_string())
}

/// Fills in the method's defaults, then applies the keys given in `section`.
pub fn resolve_separator(section: &Map<String, Value>) -> Result<SeparatorConfig, Failure> {
    let method: Method = match section.get("method") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| schema(format!("separator.method: {e}")))?,
        None => return Err(schema("separator.method is required")),
    };
    let mut merged = match serde_json::to_value(SeparatorConfig::desk(method)) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("separator config serializes to an object"),
    };
    for (k, v) in section {
        merged.insert(k.clone(), v.clone());
    }
    let config: SeparatorConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| schema(format!("separator: {e}")))?;
    config.validate().map_err(schema)?;
    Ok(config)
}

impl RunConfig {
    /// Parses `text`; a relative `data.root` is taken relative to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, Failure> {
        let raw: RawConfig = serde_json::from_str(text).map_err(schema)?;
        if raw.version != CONFIG_VERSION {
            return Err(schema(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                raw.version
            )));
        }
        let separator = resolve_separator(&raw.separator)?;
        raw.schedule.validate().map_err(schema)?;
        let mut data = raw.data;
        if data.root.is_relative() {
            data.root = base.join(&data.root);
        }
        let config = Self {
            version: raw.version,
            data,
            separator,
            schedule: raw.schedule,
            eval: raw.eval,
            analyze: raw.analyze,
        };
        config.check_eval()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// A resolved config as written into a run directory.
    pub fn parse_resolved(text: &str) -> Result<Self, Failure> {
        let config: Self = serde_json::from_str(text).map_err(schema)?;
        if config.version != CONFIG_VERSION {
            return Err(schema(format!("config version {} is not supported", config.version)));
        }
        Ok(config)
    }

    fn check_eval(&self) -> Result<(), Failure> {
        let e = &self.eval;
        if !(e.window_s > 0.0) || !(e.hop_s > 0.0) || e.filter_len == 0 {
            return Err(schema("eval: window_s and hop_s must be positive and filter_len nonzero"));
        }
        Ok(())
    }

    /// Seeds both the weight initialization and the crop stream.
    pub fn set_seed(&mut self, seed: u64) {
        self.separator.seed = seed;
        self.schedule.seed = seed;
    }

    /// Switches method and takes the new method's regularization weight.
    pub fn set_method(&mut self, method: Method) {
        self.separator.method = method;
        self.separator.lambda = method.default_lambda();
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
