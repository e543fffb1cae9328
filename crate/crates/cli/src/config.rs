//! Layered run configuration: built-in defaults, then a TOML file, then flags.

use std::path::Path;

use serde::Deserialize;
use seed_core::sim::TaskKind;
use seed_core::train::{FeedbackMode, TrainConfig};

use crate::CliError;

/// Settings that may come from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub task: Option<String>,
    pub feedback: Option<String>,
    pub steps: Option<u64>,
    pub seed: Option<u64>,
}

pub fn parse_task(s: &str) -> Result<TaskKind, CliError> {
    TaskKind::parse(s).map_err(|_| CliError::Config(format!("unknown task `{s}`")))
}

pub fn parse_mode(s: &str) -> Result<FeedbackMode, CliError> {
    FeedbackMode::parse(s).ok_or_else(|| CliError::Config(format!("unknown feedback mode `{s}`")))
}

fn canonical<T: serde::Serialize>(v: T) -> toml::Value {
    match serde_json::to_value(v).expect("enum serializes") {
        serde_json::Value::String(s) => toml::Value::String(s),
        other => unreachable!("enum serialized as {other}"),
    }
}

/// Parses a config file body. Task and mode names accept the CLI spellings too.
pub fn from_toml(text: &str) -> Result<TrainConfig, CliError> {
    let mut table: toml::Table = text.parse().map_err(|e| CliError::Config(format!("config file: {e}")))?;
    if let Some(toml::Value::String(s)) = table.get("task") {
        let v = canonical(parse_task(s)?);
        table.insert("task".into(), v);
    }
    if let Some(toml::Value::String(s)) = table.get("feedback_mode") {
        let v = canonical(parse_mode(s)?);
        table.insert("feedback_mode".into(), v);
    }
    TrainConfig::deserialize(toml::Value::Table(table)).map_err(|e| CliError::Config(format!("config file: {e}")))
}

pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<TrainConfig, CliError> {
    let mut cfg = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(t) = &flags.task {
        cfg.task = parse_task(t)?;
    }
    if let Some(m) = &flags.feedback {
        cfg.feedback_mode = parse_mode(m)?;
    }
    if let Some(n) = flags.steps {
        cfg.max_decision_steps = n;
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}
