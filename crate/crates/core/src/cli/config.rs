//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{Method, MethodConfig};
use crate::tasks::{load_csv, to_common_label_space, LabeledTask};

/// How integer labels of separately loaded CSV tasks relate to each other.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum LabelSpace {
    /// Every task has its own classes; the union label space concatenates them.
    #[default]
    PerTask,
    /// Equal integer labels denote the same class in every task.
    Shared,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Task CSV files. Relative paths in a config file resolve against the
    /// file's directory.
    pub tasks: Vec<PathBuf>,
    pub method: Option<Method>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub label_space: LabelSpace,
    pub settings: MethodConfig<f64>,
}

fn config_error(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

/// Parses and validates a JSON run configuration.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config_str(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for t in &mut cfg.tasks {
        if t.is_relative() {
            *t = base.join(&*t);
        }
    }
    Ok(cfg)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_error(path, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Range checks, reporting the offending key path.
    pub fn validate(&self) -> Result<()> {
        let s = &self.settings;
        let c = &s.coupled;
        let positive = [
            ("settings.coupled.epsilon", c.epsilon),
            ("settings.w2_epsilon", s.w2_epsilon),
            ("settings.pretrain.learning_rate", s.pretrain.learning_rate),
        ];
        for (path, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config_error(path, format!("must be a positive finite number, got {v}")));
            }
        }
        let non_negative = [
            ("settings.coupled.lambda", c.lambda),
            ("settings.coupled.rel_tol", c.rel_tol),
            ("settings.coupled.train.learning_rate", c.train.learning_rate),
        ];
        for (path, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(config_error(path, format!("must be a finite number >= 0, got {v}")));
            }
        }
        let counts = [
            ("settings.coupled.block_size", c.block_size),
            ("settings.coupled.k_max", c.k_max),
            ("settings.coupled.prox_inner_iters", c.prox_inner_iters),
            ("settings.coupled.train.steps", c.train.steps),
            ("settings.coupled.train.inner_steps", c.train.inner_steps),
            ("settings.coupled.train.batch_size", c.train.batch_size),
            ("settings.pretrain.updates", s.pretrain.updates),
            ("settings.pretrain.batch_size", s.pretrain.batch_size),
            ("settings.task2vec_mc_samples", s.task2vec_mc_samples),
        ];
        for (path, v) in counts {
            if v == 0 {
                return Err(config_error(path, "must be >= 1"));
            }
        }
        if let Some(k) = s.hidden.iter().position(|&h| h == 0) {
            return Err(config_error(format!("settings.hidden[{k}]"), "must be >= 1"));
        }
        s.validate().map_err(|e| config_error("settings", e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Loads task CSVs and maps them into one label space.
pub fn load_tasks(paths: &[PathBuf], space: LabelSpace) -> Result<Vec<LabeledTask<f64>>> {
    let mut tasks = Vec::with_capacity(paths.len());
    for p in paths {
        let t = load_csv::<f64>(p)?;
        if tasks.iter().any(|o: &LabeledTask<f64>| o.name() == t.name()) {
            return Err(Error::Usage(format!("duplicate task name {:?} (file stems must differ)", t.name())));
        }
        tasks.push(match space {
            LabelSpace::PerTask => t,
            LabelSpace::Shared => t.with_label_namespace("label"),
        });
    }
    to_common_label_space(&tasks)
}
