//! Flat `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Keys are dotted (`loss.tau`, `env.p_high`, `toy.steps`). Every key has a
//! default, unknown or repeated keys are errors, and lists are
//! comma-separated. See the README for the full key table.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use eopd_core::toylab::ToyConfig;
use eopd_core::{Execution, Method, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::manifest::Manifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Rollouts per model for histogram, retention and fresh-rollout FKL.
    pub rollouts: usize,
    /// Seed of the evaluation rollout streams.
    pub seed: u64,
    pub retention_threshold: f64,
    pub fkl_tau: f64,
    pub k_values: Vec<usize>,
    /// Log-spaced histogram bins above the underflow bin.
    pub bins: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            rollouts: 256,
            seed: 1,
            retention_threshold: eopd_core::analysis::RETENTION_THRESHOLD,
            fkl_tau: eopd_core::analysis::HIGH_ENTROPY_THRESHOLD,
            k_values: vec![1, 2, 4, 8, 16, 32],
            bins: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Prefix of every output file except the toy outputs.
    pub run_id: String,
    /// Also write SVG plots.
    pub plot: bool,
    pub train: TrainConfig,
    pub toy: ToyConfig,
    /// One toy scenario per teacher temperature.
    pub toy_temperatures: Vec<f64>,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            plot: false,
            train: TrainConfig::default(),
            toy: ToyConfig::default(),
            toy_temperatures: vec![
                ToyConfig::scenario_a().temperature,
                ToyConfig::scenario_b().temperature,
            ],
            analysis: AnalysisConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub origin: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{}: {}", self.origin, line, self.message),
            None => write!(f, "{}: {}", self.origin, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn scalar<T: FromStr>(value: &str, what: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("expected {what}, found '{value}'"))
}

fn real(value: &str) -> Result<f64, String> {
    let v: f64 = scalar(value, "a number")?;
    if v.is_nan() {
        return Err("NaN is not allowed".into());
    }
    Ok(v)
}

fn boolean(value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, found '{value}'")),
    }
}

fn list<T>(value: &str, item: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(item)
        .collect()
}

fn execution(value: &str) -> Result<Execution, String> {
    match value {
        "parallel" => Ok(Execution::Parallel),
        "sequential" => Ok(Execution::Sequential),
        _ => Err(format!("expected parallel or sequential, found '{value}'")),
    }
}

/// Every recognised key, in documentation order.
#[cfg(test)]
pub const KEYS: &[&str] = &[
    "run_id",
    "plot",
    "method",
    "seed",
    "batch_prompts",
    "minibatch",
    "iterations",
    "lr",
    "lr_end_factor",
    "momentum",
    "top_k",
    "student_init_scale",
    "report_entropy_threshold",
    "execution",
    "loss.clip_eps",
    "loss.tau",
    "loss.beta",
    "loss.alpha",
    "loss.kappa",
    "loss.fkl_fraction",
    "loss.fkl_weight",
    "loss.ce_weight",
    "loss.kl_weight",
    "env.seed",
    "env.vocab",
    "env.order",
    "env.rollout_len",
    "env.prompt_pool",
    "env.p_high",
    "env.low_temperature",
    "env.high_temperature",
    "env.mode_values",
    "toy.vocab",
    "toy.mode_values",
    "toy.temperatures",
    "toy.student_top",
    "toy.lr",
    "toy.steps",
    "toy.seeds",
    "toy.smoothing_window",
    "analysis.rollouts",
    "analysis.seed",
    "analysis.retention_threshold",
    "analysis.fkl_tau",
    "analysis.k_values",
    "analysis.bins",
];

impl RunConfig {
    /// Assigns one key. `value` is already trimmed.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "run_id" => {
                if value.is_empty()
                    || !value
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
                {
                    return Err(format!(
                        "run_id must be non-empty and use only [A-Za-z0-9._-], found '{value}'"
                    ));
                }
                self.run_id = value.to_string();
            }
            "plot" => self.plot = boolean(value)?,
            "method" => {
                self.train.method = value.parse::<Method>().map_err(|err| err.to_string())?
            }
            "seed" => self.train.seed = scalar(value, "an unsigned integer")?,
            "batch_prompts" => self.train.batch_prompts = scalar(value, "a positive integer")?,
            "minibatch" => self.train.minibatch = scalar(value, "a positive integer")?,
            "iterations" => self.train.iterations = scalar(value, "an unsigned integer")?,
            "lr" => self.train.lr = real(value)?,
            "lr_end_factor" => self.train.lr_end_factor = real(value)?,
            "momentum" => self.train.momentum = real(value)?,
            "top_k" => self.train.top_k = scalar(value, "a positive integer")?,
            "student_init_scale" => self.train.student_init_scale = real(value)?,
            "report_entropy_threshold" => self.train.report_entropy_threshold = real(value)?,
            "execution" => self.train.execution = execution(value)?,
            "loss.clip_eps" => self.train.loss.clip_eps = real(value)?,
            "loss.tau" => self.train.loss.tau = real(value)?,
            "loss.beta" => self.train.loss.beta = real(value)?,
            "loss.alpha" => self.train.loss.alpha = real(value)?,
            "loss.kappa" => self.train.loss.kappa = real(value)?,
            "loss.fkl_fraction" => self.train.loss.fkl_fraction = real(value)?,
            "loss.fkl_weight" => self.train.loss.fkl_weight = real(value)?,
            "loss.ce_weight" => self.train.loss.ce_weight = real(value)?,
            "loss.kl_weight" => self.train.loss.kl_weight = real(value)?,
            "env.seed" => self.train.env.seed = scalar(value, "an unsigned integer")?,
            "env.vocab" => self.train.env.vocab = scalar(value, "a positive integer")?,
            "env.order" => self.train.env.order = scalar(value, "a positive integer")?,
            "env.rollout_len" => self.train.env.rollout_len = scalar(value, "a positive integer")?,
            "env.prompt_pool" => self.train.env.prompt_pool = scalar(value, "a positive integer")?,
            "env.p_high" => self.train.env.p_high = real(value)?,
            "env.low_temperature" => self.train.env.low_temperature = real(value)?,
            "env.high_temperature" => self.train.env.high_temperature = real(value)?,
            "env.mode_values" => self.train.env.mode_values = list(value, real)?,
            "toy.vocab" => self.toy.vocab = scalar(value, "a positive integer")?,
            "toy.mode_values" => self.toy.mode_values = list(value, real)?,
            "toy.temperatures" => self.toy_temperatures = list(value, real)?,
            "toy.student_top" => self.toy.student_top = scalar(value, "a positive integer")?,
            "toy.lr" => self.toy.lr = real(value)?,
            "toy.steps" => self.toy.steps = scalar(value, "an unsigned integer")?,
            "toy.seeds" => self.toy.seeds = list(value, |v| scalar(v, "an unsigned integer"))?,
            "toy.smoothing_window" => {
                self.toy.smoothing_window = scalar(value, "a positive integer")?
            }
            "analysis.rollouts" => self.analysis.rollouts = scalar(value, "a positive integer")?,
            "analysis.seed" => self.analysis.seed = scalar(value, "an unsigned integer")?,
            "analysis.retention_threshold" => self.analysis.retention_threshold = real(value)?,
            "analysis.fkl_tau" => self.analysis.fkl_tau = real(value)?,
            "analysis.k_values" => {
                self.analysis.k_values = list(value, |v| scalar(v, "a positive integer"))?
            }
            "analysis.bins" => self.analysis.bins = scalar(value, "a positive integer")?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Parses `text` on top of the defaults. `origin` labels error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<(String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| ConfigError {
                origin: origin.to_string(),
                line: Some(line),
                message,
            };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected 'key = value', found '{content}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
                return Err(err(format!("key '{key}' already set on line {first}")));
            }
            cfg.set(key, value)
                .map_err(|m| err(format!("{key}: {m}")))?;
            seen.push((key.to_string(), line));
        }
        cfg.validate().map_err(|message| ConfigError {
            origin: origin.to_string(),
            line: None,
            message,
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        if self.toy_temperatures.is_empty() {
            return Err("toy.temperatures must list at least one temperature".into());
        }
        for &temperature in &self.toy_temperatures {
            self.toy_for(temperature)
                .validate()
                .map_err(|e| e.to_string())?;
        }
        if self.toy.seeds.is_empty() {
            return Err("toy.seeds must list at least one seed".into());
        }
        let a = &self.analysis;
        if a.rollouts == 0 || a.bins == 0 {
            return Err("analysis.rollouts and analysis.bins must be positive".into());
        }
        if a.k_values.is_empty()
            || a.k_values.windows(2).any(|w| w[0] >= w[1])
            || a.k_values[0] == 0
            || *a.k_values.last().expect("non-empty") > self.train.env.vocab
        {
            return Err(format!(
                "analysis.k_values must be strictly increasing within 1..={}",
                self.train.env.vocab
            ));
        }
        if [a.retention_threshold, a.fkl_tau]
            .iter()
            .any(|t| t.is_nan() || *t < 0.0)
        {
            return Err("analysis thresholds must be >= 0".into());
        }
        Ok(())
    }

    pub fn toy_for(&self, temperature: f64) -> ToyConfig {
        ToyConfig {
            temperature,
            ..self.toy.clone()
        }
    }

    /// `--seed` override: a single toy seed, and the training and
    /// environment seeds.
    pub fn override_seed(&mut self, seed: u64) {
        self.toy.seeds = vec![seed];
        self.train.seed = seed;
        self.train.env.seed = seed;
    }
}

/// A config read from disk; `manifest` is set when the file was a manifest.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub manifest: Option<Manifest>,
}

/// Reads a key-value config or, if the file holds JSON, a run manifest.
pub fn load(path: &Path) -> Result<Loaded, LoadError> {
    let text = std::fs::read_to_string(path).map_err(|e| LoadError::Read {
        path: path.display().to_string(),
        source: e,
    })?;
    let origin = path.display().to_string();
    if !text.trim_start().starts_with('{') {
        return Ok(Loaded {
            config: RunConfig::parse(&text, &origin)?,
            manifest: None,
        });
    }
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ConfigError {
        origin: origin.clone(),
        line: Some(e.line()),
        message: format!("invalid manifest: {e}"),
    })?;
    manifest.config.validate().map_err(|message| ConfigError {
        origin,
        line: None,
        message,
    })?;
    Ok(Loaded {
        config: manifest.config.clone(),
        manifest: Some(manifest),
    })
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("", "t").unwrap(), RunConfig::default());
    }

    #[test]
    fn parses_typed_values_and_comments() {
        let cfg = RunConfig::parse(
            "# defaults\nmethod = eopd\nloss.tau = 0.8  # strict gate\ntop_k=16\n\ntoy.seeds = 0, 1, 2, 3\n",
            "t",
        )
        .unwrap();
        assert_eq!(cfg.train.method, Method::Eopd);
        assert_eq!(cfg.train.loss.tau, 0.8);
        assert_eq!(cfg.train.top_k, 16);
        assert_eq!(cfg.toy.seeds, vec![0, 1, 2, 3]);
    }

    #[test]
    fn infinite_tau_is_accepted() {
        let cfg = RunConfig::parse("loss.tau = inf", "t").unwrap();
        assert!(cfg.train.loss.tau.is_infinite());
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse("lr = 1\nlearning_rate = 2\n", "c.conf").unwrap_err();
        assert_eq!(err.line, Some(2));
        assert_eq!(err.to_string(), "c.conf:2: learning_rate: unknown key");
    }

    #[test]
    fn type_errors_and_duplicates_report_line() {
        assert_eq!(
            RunConfig::parse("\n\ntop_k = many", "t").unwrap_err().line,
            Some(3)
        );
        assert_eq!(
            RunConfig::parse("lr = 1\nlr = 2", "t").unwrap_err().line,
            Some(2)
        );
        assert_eq!(RunConfig::parse("lr", "t").unwrap_err().line, Some(1));
        assert!(RunConfig::parse("method = ppo", "t").is_err());
    }

    #[test]
    fn semantic_errors_have_no_line() {
        let err = RunConfig::parse("minibatch = 5", "t").unwrap_err();
        assert_eq!(err.line, None);
    }

    #[test]
    fn every_documented_key_is_settable() {
        let mut cfg = RunConfig::default();
        for key in KEYS {
            let err = cfg.set(key, "?").unwrap_err();
            assert_ne!(err, "unknown key", "{key}");
        }
    }
}
