//! Experiment configuration: a TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::aggregation::{BetaSchedule, DecayKind};
use crate::arch::{self, ArchDescriptor, SpaceConfig};
use crate::client::LocalTrainConfig;
use crate::distribution::{participants_per_round, Heuristic};
use crate::error::{Error, Result};
use crate::nas::NasConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    Overlap,
    Maxnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    Csv {
        path: PathBuf,
        /// Fraction of rows held out for testing when the file has no split
        /// column.
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_per_class() -> usize {
    100
}
fn default_spread() -> f64 {
    0.5
}
fn default_test_fraction() -> f64 {
    0.2
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs {
            per_class: default_per_class(),
            spread: default_spread(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BetaConfig {
    pub beta0: f64,
    /// Defaults to `1 / |S_t|`.
    pub beta_end: Option<f64>,
    pub decay: DecayKind,
    /// Decay period as a fraction of `rounds`.
    pub decay_fraction: f64,
}

impl Default for BetaConfig {
    fn default() -> Self {
        BetaConfig {
            beta0: 0.9,
            beta_end: None,
            decay: DecayKind::Cosine,
            decay_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rounds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_clients")]
    pub clients: usize,
    /// Fraction `C` of clients sampled per round.
    #[serde(default = "default_participation")]
    pub participation: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_distribution")]
    pub distribution: Heuristic,
    #[serde(default = "default_aggregator")]
    pub aggregator: AggregatorKind,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// `smallest`, `largest`, or descriptor text.
    #[serde(default = "default_eval_archs")]
    pub eval_archs: Vec<String>,
    #[serde(default)]
    pub space: SpaceConfig,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: LocalTrainConfig,
    #[serde(default)]
    pub beta: BetaConfig,
    #[serde(default)]
    pub nas: NasConfig,
}

fn default_clients() -> usize {
    20
}
fn default_participation() -> f64 {
    0.4
}
fn default_alpha() -> f64 {
    100.0
}
fn default_distribution() -> Heuristic {
    Heuristic::TrackingSandwich
}
fn default_aggregator() -> AggregatorKind {
    AggregatorKind::Maxnet
}
fn default_eval_every() -> usize {
    10
}
fn default_eval_archs() -> Vec<String> {
    vec!["smallest".into(), "largest".into()]
}

impl ExperimentConfig {
    /// Defaults for everything but the round count.
    pub fn with_rounds(rounds: usize) -> Self {
        let mut t = Table::new();
        t.insert("rounds".into(), Value::Integer(rounds as i64));
        from_table(t).expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be >= 1"));
        }
        if self.clients == 0 {
            return Err(Error::config("clients", "must be >= 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config("participation", "must lie in (0, 1]"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be positive and finite"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be >= 1"));
        }
        self.space
            .validate()
            .map_err(|e| Error::config("space", e.to_string()))?;
        match &self.dataset {
            DatasetSpec::Blobs { per_class, spread } => {
                if *per_class < 2 {
                    return Err(Error::config("dataset.per_class", "must be >= 2"));
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    return Err(Error::config("dataset.spread", "must be finite and >= 0"));
                }
                if self.space.num_classes < 2 {
                    return Err(Error::config(
                        "space.num_classes",
                        "blobs need >= 2 classes",
                    ));
                }
            }
            DatasetSpec::Csv { test_fraction, .. } => {
                if !(0.0..1.0).contains(test_fraction) {
                    return Err(Error::config("dataset.test_fraction", "must lie in [0, 1)"));
                }
            }
        }
        self.train.validate()?;
        self.beta_schedule().validate()?;
        if !(self.beta.decay_fraction > 0.0 && self.beta.decay_fraction <= 1.0) {
            return Err(Error::config("beta.decay_fraction", "must lie in (0, 1]"));
        }
        self.nas.validate()?;
        self.resolved_eval_archs()?;
        Ok(())
    }

    pub fn participants(&self) -> usize {
        participants_per_round(self.clients, self.participation)
    }

    pub fn beta_schedule(&self) -> BetaSchedule {
        BetaSchedule {
            beta0: self.beta.beta0,
            beta_end: self
                .beta
                .beta_end
                .unwrap_or(1.0 / self.participants() as f64),
            decay_kind: self.beta.decay,
            decay_rounds: ((self.beta.decay_fraction * self.rounds as f64).round() as usize).max(1),
        }
    }

    pub fn resolved_eval_archs(&self) -> Result<Vec<ArchDescriptor>> {
        self.eval_archs
            .iter()
            .map(|s| {
                resolve_arch(&self.space, s).map_err(|e| Error::config("eval_archs", e.to_string()))
            })
            .collect()
    }
}

/// `smallest`, `largest`, or `d:[..]-e:[..]` text.
pub fn resolve_arch(space: &SpaceConfig, text: &str) -> Result<ArchDescriptor> {
    match text.trim() {
        "smallest" => Ok(arch::smallest(space)),
        "largest" => Ok(arch::largest(space)),
        other => arch::parse(space, other),
    }
}

/// Reads and validates a config, applying `overrides` (`key=value`, dotted
/// keys for nested tables) after parsing the file.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, overrides)
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
    for ov in overrides {
        apply_override(&mut table, ov)?;
    }
    let cfg = from_table(table)?;
    cfg.validate()?;
    Ok(cfg)
}

fn from_table(table: Table) -> Result<ExperimentConfig> {
    ExperimentConfig::deserialize(Value::Table(table)).map_err(|e| {
        let msg = e.message().to_string();
        let key = msg
            .split('`')
            .nth(1)
            .map(str::to_string)
            .unwrap_or_else(|| "<config>".into());
        Error::Config { key, reason: msg }
    })
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
