//! Experiment configuration: flat `dotted.key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default (see [`DEFAULTS`]); a file only needs the keys it changes, and
//! command-line `key=value` overrides win over the file. Unknown keys are
//! rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fedabc::federation::{Aggregation, FederationConfig, OptimizerConfig, Strategy};
use fedabc::{LossConfig, PartitionSpec};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("{key}: invalid value {value:?} ({reason})")]
    Invalid {
        key: String,
        value: String,
        reason: String,
    },
    #[error("{0}: required when dataset.kind = mnist")]
    Missing(String),
}

/// Every accepted key with its default, in canonical order.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("dataset.kind", "blobs"),
    ("dataset.classes", "10"),
    ("dataset.per_class", "200"),
    ("dataset.dim", "16"),
    ("dataset.spread", "0.3"),
    ("dataset.test_per_class", "100"),
    ("dataset.train_images", ""),
    ("dataset.train_labels", ""),
    ("dataset.test_images", ""),
    ("dataset.test_labels", ""),
    ("model.hidden", "260,200"),
    ("partition.alpha", "0.3"),
    ("partition.num_clients", "8"),
    ("partition.test_fraction", "0.16666666666666666"),
    ("federation.rounds", "30"),
    ("federation.local_epochs", "5"),
    ("federation.participation_rate", "0.5"),
    ("federation.batch_size", "64"),
    ("federation.lr", "0.01"),
    ("federation.momentum", "0.9"),
    ("federation.weight_decay", "0.00001"),
    ("federation.aggregation", "weighted"),
    ("federation.parallel_clients", "true"),
    ("strategy.kind", "fedabc"),
    ("strategy.mu", "0.01"),
    ("loss.m_p", "0.75"),
    ("loss.m_n", "0.25"),
    ("loss.m_nn", "0.3"),
    ("loss.focal_exponent", "2"),
    ("loss.undersampling", "true"),
    ("loss.hard_mining", "true"),
    ("eval.iid_per_class", "50"),
    ("run.seeds", "0"),
    ("run.output_dir", "runs/default"),
    ("run.parallel_seeds", "false"),
];

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetConfig {
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        /// Size of the per-class pool the balanced test set is drawn from.
        test_per_class: usize,
    },
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    FedAbc,
    FedAvg,
    FedProx,
    Local,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::FedAbc => "fedabc",
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedProx => "fedprox",
            StrategyKind::Local => "local",
        }
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fedabc" => Ok(Self::FedAbc),
            "fedavg" => Ok(Self::FedAvg),
            "fedprox" => Ok(Self::FedProx),
            "local" => Ok(Self::Local),
            _ => Err("expected one of fedabc, fedavg, fedprox, local".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    /// `seed` is replaced by each run seed.
    pub partition: PartitionSpec,
    /// `seed` is replaced by each run seed.
    pub federation: FederationConfig,
    pub strategy: StrategyKind,
    pub mu: f64,
    pub loss: LossConfig,
    pub iid_per_class: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub parallel_seeds: bool,
}

impl ExperimentConfig {
    pub fn strategy(&self) -> Strategy {
        match self.strategy {
            StrategyKind::FedAbc => Strategy::FedAbc(self.loss),
            StrategyKind::FedAvg => Strategy::FedAvgSoftmax,
            StrategyKind::FedProx => Strategy::FedProxSoftmax { mu: self.mu },
            StrategyKind::Local => Strategy::LocalOnly,
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Blobs { classes, .. } => *classes,
            DatasetConfig::Mnist { .. } => 10,
        }
    }

    /// Canonical text form; parses back to an equal config.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.to_pairs() {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut map: BTreeMap<&'static str, String> =
            DEFAULTS.iter().map(|(k, v)| (*k, v.to_string())).collect();
        let mut set = |k: &'static str, v: String| {
            map.insert(k, v);
        };
        match &self.dataset {
            DatasetConfig::Blobs {
                classes,
                per_class,
                dim,
                spread,
                test_per_class,
            } => {
                set("dataset.kind", "blobs".into());
                set("dataset.classes", classes.to_string());
                set("dataset.per_class", per_class.to_string());
                set("dataset.dim", dim.to_string());
                set("dataset.spread", spread.to_string());
                set("dataset.test_per_class", test_per_class.to_string());
            }
            DatasetConfig::Mnist {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                set("dataset.kind", "mnist".into());
                set("dataset.train_images", train_images.display().to_string());
                set("dataset.train_labels", train_labels.display().to_string());
                set("dataset.test_images", test_images.display().to_string());
                set("dataset.test_labels", test_labels.display().to_string());
            }
        }
        let f = &self.federation;
        set("model.hidden", join(&f.hidden));
        set("partition.alpha", self.partition.alpha.to_string());
        set("partition.num_clients", self.partition.num_clients.to_string());
        set("partition.test_fraction", self.partition.test_fraction.to_string());
        set("federation.rounds", f.rounds.to_string());
        set("federation.local_epochs", f.local_epochs.to_string());
        set("federation.participation_rate", f.participation_rate.to_string());
        set("federation.batch_size", f.batch_size.to_string());
        set("federation.lr", f.optimizer.lr.to_string());
        set("federation.momentum", f.optimizer.momentum.to_string());
        set("federation.weight_decay", f.optimizer.weight_decay.to_string());
        set(
            "federation.aggregation",
            match f.aggregation {
                Aggregation::Weighted => "weighted",
                Aggregation::Uniform => "uniform",
            }
            .into(),
        );
        set("federation.parallel_clients", f.parallel_clients.to_string());
        set("strategy.kind", self.strategy.as_str().into());
        set("strategy.mu", self.mu.to_string());
        set("loss.m_p", self.loss.m_p.to_string());
        set("loss.m_n", self.loss.m_n.to_string());
        set("loss.m_nn", self.loss.m_nn.to_string());
        set("loss.focal_exponent", self.loss.focal_exponent.to_string());
        set("loss.undersampling", self.loss.enable_undersampling.to_string());
        set("loss.hard_mining", self.loss.enable_hard_mining.to_string());
        set("eval.iid_per_class", self.iid_per_class.to_string());
        set("run.seeds", join(&self.seeds));
        set("run.output_dir", self.output_dir.display().to_string());
        set("run.parallel_seeds", self.parallel_seeds.to_string());
        DEFAULTS
            .iter()
            .map(|(k, _)| (*k, map.remove(k).unwrap_or_default()))
            .collect()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        parse_str("", &[]).expect("defaults are valid")
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Splits `key = value` / `key=value`.
fn split_pair(text: &str) -> Option<(&str, &str)> {
    let (k, v) = text.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then_some((k, v.trim()))
}

fn set_raw(raw: &mut BTreeMap<String, String>, key: &str, value: &str) -> Result<(), ConfigError> {
    match raw.get_mut(key) {
        Some(slot) => {
            *slot = value.to_string();
            Ok(())
        }
        None => Err(ConfigError::UnknownKey(key.to_string())),
    }
}

/// Reads `path`, applies `overrides` (`key=value`), validates.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_str(&text, overrides)
}

pub fn parse_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut raw: BTreeMap<String, String> = DEFAULTS
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = split_pair(line).ok_or_else(|| ConfigError::Syntax {
            line: k + 1,
            text: line.to_string(),
        })?;
        set_raw(&mut raw, key, value)?;
    }
    for item in overrides {
        let (key, value) = split_pair(item).ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: item.clone(),
        })?;
        set_raw(&mut raw, key, value)?;
    }
    build(&Raw(raw))
}

struct Raw(BTreeMap<String, String>);

impl Raw {
    fn str(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).unwrap_or_default()
    }

    fn invalid(&self, key: &str, reason: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            key: key.to_string(),
            value: self.str(key).to_string(),
            reason: reason.into(),
        }
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.str(key)
            .parse()
            .map_err(|e: T::Err| self.invalid(key, e.to_string()))
    }

    fn real(&self, key: &str, ok: impl Fn(f64) -> bool, range: &str) -> Result<f64, ConfigError> {
        let v: f64 = self.get(key)?;
        if v.is_finite() && ok(v) {
            Ok(v)
        } else {
            Err(self.invalid(key, format!("must be in {range}")))
        }
    }

    fn positive(&self, key: &str) -> Result<usize, ConfigError> {
        match self.get::<usize>(key)? {
            0 => Err(self.invalid(key, "must be positive")),
            n => Ok(n),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let s = self.str(key);
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|v| v.trim().parse().map_err(|e: T::Err| self.invalid(key, e.to_string())))
            .collect()
    }

    fn path(&self, key: &str) -> Result<PathBuf, ConfigError> {
        match self.str(key) {
            "" => Err(ConfigError::Missing(key.to_string())),
            s => Ok(PathBuf::from(s)),
        }
    }
}

fn build(raw: &Raw) -> Result<ExperimentConfig, ConfigError> {
    let dataset = match raw.str("dataset.kind") {
        "blobs" => {
            let classes = raw.positive("dataset.classes")?;
            if classes < 2 {
                return Err(raw.invalid("dataset.classes", "need at least 2 classes"));
            }
            DatasetConfig::Blobs {
                classes,
                per_class: raw.positive("dataset.per_class")?,
                dim: raw.positive("dataset.dim")?,
                spread: raw.real("dataset.spread", |v| v >= 0.0, "[0, inf)")?,
                test_per_class: raw.positive("dataset.test_per_class")?,
            }
        }
        "mnist" => DatasetConfig::Mnist {
            train_images: raw.path("dataset.train_images")?,
            train_labels: raw.path("dataset.train_labels")?,
            test_images: raw.path("dataset.test_images")?,
            test_labels: raw.path("dataset.test_labels")?,
        },
        _ => return Err(raw.invalid("dataset.kind", "expected blobs or mnist")),
    };

    let hidden: Vec<usize> = raw.list("model.hidden")?;
    if hidden.contains(&0) {
        return Err(raw.invalid("model.hidden", "layer widths must be positive"));
    }

    let partition = PartitionSpec {
        alpha: raw.real("partition.alpha", |v| v > 0.0, "(0, inf)")?,
        num_clients: raw.positive("partition.num_clients")?,
        seed: 0,
        test_fraction: raw.real("partition.test_fraction", |v| v > 0.0 && v < 1.0, "(0, 1)")?,
    };

    let federation = FederationConfig {
        rounds: raw.positive("federation.rounds")?,
        local_epochs: raw.positive("federation.local_epochs")?,
        participation_rate: raw.real("federation.participation_rate", |v| v > 0.0 && v <= 1.0, "(0, 1]")?,
        batch_size: raw.positive("federation.batch_size")?,
        optimizer: OptimizerConfig {
            lr: raw.real("federation.lr", |v| v >= 0.0, "[0, inf)")?,
            momentum: raw.real("federation.momentum", |v| (0.0..1.0).contains(&v), "[0, 1)")?,
            weight_decay: raw.real("federation.weight_decay", |v| v >= 0.0, "[0, inf)")?,
        },
        hidden,
        aggregation: match raw.str("federation.aggregation") {
            "weighted" => Aggregation::Weighted,
            "uniform" => Aggregation::Uniform,
            _ => return Err(raw.invalid("federation.aggregation", "expected weighted or uniform")),
        },
        seed: 0,
        parallel_clients: raw.get("federation.parallel_clients")?,
    };

    let loss = LossConfig {
        m_p: raw.real("loss.m_p", |v| v > 0.0 && v <= 1.0, "(0, 1]")?,
        m_n: raw.real("loss.m_n", |v| (0.0..1.0).contains(&v), "[0, 1)")?,
        m_nn: raw.real("loss.m_nn", |v| (0.0..1.0).contains(&v), "[0, 1)")?,
        focal_exponent: raw.real("loss.focal_exponent", |v| v >= 0.0, "[0, inf)")?,
        enable_undersampling: raw.get("loss.undersampling")?,
        enable_hard_mining: raw.get("loss.hard_mining")?,
    };

    let seeds: Vec<u64> = raw.list("run.seeds")?;
    if seeds.is_empty() {
        return Err(raw.invalid("run.seeds", "at least one seed required"));
    }
    let output_dir = raw.str("run.output_dir");
    if output_dir.is_empty() {
        return Err(raw.invalid("run.output_dir", "must not be empty"));
    }

    Ok(ExperimentConfig {
        dataset,
        partition,
        federation,
        strategy: raw.get("strategy.kind")?,
        mu: raw.real("strategy.mu", |v| v >= 0.0, "[0, inf)")?,
        loss,
        iid_per_class: raw.positive("eval.iid_per_class")?,
        seeds,
        output_dir: PathBuf::from(output_dir),
        parallel_seeds: raw.get("run.parallel_seeds")?,
    })
}
