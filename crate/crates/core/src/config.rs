//! Experiment configuration: a flat, sectioned `key = value` text format.
//!
//! ```text
//! # comment
//! [topology]
//! edges = 2
//! devices = 16
//! [data]
//! mode = label-permutation
//! labeled_fraction = 0.05
//! ```
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated.
//! Unknown sections or keys are rejected; omitted keys take the defaults
//! listed in [`KEYS`].

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DistributionAssignment, TaskMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("`{key}`: {msg}")]
    Domain { key: String, msg: String },
}

fn domain(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Domain {
        key: key.to_string(),
        msg: msg.into(),
    }
}

/// Every accepted key with its default (`None` = required or unset).
pub const KEYS: &[(&str, Option<&str>)] = &[
    ("topology.edges", None),
    ("topology.devices", None),
    ("topology.device_edge", Some("contiguous")),
    ("data.mode", None),
    ("data.distributions", Some("2")),
    ("data.classes", Some("4")),
    ("data.features", Some("10")),
    ("data.samples_per_device", Some("200")),
    ("data.test_samples_per_device", Some("50")),
    ("data.labeled_fraction", Some("0.05")),
    ("data.max_classes", Some("2")),
    ("data.class_sep", Some("3")),
    ("data.noise_std", Some("1")),
    ("data.distribution_assignment", Some("round-robin")),
    ("data.csv_path", None),
    ("data.csv_classes", None),
    ("data.seed", None),
    ("model.family", Some("logistic")),
    ("model.hidden", Some("0")),
    ("model.learning_rate", Some("0.01")),
    ("model.epochs", Some("5")),
    ("model.batch_size", Some("10")),
    ("clustering.enabled", Some("true")),
    ("clustering.epsilon1", None),
    ("clustering.epsilon2", None),
    ("clustering.epsilon1_relative", Some("0.4")),
    ("clustering.epsilon2_factor", Some("1.6")),
    ("clustering.split_every", Some("5")),
    ("clustering.merge_gamma", Some("0.9")),
    ("clustering.merge_mode", Some("merge")),
    ("clustering.similarity", Some("gradient")),
    ("ssl.enabled", Some("true")),
    ("ssl.phi", Some("0.8")),
    ("ssl.label_every", Some("10")),
    ("ssl.lambda", Some("1")),
    ("ssl.holdout_fraction", Some("0.2")),
    ("ssl.inference_cycles", Some("20")),
    ("ssl.candidates", Some("cloud")),
    ("ssl.latency_target", Some("0.9")),
    ("network.bandwidth_hz", Some("10000000")),
    ("network.subchannels", None),
    ("network.g0_db", Some("-35")),
    ("network.d0_m", Some("2")),
    ("network.n0_w", Some("0.000001")),
    ("network.cpu_hz_min", Some("1000000000")),
    ("network.cpu_hz_max", Some("9000000000")),
    ("network.power_dbm_min", Some("-10")),
    ("network.power_dbm_max", Some("20")),
    ("network.distance_min_m", Some("5")),
    ("network.distance_max_m", Some("50")),
    ("network.cloud_rate_bps", Some("100000000")),
    ("network.cycles_per_sample", Some("20")),
    ("network.deadline_kappa", Some("2")),
    ("network.deadline_s", None),
    ("network.t_tot", None),
    ("network.fading", Some("false")),
    ("run.rounds", Some("200")),
    ("run.seed", Some("0")),
    ("run.variant", Some("cfsl")),
    ("run.metrics", Some("metrics.csv")),
    ("run.events", Some("events.jsonl")),
    ("run.convergence_eps", Some("0.0001")),
    ("run.convergence_window", Some("10")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Cfsl,
    CflFullyLabeled,
    HflSsl,
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cfsl" => Ok(Self::Cfsl),
            "cfl-fully-labeled" => Ok(Self::CflFullyLabeled),
            "hfl-ssl" => Ok(Self::HflSsl),
            o => Err(format!("unknown variant `{o}` (cfsl | cfl-fully-labeled | hfl-ssl)")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cfsl => "cfsl",
            Self::CflFullyLabeled => "cfl-fully-labeled",
            Self::HflSsl => "hfl-ssl",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeAssignment {
    /// Equal contiguous blocks of device ids.
    Contiguous,
    RoundRobin,
    Explicit(Vec<usize>),
}

impl EdgeAssignment {
    pub fn edge_of(&self, device: usize, devices: usize, edges: usize) -> usize {
        match self {
            Self::Contiguous => device * edges / devices,
            Self::RoundRobin => device % edges,
            Self::Explicit(v) => v[device],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic(TaskMode),
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeMode {
    Merge,
    LogOnly,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilaritySource {
    /// Full local gradient at the cluster model.
    Gradient,
    /// Weight change of this round's local training.
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CandidateScope {
    Cloud,
    Edge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub edges: usize,
    pub devices: usize,
    pub device_edge: EdgeAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub distributions: usize,
    pub classes: usize,
    pub features: usize,
    pub samples_per_device: usize,
    pub test_samples_per_device: usize,
    pub labeled_fraction: f64,
    pub max_classes: usize,
    pub class_sep: f64,
    pub noise_std: f64,
    pub assignment: DistributionAssignment,
    pub csv_path: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// 0 = multinomial logistic regression.
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    pub enabled: bool,
    pub epsilon1: Option<f64>,
    pub epsilon2: Option<f64>,
    pub epsilon1_relative: f64,
    pub epsilon2_factor: f64,
    pub split_every: usize,
    pub merge_gamma: f64,
    pub merge_mode: MergeMode,
    pub similarity: SimilaritySource,
}

impl ClusteringConfig {
    /// Thresholds for one check given the mean per-device gradient norm.
    pub fn thresholds(&self, mean_norm: f64) -> (f64, f64) {
        let eps1 = self.epsilon1.unwrap_or(self.epsilon1_relative * mean_norm);
        let eps2 = self.epsilon2.unwrap_or(self.epsilon2_factor * eps1);
        (eps1, eps2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslConfig {
    pub enabled: bool,
    pub phi: f64,
    pub label_every: usize,
    pub lambda: f64,
    pub holdout_fraction: f64,
    pub inference_cycles: f64,
    pub candidates: CandidateScope,
    pub latency_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub bandwidth_hz: f64,
    /// `None` = `ceil(K_n / 2)` per edge.
    pub subchannels: Option<usize>,
    pub g0_db: f64,
    pub d0_m: f64,
    pub n0_w: f64,
    pub cpu_hz_min: f64,
    pub cpu_hz_max: f64,
    pub power_dbm_min: f64,
    pub power_dbm_max: f64,
    pub distance_min_m: f64,
    pub distance_max_m: f64,
    pub cloud_rate_bps: f64,
    pub cycles_per_sample: f64,
    pub deadline_kappa: f64,
    pub deadline_s: Option<f64>,
    pub t_tot: Option<f64>,
    pub fading: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub rounds: usize,
    pub seed: u64,
    pub variant: Variant,
    pub metrics: String,
    pub events: String,
    pub convergence_eps: f64,
    pub convergence_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub topology: Topology,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub clustering: ClusteringConfig,
    pub ssl: SslConfig,
    pub network: NetworkConfig,
    pub run: RunConfig,
    /// `(key, value)` of every default filled in by the parser.
    #[serde(skip)]
    pub defaults_applied: Vec<(String, String)>,
}

struct Raw {
    values: BTreeMap<String, String>,
    defaults: Vec<(String, String)>,
}

impl Raw {
    fn get(&mut self, key: &str) -> Option<String> {
        if let Some(v) = self.values.get(key) {
            return Some(v.clone());
        }
        let default = KEYS.iter().find(|(k, _)| *k == key).and_then(|(_, d)| *d)?;
        self.defaults.push((key.to_string(), default.to_string()));
        Some(default.to_string())
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| domain(key, format!("cannot parse `{v}`"))),
        }
    }

    fn req<T: FromStr>(&mut self, key: &str) -> Result<T, ConfigError> {
        self.parse(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    fn bool(&mut self, key: &str) -> Result<bool, ConfigError> {
        let v: String = self.req(key)?;
        match v.as_str() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(domain(key, format!("expected a boolean, got `{v}`"))),
        }
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, ConfigError> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| domain(key, format!("bad list entry `{s}`"))))
        .collect()
}

fn check(key: &str, ok: bool, msg: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(domain(key, msg))
    }
}

/// Parses and validates a configuration, filling in defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut values = BTreeMap::new();
    let mut section: Option<String> = None;
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                msg: "unterminated section header".into(),
            })?;
            section = Some(name.trim().to_string());
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: line_no,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let sec = section.as_ref().ok_or_else(|| ConfigError::Syntax {
            line: line_no,
            msg: "key outside of any section".into(),
        })?;
        let key = format!("{sec}.{}", k.trim());
        if !KEYS.iter().any(|(name, _)| *name == key) {
            return Err(ConfigError::UnknownKey(key));
        }
        let v = v.trim().trim_matches('"').to_string();
        if values.insert(key.clone(), v).is_some() {
            return Err(ConfigError::Syntax {
                line: line_no,
                msg: format!("duplicate key `{key}`"),
            });
        }
    }
    let mut raw = Raw {
        values,
        defaults: Vec::new(),
    };
    build(&mut raw)
}

fn build(raw: &mut Raw) -> Result<ExperimentConfig, ConfigError> {
    let edges: usize = raw.req("topology.edges")?;
    let devices: usize = raw.req("topology.devices")?;
    check("topology.edges", edges >= 1, "need at least one edge")?;
    check("topology.devices", devices >= 1, "need at least one device")?;
    let de: String = raw.req("topology.device_edge")?;
    let device_edge = match de.as_str() {
        "contiguous" => EdgeAssignment::Contiguous,
        "round-robin" => EdgeAssignment::RoundRobin,
        list => {
            let v = parse_list("topology.device_edge", list)?;
            check("topology.device_edge", v.len() == devices, "list must name one edge per device")?;
            check("topology.device_edge", v.iter().all(|&e| e < edges), "edge id out of range")?;
            EdgeAssignment::Explicit(v)
        }
    };

    let mode: String = raw.req("data.mode")?;
    let source = match mode.as_str() {
        "csv" => DataSource::Csv,
        m => DataSource::Synthetic(m.parse().map_err(|e: String| domain("data.mode", e))?),
    };
    let distributions: usize = raw.req("data.distributions")?;
    let mut classes: usize = raw.req("data.classes")?;
    let features: usize = raw.req("data.features")?;
    let labeled_fraction: f64 = raw.req("data.labeled_fraction")?;
    check("data.distributions", distributions >= 1, "must be >= 1")?;
    check("data.features", features >= 2, "must be >= 2")?;
    check(
        "data.labeled_fraction",
        labeled_fraction > 0.0 && labeled_fraction <= 1.0,
        "must be in (0, 1]",
    )?;
    let da: String = raw.req("data.distribution_assignment")?;
    let assignment = match da.as_str() {
        "round-robin" => DistributionAssignment::RoundRobin,
        "blocked" => DistributionAssignment::Blocked,
        list => {
            let v = parse_list("data.distribution_assignment", list)?;
            check("data.distribution_assignment", v.len() == devices, "one entry per device")?;
            check(
                "data.distribution_assignment",
                v.iter().all(|&j| j < distributions),
                "distribution id out of range",
            )?;
            DistributionAssignment::Explicit(v)
        }
    };
    let csv_path: Option<String> = raw.parse("data.csv_path")?;
    if let Some(c) = raw.parse::<usize>("data.csv_classes")? {
        classes = c;
    }
    if source == DataSource::Csv {
        check("data.csv_path", csv_path.is_some(), "required when data.mode = csv")?;
    }
    check("data.classes", classes >= 2, "must be >= 2")?;
    let data = DataConfig {
        source,
        distributions,
        classes,
        features,
        samples_per_device: raw.req("data.samples_per_device")?,
        test_samples_per_device: raw.req("data.test_samples_per_device")?,
        labeled_fraction,
        max_classes: raw.req("data.max_classes")?,
        class_sep: raw.req("data.class_sep")?,
        noise_std: raw.req("data.noise_std")?,
        assignment,
        csv_path,
        seed: raw.parse("data.seed")?,
    };
    check("data.samples_per_device", data.samples_per_device >= 1, "must be >= 1")?;
    check("data.max_classes", data.max_classes >= 1, "must be >= 1")?;
    check("data.class_sep", data.class_sep > 0.0, "must be positive")?;
    check("data.noise_std", data.noise_std > 0.0, "must be positive")?;

    let family: String = raw.req("model.family")?;
    let mut hidden: usize = raw.req("model.hidden")?;
    match family.as_str() {
        "logistic" => check("model.hidden", hidden == 0, "logistic family takes hidden = 0")?,
        "mlp" => {
            if hidden == 0 {
                hidden = 16;
            }
        }
        f => return Err(domain("model.family", format!("unknown family `{f}` (logistic | mlp)"))),
    }
    let model = ModelConfig {
        hidden,
        learning_rate: raw.req("model.learning_rate")?,
        epochs: raw.req("model.epochs")?,
        batch_size: raw.req("model.batch_size")?,
    };
    check("model.learning_rate", model.learning_rate > 0.0, "must be positive")?;
    check("model.epochs", model.epochs >= 1, "must be >= 1")?;
    check("model.batch_size", model.batch_size >= 1, "must be >= 1")?;

    let merge_mode = match raw.req::<String>("clustering.merge_mode")?.as_str() {
        "merge" => MergeMode::Merge,
        "log-only" => MergeMode::LogOnly,
        "off" => MergeMode::Off,
        m => return Err(domain("clustering.merge_mode", format!("unknown mode `{m}`"))),
    };
    let similarity = match raw.req::<String>("clustering.similarity")?.as_str() {
        "gradient" => SimilaritySource::Gradient,
        "delta" => SimilaritySource::Delta,
        m => return Err(domain("clustering.similarity", format!("unknown source `{m}`"))),
    };
    let clustering = ClusteringConfig {
        enabled: raw.bool("clustering.enabled")?,
        epsilon1: raw.parse("clustering.epsilon1")?,
        epsilon2: raw.parse("clustering.epsilon2")?,
        epsilon1_relative: raw.req("clustering.epsilon1_relative")?,
        epsilon2_factor: raw.req("clustering.epsilon2_factor")?,
        split_every: raw.req("clustering.split_every")?,
        merge_gamma: raw.req("clustering.merge_gamma")?,
        merge_mode,
        similarity,
    };
    check("clustering.epsilon1", clustering.epsilon1.is_none_or(|e| e > 0.0), "must be positive")?;
    check("clustering.epsilon2", clustering.epsilon2.is_none_or(|e| e > 0.0), "must be positive")?;
    check("clustering.epsilon1_relative", clustering.epsilon1_relative > 0.0, "must be positive")?;
    check("clustering.epsilon2_factor", clustering.epsilon2_factor > 0.0, "must be positive")?;
    check("clustering.split_every", clustering.split_every >= 1, "must be >= 1")?;
    check(
        "clustering.merge_gamma",
        (-1.0..=1.0).contains(&clustering.merge_gamma),
        "must be in [-1, 1]",
    )?;

    let candidates = match raw.req::<String>("ssl.candidates")?.as_str() {
        "cloud" => CandidateScope::Cloud,
        "edge" => CandidateScope::Edge,
        c => return Err(domain("ssl.candidates", format!("unknown scope `{c}`"))),
    };
    let ssl = SslConfig {
        enabled: raw.bool("ssl.enabled")?,
        phi: raw.req("ssl.phi")?,
        label_every: raw.req("ssl.label_every")?,
        lambda: raw.req("ssl.lambda")?,
        holdout_fraction: raw.req("ssl.holdout_fraction")?,
        inference_cycles: raw.req("ssl.inference_cycles")?,
        candidates,
        latency_target: raw.req("ssl.latency_target")?,
    };
    check("ssl.phi", (0.0..=1.0).contains(&ssl.phi), "must be in [0, 1]")?;
    check("ssl.label_every", ssl.label_every >= 1, "must be >= 1")?;
    check("ssl.holdout_fraction", (0.0..1.0).contains(&ssl.holdout_fraction), "must be in [0, 1)")?;
    check("ssl.inference_cycles", ssl.inference_cycles >= 0.0, "must be >= 0")?;
    check(
        "ssl.latency_target",
        ssl.latency_target > 0.0 && ssl.latency_target <= 1.0,
        "must be in (0, 1]",
    )?;

    let network = NetworkConfig {
        bandwidth_hz: raw.req("network.bandwidth_hz")?,
        subchannels: raw.parse("network.subchannels")?,
        g0_db: raw.req("network.g0_db")?,
        d0_m: raw.req("network.d0_m")?,
        n0_w: raw.req("network.n0_w")?,
        cpu_hz_min: raw.req("network.cpu_hz_min")?,
        cpu_hz_max: raw.req("network.cpu_hz_max")?,
        power_dbm_min: raw.req("network.power_dbm_min")?,
        power_dbm_max: raw.req("network.power_dbm_max")?,
        distance_min_m: raw.req("network.distance_min_m")?,
        distance_max_m: raw.req("network.distance_max_m")?,
        cloud_rate_bps: raw.req("network.cloud_rate_bps")?,
        cycles_per_sample: raw.req("network.cycles_per_sample")?,
        deadline_kappa: raw.req("network.deadline_kappa")?,
        deadline_s: raw.parse("network.deadline_s")?,
        t_tot: raw.parse("network.t_tot")?,
        fading: raw.bool("network.fading")?,
    };
    check("network.bandwidth_hz", network.bandwidth_hz > 0.0, "must be positive")?;
    check("network.subchannels", network.subchannels.is_none_or(|q| q >= 1), "must be >= 1")?;
    check("network.d0_m", network.d0_m > 0.0, "must be positive")?;
    check("network.n0_w", network.n0_w > 0.0, "must be positive")?;
    check(
        "network.cpu_hz_min",
        network.cpu_hz_min > 0.0 && network.cpu_hz_min <= network.cpu_hz_max,
        "need 0 < cpu_hz_min <= cpu_hz_max",
    )?;
    check(
        "network.power_dbm_min",
        network.power_dbm_min <= network.power_dbm_max,
        "need power_dbm_min <= power_dbm_max",
    )?;
    check(
        "network.distance_min_m",
        network.distance_min_m > 0.0 && network.distance_min_m <= network.distance_max_m,
        "need 0 < distance_min_m <= distance_max_m",
    )?;
    check("network.cloud_rate_bps", network.cloud_rate_bps > 0.0, "must be positive")?;
    check("network.cycles_per_sample", network.cycles_per_sample >= 0.0, "must be >= 0")?;
    check("network.deadline_kappa", network.deadline_kappa > 0.0, "must be positive")?;
    check("network.deadline_s", network.deadline_s.is_none_or(|d| d >= 0.0), "must be >= 0")?;
    check("network.t_tot", network.t_tot.is_none_or(|t| t >= 0.0), "must be >= 0")?;

    let variant: String = raw.req("run.variant")?;
    let run = RunConfig {
        rounds: raw.req("run.rounds")?,
        seed: raw.req("run.seed")?,
        variant: variant.parse().map_err(|e: String| domain("run.variant", e))?,
        metrics: raw.req("run.metrics")?,
        events: raw.req("run.events")?,
        convergence_eps: raw.req("run.convergence_eps")?,
        convergence_window: raw.req("run.convergence_window")?,
    };
    check("run.convergence_eps", run.convergence_eps >= 0.0, "must be >= 0")?;
    check("run.convergence_window", run.convergence_window >= 1, "must be >= 1")?;

    Ok(ExperimentConfig {
        topology: Topology {
            edges,
            devices,
            device_edge,
        },
        data,
        model,
        clustering,
        ssl,
        network,
        run,
        defaults_applied: std::mem::take(&mut raw.defaults),
    })
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Seed of the data generator.
    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.run.seed)
    }

    /// Configuration actually simulated for the selected variant.
    pub fn effective(&self) -> ExperimentConfig {
        let mut c = self.clone();
        match self.run.variant {
            Variant::Cfsl => {}
            Variant::CflFullyLabeled => {
                c.data.labeled_fraction = 1.0;
                c.ssl.enabled = false;
            }
            Variant::HflSsl => c.clustering.enabled = false,
        }
        c
    }

    /// Canonical text form; [`parse_config`] of the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        s.push_str("[topology]\n");
        kv(&mut s, "edges", self.topology.edges.to_string());
        kv(&mut s, "devices", self.topology.devices.to_string());
        kv(
            &mut s,
            "device_edge",
            match &self.topology.device_edge {
                EdgeAssignment::Contiguous => "contiguous".into(),
                EdgeAssignment::RoundRobin => "round-robin".into(),
                EdgeAssignment::Explicit(v) => list(v),
            },
        );
        let d = &self.data;
        s.push_str("\n[data]\n");
        kv(
            &mut s,
            "mode",
            match d.source {
                DataSource::Csv => "csv".into(),
                DataSource::Synthetic(m) => m.to_string(),
            },
        );
        kv(&mut s, "distributions", d.distributions.to_string());
        kv(&mut s, "classes", d.classes.to_string());
        kv(&mut s, "features", d.features.to_string());
        kv(&mut s, "samples_per_device", d.samples_per_device.to_string());
        kv(&mut s, "test_samples_per_device", d.test_samples_per_device.to_string());
        kv(&mut s, "labeled_fraction", d.labeled_fraction.to_string());
        kv(&mut s, "max_classes", d.max_classes.to_string());
        kv(&mut s, "class_sep", d.class_sep.to_string());
        kv(&mut s, "noise_std", d.noise_std.to_string());
        kv(
            &mut s,
            "distribution_assignment",
            match &d.assignment {
                DistributionAssignment::RoundRobin => "round-robin".into(),
                DistributionAssignment::Blocked => "blocked".into(),
                DistributionAssignment::Explicit(v) => list(v),
            },
        );
        if let Some(p) = d.csv_path.clone() {
            kv(&mut s, "csv_path", p);
        }
        if let Some(seed) = d.seed {
            kv(&mut s, "seed", seed.to_string());
        }
        let m = &self.model;
        s.push_str("\n[model]\n");
        kv(&mut s, "family", if m.hidden == 0 { "logistic" } else { "mlp" }.into());
        kv(&mut s, "hidden", m.hidden.to_string());
        kv(&mut s, "learning_rate", m.learning_rate.to_string());
        kv(&mut s, "epochs", m.epochs.to_string());
        kv(&mut s, "batch_size", m.batch_size.to_string());
        let c = &self.clustering;
        s.push_str("\n[clustering]\n");
        kv(&mut s, "enabled", c.enabled.to_string());
        if let Some(e) = c.epsilon1 {
            kv(&mut s, "epsilon1", e.to_string());
        }
        if let Some(e) = c.epsilon2 {
            kv(&mut s, "epsilon2", e.to_string());
        }
        kv(&mut s, "epsilon1_relative", c.epsilon1_relative.to_string());
        kv(&mut s, "epsilon2_factor", c.epsilon2_factor.to_string());
        kv(&mut s, "split_every", c.split_every.to_string());
        kv(&mut s, "merge_gamma", c.merge_gamma.to_string());
        kv(
            &mut s,
            "merge_mode",
            match c.merge_mode {
                MergeMode::Merge => "merge",
                MergeMode::LogOnly => "log-only",
                MergeMode::Off => "off",
            }
            .into(),
        );
        kv(
            &mut s,
            "similarity",
            match c.similarity {
                SimilaritySource::Gradient => "gradient",
                SimilaritySource::Delta => "delta",
            }
            .into(),
        );
        let l = &self.ssl;
        s.push_str("\n[ssl]\n");
        kv(&mut s, "enabled", l.enabled.to_string());
        kv(&mut s, "phi", l.phi.to_string());
        kv(&mut s, "label_every", l.label_every.to_string());
        kv(&mut s, "lambda", l.lambda.to_string());
        kv(&mut s, "holdout_fraction", l.holdout_fraction.to_string());
        kv(&mut s, "inference_cycles", l.inference_cycles.to_string());
        kv(
            &mut s,
            "candidates",
            match l.candidates {
                CandidateScope::Cloud => "cloud",
                CandidateScope::Edge => "edge",
            }
            .into(),
        );
        kv(&mut s, "latency_target", l.latency_target.to_string());
        let n = &self.network;
        s.push_str("\n[network]\n");
        kv(&mut s, "bandwidth_hz", n.bandwidth_hz.to_string());
        if let Some(q) = n.subchannels {
            kv(&mut s, "subchannels", q.to_string());
        }
        kv(&mut s, "g0_db", n.g0_db.to_string());
        kv(&mut s, "d0_m", n.d0_m.to_string());
        kv(&mut s, "n0_w", n.n0_w.to_string());
        kv(&mut s, "cpu_hz_min", n.cpu_hz_min.to_string());
        kv(&mut s, "cpu_hz_max", n.cpu_hz_max.to_string());
        kv(&mut s, "power_dbm_min", n.power_dbm_min.to_string());
        kv(&mut s, "power_dbm_max", n.power_dbm_max.to_string());
        kv(&mut s, "distance_min_m", n.distance_min_m.to_string());
        kv(&mut s, "distance_max_m", n.distance_max_m.to_string());
        kv(&mut s, "cloud_rate_bps", n.cloud_rate_bps.to_string());
        kv(&mut s, "cycles_per_sample", n.cycles_per_sample.to_string());
        kv(&mut s, "deadline_kappa", n.deadline_kappa.to_string());
        if let Some(v) = n.deadline_s {
            kv(&mut s, "deadline_s", v.to_string());
        }
        if let Some(v) = n.t_tot {
            kv(&mut s, "t_tot", v.to_string());
        }
        kv(&mut s, "fading", n.fading.to_string());
        let r = &self.run;
        s.push_str("\n[run]\n");
        kv(&mut s, "rounds", r.rounds.to_string());
        kv(&mut s, "seed", r.seed.to_string());
        kv(&mut s, "variant", r.variant.to_string());
        kv(&mut s, "metrics", r.metrics.clone());
        kv(&mut s, "events", r.events.clone());
        kv(&mut s, "convergence_eps", r.convergence_eps.to_string());
        kv(&mut s, "convergence_window", r.convergence_window.to_string());
        s
    }

    /// Equality ignoring the parser's bookkeeping.
    pub fn same_settings(&self, other: &ExperimentConfig) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.defaults_applied.clear();
        b.defaults_applied.clear();
        a == b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[topology]\nedges = 2\ndevices = 8\n[data]\nmode = label-permutation\n";

    #[test]
    fn minimal_config_takes_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.topology.devices, 8);
        assert_eq!(c.ssl.phi, 0.8);
        assert_eq!(c.run.rounds, 200);
        assert_eq!(c.model.learning_rate, 0.01);
        assert!(c.defaults_applied.iter().any(|(k, v)| k == "ssl.phi" && v == "0.8"));
        assert!(!c.defaults_applied.iter().any(|(k, _)| k == "topology.edges"));
    }

    #[test]
    fn phi_out_of_domain_names_key() {
        let e = parse_config(&format!("{MINIMAL}[ssl]\nphi = 1.5\n")).unwrap_err();
        assert!(matches!(&e, ConfigError::Domain { key, .. } if key == "ssl.phi"), "{e}");
    }

    #[test]
    fn unknown_and_missing_keys() {
        let e = parse_config(&format!("{MINIMAL}[ssl]\nbogus = 1\n")).unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey("ssl.bogus".into()));
        let e = parse_config("[topology]\nedges = 2\n[data]\nmode = csv\n").unwrap_err();
        assert_eq!(e, ConfigError::Missing("topology.devices".into()));
        let e = parse_config("[topology]\nedges = 1\ndevices = 2\n[data]\nmode = csv\n").unwrap_err();
        assert!(matches!(&e, ConfigError::Domain { key, .. } if key == "data.csv_path"));
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let e = parse_config("[topology\n").unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { line: 1, .. }));
        let e = parse_config("edges = 1\n").unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { line: 1, .. }));
        let e = parse_config("[topology]\nedges 1\n").unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { line: 2, .. }));
    }

    #[test]
    fn text_form_round_trips() {
        let text = format!(
            "{MINIMAL}[clustering]\nepsilon1 = 0.05\n[network]\nt_tot = 1e4\nsubchannels = 3\n[run]\nvariant = hfl-ssl\n"
        );
        let c = parse_config(&text).unwrap();
        let again = parse_config(&c.to_text()).unwrap();
        assert!(c.same_settings(&again));
        assert!(again.defaults_applied.iter().all(|(k, _)| {
            // only keys without a canonical text form may still be defaulted
            k.starts_with("data.csv") || k == "data.seed"
        }));
    }

    #[test]
    fn variants_adjust_settings() {
        let mut c = parse_config(MINIMAL).unwrap();
        c.run.variant = Variant::CflFullyLabeled;
        let e = c.effective();
        assert_eq!(e.data.labeled_fraction, 1.0);
        assert!(!e.ssl.enabled);
        c.run.variant = Variant::HflSsl;
        assert!(!c.effective().clustering.enabled);
    }

    #[test]
    fn relative_thresholds() {
        let c = parse_config(MINIMAL).unwrap();
        let (e1, e2) = c.clustering.thresholds(2.0);
        assert!((e1 - 0.8).abs() < 1e-15);
        assert!((e2 - 1.28).abs() < 1e-12);
    }
}
