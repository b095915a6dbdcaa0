//! Round state machine: scheduling, local training, pseudo-labeling, edge
//! and cloud aggregation, cluster splits and merges, latency accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::cluster::{
    bipartition, check_split_conditions, cosine, similarity_matrix, ClusterError, ClusterStatus,
    ClusterTree, TreeUpdate,
};
use crate::config::{
    CandidateScope, DataSource, ExperimentConfig, MergeMode, SimilaritySource,
};
use crate::data::{
    load_csv_dataset, make_task_universe, partition_csv, partition_devices, CsvSchema, DataError,
    DeviceDataset, PartitionSpec, UniverseSpec,
};
use crate::model::{self, GradientUpdate, ModelError, ModelParams};
use crate::net::{
    dbm_to_watts, device_timing, edge_round_time, global_round_time, schedule_round,
    upload_time, DeadlinePolicy, DeviceRadio, DeviceTiming, EdgeConfig, EdgeSchedule, LinkParams,
    NetError,
};
use crate::ssl::{
    self, inject, labeling_accuracy, pseudo_label, reserve_holdout, select_best_model,
    InferenceCost, ObjectiveTerm, SelectionDecision, SslError,
};

/// Share of each device's CSV rows kept aside for test accuracy.
pub const CSV_TEST_FRACTION: f64 = 0.2;

const TAG_TRAIN: u64 = 1;
const TAG_FADING: u64 = 2;
const TAG_RADIO: u64 = 3;
const TAG_INIT: u64 = 4;
const TAG_HOLDOUT: u64 = 5;
const TAG_PARTITION: u64 = 6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("aggregation: {0}")]
    Aggregation(String),
    #[error("setup: {0}")]
    Setup(String),
    #[error("run already terminated")]
    Terminated,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a path of ids.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Seed of device `device`'s local solver in round `round`.
pub fn training_seed(seed: u64, round: usize, device: usize) -> u64 {
    mix_seed(seed, &[TAG_TRAIN, round as u64, device as u64])
}

/// Weighted mean of equally shaped models; weights are normalised to sum
/// to one and accumulated in the given order. Returns the normalised weights.
pub fn weighted_average(
    models: &[&ModelParams],
    weights: &[f64],
) -> Result<(ModelParams, Vec<f64>), SimError> {
    let first = models
        .first()
        .ok_or_else(|| SimError::Aggregation("nothing to aggregate".into()))?;
    if models.len() != weights.len() {
        return Err(SimError::Aggregation(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(SimError::Aggregation("weights must be positive".into()));
    }
    for m in models {
        if !m.same_shape(first) {
            return Err(ModelError::DimensionMismatch {
                expected: first.len(),
                found: m.len(),
            }
            .into());
        }
    }
    let total: f64 = weights.iter().sum();
    let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut acc = vec![0.0; first.len()];
    for (m, w) in models.iter().zip(&norm) {
        for (a, x) in acc.iter_mut().zip(m.weights()) {
            *a += w * x;
        }
    }
    Ok((first.with_weights(acc)?, norm))
}

/// Device-level aggregation with weights proportional to training-set size.
pub fn edge_aggregate(models: &[&ModelParams], sample_counts: &[f64]) -> Result<ModelParams, SimError> {
    weighted_average(models, sample_counts).map(|(m, _)| m)
}

/// Edge-level aggregation with weights proportional to per-edge sample totals.
pub fn cloud_aggregate(edge_models: &[&ModelParams], sample_totals: &[f64]) -> Result<ModelParams, SimError> {
    weighted_average(edge_models, sample_totals).map(|(m, _)| m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationLevel {
    Edge(usize),
    Cloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRef {
    Cluster(usize),
    Global,
}

/// Provenance of one aggregation: at edge level contributors are device
/// ids, at cloud level edge ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationRecord {
    pub round: usize,
    pub level: AggregationLevel,
    pub contributors: Vec<usize>,
    pub weights: Vec<f64>,
    pub result: ModelRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    RoundBudget,
    TimeBudget,
    Convergence,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RoundBudget => "round budget",
            Self::TimeBudget => "time budget",
            Self::Convergence => "convergence",
        })
    }
}

/// One row of the per-round metrics file. Column order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run: String,
    pub variant: String,
    pub seed: u64,
    pub labeled_fraction: f64,
    pub phi: f64,
    pub round: usize,
    pub cum_time_s: f64,
    pub round_time_s: f64,
    pub test_acc_min: f64,
    pub test_acc_mean: f64,
    pub test_acc_max: f64,
    pub labeling_acc_mean: Option<f64>,
    pub injected_fraction: f64,
    pub labeling_latency_mean: f64,
    pub clusters: usize,
    pub objective: f64,
    pub drops: usize,
    pub mean_loss: f64,
}

pub const METRICS_COLUMNS: &[&str] = &[
    "run",
    "variant",
    "seed",
    "labeled_fraction",
    "phi",
    "round",
    "cum_time_s",
    "round_time_s",
    "test_acc_min",
    "test_acc_mean",
    "test_acc_max",
    "labeling_acc_mean",
    "injected_fraction",
    "labeling_latency_mean",
    "clusters",
    "objective",
    "drops",
    "mean_loss",
];

/// Everything one round produced.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub metrics: MetricsRow,
    pub schedules: Vec<EdgeSchedule>,
    pub records: Vec<AggregationRecord>,
    pub selections: Vec<SelectionDecision>,
    pub events: Vec<Value>,
    pub round_time: f64,
}

#[derive(Debug, Clone)]
struct EdgeState {
    config: EdgeConfig,
    devices: Vec<usize>,
    root: usize,
    /// Round in which the root split; `None` while the edge runs plain HFL.
    split_round: Option<usize>,
}

struct Trained {
    device: usize,
    edge: usize,
    cluster: usize,
    model: ModelParams,
    start: ModelParams,
    weight: f64,
}

/// Full simulation state; a run is a pure function of the configuration.
pub struct Simulation {
    cfg: ExperimentConfig,
    pub run_label: String,
    pub round: usize,
    pub global: ModelParams,
    pub tree: ClusterTree,
    pub devices: Vec<DeviceDataset>,
    pub radios: Vec<DeviceRadio>,
    device_edge: Vec<usize>,
    edges: Vec<EdgeState>,
    pub cum_time: f64,
    next_label: Vec<Option<usize>>,
    selections: Vec<Option<(Vec<u8>, Vec<f64>)>>,
    latency_reached: Vec<Option<f64>>,
    loss_history: BTreeMap<usize, Vec<f64>>,
    trained_clusters: BTreeSet<usize>,
    last_deltas: BTreeMap<usize, GradientUpdate>,
    pub objective: f64,
    pub last_round_time: f64,
}

/// Generates (or loads) and partitions the device datasets.
pub fn build_devices(cfg: &ExperimentConfig) -> Result<Vec<DeviceDataset>, SimError> {
    let d = &cfg.data;
    let seed = cfg.data_seed();
    let spec = PartitionSpec {
        n_devices: cfg.topology.devices,
        samples_per_device: d.samples_per_device,
        labeled_fraction: d.labeled_fraction,
        max_classes: d.max_classes,
        assignment: d.assignment.clone(),
        test_samples_per_device: d.test_samples_per_device,
    };
    Ok(match d.source {
        DataSource::Synthetic(mode) => {
            let mut u = UniverseSpec::new(d.distributions, d.classes, d.features, mode);
            u.class_sep = d.class_sep;
            u.noise_std = d.noise_std;
            let universe = make_task_universe(&u, seed)?;
            partition_devices(&universe, &spec, mix_seed(seed, &[TAG_PARTITION]))?
        }
        DataSource::Csv => {
            let path = d
                .csv_path
                .as_ref()
                .ok_or_else(|| SimError::Setup("csv mode without data.csv_path".into()))?;
            let schema = CsvSchema {
                n_features: d.features,
                n_classes: d.classes,
            };
            let pool = load_csv_dataset(path.as_ref(), &schema)?;
            partition_csv(&pool, &spec, CSV_TEST_FRACTION, mix_seed(seed, &[TAG_PARTITION]))?
        }
    })
}

/// Seeded device radios: CPU frequency, transmit power and distance drawn
/// uniformly from the configured ranges.
pub fn build_radios(cfg: &ExperimentConfig, device_edge: &[usize]) -> Vec<DeviceRadio> {
    let n = &cfg.network;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.run.seed, &[TAG_RADIO]));
    device_edge
        .iter()
        .enumerate()
        .map(|(k, &edge_id)| DeviceRadio {
            device_id: k,
            cpu_hz: rng.random_range(n.cpu_hz_min..=n.cpu_hz_max),
            tx_power_w: dbm_to_watts(rng.random_range(n.power_dbm_min..=n.power_dbm_max)),
            distance_m: rng.random_range(n.distance_min_m..=n.distance_max_m),
            edge_id,
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl Simulation {
    /// Builds data, radios and the initial model from the configuration;
    /// variant adjustments are applied here.
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, SimError> {
        let cfg = cfg.effective();
        let devices = build_devices(&cfg)?;
        let device_edge: Vec<usize> = (0..cfg.topology.devices)
            .map(|k| cfg.topology.device_edge.edge_of(k, cfg.topology.devices, cfg.topology.edges))
            .collect();
        let radios = build_radios(&cfg, &device_edge);
        Self::new(cfg, devices, radios)
    }

    /// Builds a simulation over caller-provided devices and radios. `cfg`
    /// is used as given (no variant adjustment).
    pub fn new(
        cfg: ExperimentConfig,
        mut devices: Vec<DeviceDataset>,
        radios: Vec<DeviceRadio>,
    ) -> Result<Self, SimError> {
        let k_total = devices.len();
        if k_total == 0 || radios.len() != k_total {
            return Err(SimError::Setup(format!(
                "{} devices but {} radios",
                k_total,
                radios.len()
            )));
        }
        let n_edges = cfg.topology.edges;
        let device_edge: Vec<usize> = radios.iter().map(|r| r.edge_id).collect();
        if device_edge.iter().any(|&e| e >= n_edges) {
            return Err(SimError::Setup("device assigned to unknown edge".into()));
        }
        let dim = devices[0].test.features.cols().max(devices[0].labeled.features.cols());
        let seed = cfg.run.seed;
        let global = ModelParams::init_uniform(
            dim,
            cfg.model.hidden,
            cfg.data.classes,
            mix_seed(seed, &[TAG_INIT]),
        )?;
        if cfg.ssl.enabled {
            for dev in devices.iter_mut() {
                let s = mix_seed(seed, &[TAG_HOLDOUT, dev.device_id as u64]);
                reserve_holdout(dev, cfg.ssl.holdout_fraction, s);
            }
        }
        let mut tree = ClusterTree::new();
        let mut edges = Vec::with_capacity(n_edges);
        for e in 0..n_edges {
            let members: Vec<usize> = (0..k_total).filter(|&k| device_edge[k] == e).collect();
            let root = tree.add_root(e, members.iter().copied().collect(), global.clone());
            let q = cfg
                .network
                .subchannels
                .unwrap_or_else(|| members.len().div_ceil(2))
                .max(1);
            let deadline = match cfg.network.deadline_s {
                Some(s) => DeadlinePolicy::FixedSeconds(s),
                None => DeadlinePolicy::MedianMultiple(cfg.network.deadline_kappa),
            };
            edges.push(EdgeState {
                config: EdgeConfig {
                    edge_id: e,
                    bandwidth_hz: cfg.network.bandwidth_hz,
                    subchannels: q,
                    cloud_rate_bps: cfg.network.cloud_rate_bps,
                    deadline,
                },
                devices: members,
                root,
                split_round: None,
            });
        }
        let first_label = (cfg.ssl.enabled && !cfg.clustering.enabled).then_some(cfg.ssl.label_every);
        let latency_reached = devices
            .iter()
            .map(|d| (d.initial_unlabeled == 0).then_some(0.0))
            .collect();
        Ok(Self {
            run_label: "run".into(),
            round: 0,
            global,
            tree,
            next_label: vec![first_label; k_total],
            selections: vec![None; k_total],
            latency_reached,
            devices,
            radios,
            device_edge,
            edges,
            cum_time: 0.0,
            loss_history: BTreeMap::new(),
            trained_clusters: BTreeSet::new(),
            last_deltas: BTreeMap::new(),
            objective: 0.0,
            last_round_time: 0.0,
            cfg,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn edge_of(&self, device: usize) -> usize {
        self.device_edge[device]
    }

    pub fn edge_config(&self, edge: usize) -> &EdgeConfig {
        &self.edges[edge].config
    }

    /// Round in which `edge` left the plain hierarchical phase.
    pub fn edge_split_round(&self, edge: usize) -> Option<usize> {
        self.edges[edge].split_round
    }

    pub fn link_params(&self) -> LinkParams {
        let n = &self.cfg.network;
        LinkParams {
            g0: crate::net::db_to_linear(n.g0_db),
            d0: n.d0_m,
            n0: n.n0_w,
            cycles_per_sample: n.cycles_per_sample,
            epochs: self.cfg.model.epochs,
            model_bits: self.global.size_bits() as f64,
        }
    }

    /// Model a device currently trains from and is evaluated with.
    pub fn device_model(&self, device: usize) -> Result<&ModelParams, SimError> {
        let c = self
            .tree
            .leaf_of(device)
            .ok_or_else(|| SimError::Setup(format!("device {device} has no cluster")))?;
        Ok(&self.tree.node(c)?.model)
    }

    /// Simulated time at which each device reached the labeling target.
    pub fn latency_reached(&self) -> &[Option<f64>] {
        &self.latency_reached
    }

    /// Reason the run should stop before starting another round.
    pub fn termination(&self) -> Option<Termination> {
        if self.round >= self.cfg.run.rounds {
            return Some(Termination::RoundBudget);
        }
        if self.round > 0 && self.cfg.network.t_tot.is_some_and(|t| self.cum_time >= t) {
            return Some(Termination::TimeBudget);
        }
        if self.converged() {
            return Some(Termination::Convergence);
        }
        None
    }

    fn converged(&self) -> bool {
        let eps = self.cfg.run.convergence_eps;
        let w = self.cfg.run.convergence_window;
        if eps <= 0.0 || self.round == 0 {
            return false;
        }
        let leaves: Vec<usize> = self.tree.leaves().map(|n| n.cluster_id).collect();
        leaves.iter().all(|c| match self.loss_history.get(c) {
            Some(h) if h.len() > w => {
                let old = h[h.len() - 1 - w];
                let new = h[h.len() - 1];
                old <= 0.0 || (old - new) / old < eps
            }
            _ => false,
        })
    }

    /// Executes one round and returns what it produced.
    pub fn run_round(&mut self) -> Result<RoundOutcome, SimError> {
        if self.termination().is_some() {
            return Err(SimError::Terminated);
        }
        self.round += 1;
        let r = self.round;
        let seed = self.cfg.run.seed;
        let mut events = Vec::new();
        let mut records = Vec::new();
        let link = self.link_params();

        // 1. scheduling
        let mut schedules = Vec::with_capacity(self.edges.len());
        let mut actual: BTreeMap<usize, DeviceTiming> = BTreeMap::new();
        for edge in &self.edges {
            let mut cands = Vec::new();
            for &k in &edge.devices {
                if self.tree.leaf_of(k).is_none() {
                    continue;
                }
                let t = device_timing(&self.radios[k], &edge.config, &link, self.devices[k].training_len(), 1.0)?;
                cands.push((k, t));
            }
            let mut sched = schedule_round(&edge.config, &cands);
            for s in &sched.selected {
                let t = if self.cfg.network.fading {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                        seed,
                        &[TAG_FADING, r as u64, s.device_id as u64],
                    ));
                    let fade: f64 = rng.sample(Exp1);
                    let k = s.device_id;
                    device_timing(&self.radios[k], &edge.config, &link, self.devices[k].training_len(), fade)?
                } else {
                    s.estimate
                };
                actual.insert(s.device_id, t);
            }
            if self.cfg.network.fading {
                sched.dropped = sched
                    .selected
                    .iter()
                    .filter(|s| actual[&s.device_id].total() > sched.deadline_s)
                    .map(|s| s.device_id)
                    .collect();
            }
            events.push(json!({
                "type": "schedule",
                "round": r,
                "edge": edge.config.edge_id,
                "selected": sched.selected.iter().map(|s| s.device_id).collect::<Vec<_>>(),
                "beta": sched.bandwidth_share(),
                "deadline_s": sched.deadline_s,
                "dropped": sched.dropped,
            }));
            for &k in &sched.dropped {
                events.push(json!({
                    "type": "drop",
                    "round": r,
                    "edge": edge.config.edge_id,
                    "device": k,
                    "time_s": actual[&k].total(),
                    "deadline_s": sched.deadline_s,
                }));
            }
            if !sched.selected.is_empty() && sched.participants().next().is_none() {
                warn!("round {r}: every scheduled device on edge {} missed the deadline", edge.config.edge_id);
            }
            schedules.push(sched);
        }

        // 2. local training
        let mut participants: Vec<(usize, usize)> = schedules
            .iter()
            .flat_map(|s| s.participants().map(move |p| (p.device_id, s.edge_id)))
            .collect();
        participants.sort_unstable();
        let m = &self.cfg.model;
        let mut trained = Vec::with_capacity(participants.len());
        for &(k, edge) in &participants {
            let cluster = self.tree.leaf_of(k).expect("scheduled device has a cluster");
            let start = self.tree.node(cluster)?.model.clone();
            let data = self.devices[k].training_set();
            let model = model::sgd_train(&start, &data, m.epochs, m.batch_size, m.learning_rate, training_seed(seed, r, k))?;
            trained.push(Trained {
                device: k,
                edge,
                cluster,
                weight: data.len() as f64,
                model,
                start,
            });
        }
        self.last_deltas.clear();
        for t in &trained {
            let grad = t.start.weights().iter().zip(t.model.weights()).map(|(a, b)| a - b).collect();
            self.last_deltas.insert(t.device, GradientUpdate { grad, sample_count: t.weight as usize });
        }

        // 3. labeling
        let selections = if self.cfg.ssl.enabled {
            self.labeling_phase(r, &mut events)?
        } else {
            Vec::new()
        };

        // 4. edge aggregation, per cluster
        let mut groups: BTreeMap<(usize, usize), Vec<&Trained>> = BTreeMap::new();
        for t in &trained {
            groups.entry((t.cluster, t.edge)).or_default().push(t);
        }
        let mut partials: Vec<(usize, usize, ModelParams, f64)> = Vec::new();
        for ((cluster, edge), ts) in &groups {
            let models: Vec<&ModelParams> = ts.iter().map(|t| &t.model).collect();
            let w: Vec<f64> = ts.iter().map(|t| t.weight).collect();
            let (agg, norm) = weighted_average(&models, &w)?;
            records.push(AggregationRecord {
                round: r,
                level: AggregationLevel::Edge(*edge),
                contributors: ts.iter().map(|t| t.device).collect(),
                weights: norm,
                result: ModelRef::Cluster(*cluster),
            });
            if !self.spans_edges(*cluster)? {
                self.tree.node_mut(*cluster)?.model = agg.clone();
            }
            self.trained_clusters.insert(*cluster);
            partials.push((*cluster, *edge, agg, w.iter().sum()));
        }

        // 5. split checks
        if self.cfg.clustering.enabled && r % self.cfg.clustering.split_every == 0 {
            self.split_phase(r, &mut events)?;
        }

        // 6. cloud aggregation
        self.cloud_phase(r, &partials, &mut records)?;

        // 7. cloud similarity check among specialized models
        if self.cfg.clustering.enabled && self.cfg.clustering.merge_mode != MergeMode::Off {
            self.merge_phase(r, &mut events)?;
        }

        // 8. latency accounting
        let mut per_edge = Vec::new();
        for s in &schedules {
            let mut times: Vec<f64> = s.participants().map(|p| actual[&p.device_id].total()).collect();
            if !s.dropped.is_empty() {
                times.push(s.deadline_s);
            }
            let (edge_time, idle) = edge_round_time(&times);
            if idle {
                continue;
            }
            let uploads = partials.iter().filter(|p| p.1 == s.edge_id).count();
            let cloud = if uploads == 0 {
                0.0
            } else {
                upload_time(uploads as f64 * link.model_bits, self.edges[s.edge_id].config.cloud_rate_bps)?
            };
            per_edge.push((edge_time, cloud));
        }
        let round_time = if per_edge.is_empty() {
            0.0
        } else {
            global_round_time(&per_edge)
        };
        self.cum_time += round_time;
        self.last_round_time = round_time;
        let target = self.cfg.ssl.latency_target;
        for (k, dev) in self.devices.iter().enumerate() {
            if self.latency_reached[k].is_none()
                && dev.injected.len() as f64 >= target * dev.initial_unlabeled as f64
            {
                self.latency_reached[k] = Some(self.cum_time);
            }
        }
        events.push(json!({
            "type": "round_end",
            "round": r,
            "round_time_s": round_time,
            "cum_time_s": self.cum_time,
            "participants": participants.len(),
        }));

        let drops = schedules.iter().map(|s| s.dropped.len()).sum();
        let metrics = self.metrics(r, round_time, drops)?;
        Ok(RoundOutcome {
            metrics,
            schedules,
            records,
            selections,
            events,
            round_time,
        })
    }

    fn spans_edges(&self, cluster: usize) -> Result<bool, SimError> {
        let node = self.tree.node(cluster)?;
        Ok(node.members.iter().any(|&k| self.device_edge[k] != node.edge_id))
    }

    fn labeling_phase(&mut self, r: usize, events: &mut Vec<Value>) -> Result<Vec<SelectionDecision>, SimError> {
        let phi = self.cfg.ssl.phi;
        let mut out = Vec::new();
        for k in 0..self.devices.len() {
            if self.next_label[k] != Some(r) {
                continue;
            }
            if self.devices[k].unlabeled.rows() == 0 {
                self.next_label[k] = Some(r + self.cfg.ssl.label_every);
                continue;
            }
            let edge = self.device_edge[k];
            let own = self.tree.leaf_of(k).expect("device has a cluster");
            let candidates: Vec<(usize, &ModelParams)> = if self.cfg.clustering.enabled {
                self.tree
                    .specialized()
                    .filter(|n| match self.cfg.ssl.candidates {
                        CandidateScope::Cloud => true,
                        CandidateScope::Edge => {
                            n.edge_id == edge || n.members.iter().any(|&d| self.device_edge[d] == edge)
                        }
                    })
                    // a fresh child is still a copy of its parent until it has been aggregated once
                    .filter(|n| self.trained_clusters.contains(&n.cluster_id))
                    .map(|n| (n.cluster_id, &n.model))
                    .collect()
            } else {
                vec![(own, &self.tree.node(own)?.model)]
            };
            if candidates.is_empty() {
                debug!("round {r}: device {k} has no trained candidate yet, retrying next round");
                self.next_label[k] = Some(r + 1);
                continue;
            }
            self.next_label[k] = Some(r + self.cfg.ssl.label_every);
            let cost = InferenceCost {
                cycles_per_sample: self.cfg.ssl.inference_cycles,
                cpu_hz: self.radios[k].cpu_hz,
            };
            let decision = select_best_model(&self.devices[k], &candidates, phi, cost)?;
            let chosen = candidates
                .iter()
                .find(|(id, _)| *id == decision.chosen)
                .map(|(_, m)| *m)
                .expect("chosen model is a candidate");
            let batch = pseudo_label(chosen, &self.devices[k], phi, decision.chosen, r)?;
            inject(&mut self.devices[k], &batch)?;
            events.push(json!({
                "type": "injection",
                "round": r,
                "device": k,
                "count": batch.len(),
                "source_model": batch.source_model_id,
                "mean_confidence": batch.mean_confidence(),
                "remaining": self.devices[k].unlabeled.rows(),
            }));
            self.selections[k] = Some((
                decision.z.clone(),
                decision.scores.iter().map(|s| s.scalar()).collect(),
            ));
            out.push(decision);
        }
        Ok(out)
    }

    fn split_phase(&mut self, r: usize, events: &mut Vec<Value>) -> Result<(), SimError> {
        let ids: Vec<usize> = self
            .tree
            .leaves()
            .filter(|n| n.status == ClusterStatus::Active && n.born < r && n.members.len() >= 2)
            .map(|n| n.cluster_id)
            .collect();
        for c in ids {
            if self.spans_edges(c)? {
                continue;
            }
            let node = self.tree.node(c)?;
            let model = node.model.clone();
            let is_root = node.parent.is_none();
            let edge = node.edge_id;
            let members: Vec<usize> = node.members.iter().copied().collect();
            let mut grads = Vec::new();
            let mut zero = Vec::new();
            for &k in &members {
                let g = match self.cfg.clustering.similarity {
                    SimilaritySource::Gradient => model::gradient(&model, &self.devices[k].training_set())?,
                    SimilaritySource::Delta => match self.last_deltas.get(&k) {
                        Some(d) => d.clone(),
                        None => continue,
                    },
                };
                if g.norm() == 0.0 {
                    debug!("round {r}: device {k} has a zero update, left out of the similarity check");
                    zero.push(k);
                } else {
                    grads.push((k, g));
                }
            }
            if grads.len() < 2 {
                continue;
            }
            let norms: Vec<f64> = grads.iter().map(|(_, g)| g.norm()).collect();
            let (eps1, eps2) = self.cfg.clustering.thresholds(mean(&norms));
            let updates: Vec<GradientUpdate> = grads.iter().map(|(_, g)| g.clone()).collect();
            let weights: Vec<f64> = grads.iter().map(|(_, g)| g.sample_count.max(1) as f64).collect();
            let check = check_split_conditions(&updates, &weights, eps1, eps2);
            events.push(json!({
                "type": "split_check",
                "round": r,
                "cluster": c,
                "agg_norm": check.agg_norm,
                "max_norm": check.max_norm,
                "epsilon1": eps1,
                "epsilon2": eps2,
                "split": check.split,
            }));
            if check.split {
                let sim = similarity_matrix(&grads)?;
                let (mut g1, g2) = bipartition(&sim)?;
                g1.extend(zero);
                g1.sort_unstable();
                let children = self.tree.update_tree(c, TreeUpdate::Split(g1.clone(), g2.clone()), r)?;
                for &child in &children {
                    self.loss_history.remove(&child);
                }
                if is_root && self.edges[edge].split_round.is_none() {
                    self.edges[edge].split_round = Some(r);
                    if self.cfg.ssl.enabled {
                        for &k in &self.edges[edge].devices {
                            if self.next_label[k].is_none() {
                                self.next_label[k] = Some(r + 1);
                            }
                        }
                    }
                }
                events.push(json!({
                    "type": "split",
                    "round": r,
                    "cluster": c,
                    "edge": edge,
                    "children": children,
                    "groups": [g1, g2],
                    "agg_norm": check.agg_norm,
                    "max_norm": check.max_norm,
                    "epsilon1": eps1,
                    "epsilon2": eps2,
                }));
                events.push(self.tree_snapshot(r));
            } else if check.stationary(eps1) && !is_root {
                self.tree.update_tree(c, TreeUpdate::Stop, r)?;
                events.push(json!({
                    "type": "stop",
                    "round": r,
                    "cluster": c,
                    "agg_norm": check.agg_norm,
                    "max_norm": check.max_norm,
                }));
            }
        }
        Ok(())
    }

    fn cloud_phase(
        &mut self,
        r: usize,
        partials: &[(usize, usize, ModelParams, f64)],
        records: &mut Vec<AggregationRecord>,
    ) -> Result<(), SimError> {
        if partials.is_empty() {
            return Ok(());
        }
        let models: Vec<&ModelParams> = partials.iter().map(|p| &p.2).collect();
        let totals: Vec<f64> = partials.iter().map(|p| p.3).collect();
        let (global, norm) = weighted_average(&models, &totals)?;
        records.push(AggregationRecord {
            round: r,
            level: AggregationLevel::Cloud,
            contributors: partials.iter().map(|p| p.1).collect(),
            weights: norm,
            result: ModelRef::Global,
        });

        let mut unsplit_roots = Vec::new();
        for e in &self.edges {
            if self.tree.node(e.root)?.is_leaf() {
                unsplit_roots.push(e.root);
            }
        }
        let root_partials: Vec<&(usize, usize, ModelParams, f64)> =
            partials.iter().filter(|p| unsplit_roots.contains(&p.0)).collect();
        let root_model = if root_partials.len() == partials.len() {
            Some(global.clone())
        } else if root_partials.is_empty() {
            None
        } else {
            let m: Vec<&ModelParams> = root_partials.iter().map(|p| &p.2).collect();
            let w: Vec<f64> = root_partials.iter().map(|p| p.3).collect();
            let (agg, norm) = weighted_average(&m, &w)?;
            records.push(AggregationRecord {
                round: r,
                level: AggregationLevel::Cloud,
                contributors: root_partials.iter().map(|p| p.1).collect(),
                weights: norm,
                result: ModelRef::Cluster(unsplit_roots[0]),
            });
            Some(agg)
        };
        if let Some(m) = root_model {
            for &root in &unsplit_roots {
                self.tree.node_mut(root)?.model = m.clone();
            }
        }

        let mut by_cluster: BTreeMap<usize, Vec<&(usize, usize, ModelParams, f64)>> = BTreeMap::new();
        for p in partials {
            if !unsplit_roots.contains(&p.0) && self.tree.node(p.0)?.is_leaf() && self.spans_edges(p.0)? {
                by_cluster.entry(p.0).or_default().push(p);
            }
        }
        for (c, ps) in by_cluster {
            let m: Vec<&ModelParams> = ps.iter().map(|p| &p.2).collect();
            let w: Vec<f64> = ps.iter().map(|p| p.3).collect();
            let (agg, norm) = weighted_average(&m, &w)?;
            records.push(AggregationRecord {
                round: r,
                level: AggregationLevel::Cloud,
                contributors: ps.iter().map(|p| p.1).collect(),
                weights: norm,
                result: ModelRef::Cluster(c),
            });
            self.tree.node_mut(c)?.model = agg;
        }
        self.global = global;
        Ok(())
    }

    fn merge_phase(&mut self, r: usize, events: &mut Vec<Value>) -> Result<(), SimError> {
        let specialized: Vec<usize> = self.tree.specialized().map(|n| n.cluster_id).collect();
        if specialized.len() <= 2 {
            return Ok(());
        }
        let eligible: Vec<usize> = specialized
            .into_iter()
            .filter(|&c| {
                let n = self.tree.node(c).expect("listed");
                n.born < r && self.trained_clusters.contains(&c)
            })
            .collect();
        let centered: Vec<Vec<f64>> = eligible
            .iter()
            .map(|&c| {
                let m = &self.tree.node(c).expect("listed").model;
                m.weights().iter().zip(self.global.weights()).map(|(a, g)| a - g).collect()
            })
            .collect();
        let mut pairs = Vec::new();
        for i in 0..eligible.len() {
            for j in i + 1..eligible.len() {
                match cosine(&centered[i], &centered[j]) {
                    Ok(s) if s > self.cfg.clustering.merge_gamma => pairs.push((s, eligible[i], eligible[j])),
                    Ok(_) => {}
                    Err(_) => debug!("round {r}: zero centered model in similarity check"),
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used = BTreeSet::new();
        for (s, a, b) in pairs {
            if used.contains(&a) || used.contains(&b) {
                continue;
            }
            used.insert(a);
            used.insert(b);
            if self.cfg.clustering.merge_mode == MergeMode::LogOnly {
                events.push(json!({"type": "merge_candidate", "round": r, "clusters": [a, b], "similarity": s}));
                continue;
            }
            let size = |c: usize| -> Result<f64, SimError> {
                Ok(self
                    .tree
                    .node(c)?
                    .members
                    .iter()
                    .map(|&k| self.devices[k].training_len() as f64)
                    .sum::<f64>()
                    .max(1.0))
            };
            let (wa, wb) = (size(a)?, size(b)?);
            let (merged, _) = weighted_average(&[&self.tree.node(a)?.model, &self.tree.node(b)?.model], &[wa, wb])?;
            self.tree.merge(a, b, merged)?;
            self.loss_history.remove(&a);
            self.loss_history.remove(&b);
            events.push(json!({"type": "merge", "round": r, "into": a, "from": b, "similarity": s}));
            events.push(self.tree_snapshot(r));
        }
        Ok(())
    }

    /// Leaves of the cluster forest as a JSON event.
    pub fn tree_snapshot(&self, r: usize) -> Value {
        let leaves: Vec<Value> = self
            .tree
            .leaves()
            .map(|n| {
                json!({
                    "cluster": n.cluster_id,
                    "edge": n.edge_id,
                    "parent": n.parent,
                    "members": n.members,
                    "status": n.status,
                })
            })
            .collect();
        json!({"type": "tree", "round": r, "leaves": leaves})
    }

    fn metrics(&mut self, r: usize, round_time: f64, drops: usize) -> Result<MetricsRow, SimError> {
        let mut accs = Vec::with_capacity(self.devices.len());
        let mut terms = Vec::with_capacity(self.devices.len());
        let mut cluster_loss: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        let mut losses = Vec::with_capacity(self.devices.len());
        for (k, dev) in self.devices.iter().enumerate() {
            let c = self.tree.leaf_of(k).expect("device has a cluster");
            let m = &self.tree.node(c)?.model;
            if !dev.test.is_empty() {
                accs.push(model::evaluate(m, &dev.test)?);
            }
            let train = dev.training_set();
            let l = model::loss(m, &train)?;
            losses.push(l);
            let e = cluster_loss.entry(c).or_default();
            e.0 += l * train.len() as f64;
            e.1 += train.len() as f64;
            terms.push(ObjectiveTerm {
                loss: l,
                selection: self.selections[k].clone(),
            });
        }
        for (c, (sum, n)) in cluster_loss {
            if n > 0.0 {
                self.loss_history.entry(c).or_default().push(sum / n);
            }
        }
        self.objective += ssl::objective_value(&terms, self.cfg.ssl.lambda)?;
        let lab: Vec<f64> = self.devices.iter().filter_map(labeling_accuracy).collect();
        let injected: usize = self.devices.iter().map(|d| d.injected.len()).sum();
        let pool: usize = self.devices.iter().map(|d| d.initial_unlabeled).sum();
        let latency: Vec<f64> = self
            .latency_reached
            .iter()
            .map(|t| t.unwrap_or(self.cum_time))
            .collect();
        Ok(MetricsRow {
            run: self.run_label.clone(),
            variant: self.cfg.run.variant.to_string(),
            seed: self.cfg.run.seed,
            labeled_fraction: self.cfg.data.labeled_fraction,
            phi: self.cfg.ssl.phi,
            round: r,
            cum_time_s: self.cum_time,
            round_time_s: round_time,
            test_acc_min: accs.iter().copied().fold(f64::INFINITY, f64::min).min(1.0),
            test_acc_mean: mean(&accs),
            test_acc_max: accs.iter().copied().fold(0.0, f64::max),
            labeling_acc_mean: (!lab.is_empty()).then(|| mean(&lab)),
            injected_fraction: if pool == 0 { 0.0 } else { injected as f64 / pool as f64 },
            labeling_latency_mean: mean(&latency),
            clusters: self.tree.leaves().count(),
            objective: self.objective,
            drops,
            mean_loss: mean(&losses),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn ones(v: f64, n: usize) -> ModelParams {
        ModelParams::from_weights(2, 0, 2, vec![v; n]).unwrap()
    }

    #[test]
    fn weighted_mean_hand_case() {
        let (a, b) = (ones(0.0, 6), ones(1.0, 6));
        let m = edge_aggregate(&[&a, &b], &[1.0, 3.0]).unwrap();
        assert!(m.weights().iter().all(|&w| w == 0.75));
        let single = edge_aggregate(&[&b], &[7.0]).unwrap();
        assert_eq!(single, b);
        let mid = cloud_aggregate(&[&a, &b], &[5.0, 5.0]).unwrap();
        assert!(mid.weights().iter().all(|&w| w == 0.5));
    }

    #[test]
    fn three_edge_cloud_hand_case() {
        let ms = [ones(1.0, 6), ones(2.0, 6), ones(4.0, 6)];
        let m = cloud_aggregate(&[&ms[0], &ms[1], &ms[2]], &[2.0, 1.0, 1.0]).unwrap();
        // (2*1 + 2 + 4) / 4
        assert!(m.weights().iter().all(|&w| (w - 2.0).abs() < 1e-15));
    }

    #[test]
    fn aggregation_rejects_bad_input() {
        let a = ones(0.0, 6);
        let b = ModelParams::zeros(3, 0, 2).unwrap();
        assert!(edge_aggregate(&[], &[]).is_err());
        assert!(edge_aggregate(&[&a, &b], &[1.0, 1.0]).is_err());
        assert!(edge_aggregate(&[&a], &[0.0]).is_err());
    }

    #[test]
    fn mixed_seeds_differ() {
        assert_ne!(training_seed(1, 1, 0), training_seed(1, 1, 1));
        assert_ne!(training_seed(1, 1, 0), training_seed(1, 2, 0));
        assert_ne!(training_seed(1, 1, 0), training_seed(2, 1, 0));
    }

    fn small(extra: &str) -> ExperimentConfig {
        parse_config(&format!(
            "[topology]\nedges = 1\ndevices = 4\n[data]\nmode = label-permutation\nsamples_per_device = 40\n\
             test_samples_per_device = 10\nlabeled_fraction = 0.5\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn zero_round_budget_terminates_immediately() {
        let sim = Simulation::from_config(&small("[run]\nrounds = 0\n")).unwrap();
        assert_eq!(sim.termination(), Some(Termination::RoundBudget));
    }

    #[test]
    fn zero_time_budget_stops_after_first_round() {
        let mut sim = Simulation::from_config(&small("[network]\nt_tot = 0\n")).unwrap();
        assert_eq!(sim.termination(), None);
        sim.run_round().unwrap();
        assert_eq!(sim.termination(), Some(Termination::TimeBudget));
        assert!(matches!(sim.run_round(), Err(SimError::Terminated)));
    }

    #[test]
    fn weights_normalised_every_round() {
        let mut sim = Simulation::from_config(&small("[run]\nrounds = 6\n")).unwrap();
        while sim.termination().is_none() {
            let out = sim.run_round().unwrap();
            for rec in &out.records {
                let s: f64 = rec.weights.iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
                assert!(rec.weights.iter().all(|&w| w > 0.0));
            }
            let m = &out.metrics;
            assert!(m.test_acc_min <= m.test_acc_mean && m.test_acc_mean <= m.test_acc_max);
        }
    }
}
