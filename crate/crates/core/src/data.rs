//! Synthetic non-IID classification tasks, device partitioning and CSV input.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LabeledBatch, Matrix};

/// Minimum pairwise disagreement between per-distribution optimal classifiers.
pub const MIN_DISAGREEMENT: f64 = 0.3;
const GENERATION_RETRIES: usize = 100;
const PROBE_SAMPLES: usize = 1000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("could not generate distinguishable distributions after {0} attempts")]
    Generation(usize),
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("row {row}: class {label} outside the declared {classes} classes")]
    Schema {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskMode {
    GaussianClusters,
    LabelPermutation,
}

impl FromStr for TaskMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian-clusters" => Ok(Self::GaussianClusters),
            "label-permutation" => Ok(Self::LabelPermutation),
            other => Err(format!("unknown task mode `{other}`")),
        }
    }
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GaussianClusters => "gaussian-clusters",
            Self::LabelPermutation => "label-permutation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniverseSpec {
    pub n_distributions: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub mode: TaskMode,
    /// Standard deviation of class-mean coordinates.
    pub class_sep: f64,
    /// Isotropic within-class noise.
    pub noise_std: f64,
}

impl UniverseSpec {
    pub fn new(n_distributions: usize, n_classes: usize, dim: usize, mode: TaskMode) -> Self {
        Self {
            n_distributions,
            n_classes,
            dim,
            mode,
            class_sep: 3.0,
            noise_std: 1.0,
        }
    }
}

/// A family of related classification tasks. `means[j][y]` is the centre of
/// observed class `y` under distribution `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskUniverse {
    pub spec: UniverseSpec,
    means: Vec<Vec<Vec<f64>>>,
    /// `label_maps[j][base_class]` is the observed label under distribution `j`
    /// (identity for gaussian-clusters mode).
    label_maps: Vec<Vec<usize>>,
}

impl TaskUniverse {
    pub fn n_distributions(&self) -> usize {
        self.spec.n_distributions
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn label_map(&self, dist: usize) -> &[usize] {
        &self.label_maps[dist]
    }

    pub fn mean(&self, dist: usize, label: usize) -> &[f64] {
        &self.means[dist][label]
    }

    /// Draws one feature vector of observed class `label` from distribution `dist`.
    pub fn sample<R: Rng + ?Sized>(&self, dist: usize, label: usize, rng: &mut R) -> Vec<f64> {
        let noise = Normal::new(0.0, self.spec.noise_std).expect("noise std validated");
        self.means[dist][label]
            .iter()
            .map(|m| m + noise.sample(rng))
            .collect()
    }

    /// Bayes-optimal label of `x` under distribution `dist` (nearest class
    /// centre; lowest label on ties).
    pub fn optimal_label(&self, dist: usize, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (y, m) in self.means[dist].iter().enumerate() {
            let d2: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 {
                best = (y, d2);
            }
        }
        best.0
    }

    /// Smallest pairwise disagreement rate of the optimal classifiers on a
    /// probe set drawn from the uniform mixture of all distributions.
    pub fn min_pairwise_disagreement<R: Rng + ?Sized>(&self, probes: usize, rng: &mut R) -> f64 {
        let n = self.spec.n_distributions;
        if n < 2 {
            return 1.0;
        }
        let points: Vec<Vec<f64>> = (0..probes)
            .map(|_| {
                let j = rng.random_range(0..n);
                let y = rng.random_range(0..self.spec.n_classes);
                self.sample(j, y, rng)
            })
            .collect();
        let preds: Vec<Vec<usize>> = (0..n)
            .map(|j| points.iter().map(|x| self.optimal_label(j, x)).collect())
            .collect();
        let mut min = 1.0f64;
        for a in 0..n {
            for b in a + 1..n {
                let diff = preds[a].iter().zip(&preds[b]).filter(|(p, q)| p != q).count();
                min = min.min(diff as f64 / probes as f64);
            }
        }
        min
    }
}

fn random_derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &v)| i != v) {
            return p;
        }
    }
}

fn random_means<R: Rng + ?Sized>(classes: usize, dim: usize, sep: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, sep).expect("class_sep validated");
    (0..classes)
        .map(|_| (0..dim).map(|_| normal.sample(rng)).collect())
        .collect()
}

pub fn make_task_universe(spec: &UniverseSpec, seed: u64) -> Result<TaskUniverse, DataError> {
    if spec.n_distributions < 1 || spec.n_classes < 2 || spec.dim < 2 {
        return Err(DataError::InvalidArgument(format!(
            "need n_distributions >= 1, classes >= 2, dim >= 2 (got {}, {}, {})",
            spec.n_distributions, spec.n_classes, spec.dim
        )));
    }
    if !(spec.class_sep > 0.0) || !(spec.noise_std > 0.0) {
        return Err(DataError::InvalidArgument(
            "class_sep and noise_std must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, d) = (spec.n_distributions, spec.n_classes, spec.dim);
    for _ in 0..GENERATION_RETRIES {
        let (means, label_maps) = match spec.mode {
            TaskMode::GaussianClusters => {
                let means: Vec<_> = (0..n)
                    .map(|_| random_means(c, d, spec.class_sep, &mut rng))
                    .collect();
                (means, vec![(0..c).collect::<Vec<_>>(); n])
            }
            TaskMode::LabelPermutation => {
                let base = random_means(c, d, spec.class_sep, &mut rng);
                let mut maps = vec![(0..c).collect::<Vec<_>>()];
                for _ in 1..n {
                    maps.push(random_derangement(c, &mut rng));
                }
                let means = maps
                    .iter()
                    .map(|map| {
                        let mut m = vec![Vec::new(); c];
                        for (base_class, &label) in map.iter().enumerate() {
                            m[label] = base[base_class].clone();
                        }
                        m
                    })
                    .collect();
                (means, maps)
            }
        };
        let universe = TaskUniverse {
            spec: spec.clone(),
            means,
            label_maps,
        };
        if universe.min_pairwise_disagreement(PROBE_SAMPLES, &mut rng) >= MIN_DISAGREEMENT {
            return Ok(universe);
        }
    }
    Err(DataError::Generation(GENERATION_RETRIES))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DistributionAssignment {
    /// Device `k` gets distribution `k mod n`.
    RoundRobin,
    /// Contiguous equal-size blocks of device ids per distribution.
    Blocked,
    Explicit(Vec<usize>),
}

impl DistributionAssignment {
    pub fn distribution_of(&self, device: usize, n_devices: usize, n_dist: usize) -> usize {
        match self {
            Self::RoundRobin => device % n_dist,
            Self::Blocked => device * n_dist / n_devices.max(1),
            Self::Explicit(v) => v[device],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub n_devices: usize,
    pub samples_per_device: usize,
    pub labeled_fraction: f64,
    pub max_classes: usize,
    pub assignment: DistributionAssignment,
    /// Extra held-out samples per device used only for test accuracy.
    pub test_samples_per_device: usize,
}

/// One device's local data. Labeled samples are split into a training part
/// and a holdout slice; pseudo-labeled samples live in `injected` with their
/// hidden ground truth alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDataset {
    pub device_id: usize,
    pub distribution_id: usize,
    pub class_whitelist: Vec<usize>,
    pub labeled: LabeledBatch,
    pub holdout: LabeledBatch,
    pub injected: LabeledBatch,
    pub injected_ids: Vec<usize>,
    pub injected_truth: Vec<Option<usize>>,
    pub unlabeled: Matrix,
    /// Stable sample ids of the rows of `unlabeled`.
    pub unlabeled_ids: Vec<usize>,
    /// Ground truth of unlabeled rows; evaluation only.
    pub hidden_truth: Vec<Option<usize>>,
    pub test: LabeledBatch,
    /// Unlabeled pool size at setup.
    pub initial_unlabeled: usize,
}

impl DeviceDataset {
    pub fn new(
        device_id: usize,
        distribution_id: usize,
        class_whitelist: Vec<usize>,
        labeled: LabeledBatch,
        unlabeled: Matrix,
        hidden_truth: Vec<Option<usize>>,
        test: LabeledBatch,
    ) -> Self {
        let dim = unlabeled.cols();
        let n_u = unlabeled.rows();
        Self {
            device_id,
            distribution_id,
            class_whitelist,
            labeled,
            holdout: LabeledBatch::empty(dim),
            injected: LabeledBatch::empty(dim),
            injected_ids: Vec::new(),
            injected_truth: Vec::new(),
            unlabeled,
            unlabeled_ids: (0..n_u).collect(),
            hidden_truth,
            test,
            initial_unlabeled: n_u,
        }
    }

    /// Samples the local solver trains on: ground-truth labeled (minus the
    /// holdout) followed by injected pseudo-labeled samples.
    pub fn training_set(&self) -> LabeledBatch {
        self.labeled.concat(&self.injected)
    }

    pub fn training_len(&self) -> usize {
        self.labeled.len() + self.injected.len()
    }

    /// Labeled count including holdout and injected samples.
    pub fn labeled_total(&self) -> usize {
        self.labeled.len() + self.holdout.len() + self.injected.len()
    }

    pub fn total_samples(&self) -> usize {
        self.labeled_total() + self.unlabeled.rows()
    }
}

fn choose_whitelist<R: Rng + ?Sized>(classes: &[usize], max: usize, rng: &mut R) -> Vec<usize> {
    let k = max.min(classes.len());
    let mut w: Vec<usize> = classes.choose_multiple(rng, k).copied().collect();
    w.sort_unstable();
    w
}

fn labeled_count(fraction: f64, samples: usize, classes: usize, device: usize) -> usize {
    let want = (fraction * samples as f64).round() as usize;
    if want < classes {
        warn!("device {device}: labeled count {want} raised to one per class ({classes})");
    }
    want.max(classes).min(samples)
}

pub fn partition_devices(
    universe: &TaskUniverse,
    spec: &PartitionSpec,
    seed: u64,
) -> Result<Vec<DeviceDataset>, DataError> {
    if spec.n_devices < 1 {
        return Err(DataError::InvalidArgument("need at least one device".into()));
    }
    if !(spec.labeled_fraction > 0.0 && spec.labeled_fraction <= 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "labeled_fraction must be in (0, 1], got {}",
            spec.labeled_fraction
        )));
    }
    if spec.max_classes < 1 {
        return Err(DataError::InvalidArgument("max_classes must be >= 1".into()));
    }
    if let DistributionAssignment::Explicit(v) = &spec.assignment {
        if v.len() != spec.n_devices || v.iter().any(|&j| j >= universe.n_distributions()) {
            return Err(DataError::InvalidArgument(
                "explicit distribution assignment must list a valid distribution per device".into(),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all_classes: Vec<usize> = (0..universe.n_classes()).collect();
    let dim = universe.dim();
    let mut devices = Vec::with_capacity(spec.n_devices);
    for k in 0..spec.n_devices {
        let dist = spec
            .assignment
            .distribution_of(k, spec.n_devices, universe.n_distributions());
        let whitelist = choose_whitelist(&all_classes, spec.max_classes, &mut rng);
        let n_l = labeled_count(spec.labeled_fraction, spec.samples_per_device, whitelist.len(), k);
        let mut labeled = LabeledBatch::empty(dim);
        for i in 0..n_l {
            let y = if i < whitelist.len() {
                whitelist[i]
            } else {
                *whitelist.choose(&mut rng).expect("nonempty whitelist")
            };
            let x = universe.sample(dist, y, &mut rng);
            labeled.push(&x, y);
        }
        let mut unlabeled = Matrix::empty(dim);
        let mut truth = Vec::new();
        for _ in n_l..spec.samples_per_device {
            let y = *whitelist.choose(&mut rng).expect("nonempty whitelist");
            unlabeled.push_row(&universe.sample(dist, y, &mut rng));
            truth.push(Some(y));
        }
        let mut test = LabeledBatch::empty(dim);
        for _ in 0..spec.test_samples_per_device {
            let y = *whitelist.choose(&mut rng).expect("nonempty whitelist");
            test.push(&universe.sample(dist, y, &mut rng), y);
        }
        devices.push(DeviceDataset::new(k, dist, whitelist, labeled, unlabeled, truth, test));
    }
    Ok(devices)
}

/// Declared shape of a CSV dataset: `n_features` float columns then one
/// label column (empty = unlabeled).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub n_features: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvDataset {
    pub labeled: LabeledBatch,
    pub unlabeled: Matrix,
}

pub fn load_csv_dataset(path: &Path, schema: &CsvSchema) -> Result<CsvDataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv_dataset(file, schema)
}

/// Parses CSV rows. A first row whose feature fields are not all numeric is
/// taken as a header.
pub fn read_csv_dataset<R: Read>(reader: R, schema: &CsvSchema) -> Result<CsvDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let d = schema.n_features;
    let mut out = CsvDataset {
        labeled: LabeledBatch::empty(d),
        unlabeled: Matrix::empty(d),
    };
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| DataError::Parse {
            row,
            msg: e.to_string(),
        })?;
        if rec.len() != d + 1 {
            if i == 0 && rec.iter().take(d).any(|f| f.parse::<f64>().is_err()) {
                continue;
            }
            return Err(DataError::Parse {
                row,
                msg: format!("expected {} fields, found {}", d + 1, rec.len()),
            });
        }
        let mut x = Vec::with_capacity(d);
        let mut header = false;
        for field in rec.iter().take(d) {
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => x.push(v),
                Ok(_) => {
                    return Err(DataError::Parse {
                        row,
                        msg: format!("non-finite feature `{field}`"),
                    })
                }
                Err(_) if i == 0 => {
                    header = true;
                    break;
                }
                Err(_) => {
                    return Err(DataError::Parse {
                        row,
                        msg: format!("bad feature `{field}`"),
                    })
                }
            }
        }
        if header {
            continue;
        }
        let label_field = &rec[d];
        if label_field.is_empty() {
            out.unlabeled.push_row(&x);
            continue;
        }
        let label: usize = label_field.parse().map_err(|_| DataError::Parse {
            row,
            msg: format!("bad label `{label_field}`"),
        })?;
        if label >= schema.n_classes {
            return Err(DataError::Schema {
                row,
                label,
                classes: schema.n_classes,
            });
        }
        out.labeled.push(&x, label);
    }
    Ok(out)
}

/// Distributes a CSV pool over devices with the same class-cap and
/// labeled-fraction rules as [`partition_devices`]. Rows of the file's
/// unlabeled pool are dealt round-robin with unknown ground truth. All
/// devices share distribution id 0.
pub fn partition_csv(
    pool: &CsvDataset,
    spec: &PartitionSpec,
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<DeviceDataset>, DataError> {
    if spec.n_devices < 1 {
        return Err(DataError::InvalidArgument("need at least one device".into()));
    }
    if pool.labeled.is_empty() {
        return Err(DataError::InvalidArgument("CSV pool has no labeled rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = pool.labeled.features.cols();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in pool.labeled.labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let present: Vec<usize> = by_class.keys().copied().collect();
    let whitelists: Vec<Vec<usize>> = (0..spec.n_devices)
        .map(|_| choose_whitelist(&present, spec.max_classes, &mut rng))
        .collect();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); spec.n_devices];
    for (class, idx) in by_class.iter_mut() {
        idx.shuffle(&mut rng);
        let takers: Vec<usize> = (0..spec.n_devices)
            .filter(|&k| whitelists[k].contains(class))
            .collect();
        for (t, &i) in idx.iter().enumerate() {
            if !takers.is_empty() {
                rows[takers[t % takers.len()]].push(i);
            }
        }
    }
    let mut devices = Vec::with_capacity(spec.n_devices);
    for k in 0..spec.n_devices {
        let mut mine = std::mem::take(&mut rows[k]);
        mine.shuffle(&mut rng);
        mine.truncate(spec.samples_per_device.max(1));
        let n_test = (test_fraction * mine.len() as f64).floor() as usize;
        let test = pool.labeled.select(&mine[..n_test]);
        let rest = &mine[n_test..];
        let classes_here: std::collections::BTreeSet<usize> =
            rest.iter().map(|&i| pool.labeled.labels[i]).collect();
        let n_l = labeled_count(spec.labeled_fraction, rest.len(), classes_here.len(), k);
        // first occurrence of each class goes to the labeled side
        let mut order: Vec<usize> = Vec::with_capacity(rest.len());
        let mut seen = std::collections::BTreeSet::new();
        for &i in rest {
            if seen.insert(pool.labeled.labels[i]) {
                order.push(i);
            }
        }
        order.extend(rest.iter().filter(|i| !order.contains(i)).copied().collect::<Vec<_>>());
        let labeled = pool.labeled.select(&order[..n_l]);
        let mut unlabeled = Matrix::empty(dim);
        let mut truth = Vec::new();
        for &i in &order[n_l..] {
            unlabeled.push_row(pool.labeled.features.row(i));
            truth.push(Some(pool.labeled.labels[i]));
        }
        let mut r = k;
        while r < pool.unlabeled.rows() {
            unlabeled.push_row(pool.unlabeled.row(r));
            truth.push(None);
            r += spec.n_devices;
        }
        devices.push(DeviceDataset::new(
            k,
            0,
            whitelists[k].clone(),
            labeled,
            unlabeled,
            truth,
            test,
        ));
    }
    Ok(devices)
}
