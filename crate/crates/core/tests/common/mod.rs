#![allow(dead_code)]

use std::path::PathBuf;

use cfsl::config::{parse_config, ExperimentConfig};
use cfsl::model::{LabeledBatch, Matrix, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn load_config(name: &str) -> ExperimentConfig {
    let text = std::fs::read_to_string(config_path(name)).expect("config file");
    parse_config(&text).expect("valid config")
}

/// Parses `base` with `extra` lines appended (later sections may repeat
/// a section header but not a key).
pub fn config_with(base: &str, extra: &str) -> ExperimentConfig {
    parse_config(&format!("{base}\n{extra}\n")).expect("valid config")
}

pub fn random_model(rng: &mut ChaCha8Rng, dim_in: usize, hidden: usize, classes: usize, scale: f64) -> ModelParams {
    let n = ModelParams::param_count(dim_in, hidden, classes);
    let w = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    ModelParams::from_weights(dim_in, hidden, classes, w).unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, rows: usize, dim: usize, classes: usize) -> LabeledBatch {
    let data: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-2.0..=2.0)).collect();
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    LabeledBatch::new(Matrix::new(rows, dim, data).unwrap(), labels).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rand index between two labelings of the same items.
pub fn rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut agree = 0usize;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            pairs += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    if pairs == 0 {
        1.0
    } else {
        agree as f64 / pairs as f64
    }
}

/// Group label per device from a two-way split of `0..n`.
pub fn labels_of(n: usize, first: &[usize]) -> Vec<usize> {
    (0..n).map(|k| usize::from(!first.contains(&k))).collect()
}

/// Largest per-coordinate relative error between the analytic gradient and
/// central differences of the loss. Denominators are floored at `floor` so
/// coordinates that are zero up to rounding do not dominate.
pub fn gradient_fd_error(params: &ModelParams, batch: &LabeledBatch, step: f64, floor: f64) -> f64 {
    let analytic = cfsl::model::gradient(params, batch).unwrap().grad;
    let base = params.weights().to_vec();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let lp = cfsl::model::loss(&params.with_weights(plus).unwrap(), batch).unwrap();
        let lm = cfsl::model::loss(&params.with_weights(minus).unwrap(), batch).unwrap();
        let numeric = (lp - lm) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Brute-force min-max cross-similarity split over indices `0..n`, written
/// independently of the library: every subset containing index 0 is tried
/// and the lowest objective wins. Returns `(objective, first group)`; when
/// several subsets share the objective all are returned.
pub fn brute_force_bipartitions(n: usize, sim: impl Fn(usize, usize) -> f64) -> (f64, Vec<Vec<usize>>) {
    let mut best = f64::INFINITY;
    let mut argmin: Vec<Vec<usize>> = Vec::new();
    let subsets = 1usize << n;
    for set in 0..subsets {
        if set & 1 == 0 || set == subsets - 1 {
            continue;
        }
        let inside: Vec<usize> = (0..n).filter(|i| set >> i & 1 == 1).collect();
        let outside: Vec<usize> = (0..n).filter(|i| set >> i & 1 == 0).collect();
        let cross = inside
            .iter()
            .flat_map(|&i| outside.iter().map(move |&j| (i, j)))
            .map(|(i, j)| sim(i, j))
            .fold(f64::NEG_INFINITY, f64::max);
        if cross < best {
            best = cross;
            argmin = vec![inside];
        } else if cross == best {
            argmin.push(inside);
        }
    }
    (best, argmin)
}

/// Plain two-level FedAvg written out longhand, run alongside the
/// simulation: every scheduled device trains from the current global
/// model, edges average by sample count, the cloud averages edges by their
/// sample totals. Returns the number of rounds compared, or the first round
/// whose global model differs in any bit.
pub fn reference_fedavg(cfg: &ExperimentConfig) -> Result<usize, String> {
    use cfsl::orchestrator::{training_seed, Simulation};
    let mut sim = Simulation::from_config(cfg).map_err(|e| e.to_string())?;
    let seed = sim.config().run.seed;
    let m = sim.config().model.clone();
    let devices = sim.devices.clone();
    let mut global = sim.global.clone();
    let mut rounds = 0;
    while sim.termination().is_none() {
        let out = sim.run_round().map_err(|e| e.to_string())?;
        let r = out.metrics.round;
        let (mut edge_models, mut edge_totals) = (Vec::new(), Vec::new());
        for sched in &out.schedules {
            let mut ids: Vec<usize> = sched.participants().map(|p| p.device_id).collect();
            ids.sort_unstable();
            if ids.is_empty() {
                continue;
            }
            let total: f64 = ids.iter().map(|&k| devices[k].training_len() as f64).sum();
            let mut acc = vec![0.0; global.len()];
            for &k in &ids {
                let data = devices[k].training_set();
                let local = cfsl::model::sgd_train(&global, &data, m.epochs, m.batch_size, m.learning_rate, training_seed(seed, r, k)).unwrap();
                let w = data.len() as f64 / total;
                acc.iter_mut().zip(local.weights()).for_each(|(a, x)| *a += w * x);
            }
            edge_models.push(acc);
            edge_totals.push(total);
        }
        if !edge_models.is_empty() {
            let total: f64 = edge_totals.iter().sum();
            let mut acc = vec![0.0; global.len()];
            for (model, t) in edge_models.iter().zip(&edge_totals) {
                acc.iter_mut().zip(model).for_each(|(a, x)| *a += t / total * x);
            }
            global = global.with_weights(acc).unwrap();
        }
        if sim.global.weights().iter().zip(global.weights()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("global model differs from the reference in round {r}"));
        }
        rounds += 1;
    }
    Ok(rounds)
}
