//! Browser demo: three small views onto the simulator, each returning JSON
//! for `www/index.html` to draw.

use cfsl::cluster::{bipartition, max_cross_similarity, similarity_matrix};
use cfsl::config::{parse_config, ExperimentConfig};
use cfsl::model::gradient;
use cfsl::net::{device_timing, DeviceRadio};
use cfsl::orchestrator::Simulation;
use cfsl::ssl::pseudo_label;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Eight devices on one edge, two label-permuted distributions interleaved
/// (even ids on one, odd ids on the other).
const TWO_GROUPS: &str = "
[topology]
edges = 1
devices = 8
[data]
mode = label-permutation
distributions = 2
classes = 4
features = 10
samples_per_device = 200
labeled_fraction = 0.1
max_classes = 4
[model]
learning_rate = 0.1
[clustering]
epsilon1 = 4.0
epsilon2 = 3.0
[network]
subchannels = 8
[run]
rounds = 200
convergence_eps = 0
";

fn config(seed: u64, extra: &str) -> Result<ExperimentConfig, String> {
    let mut cfg = parse_config(&format!("{TWO_GROUPS}\n{extra}\n")).map_err(|e| e.to_string())?;
    cfg.run.seed = seed;
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyPoint {
    pub distance_m: f64,
    pub compute_s: f64,
    pub upload_s: f64,
    pub total_s: f64,
}

/// Per-round time of one device against its distance to the edge server,
/// for a given transmit power, sub-channel count and CPU frequency.
pub fn latency_curve(power_dbm: f64, subchannels: usize, cpu_ghz: f64) -> Result<Vec<LatencyPoint>, String> {
    if subchannels == 0 {
        return Err("need at least one sub-channel".into());
    }
    let sim = Simulation::from_config(&config(0, "")?).map_err(|e| e.to_string())?;
    let link = sim.link_params();
    let mut edge = sim.edge_config(0).clone();
    edge.subchannels = subchannels;
    let samples = sim.devices[0].training_len();
    let far = sim.config().network.distance_max_m;
    let near = link.d0;
    (0..=48)
        .map(|i| {
            let distance_m = near + (far - near) * i as f64 / 48.0;
            let radio = DeviceRadio {
                device_id: 0,
                cpu_hz: cpu_ghz * 1e9,
                tx_power_w: cfsl::net::dbm_to_watts(power_dbm),
                distance_m,
                edge_id: 0,
            };
            let t = device_timing(&radio, &edge, &link, samples, 1.0).map_err(|e| e.to_string())?;
            Ok(LatencyPoint {
                distance_m,
                compute_s: t.compute_s,
                upload_s: t.upload_s,
                total_s: t.total(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdPoint {
    pub phi: f64,
    /// Share of the unlabeled pool that would be pseudo-labelled.
    pub accepted: f64,
    /// Share of accepted pseudo-labels that match the hidden truth.
    pub accuracy: Option<f64>,
}

/// Trains the two-group setup for `rounds` rounds (with or without
/// clustering), then scores every device's pool with its own model over a
/// range of confidence thresholds. Nothing is injected.
pub fn threshold_sweep(seed: u64, rounds: usize, clustering: bool) -> Result<Vec<ThresholdPoint>, String> {
    let extra = format!("[ssl]\nenabled = false\n[clustering]\nenabled = {clustering}");
    let mut sim = Simulation::from_config(&config(seed, &extra)?).map_err(|e| e.to_string())?;
    for _ in 0..rounds {
        sim.run_round().map_err(|e| e.to_string())?;
    }
    let pool: usize = sim.devices.iter().map(|d| d.unlabeled_ids.len()).sum();
    let mut points = Vec::new();
    for step in 0..14 {
        let phi = 0.30 + 0.05 * step as f64;
        let (mut accepted, mut correct) = (0usize, 0usize);
        for (k, device) in sim.devices.iter().enumerate() {
            let model = sim.device_model(k).map_err(|e| e.to_string())?;
            let batch = pseudo_label(model, device, phi, 0, sim.round).map_err(|e| e.to_string())?;
            accepted += batch.len();
            for (&id, &label) in batch.sample_ids.iter().zip(&batch.labels) {
                let row = device.unlabeled_ids.iter().position(|&u| u == id).expect("id from this pool");
                correct += usize::from(device.hidden_truth[row] == Some(label));
            }
        }
        points.push(ThresholdPoint {
            phi,
            accepted: accepted as f64 / pool.max(1) as f64,
            accuracy: (accepted > 0).then(|| correct as f64 / accepted as f64),
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusteringView {
    pub round: usize,
    /// Row-major cosine similarities of the devices' gradients.
    pub similarity: Vec<f64>,
    pub devices: usize,
    pub groups: [Vec<usize>; 2],
    pub distributions: Vec<usize>,
    pub max_cross_similarity: f64,
}

/// Runs plain hierarchical averaging for `rounds` rounds, then takes each
/// device's full-batch gradient at the shared model and splits the device
/// set by the min-max cross-similarity rule.
pub fn clustering_view(seed: u64, rounds: usize) -> Result<ClusteringView, String> {
    let extra = "[ssl]\nenabled = false\n[clustering]\nenabled = false";
    let mut sim = Simulation::from_config(&config(seed, extra)?).map_err(|e| e.to_string())?;
    for _ in 0..rounds {
        sim.run_round().map_err(|e| e.to_string())?;
    }
    let grads = sim
        .devices
        .iter()
        .map(|d| gradient(&sim.global, &d.training_set()).map(|g| (d.device_id, g)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let matrix = similarity_matrix(&grads).map_err(|e| e.to_string())?;
    let (g1, g2) = bipartition(&matrix).map_err(|e| e.to_string())?;
    let n = matrix.len();
    Ok(ClusteringView {
        round: sim.round,
        similarity: (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| matrix.get(i, j)).collect(),
        devices: n,
        max_cross_similarity: max_cross_similarity(&matrix, &g1, &g2),
        groups: [g1, g2],
        distributions: sim.devices.iter().map(|d| d.distribution_id).collect(),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = latencyCurve)]
pub fn latency_curve_js(power_dbm: f64, subchannels: usize, cpu_ghz: f64) -> Result<String, JsError> {
    to_js(latency_curve(power_dbm, subchannels, cpu_ghz))
}

#[wasm_bindgen(js_name = thresholdSweep)]
pub fn threshold_sweep_js(seed: u32, rounds: usize, clustering: bool) -> Result<String, JsError> {
    to_js(threshold_sweep(seed as u64, rounds, clustering))
}

#[wasm_bindgen(js_name = clusteringView)]
pub fn clustering_view_js(seed: u32, rounds: usize) -> Result<String, JsError> {
    to_js(clustering_view(seed as u64, rounds))
}
