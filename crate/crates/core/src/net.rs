//! Wireless computation and communication latency model.
//!
//! Devices upload over OFDMA sub-channels to their edge server; edges
//! upload to the cloud over a fixed-rate link. All quantities are SI:
//! seconds, hertz, watts, bits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("{name} out of domain: {value}")]
    Domain { name: &'static str, value: f64 },
}

fn domain(name: &'static str, value: f64) -> NetError {
    NetError::Domain { name, value }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Path-loss power gain `g0 * (d0 / d)^4`, used as `|h|^2`.
pub fn channel_gain(distance: f64, g0: f64, d0: f64) -> Result<f64, NetError> {
    if !(distance > 0.0) {
        return Err(domain("distance", distance));
    }
    if !(d0 > 0.0) {
        return Err(domain("reference distance", d0));
    }
    if !(g0 > 0.0) {
        return Err(domain("reference gain", g0));
    }
    Ok(g0 * (d0 / distance).powi(4))
}

/// Shannon rate `beta * B * log2(1 + gain * P / N0)` in bits/s.
pub fn data_rate(beta: f64, bandwidth: f64, gain: f64, power: f64, n0: f64) -> Result<f64, NetError> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(domain("bandwidth share", beta));
    }
    if !(bandwidth > 0.0) {
        return Err(domain("bandwidth", bandwidth));
    }
    if !(n0 > 0.0) {
        return Err(domain("noise power", n0));
    }
    if !(gain >= 0.0) {
        return Err(domain("channel gain", gain));
    }
    if !(power >= 0.0) {
        return Err(domain("transmit power", power));
    }
    Ok(beta * bandwidth * (gain * power / n0).ln_1p() / std::f64::consts::LN_2)
}

/// Local training time `epochs * samples * cycles / f`.
pub fn compute_time(epochs: usize, samples: usize, cycles_per_sample: f64, cpu_hz: f64) -> Result<f64, NetError> {
    if !(cpu_hz > 0.0) {
        return Err(domain("cpu frequency", cpu_hz));
    }
    if !(cycles_per_sample >= 0.0) {
        return Err(domain("cycles per sample", cycles_per_sample));
    }
    Ok(epochs as f64 * samples as f64 * cycles_per_sample / cpu_hz)
}

pub fn upload_time(bits: f64, rate: f64) -> Result<f64, NetError> {
    if !(rate > 0.0) {
        return Err(domain("rate", rate));
    }
    if !(bits >= 0.0) {
        return Err(domain("payload", bits));
    }
    Ok(bits / rate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRadio {
    pub device_id: usize,
    pub cpu_hz: f64,
    pub tx_power_w: f64,
    pub distance_m: f64,
    pub edge_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DeadlinePolicy {
    /// `kappa` times the median estimated time of the selected devices.
    MedianMultiple(f64),
    FixedSeconds(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub edge_id: usize,
    pub bandwidth_hz: f64,
    pub subchannels: usize,
    pub cloud_rate_bps: f64,
    pub deadline: DeadlinePolicy,
}

/// Radio-environment constants shared by every device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub g0: f64,
    pub d0: f64,
    pub n0: f64,
    pub cycles_per_sample: f64,
    pub epochs: usize,
    pub model_bits: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceTiming {
    pub compute_s: f64,
    pub upload_s: f64,
}

impl DeviceTiming {
    pub fn total(&self) -> f64 {
        self.compute_s + self.upload_s
    }
}

/// Compute and upload time of one device on one sub-channel, with an
/// optional multiplicative fading factor on the path-loss gain.
pub fn device_timing(
    radio: &DeviceRadio,
    edge: &EdgeConfig,
    link: &LinkParams,
    workload: usize,
    fading: f64,
) -> Result<DeviceTiming, NetError> {
    let beta = 1.0 / edge.subchannels as f64;
    let gain = channel_gain(radio.distance_m, link.g0, link.d0)? * fading;
    let rate = data_rate(beta, edge.bandwidth_hz, gain, radio.tx_power_w, link.n0)?;
    Ok(DeviceTiming {
        compute_s: compute_time(link.epochs, workload, link.cycles_per_sample, radio.cpu_hz)?,
        upload_s: upload_time(link.model_bits, rate)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledDevice {
    pub device_id: usize,
    pub beta: f64,
    pub estimate: DeviceTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSchedule {
    pub edge_id: usize,
    pub selected: Vec<ScheduledDevice>,
    pub deadline_s: f64,
    pub dropped: Vec<usize>,
}

impl EdgeSchedule {
    pub fn bandwidth_share(&self) -> f64 {
        self.selected.iter().map(|d| d.beta).sum()
    }

    pub fn participants(&self) -> impl Iterator<Item = &ScheduledDevice> {
        self.selected.iter().filter(|d| !self.dropped.contains(&d.device_id))
    }

    pub fn is_idle(&self) -> bool {
        self.participants().next().is_none()
    }
}

/// `(device id, estimated timing)` of one eligible device.
pub type Candidate = (usize, DeviceTiming);

/// Gives one sub-channel (`beta = 1/Q`) to each of the `Q` fastest eligible
/// devices (ties by id), sets the deadline and drops selected devices whose
/// estimate exceeds it.
pub fn schedule_round(edge: &EdgeConfig, eligible: &[Candidate]) -> EdgeSchedule {
    let mut ranked: Vec<&Candidate> = eligible.iter().collect();
    ranked.sort_by(|a, b| a.1.total().total_cmp(&b.1.total()).then(a.0.cmp(&b.0)));
    let q = edge.subchannels.max(1);
    let beta = 1.0 / q as f64;
    let selected: Vec<ScheduledDevice> = ranked
        .into_iter()
        .take(q)
        .map(|&(device_id, estimate)| ScheduledDevice {
            device_id,
            beta,
            estimate,
        })
        .collect();
    let deadline_s = match edge.deadline {
        DeadlinePolicy::FixedSeconds(s) => s,
        DeadlinePolicy::MedianMultiple(kappa) => {
            let times: Vec<f64> = selected.iter().map(|d| d.estimate.total()).collect();
            kappa * median_sorted(&times)
        }
    };
    let dropped = selected
        .iter()
        .filter(|d| d.estimate.total() > deadline_s)
        .map(|d| d.device_id)
        .collect();
    EdgeSchedule {
        edge_id: edge.edge_id,
        selected,
        deadline_s,
        dropped,
    }
}

/// Median of an ascending slice; 0 for an empty one.
fn median_sorted(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Edge round time: the slowest participating device. Returns
/// `(0.0, true)` when nobody participated.
pub fn edge_round_time(times: &[f64]) -> (f64, bool) {
    if times.is_empty() {
        return (0.0, true);
    }
    (times.iter().cloned().fold(f64::NEG_INFINITY, f64::max), false)
}

/// Global round time `max_n (T_cloud_n + T_edge_n)` over `(edge, cloud)` pairs.
pub fn global_round_time(per_edge: &[(f64, f64)]) -> f64 {
    per_edge
        .iter()
        .map(|(edge, cloud)| edge + cloud)
        .fold(0.0, f64::max)
}
