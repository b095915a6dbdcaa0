//! Confidence-thresholded pseudo-labeling with best-model selection.
//!
//! Every device scores each candidate specialized model, keeps the single
//! best one (`z` is one-hot), and moves the samples that model labels with
//! confidence at least `phi` from its unlabeled pool into its training data.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DeviceDataset;
use crate::model::{self, LabeledBatch, ModelError, ModelParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SslError {
    #[error("no candidate models")]
    NoCandidates,
    #[error("sample {0} is not in the unlabeled pool")]
    NotInPool(usize),
    #[error("duplicate sample {0} in pseudo-label batch")]
    Duplicate(usize),
    #[error("device {device}: selector sums to {sum}, expected one-hot")]
    MalformedSelector { device: usize, sum: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelBatch {
    pub device_id: usize,
    /// Stable ids of unlabeled samples.
    pub sample_ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub source_model_id: usize,
    pub round: usize,
}

impl PseudoLabelBatch {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn mean_confidence(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.confidences.iter().sum::<f64>() / self.len() as f64)
    }
}

/// Accepts exactly the pool samples whose top softmax probability is at
/// least `phi`, labelled with the argmax class.
pub fn pseudo_label(
    model: &ModelParams,
    device: &DeviceDataset,
    phi: f64,
    source_model_id: usize,
    round: usize,
) -> Result<PseudoLabelBatch, SslError> {
    let conf = model::confidences(model, &device.unlabeled)?;
    let mut batch = PseudoLabelBatch {
        device_id: device.device_id,
        sample_ids: Vec::new(),
        labels: Vec::new(),
        confidences: Vec::new(),
        source_model_id,
        round,
    };
    for (row, (label, p)) in conf.into_iter().enumerate() {
        if p >= phi {
            batch.sample_ids.push(device.unlabeled_ids[row]);
            batch.labels.push(label);
            batch.confidences.push(p);
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityScore {
    pub model_id: usize,
    pub val_accuracy: f64,
    pub coverage: f64,
    pub mean_confidence: f64,
    pub est_label_latency: f64,
}

impl UtilityScore {
    /// Scalar utility for the reported objective: accuracy-weighted coverage.
    pub fn scalar(&self) -> f64 {
        self.val_accuracy * self.coverage
    }
}

/// Per-device inputs to the latency estimate of labeling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceCost {
    pub cycles_per_sample: f64,
    pub cpu_hz: f64,
}

pub fn utility(
    model_id: usize,
    model: &ModelParams,
    device: &DeviceDataset,
    phi: f64,
    cost: InferenceCost,
) -> Result<UtilityScore, SslError> {
    let val_accuracy = if !device.holdout.is_empty() {
        model::evaluate(model, &device.holdout)?
    } else if !device.labeled.is_empty() {
        warn!(
            "device {}: empty holdout, scoring on the full labeled set",
            device.device_id
        );
        model::evaluate(model, &device.labeled)?
    } else {
        0.0
    };
    let pool = device.unlabeled.rows();
    if pool == 0 {
        return Ok(UtilityScore {
            model_id,
            val_accuracy,
            coverage: 0.0,
            mean_confidence: 0.0,
            est_label_latency: 0.0,
        });
    }
    let conf = model::confidences(model, &device.unlabeled)?;
    let accepted = conf.iter().filter(|(_, p)| *p >= phi).count();
    Ok(UtilityScore {
        model_id,
        val_accuracy,
        coverage: accepted as f64 / pool as f64,
        mean_confidence: conf.iter().map(|(_, p)| p).sum::<f64>() / pool as f64,
        est_label_latency: pool as f64 * cost.cycles_per_sample / cost.cpu_hz,
    })
}

/// Lexicographic preference: higher accuracy, higher coverage, lower
/// latency, lower model id. `Less` means `a` ranks first.
pub fn rank(a: &UtilityScore, b: &UtilityScore) -> Ordering {
    b.val_accuracy
        .total_cmp(&a.val_accuracy)
        .then(b.coverage.total_cmp(&a.coverage))
        .then(a.est_label_latency.total_cmp(&b.est_label_latency))
        .then(a.model_id.cmp(&b.model_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub device_id: usize,
    pub chosen: usize,
    /// One entry per candidate, in candidate order.
    pub z: Vec<u8>,
    pub scores: Vec<UtilityScore>,
}

impl SelectionDecision {
    pub fn chosen_score(&self) -> &UtilityScore {
        let i = self.z.iter().position(|&v| v == 1).expect("one-hot selector");
        &self.scores[i]
    }
}

/// Picks the best of already computed scores.
pub fn select_from_scores(device_id: usize, scores: Vec<UtilityScore>) -> Result<SelectionDecision, SslError> {
    let best = scores
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| rank(a, b))
        .map(|(i, _)| i)
        .ok_or(SslError::NoCandidates)?;
    let mut z = vec![0u8; scores.len()];
    z[best] = 1;
    let decision = SelectionDecision {
        device_id,
        chosen: scores[best].model_id,
        z,
        scores,
    };
    check_selector(device_id, &decision.z)?;
    Ok(decision)
}

pub fn select_best_model(
    device: &DeviceDataset,
    candidates: &[(usize, &ModelParams)],
    phi: f64,
    cost: InferenceCost,
) -> Result<SelectionDecision, SslError> {
    if candidates.is_empty() {
        return Err(SslError::NoCandidates);
    }
    let scores = candidates
        .iter()
        .map(|(id, m)| utility(*id, m, device, phi, cost))
        .collect::<Result<Vec<_>, _>>()?;
    select_from_scores(device.device_id, scores)
}

/// `z` must be binary with exactly one 1.
pub fn check_selector(device: usize, z: &[u8]) -> Result<(), SslError> {
    let sum: u32 = z.iter().map(|&v| v as u32).sum();
    if sum != 1 || z.iter().any(|&v| v > 1) {
        return Err(SslError::MalformedSelector { device, sum });
    }
    Ok(())
}

/// Moves the batch's samples from the unlabeled pool into the injected
/// training data. Injected labels are never revisited.
pub fn inject(device: &mut DeviceDataset, batch: &PseudoLabelBatch) -> Result<(), SslError> {
    let mut seen = BTreeSet::new();
    let mut rows = Vec::with_capacity(batch.len());
    for &id in &batch.sample_ids {
        if !seen.insert(id) {
            return Err(SslError::Duplicate(id));
        }
        let row = device
            .unlabeled_ids
            .iter()
            .position(|&u| u == id)
            .ok_or(SslError::NotInPool(id))?;
        rows.push(row);
    }
    for (&row, &label) in rows.iter().zip(&batch.labels) {
        device.injected.push(device.unlabeled.row(row), label);
        device.injected_ids.push(device.unlabeled_ids[row]);
        device.injected_truth.push(device.hidden_truth[row]);
    }
    let taken: BTreeSet<usize> = rows.into_iter().collect();
    let keep: Vec<usize> = (0..device.unlabeled.rows()).filter(|r| !taken.contains(r)).collect();
    device.unlabeled = device.unlabeled.select_rows(&keep);
    device.unlabeled_ids = keep.iter().map(|&r| device.unlabeled_ids[r]).collect();
    device.hidden_truth = keep.iter().map(|&r| device.hidden_truth[r]).collect();
    Ok(())
}

/// Fraction of injected pseudo-labels with known truth that are correct;
/// `None` when nothing checkable was injected.
pub fn labeling_accuracy(device: &DeviceDataset) -> Option<f64> {
    let mut known = 0usize;
    let mut correct = 0usize;
    for (label, truth) in device.injected.labels.iter().zip(&device.injected_truth) {
        if let Some(t) = truth {
            known += 1;
            correct += (label == t) as usize;
        }
    }
    (known > 0).then(|| correct as f64 / known as f64)
}

/// Reserves `floor(fraction * D_l)` labeled samples as a validation slice,
/// never taking the last training sample of a class.
pub fn reserve_holdout(device: &mut DeviceDataset, fraction: f64, seed: u64) {
    let n = device.labeled.len();
    let want = (fraction * n as f64).floor() as usize;
    if want == 0 {
        return;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut remaining = std::collections::BTreeMap::<usize, usize>::new();
    for &y in &device.labeled.labels {
        *remaining.entry(y).or_default() += 1;
    }
    let mut hold = BTreeSet::new();
    for i in order {
        if hold.len() == want {
            break;
        }
        let y = device.labeled.labels[i];
        let left = remaining.get_mut(&y).expect("counted");
        if *left > 1 {
            *left -= 1;
            hold.insert(i);
        }
    }
    let hold_idx: Vec<usize> = hold.iter().copied().collect();
    let keep: Vec<usize> = (0..n).filter(|i| !hold.contains(i)).collect();
    device.holdout = device.labeled.select(&hold_idx);
    device.labeled = device.labeled.select(&keep);
}

/// One device's contribution to the objective in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveTerm {
    pub loss: f64,
    /// `(z, per-candidate utility)` of the device's current selection.
    pub selection: Option<(Vec<u8>, Vec<f64>)>,
}

/// `sum_k [ loss_k - lambda * sum_m z_km U_km ]` for one round.
pub fn objective_value(terms: &[ObjectiveTerm], lambda: f64) -> Result<f64, SslError> {
    let mut total = 0.0;
    for (k, t) in terms.iter().enumerate() {
        total += t.loss;
        if let Some((z, u)) = &t.selection {
            check_selector(k, z)?;
            let picked: f64 = z.iter().zip(u).map(|(&zi, ui)| zi as f64 * ui).sum();
            total -= lambda * picked;
        }
    }
    Ok(total)
}

/// Convenience for tests and callers that hold a plain labeled batch.
pub fn device_from_batches(
    device_id: usize,
    labeled: LabeledBatch,
    unlabeled: LabeledBatch,
) -> DeviceDataset {
    let truth = unlabeled.labels.iter().map(|&y| Some(y)).collect();
    let dim = labeled.features.cols();
    DeviceDataset::new(
        device_id,
        0,
        Vec::new(),
        labeled,
        unlabeled.features,
        truth,
        LabeledBatch::empty(dim),
    )
}
