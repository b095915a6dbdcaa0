//! Small differentiable classifiers: multinomial logistic regression and a
//! one-hidden-layer tanh MLP, trained with mini-batch SGD.
//!
//! Parameters are stored as one flat vector so that aggregation, similarity
//! and upload-size accounting can treat every model family the same way.
//!
//! Layout (row-major):
//! - logistic: `W (C x d)`, `b (C)`
//! - mlp: `W1 (h x d)`, `b1 (h)`, `W2 (C x h)`, `b2 (C)`

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Payload width of one parameter on the uplink.
pub const BITS_PER_PARAM: u64 = 32;

/// Half-width of the uniform initialisation interval.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("row count mismatch: {features} feature rows, {labels} labels")]
    RowMismatch { features: usize, labels: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != rows * cols {
            return Err(ModelError::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// An empty matrix that still remembers its column count.
    pub fn empty(cols: usize) -> Self {
        Self::zeros(0, cols)
    }

    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self, ModelError> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(ModelError::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols, "row width");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// New matrix holding the selected rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Features with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LabeledBatch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self, ModelError> {
        if features.rows() != labels.len() {
            return Err(ModelError::RowMismatch {
                features: features.rows(),
                labels: labels.len(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: Matrix::empty(dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, x: &[f64], y: usize) {
        self.features.push_row(x);
        self.labels.push(y);
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Concatenation of `self` followed by `other`.
    pub fn concat(&self, other: &LabeledBatch) -> Self {
        let mut out = self.clone();
        for i in 0..other.len() {
            out.push(other.features.row(i), other.labels[i]);
        }
        out
    }
}

/// Gradient of the mean loss over `sample_count` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientUpdate {
    pub grad: Vec<f64>,
    pub sample_count: usize,
}

impl GradientUpdate {
    pub fn norm(&self) -> f64 {
        l2_norm(&self.grad)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    weights: Vec<f64>,
    dim_in: usize,
    dim_out: usize,
    /// Hidden width; 0 selects multinomial logistic regression.
    hidden: usize,
    size_bits: u64,
}

impl ModelParams {
    pub fn param_count(dim_in: usize, hidden: usize, dim_out: usize) -> usize {
        if hidden == 0 {
            dim_out * dim_in + dim_out
        } else {
            hidden * dim_in + hidden + dim_out * hidden + dim_out
        }
    }

    pub fn from_weights(
        dim_in: usize,
        hidden: usize,
        dim_out: usize,
        weights: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if dim_in == 0 || dim_out < 2 {
            return Err(ModelError::InvalidHyperparameter(format!(
                "need dim_in >= 1 and dim_out >= 2, got {dim_in} and {dim_out}"
            )));
        }
        let expected = Self::param_count(dim_in, hidden, dim_out);
        if weights.len() != expected {
            return Err(ModelError::DimensionMismatch {
                expected,
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(ModelError::NonFinite("weights"));
        }
        Ok(Self {
            size_bits: weights.len() as u64 * BITS_PER_PARAM,
            weights,
            dim_in,
            dim_out,
            hidden,
        })
    }

    pub fn zeros(dim_in: usize, hidden: usize, dim_out: usize) -> Result<Self, ModelError> {
        let n = Self::param_count(dim_in, hidden, dim_out);
        Self::from_weights(dim_in, hidden, dim_out, vec![0.0; n])
    }

    /// Seeded uniform initialisation in `[-INIT_SCALE, INIT_SCALE]`.
    pub fn init_uniform(
        dim_in: usize,
        hidden: usize,
        dim_out: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let n = Self::param_count(dim_in, hidden, dim_out);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..n)
            .map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE))
            .collect();
        Self::from_weights(dim_in, hidden, dim_out, w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn size_bits(&self) -> u64 {
        self.size_bits
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Same architecture, new weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self, ModelError> {
        Self::from_weights(self.dim_in, self.hidden, self.dim_out, weights)
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.dim_in == other.dim_in && self.hidden == other.hidden && self.dim_out == other.dim_out
    }

    fn check_features(&self, features: &Matrix) -> Result<(), ModelError> {
        if features.cols() != self.dim_in {
            return Err(ModelError::DimensionMismatch {
                expected: self.dim_in,
                found: features.cols(),
            });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &LabeledBatch) -> Result<(), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        self.check_features(&batch.features)?;
        if let Some(&label) = batch.labels.iter().find(|&&l| l >= self.dim_out) {
            return Err(ModelError::LabelOutOfRange {
                label,
                classes: self.dim_out,
            });
        }
        Ok(())
    }

    /// Class probabilities for one sample. `hidden_out` receives the tanh
    /// activations when the model has a hidden layer.
    fn forward_row(&self, x: &[f64], hidden_out: &mut Vec<f64>, probs: &mut Vec<f64>) {
        let (d, c, h) = (self.dim_in, self.dim_out, self.hidden);
        probs.clear();
        hidden_out.clear();
        if h == 0 {
            let (w, b) = self.weights.split_at(c * d);
            for k in 0..c {
                probs.push(dot(&w[k * d..(k + 1) * d], x) + b[k]);
            }
        } else {
            let (w1, rest) = self.weights.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            for j in 0..h {
                hidden_out.push((dot(&w1[j * d..(j + 1) * d], x) + b1[j]).tanh());
            }
            for k in 0..c {
                probs.push(dot(&w2[k * h..(k + 1) * h], hidden_out) + b2[k]);
            }
        }
        softmax_in_place(probs);
    }

    /// Adds the gradient of `-ln p[y]` at `x` into `acc`.
    fn accumulate_row_grad(&self, x: &[f64], y: usize, scratch: &mut Scratch, acc: &mut [f64]) {
        let (d, c, h) = (self.dim_in, self.dim_out, self.hidden);
        self.forward_row(x, &mut scratch.hidden, &mut scratch.probs);
        let dz = &mut scratch.probs;
        dz[y] -= 1.0;
        if h == 0 {
            let (gw, gb) = acc.split_at_mut(c * d);
            for k in 0..c {
                let row = &mut gw[k * d..(k + 1) * d];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += dz[k] * xi;
                }
                gb[k] += dz[k];
            }
        } else {
            let w2 = &self.weights[h * d + h..h * d + h + c * h];
            let (gw1, rest) = acc.split_at_mut(h * d);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(c * h);
            let hid = &scratch.hidden;
            for k in 0..c {
                let row = &mut gw2[k * h..(k + 1) * h];
                for (g, a) in row.iter_mut().zip(hid) {
                    *g += dz[k] * a;
                }
                gb2[k] += dz[k];
            }
            for j in 0..h {
                let mut back = 0.0;
                for k in 0..c {
                    back += w2[k * h + j] * dz[k];
                }
                let da = back * (1.0 - hid[j] * hid[j]);
                let row = &mut gw1[j * d..(j + 1) * d];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += da * xi;
                }
                gb1[j] += da;
            }
        }
    }

    /// Mean gradient over the given rows of `batch`.
    fn mean_gradient_over(&self, batch: &LabeledBatch, idx: &[usize]) -> Vec<f64> {
        let mut acc = vec![0.0; self.weights.len()];
        let mut scratch = Scratch::default();
        for &i in idx {
            self.accumulate_row_grad(batch.features.row(i), batch.labels[i], &mut scratch, &mut acc);
        }
        let inv = 1.0 / idx.len() as f64;
        acc.iter_mut().for_each(|g| *g *= inv);
        acc
    }
}

#[derive(Default)]
struct Scratch {
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax(p: &[f64]) -> (usize, f64) {
    let mut best = (0, p[0]);
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Row-wise class probabilities, shape `rows x dim_out`.
pub fn forward(params: &ModelParams, features: &Matrix) -> Result<Matrix, ModelError> {
    params.check_features(features)?;
    let mut out = Vec::with_capacity(features.rows() * params.dim_out);
    let (mut hid, mut probs) = (Vec::new(), Vec::new());
    for i in 0..features.rows() {
        params.forward_row(features.row(i), &mut hid, &mut probs);
        out.extend_from_slice(&probs);
    }
    Matrix::new(features.rows(), params.dim_out, out)
}

/// Mean cross-entropy over the batch.
pub fn loss(params: &ModelParams, batch: &LabeledBatch) -> Result<f64, ModelError> {
    params.check_batch(batch)?;
    let (mut hid, mut probs) = (Vec::new(), Vec::new());
    let mut total = 0.0;
    for i in 0..batch.len() {
        params.forward_row(batch.features.row(i), &mut hid, &mut probs);
        // floor keeps the loss finite when a probability underflows
        total -= probs[batch.labels[i]].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / batch.len() as f64)
}

/// Exact analytic gradient of [`loss`].
pub fn gradient(params: &ModelParams, batch: &LabeledBatch) -> Result<GradientUpdate, ModelError> {
    params.check_batch(batch)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let grad = params.mean_gradient_over(batch, &idx);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(ModelError::NonFinite("gradient"));
    }
    Ok(GradientUpdate {
        grad,
        sample_count: batch.len(),
    })
}

/// Mini-batch SGD for `epochs` passes. Each epoch takes `ceil(D / b)` steps
/// over a seeded shuffle; when `b >= D` the whole batch is used in its
/// original order, one step per epoch.
pub fn sgd_train(
    params: &ModelParams,
    data: &LabeledBatch,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<ModelParams, ModelError> {
    if epochs == 0 || batch_size == 0 || lr.is_nan() || lr < 0.0 || !lr.is_finite() {
        return Err(ModelError::InvalidHyperparameter(format!(
            "epochs={epochs}, batch_size={batch_size}, lr={lr}"
        )));
    }
    params.check_batch(data)?;
    let n = data.len();
    let mut w = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        if batch_size < n {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch_size) {
            let g = w.mean_gradient_over(data, chunk);
            for (wi, gi) in w.weights.iter_mut().zip(&g) {
                *wi -= lr * gi;
            }
        }
    }
    if w.weights.iter().any(|x| !x.is_finite()) {
        return Err(ModelError::NonFinite("weights after training"));
    }
    Ok(w)
}

/// Fraction of argmax predictions equal to the labels.
pub fn evaluate(params: &ModelParams, batch: &LabeledBatch) -> Result<f64, ModelError> {
    params.check_batch(batch)?;
    let conf = confidences(params, &batch.features)?;
    let hits = conf
        .iter()
        .zip(&batch.labels)
        .filter(|((c, _), y)| c == *y)
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Per-sample `(argmax class, max probability)`.
pub fn confidences(params: &ModelParams, features: &Matrix) -> Result<Vec<(usize, f64)>, ModelError> {
    let probs = forward(params, features)?;
    Ok((0..probs.rows()).map(|i| argmax(probs.row(i))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[Vec<f64>], labels: &[usize]) -> LabeledBatch {
        let d = rows[0].len();
        LabeledBatch::new(Matrix::from_rows(rows, d).unwrap(), labels.to_vec()).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let p = ModelParams::zeros(3, 0, 4).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![9.0, 9.0, 9.0]], 3).unwrap();
        let out = forward(&p, &x).unwrap();
        for v in out.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_features_give_empty_output() {
        let p = ModelParams::init_uniform(3, 4, 2, 1).unwrap();
        let out = forward(&p, &Matrix::empty(3)).unwrap();
        assert_eq!(out.rows(), 0);
    }

    #[test]
    fn hand_softmax_two_class() {
        // w = [1 0; 0 0], b = 0, x = 0 -> logits equal
        let p = ModelParams::from_weights(2, 0, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let out = forward(&p, &Matrix::from_rows(&[vec![0.0, 0.0]], 2).unwrap()).unwrap();
        assert_eq!(out.row(0), &[0.5, 0.5]);
        // x = [1, 0] -> [e/(e+1), 1/(e+1)]
        let out = forward(&p, &Matrix::from_rows(&[vec![1.0, 0.0]], 2).unwrap()).unwrap();
        let e = 1f64.exp();
        assert!((out.get(0, 0) - e / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = ModelParams::zeros(3, 0, 2).unwrap();
        let err = forward(&p, &Matrix::zeros(1, 2)).unwrap_err();
        assert_eq!(err, ModelError::DimensionMismatch { expected: 3, found: 2 });
    }

    #[test]
    fn zero_model_loss_is_ln_c() {
        let p = ModelParams::zeros(2, 0, 5).unwrap();
        let b = batch(&[vec![0.3, 1.0], vec![-4.0, 2.0]], &[1, 4]);
        assert!((loss(&p, &b).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_sample_loss_by_hand() {
        // logits = [2*1 + 0.5, 0] for x = [1, 0], label 1
        let p = ModelParams::from_weights(2, 0, 2, vec![2.0, 0.0, 0.0, 0.0, 0.5, 0.0]).unwrap();
        let b = batch(&[vec![1.0, 0.0]], &[1]);
        // -ln(1 / (1 + e^2.5)) = ln(1 + e^2.5)
        let expected = (1.0 + 2.5f64.exp()).ln();
        assert!((loss(&p, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn near_perfect_prediction_has_tiny_loss() {
        // logit gap of 40 makes p(true) = 1 - ~4e-18
        let p = ModelParams::from_weights(1, 0, 2, vec![0.0, 0.0, 40.0, 0.0]).unwrap();
        let b = batch(&[vec![1.0]], &[0]);
        assert!(loss(&p, &b).unwrap() < 1e-9);
        assert!(gradient(&p, &b).unwrap().norm() < 1e-6);
    }

    #[test]
    fn empty_batch_rejected() {
        let p = ModelParams::zeros(2, 0, 2).unwrap();
        let b = LabeledBatch::empty(2);
        assert_eq!(loss(&p, &b), Err(ModelError::EmptyBatch));
        assert_eq!(gradient(&p, &b).unwrap_err(), ModelError::EmptyBatch);
        assert_eq!(evaluate(&p, &b), Err(ModelError::EmptyBatch));
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let p = ModelParams::init_uniform(2, 3, 3, 7).unwrap();
        let b = batch(&[vec![0.2, -1.0], vec![1.5, 0.3]], &[0, 2]);
        let dup = b.concat(&b);
        let g1 = gradient(&p, &b).unwrap();
        let g2 = gradient(&p, &dup).unwrap();
        for (a, c) in g1.grad.iter().zip(&g2.grad) {
            assert!((a - c).abs() < 1e-15);
        }
    }

    #[test]
    fn one_full_batch_step_matches_gradient_step() {
        let p = ModelParams::init_uniform(2, 0, 3, 3).unwrap();
        let b = batch(&[vec![0.2, -1.0], vec![1.5, 0.3], vec![-0.5, 0.5]], &[0, 2, 1]);
        let g = gradient(&p, &b).unwrap();
        let trained = sgd_train(&p, &b, 1, 3, 0.5, 99).unwrap();
        for ((w, w0), gi) in trained.weights().iter().zip(p.weights()).zip(&g.grad) {
            assert_eq!(*w, w0 - 0.5 * gi);
        }
        let same = sgd_train(&p, &b, 4, 2, 0.0, 99).unwrap();
        assert_eq!(same, p);
    }

    #[test]
    fn separable_toy_set_reaches_full_accuracy() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![s * (1.0 + 0.1 * i as f64), 0.3 * (i as f64).sin()]
            })
            .collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let b = batch(&rows, &labels);
        let p = ModelParams::init_uniform(2, 0, 2, 0).unwrap();
        let t = sgd_train(&p, &b, 50, 4, 0.1, 5).unwrap();
        assert_eq!(evaluate(&t, &b).unwrap(), 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let b = batch(&[vec![0.2, -1.0], vec![1.5, 0.3], vec![-0.5, 0.5]], &[0, 1, 1]);
        let p = ModelParams::init_uniform(2, 4, 2, 3).unwrap();
        let a = sgd_train(&p, &b, 3, 2, 0.1, 11).unwrap();
        let c = sgd_train(&p, &b, 3, 2, 0.1, 11).unwrap();
        assert_eq!(a.weights(), c.weights());
    }

    #[test]
    fn tie_breaks_toward_class_zero() {
        let p = ModelParams::zeros(2, 0, 3).unwrap();
        let b = batch(&[vec![1.0, 1.0], vec![0.0, 2.0], vec![3.0, 1.0]], &[0, 1, 0]);
        assert!((evaluate(&p, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let conf = confidences(&p, &b.features).unwrap();
        assert!(conf.iter().all(|&(c, v)| c == 0 && (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn hand_accuracy_with_one_mistake() {
        // class = sign of x0: logits [x0, -x0]
        let p = ModelParams::from_weights(1, 0, 2, vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let b = batch(&[vec![2.0], vec![-1.0], vec![3.0]], &[0, 1, 1]);
        assert!((evaluate(&p, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn confidences_match_forward_rows() {
        let p = ModelParams::init_uniform(3, 2, 4, 8).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 0.0, -1.0], vec![0.1, 0.2, 0.3]], 3).unwrap();
        let probs = forward(&p, &x).unwrap();
        let conf = confidences(&p, &x).unwrap();
        for (i, (c, v)) in conf.iter().enumerate() {
            let row = probs.row(i);
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(*v, max);
            assert_eq!(row[*c], max);
        }
    }

    #[test]
    fn saturated_model_is_confident() {
        let p = ModelParams::from_weights(1, 0, 2, vec![50.0, -50.0, 0.0, 0.0]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0], vec![-2.0]], 1).unwrap();
        for (_, v) in confidences(&p, &x).unwrap() {
            assert!(v > 1.0 - 1e-12);
        }
    }

    #[test]
    fn size_bits_follows_param_count() {
        let p = ModelParams::zeros(10, 0, 4).unwrap();
        assert_eq!(p.len(), 44);
        assert_eq!(p.size_bits(), 44 * 32);
        let m = ModelParams::zeros(10, 8, 4).unwrap();
        assert_eq!(m.len(), 8 * 10 + 8 + 4 * 8 + 4);
    }
}
