//! Small MLP classifier whose 16-wide penultimate layer serves as a
//! task-specific retrieval embedding.
//!
//! Shape is `9 -> h1 -> 16 -> 6` with ReLU on both hidden layers, trained by
//! plain mini-batch gradient descent on label-smoothed cross-entropy with
//! early stopping on a stratified validation split. Inputs are expected to
//! be standardized feature vectors.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureVector, FEATURE_COUNT};
use crate::gbdt::softmax;
use crate::label::{ClassLabel, NUM_CLASSES};

pub const EMBED_DIM: usize = 16;
pub const MODEL_VERSION: u32 = 1;

pub type Embedding = [f64; EMBED_DIM];

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("training needs at least two classes")]
    TooFewClasses,
    #[error("class {0} has no training rows after the validation split")]
    DegenerateSplit(ClassLabel),
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite input vector")]
    NonFiniteInput,
    #[error("unsupported model version {0}")]
    Version(u32),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub h1: usize,
    pub epochs_max: usize,
    pub lr: f64,
    pub label_smoothing: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            h1: 32,
            epochs_max: 200,
            lr: 0.05,
            label_smoothing: 0.1,
            patience: 10,
            validation_fraction: 0.2,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Fully connected layer, `weights` row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn random(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut d = Dense::zeros(inputs, outputs);
        for w in d.weights.iter_mut().chain(d.bias.iter_mut()) {
            *w = rng.gen_range(-bound..bound);
        }
        d
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    version: u32,
    dims: [usize; 4],
    label_smoothing: f64,
    layers: [Dense; 3],
}

struct Activations {
    input: Vec<f64>,
    hidden1: Vec<f64>,
    hidden2: Vec<f64>,
    probs: [f64; NUM_CLASSES],
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|z| z.max(0.0)).collect()
}

/// `(1 - eps)` one-hot mass on the true class plus `eps / C` spread
/// uniformly over all classes.
pub fn smoothed_targets(label: ClassLabel, eps: f64) -> [f64; NUM_CLASSES] {
    std::array::from_fn(|c| (1.0 - eps) * label.indicator(c) + eps / NUM_CLASSES as f64)
}

impl MlpModel {
    pub fn new_random(h1: usize, label_smoothing: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MlpModel {
            version: MODEL_VERSION,
            dims: [FEATURE_COUNT, h1, EMBED_DIM, NUM_CLASSES],
            label_smoothing,
            layers: [
                Dense::random(FEATURE_COUNT, h1, &mut rng),
                Dense::random(h1, EMBED_DIM, &mut rng),
                Dense::random(EMBED_DIM, NUM_CLASSES, &mut rng),
            ],
        }
    }

    pub fn zeros(h1: usize, label_smoothing: f64) -> Self {
        MlpModel {
            version: MODEL_VERSION,
            dims: [FEATURE_COUNT, h1, EMBED_DIM, NUM_CLASSES],
            label_smoothing,
            layers: [
                Dense::zeros(FEATURE_COUNT, h1),
                Dense::zeros(h1, EMBED_DIM),
                Dense::zeros(EMBED_DIM, NUM_CLASSES),
            ],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn label_smoothing(&self) -> f64 {
        self.label_smoothing
    }

    pub fn layers(&self) -> &[Dense; 3] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn forward(&self, x: &FeatureVector) -> Activations {
        let hidden1 = relu(self.layers[0].forward(x));
        let hidden2 = relu(self.layers[1].forward(&hidden1));
        let z = self.layers[2].forward(&hidden2);
        let logits: [f64; NUM_CLASSES] = std::array::from_fn(|c| z[c]);
        Activations {
            input: x.to_vec(),
            hidden1,
            hidden2,
            probs: softmax(&logits),
        }
    }

    fn check_input(x: &FeatureVector) -> Result<(), MlpError> {
        if x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(MlpError::NonFiniteInput)
        }
    }

    /// Post-activation output of the 16-wide hidden layer.
    pub fn embed(&self, x: &FeatureVector) -> Result<Embedding, MlpError> {
        Self::check_input(x)?;
        let h2 = self.forward(x).hidden2;
        Ok(std::array::from_fn(|i| h2[i]))
    }

    pub fn predict_proba(&self, x: &FeatureVector) -> Result<[f64; NUM_CLASSES], MlpError> {
        Self::check_input(x)?;
        Ok(self.forward(x).probs)
    }

    pub fn predict_label(&self, x: &FeatureVector) -> Result<ClassLabel, MlpError> {
        let p = self.predict_proba(x)?;
        Ok(ClassLabel::ALL[crate::gbdt::argmax(&p)])
    }

    /// Mean smoothed cross-entropy over `batch`.
    pub fn loss(&self, batch: &[(FeatureVector, ClassLabel)]) -> f64 {
        let eps = self.label_smoothing;
        let total: f64 = batch
            .iter()
            .map(|(x, y)| {
                let p = self.forward(x).probs;
                let t = smoothed_targets(*y, eps);
                -(0..NUM_CLASSES).map(|c| t[c] * p[c].ln()).sum::<f64>()
            })
            .sum();
        total / batch.len() as f64
    }

    /// Mean loss and its gradient with respect to every parameter, laid out
    /// like the model's layers (weights then bias, layer by layer).
    pub fn loss_and_grad(&self, batch: &[(FeatureVector, ClassLabel)]) -> (f64, MlpModel) {
        let mut grad = MlpModel::zeros(self.dims[1], self.label_smoothing);
        let eps = self.label_smoothing;
        let mut loss = 0.0;
        for (x, y) in batch {
            let act = self.forward(x);
            let t = smoothed_targets(*y, eps);
            loss -= (0..NUM_CLASSES)
                .map(|c| t[c] * act.probs[c].ln())
                .sum::<f64>();
            let delta3: Vec<f64> = (0..NUM_CLASSES).map(|c| act.probs[c] - t[c]).collect();
            let delta2 = backprop(&self.layers[2], &mut grad.layers[2], &delta3, &act.hidden2);
            let delta1 = backprop(&self.layers[1], &mut grad.layers[1], &delta2, &act.hidden1);
            backprop(&self.layers[0], &mut grad.layers[0], &delta1, &act.input);
        }
        let n = batch.len() as f64;
        for l in grad.layers.iter_mut() {
            l.params_mut().for_each(|g| *g /= n);
        }
        (loss / n, grad)
    }

    fn step(&mut self, grad: &MlpModel, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            for (p, d) in l.params_mut().zip(g.params()) {
                *p -= lr * d;
            }
        }
    }

    fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for l in self.layers.iter_mut() {
            let n = l.weights.len() + l.bias.len();
            if k < n {
                return l.params_mut().nth(k).expect("index within layer");
            }
            k -= n;
        }
        panic!("parameter index out of range")
    }

    fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.params().copied())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<MlpModel, MlpError> {
        let m: MlpModel = serde_json::from_str(s).map_err(|e| MlpError::Format(e.to_string()))?;
        if m.version != MODEL_VERSION {
            return Err(MlpError::Version(m.version));
        }
        let [i, h1, e, c] = m.dims;
        if i != FEATURE_COUNT || e != EMBED_DIM || c != NUM_CLASSES {
            return Err(MlpError::Format(format!("unexpected dims {:?}", m.dims)));
        }
        let shapes = [(i, h1), (h1, e), (e, c)];
        for (l, (ins, outs)) in m.layers.iter().zip(shapes) {
            if l.inputs != ins
                || l.outputs != outs
                || l.weights.len() != ins * outs
                || l.bias.len() != outs
            {
                return Err(MlpError::Format("layer shape mismatch".into()));
            }
        }
        if m.flat_params().iter().any(|v| !v.is_finite()) {
            return Err(MlpError::Format("non-finite parameter".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MlpError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MlpModel, MlpError> {
        MlpModel::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Accumulates the gradient of `layer` given the output delta and returns
/// the delta for the layer below (through its ReLU).
fn backprop(layer: &Dense, grad: &mut Dense, delta: &[f64], input: &[f64]) -> Vec<f64> {
    let mut below = vec![0.0; layer.inputs];
    for (o, d) in delta.iter().enumerate() {
        grad.bias[o] += d;
        let row = o * layer.inputs;
        for (i, x) in input.iter().enumerate() {
            grad.weights[row + i] += d * x;
            below[i] += d * layer.weights[row + i];
        }
    }
    // `input` is a post-ReLU activation (or the raw input for layer 0,
    // where the returned delta is unused).
    for (b, x) in below.iter_mut().zip(input) {
        if *x <= 0.0 {
            *b = 0.0;
        }
    }
    below
}

/// Largest relative discrepancy between analytic gradients and central
/// finite differences (step `1e-5`), over every parameter. The relative
/// error of a pair is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(model: &MlpModel, batch: &[(FeatureVector, ClassLabel)]) -> f64 {
    const STEP: f64 = 1e-5;
    let (_, grad) = model.loss_and_grad(batch);
    let analytic = grad.flat_params();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(k);
        *probe.param_mut(k) = orig + STEP;
        let up = probe.loss(batch);
        *probe.param_mut(k) = orig - STEP;
        let down = probe.loss(batch);
        *probe.param_mut(k) = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub validation_accuracy: f64,
}

/// Per-class seeded shuffle; the first `round(fraction * n_c)` rows of each
/// class go to validation. Returns `(train, validation)` row indices.
pub fn stratified_split(
    labels: &[ClassLabel],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in ClassLabel::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_val = (fraction * idx.len() as f64).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

pub fn train_mlp(
    data: &[(FeatureVector, ClassLabel)],
    cfg: &MlpConfig,
) -> Result<(MlpModel, MlpTrainSummary), MlpError> {
    if !(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0) {
        return Err(MlpError::Config(
            "validation_fraction must be in (0, 1)".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.label_smoothing) {
        return Err(MlpError::Config("label_smoothing must be in [0, 1)".into()));
    }
    if cfg.h1 == 0 || cfg.batch_size == 0 {
        return Err(MlpError::Config(
            "h1 and batch_size must be positive".into(),
        ));
    }
    if data.iter().any(|(x, _)| x.iter().any(|v| !v.is_finite())) {
        return Err(MlpError::NonFiniteInput);
    }
    let labels: Vec<ClassLabel> = data.iter().map(|(_, y)| *y).collect();
    let present: Vec<ClassLabel> = ClassLabel::ALL
        .into_iter()
        .filter(|c| labels.contains(c))
        .collect();
    if present.len() < 2 {
        return Err(MlpError::TooFewClasses);
    }
    let (train_idx, val_idx) = stratified_split(&labels, cfg.validation_fraction, cfg.seed);
    for c in &present {
        if !train_idx.iter().any(|&i| labels[i] == *c) {
            return Err(MlpError::DegenerateSplit(*c));
        }
    }
    if val_idx.is_empty() {
        return Err(MlpError::EmptyValidation);
    }
    let val: Vec<_> = val_idx.iter().map(|&i| data[i]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut model = MlpModel::new_random(cfg.h1, cfg.label_smoothing, rng.gen());
    let mut best = (model.clone(), model.loss(&val), 0usize);
    let mut order = train_idx.clone();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs_max {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| data[i]).collect();
            let (_, grad) = model.loss_and_grad(&batch);
            model.step(&grad, cfg.lr);
        }
        let vl = model.loss(&val);
        log::debug!("epoch {epoch}: validation loss {vl:.6}");
        if vl < best.1 {
            best = (model.clone(), vl, epoch);
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    let (model, best_loss, best_epoch) = best;
    let correct = val
        .iter()
        .filter(|(x, y)| model.predict_label(x).is_ok_and(|p| p == *y))
        .count();
    let summary = MlpTrainSummary {
        epochs_run,
        best_epoch,
        best_validation_loss: best_loss,
        validation_accuracy: correct as f64 / val.len() as f64,
    };
    Ok((model, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(n: usize, seed: u64) -> Vec<(FeatureVector, ClassLabel)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x: FeatureVector = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
                (x, ClassLabel::ALL[rng.gen_range(0..NUM_CLASSES)])
            })
            .collect()
    }

    /// Two classes split by the hyperplane `x0 + x1 > 0`.
    fn separable(n: usize, seed: u64) -> Vec<(FeatureVector, ClassLabel)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        while out.len() < n {
            let x: FeatureVector = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let s = x[0] + x[1];
            if s.abs() < 0.1 {
                continue;
            }
            out.push((
                x,
                if s > 0.0 {
                    ClassLabel::Udp
                } else {
                    ClassLabel::Benign
                },
            ));
        }
        out
    }

    #[test]
    fn smoothed_targets_sum_to_one() {
        for eps in [0.0, 0.1, 0.37, 0.99] {
            for l in ClassLabel::ALL {
                let t = smoothed_targets(l, eps);
                assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(smoothed_targets(ClassLabel::Tcp, 0.0)[2], 1.0);
    }

    #[test]
    fn embed_shape_and_zero_model() {
        let z = MlpModel::zeros(32, 0.1);
        assert_eq!(z.embed(&[0.0; 9]).unwrap(), [0.0; EMBED_DIM]);
        let m = MlpModel::new_random(8, 0.1, 3);
        assert_eq!(m.dims()[2], EMBED_DIM);
        let x = [0.3; 9];
        assert_eq!(m.embed(&x).unwrap(), m.embed(&x).unwrap());
        assert!(m.embed(&[f64::NAN; 9]).is_err());
    }

    #[test]
    fn gradient_check_random_nets() {
        for seed in 0..3 {
            let m = MlpModel::new_random(12, 0.1, seed);
            let err = gradient_check(&m, &random_batch(6, seed + 100));
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn zero_smoothing_gives_plain_cross_entropy_gradient() {
        let m = MlpModel::new_random(8, 0.0, 4);
        let batch = random_batch(1, 9);
        let (_, g) = m.loss_and_grad(&batch);
        let p = m.predict_proba(&batch[0].0).unwrap();
        for (c, pc) in p.iter().enumerate() {
            let expect = pc - batch[0].1.indicator(c);
            assert!((g.layers[2].bias[c] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_singles() {
        let m = MlpModel::new_random(8, 0.1, 5);
        let batch = random_batch(4, 6);
        let (_, g) = m.loss_and_grad(&batch);
        let mut mean = vec![0.0; m.param_count()];
        for s in &batch {
            let (_, gs) = m.loss_and_grad(std::slice::from_ref(s));
            for (acc, v) in mean.iter_mut().zip(gs.flat_params()) {
                *acc += v / 4.0;
            }
        }
        for (a, b) in g.flat_params().iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn small_steps_reduce_loss() {
        let mut m = MlpModel::new_random(8, 0.1, 7);
        let batch = random_batch(16, 8);
        let mut prev = m.loss(&batch);
        for _ in 0..5 {
            let (_, g) = m.loss_and_grad(&batch);
            m.step(&g, 1e-3);
            let l = m.loss(&batch);
            assert!(l <= prev);
            prev = l;
        }
    }

    #[test]
    fn learns_separable_toy() {
        let data = separable(200, 1);
        let (m, summary) = train_mlp(&data, &MlpConfig::default()).unwrap();
        assert!(summary.epochs_run <= 200);
        assert!(summary.validation_accuracy >= 0.95, "{summary:?}");
        assert_eq!(m.dims(), [9, 32, 16, 6]);
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable(80, 2);
        let cfg = MlpConfig {
            epochs_max: 5,
            ..Default::default()
        };
        let a = train_mlp(&data, &cfg).unwrap().0;
        let b = train_mlp(&data, &cfg).unwrap().0;
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn degenerate_inputs() {
        let one_class: Vec<_> = separable(50, 3)
            .into_iter()
            .map(|(x, _)| (x, ClassLabel::Udp))
            .collect();
        assert!(matches!(
            train_mlp(&one_class, &MlpConfig::default()),
            Err(MlpError::TooFewClasses)
        ));
        // a class with a single row ends up entirely in validation
        let mut data = separable(40, 4);
        data.push(([0.0; 9], ClassLabel::Icmp));
        let cfg = MlpConfig {
            validation_fraction: 0.6,
            ..Default::default()
        };
        assert!(matches!(
            train_mlp(&data, &cfg),
            Err(MlpError::DegenerateSplit(ClassLabel::Icmp))
        ));
    }

    #[test]
    fn json_roundtrip() {
        let m = MlpModel::new_random(4, 0.1, 1);
        let back = MlpModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        let json = m.to_json();
        assert!(MlpModel::from_json(&json[..json.len() - 5]).is_err());
    }
}
