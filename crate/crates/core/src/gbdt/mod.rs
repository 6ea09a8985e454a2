//! Multiclass gradient-boosted trees with a softmax objective.
//!
//! Each boosting round fits one regression tree per class to the gradient
//! `p_c - 1{y = c}` and hessian `p_c (1 - p_c)` of the multinomial log-loss.
//! Leaf weights are the regularized Newton step `-G / (H + lambda)` and a
//! split is kept only when its gain exceeds `gamma`. The softmax of the
//! summed, learning-rate-scaled leaf values is the probability signature
//! used for retrieval.

mod tree;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{fingerprint_json, FeatureVector, FEATURE_COUNT};
use crate::label::{ClassLabel, NUM_CLASSES};

pub use tree::TreeNode;
use tree::{grow, presort, GradStats, TreeParams};

pub const MODEL_VERSION: u32 = 1;

pub type Probabilities = [f64; NUM_CLASSES];

#[derive(Debug, Error)]
pub enum GbdtError {
    #[error("training data is empty")]
    EmptyData,
    #[error("non-finite feature value in row {0}")]
    NonFinite(usize),
    #[error("non-finite input vector")]
    NonFiniteInput,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("unsupported model version {found} (expected {MODEL_VERSION})")]
    Version { found: u32 },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtParams {
    pub max_depth: usize,
    pub learning_rate: f64,
    pub rounds: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub min_child_weight: f64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            max_depth: 6,
            learning_rate: 0.1,
            rounds: 100,
            gamma: 0.0,
            lambda: 1.0,
            min_child_weight: 1.0,
        }
    }
}

impl GbdtParams {
    fn validate(&self) -> Result<(), GbdtError> {
        let bad = |m: &str| Err(GbdtError::InvalidParams(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad("gamma must be nonnegative");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be nonnegative");
        }
        if !(self.min_child_weight.is_finite() && self.min_child_weight >= 0.0) {
            return bad("min_child_weight must be nonnegative");
        }
        Ok(())
    }
}

/// Trained ensemble. `trees[r * NUM_CLASSES + c]` is the round-`r` tree of
/// class `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    version: u32,
    params: GbdtParams,
    num_classes: usize,
    feature_count: usize,
    class_order: Vec<ClassLabel>,
    rounds: usize,
    trees: Vec<TreeNode>,
}

pub fn softmax(logits: &[f64; NUM_CLASSES]) -> Probabilities {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: [f64; NUM_CLASSES] = std::array::from_fn(|c| (logits[c] - max).exp());
    let z: f64 = exps.iter().sum();
    std::array::from_fn(|c| exps[c] / z)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate().skip(1) {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Mean multinomial log-loss of `logits` against `labels`.
fn mean_log_loss(logits: &[[f64; NUM_CLASSES]], labels: &[ClassLabel]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, y)| -softmax(z)[y.index()].ln())
        .sum();
    total / logits.len() as f64
}

/// Trains a model. See [`train_traced`] for the per-round loss curve.
pub fn train(
    data: &[(FeatureVector, ClassLabel)],
    params: &GbdtParams,
) -> Result<GbdtModel, GbdtError> {
    train_traced(data, params).map(|(m, _)| m)
}

/// Trains a model and returns the mean training log-loss before the first
/// round followed by the loss after each round.
pub fn train_traced(
    data: &[(FeatureVector, ClassLabel)],
    params: &GbdtParams,
) -> Result<(GbdtModel, Vec<f64>), GbdtError> {
    params.validate()?;
    if data.is_empty() {
        return Err(GbdtError::EmptyData);
    }
    if let Some(i) = data
        .iter()
        .position(|(x, _)| x.iter().any(|v| !v.is_finite()))
    {
        return Err(GbdtError::NonFinite(i));
    }
    let rows: Vec<FeatureVector> = data.iter().map(|(x, _)| *x).collect();
    let labels: Vec<ClassLabel> = data.iter().map(|(_, y)| *y).collect();
    let n = rows.len();
    let sorted = presort(&rows);
    let tree_params = TreeParams {
        max_depth: params.max_depth,
        gamma: params.gamma,
        lambda: params.lambda,
        min_child_weight: params.min_child_weight,
    };

    let mut logits = vec![[0.0; NUM_CLASSES]; n];
    let mut losses = Vec::with_capacity(params.rounds + 1);
    losses.push(mean_log_loss(&logits, &labels));
    let mut trees = Vec::with_capacity(params.rounds * NUM_CLASSES);

    for round in 0..params.rounds {
        let probs: Vec<Probabilities> = logits.iter().map(softmax).collect();
        // Class trees within a round depend only on `probs`, so they can be
        // grown concurrently without changing the result.
        let round_trees: Vec<TreeNode> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..NUM_CLASSES)
                .map(|c| {
                    let (probs, labels, rows, sorted, tp) =
                        (&probs, &labels, &rows, &sorted, &tree_params);
                    s.spawn(move || {
                        let grad: Vec<f64> = probs
                            .iter()
                            .zip(labels)
                            .map(|(p, y)| p[c] - y.indicator(c))
                            .collect();
                        let hess: Vec<f64> = probs.iter().map(|p| p[c] * (1.0 - p[c])).collect();
                        let stats = GradStats {
                            rows,
                            grad: &grad,
                            hess: &hess,
                        };
                        grow(&stats, sorted.clone(), 0, tp)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("tree worker panicked"))
                .collect()
        });
        for (z, x) in logits.iter_mut().zip(&rows) {
            for (c, t) in round_trees.iter().enumerate() {
                z[c] += params.learning_rate * t.predict(x);
            }
        }
        let loss = mean_log_loss(&logits, &labels);
        log::debug!("round {round}: train log-loss {loss:.6}");
        losses.push(loss);
        trees.extend(round_trees);
    }

    let model = GbdtModel {
        version: MODEL_VERSION,
        params: params.clone(),
        num_classes: NUM_CLASSES,
        feature_count: FEATURE_COUNT,
        class_order: ClassLabel::ALL.to_vec(),
        rounds: params.rounds,
        trees,
    };
    Ok((model, losses))
}

impl GbdtModel {
    pub fn params(&self) -> &GbdtParams {
        &self.params
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn trees(&self) -> &[TreeNode] {
        &self.trees
    }

    pub fn tree(&self, round: usize, class: usize) -> &TreeNode {
        &self.trees[round * NUM_CLASSES + class]
    }

    /// The model restricted to its first `rounds` rounds.
    pub fn truncated(&self, rounds: usize) -> GbdtModel {
        let rounds = rounds.min(self.rounds);
        GbdtModel {
            rounds,
            trees: self.trees[..rounds * NUM_CLASSES].to_vec(),
            ..self.clone()
        }
    }

    pub fn raw_scores(&self, x: &FeatureVector) -> Result<[f64; NUM_CLASSES], GbdtError> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GbdtError::NonFiniteInput);
        }
        let mut z = [0.0; NUM_CLASSES];
        for round in self.trees.chunks_exact(NUM_CLASSES) {
            for (c, t) in round.iter().enumerate() {
                z[c] += self.params.learning_rate * t.predict(x);
            }
        }
        Ok(z)
    }

    pub fn predict_proba(&self, x: &FeatureVector) -> Result<Probabilities, GbdtError> {
        self.raw_scores(x).map(|z| softmax(&z))
    }

    pub fn predict_label(&self, x: &FeatureVector) -> Result<ClassLabel, GbdtError> {
        let p = self.predict_proba(x)?;
        Ok(ClassLabel::ALL[argmax(&p)])
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_json(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<GbdtModel, GbdtError> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let header: Header =
            serde_json::from_str(s).map_err(|e| GbdtError::Format(e.to_string()))?;
        if header.version != MODEL_VERSION {
            return Err(GbdtError::Version {
                found: header.version,
            });
        }
        let m: GbdtModel = serde_json::from_str(s).map_err(|e| GbdtError::Format(e.to_string()))?;
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<(), GbdtError> {
        let bad = |m: String| Err(GbdtError::Format(m));
        if self.num_classes != NUM_CLASSES || self.class_order != ClassLabel::ALL {
            return bad("class order does not match the canonical label order".into());
        }
        if self.feature_count != FEATURE_COUNT {
            return bad(format!(
                "feature_count {} != {FEATURE_COUNT}",
                self.feature_count
            ));
        }
        if self.trees.len() != self.rounds * NUM_CLASSES {
            return bad(format!(
                "{} trees for {} rounds of {NUM_CLASSES} classes",
                self.trees.len(),
                self.rounds
            ));
        }
        self.params.validate()?;
        for t in &self.trees {
            if t.max_feature().is_some_and(|f| f >= FEATURE_COUNT) {
                return bad("split feature index out of range".into());
            }
            if t.depth() > self.params.max_depth {
                return bad("tree deeper than max_depth".into());
            }
            if !t.all_finite() {
                return bad("non-finite threshold or leaf weight".into());
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GbdtError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GbdtModel, GbdtError> {
        GbdtModel::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pad(a: f64, b: f64) -> FeatureVector {
        let mut v = [0.0; FEATURE_COUNT];
        v[0] = a;
        v[1] = b;
        v
    }

    /// Three classes by sign pattern of two features.
    fn sign_data(n: usize, seed: u64) -> Vec<(FeatureVector, ClassLabel)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: f64 = rng.gen_range(-1.0..1.0);
                let b: f64 = rng.gen_range(-1.0..1.0);
                let y = match (a >= 0.0, b >= 0.0) {
                    (true, true) => ClassLabel::Icmp,
                    (true, false) => ClassLabel::Udp,
                    _ => ClassLabel::Tcp,
                };
                (pad(a, b), y)
            })
            .collect()
    }

    #[test]
    fn defaults() {
        let p = GbdtParams::default();
        assert_eq!((p.max_depth, p.learning_rate, p.rounds), (6, 0.1, 100));
        assert_eq!((p.gamma, p.lambda, p.min_child_weight), (0.0, 1.0, 1.0));
    }

    #[test]
    fn zero_rounds_is_uniform() {
        let data = sign_data(20, 1);
        let m = train(
            &data,
            &GbdtParams {
                rounds: 0,
                ..Default::default()
            },
        )
        .unwrap();
        let p = m.predict_proba(&pad(0.3, -0.2)).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-12));
        assert_eq!(m.predict_label(&pad(0.3, -0.2)).unwrap(), ClassLabel::Icmp);
    }

    #[test]
    fn sign_pattern_training_accuracy() {
        let data = sign_data(300, 7);
        let m = train(&data, &GbdtParams::default()).unwrap();
        let correct = data
            .iter()
            .filter(|(x, y)| m.predict_label(x).unwrap() == *y)
            .count();
        assert!(correct as f64 / 300.0 >= 0.99, "accuracy {correct}/300");
    }

    /// Exhaustive single-stump search over every (feature, threshold) pair,
    /// scored by the regularized gain, must agree with the root split of the
    /// class-0 tree in round 1.
    #[test]
    fn first_round_root_matches_stump_oracle() {
        let data = sign_data(300, 11);
        let params = GbdtParams {
            rounds: 1,
            max_depth: 1,
            ..Default::default()
        };
        let m = train(&data, &params).unwrap();
        for class in 0..3 {
            let g: Vec<f64> = data
                .iter()
                .map(|(_, y)| 1.0 / 6.0 - y.indicator(class))
                .collect();
            let h = 5.0 / 36.0;
            let lam = params.lambda;
            let sc = |gs: f64, hs: f64| gs * gs / (hs + lam);
            let gt: f64 = g.iter().sum();
            let ht = h * data.len() as f64;
            let mut best: Option<(f64, usize, f64)> = None;
            for f in 0..FEATURE_COUNT {
                let mut vals: Vec<f64> = data.iter().map(|(x, _)| x[f]).collect();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                for w in vals.windows(2) {
                    let t = (w[0] + w[1]) / 2.0;
                    let (mut gl, mut hl) = (0.0, 0.0);
                    for (i, (x, _)) in data.iter().enumerate() {
                        if x[f] < t {
                            gl += g[i];
                            hl += h;
                        }
                    }
                    let (gr, hr) = (gt - gl, ht - hl);
                    if hl < 1.0 || hr < 1.0 {
                        continue;
                    }
                    let gain = 0.5 * (sc(gl, hl) + sc(gr, hr) - sc(gt, ht));
                    if best.is_none_or(|b| gain > b.0 + 1e-12) {
                        best = Some((gain, f, t));
                    }
                }
            }
            let (_, bf, bt) = best.unwrap();
            match m.tree(0, class) {
                TreeNode::Split {
                    feature, threshold, ..
                } => {
                    assert_eq!(*feature, bf);
                    assert!((threshold - bt).abs() < 1e-12);
                }
                other => panic!("expected split, got {other:?}"),
            }
        }
    }

    #[test]
    fn loss_is_non_increasing() {
        let data = sign_data(300, 3);
        let (_, losses) = train_traced(&data, &GbdtParams::default()).unwrap();
        assert_eq!(losses.len(), 101);
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn huge_lambda_gives_uniform() {
        let data = sign_data(100, 5);
        let m = train(
            &data,
            &GbdtParams {
                lambda: 1e15,
                rounds: 5,
                ..Default::default()
            },
        )
        .unwrap();
        for t in m.trees() {
            assert!(t.leaves().iter().all(|w| w.abs() < 1e-12));
        }
        let p = m.predict_proba(&pad(0.5, 0.5)).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-12));
    }

    #[test]
    fn huge_gamma_gives_stumps() {
        let data = sign_data(100, 5);
        let m = train(
            &data,
            &GbdtParams {
                gamma: 1e9,
                rounds: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(m.trees().iter().all(|t| t.leaf_count() == 1));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            train(&[], &GbdtParams::default()),
            Err(GbdtError::EmptyData)
        ));
        let mut data = sign_data(10, 1);
        data[4].0[3] = f64::NAN;
        assert!(matches!(
            train(&data, &GbdtParams::default()),
            Err(GbdtError::NonFinite(4))
        ));
        let m = train(
            &sign_data(10, 1),
            &GbdtParams {
                rounds: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(m.predict_proba(&[f64::INFINITY; 9]).is_err());
    }

    #[test]
    fn deterministic_training() {
        let data = sign_data(200, 9);
        let p = GbdtParams {
            rounds: 10,
            ..Default::default()
        };
        assert_eq!(
            train(&data, &p).unwrap().to_json(),
            train(&data, &p).unwrap().to_json()
        );
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]), 2);
    }
}
