//! Evaluation harness: stratified sampling, confusion counting, per-class
//! and macro precision/recall/F1, prompting-regime sweeps and result tables.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FlowFeatures;
use crate::label::{ClassLabel, NUM_CLASSES};
use crate::pipeline::{DetectionResult, Detector, DetectorConfig, Prediction, Resources};

/// Predicted-column index reserved for parse failures.
pub const PARSE_FAILURE_COLUMN: usize = NUM_CLASSES;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("class {class} has {have} records, {need} requested")]
    InsufficientClass {
        class: ClassLabel,
        have: usize,
        need: usize,
    },
    #[error("nothing to score")]
    Empty,
    #[error("experiment grid is empty")]
    EmptyGrid,
}

/// Rows are true classes; columns are predicted classes followed by a
/// parse-failure column.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES + 1]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn add(&mut self, truth: ClassLabel, predicted: Prediction) {
        let col = match predicted {
            Prediction::Label(l) => l.index(),
            Prediction::ParseFailure => PARSE_FAILURE_COLUMN,
        };
        self.counts[truth.index()][col] += 1;
    }

    pub fn from_pairs<'a, I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = &'a (ClassLabel, Prediction)>,
    {
        let mut m = ConfusionMatrix::default();
        for (t, p) in pairs {
            m.add(*t, *p);
        }
        m
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.counts[class][class]
    }

    /// Predictions of `class` whose true class differs.
    pub fn false_positives(&self, class: usize) -> u64 {
        (0..NUM_CLASSES)
            .filter(|&r| r != class)
            .map(|r| self.counts[r][class])
            .sum()
    }

    /// Rows of `class` not predicted as `class`, parse failures included.
    pub fn false_negatives(&self, class: usize) -> u64 {
        self.row_total(class) - self.true_positives(class)
    }

    pub fn parse_failures(&self) -> u64 {
        self.counts.iter().map(|r| r[PARSE_FAILURE_COLUMN]).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub config_fingerprint: String,
    pub samples: u64,
    /// Indexed by canonical class order.
    pub per_class: [ClassMetrics; NUM_CLASSES],
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub parse_failure_rate: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_matrix(
        name: impl Into<String>,
        config_fingerprint: impl Into<String>,
        m: ConfusionMatrix,
    ) -> Self {
        let per_class: [ClassMetrics; NUM_CLASSES] = std::array::from_fn(|c| {
            let tp = m.true_positives(c);
            let precision = ratio(tp, tp + m.false_positives(c));
            let recall = ratio(tp, tp + m.false_negatives(c));
            ClassMetrics {
                precision,
                recall,
                f1: f1(precision, recall),
                support: m.row_total(c),
            }
        });
        let mean =
            |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
        EvalReport {
            name: name.into(),
            config_fingerprint: config_fingerprint.into(),
            samples: m.total(),
            macro_precision: mean(|c| c.precision),
            macro_recall: mean(|c| c.recall),
            macro_f1: mean(|c| c.f1),
            parse_failure_rate: ratio(m.parse_failures(), m.total()),
            per_class,
            confusion: m,
        }
    }

    pub fn class(&self, l: ClassLabel) -> &ClassMetrics {
        &self.per_class[l.index()]
    }
}

/// Scores `(truth, prediction)` pairs. Zero-denominator ratios are 0.
pub fn score(results: &[(ClassLabel, Prediction)]) -> Result<EvalReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(EvalReport::from_matrix(
        "",
        "",
        ConfusionMatrix::from_pairs(results),
    ))
}

pub fn score_detections(
    truth: &[ClassLabel],
    results: &[DetectionResult],
) -> Result<EvalReport, EvalError> {
    let pairs: Vec<_> = truth
        .iter()
        .zip(results)
        .map(|(t, r)| (*t, r.predicted))
        .collect();
    score(&pairs)
}

/// Draws exactly `per_class` indices of every class without replacement.
/// Each class's indices are shuffled with a generator seeded from `seed`;
/// the returned indices are in ascending order.
pub fn stratified_sample(
    labels: &[ClassLabel],
    per_class: usize,
    seed: u64,
) -> Result<Vec<usize>, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(per_class * NUM_CLASSES);
    for class in ClassLabel::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < per_class {
            return Err(EvalError::InsufficientClass {
                class,
                have: idx.len(),
                need: per_class,
            });
        }
        idx.shuffle(&mut rng);
        picked.extend_from_slice(&idx[..per_class]);
    }
    picked.sort_unstable();
    Ok(picked)
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Draws one flow inside the rule-oracle region of `class`. Values are
/// rounded to three decimals so rendered descriptions are exact.
pub fn synthetic_flow(class: ClassLabel, rng: &mut impl Rng) -> FlowFeatures {
    let flood_rate = |rng: &mut dyn rand::RngCore| round3(rng.gen_range(10.0..=10_000.0));
    let small = |rng: &mut dyn rand::RngCore| round3(rng.gen_range(20.0..=60.0));
    let (proto, rate, len, flags) = match class {
        ClassLabel::Icmp => (1, flood_rate(rng), small(rng), [false; 5]),
        ClassLabel::Udp => (17, flood_rate(rng), small(rng), [false; 5]),
        ClassLabel::Tcp => {
            let (psh, ack) = [(false, false), (true, false), (false, true)][rng.gen_range(0..3)];
            (
                6,
                flood_rate(rng),
                small(rng),
                [psh, ack, rng.gen_bool(0.5), false, false],
            )
        }
        ClassLabel::PshAck => {
            let flags = [
                true,
                true,
                rng.gen_bool(0.5),
                rng.gen_bool(0.5),
                rng.gen_bool(0.5),
            ];
            (6, flood_rate(rng), small(rng), flags)
        }
        ClassLabel::RstFin => {
            let (rst, fin) = [(true, false), (false, true), (true, true)][rng.gen_range(0..3)];
            let (psh, ack) = [(false, false), (true, false), (false, true)][rng.gen_range(0..3)];
            (
                6,
                flood_rate(rng),
                small(rng),
                [psh, ack, rng.gen_bool(0.5), rst, fin],
            )
        }
        ClassLabel::Benign => {
            let proto = [1u8, 6, 17][rng.gen_range(0..3)];
            let flags = std::array::from_fn(|_| rng.gen_bool(0.5));
            if rng.gen_bool(0.5) {
                (
                    proto,
                    round3(rng.gen_range(0.01..=10_000.0)),
                    round3(rng.gen_range(61.0..=1500.0)),
                    flags,
                )
            } else {
                (
                    proto,
                    round3(rng.gen_range(0.01..=0.99)),
                    round3(rng.gen_range(20.0..=1500.0)),
                    flags,
                )
            }
        }
    };
    let iat_ms = round3(1000.0 / rate);
    FlowFeatures::new(proto, rate, iat_ms, len, flags).expect("generated flow is valid")
}

/// `per_class` flows of every class, class-major in canonical order.
pub fn synthetic_flows(per_class: usize, seed: u64) -> Vec<(FlowFeatures, ClassLabel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ClassLabel::ALL
        .into_iter()
        .flat_map(|c| std::iter::repeat_n(c, per_class))
        .map(|c| (synthetic_flow(c, &mut rng), c))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub name: String,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
    /// Flows whose detection recorded a transport or pipeline error.
    pub flow_errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub per_class: usize,
    pub seed: u64,
    pub sample: Vec<usize>,
    pub outcomes: Vec<ExperimentOutcome>,
}

/// Runs every detector configuration over one shared stratified sample.
/// Configurations run in grid order; a configuration that cannot be built
/// is reported and skipped.
pub fn run_experiment(
    grid: &[DetectorConfig],
    data: &[(FlowFeatures, ClassLabel)],
    per_class: usize,
    seed: u64,
    res: Resources<'_>,
) -> Result<Experiment, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let labels: Vec<ClassLabel> = data.iter().map(|(_, y)| *y).collect();
    let sample = stratified_sample(&labels, per_class, seed)?;
    let flows: Vec<FlowFeatures> = sample.iter().map(|&i| data[i].0).collect();
    let truth: Vec<ClassLabel> = sample.iter().map(|&i| labels[i]).collect();

    let mut outcomes = Vec::with_capacity(grid.len());
    for cfg in grid {
        let mut outcome = ExperimentOutcome {
            name: cfg.name.clone(),
            report: None,
            error: None,
            flow_errors: 0,
        };
        match Detector::new(cfg.clone(), res) {
            Ok(det) => {
                log::info!("running {} over {} flows", cfg.name, flows.len());
                let results = det.detect_batch(&flows);
                outcome.flow_errors = results.iter().filter(|r| r.error.is_some()).count();
                match score_detections(&truth, &results) {
                    Ok(mut r) => {
                        r.name = cfg.name.clone();
                        r.config_fingerprint = cfg.fingerprint();
                        outcome.report = Some(r);
                    }
                    Err(e) => outcome.error = Some(e.to_string()),
                }
            }
            Err(e) => {
                log::error!("{}: {e}", cfg.name);
                outcome.error = Some(e.to_string());
            }
        }
        outcomes.push(outcome);
    }
    Ok(Experiment {
        per_class,
        seed,
        sample,
        outcomes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Precision,
    Recall,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Precision, Metric::Recall, Metric::F1];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Precision => "Precision",
            Metric::Recall => "Recall",
            Metric::F1 => "F1",
        }
    }

    fn class_value(self, c: &ClassMetrics) -> f64 {
        match self {
            Metric::Precision => c.precision,
            Metric::Recall => c.recall,
            Metric::F1 => c.f1,
        }
    }

    fn macro_value(self, r: &EvalReport) -> f64 {
        match self {
            Metric::Precision => r.macro_precision,
            Metric::Recall => r.macro_recall,
            Metric::F1 => r.macro_f1,
        }
    }

    /// The six per-class values followed by the macro average.
    pub fn row(self, r: &EvalReport) -> Vec<f64> {
        let mut v: Vec<f64> = r.per_class.iter().map(|c| self.class_value(c)).collect();
        v.push(self.macro_value(r));
        v
    }
}

fn table_columns() -> Vec<&'static str> {
    let mut cols: Vec<&str> = ClassLabel::ALL.iter().map(|l| l.display_name()).collect();
    cols.push("Macro avg");
    cols
}

/// One Markdown table per metric, one row per report, two decimals.
pub fn render_markdown(reports: &[EvalReport]) -> String {
    let cols = table_columns();
    let mut out = String::new();
    for metric in Metric::ALL {
        writeln!(out, "### {}\n", metric.name()).unwrap();
        writeln!(out, "| Method | {} |", cols.join(" | ")).unwrap();
        writeln!(out, "|---{}|", "|---".repeat(cols.len())).unwrap();
        for r in reports {
            let cells: Vec<String> = metric.row(r).iter().map(|v| format!("{v:.2}")).collect();
            writeln!(out, "| {} | {} |", r.name, cells.join(" | ")).unwrap();
        }
        out.push('\n');
    }
    let failures: Vec<String> = reports
        .iter()
        .map(|r| format!("{}: {:.4}", r.name, r.parse_failure_rate))
        .collect();
    writeln!(out, "Parse-failure rate: {}", failures.join(", ")).unwrap();
    out
}

/// Long-form CSV: `method,metric,<classes...>,Macro avg`.
pub fn render_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("method,metric,{}\n", table_columns().join(","));
    for r in reports {
        for metric in Metric::ALL {
            let cells: Vec<String> = metric.row(r).iter().map(|v| format!("{v:.6}")).collect();
            writeln!(out, "{},{},{}", r.name, metric.name(), cells.join(",")).unwrap();
        }
    }
    out
}
