//! The composite detector: featurize, optionally sign with the classifier,
//! retrieve exemplars, build the prompt, query the model, parse the answer.

use std::io::Write;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::features::{describe, fingerprint_json, FeatureVector, FlowFeatures, Standardizer};
use crate::gbdt::GbdtModel;
use crate::kb::{KnowledgeBase, Space};
use crate::label::{ClassLabel, LabelMap};
use crate::llm::{LlmClient, LlmError, ModelRef};
use crate::mlp::MlpModel;
use crate::par::parallel_map;
use crate::prompting::{build_prompt, parse_answer, Prompt, PromptConfig, PromptError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] LlmError),
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub name: String,
    pub prompt: PromptConfig,
    pub space: Space,
    pub model: ModelRef,
}

impl DetectorConfig {
    pub fn new(
        name: impl Into<String>,
        prompt: PromptConfig,
        space: Space,
        model: ModelRef,
    ) -> Self {
        DetectorConfig {
            name: name.into(),
            prompt,
            space,
            model,
        }
    }

    pub fn k(&self) -> usize {
        self.prompt.k
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_json(self)
    }
}

/// Produces the custom-space query vector for a flow.
pub trait QueryEmbedder: Sync {
    fn embed_query(
        &self,
        flow: &FlowFeatures,
        standardized: &FeatureVector,
    ) -> Result<Vec<f64>, String>;
}

impl QueryEmbedder for MlpModel {
    fn embed_query(
        &self,
        _: &FlowFeatures,
        standardized: &FeatureVector,
    ) -> Result<Vec<f64>, String> {
        self.embed(standardized)
            .map(|e| e.to_vec())
            .map_err(|e| e.to_string())
    }
}

/// Shared, read-only artifacts a detector draws on.
#[derive(Clone, Copy)]
pub struct Resources<'a> {
    pub standardizer: &'a Standardizer,
    pub gbdt: Option<&'a GbdtModel>,
    pub kb: Option<&'a KnowledgeBase>,
    pub embedder: Option<&'a dyn QueryEmbedder>,
}

impl<'a> Resources<'a> {
    pub fn new(standardizer: &'a Standardizer) -> Self {
        Resources {
            standardizer,
            gbdt: None,
            kb: None,
            embedder: None,
        }
    }

    pub fn with_gbdt(mut self, m: &'a GbdtModel) -> Self {
        self.gbdt = Some(m);
        self
    }

    pub fn with_kb(mut self, kb: &'a KnowledgeBase) -> Self {
        self.kb = Some(kb);
        self
    }

    pub fn with_embedder(mut self, e: &'a dyn QueryEmbedder) -> Self {
        self.embedder = Some(e);
        self
    }
}

/// A parsed model answer, or the absence of one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Prediction {
    Label(ClassLabel),
    ParseFailure,
}

impl Prediction {
    pub fn label(self) -> Option<ClassLabel> {
        match self {
            Prediction::Label(l) => Some(l),
            Prediction::ParseFailure => None,
        }
    }
}

impl std::fmt::Display for Prediction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Prediction::Label(l) => write!(f, "{l}"),
            Prediction::ParseFailure => f.write_str("PARSE_FAILURE"),
        }
    }
}

impl Serialize for Prediction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Prediction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "PARSE_FAILURE" {
            return Ok(Prediction::ParseFailure);
        }
        s.parse()
            .map(Prediction::Label)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub id: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub flow_id: usize,
    pub predicted: Prediction,
    pub rationale: String,
    pub prompt: Prompt,
    pub retrieved: Vec<Retrieved>,
    pub latency_ms: u64,
    pub error: Option<String>,
}

pub struct Detector<'a> {
    cfg: DetectorConfig,
    res: Resources<'a>,
    client: LlmClient,
    vocab: LabelMap,
}

impl<'a> Detector<'a> {
    /// Checks that the configuration is internally consistent and that the
    /// resources it needs are present.
    pub fn new(cfg: DetectorConfig, res: Resources<'a>) -> Result<Self, PipelineError> {
        cfg.prompt.validate()?;
        cfg.model.validate()?;
        if cfg.k() > 0 {
            let kb = res
                .kb
                .ok_or_else(|| PipelineError::Config("retrieval needs a knowledge base".into()))?;
            match cfg.space {
                Space::Signature => {
                    if res.gbdt.is_none() {
                        return Err(PipelineError::Config(
                            "signature retrieval needs a gbdt model".into(),
                        ));
                    }
                    if !kb.is_empty() && !kb.has_signatures() {
                        return Err(PipelineError::Config(
                            "knowledge base has no signatures".into(),
                        ));
                    }
                }
                Space::Custom => {
                    if res.embedder.is_none() {
                        return Err(PipelineError::Config(
                            "custom retrieval needs a query embedder".into(),
                        ));
                    }
                    if !kb.is_empty() && kb.custom_dim().is_none() {
                        return Err(PipelineError::Config(
                            "knowledge base has no custom embeddings".into(),
                        ));
                    }
                }
                Space::Feature => {}
            }
            if kb.len() < cfg.k() {
                return Err(PipelineError::Config(format!(
                    "knowledge base has {} exemplars, k = {}",
                    kb.len(),
                    cfg.k()
                )));
            }
        }
        let client = LlmClient::new(cfg.model.clone());
        Ok(Detector {
            cfg,
            res,
            client,
            vocab: LabelMap::new(),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    fn query(&self, flow: &FlowFeatures, z: &FeatureVector) -> Result<Vec<f64>, String> {
        match self.cfg.space {
            Space::Feature => Ok(z.to_vec()),
            Space::Signature => self
                .res
                .gbdt
                .expect("checked in new")
                .predict_proba(z)
                .map(|p| p.to_vec())
                .map_err(|e| e.to_string()),
            Space::Custom => self
                .res
                .embedder
                .expect("checked in new")
                .embed_query(flow, z),
        }
    }

    pub fn detect(&self, flow_id: usize, flow: &FlowFeatures) -> DetectionResult {
        let description = describe(flow);
        let mut result = DetectionResult {
            flow_id,
            predicted: Prediction::ParseFailure,
            rationale: String::new(),
            prompt: Prompt {
                text: String::new(),
                parts: Default::default(),
            },
            retrieved: Vec::new(),
            latency_ms: 0,
            error: None,
        };

        let mut exemplars = Vec::new();
        if self.cfg.k() > 0 {
            let kb = self.res.kb.expect("checked in new");
            let z = self.res.standardizer.apply(flow);
            let hits = self.query(flow, &z).and_then(|q| {
                kb.retrieve(&q, self.cfg.space, self.cfg.k())
                    .map_err(|e| e.to_string())
            });
            match hits {
                Ok(hits) => {
                    result.retrieved = hits
                        .iter()
                        .map(|n| Retrieved {
                            id: n.exemplar.id,
                            distance: n.distance,
                        })
                        .collect();
                    exemplars = hits.into_iter().map(|n| n.exemplar).collect();
                }
                Err(e) => {
                    result.error = Some(format!("retrieval: {e}"));
                    return result;
                }
            }
        }

        match build_prompt(&self.cfg.prompt, &description, &exemplars) {
            Ok(p) => result.prompt = p,
            Err(e) => {
                result.error = Some(format!("prompt: {e}"));
                return result;
            }
        }
        match self.client.complete(&result.prompt.text) {
            Ok(resp) => {
                result.latency_ms = resp.latency_ms;
                result.predicted = parse_answer(&resp.text, &self.vocab)
                    .map_or(Prediction::ParseFailure, Prediction::Label);
                result.rationale = resp.text;
            }
            Err(e) => result.error = Some(format!("model: {e}")),
        }
        result
    }

    /// Detects every flow, running up to `in_flight` model calls at once.
    /// Results keep input order; `flow_id` is the input index.
    pub fn detect_batch(&self, flows: &[FlowFeatures]) -> Vec<DetectionResult> {
        parallel_map(flows, self.cfg.model.in_flight, |i, f| self.detect(i, f))
    }
}

/// Writes a detection report as JSON Lines. Prompts are written only when
/// `emit_prompts` is set.
pub fn write_report<W: Write>(
    mut w: W,
    results: &[DetectionResult],
    emit_prompts: bool,
) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        flow_id: usize,
        predicted: Prediction,
        rationale: &'a str,
        retrieved: &'a [Retrieved],
        latency_ms: u64,
        error: Option<&'a str>,
        #[serde(skip_serializing_if = "Option::is_none")]
        prompt: Option<&'a str>,
    }
    for r in results {
        let line = Line {
            flow_id: r.flow_id,
            predicted: r.predicted,
            rationale: &r.rationale,
            retrieved: &r.retrieved,
            latency_ms: r.latency_ms,
            error: r.error.as_deref(),
            prompt: emit_prompts.then_some(r.prompt.text.as_str()),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::build_kb;
    use crate::llm::rule_oracle;
    use crate::prompting::{cot_prompt, Regime};

    fn data() -> Vec<(FlowFeatures, ClassLabel)> {
        let t = Default::default();
        let mut out = Vec::new();
        for (i, proto) in [1u8, 6, 17, 6, 6, 1, 17, 47].into_iter().enumerate() {
            let flags = [i % 2 == 0, i % 3 == 0, true, i == 4, false];
            let f = FlowFeatures::new(proto, 100.0 + i as f64, 2.0, 30.0 + i as f64 * 8.0, flags)
                .unwrap();
            out.push((f, rule_oracle(&f, &t).0));
        }
        out
    }

    #[test]
    fn cot_k0_detects_udp() {
        let s = Standardizer::identity();
        let det = Detector::new(
            DetectorConfig::new(
                "cot",
                PromptConfig::for_regime(Regime::Cot),
                Space::Feature,
                ModelRef::rule_oracle(),
            ),
            Resources::new(&s),
        )
        .unwrap();
        let f = FlowFeatures::new(17, 5000.0, 0.2, 32.0, [false; 5]).unwrap();
        let r = det.detect(0, &f);
        assert_eq!(r.predicted, Prediction::Label(ClassLabel::Udp));
        assert!(r.retrieved.is_empty());
        assert_eq!(r.prompt, cot_prompt(&describe(&f)));
        let again = det.detect(0, &f);
        assert_eq!((again.prompt, again.rationale), (r.prompt, r.rationale));
    }

    #[test]
    fn few_shot_retrieves_k_and_matches_oracle() {
        let d = data();
        let s = Standardizer::fit(d.iter().map(|(f, _)| f)).unwrap();
        let (kb, _) = build_kb(&d, &s, None, None, 1).unwrap();
        let res = Resources::new(&s).with_kb(&kb);
        let det = Detector::new(
            DetectorConfig::new(
                "fs",
                PromptConfig::for_regime(Regime::FewShot),
                Space::Feature,
                ModelRef::rule_oracle(),
            ),
            res,
        )
        .unwrap();
        let flows: Vec<_> = d.iter().map(|(f, _)| *f).collect();
        let results = det.detect_batch(&flows);
        for ((r, (_, y)), i) in results.iter().zip(&d).zip(0..) {
            assert_eq!(r.flow_id, i);
            assert_eq!(r.retrieved.len(), 3);
            assert!(r
                .retrieved
                .windows(2)
                .all(|w| w[0].distance <= w[1].distance));
            assert_eq!(r.predicted, Prediction::Label(*y));
        }
        let seq: Vec<_> = flows
            .iter()
            .enumerate()
            .map(|(i, f)| det.detect(i, f))
            .collect();
        let strip = |v: &[DetectionResult]| -> Vec<_> {
            v.iter()
                .map(|r| (r.predicted, r.prompt.clone(), r.retrieved.clone()))
                .collect()
        };
        assert_eq!(strip(&results), strip(&seq));
        assert!(det.detect_batch(&[]).is_empty());
    }

    #[test]
    fn config_checks() {
        let s = Standardizer::identity();
        let fs = PromptConfig::for_regime(Regime::OneShot);
        let cfg = DetectorConfig::new("x", fs, Space::Signature, ModelRef::rule_oracle());
        assert!(matches!(
            Detector::new(cfg.clone(), Resources::new(&s)),
            Err(PipelineError::Config(_))
        ));
        let d = data();
        let (kb, _) = build_kb(&d, &s, None, None, 1).unwrap();
        assert!(Detector::new(cfg, Resources::new(&s).with_kb(&kb)).is_err());
        let custom = DetectorConfig::new(
            "c",
            PromptConfig::for_regime(Regime::OneShot),
            Space::Custom,
            ModelRef::rule_oracle(),
        );
        assert!(Detector::new(custom, Resources::new(&s).with_kb(&kb)).is_err());
    }

    #[test]
    fn report_lines() {
        let s = Standardizer::identity();
        let det = Detector::new(
            DetectorConfig::new(
                "cot",
                PromptConfig::for_regime(Regime::Cot),
                Space::Feature,
                ModelRef::rule_oracle(),
            ),
            Resources::new(&s),
        )
        .unwrap();
        let f = FlowFeatures::new(1, 500.0, 2.0, 30.0, [false; 5]).unwrap();
        let results = det.detect_batch(&[f, f]);
        let mut plain = Vec::new();
        write_report(&mut plain, &results, false).unwrap();
        let text = String::from_utf8(plain).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!text.contains("\"prompt\""));
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["predicted"], "ICMP");
        let mut full = Vec::new();
        write_report(&mut full, &results, true).unwrap();
        assert!(String::from_utf8(full)
            .unwrap()
            .contains("Let's think step by step"));
    }
}
