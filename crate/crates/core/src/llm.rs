//! Language-model access: a blocking client for a local generation server
//! and a deterministic rule oracle that answers prompts by executing the
//! three-step scaffold on the flow described in the prompt.
//!
//! Remote requests are `POST <endpoint><path>` with body
//! `{"model", "prompt", "stream": false, "options": {"temperature": 0}}`;
//! the completion is read from the `response` field of the reply.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::features::{parse_last_description, FlowFeatures, PROTO_ICMP, PROTO_TCP, PROTO_UDP};
use crate::label::ClassLabel;

/// Body excerpt length kept in protocol errors.
const EXCERPT_CHARS: usize = 200;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("remote model reference has no endpoint")]
    NoEndpoint,
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Benign-gate thresholds: flows with payload above `max_payload_bytes` or
/// rate below `min_rate_pps` are benign. Both comparisons are strict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateThresholds {
    pub max_payload_bytes: f64,
    pub min_rate_pps: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        GateThresholds {
            max_payload_bytes: 60.0,
            min_rate_pps: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Remote,
    RuleOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelRef {
    pub kind: ModelKind,
    pub name: String,
    /// Base URL, e.g. `http://127.0.0.1:11434`.
    pub endpoint: Option<String>,
    pub path: String,
    pub timeout_ms: u64,
    pub retries: u32,
    /// Base delay before the first retry; doubles on each further retry.
    pub backoff_ms: u64,
    /// Maximum concurrent in-flight requests through one client.
    pub in_flight: usize,
    /// Gate used by the rule oracle.
    pub thresholds: GateThresholds,
}

impl Default for ModelRef {
    fn default() -> Self {
        ModelRef {
            kind: ModelKind::RuleOracle,
            name: "rule-oracle".into(),
            endpoint: None,
            path: "/api/generate".into(),
            timeout_ms: 120_000,
            retries: 2,
            backoff_ms: 250,
            in_flight: 4,
            thresholds: GateThresholds::default(),
        }
    }
}

impl ModelRef {
    pub fn rule_oracle() -> Self {
        ModelRef::default()
    }

    pub fn remote(name: impl Into<String>, endpoint: impl Into<String>) -> Self {
        ModelRef {
            kind: ModelKind::Remote,
            name: name.into(),
            endpoint: Some(endpoint.into()),
            ..ModelRef::default()
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.kind == ModelKind::Remote && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(LlmError::NoEndpoint);
        }
        Ok(())
    }

    pub fn url(&self) -> Option<String> {
        self.endpoint
            .as_ref()
            .map(|e| format!("{}{}", e.trim_end_matches('/'), self.path))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub latency_ms: u64,
    pub attempts: u32,
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            permits: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

/// Shareable model client; at most `ModelRef::in_flight` remote requests
/// run at once.
pub struct LlmClient {
    model: ModelRef,
    agent: ureq::Agent,
    gate: Semaphore,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(LlmError),
}

fn excerpt(body: &str) -> String {
    let mut s: String = body.chars().take(EXCERPT_CHARS).collect();
    if body.chars().count() > EXCERPT_CHARS {
        s.push('…');
    }
    s
}

impl LlmClient {
    pub fn new(model: ModelRef) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(model.timeout_ms))
            .build();
        let gate = Semaphore::new(model.in_flight);
        LlmClient { model, agent, gate }
    }

    pub fn model(&self) -> &ModelRef {
        &self.model
    }

    pub fn request_body(&self, prompt: &str) -> serde_json::Value {
        json!({
            "model": self.model.name,
            "prompt": prompt,
            "stream": false,
            "options": { "temperature": 0 },
        })
    }

    pub fn complete(&self, prompt: &str) -> Result<ModelResponse, LlmError> {
        if prompt.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let start = Instant::now();
        match self.model.kind {
            ModelKind::RuleOracle => {
                let flow = parse_last_description(prompt).ok_or_else(|| {
                    LlmError::Protocol("prompt has no parseable flow description".into())
                })?;
                let (_, text) = rule_oracle(&flow, &self.model.thresholds);
                Ok(ModelResponse {
                    text,
                    latency_ms: start.elapsed().as_millis() as u64,
                    attempts: 1,
                })
            }
            ModelKind::Remote => {
                self.model.validate()?;
                let url = self.model.url().expect("validated");
                let body = self.request_body(prompt);
                let _permit = self.gate.acquire();
                let mut last = String::new();
                for attempt in 0..=self.model.retries {
                    if attempt > 0 {
                        let delay = self
                            .model
                            .backoff_ms
                            .saturating_mul(1 << (attempt - 1).min(16));
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                    match self.send(&url, &body) {
                        Attempt::Done(text) => {
                            return Ok(ModelResponse {
                                text,
                                latency_ms: start.elapsed().as_millis() as u64,
                                attempts: attempt + 1,
                            })
                        }
                        Attempt::Fatal(e) => return Err(e),
                        Attempt::Retry(msg) => {
                            log::debug!("attempt {} to {url} failed: {msg}", attempt + 1);
                            last = msg;
                        }
                    }
                }
                Err(LlmError::Transport {
                    attempts: self.model.retries + 1,
                    message: last,
                })
            }
        }
    }

    fn send(&self, url: &str, body: &serde_json::Value) -> Attempt {
        match self.agent.post(url).send_json(body) {
            Ok(resp) => {
                let raw = match resp.into_string() {
                    Ok(s) => s,
                    Err(e) => return Attempt::Retry(format!("reading body: {e}")),
                };
                let value: serde_json::Value = match serde_json::from_str(&raw) {
                    Ok(v) => v,
                    Err(_) => {
                        return Attempt::Fatal(LlmError::Protocol(format!(
                            "response is not JSON: {}",
                            excerpt(&raw)
                        )))
                    }
                };
                match value.get("response").and_then(|v| v.as_str()) {
                    Some(text) => Attempt::Done(text.to_string()),
                    None => Attempt::Fatal(LlmError::Protocol(format!(
                        "response has no `response` string: {}",
                        excerpt(&raw)
                    ))),
                }
            }
            Err(ureq::Error::Status(code, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {}", excerpt(&body));
                if code >= 500 {
                    Attempt::Retry(msg)
                } else {
                    Attempt::Fatal(LlmError::Protocol(msg))
                }
            }
            Err(ureq::Error::Transport(t)) => Attempt::Retry(t.to_string()),
        }
    }
}

fn bit(b: bool) -> u8 {
    u8::from(b)
}

/// Executes the three-step scaffold on `flow`, returning the label and a
/// narrated rationale that ends with `The answer is <LABEL>.`
pub fn rule_oracle(flow: &FlowFeatures, t: &GateThresholds) -> (ClassLabel, String) {
    let mut text = String::from("Let's think step by step.\n");
    let large = flow.payload_len > t.max_payload_bytes;
    let slow = flow.rate < t.min_rate_pps;
    let label = if large || slow {
        let mut reasons = Vec::new();
        if large {
            reasons.push(format!(
                "the mean payload length {:.3} B is >{} B",
                flow.payload_len, t.max_payload_bytes
            ));
        }
        if slow {
            reasons.push(format!(
                "the packet rate {:.3} pps is <{} pps",
                flow.rate, t.min_rate_pps
            ));
        }
        text.push_str(&format!(
            "Step 1: {}, so the flow fails the flood gate and is benign.\n",
            reasons.join(" and ")
        ));
        ClassLabel::Benign
    } else {
        text.push_str(&format!(
            "Step 1: the mean payload length {:.3} B is not >{} B and the packet rate {:.3} pps \
             is not <{} pps, so the flow passes the gate.\n",
            flow.payload_len, t.max_payload_bytes, flow.rate, t.min_rate_pps
        ));
        match flow.proto {
            PROTO_ICMP => {
                text.push_str("Step 2: proto 1 is ICMP, so this is an ICMP flood.\n");
                ClassLabel::Icmp
            }
            PROTO_UDP => {
                text.push_str("Step 2: proto 17 is UDP, so this is a UDP flood.\n");
                ClassLabel::Udp
            }
            PROTO_TCP => {
                text.push_str("Step 2: proto 6 is TCP, so the flags decide.\n");
                let tuple = format!(
                    "(PSH, ACK, RST, FIN) = ({}, {}, {}, {})",
                    bit(flow.flag_psh),
                    bit(flow.flag_ack),
                    bit(flow.flag_rst),
                    bit(flow.flag_fin)
                );
                let (label, why) = if flow.flag_psh && flow.flag_ack {
                    (
                        ClassLabel::PshAck,
                        "PSH and ACK are both set, a PSH/ACK flood",
                    )
                } else if flow.flag_rst || flow.flag_fin {
                    (ClassLabel::RstFin, "RST or FIN is set, an RST/FIN flood")
                } else {
                    (
                        ClassLabel::Tcp,
                        "no PSH/ACK or RST/FIN pattern, so it falls back to a TCP flood",
                    )
                };
                text.push_str(&format!("Step 3: {tuple}; {why}.\n"));
                label
            }
            other => {
                text.push_str(&format!(
                    "Step 2: proto {other} is not ICMP, UDP or TCP, so the flow is treated as benign.\n"
                ));
                ClassLabel::Benign
            }
        }
    };
    text.push_str(&format!("The answer is {label}."));
    (label, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::describe;
    use crate::label::LabelMap;
    use crate::prompting::{cot_prompt, parse_answer};

    fn flow(proto: u8, rate: f64, len: f64, flags: [bool; 5]) -> FlowFeatures {
        FlowFeatures::new(proto, rate, 1.0, len, flags).unwrap()
    }

    #[test]
    fn oracle_examples() {
        let t = GateThresholds::default();
        assert_eq!(
            rule_oracle(&flow(17, 5000.0, 120.0, [false; 5]), &t).0,
            ClassLabel::Benign
        );
        assert_eq!(
            rule_oracle(&flow(1, 800.0, 40.0, [false; 5]), &t).0,
            ClassLabel::Icmp
        );
        let pa = [true, true, false, false, false];
        assert_eq!(
            rule_oracle(&flow(6, 800.0, 40.0, pa), &t).0,
            ClassLabel::PshAck
        );
        let syn = [false, false, true, false, false];
        assert_eq!(
            rule_oracle(&flow(6, 800.0, 40.0, syn), &t).0,
            ClassLabel::Tcp
        );
        assert_eq!(
            rule_oracle(&flow(47, 800.0, 40.0, [false; 5]), &t).0,
            ClassLabel::Benign
        );
    }

    #[test]
    fn gate_boundaries_are_strict() {
        let t = GateThresholds::default();
        assert_eq!(
            rule_oracle(&flow(17, 1.0, 60.0, [false; 5]), &t).0,
            ClassLabel::Udp
        );
        assert_eq!(
            rule_oracle(&flow(17, 0.999, 60.0, [false; 5]), &t).0,
            ClassLabel::Benign
        );
        assert_eq!(
            rule_oracle(&flow(17, 1.0, 60.001, [false; 5]), &t).0,
            ClassLabel::Benign
        );
    }

    #[test]
    fn rationale_ends_with_answer_and_parses() {
        let t = GateThresholds::default();
        for proto in [1, 6, 17, 47] {
            for mask in 0..32u8 {
                let flags = std::array::from_fn(|i| mask & (1 << i) != 0);
                let f = flow(proto, 100.0, 30.0, flags);
                let (label, text) = rule_oracle(&f, &t);
                assert!(text.ends_with(&format!("The answer is {label}.")));
                assert_eq!(parse_answer(&text, &LabelMap::new()), Ok(label));
            }
        }
    }

    #[test]
    fn oracle_client_reads_description() {
        let c = LlmClient::new(ModelRef::rule_oracle());
        let f = flow(17, 900.0, 30.0, [false; 5]);
        let r = c.complete(&cot_prompt(&describe(&f)).text).unwrap();
        assert!(r.text.ends_with("The answer is UDP."));
        assert!(matches!(c.complete("hello"), Err(LlmError::Protocol(_))));
        assert!(matches!(c.complete("  "), Err(LlmError::EmptyPrompt)));
    }

    #[test]
    fn remote_requires_endpoint() {
        let m = ModelRef {
            kind: ModelKind::Remote,
            ..ModelRef::default()
        };
        assert!(matches!(
            LlmClient::new(m).complete("x"),
            Err(LlmError::NoEndpoint)
        ));
    }

    #[test]
    fn request_body_shape() {
        let c = LlmClient::new(ModelRef::remote("llama3.2:1b", "http://localhost:1"));
        let b = c.request_body("hi");
        assert_eq!(b["stream"], false);
        assert_eq!(b["options"]["temperature"], 0);
        assert_eq!(b["model"], "llama3.2:1b");
        assert_eq!(c.model().url().unwrap(), "http://localhost:1/api/generate");
    }
}
