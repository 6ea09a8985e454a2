//! Prompt construction for the five prompting regimes and parsing of the
//! model's final answer.
//!
//! Block order per regime:
//!
//! | regime            | order                                   |
//! |-------------------|-----------------------------------------|
//! | NO_KB             | description, instruction                |
//! | SHORT_KB          | description, instruction, rule digest   |
//! | COT               | description, instruction, scaffold      |
//! | ONE_SHOT/FEW_SHOT | exemplars, scaffold, description        |
//!
//! Non-empty blocks are joined with a blank line.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::Exemplar;
use crate::label::{ClassLabel, LabelMap};
use crate::llm::GateThresholds;

pub const INSTRUCTION: &str =
    "Classify the flow as exactly one of: ICMP, UDP, TCP, PSHACK, RSTFIN, BENIGN. \
State your final answer exactly once as: The answer is <LABEL>.";

pub const SHORT_KB_DIGEST: &str = "ICMP flood: proto 1, high rate, small packets.\n\
UDP flood: proto 17, high rate, small packets.\n\
TCP SYN flood: proto 6, SYN set, handshake never completes.\n\
PSHACK flood: proto 6, PSH and ACK set.\n\
RSTFIN flood: proto 6, RST or FIN set.\n\
Benign: large packets (>60 B) or low rate (<1 pps).";

const ANSWER_MARKER: &str = "the answer is";
const BLOCK_SEPARATOR: &str = "\n\n";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("{regime} expects {expected}, got {got} exemplars")]
    ExemplarCount {
        regime: Regime,
        expected: String,
        got: usize,
    },
    #[error("{regime} does not allow k = {k}")]
    BadK { regime: Regime, k: usize },
    #[error("exemplar {0} has an empty description")]
    EmptyDescription(usize),
    #[error("prompt is {len} characters, cap is {cap}")]
    TooLong { len: usize, cap: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    NoKb,
    ShortKb,
    Cot,
    OneShot,
    FewShot,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Regime::NoKb,
        Regime::ShortKb,
        Regime::Cot,
        Regime::OneShot,
        Regime::FewShot,
    ];

    /// Row label used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Regime::NoKb => "No KB",
            Regime::ShortKb => "Short KB",
            Regime::Cot => "COT",
            Regime::OneShot => "One-Shot",
            Regime::FewShot => "Few-Shot",
        }
    }

    pub fn allows_k(self, k: usize) -> bool {
        match self {
            Regime::NoKb | Regime::ShortKb | Regime::Cot => k == 0,
            Regime::OneShot => k == 1,
            Regime::FewShot => (1..=3).contains(&k),
        }
    }

    /// The conventional `k` for this regime (three for few-shot).
    pub fn default_k(self) -> usize {
        match self {
            Regime::NoKb | Regime::ShortKb | Regime::Cot => 0,
            Regime::OneShot => 1,
            Regime::FewShot => 3,
        }
    }

    pub fn uses_retrieval(self) -> bool {
        matches!(self, Regime::OneShot | Regime::FewShot)
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.display_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub regime: Regime,
    pub k: usize,
    /// `None` shows exemplar rationales whenever they exist.
    #[serde(default)]
    pub include_rationale: Option<bool>,
    #[serde(default)]
    pub thresholds: GateThresholds,
    /// Hard cap on prompt length in characters.
    #[serde(default)]
    pub max_chars: Option<usize>,
}

impl PromptConfig {
    pub fn new(regime: Regime, k: usize) -> Result<Self, PromptError> {
        let cfg = PromptConfig {
            regime,
            k,
            include_rationale: None,
            thresholds: GateThresholds::default(),
            max_chars: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn for_regime(regime: Regime) -> Self {
        Self::new(regime, regime.default_k()).expect("default k is valid")
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.regime.allows_k(self.k) {
            Ok(())
        } else {
            Err(PromptError::BadK {
                regime: self.regime,
                k: self.k,
            })
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptParts {
    pub exemplar_block: String,
    pub data_description: String,
    pub instruction: String,
    /// Reasoning scaffold, or the rule digest for SHORT_KB.
    pub scaffold: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub parts: PromptParts,
}

fn join(blocks: &[&str]) -> String {
    blocks
        .iter()
        .filter(|b| !b.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(BLOCK_SEPARATOR)
}

/// The three-step reasoning scaffold for the given gate thresholds.
pub fn scaffold_with(t: &GateThresholds) -> String {
    format!(
        "Let's think step by step.\n\
         Step 1 (packet-size and rate gate): if the mean payload length is >{} B or the packet \
         rate is <{} pps, the flow is BENIGN.\n\
         Step 2 (protocol branch): otherwise, distinguish ICMP and UDP floods directly via the \
         proto field: proto 1 is ICMP and proto 17 is UDP. Protocols other than ICMP, UDP and TCP \
         are BENIGN.\n\
         Step 3 (TCP flag analysis): if the protocol is TCP (proto 6), map the tuple \
         (PSH, ACK, RST, FIN): PSH=1 and ACK=1 gives PSHACK; otherwise RST=1 or FIN=1 gives \
         RSTFIN; otherwise fall back to TCP.",
        t.max_payload_bytes, t.min_rate_pps
    )
}

pub fn scaffold_text() -> String {
    scaffold_with(&GateThresholds::default())
}

/// The standalone chain-of-thought prompt: description, instruction,
/// scaffold.
pub fn cot_prompt(description: &str) -> Prompt {
    let scaffold = scaffold_text();
    Prompt {
        text: format!("{description}{BLOCK_SEPARATOR}{INSTRUCTION}{BLOCK_SEPARATOR}{scaffold}"),
        parts: PromptParts {
            exemplar_block: String::new(),
            data_description: description.to_string(),
            instruction: INSTRUCTION.to_string(),
            scaffold,
        },
    }
}

/// Removes a trailing final-answer sentence from teacher text so the
/// exemplar's own label line is the only answer it states.
fn strip_final_answer(rationale: &str) -> &str {
    let lower = rationale.to_ascii_lowercase();
    match lower.rfind(ANSWER_MARKER) {
        Some(i) => rationale[..i].trim_end(),
        None => rationale.trim_end(),
    }
}

pub fn render_exemplar(n: usize, ex: &Exemplar, with_rationale: bool) -> String {
    let mut out = format!("Example {n}:\n{}\n", ex.description);
    if with_rationale {
        if let Some(r) = ex.rationale.as_deref() {
            let r = strip_final_answer(r);
            if !r.is_empty() {
                out.push_str(r);
                out.push('\n');
            }
        }
    }
    out.push_str(&format!("The answer is {}.", ex.label));
    out
}

pub fn build_prompt(
    cfg: &PromptConfig,
    description: &str,
    exemplars: &[&Exemplar],
) -> Result<Prompt, PromptError> {
    cfg.validate()?;
    if exemplars.len() != cfg.k {
        return Err(PromptError::ExemplarCount {
            regime: cfg.regime,
            expected: cfg.k.to_string(),
            got: exemplars.len(),
        });
    }
    if let Some(ex) = exemplars.iter().find(|e| e.description.trim().is_empty()) {
        return Err(PromptError::EmptyDescription(ex.id));
    }
    let with_rationale = cfg.include_rationale.unwrap_or(true);
    let exemplar_block = exemplars
        .iter()
        .enumerate()
        .map(|(i, ex)| render_exemplar(i + 1, ex, with_rationale))
        .collect::<Vec<_>>()
        .join(BLOCK_SEPARATOR);

    let mut parts = PromptParts {
        exemplar_block,
        data_description: description.to_string(),
        ..Default::default()
    };
    let text = match cfg.regime {
        Regime::NoKb => {
            parts.instruction = INSTRUCTION.into();
            join(&[&parts.data_description, &parts.instruction])
        }
        Regime::ShortKb => {
            parts.instruction = INSTRUCTION.into();
            parts.scaffold = SHORT_KB_DIGEST.into();
            join(&[&parts.data_description, &parts.instruction, &parts.scaffold])
        }
        Regime::Cot => {
            parts.instruction = INSTRUCTION.into();
            parts.scaffold = scaffold_with(&cfg.thresholds);
            join(&[&parts.data_description, &parts.instruction, &parts.scaffold])
        }
        Regime::OneShot | Regime::FewShot => {
            parts.scaffold = scaffold_with(&cfg.thresholds);
            join(&[
                &parts.exemplar_block,
                &parts.scaffold,
                &parts.data_description,
            ])
        }
    };
    if let Some(cap) = cfg.max_chars {
        let len = text.chars().count();
        if len > cap {
            return Err(PromptError::TooLong { len, cap });
        }
    }
    Ok(Prompt { text, parts })
}

/// The model's reply held no recognizable final answer.
#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
#[error("no final answer found in model output")]
pub struct ParseFailure;

/// Finds the last "the answer is <LABEL>" (case-insensitive) whose label
/// resolves through `vocab`.
pub fn parse_answer(response: &str, vocab: &LabelMap) -> Result<ClassLabel, ParseFailure> {
    let lower = response.to_ascii_lowercase();
    for (i, _) in lower.rmatch_indices(ANSWER_MARKER) {
        let tail = response[i + ANSWER_MARKER.len()..].trim_start_matches(|c: char| {
            c.is_whitespace() || matches!(c, ':' | '*' | '"' | '\'' | '<' | '`')
        });
        let end = tail
            .find(|c: char| !(c.is_ascii_alphanumeric() || matches!(c, '/' | '_' | '-')))
            .unwrap_or(tail.len());
        if let Ok(l) = vocab.resolve(&tail[..end]) {
            return Ok(l);
        }
    }
    Err(ParseFailure)
}
