//! Run configuration file (TOML).
//!
//! Relative paths resolve against the directory holding the config file.
//!
//! ```toml
//! seed = 7
//! per_class = 100
//! data = "flows.jsonl"
//! standardizer = "standardizer.json"
//! gbdt = "gbdt.json"
//! kb = "kb.jsonl"
//!
//! [model]
//! kind = "remote"
//! name = "gemma3:4b"
//! endpoint = "http://127.0.0.1:11434"
//!
//! [[detector]]
//! name = "One-Shot"
//! regime = "one_shot"
//! space = "signature"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flowrag_core::features::ColumnMap;
use flowrag_core::kb::Space;
use flowrag_core::label::LabelMap;
use flowrag_core::llm::{GateThresholds, ModelRef};
use flowrag_core::pipeline::DetectorConfig;
use flowrag_core::prompting::{PromptConfig, Regime};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorEntry {
    pub name: Option<String>,
    pub regime: Regime,
    pub k: Option<usize>,
    pub space: Option<Space>,
    pub include_rationale: Option<bool>,
    pub max_chars: Option<usize>,
    /// Replaces the run-wide `[model]` table for this detector.
    pub model: Option<ModelRef>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    pub data: Option<PathBuf>,
    pub standardizer: Option<PathBuf>,
    pub gbdt: Option<PathBuf>,
    pub kb: Option<PathBuf>,
    pub embedder: Option<PathBuf>,
    /// Header-less CSV of custom-space keys, one row per exemplar. Without
    /// it the custom space is computed with `embedder`.
    pub custom_embeddings: Option<PathBuf>,
    /// Refuse a knowledge base whose recorded fingerprints differ.
    #[serde(default)]
    pub strict_fingerprints: bool,
    #[serde(default)]
    pub columns: Option<ColumnMap>,
    /// Raw label string to canonical class token.
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    #[serde(default)]
    pub thresholds: GateThresholds,
    #[serde(default)]
    pub model: ModelRef,
    #[serde(default)]
    pub detector: Vec<DetectorEntry>,
}

fn default_per_class() -> usize {
    100
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data,
            &mut cfg.standardizer,
            &mut cfg.gbdt,
            &mut cfg.kb,
            &mut cfg.embedder,
            &mut cfg.custom_embeddings,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        for (what, p) in [
            ("data", &self.data),
            ("standardizer", &self.standardizer),
            ("gbdt", &self.gbdt),
            ("kb", &self.kb),
            ("embedder", &self.embedder),
            ("custom_embeddings", &self.custom_embeddings),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    bail!("{what} file {} does not exist", p.display());
                }
            }
        }
        self.label_map()?;
        let detectors = self.detectors()?;
        let mut seen = std::collections::HashSet::new();
        for d in &detectors {
            if !seen.insert(d.name.as_str()) {
                bail!("duplicate detector name {:?}", d.name);
            }
            if d.k() > 0 && self.kb.is_none() {
                bail!(
                    "detector {:?} retrieves exemplars but no kb is configured",
                    d.name
                );
            }
            match d.space {
                Space::Signature if d.k() > 0 && self.gbdt.is_none() => {
                    bail!(
                        "detector {:?} uses signature space but no gbdt is configured",
                        d.name
                    )
                }
                Space::Custom if d.k() > 0 && self.embedder.is_none() => {
                    bail!(
                        "detector {:?} uses custom space but no embedder is configured",
                        d.name
                    )
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn label_map(&self) -> Result<LabelMap> {
        let mut m = LabelMap::new();
        for (raw, canon) in &self.labels {
            let label = canon
                .parse()
                .with_context(|| format!("label alias {raw:?}"))?;
            m.insert(raw.as_str(), label);
        }
        Ok(m)
    }

    /// Expands `[[detector]]` entries, applying run-wide thresholds and the
    /// default model.
    pub fn detectors(&self) -> Result<Vec<DetectorConfig>> {
        self.detector
            .iter()
            .map(|e| {
                let k = e.k.unwrap_or_else(|| e.regime.default_k());
                let mut prompt = PromptConfig::new(e.regime, k)
                    .with_context(|| format!("detector {}", e.regime.display_name()))?;
                prompt.include_rationale = e.include_rationale;
                prompt.max_chars = e.max_chars;
                prompt.thresholds = self.thresholds;
                let space = match (e.space, k) {
                    (Some(s), _) => s,
                    (None, 0) => Space::Feature,
                    (None, _) => bail!(
                        "detector {} retrieves exemplars and must name a space",
                        e.regime.display_name()
                    ),
                };
                let mut model = e.model.clone().unwrap_or_else(|| self.model.clone());
                model.thresholds = self.thresholds;
                model.validate()?;
                let name = e
                    .name
                    .clone()
                    .unwrap_or_else(|| e.regime.display_name().to_string());
                Ok(DetectorConfig::new(name, prompt, space, model))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> Result<RunConfig> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, text).unwrap();
        RunConfig::load(&p)
    }

    #[test]
    fn minimal_config() {
        let cfg = load("[[detector]]\nregime = \"cot\"\n").unwrap();
        let d = cfg.detectors().unwrap();
        assert_eq!(d[0].name, "COT");
        assert_eq!(d[0].k(), 0);
        assert_eq!(cfg.per_class, 100);
    }

    #[test]
    fn regime_k_mismatch_rejected() {
        let err = load("[[detector]]\nregime = \"no_kb\"\nk = 2\n").unwrap_err();
        assert!(format!("{err:#}").contains("does not allow"), "{err:#}");
    }

    #[test]
    fn retrieval_needs_kb_and_space() {
        let err = load("[[detector]]\nregime = \"one_shot\"\nspace = \"feature\"\n").unwrap_err();
        assert!(err.to_string().contains("no kb"));
        let err = load("[[detector]]\nregime = \"one_shot\"\n").unwrap_err();
        assert!(err.to_string().contains("must name a space"));
    }

    #[test]
    fn missing_file_rejected() {
        let err = load("data = \"nope.jsonl\"\n").unwrap_err();
        assert!(err.to_string().contains("does not exist"));
    }

    #[test]
    fn remote_needs_endpoint() {
        let err = load("[model]\nkind = \"remote\"\n[[detector]]\nregime = \"cot\"\n").unwrap_err();
        assert!(format!("{err:#}").contains("endpoint"), "{err:#}");
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(load("sed = 1\n").is_err());
    }
}
