//! Exemplar knowledge base and exact top-k Euclidean retrieval.
//!
//! Every exemplar carries its standardized feature vector and, optionally,
//! the classifier's probability signature. Queries run against one key
//! space at a time: signatures, standardized features, or an imported
//! auxiliary embedding (MLP latents, external sentence embeddings).
//!
//! On disk a knowledge base is a JSON Lines file, one exemplar per line,
//! plus a `<file>.meta.json` sidecar holding the fingerprints of the
//! standardizer and model it was built with.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{describe, FeatureVector, FlowFeatures, Standardizer, FEATURE_COUNT};
use crate::gbdt::{GbdtError, GbdtModel, Probabilities};
use crate::label::{ClassLabel, NUM_CLASSES};
use crate::llm::LlmClient;
use crate::par::parallel_map;
use crate::prompting::cot_prompt;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot build a knowledge base from no data")]
    EmptyData,
    #[error("query has dimension {got}, {space} space expects {expected}")]
    Dimension {
        space: Space,
        expected: usize,
        got: usize,
    },
    #[error("knowledge base has no {0} keys")]
    MissingKeys(Space),
    #[error("invalid exemplar {id}: {reason}")]
    InvalidExemplar { id: usize, reason: String },
    #[error("embedding file has {got} rows, knowledge base has {expected} exemplars")]
    RowCount { expected: usize, got: usize },
    #[error("malformed embedding file: {0}")]
    Embeddings(String),
    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        source: serde_json::Error,
    },
    #[error("model error: {0}")]
    Model(#[from] GbdtError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Signature,
    Feature,
    Custom,
}

impl std::fmt::Display for Space {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Space::Signature => "signature",
            Space::Feature => "feature",
            Space::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: usize,
    pub features_std: FeatureVector,
    pub signature: Option<Probabilities>,
    pub description: String,
    pub label: ClassLabel,
    pub rationale: Option<String>,
}

impl Exemplar {
    fn check(&self) -> Result<(), KbError> {
        let bad = |reason: &str| KbError::InvalidExemplar {
            id: self.id,
            reason: reason.into(),
        };
        if self.description.trim().is_empty() {
            return Err(bad("empty description"));
        }
        if self.features_std.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite feature"));
        }
        if let Some(p) = &self.signature {
            let sum: f64 = p.iter().sum();
            if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(bad("signature is not a probability vector"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KbMetadata {
    pub standardizer_fingerprint: Option<String>,
    pub model_fingerprint: Option<String>,
    pub created_unix: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor<'a> {
    pub exemplar: &'a Exemplar,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    exemplars: Vec<Exemplar>,
    custom: Option<Vec<Vec<f64>>>,
    pub metadata: KbMetadata,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub teacher_calls: usize,
    pub teacher_failures: usize,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Builds one exemplar per labeled flow. With `model`, signatures are
/// filled; with `teacher`, each exemplar gets the teacher's reply to its
/// chain-of-thought prompt, issued on up to `workers` concurrent calls.
pub fn build_kb(
    data: &[(FlowFeatures, ClassLabel)],
    standardizer: &Standardizer,
    model: Option<&GbdtModel>,
    teacher: Option<&LlmClient>,
    workers: usize,
) -> Result<(KnowledgeBase, BuildStats), KbError> {
    if data.is_empty() {
        return Err(KbError::EmptyData);
    }
    let mut exemplars = Vec::with_capacity(data.len());
    for (id, (flow, label)) in data.iter().enumerate() {
        let features_std = standardizer.apply(flow);
        let signature = model.map(|m| m.predict_proba(&features_std)).transpose()?;
        exemplars.push(Exemplar {
            id,
            features_std,
            signature,
            description: describe(flow),
            label: *label,
            rationale: None,
        });
    }
    let mut stats = BuildStats::default();
    if let Some(client) = teacher {
        let replies = parallel_map(&exemplars, workers, |_, ex| {
            client.complete(&cot_prompt(&ex.description).text)
        });
        for (ex, reply) in exemplars.iter_mut().zip(replies) {
            stats.teacher_calls += 1;
            match reply {
                Ok(r) => ex.rationale = Some(r.text),
                Err(e) => {
                    stats.teacher_failures += 1;
                    log::warn!("teacher call failed for exemplar {}: {e}", ex.id);
                }
            }
        }
    }
    let metadata = KbMetadata {
        standardizer_fingerprint: Some(standardizer.fingerprint()),
        model_fingerprint: model.map(GbdtModel::fingerprint),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let kb = KnowledgeBase::new(exemplars, metadata)?;
    Ok((kb, stats))
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub expect_standardizer: Option<String>,
    pub expect_model: Option<String>,
    /// Turn fingerprint mismatches into errors instead of warnings.
    pub strict: bool,
}

impl KnowledgeBase {
    /// Validates ids (dense, in order) and per-space dimensionality.
    pub fn new(exemplars: Vec<Exemplar>, metadata: KbMetadata) -> Result<Self, KbError> {
        for (i, ex) in exemplars.iter().enumerate() {
            if ex.id != i {
                return Err(KbError::InvalidExemplar {
                    id: ex.id,
                    reason: format!("expected id {i}; ids must be unique and dense"),
                });
            }
            ex.check()?;
        }
        let with_sig = exemplars.iter().filter(|e| e.signature.is_some()).count();
        if with_sig != 0 && with_sig != exemplars.len() {
            return Err(KbError::InvalidExemplar {
                id: exemplars
                    .iter()
                    .find(|e| e.signature.is_none())
                    .map_or(0, |e| e.id),
                reason: "signatures must be present on all exemplars or none".into(),
            });
        }
        Ok(KnowledgeBase {
            exemplars,
            custom: None,
            metadata,
        })
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        &self.exemplars
    }

    pub fn get(&self, id: usize) -> Option<&Exemplar> {
        self.exemplars.get(id)
    }

    pub fn has_signatures(&self) -> bool {
        self.exemplars
            .first()
            .is_some_and(|e| e.signature.is_some())
    }

    pub fn has_rationales(&self) -> bool {
        self.exemplars.iter().any(|e| e.rationale.is_some())
    }

    pub fn custom_dim(&self) -> Option<usize> {
        self.custom
            .as_ref()
            .map(|rows| rows.first().map_or(0, Vec::len))
    }

    /// Attaches an auxiliary key space; row `i` belongs to exemplar `i`.
    pub fn with_custom_embeddings(mut self, rows: Vec<Vec<f64>>) -> Result<Self, KbError> {
        if rows.len() != self.len() {
            return Err(KbError::RowCount {
                expected: self.len(),
                got: rows.len(),
            });
        }
        if let Some(first) = rows.first() {
            let d = first.len();
            if d == 0 {
                return Err(KbError::Embeddings("empty embedding row".into()));
            }
            for (i, r) in rows.iter().enumerate() {
                if r.len() != d {
                    return Err(KbError::Embeddings(format!(
                        "row {} has {} values, expected {d}",
                        i + 1,
                        r.len()
                    )));
                }
                if r.iter().any(|v| !v.is_finite()) {
                    return Err(KbError::Embeddings(format!("row {} is not finite", i + 1)));
                }
            }
        }
        self.custom = Some(rows);
        Ok(self)
    }

    /// Reads a header-less CSV of embeddings and attaches it as the custom
    /// key space.
    pub fn import_embeddings(self, path: impl AsRef<Path>) -> Result<Self, KbError> {
        let rows = read_embedding_csv(File::open(path)?)?;
        self.with_custom_embeddings(rows)
    }

    fn key(&self, i: usize, space: Space) -> &[f64] {
        match space {
            Space::Feature => &self.exemplars[i].features_std,
            Space::Signature => self.exemplars[i]
                .signature
                .as_ref()
                .expect("checked by retrieve"),
            Space::Custom => &self.custom.as_ref().expect("checked by retrieve")[i],
        }
    }

    fn space_dim(&self, space: Space) -> Result<usize, KbError> {
        match space {
            Space::Feature => Ok(FEATURE_COUNT),
            Space::Signature if self.is_empty() || self.has_signatures() => Ok(NUM_CLASSES),
            Space::Custom => self.custom_dim().ok_or(KbError::MissingKeys(space)),
            Space::Signature => Err(KbError::MissingKeys(space)),
        }
    }

    /// The `k` exemplars nearest to `query` in `space`, ascending by
    /// distance with ties broken by lower id. Returns everything when
    /// `k >= len`.
    pub fn retrieve(
        &self,
        query: &[f64],
        space: Space,
        k: usize,
    ) -> Result<Vec<Neighbor<'_>>, KbError> {
        let expected = self.space_dim(space)?;
        if query.len() != expected && !(self.is_empty() && space == Space::Custom) {
            return Err(KbError::Dimension {
                space,
                expected,
                got: query.len(),
            });
        }
        if k == 0 || self.is_empty() {
            return Ok(Vec::new());
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .map(|i| (euclidean(query, self.key(i, space)), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(distance, i)| Neighbor {
                exemplar: &self.exemplars[i],
                distance,
            })
            .collect())
    }

    pub fn meta_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    pub fn write_jsonl<W: Write>(&self, w: W) -> Result<(), KbError> {
        let mut w = BufWriter::new(w);
        for ex in &self.exemplars {
            serde_json::to_writer(&mut w, ex)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: std::io::Read>(r: R, metadata: KbMetadata) -> Result<Self, KbError> {
        let mut exemplars = Vec::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: Exemplar = serde_json::from_str(&line).map_err(|source| KbError::Line {
                line: i + 1,
                source,
            })?;
            exemplars.push(ex);
        }
        KnowledgeBase::new(exemplars, metadata)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KbError> {
        let path = path.as_ref();
        self.write_jsonl(File::create(path)?)?;
        std::fs::write(
            Self::meta_path(path),
            serde_json::to_string_pretty(&self.metadata)? + "\n",
        )?;
        Ok(())
    }

    /// Loads a knowledge base and checks its fingerprints against `opts`.
    /// Mismatches are returned as warnings unless `opts.strict` is set.
    pub fn load(
        path: impl AsRef<Path>,
        opts: &LoadOptions,
    ) -> Result<(Self, Vec<String>), KbError> {
        let path = path.as_ref();
        let meta_path = Self::meta_path(path);
        let mut warnings = Vec::new();
        let metadata = if meta_path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?
        } else {
            warnings.push(format!("no metadata sidecar at {}", meta_path.display()));
            KbMetadata::default()
        };
        let kb = Self::read_jsonl(File::open(path)?, metadata)?;
        let checks = [
            (
                "standardizer",
                &opts.expect_standardizer,
                &kb.metadata.standardizer_fingerprint,
            ),
            ("model", &opts.expect_model, &kb.metadata.model_fingerprint),
        ];
        for (what, expected, recorded) in checks {
            if let Some(expected) = expected {
                if recorded.as_ref() != Some(expected) {
                    let msg = format!(
                        "{what} fingerprint {expected} does not match knowledge base ({})",
                        recorded.as_deref().unwrap_or("none")
                    );
                    if opts.strict {
                        return Err(KbError::Fingerprint(msg));
                    }
                    warnings.push(msg);
                }
            }
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok((kb, warnings))
    }
}

pub fn read_embedding_csv<R: std::io::Read>(r: R) -> Result<Vec<Vec<f64>>, KbError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| KbError::Embeddings(e.to_string()))?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| KbError::Embeddings(format!("row {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_embedding_csv<W: Write>(w: W, rows: &[Vec<f64>]) -> Result<(), KbError> {
    let mut w = BufWriter::new(w);
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}
