//! Flow feature encoding, standardization, CSV ingest and the textual flow
//! description used in prompts.
//!
//! The nine features are always laid out in this order:
//! `[proto, rate, iat_ms, payload_len, psh, ack, syn, rst, fin]`.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::label::{ClassLabel, LabelMap, UnknownLabel};

pub const FEATURE_COUNT: usize = 9;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "proto",
    "rate",
    "iat_ms",
    "payload_len",
    "flag_psh",
    "flag_ack",
    "flag_syn",
    "flag_rst",
    "flag_fin",
];

pub const PROTO_ICMP: u8 = 1;
pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

/// Smallest standard deviation a [`Standardizer`] will divide by.
pub const STDDEV_FLOOR: f64 = 1e-8;

pub type FeatureVector = [f64; FEATURE_COUNT];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid flow: {0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot fit a standardizer on an empty data set")]
    EmptyInput,
    #[error("label error: {0}")]
    Label(#[from] UnknownLabel),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// One unidirectional flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowFeatures {
    /// IP protocol number.
    pub proto: u8,
    /// Packets per second.
    pub rate: f64,
    /// Mean inter-arrival time in milliseconds.
    pub iat_ms: f64,
    /// Mean payload length in bytes.
    pub payload_len: f64,
    pub flag_psh: bool,
    pub flag_ack: bool,
    pub flag_syn: bool,
    pub flag_rst: bool,
    pub flag_fin: bool,
}

impl FlowFeatures {
    /// Builds a validated flow. Flags are cleared for non-TCP protocols.
    /// `flags` is `[psh, ack, syn, rst, fin]`.
    pub fn new(
        proto: u8,
        rate: f64,
        iat_ms: f64,
        payload_len: f64,
        flags: [bool; 5],
    ) -> Result<Self, FeatureError> {
        let tcp = proto == PROTO_TCP;
        let f = FlowFeatures {
            proto,
            rate,
            iat_ms,
            payload_len,
            flag_psh: tcp && flags[0],
            flag_ack: tcp && flags[1],
            flag_syn: tcp && flags[2],
            flag_rst: tcp && flags[3],
            flag_fin: tcp && flags[4],
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        for (name, v) in [
            ("rate", self.rate),
            ("iat_ms", self.iat_ms),
            ("payload_len", self.payload_len),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(FeatureError::Invalid(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.proto != PROTO_TCP && self.flags().iter().any(|&b| b) {
            return Err(FeatureError::Invalid(format!(
                "TCP flags set on non-TCP flow (proto {})",
                self.proto
            )));
        }
        Ok(())
    }

    /// `[psh, ack, syn, rst, fin]`
    pub fn flags(&self) -> [bool; 5] {
        [
            self.flag_psh,
            self.flag_ack,
            self.flag_syn,
            self.flag_rst,
            self.flag_fin,
        ]
    }

    pub fn to_vector(&self) -> FeatureVector {
        let b = |f: bool| if f { 1.0 } else { 0.0 };
        [
            f64::from(self.proto),
            self.rate,
            self.iat_ms,
            self.payload_len,
            b(self.flag_psh),
            b(self.flag_ack),
            b(self.flag_syn),
            b(self.flag_rst),
            b(self.flag_fin),
        ]
    }

    /// Inverse of [`to_vector`](Self::to_vector); proto and flags must be
    /// exact integers.
    pub fn from_vector(v: &FeatureVector) -> Result<Self, FeatureError> {
        let proto = v[0];
        if proto.fract() != 0.0 || !(0.0..=255.0).contains(&proto) {
            return Err(FeatureError::Invalid(format!(
                "bad protocol number {proto}"
            )));
        }
        let mut flags = [false; 5];
        for (i, slot) in flags.iter_mut().enumerate() {
            *slot = match v[4 + i] {
                0.0 => false,
                1.0 => true,
                x => {
                    return Err(FeatureError::Invalid(format!(
                        "{} must be 0 or 1, got {x}",
                        FEATURE_NAMES[4 + i]
                    )))
                }
            };
        }
        FlowFeatures::new(proto as u8, v[1], v[2], v[3], flags)
    }
}

/// Protocol name as rendered in descriptions.
pub fn proto_name(proto: u8) -> &'static str {
    match proto {
        PROTO_ICMP => "ICMP",
        PROTO_TCP => "TCP",
        PROTO_UDP => "UDP",
        _ => "OTHER",
    }
}

/// Renders the fixed single-paragraph flow description.
pub fn describe(x: &FlowFeatures) -> String {
    let b = |f: bool| u8::from(f);
    format!(
        "Protocol: {} ({}). Packet rate: {:.3} pps. Mean inter-arrival time: {:.3} ms. \
         Mean payload length: {:.3} bytes. TCP flags: PSH={} ACK={} SYN={} RST={} FIN={}.",
        proto_name(x.proto),
        x.proto,
        x.rate,
        x.iat_ms,
        x.payload_len,
        b(x.flag_psh),
        b(x.flag_ack),
        b(x.flag_syn),
        b(x.flag_rst),
        b(x.flag_fin),
    )
}

struct Cursor<'a>(&'a str);

impl<'a> Cursor<'a> {
    fn lit(&mut self, s: &str) -> Option<()> {
        self.0 = self.0.strip_prefix(s)?;
        Some(())
    }

    fn until(&mut self, s: &str) -> Option<&'a str> {
        let i = self.0.find(s)?;
        let head = &self.0[..i];
        self.0 = &self.0[i + s.len()..];
        Some(head)
    }

    fn bit(&mut self) -> Option<bool> {
        let (head, tail) = self.0.split_at_checked(1)?;
        self.0 = tail;
        match head {
            "0" => Some(false),
            "1" => Some(true),
            _ => None,
        }
    }
}

fn parse_description_at(text: &str) -> Option<FlowFeatures> {
    let mut c = Cursor(text);
    c.lit("Protocol: ")?;
    let name = c.until(" (")?;
    let proto: u8 = c.until("). Packet rate: ")?.parse().ok()?;
    if name != proto_name(proto) {
        return None;
    }
    let rate: f64 = c.until(" pps. Mean inter-arrival time: ")?.parse().ok()?;
    let iat: f64 = c.until(" ms. Mean payload length: ")?.parse().ok()?;
    let len: f64 = c.until(" bytes. TCP flags: PSH=")?.parse().ok()?;
    let psh = c.bit()?;
    c.lit(" ACK=")?;
    let ack = c.bit()?;
    c.lit(" SYN=")?;
    let syn = c.bit()?;
    c.lit(" RST=")?;
    let rst = c.bit()?;
    c.lit(" FIN=")?;
    let fin = c.bit()?;
    c.lit(".")?;
    FlowFeatures::new(proto, rate, iat, len, [psh, ack, syn, rst, fin]).ok()
}

/// Recovers the flow from the last well-formed description embedded in
/// `text`. Values come back at the rendered three-decimal precision.
pub fn parse_last_description(text: &str) -> Option<FlowFeatures> {
    text.rmatch_indices("Protocol: ")
        .find_map(|(i, _)| parse_description_at(&text[i..]))
}

/// Per-dimension z-scoring with population statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStandardizer")]
pub struct Standardizer {
    pub means: FeatureVector,
    pub stddevs: FeatureVector,
}

#[derive(Deserialize)]
struct RawStandardizer {
    means: FeatureVector,
    stddevs: FeatureVector,
}

impl TryFrom<RawStandardizer> for Standardizer {
    type Error = String;

    fn try_from(raw: RawStandardizer) -> Result<Self, String> {
        if raw.means.iter().any(|m| !m.is_finite()) {
            return Err("standardizer means must be finite".into());
        }
        if raw.stddevs.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err("standardizer stddevs must be finite and positive".into());
        }
        Ok(Standardizer {
            means: raw.means,
            stddevs: raw.stddevs,
        })
    }
}

impl Standardizer {
    pub fn identity() -> Self {
        Standardizer {
            means: [0.0; FEATURE_COUNT],
            stddevs: [1.0; FEATURE_COUNT],
        }
    }

    pub fn fit<'a, I>(data: I) -> Result<Self, FeatureError>
    where
        I: IntoIterator<Item = &'a FlowFeatures>,
    {
        let rows: Vec<FeatureVector> = data.into_iter().map(FlowFeatures::to_vector).collect();
        Self::fit_vectors(&rows)
    }

    pub fn fit_vectors(rows: &[FeatureVector]) -> Result<Self, FeatureError> {
        if rows.is_empty() {
            return Err(FeatureError::EmptyInput);
        }
        let n = rows.len() as f64;
        let mut means = [0.0; FEATURE_COUNT];
        for r in rows {
            for (m, v) in means.iter_mut().zip(r) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut stddevs = [0.0; FEATURE_COUNT];
        for r in rows {
            for i in 0..FEATURE_COUNT {
                let d = r[i] - means[i];
                stddevs[i] += d * d;
            }
        }
        for s in stddevs.iter_mut() {
            *s = (*s / n).sqrt();
            if *s < STDDEV_FLOOR {
                *s = STDDEV_FLOOR;
            }
        }
        Ok(Standardizer { means, stddevs })
    }

    pub fn apply(&self, x: &FlowFeatures) -> FeatureVector {
        self.apply_vector(&x.to_vector())
    }

    pub fn apply_vector(&self, v: &FeatureVector) -> FeatureVector {
        std::array::from_fn(|i| (v[i] - self.means[i]) / self.stddevs[i])
    }

    pub fn invert(&self, z: &FeatureVector) -> FeatureVector {
        std::array::from_fn(|i| z[i] * self.stddevs[i] + self.means[i])
    }

    /// Short content hash used to tie knowledge bases to the standardizer
    /// they were built with.
    pub fn fingerprint(&self) -> String {
        fingerprint_json(self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FeatureError> {
        let f = File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FeatureError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub(crate) fn fingerprint_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

/// Column names for each semantic field of an input CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub proto: String,
    pub rate: String,
    pub iat_ms: String,
    pub payload_len: String,
    pub flag_psh: String,
    pub flag_ack: String,
    pub flag_syn: String,
    pub flag_rst: String,
    pub flag_fin: String,
    pub label: Option<String>,
}

impl Default for ColumnMap {
    /// CICIoT-2023 column names.
    fn default() -> Self {
        ColumnMap {
            proto: "Protocol Type".into(),
            rate: "Rate".into(),
            iat_ms: "IAT".into(),
            payload_len: "AVG".into(),
            flag_psh: "psh_flag_number".into(),
            flag_ack: "ack_flag_number".into(),
            flag_syn: "syn_flag_number".into(),
            flag_rst: "rst_flag_number".into(),
            flag_fin: "fin_flag_number".into(),
            label: Some("label".into()),
        }
    }
}

impl ColumnMap {
    /// Columns named after the feature fields themselves, as written by
    /// [`write_features_csv`]-style tools and test fixtures.
    pub fn canonical() -> Self {
        ColumnMap {
            proto: "proto".into(),
            rate: "rate".into(),
            iat_ms: "iat_ms".into(),
            payload_len: "payload_len".into(),
            flag_psh: "flag_psh".into(),
            flag_ack: "flag_ack".into(),
            flag_syn: "flag_syn".into(),
            flag_rst: "flag_rst".into(),
            flag_fin: "flag_fin".into(),
            label: Some("label".into()),
        }
    }

    fn feature_columns(&self) -> [&str; FEATURE_COUNT] {
        [
            &self.proto,
            &self.rate,
            &self.iat_ms,
            &self.payload_len,
            &self.flag_psh,
            &self.flag_ack,
            &self.flag_syn,
            &self.flag_rst,
            &self.flag_fin,
        ]
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub columns: ColumnMap,
    pub labels: LabelMap,
    /// When set, a missing label column is a configuration error.
    pub require_label: bool,
}

/// A flow accepted by [`ingest_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    /// 1-based data row number in the source file.
    pub row: usize,
    pub features: FlowFeatures,
    pub label: Option<ClassLabel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub row: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub records: Vec<FlowRecord>,
    pub errors: Vec<RowError>,
}

pub fn ingest_csv(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<Ingested, FeatureError> {
    ingest_reader(File::open(path)?, opts)
}

pub fn ingest_reader<R: Read>(reader: R, opts: &IngestOptions) -> Result<Ingested, FeatureError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let mut idx = [0usize; FEATURE_COUNT];
    for (slot, name) in idx.iter_mut().zip(opts.columns.feature_columns()) {
        *slot =
            find(name).ok_or_else(|| FeatureError::Config(format!("missing column {name:?}")))?;
    }
    let label_idx = match &opts.columns.label {
        Some(name) => match find(name) {
            Some(i) => Some(i),
            None if opts.require_label => {
                return Err(FeatureError::Config(format!(
                    "missing label column {name:?}"
                )))
            }
            None => None,
        },
        None if opts.require_label => {
            return Err(FeatureError::Config("no label column configured".into()))
        }
        None => None,
    };

    let mut out = Ingested::default();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                out.errors.push(RowError {
                    row,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let label = match label_idx {
            Some(li) => match rec.get(li) {
                Some(s) => Some(opts.labels.resolve(s)?),
                None => {
                    out.errors.push(RowError {
                        row,
                        message: "missing label field".into(),
                    });
                    continue;
                }
            },
            None => None,
        };
        match parse_row(&rec, &idx, &opts.columns) {
            Ok(features) => out.records.push(FlowRecord {
                row,
                features,
                label,
            }),
            Err(message) => out.errors.push(RowError { row, message }),
        }
    }
    Ok(out)
}

fn parse_row(
    rec: &csv::StringRecord,
    idx: &[usize; FEATURE_COUNT],
    cols: &ColumnMap,
) -> Result<FlowFeatures, String> {
    let names = cols.feature_columns();
    let field = |k: usize| -> Result<&str, String> {
        rec.get(idx[k])
            .ok_or_else(|| format!("missing field {:?}", names[k]))
    };
    let number = |k: usize| -> Result<f64, String> {
        let s = field(k)?;
        let v: f64 = s
            .parse()
            .map_err(|_| format!("malformed number {s:?} in column {:?}", names[k]))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("non-finite value in column {:?}", names[k]))
        }
    };

    let proto = number(0)?.round();
    if !(0.0..=255.0).contains(&proto) {
        return Err(format!("protocol number {proto} out of range"));
    }
    let mut flags = [false; 5];
    for (j, slot) in flags.iter_mut().enumerate() {
        *slot =
            parse_flag(field(4 + j)?).map_err(|e| format!("{e} in column {:?}", names[4 + j]))?;
    }
    FlowFeatures::new(proto as u8, number(1)?, number(2)?, number(3)?, flags)
        .map_err(|e| e.to_string())
}

/// Accepts boolean words or numbers in `[0, 1]`; fractional values (window
/// averages in some datasets) round to the nearer bit.
fn parse_flag(s: &str) -> Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "yes" => return Ok(true),
        "false" | "no" => return Ok(false),
        _ => {}
    }
    let v: f64 = s.parse().map_err(|_| format!("malformed flag {s:?}"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("flag value {v} outside [0, 1]"));
    }
    Ok(v >= 0.5)
}

/// Writes flows in the canonical column layout accepted by
/// [`ColumnMap::canonical`].
pub fn write_features_csv<W: std::io::Write>(
    w: W,
    records: &[(FlowFeatures, Option<ClassLabel>)],
) -> Result<(), FeatureError> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = FEATURE_NAMES.to_vec();
    header.push("label");
    wtr.write_record(&header)?;
    for (f, l) in records {
        let mut row: Vec<String> = Vec::with_capacity(FEATURE_COUNT + 1);
        let mut buf = String::new();
        for (k, v) in f.to_vector().iter().enumerate() {
            buf.clear();
            if k == 0 || k >= 4 {
                write!(buf, "{}", *v as u32).unwrap();
            } else {
                write!(buf, "{v}").unwrap();
            }
            row.push(buf.clone());
        }
        row.push(l.map(|l| l.as_str().to_string()).unwrap_or_default());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes one [`FlowRecord`] per line.
pub fn write_records_jsonl<W: std::io::Write>(
    mut w: W,
    records: &[FlowRecord],
) -> Result<(), FeatureError> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads records written by [`write_records_jsonl`], validating each flow.
/// Blank lines are skipped.
pub fn read_records_jsonl<R: Read>(r: R) -> Result<Vec<FlowRecord>, FeatureError> {
    use std::io::BufRead;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FlowRecord = serde_json::from_str(&line)?;
        if let Err(FeatureError::Invalid(m)) = rec.features.validate() {
            return Err(FeatureError::Invalid(format!("line {}: {m}", n + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}
