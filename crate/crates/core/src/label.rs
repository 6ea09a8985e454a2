//! The six-way traffic label space.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of classes the detector distinguishes.
pub const NUM_CLASSES: usize = 6;

/// Traffic class. The declaration order is the canonical class order used by
/// model files, probability vectors and report columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Icmp,
    Udp,
    Tcp,
    PshAck,
    RstFin,
    Benign,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown class label {0:?}")]
pub struct UnknownLabel(pub String);

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::Icmp,
        ClassLabel::Udp,
        ClassLabel::Tcp,
        ClassLabel::PshAck,
        ClassLabel::RstFin,
        ClassLabel::Benign,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ClassLabel> {
        Self::ALL.get(i).copied()
    }

    /// Canonical answer token, as used in prompts and model files.
    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Icmp => "ICMP",
            ClassLabel::Udp => "UDP",
            ClassLabel::Tcp => "TCP",
            ClassLabel::PshAck => "PSHACK",
            ClassLabel::RstFin => "RSTFIN",
            ClassLabel::Benign => "BENIGN",
        }
    }

    /// Column heading for report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ClassLabel::Icmp => "ICMP",
            ClassLabel::Udp => "UDP",
            ClassLabel::Tcp => "TCP",
            ClassLabel::PshAck => "PSH/ACK",
            ClassLabel::RstFin => "RST/FIN",
            ClassLabel::Benign => "Benign",
        }
    }

    /// One-hot 0/1 indicator for class `i`.
    pub fn indicator(self, i: usize) -> f64 {
        if self.index() == i {
            1.0
        } else {
            0.0
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Built-in alias table: canonical tokens, table headings and the
/// CICIoT-2023 label strings.
const BUILTIN_ALIASES: &[(&str, ClassLabel)] = &[
    ("ICMP", ClassLabel::Icmp),
    ("UDP", ClassLabel::Udp),
    ("TCP", ClassLabel::Tcp),
    ("PSHACK", ClassLabel::PshAck),
    ("PSH/ACK", ClassLabel::PshAck),
    ("PSH_ACK", ClassLabel::PshAck),
    ("RSTFIN", ClassLabel::RstFin),
    ("RST/FIN", ClassLabel::RstFin),
    ("RST_FIN", ClassLabel::RstFin),
    ("BENIGN", ClassLabel::Benign),
    ("BenignTraffic", ClassLabel::Benign),
    ("DDoS-ICMP_Flood", ClassLabel::Icmp),
    ("DDoS-UDP_Flood", ClassLabel::Udp),
    ("DDoS-TCP_Flood", ClassLabel::Tcp),
    ("DDoS-PSHACK_Flood", ClassLabel::PshAck),
    ("DDoS-RSTFINFlood", ClassLabel::RstFin),
    ("DDoS-RSTFIN_Flood", ClassLabel::RstFin),
];

impl FromStr for ClassLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        BUILTIN_ALIASES
            .iter()
            .find(|(alias, _)| alias.eq_ignore_ascii_case(t))
            .map(|(_, l)| *l)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

impl Serialize for ClassLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ClassLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Maps dataset label strings onto [`ClassLabel`]. Extra aliases take
/// precedence over the built-in table; matching is ASCII case-insensitive.
#[derive(Debug, Clone, Default)]
pub struct LabelMap {
    extra: HashMap<String, ClassLabel>,
}

impl LabelMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_alias(mut self, alias: impl Into<String>, label: ClassLabel) -> Self {
        self.insert(alias, label);
        self
    }

    pub fn insert(&mut self, alias: impl Into<String>, label: ClassLabel) {
        self.extra
            .insert(alias.into().trim().to_ascii_lowercase(), label);
    }

    pub fn resolve(&self, s: &str) -> Result<ClassLabel, UnknownLabel> {
        if let Some(l) = self.extra.get(&s.trim().to_ascii_lowercase()) {
            return Ok(*l);
        }
        s.parse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order_and_roundtrip() {
        assert_eq!(ClassLabel::ALL.len(), NUM_CLASSES);
        for (i, l) in ClassLabel::ALL.iter().enumerate() {
            assert_eq!(l.index(), i);
            assert_eq!(ClassLabel::from_index(i), Some(*l));
            assert_eq!(l.as_str().parse::<ClassLabel>().unwrap(), *l);
        }
        assert_eq!(ClassLabel::from_index(6), None);
    }

    #[test]
    fn dataset_aliases() {
        assert_eq!("DDoS-ICMP_Flood".parse(), Ok(ClassLabel::Icmp));
        assert_eq!("DDoS-RSTFINFlood".parse(), Ok(ClassLabel::RstFin));
        assert_eq!("psh/ack".parse(), Ok(ClassLabel::PshAck));
        assert_eq!("BenignTraffic".parse(), Ok(ClassLabel::Benign));
        assert!("DDoS-SlowLoris".parse::<ClassLabel>().is_err());
    }

    #[test]
    fn extra_aliases_override() {
        let map = LabelMap::new().with_alias("DDoS-SYN_Flood", ClassLabel::Tcp);
        assert_eq!(map.resolve("ddos-syn_flood"), Ok(ClassLabel::Tcp));
        assert_eq!(map.resolve("UDP"), Ok(ClassLabel::Udp));
        let err = map.resolve("Mirai-greeth").unwrap_err();
        assert_eq!(err.0, "Mirai-greeth");
    }

    #[test]
    fn serde_uses_canonical_token() {
        let s = serde_json::to_string(&ClassLabel::PshAck).unwrap();
        assert_eq!(s, "\"PSHACK\"");
        let back: ClassLabel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, ClassLabel::PshAck);
    }
}
