//! Core domain types and the line-delimited instance record format.
//!
//! One record per line, a JSON object with the fields `tokens`, `head`,
//! `tail`, `relation` and an optional `confidence`:
//!
//! ```text
//! {"tokens":["joe","biden","leads","america"],"head":[0,2],"tail":[3,4],"relation":"leader_of"}
//! ```
//!
//! Spans are half-open token index pairs.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub const NA: &str = "NA";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct RelationLabel(String);

impl RelationLabel {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Validation("empty relation label".into()));
        }
        Ok(RelationLabel(name))
    }

    pub fn na() -> Self {
        RelationLabel(NA.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_na(&self) -> bool {
        self.0 == NA
    }
}

impl fmt::Display for RelationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Half-open token span `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub tokens: Vec<String>,
    pub head: Span,
    pub tail: Span,
    pub relation: RelationLabel,
    pub confidence: Option<f64>,
}

/// Lowercased token sequence; the identity used for entity matching.
pub fn normalize(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| t.to_lowercase()).collect()
}

impl Instance {
    pub fn head_surface(&self) -> &[String] {
        &self.tokens[self.head.start..self.head.end]
    }

    pub fn tail_surface(&self) -> &[String] {
        &self.tokens[self.tail.start..self.tail.end]
    }

    pub fn triplet(&self) -> Triplet {
        Triplet {
            head_surface: self.head_surface().to_vec(),
            relation: self.relation.clone(),
            tail_surface: self.tail_surface().to_vec(),
        }
    }

    /// Structural checks that hold for every well-formed instance:
    /// non-empty tokens, non-empty in-bounds spans, confidence in `[0, 1]`.
    pub fn check_structure(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::parse("tokens", "empty token list"));
        }
        for (name, span) in [("head", self.head), ("tail", self.tail)] {
            if span.is_empty() {
                return Err(Error::parse(name, "empty span"));
            }
            if span.end > self.tokens.len() {
                return Err(Error::Validation(format!(
                    "{name} span [{}, {}) out of bounds for {} tokens",
                    span.start,
                    span.end,
                    self.tokens.len()
                )));
            }
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::parse("confidence", format!("{c} not in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// A directed (head, relation, tail) fact. Equality and hashing use the
/// case-insensitive [`TripletKey`]; compare `key()`s rather than the struct.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub head_surface: Vec<String>,
    pub relation: RelationLabel,
    pub tail_surface: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TripletKey {
    pub head: Vec<String>,
    pub relation: RelationLabel,
    pub tail: Vec<String>,
}

impl Triplet {
    pub fn key(&self) -> TripletKey {
        TripletKey {
            head: normalize(&self.head_surface),
            relation: self.relation.clone(),
            tail: normalize(&self.tail_surface),
        }
    }

    pub fn is_na(&self) -> bool {
        self.relation.is_na()
    }
}

impl PartialEq for Triplet {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {})",
            self.head_surface.join(" "),
            self.relation,
            self.tail_surface.join(" ")
        )
    }
}

/// All instances of one triplet, each paired with its confidence.
#[derive(Debug, Clone)]
pub struct Bag {
    pub triplet: Triplet,
    pub members: Vec<(Instance, f64)>,
}

impl Bag {
    pub fn is_na(&self) -> bool {
        self.triplet.is_na()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Every member matches the bag triplet's surfaces and relation.
    pub fn is_pure(&self) -> bool {
        let key = self.triplet.key();
        !self.members.is_empty() && self.members.iter().all(|(inst, _)| inst.triplet().key() == key)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub label_set: Vec<RelationLabel>,
}

impl Dataset {
    /// Builds a dataset whose label set is the sorted set of relations present.
    pub fn from_instances(instances: Vec<Instance>) -> Self {
        let labels: BTreeSet<RelationLabel> =
            instances.iter().map(|i| i.relation.clone()).collect();
        Dataset {
            instances,
            label_set: labels.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// True when the reserved no-relation label is part of the label set.
    pub fn has_na(&self) -> bool {
        self.label_set.iter().any(RelationLabel::is_na)
    }

    pub fn label_index(&self, label: &RelationLabel) -> Option<usize> {
        self.label_set.iter().position(|l| l == label)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Dataset::from_instances(read_instances(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_instances(path, &self.instances)
    }
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, name: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| Error::parse(name, "missing field"))
}

fn parse_span(obj: &serde_json::Map<String, Value>, name: &str) -> Result<Span> {
    let value = field(obj, name)?;
    let arr = value
        .as_array()
        .filter(|a| a.len() == 2)
        .ok_or_else(|| Error::parse(name, "expected [start, end]"))?;
    let idx = |v: &Value| {
        v.as_u64()
            .map(|x| x as usize)
            .ok_or_else(|| Error::parse(name, "span bounds must be non-negative integers"))
    };
    Ok(Span::new(idx(&arr[0])?, idx(&arr[1])?))
}

pub fn parse_instance_record(line: &str) -> Result<Instance> {
    let value: Value = serde_json::from_str(line)
        .map_err(|e| Error::parse("record", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::parse("record", "expected a JSON object"))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "tokens" | "head" | "tail" | "relation" | "confidence") {
            return Err(Error::parse(key.as_str(), "unknown field"));
        }
    }
    let tokens = field(obj, "tokens")?
        .as_array()
        .ok_or_else(|| Error::parse("tokens", "expected an array of strings"))?
        .iter()
        .map(|t| {
            t.as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::parse("tokens", "expected an array of strings"))
        })
        .collect::<Result<Vec<_>>>()?;
    let head = parse_span(obj, "head")?;
    let tail = parse_span(obj, "tail")?;
    let relation = field(obj, "relation")?
        .as_str()
        .ok_or_else(|| Error::parse("relation", "expected a string"))?;
    let relation =
        RelationLabel::new(relation).map_err(|_| Error::parse("relation", "empty relation"))?;
    let confidence = match obj.get("confidence") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_f64()
                .ok_or_else(|| Error::parse("confidence", "expected a number"))?,
        ),
    };
    let inst = Instance {
        tokens,
        head,
        tail,
        relation,
        confidence,
    };
    inst.check_structure()?;
    Ok(inst)
}

#[derive(Serialize)]
struct RecordOut<'a> {
    tokens: &'a [String],
    head: [usize; 2],
    tail: [usize; 2],
    relation: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
}

pub fn serialize_instance_record(inst: &Instance) -> String {
    let rec = RecordOut {
        tokens: &inst.tokens,
        head: [inst.head.start, inst.head.end],
        tail: [inst.tail.start, inst.tail.end],
        relation: inst.relation.as_str(),
        confidence: inst.confidence,
    };
    serde_json::to_string(&rec).expect("instance records always serialize")
}

/// Reads an instance file; blank lines are skipped, errors carry the
/// one-based line number.
pub fn read_instances(path: &Path) -> Result<Vec<Instance>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_instance_record(&line).map_err(|e| e.at_record(idx))?);
    }
    Ok(out)
}

pub fn write_instances(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut buf = String::new();
    for inst in instances {
        buf.push_str(&serialize_instance_record(inst));
        buf.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub rule: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }
}

/// `<line_no>\t<rule>\t<message>` per violation, line numbers one-based.
impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{}\t{}\t{}", v.index + 1, v.rule, v.message)?;
        }
        Ok(())
    }
}

pub fn validate_dataset(ds: &Dataset) -> ValidationReport {
    let mut violations = Vec::new();
    for (index, inst) in ds.instances.iter().enumerate() {
        if let Err(e) = inst.check_structure() {
            violations.push(Violation {
                index,
                rule: "structure",
                message: e.to_string(),
            });
            continue;
        }
        if inst.head.overlaps(&inst.tail) {
            violations.push(Violation {
                index,
                rule: "overlapping spans",
                message: format!(
                    "head [{}, {}) overlaps tail [{}, {})",
                    inst.head.start, inst.head.end, inst.tail.start, inst.tail.end
                ),
            });
        }
        if !ds.label_set.contains(&inst.relation) {
            violations.push(Violation {
                index,
                rule: "unknown label",
                message: format!("relation `{}` not in label set", inst.relation),
            });
        }
    }
    ValidationReport { violations }
}
