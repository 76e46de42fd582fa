//! Span-level NER scoring under the strict / exact / partial / type schemas.
//!
//! Each predicted span is classified against the gold spans:
//!
//! | case                               | strict | exact | partial | type |
//! |------------------------------------|--------|-------|---------|------|
//! | same boundaries, same type         | COR    | COR   | COR     | COR  |
//! | same boundaries, other type        | INC    | COR   | COR     | INC  |
//! | overlapping, same type             | INC    | INC   | PAR     | COR  |
//! | overlapping, other type            | INC    | INC   | PAR     | INC  |
//! | no overlap                         | SPU    | SPU   | SPU     | SPU  |
//!
//! Gold spans touched by no prediction are MIS. Possible = COR + INC + PAR +
//! MIS, actual = COR + INC + PAR + SPU, precision = (COR + ½PAR) / actual and
//! recall = (COR + ½PAR) / possible.

use std::collections::BTreeMap;

use serde::Serialize;

use super::f1;
use crate::error::{Error, Result};

/// Schema names in report order.
pub const SCHEMAS: [&str; 4] = ["strict", "exact", "partial", "type"];

/// Inclusive token span `[start, end]` with an entity type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: String,
}

impl Span {
    pub fn new(start: usize, end: usize, kind: impl Into<String>) -> Self {
        Self {
            start,
            end,
            kind: kind.into(),
        }
    }

    fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    fn same_bounds(&self, other: &Span) -> bool {
        self.start == other.start && self.end == other.end
    }
}

/// Tokens with aligned gold and predicted IOB labels.
#[derive(Debug, Clone, PartialEq)]
pub struct NerDocument {
    pub tokens: Vec<String>,
    pub gold: Vec<String>,
    pub pred: Vec<String>,
}

impl NerDocument {
    pub fn new(tokens: Vec<String>, gold: Vec<String>, pred: Vec<String>) -> Result<Self> {
        if tokens.len() != gold.len() || tokens.len() != pred.len() {
            return Err(Error::Contract(format!(
                "NER document has {} tokens, {} gold and {} predicted labels",
                tokens.len(),
                gold.len(),
                pred.len()
            )));
        }
        Ok(Self { tokens, gold, pred })
    }
}

/// Decodes IOB labels into spans. An `I-X` that does not continue an open
/// `X` span starts a new one.
pub fn extract_spans<S: AsRef<str>>(labels: &[S]) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, label) in labels.iter().enumerate() {
        let label = label.as_ref();
        if label == "O" {
            spans.extend(open.take());
            continue;
        }
        let (prefix, kind) = match label.split_once('-') {
            Some((p @ ("B" | "I"), k)) if !k.is_empty() => (p, k),
            _ => return Err(Error::Data(format!("malformed IOB label `{label}` at position {i}"))),
        };
        match &mut open {
            Some(span) if prefix == "I" && span.kind == kind => span.end = i,
            _ => {
                spans.extend(open.take());
                open = Some(Span::new(i, i, kind));
            }
        }
    }
    spans.extend(open);
    Ok(spans)
}

/// Raw event counts and derived scores for one schema.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EventCounts {
    pub correct: usize,
    pub incorrect: usize,
    pub partial: usize,
    pub missed: usize,
    pub spurious: usize,
}

impl EventCounts {
    pub fn possible(&self) -> usize {
        self.correct + self.incorrect + self.partial + self.missed
    }

    pub fn actual(&self) -> usize {
        self.correct + self.incorrect + self.partial + self.spurious
    }

    /// Correct plus half credit for partial matches.
    pub fn score(&self) -> f64 {
        self.correct as f64 + 0.5 * self.partial as f64
    }

    pub fn precision(&self) -> f64 {
        ratio(self.score(), self.actual())
    }

    pub fn recall(&self) -> f64 {
        ratio(self.score(), self.possible())
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn ratio(num: f64, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

#[derive(Clone, Copy)]
enum Event {
    Correct,
    Incorrect,
    Partial,
    Missed,
    Spurious,
}

impl EventCounts {
    fn record(&mut self, e: Event) {
        match e {
            Event::Correct => self.correct += 1,
            Event::Incorrect => self.incorrect += 1,
            Event::Partial => self.partial += 1,
            Event::Missed => self.missed += 1,
            Event::Spurious => self.spurious += 1,
        }
    }
}

/// Counts per schema, in [`SCHEMAS`] order.
pub type Schemas = [EventCounts; 4];

/// Flat schema record for JSON reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SchemaSummary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: EventCounts,
    pub possible: usize,
    pub actual: usize,
}

impl From<EventCounts> for SchemaSummary {
    fn from(c: EventCounts) -> Self {
        Self {
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            counts: c,
            possible: c.possible(),
            actual: c.actual(),
        }
    }
}

/// Micro (event-level) scores per schema, the same per entity type, and the
/// per-type macro-averaged F1 of each schema.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaScores {
    pub strict: EventCounts,
    pub exact: EventCounts,
    pub partial: EventCounts,
    pub type_match: EventCounts,
    pub per_type: BTreeMap<String, Schemas>,
}

impl SchemaScores {
    pub fn schemas(&self) -> [EventCounts; 4] {
        [self.strict, self.exact, self.partial, self.type_match]
    }

    /// Unweighted mean over entity types of the schema's F1.
    pub fn macro_f1(&self, schema: usize) -> f64 {
        if self.per_type.is_empty() {
            return 0.0;
        }
        self.per_type.values().map(|c| c[schema].f1()).sum::<f64>() / self.per_type.len() as f64
    }

    /// JSON record: per-schema micro P/R/F1 with raw counts, per-type macro
    /// F1, and per-type breakdowns.
    pub fn to_json(&self) -> serde_json::Value {
        let mut micro = serde_json::Map::new();
        let mut macro_ = serde_json::Map::new();
        for (i, (name, c)) in SCHEMAS.iter().zip(self.schemas()).enumerate() {
            micro.insert(name.to_string(), serde_json::to_value(SchemaSummary::from(c)).unwrap());
            macro_.insert(name.to_string(), self.macro_f1(i).into());
        }
        let per_type: serde_json::Map<String, serde_json::Value> = self
            .per_type
            .iter()
            .map(|(k, counts)| {
                let m: serde_json::Map<String, serde_json::Value> = SCHEMAS
                    .iter()
                    .zip(counts)
                    .map(|(n, c)| (n.to_string(), serde_json::to_value(SchemaSummary::from(*c)).unwrap()))
                    .collect();
                (k.clone(), m.into())
            })
            .collect();
        serde_json::json!({ "micro": micro, "macro_f1": macro_, "per_type": per_type })
    }
}

/// Classifies each predicted span and each unmatched gold span, attributing
/// events to the gold type when a gold span is involved.
fn score_spans(gold: &[Span], pred: &[Span], totals: &mut Schemas, per_type: &mut BTreeMap<String, Schemas>) {
    use Event::*;
    let mut touched = vec![false; gold.len()];
    for p in pred {
        let hit = gold
            .iter()
            .position(|g| g == p)
            .or_else(|| gold.iter().position(|g| g.same_bounds(p)))
            .or_else(|| gold.iter().position(|g| g.overlaps(p)));
        let (events, kind) = match hit {
            None => ([Spurious; 4], &p.kind),
            Some(gi) => {
                touched[gi] = true;
                let g = &gold[gi];
                let same_type = g.kind == p.kind;
                let ev = match (g.same_bounds(p), same_type) {
                    (true, true) => [Correct; 4],
                    (true, false) => [Incorrect, Correct, Correct, Incorrect],
                    (false, true) => [Incorrect, Incorrect, Partial, Correct],
                    (false, false) => [Incorrect, Incorrect, Partial, Incorrect],
                };
                (ev, &g.kind)
            }
        };
        let bucket = per_type.entry(kind.clone()).or_default();
        for s in 0..4 {
            totals[s].record(events[s]);
            bucket[s].record(events[s]);
        }
    }
    for (g, _) in gold.iter().zip(&touched).filter(|(_, &t)| !t) {
        let bucket = per_type.entry(g.kind.clone()).or_default();
        for s in 0..4 {
            totals[s].record(Missed);
            bucket[s].record(Missed);
        }
    }
}

/// Four-schema scores accumulated over all documents.
pub fn ner_schema_eval(docs: &[NerDocument]) -> Result<SchemaScores> {
    let mut totals: Schemas = Default::default();
    let mut per_type: BTreeMap<String, Schemas> = BTreeMap::new();
    for (d, doc) in docs.iter().enumerate() {
        if doc.gold.len() != doc.pred.len() {
            return Err(Error::Contract(format!(
                "document {d}: {} gold vs {} predicted labels",
                doc.gold.len(),
                doc.pred.len()
            )));
        }
        let with_doc = |e: Error| match e {
            Error::Data(m) => Error::Data(format!("document {d}: {m}")),
            other => other,
        };
        let gold = extract_spans(&doc.gold).map_err(with_doc)?;
        let pred = extract_spans(&doc.pred).map_err(with_doc)?;
        score_spans(&gold, &pred, &mut totals, &mut per_type);
    }
    Ok(SchemaScores {
        strict: totals[0],
        exact: totals[1],
        partial: totals[2],
        type_match: totals[3],
        per_type,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn doc(gold: &str, pred: &str) -> NerDocument {
        let g = labels(gold);
        let toks = vec!["w".to_string(); g.len()];
        NerDocument::new(toks, g, labels(pred)).unwrap()
    }

    #[test]
    fn extracts_with_repair() {
        let s = extract_spans(&labels("B-PER I-PER O I-LOC I-LOC B-LOC I-PER")).unwrap();
        assert_eq!(
            s,
            vec![
                Span::new(0, 1, "PER"),
                Span::new(3, 4, "LOC"),
                Span::new(5, 5, "LOC"),
                Span::new(6, 6, "PER"),
            ]
        );
        let err = extract_spans(&labels("O B-PER X-LOC")).unwrap_err();
        assert!(matches!(err, Error::Data(m) if m.contains("position 2")));
        assert!(extract_spans(&labels("B-")).is_err());
    }

    #[test]
    fn identical_spans_score_one() {
        let s = ner_schema_eval(&[doc("O B-PER I-PER O B-LOC", "O B-PER I-PER O B-LOC")]).unwrap();
        for c in s.schemas() {
            assert_eq!(c.f1(), 1.0);
        }
    }

    #[test]
    fn type_mismatch_same_bounds() {
        let s = ner_schema_eval(&[doc("O O B-PER I-PER I-PER", "O O B-LOC I-LOC I-LOC")]).unwrap();
        assert_eq!(s.strict.correct, 0);
        assert_eq!(s.exact.correct, 1);
        assert_eq!(s.partial.correct, 1);
        assert_eq!(s.type_match.correct, 0);
    }

    #[test]
    fn boundary_mismatch_same_type() {
        let s = ner_schema_eval(&[doc("O O B-PER I-PER I-PER", "O O O B-PER I-PER")]).unwrap();
        assert_eq!(s.strict.correct, 0);
        assert_eq!(s.exact.correct, 0);
        assert_eq!(s.partial.partial, 1);
        assert_eq!(s.partial.score(), 0.5);
        assert_eq!(s.type_match.correct, 1);
    }

    #[test]
    fn missing_and_spurious() {
        let s = ner_schema_eval(&[doc("B-PER O O", "O O B-ORG")]).unwrap();
        for c in s.schemas() {
            assert_eq!((c.missed, c.spurious, c.possible(), c.actual()), (1, 1, 1, 1));
            assert_eq!(c.f1(), 0.0);
        }
        assert_eq!(s.per_type.len(), 2);
        assert!(s.to_json()["micro"]["strict"]["counts"]["missed"] == 1);
    }
}
