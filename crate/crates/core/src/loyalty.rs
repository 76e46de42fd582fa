//! Teacher–student similarity: label loyalty, probability loyalty
//! (Jensen–Shannon based) and regression loyalty, single- or multi-teacher.
//!
//! Prediction sets are exchanged as tab-separated files with a header line:
//!
//! ```text
//! id    label    probabilities    # classification, probabilities comma-separated
//! id    score                     # regression
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::taskmetrics::{accuracy, pearson};

/// Probabilities below this are raised to it before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionKind {
    Classification,
    Regression,
}

/// Aligned per-example outputs of one model on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub ids: Vec<String>,
    pub kind: PredictionKind,
    /// Classification only.
    pub labels: Vec<usize>,
    /// Classification only; each row sums to 1.
    pub probabilities: Vec<Vec<f64>>,
    /// Regression only.
    pub scores: Vec<f64>,
}

impl PredictionSet {
    pub fn classification(ids: Vec<String>, probabilities: Vec<Vec<f64>>) -> Result<Self> {
        let labels = probabilities.iter().map(|p| argmax(p)).collect();
        Self::classification_with_labels(ids, labels, probabilities)
    }

    /// Labels given explicitly, e.g. a thresholded binary head.
    pub fn classification_with_labels(
        ids: Vec<String>,
        labels: Vec<usize>,
        probabilities: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != probabilities.len() {
            return Err(Error::Contract(format!(
                "{} ids, {} labels, {} probability rows",
                ids.len(),
                labels.len(),
                probabilities.len()
            )));
        }
        for (id, row) in ids.iter().zip(&probabilities) {
            let s: f64 = row.iter().sum();
            if row.is_empty() || (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Data(format!(
                    "example `{id}`: probabilities do not form a distribution (sum {s})"
                )));
            }
        }
        Ok(Self {
            ids,
            kind: PredictionKind::Classification,
            labels,
            probabilities,
            scores: Vec::new(),
        })
    }

    pub fn regression(ids: Vec<String>, scores: Vec<f64>) -> Result<Self> {
        if ids.len() != scores.len() {
            return Err(Error::Contract(format!(
                "{} ids but {} scores",
                ids.len(),
                scores.len()
            )));
        }
        Ok(Self {
            ids,
            kind: PredictionKind::Regression,
            labels: Vec::new(),
            probabilities: Vec::new(),
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        match self.kind {
            PredictionKind::Classification => {
                out.push_str("id\tlabel\tprobabilities\n");
                for ((id, l), p) in self.ids.iter().zip(&self.labels).zip(&self.probabilities) {
                    let probs: Vec<String> = p.iter().map(|x| format!("{x:.17}")).collect();
                    writeln!(out, "{id}\t{l}\t{}", probs.join(",")).unwrap();
                }
            }
            PredictionKind::Regression => {
                out.push_str("id\tscore\n");
                for (id, s) in self.ids.iter().zip(&self.scores) {
                    writeln!(out, "{id}\t{s:.17}").unwrap();
                }
            }
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Format("empty prediction file".into()))?;
        let bad = |n: usize, what: &str| Error::Format(format!("line {}: {what}", n + 1));
        match header.trim_end() {
            "id\tlabel\tprobabilities" => {
                let (mut ids, mut labels, mut probs) = (Vec::new(), Vec::new(), Vec::new());
                for (n, line) in lines {
                    let cols: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
                    if cols.len() != 3 {
                        return Err(bad(n, "expected 3 tab-separated columns"));
                    }
                    ids.push(cols[0].to_string());
                    labels.push(cols[1].parse().map_err(|_| bad(n, "label is not an integer"))?);
                    let row = cols[2]
                        .split(',')
                        .map(|x| x.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(n, "unparsable probability"))?;
                    probs.push(row);
                }
                Self::classification_with_labels(ids, labels, probs)
            }
            "id\tscore" => {
                let (mut ids, mut scores) = (Vec::new(), Vec::new());
                for (n, line) in lines {
                    let cols: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
                    if cols.len() != 2 {
                        return Err(bad(n, "expected 2 tab-separated columns"));
                    }
                    ids.push(cols[0].to_string());
                    scores.push(cols[1].trim().parse().map_err(|_| bad(n, "unparsable score"))?);
                }
                Self::regression(ids, scores)
            }
            other => Err(Error::Format(format!("unknown prediction header `{other}`"))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text)
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// For each student example, the index of the teacher example with the same
/// id.
fn align(teacher: &PredictionSet, student: &PredictionSet) -> Result<Vec<usize>> {
    if teacher.kind != student.kind {
        return Err(Error::Contract(format!(
            "teacher is {:?} but student is {:?}",
            teacher.kind, student.kind
        )));
    }
    let index: HashMap<&str, usize> = teacher.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut order = Vec::with_capacity(student.len());
    let mut missing_in_teacher = Vec::new();
    for id in &student.ids {
        match index.get(id.as_str()) {
            Some(&i) => order.push(i),
            None => missing_in_teacher.push(id.clone()),
        }
    }
    let student_ids: std::collections::HashSet<&str> = student.ids.iter().map(String::as_str).collect();
    let missing_in_student: Vec<&String> = teacher
        .ids
        .iter()
        .filter(|id| !student_ids.contains(id.as_str()))
        .collect();
    if !missing_in_teacher.is_empty() || !missing_in_student.is_empty() {
        return Err(Error::Alignment(format!(
            "ids missing from teacher: {missing_in_teacher:?}; ids missing from student: {missing_in_student:?}"
        )));
    }
    if student.is_empty() {
        return Err(Error::Contract("empty prediction sets".into()));
    }
    Ok(order)
}

fn require(kind: PredictionKind, set: &PredictionSet, op: &str) -> Result<()> {
    if set.kind != kind {
        return Err(Error::Contract(format!("{op} needs {kind:?} predictions")));
    }
    Ok(())
}

/// Accuracy of student labels with teacher labels as ground truth.
pub fn label_loyalty(teacher: &PredictionSet, student: &PredictionSet) -> Result<f64> {
    require(PredictionKind::Classification, student, "label loyalty")?;
    let order = align(teacher, student)?;
    let gold: Vec<usize> = order.iter().map(|&i| teacher.labels[i]).collect();
    accuracy(&gold, &student.labels)
}

/// `Σ p log₂(p / q)` with both sides floored at [`PROB_FLOOR`].
pub fn kl_divergence_bits(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.max(PROB_FLOOR), b.max(PROB_FLOOR));
            a * (a / b).log2()
        })
        .sum()
}

/// Jensen–Shannon divergence in bits: the mean KL of each side to the
/// mixture `(p + q) / 2`. Bounded by 1.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Contract(format!(
            "distributions over {} and {} classes",
            p.len(),
            q.len()
        )));
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let d = 0.5 * (kl_divergence_bits(p, &m) + kl_divergence_bits(q, &m));
    Ok(d.clamp(0.0, 1.0))
}

/// Mean over examples of `1 − sqrt(D_JS(P_t ‖ P_s))`.
pub fn probability_loyalty(teacher: &PredictionSet, student: &PredictionSet) -> Result<f64> {
    require(PredictionKind::Classification, student, "probability loyalty")?;
    let order = align(teacher, student)?;
    let mut total = 0.0;
    for (s, &t) in student.probabilities.iter().zip(&order) {
        total += 1.0 - js_divergence(&teacher.probabilities[t], s)?.sqrt();
    }
    Ok(total / student.len() as f64)
}

/// Pearson correlation between teacher and student scalar predictions.
pub fn regression_loyalty(teacher: &PredictionSet, student: &PredictionSet) -> Result<f64> {
    require(PredictionKind::Regression, student, "regression loyalty")?;
    let order = align(teacher, student)?;
    let t: Vec<f64> = order.iter().map(|&i| teacher.scores[i]).collect();
    pearson(&t, &student.scores)
}

/// Loyalty figures against one teacher.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LoyaltyScores {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_loyalty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probability_loyalty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regression_loyalty: Option<f64>,
}

impl LoyaltyScores {
    pub fn compute(teacher: &PredictionSet, student: &PredictionSet) -> Result<Self> {
        Ok(match student.kind {
            PredictionKind::Classification => Self {
                label_loyalty: Some(label_loyalty(teacher, student)?),
                probability_loyalty: Some(probability_loyalty(teacher, student)?),
                regression_loyalty: None,
            },
            PredictionKind::Regression => Self {
                regression_loyalty: Some(regression_loyalty(teacher, student)?),
                ..Self::default()
            },
        })
    }
}

/// Averaged loyalty with the per-teacher values it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoyaltyReport {
    #[serde(flatten)]
    pub mean: LoyaltyScores,
    pub per_teacher: Vec<LoyaltyScores>,
}

/// Each metric against each teacher, then the arithmetic mean.
pub fn multi_teacher_loyalty(teachers: &[PredictionSet], student: &PredictionSet) -> Result<LoyaltyReport> {
    if teachers.is_empty() {
        return Err(Error::Contract(
            "at least one teacher prediction set is required".into(),
        ));
    }
    let per_teacher = teachers
        .iter()
        .enumerate()
        .map(|(k, t)| LoyaltyScores::compute(t, student).map_err(|e| tag_teacher(k, e)))
        .collect::<Result<Vec<_>>>()?;
    let avg = |f: fn(&LoyaltyScores) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = per_teacher.iter().map(f).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(LoyaltyReport {
        mean: LoyaltyScores {
            label_loyalty: avg(|s| s.label_loyalty),
            probability_loyalty: avg(|s| s.probability_loyalty),
            regression_loyalty: avg(|s| s.regression_loyalty),
        },
        per_teacher,
    })
}

fn tag_teacher(k: usize, e: Error) -> Error {
    match e {
        Error::Alignment(m) => Error::Alignment(format!("teacher {k}: {m}")),
        Error::Contract(m) => Error::Contract(format!("teacher {k}: {m}")),
        Error::Data(m) => Error::Data(format!("teacher {k}: {m}")),
        Error::UndefinedCorrelation(m) => Error::UndefinedCorrelation(format!("teacher {k}: {m}")),
        other => other,
    }
}
