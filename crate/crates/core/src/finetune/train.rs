use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Batch;
use crate::error::{Error, Result};
use crate::loyalty::PredictionSet;
use crate::numerics::{clip_grad_norm, AdamW, LinearSchedule};
use crate::taskmetrics::{ner_schema_eval, ClassificationReport, CorrelationReport, NerDocument};
use crate::tokenizer::{Encoding, Vocab};

use super::data::{align_words, encode_example, Dataset, Target};
use super::head::{HeadTargets, TaskKind, TaskModel};

/// Upper end of similarity scores; regression targets are divided by it.
pub const SCORE_SCALE: f64 = 5.0;

/// How long fine-tuning runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Duration {
    Epochs(usize),
    /// Stop after `patience` dev evaluations without improvement; the
    /// learning rate decays to zero over `max_epochs`.
    EarlyStopping {
        patience: usize,
        max_epochs: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneHyperparams {
    pub duration: Duration,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub max_len: usize,
    pub clip_norm: f64,
}

impl Default for FinetuneHyperparams {
    fn default() -> Self {
        Self {
            duration: Duration::Epochs(3),
            batch_size: 16,
            warmup_steps: 0,
            learning_rate: 5e-5,
            seed: 42,
            weight_decay: 0.01,
            max_len: 128,
            clip_norm: 1.0,
        }
    }
}

impl FinetuneHyperparams {
    pub fn epochs(epochs: usize, batch_size: usize, warmup_steps: usize, learning_rate: f64) -> Self {
        Self {
            duration: Duration::Epochs(epochs),
            batch_size,
            warmup_steps,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let max_epochs = match self.duration {
            Duration::Epochs(e) => e,
            Duration::EarlyStopping { patience, max_epochs } => {
                if patience == 0 {
                    return Err(Error::Config("early-stopping patience must be positive".into()));
                }
                max_epochs
            }
        };
        if max_epochs == 0 {
            return Err(Error::Config("at least one epoch is required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "learning_rate and clip_norm must be positive, weight_decay non-negative".into(),
            ));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must leave room for [CLS] and [SEP]".into()));
        }
        Ok(())
    }

    fn max_epochs(&self) -> usize {
        match self.duration {
            Duration::Epochs(e) => e,
            Duration::EarlyStopping { max_epochs, .. } => max_epochs,
        }
    }
}

/// Tracks a validation metric and keeps the best model seen so far.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub metric: String,
    pub patience: usize,
    best: Option<f64>,
    since_best: usize,
    snapshot: Option<TaskModel>,
}

impl EarlyStopping {
    pub fn new(metric: impl Into<String>, patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::Config("early-stopping patience must be positive".into()));
        }
        Ok(Self {
            metric: metric.into(),
            patience,
            best: None,
            since_best: 0,
            snapshot: None,
        })
    }

    /// Records one evaluation and returns `true` when training should stop.
    /// Higher values are better; NaN never counts as an improvement.
    pub fn observe(&mut self, value: f64, model: &TaskModel) -> bool {
        if self.best.is_none_or(|b| value > b) && !value.is_nan() {
            self.best = Some(value);
            self.since_best = 0;
            self.snapshot = Some(model.clone());
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn into_best(self) -> Option<TaskModel> {
        self.snapshot
    }
}

/// Scores of a task model on one labelled dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskReport {
    Tagging {
        accuracy: f64,
        macro_f1: f64,
        tokens: usize,
        /// Entity-level scores when every label is IOB-shaped.
        #[serde(skip_serializing_if = "Option::is_none")]
        entities: Option<serde_json::Value>,
        #[serde(skip)]
        entity_strict_f1: Option<f64>,
    },
    Classification(ClassificationReport),
    Regression(CorrelationReport),
}

impl TaskReport {
    /// The metric used for model selection.
    pub fn primary(&self) -> f64 {
        match self {
            TaskReport::Tagging {
                accuracy,
                entity_strict_f1,
                ..
            } => entity_strict_f1.unwrap_or(*accuracy),
            TaskReport::Classification(c) => c.accuracy,
            TaskReport::Regression(r) => r.pearson,
        }
    }

    /// Flat metric map for multi-seed aggregation.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        match self {
            TaskReport::Tagging {
                accuracy,
                macro_f1,
                entity_strict_f1,
                ..
            } => {
                m.insert("accuracy".into(), *accuracy);
                m.insert("macro_f1".into(), *macro_f1);
                if let Some(f) = entity_strict_f1 {
                    m.insert("strict_f1".into(), *f);
                }
            }
            TaskReport::Classification(c) => {
                m.insert("accuracy".into(), c.accuracy);
                m.insert("macro_f1".into(), c.macro_f1);
            }
            TaskReport::Regression(r) => {
                m.insert("pearson".into(), r.pearson);
                m.insert("spearman".into(), r.spearman);
            }
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: TaskModel,
    pub dev_report: Option<TaskReport>,
    pub epochs_run: usize,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Primary dev metric after each epoch.
    pub dev_history: Vec<f64>,
}

/// One encoded example with its supervision.
#[derive(Debug, Clone)]
struct Prepared {
    encoding: Encoding,
    target: PreparedTarget,
}

#[derive(Debug, Clone)]
enum PreparedTarget {
    /// `(position, class)` at first subwords.
    Tokens(Vec<(usize, usize)>),
    Class(usize),
    Score(f64),
}

fn prepare(model: &TaskModel, data: &Dataset, vocab: &Vocab, max_len: usize) -> Result<Vec<Prepared>> {
    let kind = model.kind();
    match (kind, data) {
        (TaskKind::TokenClassification(_), Dataset::Tagging(sents)) => {
            let index: BTreeMap<&str, usize> = model.labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
            sents
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let aligned = align_words(&s.words, vocab, max_len)?;
                    let mut targets = Vec::new();
                    for (tag, row) in s.tags.iter().zip(&aligned.word_rows) {
                        let class = *index.get(tag.as_str()).ok_or_else(|| {
                            Error::Data(format!("example {i}: label `{tag}` is not in the head's label set"))
                        })?;
                        if let Some(r) = row {
                            targets.push((*r, class));
                        }
                    }
                    Ok(Prepared {
                        encoding: aligned.encoding,
                        target: PreparedTarget::Tokens(targets),
                    })
                })
                .collect()
        }
        (TaskKind::TokenClassification(_), Dataset::Examples(_)) => Err(Error::Contract(
            "a token-classification head needs a tagging dataset".into(),
        )),
        (_, Dataset::Tagging(_)) => Err(Error::Contract("a sequence-level head needs an example dataset".into())),
        (_, Dataset::Examples(exs)) => exs
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                let target = match (kind, &ex.target) {
                    (TaskKind::PairRegression, Target::Score(s)) => {
                        if !(0.0..=SCORE_SCALE).contains(s) {
                            return Err(Error::Data(format!(
                                "example {i}: score {s} outside [0, {SCORE_SCALE}]"
                            )));
                        }
                        PreparedTarget::Score(s / SCORE_SCALE)
                    }
                    (TaskKind::PairRegression, Target::Class(_)) => {
                        return Err(Error::Data(format!("example {i}: regression needs a score")))
                    }
                    (_, Target::Class(c)) => {
                        if *c >= kind.num_classes() {
                            return Err(Error::Data(format!(
                                "example {i}: label {c} out of range for {} classes",
                                kind.num_classes()
                            )));
                        }
                        PreparedTarget::Class(*c)
                    }
                    (_, Target::Score(_)) => {
                        return Err(Error::Data(format!("example {i}: classification needs a label")))
                    }
                };
                Ok(Prepared {
                    encoding: encode_example(ex, vocab, max_len)?,
                    target,
                })
            })
            .collect(),
    }
}

fn make_batch(kind: TaskKind, items: &[&Prepared]) -> Result<(Batch, HeadTargets)> {
    let encs: Vec<Encoding> = items.iter().map(|p| p.encoding.clone()).collect();
    let batch = Batch::from_encodings(&encs)?;
    let s = batch.seq_len;
    let targets = match kind {
        TaskKind::TokenClassification(_) => HeadTargets::Tokens(
            items
                .iter()
                .enumerate()
                .flat_map(|(b, p)| match &p.target {
                    PreparedTarget::Tokens(t) => t.iter().map(|&(r, c)| (b * s + r, c)).collect(),
                    _ => Vec::new(),
                })
                .collect(),
        ),
        _ => {
            let vals: Vec<f64> = items
                .iter()
                .map(|p| match p.target {
                    PreparedTarget::Class(c) => c as f64,
                    PreparedTarget::Score(v) => v,
                    PreparedTarget::Tokens(_) => 0.0,
                })
                .collect();
            match kind {
                TaskKind::MultiClassClassification(_) => {
                    HeadTargets::Classes(vals.iter().map(|&v| v as usize).collect())
                }
                TaskKind::BinaryClassification => HeadTargets::Binary(vals),
                _ => HeadTargets::Scores(vals),
            }
        }
    };
    Ok((batch, targets))
}

/// Fine-tunes `model` with AdamW under linear warmup and decay to zero.
/// `dev` is required for early stopping and otherwise only reported on.
pub fn finetune(
    mut model: TaskModel,
    train: &Dataset,
    dev: Option<&Dataset>,
    vocab: &Vocab,
    hp: &FinetuneHyperparams,
) -> Result<FinetuneOutcome> {
    hp.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let kind = model.kind();
    let examples = prepare(&model, train, vocab, hp.max_len)?;
    let mut stopper = match hp.duration {
        Duration::EarlyStopping { patience, .. } => {
            if dev.is_none() {
                return Err(Error::Config("early stopping needs a dev set".into()));
            }
            Some(EarlyStopping::new("dev", patience)?)
        }
        Duration::Epochs(_) => None,
    };
    let steps_per_epoch = examples.len().div_ceil(hp.batch_size);
    let schedule = LinearSchedule::new(hp.learning_rate, hp.warmup_steps, steps_per_epoch * hp.max_epochs());
    let mut opt = AdamW::new(hp.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    let mut epoch_losses = Vec::new();
    let mut dev_history = Vec::new();
    let mut last_report = None;

    for epoch in 0..hp.max_epochs() {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            let items: Vec<&Prepared> = chunk.iter().map(|&i| &examples[i]).collect();
            let (batch, targets) = make_batch(kind, &items)?;
            if matches!(&targets, HeadTargets::Tokens(t) if t.is_empty()) {
                step += 1;
                continue;
            }
            let loss = model.loss_and_grads(&batch, &targets, Some(&mut rng))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    component: "task loss".into(),
                    step,
                });
            }
            total += loss * items.len() as f64;
            clip_grad_norm(model.params_mut().filter(|t| t.grad.is_some()), hp.clip_norm)?;
            opt.step(model.params_mut(), schedule.lr(step));
            step += 1;
        }
        epoch_losses.push(total / examples.len() as f64);

        if let Some(d) = dev {
            let report = evaluate(&model, d, vocab, hp.max_len)?;
            let value = report.primary();
            dev_history.push(value);
            last_report = Some(report);
            if let Some(s) = stopper.as_mut() {
                if s.observe(value, &model) {
                    return finish_early(
                        stopper.take().unwrap(),
                        model,
                        dev,
                        vocab,
                        hp,
                        epoch + 1,
                        epoch_losses,
                        dev_history,
                    );
                }
            }
        }
    }
    let epochs_run = hp.max_epochs();
    if let Some(s) = stopper {
        return finish_early(s, model, dev, vocab, hp, epochs_run, epoch_losses, dev_history);
    }
    Ok(FinetuneOutcome {
        model,
        dev_report: last_report,
        epochs_run,
        epoch_losses,
        dev_history,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_early(
    stopper: EarlyStopping,
    current: TaskModel,
    dev: Option<&Dataset>,
    vocab: &Vocab,
    hp: &FinetuneHyperparams,
    epochs_run: usize,
    epoch_losses: Vec<f64>,
    dev_history: Vec<f64>,
) -> Result<FinetuneOutcome> {
    let model = stopper.into_best().unwrap_or(current);
    let dev_report = match dev {
        Some(d) => Some(evaluate(&model, d, vocab, hp.max_len)?),
        None => None,
    };
    Ok(FinetuneOutcome {
        model,
        dev_report,
        epochs_run,
        epoch_losses,
        dev_history,
    })
}

/// Examples per forward pass during prediction.
const PREDICT_BATCH: usize = 32;

/// Deterministic predictions with dropout off. Tagging ids are
/// `sentence:word`; words lost to truncation get a uniform distribution.
pub fn predict(model: &TaskModel, data: &Dataset, vocab: &Vocab, max_len: usize) -> Result<PredictionSet> {
    let kind = model.kind();
    match data {
        Dataset::Tagging(sents) => {
            if !kind.is_token_level() {
                return Err(Error::Contract("a sequence-level head needs an example dataset".into()));
            }
            let n = kind.num_classes();
            let mut ids = Vec::new();
            let mut probs = Vec::new();
            let aligned = sents
                .iter()
                .map(|s| align_words(&s.words, vocab, max_len))
                .collect::<Result<Vec<_>>>()?;
            for (chunk_no, chunk) in aligned.chunks(PREDICT_BATCH).enumerate() {
                let encs: Vec<Encoding> = chunk.iter().map(|a| a.encoding.clone()).collect();
                let batch = Batch::from_encodings(&encs)?;
                let rows: Vec<usize> = chunk
                    .iter()
                    .enumerate()
                    .flat_map(|(b, a)| a.word_rows.iter().flatten().map(move |r| b * batch.seq_len + r))
                    .collect();
                let out = if rows.is_empty() {
                    None
                } else {
                    Some(model.probabilities(&batch, &rows)?)
                };
                let mut next = 0;
                for (b, a) in chunk.iter().enumerate() {
                    let sent = chunk_no * PREDICT_BATCH + b;
                    for (w, row) in a.word_rows.iter().enumerate() {
                        ids.push(format!("{sent}:{w}"));
                        match (row, &out) {
                            (Some(_), Some(t)) => {
                                probs.push(t.row(next).to_vec());
                                next += 1;
                            }
                            _ => probs.push(vec![1.0 / n as f64; n]),
                        }
                    }
                }
            }
            PredictionSet::classification(ids, probs)
        }
        Dataset::Examples(exs) => {
            if kind.is_token_level() {
                return Err(Error::Contract(
                    "a token-classification head needs a tagging dataset".into(),
                ));
            }
            let mut ids = Vec::with_capacity(exs.len());
            let mut outs = Vec::with_capacity(exs.len());
            for chunk in exs.chunks(PREDICT_BATCH) {
                let encs = chunk
                    .iter()
                    .map(|e| encode_example(e, vocab, max_len))
                    .collect::<Result<Vec<_>>>()?;
                let batch = Batch::from_encodings(&encs)?;
                let t = model.probabilities(&batch, &[])?;
                ids.extend(chunk.iter().map(|e| e.id.clone()));
                outs.extend(t.rows().map(|r| r.to_vec()));
            }
            match kind {
                TaskKind::BinaryClassification => {
                    let labels = outs.iter().map(|r| usize::from(r[0] > 0.5)).collect();
                    let probs = outs.iter().map(|r| vec![1.0 - r[0], r[0]]).collect();
                    PredictionSet::classification_with_labels(ids, labels, probs)
                }
                TaskKind::PairRegression => {
                    PredictionSet::regression(ids, outs.iter().map(|r| r[0] * SCORE_SCALE).collect())
                }
                _ => PredictionSet::classification(ids, outs),
            }
        }
    }
}

fn is_iob(labels: &[String]) -> bool {
    labels
        .iter()
        .all(|l| l == "O" || l.starts_with("B-") || l.starts_with("I-"))
}

/// Scores `preds` against the gold labels in `data`. `labels` names the
/// classes of a tagging head.
pub fn evaluate_predictions(preds: &PredictionSet, data: &Dataset, labels: &[String]) -> Result<TaskReport> {
    match data {
        Dataset::Tagging(sents) => {
            let words: usize = sents.iter().map(|s| s.words.len()).sum();
            if preds.labels.len() != words {
                return Err(Error::Alignment(format!(
                    "{} predictions for {words} tokens",
                    preds.labels.len()
                )));
            }
            let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
            let gold = sents
                .iter()
                .flat_map(|s| s.tags.iter())
                .map(|t| {
                    index
                        .get(t.as_str())
                        .copied()
                        .ok_or_else(|| Error::Data(format!("gold label `{t}` is not in the head's label set")))
                })
                .collect::<Result<Vec<_>>>()?;
            let report = ClassificationReport::compute(&gold, &preds.labels, labels.len())?;
            let (entities, strict) = if is_iob(labels) {
                let mut docs = Vec::with_capacity(sents.len());
                let mut at = 0;
                for s in sents {
                    let pred = preds.labels[at..at + s.words.len()]
                        .iter()
                        .map(|&i| labels[i].clone())
                        .collect();
                    at += s.words.len();
                    docs.push(NerDocument::new(s.words.clone(), s.tags.clone(), pred)?);
                }
                let scores = ner_schema_eval(&docs)?;
                (Some(scores.to_json()), Some(scores.strict.f1()))
            } else {
                (None, None)
            };
            Ok(TaskReport::Tagging {
                accuracy: report.accuracy,
                macro_f1: report.macro_f1,
                tokens: words,
                entities,
                entity_strict_f1: strict,
            })
        }
        Dataset::Examples(exs) => {
            if preds.len() != exs.len() {
                return Err(Error::Alignment(format!(
                    "{} predictions for {} examples",
                    preds.len(),
                    exs.len()
                )));
            }
            if let Some(i) = exs.iter().zip(&preds.ids).position(|(e, id)| e.id != *id) {
                return Err(Error::Alignment(format!(
                    "prediction {i} has id `{}` but the example is `{}`",
                    preds.ids[i], exs[i].id
                )));
            }
            match preds.kind {
                crate::loyalty::PredictionKind::Regression => {
                    let gold = exs
                        .iter()
                        .map(|e| match e.target {
                            Target::Score(s) => Ok(s),
                            Target::Class(_) => Err(Error::Data(format!("example `{}` has no score", e.id))),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(TaskReport::Regression(CorrelationReport::compute(
                        &gold,
                        &preds.scores,
                    )?))
                }
                crate::loyalty::PredictionKind::Classification => {
                    let gold = exs
                        .iter()
                        .map(|e| match e.target {
                            Target::Class(c) => Ok(c),
                            Target::Score(_) => Err(Error::Data(format!("example `{}` has no label", e.id))),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let n = preds.probabilities.first().map_or(0, Vec::len);
                    Ok(TaskReport::Classification(ClassificationReport::compute(
                        &gold,
                        &preds.labels,
                        n,
                    )?))
                }
            }
        }
    }
}

pub fn evaluate(model: &TaskModel, data: &Dataset, vocab: &Vocab, max_len: usize) -> Result<TaskReport> {
    let preds = predict(model, data, vocab, max_len)?;
    evaluate_predictions(&preds, data, &model.labels)
}

/// Mean and sample standard deviation of one metric over runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Aggregates per-run metric maps (e.g. one per seed) metric by metric.
pub fn summarize_runs(runs: &[BTreeMap<String, f64>]) -> BTreeMap<String, MetricSummary> {
    let mut by_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for (k, v) in run {
            by_metric.entry(k.clone()).or_default().push(*v);
        }
    }
    by_metric
        .into_iter()
        .map(|(k, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (
                k,
                MetricSummary {
                    mean,
                    std: var.sqrt(),
                    runs: v.len(),
                },
            )
        })
        .collect()
}
