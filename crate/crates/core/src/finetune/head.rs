use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{read_store, truncated_normal, write_store, Batch, EncoderModel, Mode, ModelConfig, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Bound, ParamStore, Tape, Tensor, Var};

/// Dropout applied before every task head.
pub const HEAD_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TokenClassification(usize),
    BinaryClassification,
    MultiClassClassification(usize),
    PairRegression,
}

impl TaskKind {
    pub fn validate(self) -> Result<Self> {
        match self {
            TaskKind::TokenClassification(n) | TaskKind::MultiClassClassification(n) if n < 2 => Err(Error::Config(
                format!("a classification head needs at least 2 labels, got {n}"),
            )),
            k => Ok(k),
        }
    }

    /// Width of the head's linear layer.
    pub fn outputs(self) -> usize {
        match self {
            TaskKind::TokenClassification(n) | TaskKind::MultiClassClassification(n) => n,
            TaskKind::BinaryClassification | TaskKind::PairRegression => 1,
        }
    }

    /// Number of classes a prediction distributes over; 0 for regression.
    pub fn num_classes(self) -> usize {
        match self {
            TaskKind::BinaryClassification => 2,
            TaskKind::PairRegression => 0,
            k => k.outputs(),
        }
    }

    pub fn is_token_level(self) -> bool {
        matches!(self, TaskKind::TokenClassification(_))
    }
}

/// Supervision for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadTargets {
    /// `(flat row, class)` pairs at labelled token positions.
    Tokens(Vec<(usize, usize)>),
    Classes(Vec<usize>),
    /// 0 / 1 per example.
    Binary(Vec<f64>),
    /// Targets already scaled into `[0, 1]`.
    Scores(Vec<f64>),
}

/// Linear projection `W`, `b` over per-token states or the `[CLS]` state.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub kind: TaskKind,
    pub dropout: f64,
    pub params: ParamStore,
}

impl TaskHead {
    pub fn new(kind: TaskKind, hidden: usize, seed: u64) -> Result<Self> {
        let kind = kind.validate()?;
        let out = kind.outputs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.push(
            "head.weight",
            Tensor::new(&[hidden, out], truncated_normal(&mut rng, hidden * out, INIT_STD))?,
        );
        params.push("head.bias", Tensor::zeros(&[out]));
        Ok(Self {
            kind,
            dropout: HEAD_DROPOUT,
            params,
        })
    }
}

/// An encoder with a task head and the head's label names.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub encoder: EncoderModel,
    pub head: TaskHead,
    /// Index → label name. Empty for regression.
    pub labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TaskModelMeta {
    model: ModelConfig,
    kind: TaskKind,
    labels: Vec<String>,
    dropout: f64,
}

/// Adds a freshly initialised head to `model`. Labels default to the class
/// indices when `labels` is empty.
pub fn attach_head(model: EncoderModel, kind: TaskKind, labels: Vec<String>, seed: u64) -> Result<TaskModel> {
    let head = TaskHead::new(kind, model.config().hidden, seed)?;
    let n = kind.num_classes();
    let labels = if labels.is_empty() {
        (0..n).map(|i| i.to_string()).collect()
    } else {
        labels
    };
    if labels.len() != n {
        return Err(Error::Config(format!(
            "{} label names for a head with {n} classes",
            labels.len()
        )));
    }
    Ok(TaskModel {
        encoder: model,
        head,
        labels,
    })
}

impl TaskModel {
    pub fn kind(&self) -> TaskKind {
        self.head.kind
    }

    /// Raw head output: per-token scores after LeakyReLU `[rows, C]`,
    /// class logits `[B, C]`, or one logit per example `[B, 1]`.
    fn head_output(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        token_rows: &[usize],
        rng: Option<&mut ChaCha8Rng>,
        frozen: bool,
    ) -> Result<(Var, Bound, Bound)> {
        let enc_p = if frozen {
            self.encoder.bind_frozen(tape)
        } else {
            self.encoder.bind(tape)
        };
        let head_p = if frozen {
            self.head.params.bind_frozen(tape)
        } else {
            self.head.params.bind(tape)
        };
        let (mode, head_rng) = match rng {
            Some(r) => {
                let head_rng = ChaCha8Rng::seed_from_u64(r.random());
                (Mode::Train(r), Some(head_rng))
            }
            None => (Mode::Eval, None),
        };
        let out = self.encoder.forward(tape, &enc_p, batch, mode)?;
        let h = self.encoder.config().hidden;
        let flat = tape.reshape(out.last_hidden(), &[batch.size * batch.seq_len, h])?;
        let rows = if self.kind().is_token_level() {
            token_rows.to_vec()
        } else {
            batch.cls_rows()
        };
        let x = tape.gather_rows(flat, &rows)?;
        let x = match head_rng {
            Some(mut r) => tape.dropout(x, self.head.dropout, &mut r)?,
            None => x,
        };
        let y = tape.linear(x, head_p[0], Some(head_p[1]))?;
        let y = if self.kind().is_token_level() {
            tape.activation(y, Activation::LeakyRelu)?
        } else {
            y
        };
        Ok((y, enc_p, head_p))
    }

    fn loss_var(&self, tape: &mut Tape, out: Var, targets: &HeadTargets) -> Result<Var> {
        match (self.kind(), targets) {
            (TaskKind::TokenClassification(_), HeadTargets::Tokens(t)) => {
                let classes: Vec<usize> = t.iter().map(|&(_, c)| c).collect();
                tape.cross_entropy(out, &classes)
            }
            (TaskKind::MultiClassClassification(_), HeadTargets::Classes(c)) => tape.cross_entropy(out, c),
            (TaskKind::BinaryClassification, HeadTargets::Binary(y)) => tape.bce_with_logits(out, y),
            (TaskKind::PairRegression, HeadTargets::Scores(y)) => {
                let p = tape.activation(out, Activation::Sigmoid)?;
                tape.mse(p, y)
            }
            (k, _) => Err(Error::Contract(format!("targets do not match a {k:?} head"))),
        }
    }

    fn token_rows(targets: &HeadTargets) -> Vec<usize> {
        match targets {
            HeadTargets::Tokens(t) => t.iter().map(|&(r, _)| r).collect(),
            _ => Vec::new(),
        }
    }

    /// Loss of one batch with dropout off.
    pub fn loss_value(&self, batch: &Batch, targets: &HeadTargets) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let (out, ..) = self.head_output(&mut tape, batch, &Self::token_rows(targets), None, true)?;
        let loss = self.loss_var(&mut tape, out, targets)?;
        Ok(tape.value(loss).item())
    }

    /// Loss of one batch; stores gradients on every encoder and head tensor.
    /// Dropout is active when `rng` is given.
    pub fn loss_and_grads(
        &mut self,
        batch: &Batch,
        targets: &HeadTargets,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let (out, bound_enc, bound_head) =
            self.head_output(&mut tape, batch, &Self::token_rows(targets), rng, false)?;
        let loss = self.loss_var(&mut tape, out, targets)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        self.encoder.params.zero_grad();
        self.head.params.zero_grad();
        self.encoder.params.absorb(&grads, &bound_enc);
        self.head.params.absorb(&grads, &bound_head);
        Ok(value)
    }

    /// Head outputs turned into probabilities: per-token or per-example class
    /// distributions, or the sigmoid value `[B, 1]` for binary and regression.
    pub fn probabilities(&self, batch: &Batch, token_rows: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let (out, ..) = self.head_output(&mut tape, batch, token_rows, None, true)?;
        let y = match self.kind() {
            TaskKind::TokenClassification(_) | TaskKind::MultiClassClassification(_) => tape.softmax(out, 1.0)?,
            _ => tape.activation(out, Activation::Sigmoid)?,
        };
        Ok(tape.value(y).clone())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.encoder.params.iter_mut().chain(self.head.params.iter_mut())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let meta = TaskModelMeta {
            model: self.encoder.config().clone(),
            kind: self.kind(),
            labels: self.labels.clone(),
            dropout: self.head.dropout,
        };
        let json = serde_json::to_string(&meta).expect("metadata serializes");
        let mut store = self.encoder.params.clone();
        for (name, t) in self.head.params.names().iter().zip(self.head.params.tensors()) {
            store.push(name.clone(), t.clone());
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        write_store(BufWriter::new(file), &json, &store).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let (json, store) = read_store(BufReader::new(file))?;
        let meta: TaskModelMeta =
            serde_json::from_str(&json).map_err(|e| Error::Format(format!("not a task-model checkpoint: {e}")))?;
        let kind = meta.kind.validate()?;
        if store.len() < 2 {
            return Err(Error::Format("checkpoint lacks head tensors".into()));
        }
        let split = store.len() - 2;
        let mut enc = ParamStore::new();
        let mut head = ParamStore::new();
        for (i, (name, t)) in store.names().iter().zip(store.tensors()).enumerate() {
            if i < split {
                enc.push(name.clone(), t.clone());
            } else {
                head.push(name.clone(), t.clone());
            }
        }
        let h = meta.model.hidden;
        let want_w = [h, kind.outputs()];
        if head.names() != ["head.weight", "head.bias"]
            || head.tensor(0).shape() != want_w
            || head.tensor(1).shape() != [kind.outputs()]
        {
            return Err(Error::Format("head tensors do not match the task kind".into()));
        }
        let encoder = EncoderModel::from_params(meta.model, enc)?;
        Ok(TaskModel {
            encoder,
            head: TaskHead {
                kind,
                dropout: meta.dropout,
                params: head,
            },
            labels: meta.labels,
        })
    }
}
