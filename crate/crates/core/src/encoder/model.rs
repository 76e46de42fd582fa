use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, ParamBreakdown};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Bound, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::Encoding;

/// Initializer standard deviation for weight matrices.
pub const INIT_STD: f64 = 0.02;

const EMBEDDING_TENSORS: usize = 5;
const LAYER_TENSORS: usize = 16;

const TOKEN_EMBEDDING: usize = 0;
const POSITION_EMBEDDING: usize = 1;
const SEGMENT_EMBEDDING: usize = 2;
const EMBEDDING_NORM: usize = 3;

/// Offsets inside one layer's block of tensors.
mod slot {
    pub const QUERY: usize = 0;
    pub const KEY: usize = 2;
    pub const VALUE: usize = 4;
    pub const ATTN_OUT: usize = 6;
    pub const ATTN_NORM: usize = 8;
    pub const FFN_IN: usize = 10;
    pub const FFN_OUT: usize = 12;
    pub const FFN_NORM: usize = 14;
}

/// Token ids, segments and padding mask of a batch of equal-length encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    /// `true` at real (non-padding) positions.
    pub mask: Vec<bool>,
    pub size: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn from_encodings(encs: &[Encoding]) -> Result<Self> {
        let first = encs.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let seq_len = first.len();
        if seq_len == 0 {
            return Err(Error::Contract("zero-length encoding".into()));
        }
        let mut b = Batch {
            ids: Vec::with_capacity(encs.len() * seq_len),
            segments: Vec::with_capacity(encs.len() * seq_len),
            mask: Vec::with_capacity(encs.len() * seq_len),
            size: encs.len(),
            seq_len,
        };
        for e in encs {
            if e.len() != seq_len {
                return Err(Error::Contract(format!(
                    "batch mixes sequence lengths {seq_len} and {}",
                    e.len()
                )));
            }
            b.ids.extend(&e.ids);
            b.segments.extend(&e.segment_ids);
            b.mask.extend(e.attention_mask.iter().map(|&m| m == 1));
        }
        Ok(b)
    }

    /// Flat indices of the `[CLS]` rows.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.size).map(|i| i * self.seq_len).collect()
    }

    /// Flat indices of every non-padding position.
    pub fn real_rows(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }
}

/// Dropout is active only in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => tape.dropout(x, p, *rng),
        }
    }
}

/// Per-layer hidden states (`[batch, seq, hidden]`, embedding output first)
/// and attention probabilities (`[batch, heads, seq, seq]`).
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub hidden_states: Vec<Var>,
    pub attentions: Vec<Var>,
}

impl ForwardOutput {
    pub fn last_hidden(&self) -> Var {
        *self.hidden_states.last().unwrap()
    }
}

/// Post-layer-norm BERT encoder with pooler and weight-tied MLM head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: ModelConfig,
    pub params: ParamStore,
}

/// Names and shapes of every tensor, in storage order.
pub(crate) fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (h, i) = (c.hidden, c.intermediate);
    let mut out = vec![
        ("embeddings.token".into(), vec![c.vocab_size, h]),
        ("embeddings.position".into(), vec![c.max_position, h]),
        ("embeddings.segment".into(), vec![c.type_vocab, h]),
        ("embeddings.norm.gamma".into(), vec![h]),
        ("embeddings.norm.beta".into(), vec![h]),
    ];
    for l in 0..c.num_layers {
        let p = |s: &str| format!("layer.{l}.{s}");
        out.extend([
            (p("attention.query.weight"), vec![h, h]),
            (p("attention.query.bias"), vec![h]),
            (p("attention.key.weight"), vec![h, h]),
            (p("attention.key.bias"), vec![h]),
            (p("attention.value.weight"), vec![h, h]),
            (p("attention.value.bias"), vec![h]),
            (p("attention.output.weight"), vec![h, h]),
            (p("attention.output.bias"), vec![h]),
            (p("attention.norm.gamma"), vec![h]),
            (p("attention.norm.beta"), vec![h]),
            (p("ffn.in.weight"), vec![h, i]),
            (p("ffn.in.bias"), vec![i]),
            (p("ffn.out.weight"), vec![i, h]),
            (p("ffn.out.bias"), vec![h]),
            (p("ffn.norm.gamma"), vec![h]),
            (p("ffn.norm.beta"), vec![h]),
        ]);
    }
    out.extend([
        ("pooler.weight".into(), vec![h, h]),
        ("pooler.bias".into(), vec![h]),
        ("mlm.transform.weight".into(), vec![h, h]),
        ("mlm.transform.bias".into(), vec![h]),
        ("mlm.norm.gamma".into(), vec![h]),
        ("mlm.norm.beta".into(), vec![h]),
        ("mlm.output_bias".into(), vec![c.vocab_size]),
    ]);
    out
}

/// Draws from `N(0, std²)` truncated to ±2 std.
pub(crate) fn truncated_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).unwrap();
    (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect()
}

impl EncoderModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in layout(&config) {
            let n = shape.iter().product();
            let data = if shape.len() == 2 {
                truncated_normal(&mut rng, n, INIT_STD)
            } else if name.ends_with("gamma") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            params.push(name, Tensor::new(&shape, data)?);
        }
        Ok(Self { config, params })
    }

    /// Wraps tensors that already follow [`layout`].
    pub(crate) fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let want = layout(&config);
        if want.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                want.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, t)) in want.iter().zip(params.names().iter().zip(params.tensors())) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor `{got_name}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Embeddings plus encoder layers, counted from the stored tensors.
    pub fn count_params(&self) -> usize {
        self.breakdown().backbone()
    }

    /// Per-component counts summed over the stored tensors.
    pub fn breakdown(&self) -> ParamBreakdown {
        let t = self.params.tensors();
        let sum = |r: std::ops::Range<usize>| t[r].iter().map(Tensor::numel).sum::<usize>();
        let enc_end = EMBEDDING_TENSORS + LAYER_TENSORS * self.config.num_layers;
        ParamBreakdown {
            embeddings: sum(0..EMBEDDING_TENSORS),
            encoder: sum(EMBEDDING_TENSORS..enc_end),
            pooler: sum(enc_end..enc_end + 2),
            mlm_head: sum(enc_end + 2..t.len()),
        }
    }

    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = EMBEDDING_TENSORS + LAYER_TENSORS * layer;
        start..start + LAYER_TENSORS
    }

    pub fn embedding_range(&self) -> std::ops::Range<usize> {
        0..EMBEDDING_TENSORS
    }

    /// Pooler and MLM head tensors.
    pub fn head_range(&self) -> std::ops::Range<usize> {
        let start = EMBEDDING_TENSORS + LAYER_TENSORS * self.config.num_layers;
        start..self.params.len()
    }

    fn pooler_index(&self) -> usize {
        self.head_range().start
    }

    pub fn token_embedding(&self) -> &Tensor {
        self.params.tensor(TOKEN_EMBEDDING)
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.params.bind_frozen(tape)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &Batch, mut mode: Mode<'_>) -> Result<ForwardOutput> {
        let c = &self.config;
        let (b, s, h) = (batch.size, batch.seq_len, c.hidden);
        if s > c.max_position {
            return Err(Error::Input(format!(
                "sequence length {s} exceeds max_position {}",
                c.max_position
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&i| i as usize >= c.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {}",
                c.vocab_size
            )));
        }
        if let Some(&bad) = batch.segments.iter().find(|&&i| i as usize >= c.type_vocab) {
            return Err(Error::Input(format!("segment id {bad} out of range")));
        }
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let segments: Vec<usize> = batch.segments.iter().map(|&i| i as usize).collect();

        let tok = tape.gather_rows(p[TOKEN_EMBEDDING], &ids)?;
        let pos = tape.gather_rows(p[POSITION_EMBEDDING], &positions)?;
        let seg = tape.gather_rows(p[SEGMENT_EMBEDDING], &segments)?;
        let x = tape.weighted_sum(&[(tok, 1.0), (pos, 1.0), (seg, 1.0)])?;
        let x = tape.layer_norm(x, p[EMBEDDING_NORM], p[EMBEDDING_NORM + 1])?;
        let mut x = mode.dropout(tape, x, c.dropout)?;

        let mut hidden_states = vec![tape.reshape(x, &[b, s, h])?];
        let mut attentions = Vec::with_capacity(c.num_layers);
        for l in 0..c.num_layers {
            let base = EMBEDDING_TENSORS + LAYER_TENSORS * l;
            let w = |off: usize| p[base + off];
            let (heads, d) = (c.num_heads, c.head_dim());

            let split = |tape: &mut Tape, off: usize| -> Result<Var> {
                let y = tape.linear(x, w(off), Some(w(off + 1)))?;
                let y = tape.reshape(y, &[b, s, heads, d])?;
                let y = tape.permute_0213(y)?;
                tape.reshape(y, &[b * heads, s, d])
            };
            let q = split(tape, slot::QUERY)?;
            let k = split(tape, slot::KEY)?;
            let v = split(tape, slot::VALUE)?;

            let scores = tape.bmm(q, k, false, true)?;
            let scores = tape.reshape(scores, &[b, heads, s, s])?;
            let probs = tape.masked_softmax(scores, &batch.mask, 1.0 / (d as f64).sqrt())?;
            attentions.push(probs);
            let probs = mode.dropout(tape, probs, c.dropout)?;
            let probs = tape.reshape(probs, &[b * heads, s, s])?;
            let ctx = tape.bmm(probs, v, false, false)?;
            let ctx = tape.reshape(ctx, &[b, heads, s, d])?;
            let ctx = tape.permute_0213(ctx)?;
            let ctx = tape.reshape(ctx, &[b * s, h])?;

            let attn = tape.linear(ctx, w(slot::ATTN_OUT), Some(w(slot::ATTN_OUT + 1)))?;
            let attn = mode.dropout(tape, attn, c.dropout)?;
            let res = tape.add(attn, x)?;
            let y = tape.layer_norm(res, w(slot::ATTN_NORM), w(slot::ATTN_NORM + 1))?;

            let ff = tape.linear(y, w(slot::FFN_IN), Some(w(slot::FFN_IN + 1)))?;
            let ff = tape.activation(ff, Activation::Gelu)?;
            let ff = tape.linear(ff, w(slot::FFN_OUT), Some(w(slot::FFN_OUT + 1)))?;
            let ff = mode.dropout(tape, ff, c.dropout)?;
            let res = tape.add(ff, y)?;
            x = tape.layer_norm(res, w(slot::FFN_NORM), w(slot::FFN_NORM + 1))?;
            hidden_states.push(tape.reshape(x, &[b, s, h])?);
        }
        Ok(ForwardOutput {
            hidden_states,
            attentions,
        })
    }

    /// `tanh(W·h_[CLS] + b)` per example.
    pub fn pool(&self, tape: &mut Tape, p: &Bound, last_hidden: Var, batch: &Batch) -> Result<Var> {
        let flat = self.flatten_hidden(tape, last_hidden)?;
        let cls = tape.gather_rows(flat, &batch.cls_rows())?;
        let i = self.pooler_index();
        let y = tape.linear(cls, p[i], Some(p[i + 1]))?;
        tape.activation(y, Activation::Tanh)
    }

    fn flatten_hidden(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let shape = tape.shape(hidden).to_vec();
        let h = self.config.hidden;
        if shape.last() != Some(&h) {
            return Err(Error::dim("mlm_logits", &shape, &[h]));
        }
        let n = shape.iter().product::<usize>() / h;
        tape.reshape(hidden, &[n, h])
    }

    /// Vocabulary logits for every position of `hidden: [..., hidden]`.
    pub fn mlm_logits(&self, tape: &mut Tape, p: &Bound, hidden: Var) -> Result<Var> {
        let shape = tape.shape(hidden).to_vec();
        let flat = self.flatten_hidden(tape, hidden)?;
        let logits = self.project_vocab(tape, p, flat)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.config.vocab_size;
        tape.reshape(logits, &out_shape)
    }

    /// Vocabulary logits `[rows.len(), vocab]` at selected flat positions.
    pub fn mlm_logits_at(&self, tape: &mut Tape, p: &Bound, hidden: Var, rows: &[usize]) -> Result<Var> {
        let flat = self.flatten_hidden(tape, hidden)?;
        let picked = tape.gather_rows(flat, rows)?;
        self.project_vocab(tape, p, picked)
    }

    fn project_vocab(&self, tape: &mut Tape, p: &Bound, flat: Var) -> Result<Var> {
        let (h, v) = (self.config.hidden, self.config.vocab_size);
        let i = self.pooler_index() + 2;
        let t = tape.linear(flat, p[i], Some(p[i + 1]))?;
        let t = tape.activation(t, Activation::Gelu)?;
        let t = tape.layer_norm(t, p[i + 2], p[i + 3])?;
        let n = tape.shape(t)[0];
        let t = tape.reshape(t, &[1, n, h])?;
        let table = tape.reshape(p[TOKEN_EMBEDDING], &[1, v, h])?;
        let logits = tape.bmm(t, table, false, true)?;
        let logits = tape.reshape(logits, &[n, v])?;
        tape.add_bias(logits, p[i + 4])
    }

    /// Evaluation-mode hidden states of every layer as plain tensors.
    pub fn hidden_states(&self, encs: &[Encoding]) -> Result<Vec<Tensor>> {
        let batch = Batch::from_encodings(encs)?;
        let mut tape = Tape::no_grad();
        let p = self.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, &batch, Mode::Eval)?;
        Ok(out.hidden_states.iter().map(|&v| tape.value(v).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::new(2, 8, 2, 12).with_max_position(6).with_dropout(0.0)
    }

    fn enc(ids: &[u32], real: usize) -> Encoding {
        Encoding {
            ids: ids.to_vec(),
            attention_mask: (0..ids.len()).map(|i| u8::from(i < real)).collect(),
            segment_ids: vec![0; ids.len()],
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = EncoderModel::new(tiny(), 7).unwrap();
        let b = EncoderModel::new(tiny(), 7).unwrap();
        for (x, y) in a.params.tensors().iter().zip(b.params.tensors()) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let c = EncoderModel::new(tiny(), 8).unwrap();
        assert_ne!(a.params.tensor(0).data(), c.params.tensor(0).data());
    }

    #[test]
    fn initialization_is_truncated() {
        let m = EncoderModel::new(tiny(), 1).unwrap();
        let w = m.params.tensor(TOKEN_EMBEDDING);
        assert!(w.data().iter().all(|x| x.abs() <= 2.0 * INIT_STD));
    }

    #[test]
    fn stored_count_matches_closed_form() {
        let m = EncoderModel::new(tiny(), 1).unwrap();
        assert_eq!(m.breakdown(), tiny().param_breakdown());
        assert_eq!(m.breakdown().total(), m.params.numel());
    }

    #[test]
    fn forward_shapes_and_attention_rows() {
        let m = EncoderModel::new(tiny(), 3).unwrap();
        let batch = Batch::from_encodings(&[enc(&[2, 3, 0, 0, 0, 0], 2)]).unwrap();
        let mut tape = Tape::no_grad();
        let p = m.bind(&mut tape);
        let out = m.forward(&mut tape, &p, &batch, Mode::Eval).unwrap();
        assert_eq!(out.hidden_states.len(), 3);
        for &hs in &out.hidden_states {
            assert_eq!(tape.shape(hs), &[1, 6, 8]);
        }
        for &a in &out.attentions {
            for row in tape.value(a).rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let logits = m.mlm_logits(&mut tape, &p, out.last_hidden()).unwrap();
        assert_eq!(tape.shape(logits), &[1, 6, 12]);
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let m = EncoderModel::new(tiny(), 3).unwrap();
        let batch = Batch::from_encodings(&[enc(&[2, 99, 0], 3)]).unwrap();
        let mut tape = Tape::no_grad();
        let p = m.bind(&mut tape);
        assert!(matches!(
            m.forward(&mut tape, &p, &batch, Mode::Eval),
            Err(Error::Input(_))
        ));
        let long = Batch::from_encodings(&[enc(&[1; 7], 7)]).unwrap();
        assert!(matches!(
            m.forward(&mut tape, &p, &long, Mode::Eval),
            Err(Error::Input(_))
        ));
    }
}
