//! Distillation engine: student initialisation, MLM masking, the weighted
//! KD / MLM / cosine loss and the pre-training loop.

mod config;
mod loss;
mod masking;
mod train;

pub use config::DistillConfig;
pub use loss::{
    check_compatible, cos_align_loss, ensemble_losses, frozen_view, kd_loss, mlm_loss, model_view, tempered_entropy,
    total_loss, total_loss_value, EnsembleLosses, LossParts, ModelView, ScopedLoss,
};
pub use masking::{mask_batch, MaskedBatch, MASK_TOKEN_SHARE, RANDOM_TOKEN_SHARE};
pub use train::{train_distill, write_metrics_csv, DistillOutcome, StepMetrics};

use crate::encoder::{EncoderModel, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::ParamStore;

/// Teacher layer copied into student layer `j`.
pub fn source_layer(j: usize) -> usize {
    2 * j
}

/// A student with `student_layers` layers seeded from every other teacher
/// layer (0, 2, 4, …); embeddings, pooler and MLM head copied verbatim.
pub fn init_student(teacher: &EncoderModel, student_layers: usize) -> Result<EncoderModel> {
    let config = ModelConfig {
        num_layers: student_layers,
        ..teacher.config().clone()
    };
    init_student_from(teacher, &config)
}

/// Like [`init_student`] with an explicit student architecture, which must
/// match the teacher in everything but depth.
pub fn init_student_from(teacher: &EncoderModel, student: &ModelConfig) -> Result<EncoderModel> {
    let t = teacher.config();
    if student.num_layers == 0 {
        return Err(Error::Config("student needs at least one layer".into()));
    }
    if 2 * student.num_layers > t.num_layers {
        return Err(Error::Config(format!(
            "a {}-layer student cannot take every other layer of a {}-layer teacher",
            student.num_layers, t.num_layers
        )));
    }
    let same_shape = ModelConfig {
        num_layers: t.num_layers,
        dropout: t.dropout,
        ..student.clone()
    };
    if same_shape != *t {
        return Err(Error::Config(format!(
            "student architecture (hidden {}, heads {}, intermediate {}, vocab {}) differs from teacher (hidden {}, heads {}, intermediate {}, vocab {})",
            student.hidden, student.num_heads, student.intermediate, student.vocab_size,
            t.hidden, t.num_heads, t.intermediate, t.vocab_size
        )));
    }
    let src = &teacher.params;
    let mut store = ParamStore::new();
    let mut copy = |i: usize, name: String| store.push(name, src.tensor(i).clone());
    for i in teacher.embedding_range() {
        copy(i, src.names()[i].clone());
    }
    for j in 0..student.num_layers {
        let from = format!("layer.{}.", source_layer(j));
        let to = format!("layer.{j}.");
        for i in teacher.layer_range(source_layer(j)) {
            copy(i, src.names()[i].replacen(&from, &to, 1));
        }
    }
    for i in teacher.head_range() {
        copy(i, src.names()[i].clone());
    }
    EncoderModel::from_params(student.clone(), store)
}
