//! Miniature BERT-style encoder: configuration, forward pass, MLM head,
//! parameter accounting and checkpoints.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{read_store, write_store, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, ParamBreakdown};
pub(crate) use model::truncated_normal;
pub use model::{Batch, EncoderModel, ForwardOutput, Mode, INIT_STD};

/// Model-size table configurations: `(label, layers, hidden, heads, vocab,
/// reported parameters)`.
pub const REFERENCE_CONFIGS: [(&str, usize, usize, usize, usize, usize); 8] = [
    ("mBERT", 12, 768, 12, 120_000, 177_000_000),
    ("BERT-base-ro", 12, 768, 12, 50_000, 124_000_000),
    ("RoBERT-small", 12, 256, 8, 38_000, 19_000_000),
    ("RoBERT-base", 12, 768, 12, 38_000, 114_000_000),
    ("RoBERT-large", 24, 1024, 16, 38_000, 341_000_000),
    ("Distil-BERT-base-ro", 6, 768, 12, 50_000, 81_000_000),
    ("Distil-RoBERT-base", 6, 768, 12, 38_000, 72_000_000),
    ("DistilMulti-BERT-base-ro", 6, 768, 12, 50_000, 81_000_000),
];
