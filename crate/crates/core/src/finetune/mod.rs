//! Task heads, fine-tuning with AdamW and linear warmup/decay, prediction
//! and evaluation for tagging, classification and similarity tasks.

mod data;
mod head;
mod task;
mod train;

pub use data::{align_words, encode_example, AlignedSentence, Dataset, TaggedSentence, Target, TextExample};
pub use head::{attach_head, HeadTargets, TaskHead, TaskKind, TaskModel, HEAD_DROPOUT};
pub use task::{Task, RATING_CLASSES, STS_MAX_EPOCHS, STS_PATIENCE};
pub use train::{
    evaluate, evaluate_predictions, finetune, predict, summarize_runs, Duration, EarlyStopping, FinetuneHyperparams,
    FinetuneOutcome, MetricSummary, TaskReport, SCORE_SCALE,
};
