use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::head::TaskKind;
use super::train::{Duration, FinetuneHyperparams};

/// Early-stopping patience, in dev evaluations, for similarity regression.
pub const STS_PATIENCE: usize = 3;
/// Epoch cap for early-stopped runs; also the learning-rate decay horizon.
pub const STS_MAX_EPOCHS: usize = 20;

/// Classes of the review-rating task.
pub const RATING_CLASSES: usize = 4;

/// The evaluation tasks with their heads and published hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Upos,
    Xpos,
    Ner,
    /// Positive / negative review sentiment.
    Sapn,
    /// Review rating.
    Sar,
    /// Dialect identification.
    Di,
    /// Sentence-pair similarity.
    Sts,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::Upos,
        Task::Xpos,
        Task::Ner,
        Task::Sapn,
        Task::Sar,
        Task::Di,
        Task::Sts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Upos => "upos",
            Task::Xpos => "xpos",
            Task::Ner => "ner",
            Task::Sapn => "sapn",
            Task::Sar => "sar",
            Task::Di => "di",
            Task::Sts => "sts",
        }
    }

    pub fn is_tagging(self) -> bool {
        matches!(self, Task::Upos | Task::Xpos | Task::Ner)
    }

    /// Head for this task; tagging tasks take their label count from data.
    pub fn kind(self, tag_labels: usize) -> Result<TaskKind> {
        match self {
            Task::Upos | Task::Xpos | Task::Ner => TaskKind::TokenClassification(tag_labels).validate(),
            Task::Sapn | Task::Di => Ok(TaskKind::BinaryClassification),
            Task::Sar => Ok(TaskKind::MultiClassClassification(RATING_CLASSES)),
            Task::Sts => Ok(TaskKind::PairRegression),
        }
    }

    /// Published fine-tuning settings for this task.
    pub fn preset(self) -> FinetuneHyperparams {
        match self {
            Task::Upos => FinetuneHyperparams::epochs(10, 16, 1000, 1e-4),
            Task::Xpos => FinetuneHyperparams::epochs(10, 16, 1000, 4e-5),
            Task::Ner => FinetuneHyperparams::epochs(15, 16, 500, 5e-5),
            Task::Sapn => FinetuneHyperparams::epochs(10, 16, 1000, 3e-5),
            Task::Sar => FinetuneHyperparams::epochs(10, 16, 1000, 5e-5),
            Task::Di => FinetuneHyperparams::epochs(5, 8, 1500, 5e-5),
            Task::Sts => FinetuneHyperparams {
                duration: Duration::EarlyStopping {
                    patience: STS_PATIENCE,
                    max_epochs: STS_MAX_EPOCHS,
                },
                batch_size: 256,
                warmup_steps: 0,
                learning_rate: 2e-5,
                ..FinetuneHyperparams::default()
            },
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown task `{s}` (expected one of upos, xpos, ner, sapn, sar, di, sts)"
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_table() {
        let ner = Task::Ner.preset();
        assert_eq!(ner.duration, Duration::Epochs(15));
        assert_eq!((ner.batch_size, ner.warmup_steps, ner.learning_rate), (16, 500, 5e-5));
        let di = Task::Di.preset();
        assert_eq!(
            (di.duration, di.batch_size, di.warmup_steps),
            (Duration::Epochs(5), 8, 1500)
        );
        let sts = Task::Sts.preset();
        assert!(matches!(sts.duration, Duration::EarlyStopping { patience: 3, .. }));
        assert_eq!((sts.batch_size, sts.warmup_steps, sts.learning_rate), (256, 0, 2e-5));
        for t in Task::ALL {
            t.preset().validate().unwrap();
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        assert!("pos".parse::<Task>().is_err());
    }

    #[test]
    fn heads_per_task() {
        assert_eq!(Task::Upos.kind(17).unwrap().outputs(), 17);
        assert_eq!(Task::Sar.kind(0).unwrap().outputs(), 4);
        assert_eq!(Task::Sts.kind(0).unwrap(), TaskKind::PairRegression);
        assert!(Task::Ner.kind(1).is_err());
    }
}
