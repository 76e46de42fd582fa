use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable naming the default configuration directory.
pub const CONFIG_DIR_ENV: &str = "KDLAB_CONFIG_DIR";

pub const TASK_NAMES: [&str; 7] = ["upos", "xpos", "ner", "sapn", "sar", "di", "sts"];

#[derive(Debug, Parser)]
#[command(
    name = "kdlab",
    version,
    about = "Knowledge distillation workbench for BERT-style encoders"
)]
pub struct Cli {
    /// Worker threads; recorded in every manifest.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Directory searched for `distill.toml`, `cleaning.toml` and
    /// `finetune-<task>.toml` when no explicit config is given.
    #[arg(long, global = true, env = CONFIG_DIR_ENV)]
    pub config_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter raw text lines and optionally merge-deduplicate several inputs.
    Clean(CleanArgs),
    /// Distil one or more teacher checkpoints into a shallower student.
    Distill(DistillArgs),
    /// Attach a task head to an encoder and fine-tune it.
    Finetune(FinetuneArgs),
    /// Write a prediction set for a dataset.
    Predict(PredictArgs),
    /// Score a task model or a prediction file against gold labels.
    Evaluate(EvaluateArgs),
    /// Compare student predictions with one or more teachers.
    Loyalty(LoyaltyArgs),
    /// Time forward passes over a sweep of sequence lengths.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    /// Vocabulary file, one token per line.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Lowercase text before WordPiece lookup.
    #[arg(long)]
    pub lowercase: bool,
}

#[derive(Debug, Args)]
pub struct CleanArgs {
    /// Raw text files, one sentence or paragraph per line.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Cleaned text to write.
    #[arg(long)]
    pub output: PathBuf,
    /// Cleaning rules (TOML).
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Merge the cleaned inputs, keeping the first copy of each line.
    #[arg(long)]
    pub dedup: bool,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Teacher checkpoint; repeat for an ensemble.
    #[arg(long = "teacher", required = true)]
    pub teachers: Vec<PathBuf>,
    #[command(flatten)]
    pub vocab: VocabArgs,
    /// Training text, one sequence per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Student checkpoint to write.
    #[arg(long)]
    pub output: PathBuf,
    /// Metrics CSV; defaults to `<output>.metrics.csv`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Distillation config (TOML); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Student depth; defaults to half the teacher's.
    #[arg(long)]
    pub student_layers: Option<usize>,
    /// Maximum tokens per training sequence.
    #[arg(long, default_value_t = 128)]
    pub max_len: usize,
    /// Weight of the soft-target loss; the three weights must sum to 1.
    #[arg(long)]
    pub lambda_kd: Option<f64>,
    /// Weight of the masked-language-model loss.
    #[arg(long)]
    pub lambda_mlm: Option<f64>,
    /// Weight of the hidden-state cosine loss.
    #[arg(long)]
    pub lambda_cos: Option<f64>,
    /// Softmax temperature applied to teacher and student logits.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Passes over the corpus.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Sequences per optimiser step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Seed for initialisation, masking and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Encoder checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub vocab: VocabArgs,
    /// Downstream task; selects the head and the hyperparameter preset.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(TASK_NAMES))]
    pub task: String,
    /// Training data: token TSV for tagging tasks, example TSV otherwise.
    #[arg(long)]
    pub train: PathBuf,
    /// Development data scored after training, in the same format as `--train`.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Task-model checkpoint; with several seeds, `<output>.seed<N>` each.
    #[arg(long)]
    pub output: PathBuf,
    /// Hyperparameter overrides (TOML) applied over the task preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of runs with consecutive seeds; reports mean and std.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    /// Seed of the first run.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Overrides the preset epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the preset batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Overrides the preset warmup steps.
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// Overrides the preset learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Overrides the preset, which is capped at the model's maximum position.
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Task-model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub vocab: VocabArgs,
    /// Dataset in the task's TSV format.
    #[arg(long)]
    pub data: PathBuf,
    /// Prediction TSV to write.
    #[arg(long)]
    pub output: PathBuf,
    /// Defaults to 128, capped at the model's maximum position.
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Task-model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub vocab: VocabArgs,
    /// Dataset in the task's TSV format.
    #[arg(long)]
    pub data: PathBuf,
    /// Score this prediction file instead of running the model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// JSON report; printed to stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Defaults to 128, capped at the model's maximum position.
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LoyaltyMetric {
    /// Whatever the prediction kind supports.
    All,
    /// Agreement of argmax labels.
    Label,
    /// One minus the Jensen-Shannon divergence.
    Probability,
    /// Pearson correlation of scores.
    Regression,
}

#[derive(Debug, Args)]
pub struct LoyaltyArgs {
    /// Teacher prediction TSV; repeat to average over teachers.
    #[arg(long = "teacher", required = true)]
    pub teachers: Vec<PathBuf>,
    /// Student prediction TSV.
    #[arg(long)]
    pub student: PathBuf,
    /// Which loyalty measure to report.
    #[arg(long, value_enum, default_value_t = LoyaltyMetric::All)]
    pub metric: LoyaltyMetric,
    /// JSON report; printed to stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Encoder checkpoint to time; repeatable.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Randomly initialised architecture `LAYERS,HIDDEN,HEADS`; repeatable.
    #[arg(long = "arch")]
    pub archs: Vec<String>,
    /// Vocabulary size for `--arch` models.
    #[arg(long, default_value_t = 1000)]
    pub vocab_size: usize,
    /// Sequence lengths to time, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = crate::bench::DEFAULT_LENGTHS)]
    pub lengths: Vec<usize>,
    /// Timed repetitions per length.
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    /// Untimed warm-up passes per length.
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Sequences per forward pass.
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Seed for `--arch` weights.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Results CSV.
    #[arg(long, default_value = "bench.csv")]
    pub output: PathBuf,
    /// Whitespace-separated `length median_ms` series per model.
    #[arg(long)]
    pub plot: Option<PathBuf>,
}
