//! The `kdlab` command line: argument parsing, config resolution and one
//! function per subcommand. Every command that writes files also writes a
//! [`RunManifest`] next to its primary output.

mod args;
mod manifest;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

pub use args::{
    BenchArgs, CleanArgs, Cli, Command, DistillArgs, EvaluateArgs, FinetuneArgs, LoyaltyArgs, LoyaltyMetric,
    PredictArgs, VocabArgs, CONFIG_DIR_ENV, TASK_NAMES,
};
pub use manifest::{file_sha256, Artifact, RunManifest};

use crate::bench::{run_plan, BenchModel, BenchPlan};
use crate::corpus::{clean_file, corpus_stats, dedup_merge, CleaningRules};
use crate::distill::{init_student, train_distill, write_metrics_csv, DistillConfig};
use crate::encoder::{EncoderModel, ModelConfig};
use crate::error::{Error, Result};
use crate::finetune::{
    attach_head, evaluate_predictions, finetune, predict, summarize_runs, Dataset, FinetuneHyperparams, Task, TaskModel,
};
use crate::loyalty::{label_loyalty, multi_teacher_loyalty, probability_loyalty, regression_loyalty, PredictionSet};
use crate::tokenizer::{encode_pair, Casing, Vocab};

const DEFAULT_MAX_LEN: usize = 128;

/// Parses `args` (program name first), runs the command and maps the
/// outcome to an exit status. Errors go to stderr.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Runs a parsed command, writing reports to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Clean(a) => cmd_clean(cli, a, out),
        Command::Distill(a) => cmd_distill(cli, a, out),
        Command::Finetune(a) => cmd_finetune(cli, a, out),
        Command::Predict(a) => cmd_predict(cli, a, out),
        Command::Evaluate(a) => cmd_evaluate(cli, a, out),
        Command::Loyalty(a) => cmd_loyalty(cli, a, out),
        Command::Bench(a) => cmd_bench(cli, a, out),
    }
}

fn emit(out: &mut dyn Write, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// An explicit config path, else `<config dir>/<name>` when that exists.
fn config_path(explicit: Option<&PathBuf>, cli: &Cli, name: &str) -> Option<PathBuf> {
    explicit
        .cloned()
        .or_else(|| cli.config_dir.as_ref().map(|d| d.join(name)).filter(|p| p.is_file()))
}

fn load_vocab(a: &VocabArgs) -> Result<Vocab> {
    let casing = if a.lowercase { Casing::Uncased } else { Casing::Cased };
    Vocab::load(&a.vocab, casing)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn cmd_clean(cli: &Cli, a: &CleanArgs, out: &mut dyn Write) -> Result<()> {
    let rules_path = config_path(a.rules.as_ref(), cli, "cleaning.toml");
    let rules = match &rules_path {
        Some(p) => CleaningRules::load(p)?,
        None => CleaningRules::default(),
    };
    rules.validate()?;
    for p in &a.inputs {
        if !p.is_file() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "input not found"),
            ));
        }
    }
    let mut reports = Vec::new();
    if a.inputs.len() == 1 && !a.dedup {
        reports.push(clean_file(&a.inputs[0], &a.output, &rules)?);
    } else {
        let parts: Vec<PathBuf> = (0..a.inputs.len())
            .map(|i| with_suffix(&a.output, &format!(".part{i}")))
            .collect();
        let result = (|| -> Result<()> {
            for (input, part) in a.inputs.iter().zip(&parts) {
                reports.push(clean_file(input, part, &rules)?);
            }
            if a.dedup {
                dedup_merge(&parts, &a.output)?;
            } else {
                let mut w = BufWriter::new(File::create(&a.output).map_err(|e| Error::io(&a.output, e))?);
                for part in &parts {
                    let mut r = File::open(part).map_err(|e| Error::io(part, e))?;
                    std::io::copy(&mut r, &mut w).map_err(|e| Error::io(&a.output, e))?;
                }
                w.flush().map_err(|e| Error::io(&a.output, e))?;
            }
            Ok(())
        })();
        for part in &parts {
            let _ = std::fs::remove_file(part);
        }
        result?;
    }
    let stats = corpus_stats(&a.output)?;

    let mut m = RunManifest::new(
        "clean",
        json!({ "rules": rules, "rules_file": rules_path, "dedup": a.dedup }),
        None,
        cli.threads,
    );
    for p in &a.inputs {
        m.input(p)?;
    }
    m.output(&a.output)?;
    m.write_next_to(&a.output)?;
    emit(out, &json!({ "reports": reports, "stats": stats }))
}

fn resolve_distill_config(cli: &Cli, a: &DistillArgs) -> Result<(DistillConfig, Option<PathBuf>)> {
    let path = config_path(a.config.as_ref(), cli, "distill.toml");
    let mut cfg = match &path {
        Some(p) => DistillConfig::load(p)?,
        None => DistillConfig::default(),
    };
    if let Some(v) = a.lambda_kd {
        cfg.lambda_kd = v;
    }
    if let Some(v) = a.lambda_mlm {
        cfg.lambda_mlm = v;
    }
    if let Some(v) = a.lambda_cos {
        cfg.lambda_cos = v;
    }
    if let Some(v) = a.temperature {
        cfg.temperature = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok((cfg, path))
}

fn cmd_distill(cli: &Cli, a: &DistillArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, cfg_path) = resolve_distill_config(cli, a)?;
    let vocab = load_vocab(&a.vocab)?;
    let teachers = a.teachers.iter().map(EncoderModel::load).collect::<Result<Vec<_>>>()?;
    let text = std::fs::read_to_string(&a.corpus).map_err(|e| Error::io(&a.corpus, e))?;
    let corpus = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| encode_pair(l, None, &vocab, a.max_len))
        .collect::<Result<Vec<_>>>()?;
    let layers = a.student_layers.unwrap_or(teachers[0].config().num_layers / 2);
    let student = init_student(&teachers[0], layers)?;
    let outcome = train_distill(&teachers, student, &corpus, &vocab, &cfg)?;
    outcome.student.save(&a.output)?;
    let metrics = a
        .metrics
        .clone()
        .unwrap_or_else(|| with_suffix(&a.output, ".metrics.csv"));
    let file = File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    write_metrics_csv(BufWriter::new(file), &outcome.log)?;

    let mut m = RunManifest::new(
        "distill",
        json!({
            "distill": cfg,
            "config_file": cfg_path,
            "student_layers": layers,
            "max_len": a.max_len,
            "lowercase": a.vocab.lowercase,
        }),
        Some(cfg.seed),
        cli.threads,
    );
    for t in &a.teachers {
        m.input(t)?;
    }
    m.input(&a.vocab.vocab)?;
    m.input(&a.corpus)?;
    m.output(&a.output)?;
    m.output(&metrics)?;
    m.write_next_to(&a.output)?;
    let last = outcome.log.last();
    emit(
        out,
        &json!({
            "teachers": teachers.len(),
            "student_layers": layers,
            "student_params": outcome.student.count_params(),
            "steps": outcome.log.len(),
            "final_total": last.map(|s| s.total),
            "metrics": metrics,
        }),
    )
}

/// Task preset, overlaid with a TOML table of fields, then flags.
fn resolve_finetune_hp(cli: &Cli, a: &FinetuneArgs, task: Task) -> Result<(FinetuneHyperparams, Option<PathBuf>)> {
    let path = config_path(a.config.as_ref(), cli, &format!("finetune-{task}.toml"));
    let mut hp = task.preset();
    if let Some(p) = &path {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let overlay: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        let mut base = toml::Table::try_from(&hp).expect("hyperparameters serialize");
        base.extend(overlay);
        hp = toml::Value::Table(base)
            .try_into()
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    }
    if let Some(v) = a.epochs {
        hp.duration = crate::finetune::Duration::Epochs(v);
    }
    if let Some(v) = a.batch_size {
        hp.batch_size = v;
    }
    if let Some(v) = a.warmup_steps {
        hp.warmup_steps = v;
    }
    if let Some(v) = a.learning_rate {
        hp.learning_rate = v;
    }
    if let Some(v) = a.max_len {
        hp.max_len = v;
    }
    hp.seed = a.seed;
    hp.validate()?;
    Ok((hp, path))
}

fn load_dataset(path: &Path, tagging: bool) -> Result<Dataset> {
    if tagging {
        Dataset::load_tagging(path)
    } else {
        Dataset::load_examples(path)
    }
}

fn cmd_finetune(cli: &Cli, a: &FinetuneArgs, out: &mut dyn Write) -> Result<()> {
    let task: Task = a.task.parse()?;
    let (mut hp, hp_path) = resolve_finetune_hp(cli, a, task)?;
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    if a.seeds > 1 && a.dev.is_none() {
        return Err(Error::Config("--seeds above 1 needs --dev to report on".into()));
    }
    let vocab = load_vocab(&a.vocab)?;
    let encoder = EncoderModel::load(&a.model)?;
    if a.max_len.is_none() {
        hp.max_len = hp.max_len.min(encoder.config().max_position);
    }
    let train = load_dataset(&a.train, task.is_tagging())?;
    let dev = a.dev.as_ref().map(|p| load_dataset(p, task.is_tagging())).transpose()?;
    let labels = if task.is_tagging() {
        let mut l = train.tag_set();
        if let Some(d) = &dev {
            l.extend(d.tag_set());
            l.sort();
            l.dedup();
        }
        l
    } else {
        Vec::new()
    };
    let kind = task.kind(labels.len())?;

    let mut runs = Vec::new();
    let mut metric_maps = Vec::new();
    let mut outputs = Vec::new();
    for k in 0..a.seeds {
        let seed = a.seed + k as u64;
        let run_hp = FinetuneHyperparams { seed, ..hp.clone() };
        let model = attach_head(encoder.clone(), kind, labels.clone(), seed)?;
        let result = finetune(model, &train, dev.as_ref(), &vocab, &run_hp)?;
        let path = if a.seeds == 1 {
            a.output.clone()
        } else {
            with_suffix(&a.output, &format!(".seed{seed}"))
        };
        result.model.save(&path)?;
        if let Some(r) = &result.dev_report {
            metric_maps.push(r.metrics());
        }
        runs.push(json!({
            "seed": seed,
            "epochs_run": result.epochs_run,
            "epoch_losses": result.epoch_losses,
            "dev": result.dev_report,
            "checkpoint": path,
        }));
        outputs.push(path);
    }
    let report = json!({
        "task": task.name(),
        "runs": runs,
        "summary": summarize_runs(&metric_maps),
    });
    let report_path = with_suffix(&a.output, ".report.json");
    write_json(&report_path, &report)?;

    let mut m = RunManifest::new(
        "finetune",
        json!({
            "task": task.name(),
            "hyperparameters": hp,
            "config_file": hp_path,
            "seeds": a.seeds,
            "labels": labels,
            "lowercase": a.vocab.lowercase,
        }),
        Some(a.seed),
        cli.threads,
    );
    m.input(&a.model)?;
    m.input(&a.vocab.vocab)?;
    m.input(&a.train)?;
    if let Some(d) = &a.dev {
        m.input(d)?;
    }
    for p in &outputs {
        m.output(p)?;
    }
    m.output(&report_path)?;
    m.write_next_to(&a.output)?;
    emit(out, &report)
}

/// An explicit length is used as given; the default is capped at the model's
/// position table.
fn effective_max_len(flag: Option<usize>, model: &TaskModel) -> usize {
    flag.unwrap_or(DEFAULT_MAX_LEN.min(model.encoder.config().max_position))
}

fn cmd_predict(cli: &Cli, a: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let model = TaskModel::load(&a.model)?;
    let data = load_dataset(&a.data, model.kind().is_token_level())?;
    let max_len = effective_max_len(a.max_len, &model);
    let preds = predict(&model, &data, &vocab, max_len)?;
    preds.save(&a.output)?;

    let mut m = RunManifest::new(
        "predict",
        json!({ "max_len": max_len, "lowercase": a.vocab.lowercase }),
        None,
        cli.threads,
    );
    m.input(&a.model)?;
    m.input(&a.vocab.vocab)?;
    m.input(&a.data)?;
    m.output(&a.output)?;
    m.write_next_to(&a.output)?;
    emit(out, &json!({ "predictions": preds.len(), "output": a.output }))
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let model = TaskModel::load(&a.model)?;
    let data = load_dataset(&a.data, model.kind().is_token_level())?;
    let max_len = effective_max_len(a.max_len, &model);
    let preds = match &a.predictions {
        Some(p) => PredictionSet::load(p)?,
        None => predict(&model, &data, &load_vocab(&a.vocab)?, max_len)?,
    };
    let report = serde_json::to_value(evaluate_predictions(&preds, &data, &model.labels)?).expect("report serializes");
    if let Some(path) = &a.output {
        write_json(path, &report)?;
        let mut m = RunManifest::new(
            "evaluate",
            json!({ "max_len": max_len, "lowercase": a.vocab.lowercase }),
            None,
            cli.threads,
        );
        m.input(&a.model)?;
        m.input(&a.data)?;
        match &a.predictions {
            Some(p) => m.input(p)?,
            None => m.input(&a.vocab.vocab)?,
        }
        m.output(path)?;
        m.write_next_to(path)?;
    }
    emit(out, &report)
}

fn cmd_loyalty(cli: &Cli, a: &LoyaltyArgs, out: &mut dyn Write) -> Result<()> {
    let teachers = a.teachers.iter().map(PredictionSet::load).collect::<Result<Vec<_>>>()?;
    let student = PredictionSet::load(&a.student)?;
    let report = match a.metric {
        LoyaltyMetric::All => serde_json::to_value(multi_teacher_loyalty(&teachers, &student)?).expect("serializes"),
        metric => {
            let f = match metric {
                LoyaltyMetric::Label => label_loyalty,
                LoyaltyMetric::Probability => probability_loyalty,
                _ => regression_loyalty,
            };
            let per_teacher = teachers
                .iter()
                .enumerate()
                .map(|(k, t)| f(t, &student).map_err(|e| tag_teacher(k, e)))
                .collect::<Result<Vec<f64>>>()?;
            let mean = per_teacher.iter().sum::<f64>() / per_teacher.len() as f64;
            json!({ "metric": format!("{metric:?}").to_lowercase(), "mean": mean, "per_teacher": per_teacher })
        }
    };
    if let Some(path) = &a.output {
        write_json(path, &report)?;
        let mut m = RunManifest::new(
            "loyalty",
            json!({ "metric": format!("{:?}", a.metric) }),
            None,
            cli.threads,
        );
        for t in &a.teachers {
            m.input(t)?;
        }
        m.input(&a.student)?;
        m.output(path)?;
        m.write_next_to(path)?;
    }
    emit(out, &report)
}

fn tag_teacher(k: usize, e: Error) -> Error {
    match e {
        Error::Contract(m) => Error::Contract(format!("teacher {k}: {m}")),
        Error::Alignment(m) => Error::Alignment(format!("teacher {k}: {m}")),
        other => other,
    }
}

fn parse_arch(spec: &str, vocab_size: usize, max_position: usize) -> Result<ModelConfig> {
    let parts: Vec<usize> = spec
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("architecture `{spec}` is not LAYERS,HIDDEN,HEADS")))?;
    let [layers, hidden, heads] = parts[..] else {
        return Err(Error::Config(format!(
            "architecture `{spec}` is not LAYERS,HIDDEN,HEADS"
        )));
    };
    let cfg = ModelConfig::new(layers, hidden, heads, vocab_size).with_max_position(max_position);
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_bench(cli: &Cli, a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let max_len = a.lengths.iter().copied().max().unwrap_or(0).max(512);
    let mut models = Vec::new();
    for p in &a.checkpoints {
        let label = p
            .file_stem()
            .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        models.push(BenchModel::new(label, EncoderModel::load(p)?));
    }
    for spec in &a.archs {
        let cfg = parse_arch(spec, a.vocab_size, max_len)?;
        let label = format!("L{}-H{}-A{}", cfg.num_layers, cfg.hidden, cfg.num_heads);
        models.push(BenchModel::new(label, EncoderModel::new(cfg, a.seed)?));
    }
    if models.is_empty() {
        return Err(Error::Config("give at least one --checkpoint or --arch".into()));
    }
    let plan = BenchPlan {
        models,
        lengths: a.lengths.clone(),
        batch_size: a.batch_size,
        reps: a.reps,
        warmup: a.warmup,
        seed: a.seed,
    };
    let result = run_plan(&plan)?;
    let file = File::create(&a.output).map_err(|e| Error::io(&a.output, e))?;
    result.write_csv(BufWriter::new(file))?;
    if let Some(p) = &a.plot {
        let file = File::create(p).map_err(|e| Error::io(p, e))?;
        result
            .write_plot_data(BufWriter::new(file))
            .map_err(|e| Error::io(p, e))?;
    }
    for r in result.noisy_rows() {
        eprintln!(
            "warning: {} at length {} is noisy (stddev {:.3} ms, median {:.3} ms)",
            r.label, r.length, r.stddev_ms, r.median_ms
        );
    }

    let mut m = RunManifest::new(
        "bench",
        json!({
            "lengths": a.lengths,
            "reps": a.reps,
            "warmup": a.warmup,
            "batch_size": a.batch_size,
            "archs": a.archs,
            "vocab_size": a.vocab_size,
        }),
        Some(a.seed),
        cli.threads,
    );
    for p in &a.checkpoints {
        m.input(p)?;
    }
    m.output(&a.output)?;
    if let Some(p) = &a.plot {
        m.output(p)?;
    }
    m.write_next_to(&a.output)?;
    emit(out, &serde_json::to_value(&result).expect("serializes"))
}
