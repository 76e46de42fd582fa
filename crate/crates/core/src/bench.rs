//! Forward-pass latency over random sequences of graded lengths.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{Batch, EncoderModel, Mode};
use crate::error::{Error, Result};
use crate::numerics::Tape;

pub const DEFAULT_LENGTHS: [usize; 6] = [16, 32, 64, 128, 256, 512];
pub const MIN_REPS: usize = 3;
/// Relative spread above which a row is reported as noisy.
pub const NOISE_RATIO: f64 = 0.5;

/// Median, mean and sample standard deviation of timed passes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub stddev_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: Vec<f64>) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::Contract("no latency samples".into()));
        }
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = if samples_ms.len() > 1 {
            samples_ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        Ok(Self {
            samples_ms,
            median_ms: median,
            mean_ms: mean,
            stddev_ms: var.sqrt(),
        })
    }
}

/// Seeded random token ids with every position attended.
pub fn bench_inputs(vocab_size: usize, length: usize, batch_size: usize, seed: u64) -> Result<Batch> {
    if length == 0 || batch_size == 0 {
        return Err(Error::Config("length and batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = length * batch_size;
    Ok(Batch {
        ids: (0..n).map(|_| rng.random_range(0..vocab_size as u32)).collect(),
        segments: vec![0; n],
        mask: vec![true; n],
        size: batch_size,
        seq_len: length,
    })
}

/// Runs `warmup` untimed and `reps` timed evaluation-mode forward passes.
pub fn time_forward(
    model: &EncoderModel,
    length: usize,
    batch_size: usize,
    reps: usize,
    warmup: usize,
    seed: u64,
) -> Result<LatencyStats> {
    let max = model.config().max_position;
    if length > max {
        return Err(Error::Config(format!(
            "length {length} exceeds the model's max_position {max}"
        )));
    }
    if reps == 0 {
        return Err(Error::Config("at least one timed repetition is required".into()));
    }
    let batch = bench_inputs(model.config().vocab_size, length, batch_size, seed)?;
    let run = || -> Result<()> {
        let mut tape = Tape::no_grad();
        let p = model.bind_frozen(&mut tape);
        let out = model.forward(&mut tape, &p, &batch, Mode::Eval)?;
        std::hint::black_box(tape.value(out.last_hidden()));
        Ok(())
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    LatencyStats::from_samples(samples)
}

#[derive(Debug, Clone)]
pub struct BenchModel {
    pub label: String,
    pub model: EncoderModel,
}

impl BenchModel {
    pub fn new(label: impl Into<String>, model: EncoderModel) -> Self {
        Self {
            label: label.into(),
            model,
        }
    }

    /// Architecture summary such as `L6-H768-A12`.
    pub fn architecture(&self) -> String {
        let c = self.model.config();
        format!("L{}-H{}-A{}", c.num_layers, c.hidden, c.num_heads)
    }
}

#[derive(Debug, Clone)]
pub struct BenchPlan {
    pub models: Vec<BenchModel>,
    pub lengths: Vec<usize>,
    pub batch_size: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl BenchPlan {
    pub fn new(models: Vec<BenchModel>) -> Self {
        Self {
            models,
            lengths: DEFAULT_LENGTHS.to_vec(),
            batch_size: 1,
            reps: 10,
            warmup: 2,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("bench plan has no models".into()));
        }
        if self.lengths.is_empty() {
            return Err(Error::Config("bench plan has no sequence lengths".into()));
        }
        if self.reps < MIN_REPS {
            return Err(Error::Config(format!(
                "at least {MIN_REPS} repetitions are required, got {}",
                self.reps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        for m in &self.models {
            let max = m.model.config().max_position;
            if let Some(&l) = self.lengths.iter().find(|&&l| l == 0 || l > max) {
                return Err(Error::Config(format!(
                    "model `{}`: length {l} outside 1..={max}",
                    m.label
                )));
            }
        }
        Ok(())
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub model: String,
    pub label: String,
    pub length: usize,
    pub reps: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub stddev_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub batch_size: usize,
    /// Worker threads used by the forward pass.
    pub threads: usize,
}

impl BenchResult {
    pub fn rows_for<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a BenchRow> + 'a {
        self.rows.iter().filter(move |r| r.label == label)
    }

    pub fn median(&self, label: &str, length: usize) -> Option<f64> {
        self.rows_for(label).find(|r| r.length == length).map(|r| r.median_ms)
    }

    /// Whether the model's median latency never drops as length grows.
    pub fn is_non_decreasing(&self, label: &str) -> bool {
        let mut rows: Vec<&BenchRow> = self.rows_for(label).collect();
        rows.sort_by_key(|r| r.length);
        rows.windows(2).all(|w| w[1].median_ms >= w[0].median_ms)
    }

    /// Rows whose standard deviation exceeds half the median.
    pub fn noisy_rows(&self) -> Vec<&BenchRow> {
        self.rows
            .iter()
            .filter(|r| r.stddev_ms / r.median_ms >= NOISE_RATIO)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)
                .map_err(|e| Error::Format(format!("writing bench table: {e}")))?;
        }
        out.flush()
            .map_err(|e| Error::Format(format!("writing bench table: {e}")))
    }

    /// One block per model: a `# label` comment, then `length median_ms`
    /// lines; blocks are separated by two blank lines.
    pub fn write_plot_data<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut labels: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !labels.contains(&r.label.as_str()) {
                labels.push(&r.label);
            }
        }
        for (i, label) in labels.iter().enumerate() {
            if i > 0 {
                writeln!(w, "\n")?;
            }
            writeln!(w, "# {label}")?;
            for r in self.rows_for(label) {
                writeln!(w, "{} {:.6}", r.length, r.median_ms)?;
            }
        }
        w.flush()
    }
}

/// Times every model at every length.
pub fn run_plan(plan: &BenchPlan) -> Result<BenchResult> {
    plan.validate()?;
    let mut rows = Vec::with_capacity(plan.models.len() * plan.lengths.len());
    for m in &plan.models {
        for &length in &plan.lengths {
            let stats = time_forward(&m.model, length, plan.batch_size, plan.reps, plan.warmup, plan.seed)
                .map_err(|e| Error::Config(format!("model `{}`, length {length}: {e}", m.label)))?;
            rows.push(BenchRow {
                model: m.architecture(),
                label: m.label.clone(),
                length,
                reps: plan.reps,
                median_ms: stats.median_ms,
                mean_ms: stats.mean_ms,
                stddev_ms: stats.stddev_ms,
            });
        }
    }
    Ok(BenchResult {
        rows,
        batch_size: plan.batch_size,
        threads: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;

    fn model(layers: usize) -> EncoderModel {
        EncoderModel::new(ModelConfig::new(layers, 16, 2, 50).with_max_position(64), 1).unwrap()
    }

    #[test]
    fn statistics_of_known_samples() {
        let s = LatencyStats::from_samples(vec![3.0, 1.0, 2.0, 10.0]).unwrap();
        assert_eq!(s.median_ms, 2.5);
        assert_eq!(s.mean_ms, 4.0);
        assert!((s.stddev_ms - (50.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(LatencyStats::from_samples(vec![]).is_err());
    }

    #[test]
    fn records_exactly_reps_samples() {
        let s = time_forward(&model(1), 8, 1, 5, 1, 3).unwrap();
        assert_eq!(s.samples_ms.len(), 5);
        assert!(s.samples_ms.iter().all(|&t| t > 0.0));
        assert!(s.median_ms <= s.samples_ms.iter().cloned().fold(0.0, f64::max));
        assert!(matches!(time_forward(&model(1), 65, 1, 5, 0, 3), Err(Error::Config(_))));
    }

    #[test]
    fn inputs_depend_only_on_seed() {
        assert_eq!(bench_inputs(50, 16, 2, 7).unwrap(), bench_inputs(50, 16, 2, 7).unwrap());
        assert_ne!(
            bench_inputs(50, 16, 2, 7).unwrap().ids,
            bench_inputs(50, 16, 2, 8).unwrap().ids
        );
    }

    #[test]
    fn plan_cardinality_and_outputs() {
        let mut plan = BenchPlan::new(vec![
            BenchModel::new("small", model(1)),
            BenchModel::new("big", model(2)),
        ]);
        plan.lengths = vec![4, 8, 16, 24, 32, 64];
        plan.reps = 3;
        plan.warmup = 0;
        let r = run_plan(&plan).unwrap();
        assert_eq!(r.rows.len(), 12);
        assert_eq!(r.rows[0].model, "L1-H16-A2");

        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("model,label,length,reps,median_ms,mean_ms,stddev_ms\n"));
        assert_eq!(text.lines().count(), 13);

        let mut plot = Vec::new();
        r.write_plot_data(&mut plot).unwrap();
        let plot = String::from_utf8(plot).unwrap();
        assert!(plot.starts_with("# small\n4 "));
        assert!(plot.contains("\n\n\n# big\n"));

        plan.lengths.clear();
        assert!(matches!(run_plan(&plan), Err(Error::Config(_))));
        plan.lengths = vec![128];
        assert!(matches!(run_plan(&plan), Err(Error::Config(_))));
        plan.lengths = vec![8];
        plan.reps = 2;
        assert!(matches!(run_plan(&plan), Err(Error::Config(_))));
    }
}
