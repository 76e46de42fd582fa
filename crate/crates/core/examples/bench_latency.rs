//! Forward-pass latency of a 12-layer and a 6-layer encoder over a sweep of
//! sequence lengths.
//!
//! `cargo run --release --example bench_latency`

use kdlab::bench::{run_plan, BenchModel, BenchPlan};
use kdlab::encoder::{EncoderModel, ModelConfig};

fn main() -> kdlab::Result<()> {
    let config = |layers| ModelConfig::new(layers, 64, 4, 1000);
    let mut plan = BenchPlan::new(vec![
        BenchModel::new("teacher", EncoderModel::new(config(12), 1)?),
        BenchModel::new("student", EncoderModel::new(config(6), 2)?),
    ]);
    plan.lengths = vec![16, 64, 256];
    plan.reps = 5;
    let result = run_plan(&plan)?;
    result.write_csv(std::io::stdout())?;
    for length in &plan.lengths {
        let (t, s) = (result.median("teacher", *length), result.median("student", *length));
        if let (Some(t), Some(s)) = (t, s) {
            println!("length {length:>3}: student is {:.2}x faster", t / s);
        }
    }
    Ok(())
}
