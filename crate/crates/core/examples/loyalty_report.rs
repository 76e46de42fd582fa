//! Label, probability and regression loyalty between prediction sets,
//! including a two-teacher average.
//!
//! `cargo run --example loyalty_report`

use kdlab::loyalty::{
    js_divergence, label_loyalty, multi_teacher_loyalty, probability_loyalty, regression_loyalty, PredictionSet,
};

fn main() -> kdlab::Result<()> {
    let ids = |n: usize| (0..n).map(|i| format!("ex{i}")).collect::<Vec<_>>();
    let teacher_a = PredictionSet::classification(
        ids(4),
        vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4], vec![0.5, 0.5]],
    )?;
    let teacher_b = PredictionSet::classification(
        ids(4),
        vec![vec![0.8, 0.2], vec![0.3, 0.7], vec![0.4, 0.6], vec![0.7, 0.3]],
    )?;
    let student = PredictionSet::classification(
        ids(4),
        vec![vec![0.85, 0.15], vec![0.1, 0.9], vec![0.45, 0.55], vec![0.75, 0.25]],
    )?;
    println!("L-L vs teacher A: {:.4}", label_loyalty(&teacher_a, &student)?);
    println!("P-L vs teacher A: {:.4}", probability_loyalty(&teacher_a, &student)?);
    let both = multi_teacher_loyalty(&[teacher_a, teacher_b], &student)?;
    println!(
        "two-teacher report: {}",
        serde_json::to_string_pretty(&both).expect("serializes")
    );

    println!(
        "D_JS([0.5,0.5] || [0.75,0.25]) = {:.4} bits",
        js_divergence(&[0.5, 0.5], &[0.75, 0.25])?
    );

    let t = PredictionSet::regression(ids(3), vec![0.1, 0.5, 0.9])?;
    let s = PredictionSet::regression(ids(3), vec![0.2, 0.4, 0.7])?;
    println!("R-L (Pearson) = {:.5}", regression_loyalty(&t, &s)?);
    println!("\nprediction file format:\n{}", student.to_tsv());
    Ok(())
}
