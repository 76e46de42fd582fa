//! Distils two teachers into a half-depth student on the toy corpus and
//! prints the loss log.
//!
//! `cargo run --release --example distill_ensemble`

use std::path::Path;

use kdlab::distill::{init_student, train_distill, write_metrics_csv, DistillConfig};
use kdlab::encoder::{EncoderModel, ModelConfig};
use kdlab::tokenizer::{encode_pair, Casing, Encoding, Vocab};

fn main() -> kdlab::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let vocab = Vocab::load(fixtures.join("toy_vocab.txt"), Casing::Cased)?;
    let text = std::fs::read_to_string(fixtures.join("toy_corpus.txt")).map_err(|e| kdlab::Error::io(&fixtures, e))?;
    let corpus: Vec<Encoding> = text
        .lines()
        .map(|l| encode_pair(l, None, &vocab, 24))
        .collect::<kdlab::Result<_>>()?;

    let config = ModelConfig::new(4, 32, 4, vocab.len()).with_max_position(64);
    let teachers = [EncoderModel::new(config.clone(), 1)?, EncoderModel::new(config, 2)?];
    let student = init_student(&teachers[0], 2)?;
    println!(
        "teachers: {} parameters each; student: {} parameters",
        teachers[0].count_params(),
        student.count_params()
    );

    let cfg = DistillConfig {
        epochs: 5,
        batch_size: 8,
        learning_rate: 1e-3,
        ..DistillConfig::default()
    };
    let outcome = train_distill(&teachers, student, &corpus, &vocab, &cfg)?;
    write_metrics_csv(std::io::stdout(), &outcome.log)?;
    Ok(())
}
