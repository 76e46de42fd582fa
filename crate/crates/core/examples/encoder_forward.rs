//! Parameter counts of the reference architectures and a forward pass of a
//! small encoder.
//!
//! `cargo run --example encoder_forward`

use std::path::Path;

use kdlab::encoder::{EncoderModel, ModelConfig, REFERENCE_CONFIGS};
use kdlab::tokenizer::{encode_pair, Casing, Vocab};

fn main() -> kdlab::Result<()> {
    println!("{:<26} {:>8} {:>10} {:>10}", "model", "layout", "counted", "reported");
    for (label, layers, hidden, heads, vocab, reported) in REFERENCE_CONFIGS {
        let counted = ModelConfig::new(layers, hidden, heads, vocab).count_params();
        println!(
            "{label:<26} {:>8} {:>9.1}M {:>9.0}M",
            format!("L{layers}-H{hidden}"),
            counted as f64 / 1e6,
            reported as f64 / 1e6
        );
    }

    let vocab = Vocab::load(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy_vocab.txt"),
        Casing::Cased,
    )?;
    let model = EncoderModel::new(ModelConfig::new(2, 32, 4, vocab.len()).with_max_position(64), 7)?;
    let encs = [
        encode_pair("Maria citește o carte.", None, &vocab, 16)?,
        encode_pair("Copiii se joacă în parc.", None, &vocab, 16)?,
    ];
    let states = model.hidden_states(&encs)?;
    println!(
        "\ntoy encoder: {} parameters, {:?}",
        model.count_params(),
        model.breakdown()
    );
    for (i, h) in states.iter().enumerate() {
        let norm = h.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("hidden state {i}: shape {:?}, norm {norm:.3}", h.shape());
    }
    Ok(())
}
