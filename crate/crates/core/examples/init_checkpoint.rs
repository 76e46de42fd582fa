//! Writes a randomly initialised encoder checkpoint sized for a vocabulary
//! file, as a starting teacher for the `kdlab` CLI.
//!
//! `cargo run --example init_checkpoint -- teacher.ckpt [VOCAB] [LAYERS] [HIDDEN] [HEADS]`

use std::path::{Path, PathBuf};

use kdlab::encoder::{EncoderModel, ModelConfig};
use kdlab::tokenizer::{Casing, Vocab};

fn main() -> kdlab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let output = PathBuf::from(args.first().map_or("teacher.ckpt", String::as_str));
    let vocab_path = args
        .get(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy_vocab.txt"));
    let num = |i: usize, default: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let vocab = Vocab::load(&vocab_path, Casing::Cased)?;
    let config = ModelConfig::new(num(2, 4), num(3, 32), num(4, 4), vocab.len()).with_max_position(128);
    let model = EncoderModel::new(config, 42)?;
    model.save(&output)?;
    println!(
        "wrote {} ({} parameters, {:?})",
        output.display(),
        model.count_params(),
        model.config()
    );
    Ok(())
}
