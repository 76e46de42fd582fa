//! WordPiece tokenization with the shipped toy vocabulary.
//!
//! `cargo run --example tokenize -- "Maria citește o carte."`

use std::path::Path;

use kdlab::tokenizer::{encode_pair, Casing, Vocab};

fn main() -> kdlab::Result<()> {
    let vocab_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy_vocab.txt");
    let vocab = Vocab::load(&vocab_path, Casing::Cased)?;
    let text = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "Ion merge la piață în fiecare dimineață.".to_string());
    println!("vocabulary: {} tokens from {}", vocab.len(), vocab_path.display());

    let pieces = vocab.tokenize(&text);
    println!("pieces: {pieces:?}");
    println!("ids:    {:?}", vocab.to_ids(&pieces));

    let enc = encode_pair(&text, Some("Vremea este frumoasă."), &vocab, 32)?;
    println!("pair encoding ({} real of {}):", enc.real_len(), enc.len());
    println!("  tokens   {:?}", vocab.to_tokens(&enc.ids[..enc.real_len()]));
    println!("  segments {:?}", &enc.segment_ids[..enc.real_len()]);
    Ok(())
}
