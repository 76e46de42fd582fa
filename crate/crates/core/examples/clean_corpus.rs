//! Line cleaning decisions, file cleaning and merge-deduplication.
//!
//! `cargo run --example clean_corpus`

use std::path::Path;

use kdlab::corpus::{clean_file, clean_line, corpus_stats, dedup_merge, language_gate, CleaningRules};

fn main() -> kdlab::Result<()> {
    let rules = CleaningRules {
        named_entities: vec!["București".into(), "Cluj".into()],
        ..CleaningRules::default()
    };
    for line in [
        "c?nd plec acasă",
        "am fost în bucurești ieri",
        "Articolul Anterior Guvernul a decis…",
        "The weather is nice today in London.",
        "Maria citește o carte despre istoria orașului.",
    ] {
        println!(
            "{:<48} gate {:.2} -> {:?}",
            line,
            language_gate(line),
            clean_line(line, &rules)
        );
    }

    let dir = std::env::temp_dir().join(format!("kdlab-clean-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| kdlab::Error::io(&dir, e))?;
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy_corpus.txt");
    let cleaned = dir.join("clean.txt");
    let report = clean_file(&corpus, &cleaned, &rules)?;
    println!("\nclean_file: {report:?}");
    let merged = dir.join("merged.txt");
    let stats = dedup_merge(&[&cleaned, &cleaned], &merged)?;
    println!("dedup of the file merged with itself: {}", stats.to_json_line());
    println!(
        "corpus_stats of the cleaned file:     {}",
        corpus_stats(&cleaned)?.to_json_line()
    );
    std::fs::remove_dir_all(&dir).map_err(|e| kdlab::Error::io(&dir, e))?;
    Ok(())
}
