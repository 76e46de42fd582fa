//! Entity-level NER scoring under the strict, exact, partial and type
//! schemas.
//!
//! `cargo run --example ner_scoring`

use kdlab::taskmetrics::{extract_spans, ner_schema_eval, NerDocument, SCHEMAS};

fn doc(tokens: &str, gold: &str, pred: &str) -> kdlab::Result<NerDocument> {
    let split = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    NerDocument::new(split(tokens), split(gold), split(pred))
}

fn main() -> kdlab::Result<()> {
    let docs = [
        doc(
            "Ion Popescu a vizitat Clujul",
            "B-PER I-PER O O B-LOC",
            "B-PER I-PER O O B-ORG",
        )?,
        doc("Banca Transilvania din Cluj", "B-ORG I-ORG O B-LOC", "O B-ORG O B-LOC")?,
        doc("Maria pleacă mâine", "B-PER O O", "B-PER O B-PER")?,
    ];
    for d in &docs {
        println!(
            "{:?}\n  gold {:?}\n  pred {:?}",
            d.tokens,
            extract_spans(&d.gold)?,
            extract_spans(&d.pred)?
        );
    }
    let scores = ner_schema_eval(&docs)?;
    println!(
        "\n{:<8} {:>4} {:>4} {:>4} {:>4} {:>4} {:>7} {:>7} {:>7}",
        "schema", "COR", "INC", "PAR", "MIS", "SPU", "P", "R", "F1"
    );
    for (name, c) in SCHEMAS.iter().zip(scores.schemas()) {
        println!(
            "{name:<8} {:>4} {:>4} {:>4} {:>4} {:>4} {:>7.3} {:>7.3} {:>7.3}",
            c.correct,
            c.incorrect,
            c.partial,
            c.missed,
            c.spurious,
            c.precision(),
            c.recall(),
            c.f1()
        );
    }
    println!(
        "\n{}",
        serde_json::to_string_pretty(&scores.to_json()).expect("serializes")
    );
    Ok(())
}
