//! Fine-tunes small encoders on the fixture UPOS, NER, SAPN and STS files,
//! then predicts and scores.
//!
//! `cargo run --release --example finetune_tasks`

use std::path::Path;

use kdlab::encoder::{EncoderModel, ModelConfig};
use kdlab::finetune::{attach_head, evaluate, finetune, predict, Dataset, FinetuneHyperparams, Task};
use kdlab::tokenizer::{Casing, Vocab};

fn main() -> kdlab::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let vocab = Vocab::load(fixtures.join("toy_vocab.txt"), Casing::Cased)?;
    for (task, file) in [
        (Task::Upos, "upos.tsv"),
        (Task::Ner, "ner.tsv"),
        (Task::Sapn, "sapn.tsv"),
        (Task::Sts, "sts.tsv"),
    ] {
        let data = if task.is_tagging() {
            Dataset::load_tagging(fixtures.join(file))?
        } else {
            Dataset::load_examples(fixtures.join(file))?
        };
        let labels = data.tag_set();
        let kind = task.kind(labels.len())?;
        let encoder = EncoderModel::new(ModelConfig::new(2, 32, 4, vocab.len()).with_max_position(64), 3)?;
        let model = attach_head(encoder, kind, labels, 4)?;
        let hp = FinetuneHyperparams {
            max_len: 32,
            ..FinetuneHyperparams::epochs(15, 4, 0, 2e-3)
        };
        let outcome = finetune(model, &data, Some(&data), &vocab, &hp)?;
        let report = evaluate(&outcome.model, &data, &vocab, 32)?;
        let preds = predict(&outcome.model, &data, &vocab, 32)?;
        println!(
            "{task:<5} {kind:?}: {} predictions; first-epoch loss {:.3}, last {:.3}; train-set {:?}",
            preds.len(),
            outcome.epoch_losses[0],
            outcome.epoch_losses.last().unwrap(),
            report.metrics()
        );
    }
    println!("\npresets:");
    for task in Task::ALL {
        println!("  {task:<5} {:?}", task.preset());
    }
    Ok(())
}
