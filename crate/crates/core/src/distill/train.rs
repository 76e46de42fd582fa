use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{EncoderModel, Mode};
use crate::error::{Error, Result};
use crate::numerics::{clip_grad_norm, AdamW, LinearSchedule, Tape};
use crate::tokenizer::{Encoding, Vocab};

use super::config::DistillConfig;
use super::loss::{
    check_compatible, ensemble_losses, frozen_view, mlm_loss, model_view, total_loss, LossParts, ModelView,
};
use super::masking::mask_batch;

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "L_KD")]
    pub kd: f64,
    #[serde(rename = "L_MLM")]
    pub mlm: f64,
    #[serde(rename = "L_COS")]
    pub cos: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: EncoderModel,
    pub log: Vec<StepMetrics>,
}

/// Writes the log as CSV with a header row.
pub fn write_metrics_csv<W: Write>(w: W, log: &[StepMetrics]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in log {
        out.serialize(row)
            .map_err(|e| Error::Format(format!("writing metrics: {e}")))?;
    }
    out.flush().map_err(|e| Error::Format(format!("writing metrics: {e}")))
}

fn check_finite(name: &str, v: f64, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            component: name.to_string(),
            step,
        })
    }
}

/// Distils `teachers` into `student` over `corpus` with AdamW, linear warmup
/// and decay, and gradient clipping. Teachers stay frozen.
pub fn train_distill(
    teachers: &[EncoderModel],
    mut student: EncoderModel,
    corpus: &[Encoding],
    vocab: &Vocab,
    config: &DistillConfig,
) -> Result<DistillOutcome> {
    config.validate()?;
    let refs: Vec<&EncoderModel> = teachers.iter().collect();
    check_compatible(&refs, &student)?;
    if corpus.is_empty() {
        return Err(Error::Contract("empty distillation corpus".into()));
    }
    if vocab.len() != student.config().vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            student.config().vocab_size
        )));
    }
    let steps_per_epoch = corpus.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let schedule = LinearSchedule::with_warmup_fraction(config.learning_rate, config.warmup_fraction, total_steps);
    let mut opt = AdamW::new(config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let encs: Vec<Encoding> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let mb = mask_batch(&encs, vocab, config.mask_fraction, &mut rng)?;

            let mut tape = Tape::new();
            let teacher_views = teachers
                .iter()
                .map(|t| {
                    let (logits, hidden) = frozen_view(t, &mb)?;
                    Ok(ModelView {
                        logits: tape.constant(logits),
                        hidden: tape.constant(hidden),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let params = student.bind(&mut tape);
            let view = model_view(&mut tape, &student, &params, &mb, Mode::Train(&mut rng))?;
            let ens = ensemble_losses(&mut tape, &teacher_views, &view, &mb, config.temperature)?;
            let mlm = mlm_loss(&mut tape, &view, &mb)?;
            let parts = LossParts {
                kd: ens.kd.value,
                mlm: mlm.value,
                cos: ens.cos.value,
            };
            let total = total_loss(&mut tape, parts, config)?;
            let (kd, mlm_v, cos, tot) = (
                tape.value(parts.kd).item(),
                tape.value(parts.mlm).item(),
                tape.value(parts.cos).item(),
                tape.value(total).item(),
            );
            check_finite("L_KD", kd, step)?;
            check_finite("L_MLM", mlm_v, step)?;
            check_finite("L_COS", cos, step)?;
            check_finite("total", tot, step)?;

            let grads = tape.backward(total)?;
            student.params.zero_grad();
            student.params.absorb(&grads, &params);
            let grad_norm = clip_grad_norm(student.params.iter_mut().filter(|t| t.grad.is_some()), config.clip_norm)?;
            check_finite("gradient", grad_norm, step)?;
            let lr = schedule.lr(step);
            opt.step(student.params.iter_mut(), lr);
            log.push(StepMetrics {
                step,
                lr,
                kd,
                mlm: mlm_v,
                cos,
                total: tot,
                grad_norm,
            });
            step += 1;
        }
    }
    Ok(DistillOutcome { student, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::init_student;
    use crate::encoder::ModelConfig;
    use crate::tokenizer::Casing;

    fn toy() -> (Vocab, Vec<Encoding>) {
        let mut toks: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        toks.extend((0..11).map(|i| format!("w{i}")));
        let v = Vocab::from_tokens(toks, Casing::Cased).unwrap();
        let encs = (0..24)
            .map(|k| {
                let ids: Vec<u32> = (0..6).map(|i| 5 + ((k + i * (k % 3 + 1)) % 11) as u32).collect();
                Encoding::from_ids(&ids, &v, 8).unwrap()
            })
            .collect();
        (v, encs)
    }

    #[test]
    fn loss_decreases_and_log_is_complete() {
        let (v, corpus) = toy();
        let cfg = ModelConfig::new(2, 16, 2, v.len())
            .with_max_position(8)
            .with_dropout(0.0);
        let teacher = EncoderModel::new(cfg, 1).unwrap();
        let student = init_student(&teacher, 1).unwrap();
        let dc = DistillConfig {
            epochs: 6,
            batch_size: 8,
            learning_rate: 3e-3,
            mask_fraction: 0.3,
            ..DistillConfig::default()
        };
        let out = train_distill(&[teacher], student, &corpus, &v, &dc).unwrap();
        assert_eq!(out.log.len(), 18);
        assert_eq!(out.log[0].lr, 0.0);
        let head: f64 = out.log[..3].iter().map(|m| m.total).sum();
        let tail: f64 = out.log[15..].iter().map(|m| m.total).sum();
        assert!(tail < head, "{head} -> {tail}");

        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &out.log).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,lr,L_KD,L_MLM,L_COS,total,grad_norm\n"));
        assert_eq!(text.lines().count(), 19);
    }

    #[test]
    fn deterministic_per_seed() {
        let (v, corpus) = toy();
        let cfg = ModelConfig::new(2, 8, 2, v.len()).with_max_position(8);
        let teacher = EncoderModel::new(cfg, 2).unwrap();
        let dc = DistillConfig {
            epochs: 1,
            batch_size: 12,
            ..DistillConfig::default()
        };
        let a = train_distill(
            std::slice::from_ref(&teacher),
            init_student(&teacher, 1).unwrap(),
            &corpus,
            &v,
            &dc,
        )
        .unwrap();
        let b = train_distill(
            std::slice::from_ref(&teacher),
            init_student(&teacher, 1).unwrap(),
            &corpus,
            &v,
            &dc,
        )
        .unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.student, b.student);
    }
}
