use crate::encoder::{EncoderModel, Mode};
use crate::error::{Error, Result};
use crate::numerics::{softmax_with_temperature, Bound, Tape, Tensor, Var};

use super::config::DistillConfig;
use super::masking::MaskedBatch;

/// A scalar loss that may have been computed over no positions.
#[derive(Debug, Clone, Copy)]
pub struct ScopedLoss {
    pub value: Var,
    /// Set when there was nothing to supervise; `value` is then a zero
    /// constant.
    pub empty: bool,
}

/// Rows of `mask` that are set, or `None` when all are.
fn selected_rows(mask: &[bool]) -> Option<Vec<usize>> {
    if mask.iter().all(|&m| m) {
        None
    } else {
        Some((0..mask.len()).filter(|&i| mask[i]).collect())
    }
}

fn rows_of(tape: &Tape, v: Var) -> usize {
    let shape = tape.shape(v);
    shape[..shape.len() - 1].iter().product()
}

/// `T² · mean −Σ t log s` over rows where `supervised` is set, with both
/// sides softened at `temperature`. The teacher side is detached.
pub fn kd_loss(
    tape: &mut Tape,
    teacher_logits: Var,
    student_logits: Var,
    supervised: &[bool],
    temperature: f64,
) -> Result<ScopedLoss> {
    if tape.shape(teacher_logits) != tape.shape(student_logits) {
        return Err(Error::dim(
            "kd_loss",
            tape.shape(teacher_logits),
            tape.shape(student_logits),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let n = rows_of(tape, teacher_logits);
    if supervised.len() != n {
        return Err(Error::dim("kd_loss", tape.shape(teacher_logits), &[supervised.len()]));
    }
    if !supervised.iter().any(|&m| m) {
        return Ok(ScopedLoss {
            value: tape.constant(Tensor::scalar(0.0)),
            empty: true,
        });
    }
    let c = *tape.shape(teacher_logits).last().unwrap();
    let (t, s) = match selected_rows(supervised) {
        None => (
            tape.reshape(teacher_logits, &[n, c])?,
            tape.reshape(student_logits, &[n, c])?,
        ),
        Some(rows) => {
            let tf = tape.reshape(teacher_logits, &[n, c])?;
            let sf = tape.reshape(student_logits, &[n, c])?;
            (tape.gather_rows(tf, &rows)?, tape.gather_rows(sf, &rows)?)
        }
    };
    let target = softmax_with_temperature(tape.value(t), temperature)?;
    let ce = tape.soft_cross_entropy(s, &target, temperature)?;
    Ok(ScopedLoss {
        value: tape.scale(ce, temperature * temperature)?,
        empty: false,
    })
}

/// Mean of `1 − cos(h_t, h_s)` over real positions. The teacher side is
/// detached.
pub fn cos_align_loss(
    tape: &mut Tape,
    teacher_hidden: Var,
    student_hidden: Var,
    attention_mask: &[bool],
) -> Result<ScopedLoss> {
    if tape.shape(teacher_hidden) != tape.shape(student_hidden) {
        return Err(Error::dim(
            "cos_align_loss",
            tape.shape(teacher_hidden),
            tape.shape(student_hidden),
        ));
    }
    let n = rows_of(tape, teacher_hidden);
    if attention_mask.len() != n {
        return Err(Error::dim(
            "cos_align_loss",
            tape.shape(teacher_hidden),
            &[attention_mask.len()],
        ));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| attention_mask[i]).collect();
    if rows.is_empty() {
        return Ok(ScopedLoss {
            value: tape.constant(Tensor::scalar(0.0)),
            empty: true,
        });
    }
    let h = *tape.shape(teacher_hidden).last().unwrap();
    let t = tape.detach(teacher_hidden);
    let t = tape.reshape(t, &[n, h])?;
    let s = tape.reshape(student_hidden, &[n, h])?;
    Ok(ScopedLoss {
        value: tape.cosine_loss(t, s, &rows)?,
        empty: false,
    })
}

/// The three loss components of one step.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub kd: Var,
    pub mlm: Var,
    pub cos: Var,
}

/// `λ_KD·L_KD + λ_MLM·L_MLM + λ_COS·L_COS`.
pub fn total_loss(tape: &mut Tape, parts: LossParts, config: &DistillConfig) -> Result<Var> {
    config.validate()?;
    let [a, b, c] = config.weights();
    tape.weighted_sum(&[(parts.kd, a), (parts.mlm, b), (parts.cos, c)])
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(kd: f64, mlm: f64, cos: f64, config: &DistillConfig) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let parts = LossParts {
        kd: tape.constant(Tensor::scalar(kd)),
        mlm: tape.constant(Tensor::scalar(mlm)),
        cos: tape.constant(Tensor::scalar(cos)),
    };
    let v = total_loss(&mut tape, parts, config)?;
    Ok(tape.value(v).item())
}

/// What the losses need from one model: vocabulary logits at the supervised
/// rows and the final hidden states.
#[derive(Debug, Clone, Copy)]
pub struct ModelView {
    /// `[supervised rows, vocab]`.
    pub logits: Var,
    /// `[batch, seq, hidden]`.
    pub hidden: Var,
}

/// Runs `model` on the masked batch and projects the supervised rows.
pub fn model_view(
    tape: &mut Tape,
    model: &EncoderModel,
    params: &Bound,
    mb: &MaskedBatch,
    mode: Mode<'_>,
) -> Result<ModelView> {
    let out = model.forward(tape, params, &mb.batch, mode)?;
    let hidden = out.last_hidden();
    let rows = mb.supervised_rows();
    let logits = if rows.is_empty() {
        tape.constant(Tensor::zeros(&[1, model.config().vocab_size]))
    } else {
        model.mlm_logits_at(tape, params, hidden, &rows)?
    };
    Ok(ModelView { logits, hidden })
}

/// A teacher's view computed on its own gradient-free tape, as plain tensors.
pub fn frozen_view(teacher: &EncoderModel, mb: &MaskedBatch) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::no_grad();
    let p = teacher.bind_frozen(&mut tape);
    let v = model_view(&mut tape, teacher, &p, mb, Mode::Eval)?;
    Ok((tape.value(v.logits).clone(), tape.value(v.hidden).clone()))
}

/// Distillation terms averaged over teachers.
#[derive(Debug, Clone, Copy)]
pub struct EnsembleLosses {
    pub kd: ScopedLoss,
    pub cos: ScopedLoss,
}

fn mean_of(tape: &mut Tape, parts: &[ScopedLoss]) -> Result<ScopedLoss> {
    let k = parts.len() as f64;
    let terms: Vec<(Var, f64)> = parts.iter().map(|p| (p.value, 1.0)).collect();
    let sum = tape.weighted_sum(&terms)?;
    Ok(ScopedLoss {
        value: tape.scale(sum, 1.0 / k)?,
        empty: parts.iter().all(|p| p.empty),
    })
}

/// Checks that every teacher can supervise the student.
pub fn check_compatible(teachers: &[&EncoderModel], student: &EncoderModel) -> Result<()> {
    if teachers.is_empty() {
        return Err(Error::Config("at least one teacher is required".into()));
    }
    let s = student.config();
    for (k, t) in teachers.iter().enumerate() {
        let c = t.config();
        if c.vocab_size != s.vocab_size || c.hidden != s.hidden {
            return Err(Error::Config(format!(
                "teacher {k} has vocab {} / hidden {} but the student has vocab {} / hidden {}",
                c.vocab_size, c.hidden, s.vocab_size, s.hidden
            )));
        }
    }
    Ok(())
}

/// Mean over teachers of the per-teacher KD and cosine losses.
pub fn ensemble_losses(
    tape: &mut Tape,
    teachers: &[ModelView],
    student: &ModelView,
    mb: &MaskedBatch,
    temperature: f64,
) -> Result<EnsembleLosses> {
    if teachers.is_empty() {
        return Err(Error::Config("at least one teacher is required".into()));
    }
    let supervised = vec![true; rows_of(tape, student.logits)];
    let supervised = if mb.supervised_rows().is_empty() {
        vec![false; supervised.len()]
    } else {
        supervised
    };
    let mut kd = Vec::with_capacity(teachers.len());
    let mut cos = Vec::with_capacity(teachers.len());
    for t in teachers {
        kd.push(kd_loss(tape, t.logits, student.logits, &supervised, temperature)?);
        cos.push(cos_align_loss(tape, t.hidden, student.hidden, &mb.batch.mask)?);
    }
    Ok(EnsembleLosses {
        kd: mean_of(tape, &kd)?,
        cos: mean_of(tape, &cos)?,
    })
}

/// Masked-LM cross-entropy of the student at supervised rows.
pub fn mlm_loss(tape: &mut Tape, student: &ModelView, mb: &MaskedBatch) -> Result<ScopedLoss> {
    let targets = mb.targets();
    if targets.is_empty() {
        return Ok(ScopedLoss {
            value: tape.constant(Tensor::scalar(0.0)),
            empty: true,
        });
    }
    Ok(ScopedLoss {
        value: tape.cross_entropy(student.logits, &targets)?,
        empty: false,
    })
}

/// Shannon entropy (natural log) of each row of `softmax(z / T)`, averaged.
pub fn tempered_entropy(logits: &Tensor, temperature: f64) -> Result<f64> {
    let p = softmax_with_temperature(logits, temperature)?;
    let rows = p.numel() / p.last_dim();
    let h: f64 = p.data().iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    Ok(h / rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_kd(t: &[f64], s: &[f64], temp: f64) -> f64 {
        let mut tape = Tape::no_grad();
        let n = t.len();
        let tv = tape.constant(Tensor::new(&[1, n], t.to_vec()).unwrap());
        let sv = tape.constant(Tensor::new(&[1, n], s.to_vec()).unwrap());
        let l = kd_loss(&mut tape, tv, sv, &[true], temp).unwrap();
        tape.value(l.value).item()
    }

    #[test]
    fn self_distillation_is_entropy() {
        let z = [0.3, -1.2, 2.0];
        let p = softmax_with_temperature(&Tensor::new(&[1, 3], z.to_vec()).unwrap(), 1.0).unwrap();
        let h: f64 = p.data().iter().map(|x| -x * x.ln()).sum();
        assert!((scalar_kd(&z, &z, 1.0) - h).abs() < 1e-12);
    }

    #[test]
    fn saturated_teacher_matching_student_vanishes() {
        let z = [60.0, 0.0];
        assert!(scalar_kd(&z, &z, 1.0) < 1e-20);
    }

    #[test]
    fn tempered_probabilities_hand_value() {
        let p = softmax_with_temperature(&Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap(), 2.0).unwrap();
        assert!((p.data()[0] - 0.37754).abs() < 1e-5);
        assert!((p.data()[1] - 0.62246).abs() < 1e-5);
    }

    #[test]
    fn kd_bounded_below_by_teacher_entropy() {
        let t = [0.5, 1.5, -0.5, 0.0];
        let s = [2.0, -1.0, 0.3, 0.7];
        for temp in [1.0, 2.0, 4.0] {
            let h = tempered_entropy(&Tensor::new(&[1, 4], t.to_vec()).unwrap(), temp).unwrap();
            assert!(scalar_kd(&t, &s, temp) >= temp * temp * h - 1e-9);
        }
    }

    #[test]
    fn no_supervised_rows_flags_empty() {
        let mut tape = Tape::no_grad();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let l = kd_loss(&mut tape, a, a, &[false, false], 2.0).unwrap();
        assert!(l.empty);
        assert_eq!(tape.value(l.value).item(), 0.0);
    }

    #[test]
    fn cosine_hand_cases() {
        let mut tape = Tape::no_grad();
        let t = tape.constant(Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let neg = tape.constant(Tensor::new(&[1, 2, 2], vec![-1.0, 0.0, 0.0, -1.0]).unwrap());
        let half = 3f64.sqrt() / 2.0;
        let rot = tape.constant(Tensor::new(&[1, 2, 2], vec![0.5, half, -half, 0.5]).unwrap());
        let same = cos_align_loss(&mut tape, t, t, &[true, true]).unwrap();
        assert!(tape.value(same.value).item().abs() < 1e-15);
        let anti = cos_align_loss(&mut tape, t, neg, &[true, true]).unwrap();
        assert!((tape.value(anti.value).item() - 2.0).abs() < 1e-15);
        let sixty = cos_align_loss(&mut tape, t, rot, &[true, true]).unwrap();
        assert!((tape.value(sixty.value).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let c = DistillConfig::default();
        assert!((total_loss_value(1.0, 1.0, 1.0, &c).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(total_loss_value(2.0, 0.0, 0.0, &c).unwrap(), 1.25);
        assert_eq!(total_loss_value(0.0, 4.0, 8.0, &c).unwrap(), 2.0);
        let bad = DistillConfig {
            lambda_kd: 0.5,
            ..DistillConfig::default()
        };
        assert!(matches!(total_loss_value(1.0, 1.0, 1.0, &bad), Err(Error::Config(_))));
    }
}
