use rand::Rng;

use crate::encoder::Batch;
use crate::error::{Error, Result};
use crate::tokenizer::{Encoding, Vocab};

/// Share of selected positions replaced by `[MASK]`; half the remainder gets a
/// random id and the rest stays unchanged.
pub const MASK_TOKEN_SHARE: f64 = 0.8;
pub const RANDOM_TOKEN_SHARE: f64 = 0.1;

/// A batch with masked-language-model substitutions applied.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    /// Model input with substitutions.
    pub batch: Batch,
    pub original_ids: Vec<u32>,
    /// `true` at positions the MLM and KD losses supervise.
    pub supervised: Vec<bool>,
}

impl MaskedBatch {
    /// Flat indices of supervised positions.
    pub fn supervised_rows(&self) -> Vec<usize> {
        (0..self.supervised.len()).filter(|&i| self.supervised[i]).collect()
    }

    /// Original ids at supervised positions.
    pub fn targets(&self) -> Vec<usize> {
        self.supervised_rows()
            .iter()
            .map(|&i| self.original_ids[i] as usize)
            .collect()
    }
}

/// Selects each real, non-special position with probability `mask_fraction`
/// and applies the 80 / 10 / 10 substitution to the selected ones.
pub fn mask_batch<R: Rng>(encs: &[Encoding], vocab: &Vocab, mask_fraction: f64, rng: &mut R) -> Result<MaskedBatch> {
    if !(mask_fraction > 0.0 && mask_fraction < 1.0) {
        return Err(Error::Contract(format!("mask_fraction {mask_fraction} not in (0,1)")));
    }
    let mut batch = Batch::from_encodings(encs)?;
    let original_ids = batch.ids.clone();
    let special = vocab.special();
    let vocab_len = vocab.len() as u32;
    let mut supervised = vec![false; original_ids.len()];
    for (i, &id) in original_ids.iter().enumerate() {
        let candidate = batch.mask[i] && id != special.cls && id != special.sep && id != special.pad;
        if !candidate || !rng.random_bool(mask_fraction) {
            continue;
        }
        supervised[i] = true;
        let u: f64 = rng.random();
        if u < MASK_TOKEN_SHARE {
            batch.ids[i] = special.mask;
        } else if u < MASK_TOKEN_SHARE + RANDOM_TOKEN_SHARE {
            batch.ids[i] = rng.random_range(0..vocab_len);
        }
    }
    Ok(MaskedBatch {
        batch,
        original_ids,
        supervised,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tokenizer::Casing;

    fn vocab() -> Vocab {
        let mut toks: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        toks.extend((0..20).map(|i| format!("w{i}")));
        Vocab::from_tokens(toks, Casing::Cased).unwrap()
    }

    fn encs(v: &Vocab, n: usize, len: usize) -> Vec<Encoding> {
        (0..n)
            .map(|k| {
                let ids: Vec<u32> = (0..len as u32 - 4).map(|i| 5 + (i + k as u32) % 20).collect();
                Encoding::from_ids(&ids, v, len).unwrap()
            })
            .collect()
    }

    #[test]
    fn deterministic_and_only_real_positions() {
        let v = vocab();
        let e = encs(&v, 4, 16);
        let a = mask_batch(&e, &v, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = mask_batch(&e, &v, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let s = v.special();
        for (i, &sup) in a.supervised.iter().enumerate() {
            if sup {
                let id = a.original_ids[i];
                assert!(a.batch.mask[i] && id != s.cls && id != s.sep && id != s.pad);
            } else {
                assert_eq!(a.batch.ids[i], a.original_ids[i]);
            }
        }
    }

    #[test]
    fn vanishing_fraction_supervises_nothing() {
        let v = vocab();
        let m = mask_batch(&encs(&v, 4, 16), &v, 1e-12, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(m.supervised_rows().is_empty());
        assert!(mask_batch(&encs(&v, 1, 8), &v, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn selection_shares_match_binomial_bounds() {
        let v = vocab();
        let e = encs(&v, 1000, 104);
        let m = mask_batch(&e, &v, 0.15, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let candidates = m
            .batch
            .mask
            .iter()
            .zip(&m.original_ids)
            .filter(|(&r, &id)| r && id >= 5)
            .count();
        assert!(candidates >= 100_000);
        let chosen = m.supervised_rows();
        let share = chosen.len() as f64 / candidates as f64;
        assert!((0.14..=0.16).contains(&share), "selected share {share}");
        let masked = chosen.iter().filter(|&&i| m.batch.ids[i] == v.special().mask).count();
        let mshare = masked as f64 / chosen.len() as f64;
        assert!((0.77..=0.83).contains(&mshare), "mask share {mshare}");
    }
}
