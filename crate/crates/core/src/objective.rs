//! Replaced-token-detection objective.

use alloc::format;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::data::MaskedBatch;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{derive, row_rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default weight of the RTD term.
pub const DEFAULT_RTD_WEIGHT: f64 = 50.0;

const SAMPLE_STREAM: u64 = 0x5a4d_504c_4553;

pub const LABEL_ORIGINAL: i8 = 0;
pub const LABEL_REPLACED: i8 = 1;
pub const LABEL_IGNORE: i8 = -1;

/// Discriminator input after replacement sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptedBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub input_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    /// 0 original, 1 replaced, -1 padding.
    pub rtd_labels: Vec<i8>,
    pub masked_positions: Vec<Vec<usize>>,
    pub rng_seed: u64,
}

impl CorruptedBatch {
    pub fn n_replaced(&self) -> usize {
        self.rtd_labels.iter().filter(|&&l| l == LABEL_REPLACED).count()
    }

    pub fn n_supervised(&self) -> usize {
        self.rtd_labels.iter().filter(|&&l| l != LABEL_IGNORE).count()
    }

    pub fn n_masked(&self) -> usize {
        self.masked_positions.iter().map(Vec::len).sum()
    }
}

/// Mean cross-entropy of the generator at the masked positions.
pub fn mlm_loss<T: Real>(tape: &mut Tape<'_, T>, gen_logits: Var, batch: &MaskedBatch) -> Result<Var> {
    let targets = batch.mlm_targets();
    if targets.is_empty() {
        return Err(Error::contract("mlm_loss on a batch with no masked positions"));
    }
    tape.cross_entropy(gen_logits, &targets)
}

/// Draws one token per masked position from `softmax(logits)` at
/// temperature 1. Row `r` uses the stream of global row
/// `batch.first_row + r` under the batch seed.
pub fn sample_replacements<T: Real>(
    gen_logits: &Tensor<T>,
    batch: &MaskedBatch,
) -> Result<Vec<Vec<u32>>> {
    let (rows, vocab) = gen_logits.dims2();
    if rows != batch.batch * batch.seq_len {
        return Err(Error::Shape {
            op: "sample_replacements",
            lhs: gen_logits.shape().to_vec(),
            rhs: alloc::vec![batch.batch, batch.seq_len],
        });
    }
    let seed = derive(batch.rng_seed, SAMPLE_STREAM);
    let mut out = Vec::with_capacity(batch.batch);
    let mut weights = alloc::vec![0.0f64; vocab];
    for (r, positions) in batch.masked_positions.iter().enumerate() {
        let mut rng = row_rng(seed, batch.first_row + r);
        let mut row = Vec::with_capacity(positions.len());
        for &p in positions {
            if p >= batch.seq_len {
                return Err(Error::Index {
                    what: "masked position",
                    index: p,
                    bound: batch.seq_len,
                });
            }
            let logits = gen_logits.row(r * batch.seq_len + p);
            let mx = logits.iter().map(|x| x.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            for (w, l) in weights.iter_mut().zip(logits) {
                *w = libm::exp(l.to_f64() - mx);
            }
            let dist = WeightedIndex::new(&weights)
                .map_err(|e| Error::NonFinite(format!("generator logits at row {r}, position {p}: {e}")))?;
            row.push(dist.sample(&mut rng) as u32);
        }
        out.push(row);
    }
    Ok(out)
}

/// Writes `samples` into the masked positions and labels every non-padding
/// position. A sample equal to the original counts as original.
pub fn build_corrupted_batch(batch: &MaskedBatch, samples: &[Vec<u32>]) -> Result<CorruptedBatch> {
    if samples.len() != batch.batch
        || samples
            .iter()
            .zip(&batch.masked_positions)
            .any(|(s, p)| s.len() != p.len())
    {
        return Err(Error::contract("samples do not align with masked positions"));
    }
    let mut input_ids = batch.input_ids.clone();
    let mut rtd_labels: Vec<i8> = batch
        .attention_mask
        .iter()
        .map(|&m| if m == 1 { LABEL_ORIGINAL } else { LABEL_IGNORE })
        .collect();
    for (r, ((pos, orig), samp)) in batch
        .masked_positions
        .iter()
        .zip(&batch.original_ids)
        .zip(samples)
        .enumerate()
    {
        for ((&p, &o), &s) in pos.iter().zip(orig).zip(samp) {
            let at = r * batch.seq_len + p;
            input_ids[at] = s;
            if s != o {
                rtd_labels[at] = LABEL_REPLACED;
            }
        }
    }
    Ok(CorruptedBatch {
        batch: batch.batch,
        seq_len: batch.seq_len,
        input_ids,
        attention_mask: batch.attention_mask.clone(),
        rtd_labels,
        masked_positions: batch.masked_positions.clone(),
        rng_seed: batch.rng_seed,
    })
}

/// Mean sigmoid cross-entropy over every non-padding position.
pub fn rtd_loss<T: Real>(tape: &mut Tape<'_, T>, disc_logits: Var, labels: &[i8]) -> Result<Var> {
    tape.binary_cross_entropy(disc_logits, labels)
}

/// `l_mlm + weight · l_rtd`.
pub fn combined_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    l_mlm: Var,
    l_rtd: Var,
    rtd_weight: f64,
) -> Result<Var> {
    if !(rtd_weight >= 0.0) {
        return Err(Error::contract(format!("RTD weight {rtd_weight} must be >= 0")));
    }
    let w = tape.scale(l_rtd, T::from_f64(rtd_weight));
    tape.add(l_mlm, w)
}

/// Fraction of supervised positions where `logit > 0` matches the label,
/// together with the number of supervised positions.
pub fn rtd_accuracy<T: Real>(disc_logits: &Tensor<T>, labels: &[i8]) -> (f64, usize) {
    let mut hit = 0usize;
    let mut n = 0usize;
    for (&x, &y) in disc_logits.data().iter().zip(labels) {
        if y == LABEL_IGNORE {
            continue;
        }
        n += 1;
        let pred = if x > T::ZERO { LABEL_REPLACED } else { LABEL_ORIGINAL };
        if pred == y {
            hit += 1;
        }
    }
    (if n == 0 { 0.0 } else { hit as f64 / n as f64 }, n)
}

/// Accuracy of always predicting the more frequent label.
pub fn majority_baseline(labels: &[i8]) -> f64 {
    let replaced = labels.iter().filter(|&&l| l == LABEL_REPLACED).count();
    let original = labels.iter().filter(|&&l| l == LABEL_ORIGINAL).count();
    let n = replaced + original;
    if n == 0 {
        0.0
    } else {
        replaced.max(original) as f64 / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_masked_batch, TokenSequence, CLS, SEP};
    use alloc::vec;

    fn batch(rows: usize, content: usize, seed: u64) -> MaskedBatch {
        let seqs: Vec<TokenSequence> = (0..rows)
            .map(|r| {
                let mut ids = vec![CLS];
                ids.extend((0..content).map(|i| 5 + ((i + r) % 30) as u32));
                ids.push(SEP);
                TokenSequence::new(ids).unwrap()
            })
            .collect();
        make_masked_batch(&seqs, content + 4, 0.15, seed).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let b = batch(2, 20, 1);
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[2 * 24, 37]));
        let loss = mlm_loss(&mut tape, l, &b).unwrap();
        assert!((tape.value(loss).item() - libm::log(37.0)).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero_loss() {
        let b = batch(1, 10, 2);
        let mut logits = Tensor::<f64>::zeros(&[14, 37]);
        for (row, class) in b.mlm_targets() {
            logits.data_mut()[row * 37 + class] = 40.0;
        }
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let loss = mlm_loss(&mut tape, l, &b).unwrap();
        assert!(tape.value(loss).item() < 1e-12);
    }

    #[test]
    fn mlm_loss_matches_f64_oracle() {
        let b = batch(2, 12, 3);
        let n = 2 * 16;
        let data: Vec<f64> = (0..n * 11).map(|i| ((i * 37 % 101) as f64 / 17.0).sin() * 3.0).collect();
        let logits32 = Tensor::<f32>::from_f64(&[n, 11], &data).unwrap();
        // Oracle on the exact values the f32 path sees.
        let vals: Vec<f64> = logits32.data().iter().map(|&x| x as f64).collect();
        let mut total = 0.0;
        let targets: Vec<(usize, usize)> =
            b.mlm_targets().into_iter().map(|(r, c)| (r, c % 11)).collect();
        for &(r, c) in &targets {
            let row = &vals[r * 11..(r + 1) * 11];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            total += z.ln() - row[c];
        }
        let expect = total / targets.len() as f64;
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(logits32);
        let loss = tape.cross_entropy(l, &targets).unwrap();
        assert!(((tape.value(loss).item() as f64) - expect).abs() < 1e-6);
    }

    #[test]
    fn confident_logit_is_sampled() {
        let b = batch(3, 10, 4);
        let mut logits = Tensor::<f32>::zeros(&[3 * 14, 37]);
        for r in 0..logits.dims2().0 {
            logits.data_mut()[r * 37 + 9] = 40.0;
        }
        let s = sample_replacements(&logits, &b).unwrap();
        assert!(s.iter().flatten().all(|&t| t == 9));
        assert_eq!(s, sample_replacements(&logits, &b).unwrap());
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let seqs: Vec<TokenSequence> = (0..100)
            .map(|_| {
                let mut ids = vec![CLS];
                ids.extend(core::iter::repeat_n(7, 100));
                ids.push(SEP);
                TokenSequence::new(ids).unwrap()
            })
            .collect();
        // round(0.99 · 100) = 99 draws per row.
        let b = make_masked_batch(&seqs, 102, 0.99, 11).unwrap();
        let logits = Tensor::<f32>::zeros(&[100 * 102, 4]);
        let s = sample_replacements(&logits, &b).unwrap();
        let draws: Vec<u32> = s.into_iter().flatten().collect();
        assert_eq!(draws.len(), 9_900);
        for t in 0..4 {
            let f = draws.iter().filter(|&&d| d == t).count() as f64 / draws.len() as f64;
            assert!((f - 0.25).abs() < 0.02, "token {t}: {f}");
        }
    }

    #[test]
    fn corrupted_labels() {
        let b = batch(2, 20, 5);
        let same: Vec<Vec<u32>> = b.original_ids.clone();
        let c = build_corrupted_batch(&b, &same).unwrap();
        assert_eq!(c.n_replaced(), 0);
        assert_eq!(c.input_ids, b.original_input());

        let diff: Vec<Vec<u32>> = b
            .original_ids
            .iter()
            .map(|r| r.iter().map(|&o| o + 100).collect())
            .collect();
        let c = build_corrupted_batch(&b, &diff).unwrap();
        for r in 0..2 {
            for t in 0..24 {
                let at = r * 24 + t;
                let expect = if b.masked_positions[r].contains(&t) {
                    1
                } else if b.attention_mask[at] == 0 {
                    -1
                } else {
                    0
                };
                assert_eq!(c.rtd_labels[at], expect);
            }
        }
        assert!(build_corrupted_batch(&b, &diff[..1]).is_err());
    }

    #[test]
    fn rtd_loss_cases() {
        let labels = [0i8, 1, 0, 1, -1];
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[5]));
        let l = rtd_loss(&mut tape, z, &labels).unwrap();
        assert!((tape.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);
        let p = tape.constant(Tensor::from_f64(&[5], &[-30.0, 30.0, -30.0, 30.0, 5.0]).unwrap());
        let l = rtd_loss(&mut tape, p, &labels).unwrap();
        assert!(tape.value(l).item() < 1e-12);
        assert!(rtd_loss(&mut tape, z, &[-1; 5]).is_err());
    }

    #[test]
    fn combined_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::scalar(0.1));
        let c = combined_loss(&mut tape, a, b, 50.0).unwrap();
        assert!((tape.value(c).item() - 7.0).abs() < 1e-12);
        let c = combined_loss(&mut tape, a, b, 0.0).unwrap();
        assert_eq!(tape.value(c).item(), 2.0);
        assert!(combined_loss(&mut tape, a, b, -1.0).is_err());
    }
}
