//! One optimizer step of RTD pretraining with gradient accumulation.

use alloc::vec::Vec;

use crate::data::MaskedBatch;
use crate::error::{Error, Result};
use crate::model::{Model, RowLayout};
use crate::objective::{
    build_corrupted_batch, combined_loss, mlm_loss, rtd_accuracy, rtd_loss, sample_replacements,
    CorruptedBatch,
};
use crate::optim::{Lamb, LambReport};
use crate::real::Real;
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;

/// Loss values of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Losses {
    pub mlm: f64,
    pub rtd: f64,
    pub combined: f64,
}

/// Which loss a backward pass differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Mlm,
    Rtd,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub l_mlm: f64,
    pub l_rtd: f64,
    pub combined: f64,
    pub disc_accuracy: f64,
    pub mlm_positions: usize,
    pub rtd_positions: usize,
}

/// Forward pass over a masked batch with a given corruption. `anchor`
/// replaces the stopped `E_G` in the discriminator (see
/// [`Model::gdes_embed`]). Returns the losses and, when `term` is given,
/// the gradients of that loss scaled by `scale`.
pub fn forward_fixed<T: Real>(
    model: &Model<T>,
    masked: &MaskedBatch,
    corrupted: &CorruptedBatch,
    rtd_weight: f64,
    anchor: Option<&Tensor<T>>,
    term: Option<(LossTerm, f64)>,
) -> Result<(Losses, Option<Gradients<T>>)> {
    let rows = RowLayout::new(masked.batch, masked.seq_len, &masked.attention_mask)?;
    let mut tape = Tape::new();
    let gl = model.generator_forward(&mut tape, &masked.input_ids, &rows, None)?;
    let mlm = mlm_loss(&mut tape, gl, masked)?;
    let dl = model.discriminator_forward(&mut tape, &corrupted.input_ids, &rows, anchor, None)?;
    let rtd = rtd_loss(&mut tape, dl, &corrupted.rtd_labels)?;
    let total = combined_loss(&mut tape, mlm, rtd, rtd_weight)?;
    let losses = Losses {
        mlm: tape.value(mlm).item().to_f64(),
        rtd: tape.value(rtd).item().to_f64(),
        combined: tape.value(total).item().to_f64(),
    };
    let grads = match term {
        None => None,
        Some((which, scale)) => {
            let target = match which {
                LossTerm::Mlm => mlm,
                LossTerm::Rtd => rtd,
                LossTerm::Combined => total,
            };
            let scaled = tape.scale(target, T::from_f64(scale));
            Some(tape.backward(scaled)?)
        }
    };
    Ok((losses, grads))
}

/// Generator pass, replacement sampling and corruption for `masked`.
pub fn corrupt<T: Real>(model: &Model<T>, masked: &MaskedBatch) -> Result<CorruptedBatch> {
    let rows = RowLayout::new(masked.batch, masked.seq_len, &masked.attention_mask)?;
    let mut tape = Tape::new();
    let gl = model.generator_forward(&mut tape, &masked.input_ids, &rows, None)?;
    let samples = sample_replacements(tape.value(gl), masked)?;
    build_corrupted_batch(masked, &samples)
}

/// Forward pass without gradients: losses and discriminator accuracy on
/// a freshly corrupted batch, which is returned alongside.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    masked: &MaskedBatch,
    rtd_weight: f64,
) -> Result<(StepStats, CorruptedBatch)> {
    let rows = RowLayout::new(masked.batch, masked.seq_len, &masked.attention_mask)?;
    let mut tape = Tape::new();
    let gl = model.generator_forward(&mut tape, &masked.input_ids, &rows, None)?;
    let mlm = mlm_loss(&mut tape, gl, masked)?;
    let samples = sample_replacements(tape.value(gl), masked)?;
    let corrupted = build_corrupted_batch(masked, &samples)?;
    let dl = model.discriminator_forward(&mut tape, &corrupted.input_ids, &rows, None, None)?;
    let rtd = rtd_loss(&mut tape, dl, &corrupted.rtd_labels)?;
    let total = combined_loss(&mut tape, mlm, rtd, rtd_weight)?;
    let (disc_accuracy, rtd_positions) = rtd_accuracy(tape.value(dl), &corrupted.rtd_labels);
    let stats = StepStats {
        l_mlm: tape.value(mlm).item().to_f64(),
        l_rtd: tape.value(rtd).item().to_f64(),
        combined: tape.value(total).item().to_f64(),
        disc_accuracy,
        mlm_positions: masked.n_masked(),
        rtd_positions,
    };
    Ok((stats, corrupted))
}

/// Full RTD forward/backward for one micro-batch; the combined loss is
/// multiplied by `scale` before its gradients are added to the model's
/// gradient buffers.
pub fn accumulate_micro_batch<T: Real>(
    model: &mut Model<T>,
    masked: &MaskedBatch,
    rtd_weight: f64,
    scale: f64,
) -> Result<StepStats> {
    let rows = RowLayout::new(masked.batch, masked.seq_len, &masked.attention_mask)?;
    let (stats, grads) = {
        let model: &Model<T> = model;
        let mut tape = Tape::new();
        let gl = model.generator_forward(&mut tape, &masked.input_ids, &rows, None)?;
        let mlm = mlm_loss(&mut tape, gl, masked)?;
        let samples = sample_replacements(tape.value(gl), masked)?;
        let corrupted = build_corrupted_batch(masked, &samples)?;
        let dl = model.discriminator_forward(&mut tape, &corrupted.input_ids, &rows, None, None)?;
        let rtd = rtd_loss(&mut tape, dl, &corrupted.rtd_labels)?;
        let total = combined_loss(&mut tape, mlm, rtd, rtd_weight)?;
        let combined = tape.value(total).item().to_f64();
        if !combined.is_finite() {
            return Err(Error::NonFinite(alloc::format!(
                "combined loss (mlm {}, rtd {})",
                tape.value(mlm).item(),
                tape.value(rtd).item()
            )));
        }
        let (disc_accuracy, rtd_positions) = rtd_accuracy(tape.value(dl), &corrupted.rtd_labels);
        let stats = StepStats {
            l_mlm: tape.value(mlm).item().to_f64(),
            l_rtd: tape.value(rtd).item().to_f64(),
            combined,
            disc_accuracy,
            mlm_positions: masked.n_masked(),
            rtd_positions,
        };
        let scaled = tape.scale(total, T::from_f64(scale));
        (stats, tape.backward(scaled)?)
    };
    model.params_mut().accumulate(&grads)?;
    Ok(stats)
}

/// One optimizer step: gradients of every micro-batch, each scaled by
/// `1 / micro_batches.len()`, are summed and applied with LAMB at `lr`.
/// Reported losses and accuracy are micro-batch means.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    optimizer: &mut Lamb<T>,
    micro_batches: &[MaskedBatch],
    rtd_weight: f64,
    lr: f64,
) -> Result<(StepStats, LambReport)> {
    if micro_batches.is_empty() {
        return Err(Error::contract("train_step needs at least one micro-batch"));
    }
    model.params_mut().zero_grad();
    let scale = 1.0 / micro_batches.len() as f64;
    let parts: Vec<StepStats> = micro_batches
        .iter()
        .map(|b| accumulate_micro_batch(model, b, rtd_weight, scale))
        .collect::<Result<_>>()?;
    let report = optimizer.step(model.params_mut(), lr)?;
    let n = parts.len() as f64;
    let mean = |f: fn(&StepStats) -> f64| parts.iter().map(f).sum::<f64>() / n;
    Ok((
        StepStats {
            l_mlm: mean(|s| s.l_mlm),
            l_rtd: mean(|s| s.l_rtd),
            combined: mean(|s| s.combined),
            disc_accuracy: mean(|s| s.disc_accuracy),
            mlm_positions: parts.iter().map(|s| s.mlm_positions).sum(),
            rtd_positions: parts.iter().map(|s| s.rtd_positions).sum(),
        },
        report,
    ))
}
