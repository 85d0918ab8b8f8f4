//! Two-phase pretraining loop, checkpoints and export.

use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::thread;
use std::time::Instant;

use rtd_core::data::MaskedBatch;
use rtd_core::model::{discriminator_export, Model, ModelConfig};
use rtd_core::optim::{lr_at, Lamb, Schedule};
use rtd_core::rng::derive;
use rtd_core::train::train_step;

use crate::checkpoint::Container;
use crate::config::TrainPlan;
use crate::corpus::{save_vocab, Corpus};
use crate::error::{io_err, Error, Result};
use crate::metrics::{MetricsRecord, MetricsWriter};

pub const CHECKPOINT_FILE: &str = "checkpoint.rtdp";
pub const METRICS_FILE: &str = "metrics.log";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const PLAN_FILE: &str = "plan.toml";

const MOMENT1: &str = "lamb.m.";
const MOMENT2: &str = "lamb.v.";

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model<f32>,
    pub optimizer: Lamb<f32>,
    /// Index of the phase in progress; equals the phase count when done.
    pub phase: usize,
    /// Optimizer steps completed in the current phase.
    pub step: u64,
    pub tokens_seen: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn fresh(plan: &TrainPlan) -> Result<Self> {
        let model = Model::new(plan.model_config(), plan.seed)?;
        let optimizer = Lamb::new(plan.lamb_config(), model.params())?;
        Ok(Self {
            model,
            optimizer,
            phase: 0,
            step: 0,
            tokens_seen: 0,
            seed: plan.seed,
        })
    }

    pub fn is_finished(&self, plan: &TrainPlan) -> bool {
        self.phase >= plan.phases.len()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(self.model.config());
        for (k, v) in [
            ("train.phase", self.phase as u64),
            ("train.step", self.step),
            ("train.tokens_seen", self.tokens_seen),
            ("train.seed", self.seed),
            ("train.optimizer_steps", self.optimizer.step_count()),
        ] {
            c.meta.insert(k.to_string(), v.to_string());
        }
        let params = self.model.params();
        c.tensors
            .extend(params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())));
        for (prefix, moments) in [
            (MOMENT1, self.optimizer.first_moments()),
            (MOMENT2, self.optimizer.second_moments()),
        ] {
            c.tensors.extend(
                params
                    .iter()
                    .zip(moments)
                    .map(|((_, p), m)| (format!("{prefix}{}", p.name), m.clone())),
            );
        }
        c
    }

    pub fn from_container(c: &Container, plan: &TrainPlan) -> Result<Self> {
        c.check_config(&plan.model_config())?;
        let meta = |k: &str| -> Result<u64> {
            c.meta
                .get(k)
                .ok_or_else(|| Error::Integrity(format!("missing `{k}`")))?
                .parse()
                .map_err(|_| Error::Integrity(format!("`{k}` is not an integer")))
        };
        let seed = meta("train.seed")?;
        if seed != plan.seed {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint seed {seed}, configured {}",
                plan.seed
            )));
        }
        let phase = meta("train.phase")? as usize;
        let step = meta("train.step")?;
        if phase > plan.phases.len() || (phase < plan.phases.len() && step > plan.phases[phase].steps) {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint at phase {} step {step} lies outside the plan",
                phase + 1
            )));
        }
        let model = model_from_container(c, plan.seed)?;
        let mut optimizer = Lamb::new(plan.lamb_config(), model.params())?;
        let moments = |prefix: &str| -> Result<Vec<_>> {
            model
                .params()
                .iter()
                .map(|(_, p)| {
                    let name = format!("{prefix}{}", p.name);
                    c.tensor(&name)
                        .cloned()
                        .ok_or_else(|| Error::Integrity(format!("missing `{name}`")))
                })
                .collect()
        };
        optimizer.restore(meta("train.optimizer_steps")?, moments(MOMENT1)?, moments(MOMENT2)?)?;
        Ok(Self {
            model,
            optimizer,
            phase,
            step,
            tokens_seen: meta("train.tokens_seen")?,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path, plan: &TrainPlan) -> Result<Self> {
        Self::from_container(&Container::load(path)?, plan)
    }
}

/// Rebuilds a model from the container's parameter tensors, ignoring
/// optimizer moments.
pub fn model_from_container(c: &Container, seed: u64) -> Result<Model<f32>> {
    let config: ModelConfig = c.model_config()?;
    let mut model = Model::new(config, seed)?;
    model.load_values(
        c.tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(MOMENT1) && !n.starts_with(MOMENT2))
            .map(|(n, t)| (n.as_str(), t.clone())),
    )?;
    Ok(model)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop (with a checkpoint) after this many optimizer steps.
    pub stop_after: Option<u64>,
    /// Print progress lines to stderr.
    pub progress: bool,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub state: TrainState,
    pub finished: bool,
}

/// Runs every remaining phase of `plan`, writing `metrics.log`,
/// `vocab.txt`, `plan.toml` and checkpoints under `out`.
pub fn pretrain(
    plan: &TrainPlan,
    corpus: &Corpus,
    out: &Path,
    resume: Option<&Path>,
    options: RunOptions,
) -> Result<RunOutcome> {
    plan.validate()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    save_vocab(&corpus.vocab, &out.join(VOCAB_FILE))?;
    let plan_path = out.join(PLAN_FILE);
    std::fs::write(&plan_path, plan.to_toml()).map_err(io_err(&plan_path))?;
    let mut state = match resume {
        Some(p) => TrainState::load(p, plan)?,
        None => TrainState::fresh(plan)?,
    };
    let mut metrics = MetricsWriter::resume(&out.join(METRICS_FILE), state.phase + 1, state.step)?;
    let mut budget = options.stop_after;
    while !state.is_finished(plan) {
        if budget == Some(0) {
            state.save(&out.join(CHECKPOINT_FILE))?;
            return Ok(RunOutcome {
                state,
                finished: false,
            });
        }
        run_phase(plan, corpus, out, &mut state, &mut metrics, &mut budget, options.progress)?;
    }
    Ok(RunOutcome {
        state,
        finished: true,
    })
}

pub fn phase_checkpoint_path(out: &Path, phase: usize) -> PathBuf {
    out.join(format!("phase{phase}.rtdp"))
}

fn run_phase(
    plan: &TrainPlan,
    corpus: &Corpus,
    out: &Path,
    state: &mut TrainState,
    metrics: &mut MetricsWriter,
    budget: &mut Option<u64>,
    progress: bool,
) -> Result<()> {
    let idx = state.phase;
    let phase = plan.phases[idx];
    let latest = out.join(CHECKPOINT_FILE);
    let start = state.step;
    let end = budget.map_or(phase.steps, |b| phase.steps.min(start + b));

    if start < end {
        let accum = plan.accumulation(&phase);
        let micro = plan.micro_batch;
        let schedule = Schedule::new(phase.warmup, phase.steps)?;
        let seed = derive(plan.seed, idx as u64 + 1);
        let mut packer = corpus.packer(phase.max_len)?;
        packer.skip_rows(start * phase.batch_size as u64);
        let rate = plan.mask_rate;
        let report_every = (phase.steps / 20).max(1);

        thread::scope(|s| -> Result<()> {
            let (tx, rx) = sync_channel::<Result<Vec<MaskedBatch>>>(plan.prefetch);
            s.spawn(move || {
                for step in start..end {
                    let batches: Result<Vec<MaskedBatch>> = (0..accum)
                        .map(|m| {
                            let first = (step as usize * accum + m) * micro;
                            Ok(packer.next_batch(micro, rate, seed, first)?)
                        })
                        .collect();
                    let failed = batches.is_err();
                    if tx.send(batches).is_err() || failed {
                        break;
                    }
                }
            });
            for step in start..end {
                let batches = rx.recv().expect("producer yields every step")?;
                let t0 = Instant::now();
                let lr = lr_at(step + 1, schedule, plan.optimizer.lr_peak);
                let stats = match train_step(&mut state.model, &mut state.optimizer, &batches, plan.rtd_weight, lr) {
                    Ok((stats, _)) => stats,
                    Err(rtd_core::Error::NonFinite(detail)) => {
                        state.save(&latest)?;
                        return Err(Error::Diverged {
                            phase: idx + 1,
                            step: step + 1,
                            detail,
                            checkpoint: latest.clone(),
                        });
                    }
                    Err(e) => return Err(e.into()),
                };
                state.step = step + 1;
                state.tokens_seen += phase.tokens_per_step();
                let record = MetricsRecord {
                    step: state.step,
                    phase: idx + 1,
                    l_mlm: stats.l_mlm,
                    l_rtd: stats.l_rtd,
                    combined: stats.combined,
                    lr,
                    tokens_seen: state.tokens_seen,
                    wall_ms: t0.elapsed().as_millis() as u64,
                    disc_accuracy: stats.disc_accuracy,
                };
                metrics.write(&record)?;
                if let Some(b) = budget.as_mut() {
                    *b -= 1;
                }
                if progress && (state.step.is_multiple_of(report_every) || state.step == 1) {
                    eprintln!(
                        "phase {} step {}/{} combined {:.4} mlm {:.4} rtd {:.4} acc {:.3} lr {:.3e}",
                        idx + 1,
                        state.step,
                        phase.steps,
                        stats.combined,
                        stats.l_mlm,
                        stats.l_rtd,
                        stats.disc_accuracy,
                        lr
                    );
                }
                if state.step.is_multiple_of(plan.checkpoint_every) && state.step < phase.steps {
                    state.save(&latest)?;
                }
            }
            Ok(())
        })?;
    }

    if state.step == phase.steps {
        state.phase += 1;
        state.step = 0;
        state.save(&phase_checkpoint_path(out, idx + 1))?;
    }
    state.save(&latest)
}

/// Writes the deployable discriminator: its own parameters, the position
/// table and `E_D = E_G + E_Delta`. Generator weights, `E_Delta` and
/// optimizer state are left out.
pub fn export_final(checkpoint: &Path, out: &Path) -> Result<Container> {
    let source = Container::load(checkpoint)?;
    let model = model_from_container(&source, 0)?;
    let mut c = Container::new(model.config());
    c.tensors = discriminator_export(&model)?;
    c.save(out)?;
    Ok(c)
}
