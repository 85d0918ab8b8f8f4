#![allow(dead_code)]

use rand::Rng;
use rtd_core::optim::LambConfig;
use rtd_core::rng::seeded;
use rtd_pretrain::config::{ModelSection, OptimizerSection, PhaseConfig, TrainPlan};

/// Documents walked along a sparse random successor table: every word has
/// `fan` allowed followers. `chain_seed` fixes the table, `doc_seed` the walks,
/// so held-out text can share the grammar without sharing documents.
pub fn markov_corpus(
    n_docs: usize,
    n_words: usize,
    fan: usize,
    chain_seed: u64,
    doc_seed: u64,
) -> Vec<String> {
    let mut rng = seeded(chain_seed);
    let next: Vec<Vec<usize>> = (0..n_words)
        .map(|_| (0..fan).map(|_| rng.random_range(0..n_words)).collect())
        .collect();
    let mut rng = seeded(doc_seed);
    (0..n_docs)
        .map(|_| {
            let mut w = rng.random_range(0..n_words);
            let len = rng.random_range(12..=30);
            let mut words = Vec::with_capacity(len);
            for _ in 0..len {
                words.push(format!("w{w}"));
                w = next[w][rng.random_range(0..fan)];
            }
            words.join(" ")
        })
        .collect()
}

pub fn toy_plan(vocab_size: usize, phases: Vec<PhaseConfig>, micro_batch: usize) -> TrainPlan {
    TrainPlan {
        seed: 7,
        micro_batch,
        rtd_weight: 50.0,
        mask_rate: 0.15,
        checkpoint_every: 500,
        prefetch: 4,
        vocab: None,
        model: ModelSection {
            n_layers: 2,
            n_heads: 4,
            hidden: 64,
            vocab_size,
            max_rel_distance: 16,
            generator_hidden: 32,
            generator_layers: 2,
            conv_kernel: 3,
        },
        optimizer: OptimizerSection::from(LambConfig::default()),
        phases,
    }
}

pub fn phase(max_len: usize, steps: u64, warmup: u64, batch_size: usize) -> PhaseConfig {
    PhaseConfig {
        max_len,
        steps,
        warmup,
        batch_size,
    }
}

/// The 300-step smoke run: vocab 512, two 64-wide layers, micro-batch 8 with
/// accumulation 4. The generator is a quarter of the discriminator's width
/// and one layer deep, and 30% of tokens are masked; with 15% and a stronger
/// generator too few detectable replacements survive 300 steps.
pub fn smoke_plan() -> TrainPlan {
    let mut plan = toy_plan(512, vec![phase(64, 300, 30, 32)], 8);
    plan.mask_rate = 0.3;
    plan.optimizer.lr_peak = 3e-2;
    plan.model.generator_hidden = 16;
    plan.model.generator_layers = 1;
    plan
}

/// Training text and a disjoint held-out set from the same successor table.
pub fn smoke_corpus() -> (Vec<String>, Vec<String>) {
    (
        markov_corpus(4000, 507, 3, 1, 1),
        markov_corpus(64, 507, 3, 1, 99),
    )
}
