//! End-to-end acceptance suite. Runs every criterion in order, prints one
//! PASS/FAIL line each and exits non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::*;
use rtd_core::data::mask_count;
use rtd_core::model::{finalize_embeddings, EmbeddingSharing, Model, ModelConfig, ModelOptions};
use rtd_core::objective::majority_baseline;
use rtd_core::optim::{lr_at, Lamb, LambConfig, Schedule};
use rtd_core::tape::ParamStore;
use rtd_core::tensor::Tensor;
use rtd_core::train::{corrupt, evaluate};
use rtd_core::verify::*;
use rtd_pretrain::checkpoint::Container;
use rtd_pretrain::config::TrainPlan;
use rtd_pretrain::corpus::Corpus;
use rtd_pretrain::metrics::{read_metrics, MetricsRecord};
use rtd_pretrain::trainer::*;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "token_budget", budget: secs(1), run: token_budget },
        Criterion { id: 2, name: "full_model_gradient", budget: secs(300), run: full_model_gradient },
        Criterion { id: 3, name: "gdes_isolation", budget: secs(60), run: gdes_isolation },
        Criterion { id: 4, name: "shared_projection", budget: secs(60), run: shared_projection },
        Criterion { id: 5, name: "attention_oracle", budget: secs(60), run: attention_oracle },
        Criterion { id: 6, name: "rtd_coverage", budget: secs(10), run: rtd_coverage },
        Criterion { id: 7, name: "toy_smoke", budget: secs(900), run: toy_smoke },
        Criterion { id: 8, name: "two_phase_carry_over", budget: secs(300), run: two_phase },
        Criterion { id: 9, name: "determinism_and_recovery", budget: secs(300), run: determinism },
        Criterion { id: 10, name: "export_contract", budget: secs(10), run: export_contract },
        Criterion { id: 11, name: "lamb_scalar_oracle", budget: secs(1), run: lamb_oracle },
    ];
    let mut failed = 0;
    for c in &criteria {
        let t0 = Instant::now();
        let (ok, detail) = match (c.run)() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let took = t0.elapsed();
        let in_time = took <= c.budget;
        let pass = ok && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "{} {:>2} {:<26} {:>8.2}s/{}s{} {detail}",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            took.as_secs_f64(),
            c.budget.as_secs(),
            if in_time { "" } else { " over budget" },
        );
    }
    println!("{} criteria, {failed} failed", criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn token_budget() -> Outcome {
    let path = configs().join("base.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_rtdp"))
        .args(["account", "--config", path.to_str().unwrap()])
        .output()?;
    let text = String::from_utf8(out.stdout)?;
    let printed = text
        .lines()
        .find_map(|l| l.strip_prefix("total: "))
        .unwrap_or("<missing>")
        .to_string();
    let expected: u64 = 67_584 * 128 * 10_000 + 27_648 * 512 * 3_300;
    let plan = TrainPlan::load(&path)?;
    let base_shape = plan.model_config() == ModelConfig::base();
    Ok((
        out.status.success() && printed == "133,221,580,800" && expected == 133_221_580_800 && base_shape,
        format!("printed {printed}"),
    ))
}

fn tiny() -> ModelConfig {
    let c = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        hidden: 16,
        vocab_size: 37,
        max_rel_distance: 4,
        generator_hidden: 8,
        generator_layers: 2,
        conv_kernel: 3,
    };
    assert_eq!(c, ModelConfig::tiny());
    c
}

fn report(r: CheckReport) -> Outcome {
    Ok((r.passed, r.to_string()))
}

fn full_model_gradient() -> Outcome {
    let r = full_model_gradient_check(tiny(), 0, 2, 8, 50.0)?;
    Ok((r.passed && r.worst_rel_error <= 1e-3, r.to_string()))
}

fn gdes_isolation() -> Outcome {
    let gdes = Model::<f32>::new(tiny(), 0)?;
    let held = gdes_isolation_sweep(&gdes, 100, 8, 0)?;
    let naive = Model::<f32>::with_options(
        tiny(),
        0,
        ModelOptions {
            sharing: EmbeddingSharing::Naive,
            ..Default::default()
        },
    )?;
    let ablation = gdes_isolation_sweep(&naive, 100, 8, 0)?;
    Ok((
        held.passed && !ablation.passed,
        format!("{}; naive ablation {}", held.detail, if ablation.passed { "did not leak" } else { "leaks" }),
    ))
}

fn shared_projection() -> Outcome {
    let mut three = tiny();
    three.n_layers = 3;
    three.generator_layers = 3;
    let masked = synthetic_masked_batch(three.vocab_size, 2, 8, 0.15, 0)?;
    report(shared_projection_check(three, 0, &masked)?)
}

fn attention_oracle() -> Outcome {
    report(attention_oracle_check(50, 0)?)
}

fn rtd_coverage() -> Outcome {
    let model = Model::<f32>::new(tiny(), 0)?;
    let masked = dense_masked_batch(tiny().vocab_size, 8, 128, 0.15, 0)?;
    let corrupted = corrupt(&model, &masked)?;
    let ratio = rtd_coverage_ratio(&corrupted);
    // Every position is supervised; CLS and SEP cannot be masked.
    let expected = 128.0 / mask_count(126, 0.15) as f64;
    Ok((
        ratio >= 6.0 && (ratio - expected).abs() < 1e-12,
        format!("ratio={ratio:.3} expected={expected:.3}"),
    ))
}

fn toy_smoke() -> Outcome {
    let plan = smoke_plan();
    assert_eq!(plan.accumulation(&plan.phases[0]), 4);
    let (train, held) = smoke_corpus();
    let corpus = Corpus::new(train, &plan)?;
    let dir = tempfile::tempdir()?;
    let run = pretrain(
        &plan,
        &corpus,
        dir.path(),
        None,
        RunOptions {
            stop_after: None,
            progress: false,
        },
    )?;
    let log = read_metrics(&dir.path().join(METRICS_FILE))?;
    let mean = |rs: &[MetricsRecord]| rs.iter().map(|r| r.combined).sum::<f64>() / rs.len() as f64;
    let first = mean(&log[..10]);
    let last = mean(&log[log.len() - 10..]);
    let drop = 1.0 - last / first;

    let held = Corpus {
        vocab: corpus.vocab.clone(),
        documents: held,
    };
    let mut packer = held.packer(plan.phases[0].max_len)?;
    let batch = packer.next_batch(32, plan.mask_rate, 0x5eed, 0)?;
    let (stats, corrupted) = evaluate(&run.state.model, &batch, plan.rtd_weight)?;
    let baseline = majority_baseline(&corrupted.rtd_labels);
    let margin = 100.0 * (stats.disc_accuracy - baseline);
    Ok((
        log.len() == 300 && drop >= 0.30 && margin >= 5.0,
        format!(
            "combined {first:.3} -> {last:.3} (drop {:.1}%); held-out accuracy {:.4} vs baseline {baseline:.4} (+{margin:.2} points)",
            100.0 * drop,
            stats.disc_accuracy
        ),
    ))
}

fn param_names(c: &Container) -> BTreeSet<String> {
    c.tensors
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| !n.starts_with("lamb."))
        .collect()
}

fn two_phase() -> Outcome {
    let plan = toy_plan(512, vec![phase(64, 100, 10, 8), phase(256, 50, 5, 8)], 8);
    let (train, _) = smoke_corpus();
    let corpus = Corpus::new(train, &plan)?;
    let dir = tempfile::tempdir()?;
    let quiet = RunOptions {
        stop_after: None,
        progress: false,
    };
    let fresh: BTreeSet<String> = TrainState::fresh(&plan)?.model.params().names().map(String::from).collect();
    pretrain(&plan, &corpus, dir.path(), None, quiet)?;
    let p1 = param_names(&Container::load(&phase_checkpoint_path(dir.path(), 1))?);
    let p2 = param_names(&Container::load(&phase_checkpoint_path(dir.path(), 2))?);
    let log = read_metrics(&dir.path().join(METRICS_FILE))?;
    let finite = log.iter().all(|r| r.combined.is_finite());
    Ok((
        fresh == p1 && p1 == p2 && log.len() == 150 && finite,
        format!("{} parameters in both phases, {} steps logged", p2.len(), log.len()),
    ))
}

fn small_plan() -> TrainPlan {
    let mut plan = toy_plan(96, vec![phase(16, 6, 2, 8), phase(32, 4, 1, 4)], 4);
    plan.model.hidden = 32;
    plan.model.generator_hidden = 16;
    plan.model.generator_layers = 1;
    plan.checkpoint_every = 2;
    plan
}

fn stripped(dir: &Path) -> Result<Vec<MetricsRecord>, rtd_pretrain::Error> {
    Ok(read_metrics(&dir.join(METRICS_FILE))?
        .iter()
        .map(MetricsRecord::without_timing)
        .collect())
}

fn determinism() -> Outcome {
    let plan = small_plan();
    let corpus = Corpus::new(markov_corpus(300, 60, 3, 5, 6), &plan)?;
    let quiet = || RunOptions {
        stop_after: None,
        progress: false,
    };
    let base = tempfile::tempdir()?;
    pretrain(&plan, &corpus, base.path(), None, quiet())?;
    let reference = stripped(base.path())?;
    let final_ckpt = std::fs::read(base.path().join(CHECKPOINT_FILE))?;
    let total: u64 = plan.phases.iter().map(|p| p.steps).sum();

    let mut mismatches = Vec::new();
    for stop in 1..total {
        let dir = tempfile::tempdir()?;
        let opts = RunOptions {
            stop_after: Some(stop),
            progress: false,
        };
        pretrain(&plan, &corpus, dir.path(), None, opts)?;
        let ckpt = dir.path().join(CHECKPOINT_FILE);
        pretrain(&plan, &corpus, dir.path(), Some(&ckpt), quiet())?;
        if stripped(dir.path())? != reference || std::fs::read(&ckpt)? != final_ckpt {
            mismatches.push(stop);
        }
    }

    let bytes = Container::load(&base.path().join(CHECKPOINT_FILE))?.to_bytes()?;
    let roundtrip = Container::from_bytes(&bytes)?.to_bytes()? == bytes && bytes == final_ckpt;
    Ok((
        mismatches.is_empty() && roundtrip,
        format!(
            "resumed after each of steps 1..{}: mismatches {mismatches:?}; roundtrip bit-exact {roundtrip}",
            total - 1
        ),
    ))
}

fn export_contract() -> Outcome {
    let mut plan = small_plan();
    plan.phases.truncate(1);
    let corpus = Corpus::new(markov_corpus(300, 60, 3, 5, 6), &plan)?;
    let dir = tempfile::tempdir()?;
    let run = pretrain(
        &plan,
        &corpus,
        dir.path(),
        None,
        RunOptions {
            stop_after: None,
            progress: false,
        },
    )?;
    let path = dir.path().join("model.rtdp");
    export_final(&dir.path().join(CHECKPOINT_FILE), &path)?;
    let exported = Container::load(&path)?;
    let model = &run.state.model;
    let e_g = &model.params().get(model.e_g()).value;
    let e_delta = &model.params().get(model.e_delta()).value;
    let e_d = exported.tensor(rtd_core::model::E_D).ok_or("E_D missing")?;
    let summed = e_d == &finalize_embeddings(e_g, e_delta)?;
    let trained_delta = e_delta.data().iter().any(|&x| x != 0.0);
    let leaked: Vec<&str> = exported
        .tensors
        .iter()
        .map(|(n, _)| n.as_str())
        .filter(|n| {
            Model::<f32>::is_generator_param(n)
                || *n == rtd_core::model::E_G
                || *n == rtd_core::model::E_DELTA
                || n.starts_with("lamb.")
        })
        .collect();
    Ok((
        summed && trained_delta && leaked.is_empty(),
        format!("{} tensors; E_D = E_G + E_Delta: {summed}; leaked {leaked:?}", exported.tensors.len()),
    ))
}

/// One LAMB step written out directly from the update rule.
fn hand_lamb(c: &LambConfig, w: &[f64], g: &[f64], decay: bool, lr: f64) -> Vec<f64> {
    let m: Vec<f64> = g.iter().map(|g| (1.0 - c.beta1) * g).collect();
    let v: Vec<f64> = g.iter().map(|g| (1.0 - c.beta2) * g * g).collect();
    let (bc1, bc2) = (1.0 - c.beta1, 1.0 - c.beta2);
    let wd = if decay { c.weight_decay } else { 0.0 };
    let u: Vec<f64> = (0..w.len())
        .map(|i| (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps) + wd * w[i])
        .collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let trust = (norm(w) / norm(&u)).min(c.trust_clip);
    w.iter().zip(&u).map(|(w, u)| w - lr * trust * u).collect()
}

fn lamb_oracle() -> Outcome {
    let config = LambConfig::default();
    let shapes: [(&str, &[usize], bool); 2] = [("w", &[3, 4], false), ("b", &[4], true)];
    let mut store = ParamStore::<f64>::new();
    let mut expected = Vec::new();
    for (k, (name, shape, exempt)) in shapes.iter().enumerate() {
        let n: usize = shape.iter().product();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 + k * 3) % 11) as f64 / 11.0 - 0.4).collect();
        let g: Vec<f64> = (0..n).map(|i| ((i * 5 + k) % 13) as f64 / 6.5 - 1.0).collect();
        let id = store.register(*name, Tensor::from_f64(shape, &w)?, *exempt)?;
        store.get_mut(id).grad = Tensor::from_f64(shape, &g)?;
        expected.push(hand_lamb(&config, &w, &g, !exempt, config.lr_peak));
    }
    let mut lamb = Lamb::new(config, &store)?;
    lamb.step(&mut store, config.lr_peak)?;
    let worst = store
        .iter()
        .zip(&expected)
        .map(|((_, p), e)| relative_error(p.value.data(), e))
        .fold(0.0, f64::max);

    let base = TrainPlan::base();
    let peaks: Vec<f64> = base
        .phases
        .iter()
        .map(|p| Ok(lr_at(p.warmup, Schedule::new(p.warmup, p.steps)?, base.optimizer.lr_peak)))
        .collect::<Result<_, rtd_core::Error>>()?;
    let betas = (config.beta1, config.beta2) == (0.878, 0.974);
    Ok((
        worst <= 1e-10 && peaks.iter().all(|&p| p == 6e-3) && betas,
        format!("first-step rel error {worst:.2e}; lr at warm-up end {peaks:?}"),
    ))
}
