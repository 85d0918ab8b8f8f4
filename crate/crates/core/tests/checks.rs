use rtd_core::data::make_masked_batch;
use rtd_core::model::{EmbeddingSharing, Model, ModelConfig, ModelOptions};
use rtd_core::verify::*;

fn tiny() -> ModelConfig {
    ModelConfig::tiny()
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let r = full_model_gradient_check(tiny(), 7, 2, 8, 50.0).unwrap();
    println!("{r}");
    assert!(r.passed, "{r}");
}

#[test]
fn gdes_isolation_holds_and_naive_ablation_fails() {
    let model = Model::<f32>::new(tiny(), 3).unwrap();
    let naive = Model::<f32>::with_options(
        tiny(),
        3,
        ModelOptions {
            sharing: EmbeddingSharing::Naive,
            ..Default::default()
        },
    )
    .unwrap();
    let batch = synthetic_masked_batch(37, 4, 8, 0.15, 11).unwrap();
    let r = gdes_isolation_check(&model, &batch).unwrap();
    assert!(r.passed, "{r}");
    let r = gdes_isolation_check(&naive, &batch).unwrap();
    assert!(!r.passed, "{r}");
    assert_eq!(r.location.as_deref(), Some("embeddings.E_G"));
}

#[test]
fn shared_projection_gradient_is_layer_sum() {
    let mut cfg = tiny();
    cfg.n_layers = 3;
    cfg.generator_layers = 3;
    let batch = synthetic_masked_batch(37, 2, 8, 0.15, 5).unwrap();
    let r = shared_projection_check(cfg, 9, &batch).unwrap();
    println!("{r}");
    assert!(r.passed, "{r}");
}

#[test]
fn shared_projection_single_layer_coincides() {
    let mut cfg = tiny();
    cfg.n_layers = 1;
    cfg.generator_layers = 1;
    let batch = synthetic_masked_batch(37, 2, 8, 0.15, 5).unwrap();
    let r = shared_projection_check(cfg, 9, &batch).unwrap();
    assert!(r.passed && r.worst_rel_error == 0.0, "{r}");
}

#[test]
fn attention_matches_naive_oracle() {
    let r = attention_oracle_check(50, 1).unwrap();
    println!("{r}");
    assert!(r.passed, "{r}");
}

#[test]
fn coverage_ratio_at_default_rate() {
    let model = Model::<f32>::new(tiny(), 1).unwrap();
    let batch = synthetic_masked_batch(37, 4, 128, 0.15, 2).unwrap();
    let c = rtd_core::train::corrupt(&model, &batch).unwrap();
    let r = rtd_coverage_audit(&c);
    assert!(r.passed, "{r}");
    let _ = make_masked_batch;
}
