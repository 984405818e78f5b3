use rgpt_core::harness::{run_experiment, ExperimentConfig};

fn run(separation: &str) -> f64 {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&[
        "d=16",
        "n=8",
        "m=8",
        "layers=2",
        "heads=2",
        "ffn_mult=2",
        "patch_dim=8",
        "vocab=64",
        "n_train=600",
        "n_val=30",
        "n_test=400",
        "epochs=10",
        "missing_rate=0",
        "seed=3",
    ])
    .unwrap();
    cfg.set("separation", separation).unwrap();
    run_experiment(&cfg).unwrap().report.accuracy
}

#[test]
fn uninformative_data_stays_near_chance() {
    let acc = run("0");
    // 400 test instances: three standard errors around 0.5 is about 0.075.
    assert!((acc - 0.5).abs() < 0.08, "accuracy {acc}");
}

#[test]
fn separable_data_is_learned() {
    let acc = run("2");
    assert!(acc > 0.75, "accuracy {acc}");
}
