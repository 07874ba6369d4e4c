//! Cross-module flows exercised through the public API.

use advlab_core::attack::{check_invariants, run_attack, AttackMethod, AttackSpec};
use advlab_core::data::{load_idx, synth_gaussians, write_idx};
use advlab_core::landscape::{landscape_report, MetricOptions};
use advlab_core::train::{run_experiment, Scheme, TrainPlan, TrainState};
use advlab_core::{init_model, Activation, ModelSpec, NamedAttack};

use proptest::prelude::*;

fn small_attack(name: &str, method: AttackMethod, spec: AttackSpec) -> NamedAttack {
    NamedAttack {
        name: name.into(),
        method,
        spec,
    }
}

#[test]
fn adversarial_training_end_to_end() {
    let train = synth_gaussians(6, 3, 90, 0.7, 0.1, 41);
    let test = synth_gaussians(6, 3, 45, 0.7, 0.1, 42);
    let eps = 0.04;
    let plan = TrainPlan {
        scheme: Scheme::At {
            attack: small_attack("pgd5", AttackMethod::Pgd, AttackSpec::pgd(eps, 5)),
        },
        epochs: 5,
        lr_stages: vec![0.1, 0.01],
        decay_epochs: vec![3],
        momentum: 0.9,
        weight_decay: 5e-4,
        batch_size: 30,
        swa_start: Some(3),
        shuffle_seed: 1,
        metric_seed: 2,
        eval_attack: small_attack("pgd10", AttackMethod::Pgd, AttackSpec::pgd(eps, 10)),
        metrics: None,
    };
    let model = init_model(ModelSpec::Mlp { sizes: vec![6, 12, 3] }, Activation::Relu, 9).unwrap();
    let result = run_experiment(&plan, TrainState::fresh(model, &plan), &train, &test, &mut |_| {
        Ok(())
    })
    .unwrap();

    assert_eq!(result.rows.len(), 5);
    assert!(result.swa_model.is_some());
    assert!(result.best_robust_acc >= result.rows[0].test_robust_acc - 1e-12);
    let last = result.rows.last().unwrap();
    assert!(last.train_clean_loss < result.rows[0].train_clean_loss);

    // Landscape report on the trained model stays finite.
    let mut opts = MetricOptions::desk_default(eps);
    opts.subset = 10;
    opts.hs_k = 4;
    opts.hs_iters = 60;
    let report = landscape_report(&result.state.model, &test, &opts).unwrap();
    assert!(report.ig.is_finite() && report.hs.is_finite() && report.av.is_finite());
    assert_eq!(report.effectiveness.len(), 2);
}

#[test]
fn idx_files_round_trip_through_disk() {
    let data = synth_gaussians(16, 4, 30, 0.5, 0.1, 3);
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images.idx");
    let labels = dir.path().join("labels.idx");
    write_idx(&data, 4, 4, &images, &labels).unwrap();
    let back = load_idx(&images, &labels).unwrap();
    assert_eq!(back.len(), 30);
    assert_eq!(back.inputs.shape(), &[30, 16]);
    assert_eq!(back.labels, data.labels);
    // Quantization to u8 and back stays within half a level.
    for (a, b) in data.inputs.data().iter().zip(back.inputs.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12, "{a} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attacks_always_respect_ball_and_box(
        seed in 0u64..1000,
        eps in 1e-3f64..0.2,
        steps in 1usize..6,
        method_idx in 0usize..4,
    ) {
        let method = [
            AttackMethod::Fgsm,
            AttackMethod::FgsmR,
            AttackMethod::FgsmN,
            AttackMethod::Pgd,
        ][method_idx];
        let data = synth_gaussians(5, 2, 12, 0.6, 0.2, seed);
        let model = init_model(
            ModelSpec::Mlp { sizes: vec![5, 7, 2] },
            Activation::Relu,
            seed.wrapping_add(1),
        )
        .unwrap();
        let spec = AttackSpec {
            epsilon: eps,
            steps,
            step_size: eps / 2.0,
            init: advlab_core::InitMode::UniformRandom,
            seed,
        };
        let pert = run_attack(method, &model, &data.inputs, &data.labels, &spec).unwrap();
        prop_assert!(check_invariants(&data.inputs, &pert));
    }
}
