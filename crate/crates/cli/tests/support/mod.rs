//! Shared fixtures for the acceptance criteria.

use std::sync::OnceLock;

use advlab_core::attack::{AttackMethod, AttackSpec};
use advlab_core::data::synth_gaussians;
use advlab_core::landscape::hessian_spectrum;
use advlab_core::objective::cross_entropy;
use advlab_core::train::{run_experiment, sgd_step, OptimizerState, Scheme, TrainPlan, TrainState};
use advlab_core::{
    init_model, Activation, Dataset, HvpMode, Model, ModelSpec, NamedAttack, Tape, Tensor, Var,
};

/// Small softplus MLP plus a data batch; ten distinct shapes.
pub fn softplus_mlp(i: u64) -> (Model, Dataset) {
    let dims = [4, 5, 6, 7, 8, 4, 5, 6, 7, 8];
    let hidden = [6, 8, 5, 7, 9, 10, 6, 8, 5, 7];
    let classes = [2, 3, 2, 3, 4, 3, 2, 4, 3, 2];
    let idx = (i % 10) as usize;
    let d = dims[idx];
    let model = init_model(
        ModelSpec::Mlp {
            sizes: vec![d, hidden[idx], classes[idx]],
        },
        Activation::Softplus,
        300 + i,
    )
    .unwrap();
    let data = synth_gaussians(d, classes[idx], 6, 0.7, 0.2, 400 + i);
    (model, data)
}

/// Scalar per-sample loss graph with x tracked as a [1, d] leaf.
pub fn sample_graph(model: &Model, x_row: &Tensor, y: usize) -> (Tape, Var, Var) {
    let d = x_row.numel();
    let tape = Tape::new();
    let xv = tape.leaf(x_row.reshaped(vec![1, d]).unwrap());
    let logits = model.forward_logits(&tape, &xv).unwrap();
    let loss = cross_entropy(&logits, &[y]).unwrap().sum().unwrap();
    (tape, xv, loss)
}

pub fn model_6d(seed: u64) -> Model {
    init_model(
        ModelSpec::Mlp {
            sizes: vec![6, 8, 2],
        },
        Activation::Relu,
        seed,
    )
    .unwrap()
}

pub fn named(name: &str, method: AttackMethod, spec: AttackSpec) -> NamedAttack {
    NamedAttack {
        name: name.into(),
        method,
        spec,
    }
}

pub fn train_model(
    scheme: Scheme,
    train: &Dataset,
    test: &Dataset,
    sizes: Vec<usize>,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Model {
    let plan = TrainPlan {
        scheme,
        epochs,
        lr_stages: vec![lr, lr / 10.0],
        decay_epochs: vec![epochs.saturating_sub(2).max(1)],
        momentum: 0.9,
        weight_decay: 5e-4,
        batch_size: 32,
        swa_start: None,
        shuffle_seed: seed,
        metric_seed: 0,
        eval_attack: named("eval", AttackMethod::Fgsm, AttackSpec::fgsm(0.0)),
        metrics: None,
    };
    let model = init_model(ModelSpec::Mlp { sizes }, Activation::Relu, seed).unwrap();
    run_experiment(&plan, TrainState::fresh(model, &plan), train, test, &mut |_| Ok(()))
        .unwrap()
        .state
        .model
}

/// PGD10-trained model at eps 0.05 with its train/test splits, built once.
pub fn trained_at() -> (Model, Dataset, Dataset) {
    static CACHE: OnceLock<(Model, Dataset, Dataset)> = OnceLock::new();
    CACHE
        .get_or_init(|| {
            let train = synth_gaussians(8, 3, 180, 0.8, 0.12, 50);
            let test = synth_gaussians(8, 3, 90, 0.8, 0.12, 51);
            let model = train_model(
                Scheme::At {
                    attack: named("pgd10", AttackMethod::Pgd, AttackSpec::pgd(0.05, 10)),
                },
                &train,
                &test,
                vec![8, 16, 3],
                8,
                0.05,
                13,
            );
            (model, train, test)
        })
        .clone()
}

/// Sparse prototype-mixture images: 784-d, values in [0,1], ten classes
/// with 30 sub-modes each. The prototype set is fixed; the seed only
/// drives which modes are sampled and the pixel noise, so differently
/// seeded splits share class structure.
pub fn mixture_data(n: usize, seed: u64) -> Dataset {
    use rand::Rng;
    use rand::SeedableRng;
    let (d, classes, protos, density, noise) = (784usize, 10usize, 30usize, 0.2, 0.15);
    let mut prng = rand_chacha::ChaCha8Rng::seed_from_u64(0x4D49_5854);
    let prototypes: Vec<Vec<f64>> = (0..classes * protos)
        .map(|_| {
            (0..d)
                .map(|_| {
                    if prng.gen_bool(density) {
                        prng.gen_range(0.4..1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut flat = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let p = rng.gen_range(0..protos);
        let proto = &prototypes[c * protos + p];
        for j in 0..d {
            let v: f64 = proto[j] + rng.gen_range(-noise..noise);
            flat.push(v.clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    Dataset {
        inputs: Tensor::matrix(n, d, flat).unwrap(),
        labels,
        name: "mixture".into(),
        split: advlab_core::Split::Train,
        class_count: classes,
    }
}

/// Mean Hessian spectral norm over a fixed metric subset.
pub fn mean_hs(model: &Model, data: &Dataset, n: usize) -> f64 {
    let sub = data.metric_subset(n, 0);
    let mut acc = 0.0;
    for i in 0..sub.len() {
        acc += hessian_spectrum(
            model,
            &sub.inputs.row(i),
            sub.labels[i],
            6,
            120,
            1e-6,
            HvpMode::Exact,
            i as u64,
        )
        .unwrap()
        .hs;
    }
    acc / sub.len() as f64
}

/// One SGD epoch over fixed (already perturbed) inputs, in index order.
pub fn one_epoch_on(model: &Model, x: &Tensor, y: &[usize]) -> Model {
    let mut m = model.clone();
    let mut opt = OptimizerState::new(&m, 0.9, 5e-4, 0.05);
    let n = y.len();
    let bs = 32;
    let mut i = 0;
    let mut batch_idx = 0;
    while i < n {
        let hi = (i + bs).min(n);
        let xb = Tensor::matrix(
            hi - i,
            x.shape()[1],
            (i..hi).flat_map(|r| x.row(r).data().to_vec()).collect(),
        )
        .unwrap();
        let yb: Vec<usize> = y[i..hi].to_vec();
        let graph = advlab_core::objective::standard_loss(&m, &xb, &yb).unwrap();
        let grads: Vec<Tensor> = graph
            .tape
            .grad(&graph.loss, &graph.params.iter().collect::<Vec<_>>())
            .unwrap()
            .into_iter()
            .map(|v| v.value())
            .collect();
        sgd_step(&mut m, &grads, &mut opt, 0, batch_idx).unwrap();
        i = hi;
        batch_idx += 1;
    }
    m
}

/// Spearman rank correlation; assumes no exact ties.
pub fn spearman(pairs: &[(f64, f64)]) -> f64 {
    let rank = |vals: Vec<f64>| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let mut r = vec![0.0; vals.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let rx = rank(pairs.iter().map(|p| p.0).collect());
    let ry = rank(pairs.iter().map(|p| p.1).collect());
    let n = pairs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

pub fn infra_train_config() -> String {
    r#"{
  "dataset": {"kind": "synthetic", "dim": 8, "classes": 2, "train_count": 80, "test_count": 40,
              "separation": 0.6, "noise": 0.12, "seed": 7},
  "model": {"kind": "mlp", "sizes": [8, 10, 2]},
  "init_seed": 3,
  "plan": {
    "scheme": {"kind": "at", "attack": {"name": "fgsm", "method": "fgsm",
      "spec": {"epsilon": 0.03, "steps": 1, "step_size": 0.03, "init": "none", "seed": 0}}},
    "epochs": 6,
    "lr_stages": [0.05, 0.005],
    "decay_epochs": [2],
    "momentum": 0.9,
    "weight_decay": 0.0005,
    "batch_size": 20,
    "swa_start": 4,
    "shuffle_seed": 1,
    "metric_seed": 2,
    "eval_attack": {"name": "fgsm", "method": "fgsm",
      "spec": {"epsilon": 0.03, "steps": 1, "step_size": 0.03, "init": "none", "seed": 0}},
    "metrics": null
  }
}"#
    .to_string()
}
