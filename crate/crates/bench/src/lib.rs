//! Shared fixtures for the criterion benchmarks.

use advlab_core::data::synth_gaussians;
use advlab_core::{init_model, Activation, Dataset, Model, ModelSpec};

pub fn bench_model(dim: usize, hidden: usize, classes: usize) -> Model {
    init_model(
        ModelSpec::Mlp {
            sizes: vec![dim, hidden, classes],
        },
        Activation::Relu,
        17,
    )
    .expect("bench model")
}

pub fn bench_data(dim: usize, classes: usize, n: usize) -> Dataset {
    synth_gaussians(dim, classes, n, 0.6, 0.12, 23)
}
