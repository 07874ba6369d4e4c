use criterion::{criterion_group, criterion_main, Criterion};

use advlab_bench::{bench_data, bench_model};
use advlab_core::attack::{pgd, AttackSpec};
use advlab_core::landscape::hessian_spectrum;
use advlab_core::objective::{advlc_objective, standard_loss, WeightScheme};
use advlab_core::HvpMode;

fn forward_backward(c: &mut Criterion) {
    let model = bench_model(64, 64, 10);
    let data = bench_data(64, 10, 64);
    c.bench_function("forward_backward_64x64", |b| {
        b.iter(|| {
            let g = standard_loss(&model, &data.inputs, &data.labels).unwrap();
            let params: Vec<_> = g.params.iter().collect();
            g.tape.grad(&g.loss, &params).unwrap()
        })
    });
}

fn pgd10_attack(c: &mut Criterion) {
    let model = bench_model(64, 64, 10);
    let data = bench_data(64, 10, 64);
    let spec = AttackSpec::pgd(0.03, 10);
    c.bench_function("pgd10_64x64", |b| {
        b.iter(|| pgd(&model, &data.inputs, &data.labels, &spec).unwrap())
    });
}

fn spectrum(c: &mut Criterion) {
    let model = bench_model(16, 24, 4);
    let data = bench_data(16, 4, 1);
    c.bench_function("hessian_spectrum_d16_k8", |b| {
        b.iter(|| {
            hessian_spectrum(
                &model,
                &data.inputs.row(0),
                data.labels[0],
                8,
                100,
                1e-4,
                HvpMode::Exact,
                5,
            )
            .unwrap()
        })
    });
}

fn advlc(c: &mut Criterion) {
    let model = bench_model(64, 64, 10);
    let data = bench_data(64, 10, 64);
    let spec = AttackSpec::fgsm(0.03);
    let pert = pgd(&model, &data.inputs, &data.labels, &spec).unwrap();
    c.bench_function("advlc_objective_64x64", |b| {
        b.iter(|| {
            advlc_objective(
                &model,
                &data.inputs,
                &data.labels,
                &pert.delta,
                0.4,
                &WeightScheme::TopN { n: 64 },
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, forward_backward, pgd10_attack, spectrum, advlc);
criterion_main!(benches);
