use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use elsm::generator::sample_adjacency;
use elsm::model::neighbor_means;
use elsm::objective::{elbo, DecoderSpec, Noise, Priors, VariationalState};
use elsm::{generate_network, EdgeEmission, HyperParams};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn kernels(c: &mut Criterion) {
    let out = generate_network(&HyperParams::synthetic_benchmark(), 0).unwrap();
    let z = &out.trajectory.z[0];
    let a = out.network.snapshot(0);

    c.bench_function("neighbor_means n=100", |b| b.iter(|| neighbor_means(black_box(z), black_box(a), 0.5).unwrap()));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("sample_adjacency n=100", |b| {
        b.iter(|| sample_adjacency(black_box(z), 0.2, EdgeEmission::Bernoulli, &mut rng).unwrap())
    });

    let state = VariationalState {
        nu: out.trajectory.z.clone(),
        log_var: vec![DMatrix::from_element(100, 2, -4.0); 10],
        elsm: None,
    };
    let noise = [Noise::zeros(10, 100, 2, None)];
    let priors = Priors { s1: 0.05, s4: 0.5, ..Priors::default() };
    let decoder = DecoderSpec { s2: 0.2, ..DecoderSpec::default() };
    c.bench_function("reference elbo n=100 T=10", |b| {
        b.iter(|| elbo(black_box(&out.network), &state, &noise, &priors, &decoder).unwrap())
    });
}

criterion_group!(benches, kernels);
criterion_main!(benches);
