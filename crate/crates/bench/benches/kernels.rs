use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use mfglab::carleman::{estimate_terms, EstimateId, EstimateParams, Weight1Params, WeightChoice};
use mfglab::forward_solver::{solve_conventional, PicardOptions};
use mfglab::reconstruct::{DataTraces, ReconstructionConfig, Reconstructor};
use mfglab::stability_lab::ProblemId;
use mfglab_bench::{cosine_field_2d, reference};

fn stencils(c: &mut Criterion) {
    let u = cosine_field_2d(65, 33);
    c.bench_function("laplacian 65x65x33", |b| b.iter(|| black_box(&u).laplacian()));
    c.bench_function("gradient 65x65x33", |b| b.iter(|| black_box(&u).gradient()));
}

fn forward(c: &mut Criterion) {
    let mp = reference(65, 65);
    let (ut, m0) = (mp.u_terminal(), mp.m_initial());
    let opts = PicardOptions::default();
    let mut g = c.benchmark_group("forward");
    g.sample_size(10);
    g.bench_function("picard 65x65", |b| b.iter(|| solve_conventional(&mp.problem, &ut, &m0, &opts).unwrap()));
    g.finish();
}

fn carleman(c: &mut Criterion) {
    let u = cosine_field_2d(33, 17);
    let p = EstimateParams {
        beta: 0.1,
        weight: WeightChoice::Polynomial(Weight1Params { b: 1.0, lambda: 10.0, k: 4.0 }),
        k0: 4.0,
        allow_below_threshold: false,
    };
    c.bench_function("estimate terms forward 33x33x17", |b| {
        b.iter(|| estimate_terms(EstimateId::T31, black_box(&u), None, None, &p).unwrap())
    });
}

fn reconstruction(c: &mut Criterion) {
    let mp = reference(33, 65);
    let last = mp.problem.grid.time_len() - 1;
    let data = DataTraces { u: mp.u.trace(last), m: mp.m.trace(last) };
    let weight = WeightChoice::Polynomial(Weight1Params { b: 1.0, lambda: 2.0, k: 3.0 });
    let rec = Reconstructor::new(&mp.problem, data, &ReconstructionConfig::new(ProblemId::P1, weight)).unwrap();
    let (u0, m0) = rec.data_extension();
    c.bench_function("objective and gradient 33x65", |b| b.iter(|| rec.objective_and_gradient(&u0, &m0).unwrap()));
}

criterion_group!(kernels, stencils, forward, carleman, reconstruction);
criterion_main!(kernels);
