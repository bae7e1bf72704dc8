use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use tiergate::gp::{GpModel, KernelParams, Standardize};
use tiergate::sim::{run, Policy};
use tiergate::Scenario;

fn input(i: usize) -> Vec<f64> {
    let t = i as f64;
    vec![
        (t * 0.31).sin(),
        (t * 0.17).cos(),
        (t * 0.05).sin(),
        0.0,
        0.4,
        0.3,
        1.0,
        0.0,
        0.0,
        0.0,
    ]
}

fn full_window(window: usize) -> GpModel {
    let params = KernelParams::isotropic(10, 1.0, 0.7, 0.1).unwrap();
    let mut gp = GpModel::new(params, window, Standardize::Window).unwrap();
    for i in 0..window {
        gp.observe(&input(i), (i as f64 * 0.1).sin()).unwrap();
    }
    gp
}

fn gp(c: &mut Criterion) {
    for window in [128, 512] {
        let gp = full_window(window);
        c.bench_function(&format!("gp_observe_evict_{window}"), |b| {
            b.iter_batched(
                || gp.clone(),
                |mut gp| gp.observe(black_box(&input(window + 1)), 0.5).unwrap(),
                BatchSize::LargeInput,
            )
        });
        let queries: Vec<Vec<f64>> = (0..4).map(|i| input(3 * window + i)).collect();
        let refs: Vec<&[f64]> = queries.iter().map(Vec::as_slice).collect();
        c.bench_function(&format!("gp_posterior_{window}"), |b| {
            b.iter(|| gp.posterior(black_box(refs[0])).unwrap())
        });
        c.bench_function(&format!("gp_posteriors_4_arms_{window}"), |b| {
            b.iter(|| gp.posteriors(black_box(&refs)).unwrap())
        });
    }
}

fn simulation(c: &mut Criterion) {
    let scenario = Scenario::builtin("table3").unwrap();
    let mut group = c.benchmark_group("simulation");
    group.sample_size(10);
    group.bench_function("safeobo_table3_400_steps", |b| {
        b.iter(|| run(&scenario, &Policy::SafeObo, black_box(1), 400).unwrap())
    });
    group.bench_function("oracle_table3_400_steps", |b| {
        b.iter(|| run(&scenario, &Policy::Oracle, black_box(1), 400).unwrap())
    });
    group.finish();
}

criterion_group!(benches, gp, simulation);
criterion_main!(benches);
