use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use dilation_mra::invert::{frequency_marching, phase_synchronization_report, ApsConfig};
use dilation_mra::moments::{accumulate_model, AccumulateOptions};
use dilation_mra::signal_model::sample_hidden;
use dilation_mra::spectra::{bispectrum, dilate_field, dft, DftPlan};
use dilation_mra::unbias::{solve_bispectrum, solve_power};
use dilation_mra::{CenteredMoments, Grid, ModelParams, SignalId, SolverConfig, ETA_MAX};

fn kernels(c: &mut Criterion) {
    let grid = Grid::standard();
    let lattice = grid.default_lattice();
    let params = ModelParams::new(SignalId::F1, &grid, 0.5, ETA_MAX).unwrap();
    let hidden = sample_hidden(&params, &grid);
    let plan = DftPlan::new(&grid);
    let spectrum = dft(&hidden.values, &grid);
    let b = bispectrum(&spectrum, &lattice);

    c.bench_function("dft", |bench| bench.iter(|| plan.forward(black_box(&hidden.values))));
    c.bench_function("bispectrum_default_lattice", |bench| {
        bench.iter(|| bispectrum(black_box(&spectrum), &lattice))
    });
    c.bench_function("dilate_field", |bench| bench.iter(|| dilate_field(black_box(&b), 0.5, 4).unwrap()));

    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("accumulate_1024", |bench| {
        bench.iter(|| accumulate_model(&params, &grid, lattice, 7, &[1024], AccumulateOptions::default()).unwrap())
    });
    let raw = accumulate_model(&params, &grid, lattice, 7, &[4096], AccumulateOptions::default())
        .unwrap()
        .remove(0);
    let centered = CenteredMoments::from_raw(&raw, 0.5, params.noise, &grid);
    let cfg = SolverConfig::default().with_width(0.5);
    group.bench_function("solve_bispectrum", |bench| {
        bench.iter(|| solve_bispectrum(black_box(&centered.mean_bispectrum), ETA_MAX, &cfg).unwrap())
    });
    group.bench_function("solve_power", |bench| {
        bench.iter(|| solve_power(black_box(&centered.mean_power), ETA_MAX, &grid, &cfg))
    });
    let fm = frequency_marching(&b).unwrap().phases;
    group.bench_function("phase_synchronization", |bench| {
        bench.iter(|| phase_synchronization_report(black_box(&b), &fm, &ApsConfig::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
