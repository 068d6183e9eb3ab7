use criterion::{black_box, criterion_group, criterion_main, Criterion};
use datorus_bench::standard_map;
use datorus_core::coupling::{run_coupling, CouplingParams, PlaqueRectangle};
use datorus_core::ergodic_stats::{correlation_series, sample_nu_f, ObservableSpec};
use datorus_core::plaques::{build_default, linear_partition, transfer_split};
use datorus_core::semiconjugacy::{invert_h, series_u, solve_h};
use datorus_core::torus_linalg::{apply_auto, LatticePoint};
use datorus_core::TorusPoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lattice(c: &mut Criterion) {
    let f = standard_map(0.05);
    let a = f.spectral.automorphism;
    let x = LatticePoint::new([123_456, 7_890_123, 456_789], 2_147_483_647).unwrap();
    c.bench_function("apply_auto 1000 steps", |b| {
        b.iter(|| apply_auto(&a, black_box(&x), 1000).unwrap())
    });
}

fn map_eval(c: &mut Criterion) {
    let f = standard_map(0.05);
    let x = [0.11, 0.02, 0.97];
    c.bench_function("eval_iterate", |b| b.iter(|| f.eval_iterate(black_box(&x))));
    c.bench_function("series_u depth 120", |b| {
        b.iter(|| series_u(&f, black_box(&x), 120))
    });
}

fn semiconjugacy(c: &mut Criterion) {
    let f = standard_map(0.05);
    let mut g = c.benchmark_group("semiconjugacy");
    g.sample_size(10);
    g.bench_function("solve_h 12³ depth 80", |b| {
        b.iter(|| solve_h(&f, 12, 80).unwrap())
    });
    let u = solve_h(&f, 16, 100).unwrap();
    let z = TorusPoint::new([0.3, 0.6, 0.1]).unwrap();
    g.bench_function("invert_h", |b| {
        b.iter(|| invert_h(&u, black_box(&z), 1e-10, 200).unwrap())
    });
    g.finish();
}

fn plaques(c: &mut Criterion) {
    let f = standard_map(0.05);
    let u = solve_h(&f, 16, 100).unwrap();
    let part = linear_partition(&f.spectral, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ap = part.random_aplaque(&mut rng).unwrap();
    let p = build_default(&u, &part, &ap).unwrap();
    let mut g = c.benchmark_group("plaques");
    g.bench_function("build_default", |b| {
        b.iter(|| build_default(&u, &part, black_box(&ap)).unwrap())
    });
    g.bench_function("transfer_split", |b| {
        b.iter(|| transfer_split(&f, &u, &part, black_box(&p)).unwrap())
    });
    g.finish();
}

fn statistics(c: &mut Criterion) {
    let f = standard_map(0.05);
    let u = solve_h(&f, 16, 100).unwrap();
    let smp = sample_nu_f(&u, &f.spectral.automorphism, 10_000, 3).unwrap();
    let phi = ObservableSpec::character([0, 1, 0], 0.5);
    let mut g = c.benchmark_group("statistics");
    g.sample_size(10);
    g.bench_function("sample_nu_f 10⁴", |b| {
        b.iter(|| sample_nu_f(&u, &f.spectral.automorphism, 10_000, 3).unwrap())
    });
    g.bench_function("correlation_series 10⁴ × 25", |b| {
        b.iter(|| correlation_series(&u, &smp, &phi, &phi, 25).unwrap())
    });
    g.finish();
}

fn coupling(c: &mut Criterion) {
    let f = standard_map(0.05);
    let u = solve_h(&f, 16, 100).unwrap();
    let part = linear_partition(&f.spectral, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y1 = PlaqueRectangle::new(&u, &part, &part.random_aplaque(&mut rng).unwrap()).unwrap();
    let y2 = PlaqueRectangle::new(&u, &part, &part.random_aplaque(&mut rng).unwrap()).unwrap();
    let params = CouplingParams::default();
    let mut g = c.benchmark_group("coupling");
    g.sample_size(10);
    g.bench_function("run_coupling", |b| {
        b.iter(|| run_coupling(&y1, &y2, &params, &u, &part).unwrap())
    });
    g.finish();
}

criterion_group!(
    benches,
    lattice,
    map_eval,
    semiconjugacy,
    plaques,
    statistics,
    coupling
);
criterion_main!(benches);
