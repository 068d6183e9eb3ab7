use datorus_core::da_family::{compute_frames, Family};
use datorus_core::ergodic_stats::*;
use datorus_core::plaques::*;
use datorus_core::semiconjugacy::*;
use datorus_core::torus_linalg::*;
use datorus_core::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn spectral() -> SpectralData {
    analyze_matrix(COMPANION).unwrap()
}

fn map(s: f64) -> DaMap {
    make_da_map(&spectral(), BumpSpec::standard(), s).unwrap()
}

fn field() -> &'static DisplacementField {
    static F: OnceLock<DisplacementField> = OnceLock::new();
    F.get_or_init(|| solve_h(&map(0.05), 24, 120).unwrap())
}

fn linear_field() -> &'static DisplacementField {
    static F: OnceLock<DisplacementField> = OnceLock::new();
    F.get_or_init(|| solve_h(&map(0.0), 8, 10).unwrap())
}

fn partition() -> &'static Partition {
    static P: OnceLock<Partition> = OnceLock::new();
    P.get_or_init(|| linear_partition(&spectral(), 4).unwrap())
}

fn series(est: Vec<f64>, err: Vec<f64>) -> EstimateSeries {
    EstimateSeries {
        n_values: (1..=est.len()).collect(),
        estimates: est,
        stderrs: err,
        sample_count: 1,
        seed: 0,
    }
}

#[test]
fn fit_recovers_exact_geometric_decay() {
    let est: Vec<f64> = (1..=12).map(|n| 2.0 * 0.5f64.powi(n)).collect();
    let fit = fit_exponential(&series(est, vec![0.0; 12])).unwrap();
    assert!((fit.rate - 0.5f64.ln()).abs() < 1e-12);
    assert!((fit.log_intercept - 2f64.ln()).abs() < 1e-12);
    assert!((fit.tau() - 0.5).abs() < 1e-12);
    assert!((fit.r_squared - 1.0).abs() < 1e-12);
    assert_eq!(fit.fit_range, (1, 12));
    assert!(!fit.degenerate);
}

#[test]
fn fit_rejects_pure_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let est: Vec<f64> = (0..20).map(|_| 1e-3 * (rng.gen::<f64>() - 0.5)).collect();
    let r = fit_exponential(&series(est, vec![1e-3; 20]));
    assert!(matches!(
        r,
        Err(Error::InsufficientSignal {
            needed: MIN_FIT_ENTRIES,
            ..
        })
    ));
}

#[test]
fn fit_tolerates_small_relative_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let est: Vec<f64> = (1..=25)
        .map(|n| 0.7f64.powi(n) * (1.0 + 0.01 * (2.0 * rng.gen::<f64>() - 1.0)))
        .collect();
    let err: Vec<f64> = est.iter().map(|e| 0.01 * e).collect();
    let fit = fit_exponential(&series(est, err)).unwrap();
    assert!((fit.tau() - 0.7).abs() < 0.02, "{}", fit.tau());
    assert!(fit.r_squared > 0.99);
}

#[test]
fn fit_stops_at_the_noise_floor() {
    let mut est: Vec<f64> = (1..=8).map(|n| 0.5f64.powi(n)).collect();
    est.extend([1e-9, 0.5f64.powi(10)]);
    let mut err = vec![1e-6; 10];
    err[9] = 1e-9;
    let fit = fit_exponential(&series(est, err)).unwrap();
    assert_eq!(fit.fit_range, (1, 8));
    assert_eq!(fit.usable, 8);
}

#[test]
fn observables_report_their_bounds() {
    let c = ObservableSpec::constant(-0.3);
    assert_eq!(c.eval(&[0.1, 0.2, 0.3]), -0.3);
    assert_eq!(c.sup_bound(), 0.3);
    assert_eq!(c.lebesgue_mean(), Some(-0.3));
    let ch = ObservableSpec::character([1, 2, 0], 0.5)
        .scaled(0.5)
        .shifted(0.1);
    assert_eq!(ch.lebesgue_mean(), Some(0.1));
    assert!((ch.eval(&[0.0, 0.0, 0.7]) - 0.6).abs() < 1e-15);
    assert!(ObservableSpec::nodegrid(2, vec![0.0; 7], 0.5).is_err());
    let cusp = ObservableSpec::cusp(TorusPoint::origin(), 0.5);
    assert_eq!(cusp.lebesgue_mean(), None);
    assert_eq!(cusp.eval(&[0.0, 0.0, 0.25]), 0.5);
}

#[test]
fn empirical_holder_quotient_respects_the_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let values: Vec<f64> = (0..64).map(|_| rng.gen::<f64>() - 0.5).collect();
    let obs = [
        ObservableSpec::character([1, -1, 2], 0.5),
        ObservableSpec::cusp(TorusPoint::new([0.2, 0.4, 0.6]).unwrap(), 0.5),
        ObservableSpec::nodegrid(4, values, 0.5).unwrap(),
    ];
    for o in &obs {
        assert!(o.empirical_holder_quotient(20_000, 4) <= o.holder_norm);
    }
}

#[test]
fn node_grid_interpolates_node_values() {
    let values: Vec<f64> = (0..27).map(|i| i as f64).collect();
    let o = ObservableSpec::nodegrid(3, values.clone(), 0.5).unwrap();
    for k in 0..3 {
        for j in 0..3 {
            for i in 0..3 {
                let x = [i as f64 / 3.0, j as f64 / 3.0, k as f64 / 3.0];
                assert!((o.eval(&x) - values[i + 3 * (j + 3 * k)]).abs() < 1e-12);
            }
        }
    }
    assert_eq!(o.lebesgue_mean(), Some(13.0));
}

#[test]
fn lattice_samples_are_deterministic() {
    assert_eq!(lattice_sample(7, 11), lattice_sample(7, 11));
    assert_ne!(lattice_sample(7, 11), lattice_sample(7, 12));
    assert_ne!(lattice_sample(7, 11), lattice_sample(8, 11));
    let a = sample_nu_f(field(), &spectral().automorphism, 500, 9).unwrap();
    let b = sample_nu_f(field(), &spectral().automorphism, 500, 9).unwrap();
    assert_eq!(a.taus, b.taus);
    assert_eq!(a.lattice, b.lattice);
}

#[test]
fn linear_samples_are_lattice_points() {
    let u = linear_field();
    let smp = sample_nu_f(u, &spectral().automorphism, 200, 5).unwrap();
    assert_eq!(smp.dropped, 0);
    for i in 0..smp.len() {
        assert_eq!(smp.taus[i], 0.0);
        assert_eq!(smp.point(u, i), smp.lattice[i].coords());
    }
}

#[test]
fn perturbed_samples_invert_h() {
    let smp = sample_nu_f(field(), &spectral().automorphism, 2000, 6).unwrap();
    assert!(smp.drop_rate() <= MAX_DROP_RATE);
    let worst = (0..smp.len())
        .map(|i| sample_inversion_error(field(), &smp, i))
        .fold(0.0, f64::max);
    assert!(worst < 1e-9, "{worst:e}");
}

#[test]
fn linear_center_exponent_is_log_modulus() {
    let f = map(0.0);
    let fr = compute_frames(&f, 8, 40).unwrap();
    let smp = sample_nu_f(linear_field(), &spectral().automorphism, 200, 7).unwrap();
    let e = center_exponent(&f, &fr, &smp, 50).unwrap();
    assert!(
        (e.value - spectral().kappa[1].ln()).abs() < 1e-9,
        "{}",
        e.value
    );
    let y = [0.3, 0.1, 0.7];
    assert!((log_center_growth(&f, &y, 10) - 10.0 * spectral().kappa[1].ln()).abs() < 1e-9);
}

#[test]
fn perturbed_center_exponent_is_negative() {
    let f = map(0.05);
    let fr = compute_frames(&f, 12, 120).unwrap();
    let smp = sample_nu_f(field(), &spectral().automorphism, 2000, 8).unwrap();
    let e = center_exponent(&f, &fr, &smp, 100).unwrap();
    assert!(e.value < 0.0);
    assert!(
        e.value > 0.539f64.ln() && e.value < 0.766f64.ln(),
        "{}",
        e.value
    );
    let su = lyapunov_exponent(&f, &fr, &smp, Family::U, 100).unwrap();
    assert!(su.value > 0.0);
    assert!(lyapunov_exponent(&f, &fr, &smp, Family::C, 0).is_err());
}

#[test]
fn birkhoff_sums_of_trivial_observables() {
    let f = map(0.05);
    let y = TorusPoint::new([0.4, 0.1, 0.9]).unwrap();
    assert_eq!(birkhoff_sum(&f, &ObservableSpec::constant(0.7), &y, 0), 0.0);
    assert!((birkhoff_sum(&f, &ObservableSpec::constant(0.7), &y, 30) - 21.0).abs() < 1e-12);
    let part = partition();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ap = part.random_aplaque(&mut rng).unwrap();
    let l = reference_measure(&build_default(field(), part, &ap).unwrap());
    let m = plaque_birkhoff_mean(&f, &l, &ObservableSpec::constant(-1.0), 12);
    assert!((m + 12.0).abs() < 1e-12);
}

#[test]
fn character_orbits_of_a_hyperbolic_matrix_are_free() {
    let a = spectral().automorphism;
    assert!(character_orbit_free(&a, [1, 0, 0], 50));
    assert!(character_orbit_free(&a, [0, 1, -1], 50));
    let id = IntegerAutomorphism::new([[1, 0, 0], [0, 1, 0], [0, 0, 1]]).unwrap();
    assert!(!character_orbit_free(&id, [1, 0, 0], 1));
}

#[test]
fn constant_observable_has_no_correlation() {
    let smp = sample_nu_f(field(), &spectral().automorphism, 2000, 10).unwrap();
    let c = correlation_series(
        field(),
        &smp,
        &ObservableSpec::constant(1.0),
        &ObservableSpec::character([1, 0, 0], 0.5),
        8,
    )
    .unwrap();
    assert_eq!(c.n_values, (1..=8).collect::<Vec<_>>());
    assert!(c.estimates.iter().all(|e| e.abs() < 1e-12));
}

#[test]
fn linear_character_correlations_are_noise() {
    let u = linear_field();
    let smp = sample_nu_f(u, &spectral().automorphism, 20_000, 11).unwrap();
    let phi = ObservableSpec::character([1, 0, 0], 0.5);
    assert!(character_orbit_free(
        &spectral().automorphism,
        [1, 0, 0],
        10
    ));
    let c = correlation_series(u, &smp, &phi, &phi, 10).unwrap();
    for (e, s) in c.estimates.iter().zip(&c.stderrs) {
        assert!(e.abs() < 5.0 * s, "{e} vs {s}");
    }
    assert!(fit_exponential(&c).is_err());
}

#[test]
fn deviation_tail_of_constants() {
    let smp = sample_nu_f(field(), &spectral().automorphism, 500, 12).unwrap();
    let ns = [1, 5, 10];
    let zero = deviation_tail(field(), &smp, &ObservableSpec::constant(0.0), 0.1, &ns).unwrap();
    assert!(zero.estimates.iter().all(|p| *p == 0.0));
    let one = deviation_tail(field(), &smp, &ObservableSpec::constant(1.0), 0.5, &ns).unwrap();
    assert!(one.estimates.iter().all(|p| *p == 1.0));
    assert!(one.stderrs.iter().all(|s| *s == 0.0));
}

#[test]
fn constant_moment_bound_is_tight() {
    let part = partition();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let ap = part.random_aplaque(&mut rng).unwrap();
    let phi = ObservableSpec::constant(-0.4);
    let (s, n) = (0.5, 4);
    let mb = moment_bound_check(field(), part, &ap, &phi, s, n, 3, 100_000).unwrap();
    let expect = (-s * 0.4 * n as f64).exp();
    assert!((mb.lhs - expect).abs() < 1e-12);
    assert!((mb.theta_hat - (-s * 0.4f64).exp()).abs() < 1e-12);
    assert!((mb.theta_pow() - expect).abs() < 1e-12);
    assert!(moment_bound_check(field(), part, &ap, &phi, s, 0, 3, 100).is_err());
    assert!(matches!(
        moment_bound_check(field(), part, &ap, &phi, s, 6, 3, 10),
        Err(Error::TreeTooLarge { .. })
    ));
}

#[test]
fn linear_moment_bound_on_the_center() {
    let part = partition();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let ap = part.random_aplaque(&mut rng).unwrap();
    let k2 = spectral().kappa[1];
    let mb = moment_bound_check(
        linear_field(),
        part,
        &ap,
        &ObservableSpec::constant(0.0),
        1.0,
        3,
        3,
        100_000,
    )
    .unwrap();
    assert!((mb.lhs_center - k2.powi(3)).abs() < 1e-12);
    assert!((mb.theta_hat_center - k2).abs() < 1e-12);
    assert!((mb.theta_root_center - k2).abs() < 1e-12);
}

#[test]
fn tree_paths_shrink_by_the_unstable_rate() {
    let part = partition();
    let k3 = spectral().kappa[2];
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let ap = part.random_aplaque(&mut rng).unwrap();
        let (leaf, lo, hi) = tree_path(part, &ap, 0.5 * ap.height, 4).unwrap();
        assert!(lo <= 0.5 * ap.height && hi >= 0.5 * ap.height);
        assert!(((hi - lo) * k3.powi(4) - leaf.height).abs() < 1e-9);
    }
}

#[test]
fn oscillation_of_constants_vanishes() {
    let part = partition();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let ap = part.random_aplaque(&mut rng).unwrap();
    let osc = oscillation_check(field(), part, &ap, &ObservableSpec::constant(2.0), 5, 9).unwrap();
    assert!(osc < 1e-12);
    let phi = ObservableSpec::character([1, 0, 0], 1.0);
    let osc = oscillation_check(field(), part, &ap, &phi, 5, 9).unwrap();
    // 2π-Lipschitz, and the j-th image of the piece has diameter about d·κ₃^j
    let d = piece_diameter(field(), part, &ap, 5, 9).unwrap();
    let k3 = spectral().kappa[2];
    let bound = 2.0 * std::f64::consts::PI * d * (0..5).map(|j| k3.powi(j)).sum::<f64>() * 1.01;
    assert!(osc <= bound, "{osc} > {bound}");
}

#[test]
fn linear_mostly_contracting_value_is_exact() {
    let part = partition();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let ls: Vec<WeightedPlaqueMeasure> = (0..3)
        .map(|_| {
            reference_measure(
                &build_default(
                    linear_field(),
                    part,
                    &part.random_aplaque(&mut rng).unwrap(),
                )
                .unwrap(),
            )
        })
        .collect();
    let (worst, alpha) = mostly_contracting_check(&map(0.0), &ls, 7).unwrap();
    assert!((worst - 7.0 * spectral().kappa[1].ln()).abs() < 1e-9);
    assert_eq!(alpha, -worst);
    assert!(mostly_contracting_check(&map(0.0), &[], 7).is_err());
}

#[test]
fn perturbed_plaques_are_mostly_contracting() {
    let part = partition();
    let f = map(0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let ls: Vec<WeightedPlaqueMeasure> = (0..10)
        .map(|_| {
            reference_measure(
                &build_default(field(), part, &part.random_aplaque(&mut rng).unwrap()).unwrap(),
            )
        })
        .collect();
    let (worst, alpha) = mostly_contracting_check(&f, &ls, 10).unwrap();
    assert!(alpha > 0.0);
    assert!(worst >= 10.0 * 0.539f64.ln());
}

#[test]
fn pushed_functionals_forget_the_starting_plaque() {
    let part = partition();
    let u = field();
    let phi = ObservableSpec::character([1, 0, 0], 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let a = part.random_aplaque(&mut rng).unwrap();
    let b = part.random_aplaque(&mut rng).unwrap();
    let ns = [0, 2, 4, 6];
    let fa = pushed_functional(u, part, &a, &phi, &ns, 4001).unwrap();
    let fb = pushed_functional(u, part, &b, &phi, &ns, 4001).unwrap();
    let gaps: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).collect();
    assert!(gaps[3] < 0.05, "{gaps:?}");
    let c = pushed_functional(u, part, &a, &ObservableSpec::constant(0.3), &ns, 11).unwrap();
    assert!(c.iter().all(|v| (v - 0.3).abs() < 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_fit_recovers_rate(tau in 0.1f64..0.95, c in 0.1f64..10.0) {
        let est: Vec<f64> = (1..=10).map(|n| c * tau.powi(n)).collect();
        let fit = fit_exponential(&series(est, vec![0.0; 10])).unwrap();
        prop_assert!((fit.tau() - tau).abs() < 1e-9);
    }

    #[test]
    fn prop_birkhoff_sums_are_additive(x in prop::array::uniform3(0.0f64..1.0), m in 0usize..15, n in 0usize..15) {
        let f = map(0.05);
        let phi = ObservableSpec::character([1, 2, -1], 0.5);
        let y = TorusPoint::new(x).unwrap();
        let mut p = y.coords;
        for _ in 0..m {
            p = f.eval(&p);
        }
        let fy = TorusPoint { coords: p };
        let whole = birkhoff_sum(&f, &phi, &y, m + n);
        let parts = birkhoff_sum(&f, &phi, &y, m) + birkhoff_sum(&f, &phi, &fy, n);
        prop_assert!((whole - parts).abs() < 1e-9);
    }

    #[test]
    fn prop_scaling_observables_is_linear(a in -3.0f64..3.0, c in -1.0f64..1.0, x in prop::array::uniform3(0.0f64..1.0)) {
        let phi = ObservableSpec::character([2, 0, 1], 0.5);
        let g = phi.scaled(a).shifted(c);
        prop_assert!((g.eval(&x) - (a * phi.eval(&x) + c)).abs() < 1e-12);
        prop_assert!(g.eval(&x).abs() <= g.sup_bound() + 1e-12);
    }
}
