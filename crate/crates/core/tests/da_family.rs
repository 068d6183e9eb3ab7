use datorus_core::da_family::*;
use datorus_core::torus_linalg::*;
use datorus_core::{Error, COMPANION};
use proptest::prelude::*;

/// Stable frames converge at the ratio κ₁ / min D_c ≈ 0.99 near the bump.
const FRAME_ITERS: usize = 120;

fn spectral() -> SpectralData {
    analyze_matrix(COMPANION).unwrap()
}

fn map(s: f64) -> DaMap {
    make_da_map(&spectral(), BumpSpec::standard(), s).unwrap()
}

/// Smallest s at which det df can vanish: det df = det M · (1 + s ∇ρ·e₂ / μ₂).
fn diffeo_threshold() -> f64 {
    let sp = spectral();
    sp.mu[1].abs() / BumpSpec::standard().max_gradient()
}

fn angle(a: &Vec3, b: &Vec3) -> f64 {
    norm(&cross(a, b)).atan2(dot(a, b).abs())
}

#[test]
fn zero_amplitude_is_the_automorphism() {
    let f = map(0.0);
    let a = spectral().automorphism;
    for i in 0..20 {
        let x = [
            0.05 * i as f64,
            (0.3 + 0.07 * i as f64) % 1.0,
            (0.11 * i as f64) % 1.0,
        ];
        let (y, d) = eval_and_diff(&f, &TorusPoint { coords: x });
        assert_eq!(y.coords, wrap(&a.apply(&x)));
        assert_eq!(d, a.as_f64());
    }
}

#[test]
fn outside_support_is_linear() {
    let f = map(0.05);
    let x = [0.5, 0.5, 0.5];
    assert!(f.bump.center_distance(&x) > f.bump.radius);
    let (y, d) = eval_and_diff(&f, &TorusPoint { coords: x });
    assert_eq!(y.coords, wrap(&spectral().automorphism.apply(&x)));
    assert_eq!(d, spectral().automorphism.as_f64());
}

#[test]
fn small_bump_is_a_diffeomorphism() {
    let b = BumpSpec::new(TorusPoint::origin(), 0.2, Profile::Ramp { delta: 0.1 }).unwrap();
    let f = make_da_map(&spectral(), b, 0.05).unwrap();
    assert!(f.check_diffeomorphism(64).is_ok());
}

#[test]
fn large_amplitude_rejected() {
    let r = make_da_map(&spectral(), BumpSpec::standard(), 10.0);
    assert!(matches!(r, Err(Error::NotDiffeomorphism { .. })));
    let r = make_da_map(&spectral(), BumpSpec::standard(), 1.05 * diffeo_threshold());
    assert!(matches!(r, Err(Error::NotDiffeomorphism { .. })));
}

#[test]
fn linear_map_rates_are_log_moduli() {
    let rep = verify_partial_hyperbolicity(&map(0.0), 16, 0.3, 20).unwrap();
    let lk = spectral().log_kappa();
    let want = [lk[0], lk[0], lk[1], lk[1], lk[2], lk[2]];
    for i in 0..6 {
        assert!((rep.lambda[i] - want[i]).abs() < 1e-9, "{:?}", rep.lambda);
    }
    assert!(rep.verified);
}

#[test]
fn twenty_iterations_leave_stable_cones_unresolved() {
    let rep = verify_partial_hyperbolicity(&map(0.05), 32, 0.3, 20).unwrap();
    assert_eq!(rep.cone_angles[0], 0.0);
    assert!(rep.cone_angles[1] > 0.0 && rep.cone_angles[2] > 0.0);
}

#[test]
fn partially_hyperbolic_at_small_amplitude() {
    let rep = verify_partial_hyperbolicity(&map(0.01), 64, 0.3, FRAME_ITERS).unwrap();
    assert!(rep.verified, "{:?}", rep.violation_reason);
}

#[test]
fn partially_hyperbolic_at_default_amplitude() {
    let rep = verify_partial_hyperbolicity(&map(0.05), 64, 0.3, FRAME_ITERS).unwrap();
    assert!(rep.verified, "{:?}", rep.violation_reason);
    let l = rep.lambda;
    assert!(l[1] < 0.0 && 0.0 < l[4]);
    assert!(l[1] < l[2] && l[3] < l[4]);
}

#[test]
fn verification_fails_near_diffeomorphism_threshold() {
    let f = map(0.98 * diffeo_threshold());
    let rep = verify_partial_hyperbolicity(&f, 32, 0.3, 20).unwrap();
    assert!(!rep.verified);
    assert!(rep.first_violation.is_some());
}

#[test]
fn linear_frames_are_eigenvectors() {
    let fr = compute_frames(&map(0.0), 8, 40).unwrap();
    let s = spectral();
    for node in &fr.frames {
        for i in 0..3 {
            assert!(angle(&node[i], &s.frame[i]) < 1e-12);
        }
    }
}

#[test]
fn frames_converge_at_default_amplitude() {
    let fr = compute_frames(&map(0.05), 12, FRAME_ITERS).unwrap();
    assert!(fr.max_residual() < 1e-8, "{}", fr.max_residual());
}

#[test]
fn frames_are_invariant_under_df() {
    let f = map(0.05);
    for i in 0..30 {
        let x = [
            (0.031 * i as f64) % 1.0,
            (0.2 + 0.043 * i as f64) % 1.0,
            (0.77 * i as f64) % 1.0,
        ];
        let fx = local_frames(&f, &x, FRAME_ITERS);
        let fy = local_frames(&f, &f.eval(&x), FRAME_ITERS);
        let d = f.diff(&x);
        for k in 0..3 {
            assert!(
                angle(&mat_vec(&d, &fx[k]), &fy[k]) < 1e-6,
                "family {k} at {x:?}"
            );
        }
    }
}

#[test]
fn center_rates_lie_between_lambda3_and_lambda4() {
    let f = map(0.05);
    let rep = verify_partial_hyperbolicity(&f, 32, 0.3, FRAME_ITERS).unwrap();
    let fr = compute_frames(&f, 16, FRAME_ITERS).unwrap();
    for (idx, node) in fr.frames.iter().enumerate() {
        let n = fr.grid_n;
        let x = [
            (idx % n) as f64 / n as f64,
            ((idx / n) % n) as f64 / n as f64,
            (idx / (n * n)) as f64 / n as f64,
        ];
        let r = fr.log_rate(&f, Family::C, &x);
        assert!(
            r >= rep.lambda[2] - 1e-3 && r <= rep.lambda[3] + 1e-3,
            "{r} at {x:?}"
        );
        assert!((dot(&node[1], f.e2()).abs() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn cs_norm_equals_center_norm_in_adapted_metric() {
    let f = map(0.05);
    for i in 0..10 {
        let x = [0.01 + 0.09 * i as f64, 0.02, 0.03 * i as f64];
        for n in [1, 3, 6] {
            let (cs, c) = cs_center_norms(&f, &x, n, FRAME_ITERS);
            assert!((cs - c).abs() < 1e-6 * c.max(1.0), "n={n}: {cs} vs {c}");
        }
    }
}

#[test]
fn power_reduction_composes() {
    let f = map(0.05).with_power(3).unwrap();
    let x = [0.1, 0.2, 0.05];
    let (y, d) = f.eval_iterate(&x);
    let mut z = x;
    let mut dd = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..3 {
        dd = mat_mul(&f.diff(&z), &dd);
        z = f.eval(&z);
    }
    assert_eq!(y, z);
    assert_eq!(d, dd);
    assert!(map(0.05).with_power(0).is_err());
}

proptest! {
    #[test]
    fn diff_matches_finite_differences(x in prop::array::uniform3(0.0f64..1.0)) {
        let f = map(0.05);
        let d = f.diff(&x);
        let h = 1e-6;
        for j in 0..3 {
            let mut a = x;
            let mut b = x;
            a[j] += h;
            b[j] -= h;
            let col = scale(&sub(&f.lift(&a), &f.lift(&b)), 0.5 / h);
            for i in 0..3 {
                prop_assert!((col[i] - d[i][j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn inverse_undoes_eval(x in prop::array::uniform3(0.0f64..1.0)) {
        let f = map(0.05);
        prop_assert!(torus_dist(&f.inverse(&f.eval(&x)), &x) < 1e-12);
        prop_assert!(torus_dist(&f.eval(&f.inverse(&x)), &x) < 1e-12);
    }

    #[test]
    fn center_push_tracks_the_center_line(z in prop::array::uniform3(0.0f64..1.0), t in -0.2f64..0.2) {
        let f = map(0.05);
        let e = *f.e2();
        let y = add(&z, &scale(&e, t));
        let want = add(&spectral().automorphism.apply(&z), &scale(&e, f.center_push(&z, t)));
        prop_assert!(torus_dist(&f.eval(&y), &wrap(&want)) < 1e-12);
    }

    #[test]
    fn center_line_is_invariant(x in prop::array::uniform3(0.0f64..1.0)) {
        let f = map(0.05);
        let w = mat_vec(&f.diff(&x), f.e2());
        prop_assert!(angle(&w, f.e2()) < 1e-12);
        prop_assert!(f.center_derivative(&x) > 0.0);
    }
}
