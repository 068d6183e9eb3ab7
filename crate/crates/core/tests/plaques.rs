use datorus_core::plaques::*;
use datorus_core::semiconjugacy::*;
use datorus_core::torus_linalg::*;
use datorus_core::*;
use proptest::prelude::*;
use rand::SeedableRng;
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

#[test]
fn partition_rejects_zero_boxes() {
    assert!(linear_partition(&spectral(), 0).is_err());
}

#[test]
fn coarse_partition_tiles_exactly() {
    let part = linear_partition(&spectral(), 1).unwrap();
    assert_eq!(part.markov_defect, 0.0);
    assert!(!part.boxes.is_empty());
    let total: f64 = part.boxes.iter().map(|b| b.area_fraction).sum();
    assert!((total - 1.0).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k3 = part.spectral.kappa[2];
    for _ in 0..200 {
        let ap = part.random_aplaque(&mut rng).unwrap();
        let kids = part.children(&ap).unwrap();
        let len: f64 = kids.iter().map(|c| c.plaque.height).sum();
        assert!((len - k3 * ap.height).abs() < 1e-9);
    }
}

#[test]
fn finer_partition_is_markov() {
    let part = partition();
    assert!(part.markov_defect < 0.05, "{}", part.markov_defect);
}

#[test]
fn children_cover_the_parent_contiguously() {
    let part = partition();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..300 {
        let ap = part.random_aplaque(&mut rng).unwrap();
        let kids = part.children(&ap).unwrap();
        let mut ends: Vec<(f64, f64)> = kids
            .iter()
            .map(|c| (c.parent_lo.min(c.parent_hi), c.parent_lo.max(c.parent_hi)))
            .collect();
        ends.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(ends[0].0.abs() < 1e-12);
        assert!((ends.last().unwrap().1 - ap.height).abs() < 1e-12);
        for w in ends.windows(2) {
            assert!((w[0].1 - w[1].0).abs() < 1e-9);
        }
    }
}

#[test]
fn locate_recovers_plaque_points() {
    let part = partition();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..300 {
        let ap = part.random_aplaque(&mut rng).unwrap();
        let t = 0.37 * ap.height;
        let (found, ft) = part.locate(&part.point(&ap, t)).unwrap();
        assert_eq!(found.ret, ap.ret);
        assert!((ft - t).abs() < 1e-9);
        assert!((found.sigma[0] - ap.sigma[0]).abs() < 1e-9);
    }
}

#[test]
fn face_points_belong_to_the_plaque_above() {
    let part = partition();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let ap = part.random_aplaque(&mut rng).unwrap();
        let bottom = part.point(&ap, 0.0);
        let a = part.locate(&bottom).unwrap();
        let b = part.locate(&bottom).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.ret, ap.ret);
        assert!(a.1.abs() < 1e-9);
        let next = part.plaque_at(part.next_sigma(&ap)).unwrap();
        let (found, t) = part.locate(&part.point(&next, 0.0)).unwrap();
        assert_eq!(found.ret, next.ret);
        assert!(t < 1e-9);
    }
}

#[test]
fn linear_plaques_are_linear_segments() {
    let part = partition();
    let u = linear_field();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let ap = part.random_aplaque(&mut rng).unwrap();
        let params = node_params(ap.height, DEFAULT_SPACING);
        let p = build_plaque(u, part, &ap, &params).unwrap();
        assert!(p.transverse_deviation < 1e-12);
        for (k, t) in params.iter().enumerate() {
            assert!((p.h_param[k] - t).abs() < 1e-12);
            assert!(torus_dist(&p.nodes[k].coords, &part.point(&ap, *t)) < 1e-12);
            assert!((p.f_arclen[k] - t).abs() < 1e-9);
        }
        assert!((p.h_length() - ap.height).abs() < 1e-12);
    }
}

#[test]
fn node_params_respect_spacing() {
    let p = node_params(0.35, 0.01);
    assert_eq!(p.len(), 36);
    assert_eq!(p[0], 0.0);
    assert_eq!(*p.last().unwrap(), 0.35);
    assert!(p.windows(2).all(|w| w[1] - w[0] <= 0.01 + 1e-15));
    assert_eq!(node_params(1e-4, 0.01).len(), 3);
}

#[test]
fn perturbed_plaques_stay_close_to_linear_ones() {
    let part = partition();
    let u = field();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let ap = part.random_aplaque(&mut rng).unwrap();
        let p = build_default(u, part, &ap).unwrap();
        assert!(
            p.transverse_deviation < 1e-6,
            "{:e}",
            p.transverse_deviation
        );
        assert!(p.h_param.windows(2).all(|w| w[1] > w[0]));
        assert!(leaf_bijectivity_check(u, &p) > 0.0);
    }
}

#[test]
fn grown_plaque_at_zero_is_a_straight_segment() {
    let part = partition();
    let f = map(0.0);
    let u = linear_field();
    let y = TorusPoint::new([0.21, 0.47, 0.83]).unwrap();
    let p = grow_plaque(&f, u, part, &y, 0.01).unwrap();
    let e3 = part.spectral.frame[2];
    for k in 1..p.len() {
        let d = min_image(&sub(&p.nodes[k].coords, &p.nodes[k - 1].coords));
        assert!(norm(&cross(&d, &e3)) < 1e-10 * norm(&d).max(1e-12));
        let dh = p.h_param[k] - p.h_param[k - 1];
        let da = p.f_arclen[k] - p.f_arclen[k - 1];
        assert!((dh - da).abs() < 1e-9);
    }
    assert!(p.h_param[0].abs() < 1e-9);
    assert!((p.h_param.last().unwrap() - p.aplaque.height).abs() < 1e-9);
}

#[test]
fn grown_plaque_matches_h_preimage_of_linear_plaque() {
    let part = partition();
    let f = map(0.05);
    let u = field();
    let y = TorusPoint::new([0.05, 0.02, 0.01]).unwrap();
    let p = grow_plaque(&f, u, part, &y, 0.01).unwrap();
    assert!(
        p.transverse_deviation < 1e-6,
        "{:e}",
        p.transverse_deviation
    );
    assert!(grow_plaque(&f, u, part, &y, 0.0).is_err());
}

#[test]
fn trapezoid_weights_are_normalized() {
    assert!(trapezoid_weights(&[]).is_empty());
    assert_eq!(trapezoid_weights(&[3.0]), vec![1.0]);
    let w = trapezoid_weights(&[0.0, 1.0, 3.0]);
    assert_eq!(w, vec![0.5 / 3.0, 1.5 / 3.0, 1.0 / 3.0]);
}

#[test]
fn reference_measure_follows_node_spacing() {
    let part = partition();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ap = part.random_aplaque(&mut rng).unwrap();
    let p = build_default(linear_field(), part, &ap).unwrap();
    let r = reference_measure(&p);
    assert!((r.total_mass - 1.0).abs() < 1e-12);
    let m = r.masses();
    let n = m.len();
    let dt = ap.height / (n - 1) as f64;
    for (i, mi) in m.iter().enumerate() {
        let expect = if i == 0 || i + 1 == n { 0.5 * dt } else { dt } / ap.height;
        assert!((mi - expect).abs() < 1e-12);
    }
}

#[test]
fn log_density_is_normalized() {
    let part = partition();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ap = part.random_aplaque(&mut rng).unwrap();
    let p = build_default(field(), part, &ap).unwrap();
    let g: Vec<f64> = p.h_param.iter().map(|t| 0.3 * t.sin()).collect();
    let l = WeightedPlaqueMeasure::with_log_density(p.clone(), g, 0.5).unwrap();
    assert!((l.total_mass - 1.0).abs() < 1e-12);
    assert!((l.integrate(|_| 1.0) - 1.0).abs() < 1e-12);
    assert!(WeightedPlaqueMeasure::with_log_density(p.clone(), vec![0.0], 0.5).is_err());
    assert!(WeightedPlaqueMeasure::with_log_density(p, vec![0.0; l.plaque.len()], 1.0).is_err());
}

#[test]
fn holder_constant_of_a_power() {
    let h: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let g: Vec<f64> = h.iter().map(|t| 2.0 * t.sqrt()).collect();
    let c = holder_constant(&h, &g, 0.5);
    assert!((c - 2.0).abs() < 1e-12, "{c}");
    assert_eq!(holder_constant(&h, &vec![1.0; h.len()], 0.5), 0.0);
}

#[test]
fn linear_split_weights_are_length_ratios() {
    let part = partition();
    let f = map(0.0);
    let u = linear_field();
    let k3 = part.spectral.kappa[2];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let ap = part.random_aplaque(&mut rng).unwrap();
        let p = build_default(u, part, &ap).unwrap();
        let sp = transfer_split(&f, u, part, &p).unwrap();
        let total: f64 = sp.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        for (c, w) in sp.children.iter().zip(&sp.weights) {
            assert!((w - c.h_length() / (k3 * p.h_length())).abs() < 1e-9);
        }
        assert!(sp.max_density_variation() < 1e-9);
    }
}

#[test]
fn perturbed_split_has_constant_density() {
    let part = partition();
    let f = map(0.05);
    let u = field();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut min_c = f64::INFINITY;
    let mut worst = 0.0f64;
    for i in 0..100 {
        let ap = part.random_aplaque(&mut rng).unwrap();
        let p = build_default(u, part, &ap).unwrap();
        let kids = part.children(&ap).unwrap();
        let w: Vec<f64> = kids
            .iter()
            .map(|k| (k.parent_hi - k.parent_lo).abs() / ap.height)
            .collect();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        min_c = w.iter().cloned().fold(min_c, f64::min);
        if i < 10 {
            let sp = transfer_split(&f, u, part, &p).unwrap();
            worst = worst.max(sp.max_density_variation());
        }
    }
    assert!(min_c > 0.0);
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn linear_jacobian_weights_cluster() {
    // at s = 0 every weight is a child height over κ₃ times the parent height,
    // so the distinct values come from finitely many box heights
    let part = partition();
    let k3 = part.spectral.kappa[2];
    let heights: Vec<f64> = part.boxes.iter().map(|b| b.height).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let ap = part.random_aplaque(&mut rng).unwrap();
        let kids = part.children(&ap).unwrap();
        for k in &kids {
            let c = (k.parent_hi - k.parent_lo).abs() / ap.height;
            let close = heights
                .iter()
                .any(|hc| heights.iter().any(|hp| (c - hc / (k3 * hp)).abs() < 1e-9));
            assert!(close, "weight {c} outside the box-height set");
        }
    }
}

#[test]
fn transfer_keeps_constant_density() {
    let part = partition();
    let f = map(0.05);
    let u = field();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ap = part.random_aplaque(&mut rng).unwrap();
    let p = build_default(u, part, &ap).unwrap();
    let l = WeightedPlaqueMeasure::with_log_density(p, vec![0.0; 0], 0.5);
    assert!(l.is_err());
    let l = reference_measure(&build_default(u, part, &ap).unwrap());
    let step = transfer_step(&l, &f, u, part).unwrap();
    let total: f64 = step.iter().map(|(c, _)| c).sum();
    assert!((total - 1.0).abs() < 1e-12);
    for (_, child) in &step {
        assert!(child.log_density.iter().all(|g| g.abs() < 1e-9));
        assert!(child.holder_const < 1e-9);
    }
}

fn cusp_measure(p: Plaque, r: f64, gamma: f64) -> WeightedPlaqueMeasure {
    let mid = 0.5 * p.aplaque.height;
    let g: Vec<f64> = p
        .h_param
        .iter()
        .map(|t| r * (t - mid).abs().powf(gamma))
        .collect();
    WeightedPlaqueMeasure::with_log_density(p, g, gamma).unwrap()
}

#[test]
fn linear_transfer_contracts_holder_constant() {
    let part = partition();
    let f = map(0.0);
    let u = linear_field();
    let k3 = part.spectral.kappa[2];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10 {
        let ap = part.random_aplaque(&mut rng).unwrap();
        let l = cusp_measure(build_default(u, part, &ap).unwrap(), 1.0, 0.5);
        assert!(l.holder_const <= 1.0 + 1e-9, "{}", l.holder_const);
        for (_, child) in transfer_step(&l, &f, u, part).unwrap() {
            assert!(
                child.holder_const <= l.holder_const * k3.powf(-0.5) * (1.0 + 1e-3),
                "{}",
                child.holder_const
            );
        }
    }
}

#[test]
fn perturbed_transfer_contracts_holder_constant() {
    let part = partition();
    let f = map(0.05);
    let u = field();
    let k3 = part.spectral.kappa[2];
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..5 {
        let ap = part.random_aplaque(&mut rng).unwrap();
        let l = cusp_measure(build_default(u, part, &ap).unwrap(), 1.0, 0.5);
        for (_, child) in transfer_step(&l, &f, u, part).unwrap() {
            assert!(child.holder_const <= l.holder_const * k3.powf(-0.5) * (1.0 + 1e-3));
        }
    }
}

#[test]
fn projection_distance_grows_with_the_density_constant() {
    let part = partition();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let ap = part.random_aplaque(&mut rng).unwrap();
    let p = build_default(field(), part, &ap).unwrap();
    let (r0, d0) = project_e0(&reference_measure(&p));
    assert_eq!(d0, 0.0);
    assert!(r0.log_density.iter().all(|g| *g == 0.0));
    let mut last = 0.0;
    for r in [0.02, 0.05, 0.1] {
        let (_, d) = project_e0(&cusp_measure(p.clone(), r, 0.5));
        assert!(d > last);
        // |e^G − 1| ≤ e^{R·h^γ} − 1 for a normalized density
        let bound = 2.0 * ((r * ap.height.powf(0.5)).exp() - 1.0);
        assert!(d <= bound, "{d} > {bound}");
        last = d;
    }
}

#[test]
fn holonomy_to_the_same_base_is_the_identity() {
    let part = partition();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let ap = part.random_aplaque(&mut rng).unwrap();
    let l = cusp_measure(build_default(field(), part, &ap).unwrap(), 0.2, 0.5);
    let m = cs_holonomy(&l, &l.plaque.base, field(), part).unwrap();
    assert_eq!(m, l);
    assert_eq!(cell_discrepancy(&l, &m, 8), 0.0);
}

fn same_box_neighbour(part: &Partition, ap: &APlaque) -> Option<APlaque> {
    for d in [1e-3, -1e-3, 3e-3, -3e-3] {
        for k in 0..2 {
            let mut sig = ap.sigma;
            sig[k] += d;
            if let Ok(b) = part.plaque_at(sig) {
                if b.ret == ap.ret {
                    return Some(b);
                }
            }
        }
    }
    None
}

#[test]
fn linear_holonomy_translates_plaques() {
    let part = partition();
    let u = linear_field();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut done = 0;
    while done < 5 {
        let ap = part.random_aplaque(&mut rng).unwrap();
        let Some(bp) = same_box_neighbour(part, &ap) else {
            continue;
        };
        let l = cusp_measure(build_default(u, part, &ap).unwrap(), 0.2, 0.5);
        let dst = TorusPoint {
            coords: part.point(&bp, 0.0),
        };
        let m = cs_holonomy(&l, &dst, u, part).unwrap();
        for (k, t) in l.plaque.h_param.iter().enumerate() {
            assert!(torus_dist(&m.plaque.nodes[k].coords, &part.point(&bp, *t)) < 1e-10);
        }
        assert!(cell_discrepancy(&l, &m, 8) < 1e-12);
        done += 1;
    }
}

#[test]
fn perturbed_holonomy_moves_little_mass() {
    let part = partition();
    let u = field();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut done = 0;
    while done < 5 {
        let ap = part.random_aplaque(&mut rng).unwrap();
        let Some(bp) = same_box_neighbour(part, &ap) else {
            continue;
        };
        let l = reference_measure(&build_default(u, part, &ap).unwrap());
        let dst = build_default(u, part, &bp).unwrap().base;
        let m = cs_holonomy(&l, &dst, u, part).unwrap();
        assert!(cell_discrepancy(&l, &m, 8) < 1e-2);
        done += 1;
    }
}

#[test]
fn holonomy_rejects_other_boxes() {
    let part = partition();
    let u = field();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let ap = part.random_aplaque(&mut rng).unwrap();
    let l = reference_measure(&build_default(u, part, &ap).unwrap());
    loop {
        let bp = part.random_aplaque(&mut rng).unwrap();
        if bp.ret != ap.ret {
            let dst = build_default(u, part, &bp).unwrap().base;
            assert!(matches!(
                cs_holonomy(&l, &dst, u, part),
                Err(Error::NotSameBox { .. })
            ));
            break;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_child_weights_form_a_distribution(a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let part = partition();
        let r = part.half_width;
        let ap = part.plaque_at([a * r * 0.999, b * r * 0.999]).unwrap();
        let kids = part.children(&ap).unwrap();
        let w: Vec<f64> = kids.iter().map(|k| (k.parent_hi - k.parent_lo).abs() / ap.height).collect();
        prop_assert!(w.iter().all(|c| *c > 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn prop_plaque_parameters_increase(a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let part = partition();
        let r = part.half_width;
        let ap = part.plaque_at([a * r * 0.999, b * r * 0.999]).unwrap();
        let params = node_params(ap.height, 0.05);
        let p = build_plaque(field(), part, &ap, &params).unwrap();
        prop_assert!(p.h_param.windows(2).all(|w| w[1] > w[0]));
        prop_assert!(p.f_arclen.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn prop_weighted_measure_has_unit_mass(amp in -2.0f64..2.0, freq in 0.1f64..5.0, gamma in 0.1f64..0.9) {
        let part = partition();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let ap = part.random_aplaque(&mut rng).unwrap();
        let p = build_plaque(linear_field(), part, &ap, &node_params(ap.height, 0.05)).unwrap();
        let g: Vec<f64> = p.h_param.iter().map(|t| amp * (freq * t).sin()).collect();
        let l = WeightedPlaqueMeasure::with_log_density(p, g, gamma).unwrap();
        prop_assert!((l.masses().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(l.masses().iter().all(|m| *m > 0.0));
        // |sin x − sin y| ≤ min(2, |x − y|) ≤ 2^{1−γ}|x − y|^γ
        let bound = amp.abs() * 2f64.powf(1.0 - gamma) * freq.powf(gamma);
        prop_assert!(l.holder_const <= bound * (1.0 + 1e-9));
    }
}
