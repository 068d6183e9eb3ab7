//! The semiconjugacy `h = id + u` with `h∘f = A∘h`, its inversion along
//! centre segments, and probes of fibres, leaf growth and leaf injectivity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::da_family::{grid_point, DaMap, Family, FrameField};
use crate::error::{Error, Result};
use crate::plaques::Plaque;
use crate::torus_linalg::{
    add, dot, mat_vec, min_image, norm, scale, sub, torus_dist, wrap, LatticePoint, LatticeStepper,
    SpectralData, TorusPoint, Vec3,
};

pub type LeafKind = Family;

/// Rounding floor of the contracting sums. Backward orbits of nearby points
/// separate like κ₁⁻ᵏ while the weights decay like κ₂ᵏ, so machine errors
/// settle at about ε^(ln κ₂ / ln κ₁); ten times that is allowed.
pub fn rounding_floor(s: &SpectralData) -> f64 {
    10.0 * f64::EPSILON.powf(s.kappa[1].ln() / s.kappa[0].ln())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisplacementField {
    pub map: DaMap,
    pub grid_n: usize,
    pub truncation_depth: usize,
    /// u at grid nodes, x-fastest order.
    pub values: Vec<Vec3>,
    /// sup of dist(h(f x), A h(x)) over the off-grid test set, series evaluation.
    pub residual_sup: f64,
    /// sup of |u_interp − u_series| over the same set.
    pub interpolation_error: f64,
    pub lipschitz_est: f64,
    /// s·κ₂^depth, the size of the first neglected term.
    pub tail_bound: f64,
}

/// Orbit-sum evaluation of u(x) in eigencoordinates, converted back.
pub fn series_u(f: &DaMap, x: &Vec3, depth: usize) -> Vec3 {
    if f.amplitude == 0.0 {
        return [0.0; 3];
    }
    let s = &f.spectral;
    let e2 = *f.e2();
    let pe = [
        dot(&s.dual_frame[0], &e2),
        dot(&s.dual_frame[1], &e2),
        dot(&s.dual_frame[2], &e2),
    ];
    let (mu1, mu2, mu3) = (s.mu[0], s.mu[1], s.mu[2]);
    let mut y = *x;
    let (mut a1, mut a2) = (0.0, 0.0);
    let (mut w1, mut w2) = (1.0, 1.0);
    for _ in 0..depth {
        y = f.inverse(&y);
        let r = f.bump.value(&y);
        a1 += w1 * r;
        a2 += w2 * r;
        w1 *= mu1;
        w2 *= mu2;
    }
    let mut y = *x;
    let mut a3 = 0.0;
    let mut w3 = 1.0 / mu3;
    for _ in 0..depth {
        a3 += w3 * f.bump.value(&y);
        y = f.eval(&y);
        w3 /= mu3;
    }
    let amp = f.amplitude;
    let c = [-amp * pe[0] * a1, -amp * pe[1] * a2, amp * pe[2] * a3];
    s.from_eigen(&c)
}

fn test_point(i: usize, j: usize, k: usize) -> Vec3 {
    [
        (i as f64 + 0.5) / 17.0,
        (j as f64 + 0.5) / 17.0,
        (k as f64 + 0.5) / 17.0,
    ]
}

pub fn solve_h(f: &DaMap, grid_n: usize, depth: usize) -> Result<DisplacementField> {
    solve_h_with_tolerance(f, grid_n, depth, None)
}

/// As [`solve_h`]; `tol` overrides the default bound 10·tail + floor.
pub fn solve_h_with_tolerance(
    f: &DaMap,
    grid_n: usize,
    depth: usize,
    tol: Option<f64>,
) -> Result<DisplacementField> {
    if grid_n < 2 || depth == 0 {
        return Err(Error::InvalidParameter(
            "grid_n >= 2 and depth >= 1 required".into(),
        ));
    }
    let total = grid_n * grid_n * grid_n;
    let values: Vec<Vec3> = (0..total)
        .into_par_iter()
        .map(|idx| series_u(f, &grid_point(grid_n, idx).1, depth))
        .collect();
    DisplacementField::from_values(f, grid_n, depth, values, tol)
}

impl DisplacementField {
    /// Field from stored node values, with diagnostics recomputed.
    pub fn from_values(
        f: &DaMap,
        grid_n: usize,
        depth: usize,
        values: Vec<Vec3>,
        tol: Option<f64>,
    ) -> Result<Self> {
        if grid_n < 2 || depth == 0 || values.len() != grid_n * grid_n * grid_n {
            return Err(Error::InvalidParameter(
                "grid_n >= 2, depth >= 1 and grid_n³ values required".into(),
            ));
        }
        Self::finish(f, grid_n, depth, values, tol)
    }

    fn finish(
        f: &DaMap,
        grid_n: usize,
        depth: usize,
        values: Vec<Vec3>,
        tol: Option<f64>,
    ) -> Result<Self> {
        let tail_bound = f.amplitude * f.spectral.kappa[1].powi(depth as i32);
        let mut field = DisplacementField {
            map: *f,
            grid_n,
            truncation_depth: depth,
            values,
            residual_sup: 0.0,
            interpolation_error: 0.0,
            lipschitz_est: 0.0,
            tail_bound,
        };
        field.lipschitz_est = field.grid_lipschitz();
        let checks: Vec<(f64, f64)> = (0..17 * 17 * 17)
            .into_par_iter()
            .map(|idx| {
                let x = test_point(idx % 17, (idx / 17) % 17, idx / 289);
                let us = series_u(f, &x, depth);
                let ui = field.interpolate(&x);
                (field.residual_at(&x), norm(&sub(&us, &ui)))
            })
            .collect();
        for (r, e) in checks {
            field.residual_sup = field.residual_sup.max(r);
            field.interpolation_error = field.interpolation_error.max(e);
        }
        let limit = tol.unwrap_or(10.0 * tail_bound + rounding_floor(&f.spectral));
        if field.residual_sup > limit {
            let k2 = f.spectral.kappa[1];
            let suggested = ((limit / (10.0 * f.amplitude.max(1e-300))).ln() / k2.ln())
                .ceil()
                .max(depth as f64 + 1.0);
            return Err(Error::DepthInsufficient {
                depth,
                residual: field.residual_sup,
                suggested: suggested as usize,
            });
        }
        Ok(field)
    }
}

impl DisplacementField {
    pub fn amplitude(&self) -> f64 {
        self.map.amplitude
    }

    /// u(x) from the orbit series at the stored depth.
    pub fn u_series(&self, x: &Vec3) -> Vec3 {
        series_u(&self.map, x, self.truncation_depth)
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let n = self.grid_n;
        self.values[(i % n) + n * ((j % n) + n * (k % n))]
    }

    /// Trilinear interpolation of the stored grid.
    pub fn interpolate(&self, x: &Vec3) -> Vec3 {
        let n = self.grid_n;
        let p = wrap(x);
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for d in 0..3 {
            let g = p[d] * n as f64;
            let b = g.floor();
            base[d] = b as usize % n;
            frac[d] = g - b;
        }
        let mut acc = [0.0; 3];
        for corner in 0..8 {
            let mut w = 1.0;
            let mut id = [0usize; 3];
            for d in 0..3 {
                let bit = (corner >> d) & 1;
                id[d] = base[d] + bit;
                w *= if bit == 1 { frac[d] } else { 1.0 - frac[d] };
            }
            if w == 0.0 {
                continue;
            }
            acc = add(&acc, &scale(&self.node(id[0], id[1], id[2]), w));
        }
        acc
    }

    fn grid_lipschitz(&self) -> f64 {
        let n = self.grid_n;
        let mut best = 0.0f64;
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let v = self.node(i, j, k);
                    for nb in [
                        self.node(i + 1, j, k),
                        self.node(i, j + 1, k),
                        self.node(i, j, k + 1),
                    ] {
                        best = best.max(norm(&sub(&nb, &v)) * n as f64);
                    }
                }
            }
        }
        best
    }

    /// dist(h(f x), A h(x)) with the series evaluation of u.
    pub fn residual_at(&self, x: &Vec3) -> f64 {
        let hfx = eval_h_point(self, &self.map.eval(x));
        let hx = add(x, &self.u_series(x));
        let ahx = mat_vec(self.map.matrix(), &hx);
        torus_dist(&hfx, &ahx)
    }

    /// |dual_i · (h(f x) − A h(x))| per eigencomponent.
    pub fn component_residuals(&self, x: &Vec3) -> Vec3 {
        let hfx = add(&self.map.eval(x), &self.u_series(&self.map.eval(x)));
        let hx = add(x, &self.u_series(x));
        let d = min_image(&sub(&hfx, &mat_vec(self.map.matrix(), &hx)));
        let s = &self.map.spectral;
        [
            dot(&s.dual_frame[0], &d).abs(),
            dot(&s.dual_frame[1], &d).abs(),
            dot(&s.dual_frame[2], &d).abs(),
        ]
    }

    /// Bound W on |u| along e₂, the half-width of the centre search bracket.
    pub fn center_bound(&self) -> f64 {
        self.map.amplitude / (1.0 - self.map.spectral.kappa[1])
    }

    /// Pull the bracket [−W, W] forward along the backward orbit `back`
    /// (back[j-1] = z_{-j}) and return its image at z_0.
    fn bracket_from(&self, back: &[Vec3], depth: usize) -> (f64, f64) {
        let w = self.center_bound();
        let (mut lo, mut hi) = (-w, w);
        for j in (0..depth).rev() {
            let a = self.map.center_push(&back[j], lo);
            let b = self.map.center_push(&back[j], hi);
            lo = a.min(b);
            hi = a.max(b);
        }
        (lo, hi)
    }

    fn bracket_search(&self, back: &[Vec3], tol: f64) -> std::result::Result<f64, f64> {
        let max = back.len();
        let mut depth = 48.min(max);
        loop {
            let (lo, hi) = self.bracket_from(back, depth);
            if hi - lo < tol {
                return Ok(0.5 * (lo + hi));
            }
            if depth == max {
                return Err(hi - lo);
            }
            depth = (depth * 5 / 3).min(max);
        }
    }

    /// Centre offset τ with h(z + τ e₂) = z, from a floating-point backward A-orbit.
    pub fn center_offset(&self, z: &Vec3, tol: f64, max_depth: usize) -> Result<f64> {
        if self.map.amplitude == 0.0 {
            return Ok(0.0);
        }
        let minv = self.map.inverse_matrix();
        let mut back = Vec::with_capacity(max_depth);
        let mut p = *z;
        for _ in 0..max_depth {
            p = wrap(&mat_vec(minv, &p));
            back.push(p);
        }
        self.bracket_search(&back, tol)
            .map_err(|w| Error::NoConvergence {
                point: *z,
                residual: w,
            })
    }

    /// Centre offset at a lattice point, using its exact backward orbit.
    pub fn lattice_offset(
        &self,
        x: &LatticePoint,
        stepper: &LatticeStepper,
        tol: f64,
        max_depth: usize,
    ) -> Result<f64> {
        if self.map.amplitude == 0.0 {
            return Ok(0.0);
        }
        let mut back = Vec::with_capacity(max_depth);
        let mut p = *x;
        for _ in 0..max_depth {
            p = stepper.backward(&p);
            back.push(p.coords());
        }
        self.bracket_search(&back, tol)
            .map_err(|w| Error::NoConvergence {
                point: x.coords(),
                residual: w,
            })
    }

    pub fn on_center(&self, z: &Vec3, tau: f64) -> Vec3 {
        wrap(&add(z, &scale(self.map.e2(), tau)))
    }
}

fn eval_h_point(u: &DisplacementField, x: &Vec3) -> Vec3 {
    wrap(&add(x, &u.u_series(x)))
}

/// h(x) = x + u(x), with u from the orbit series at the field's depth.
/// At grid nodes this reproduces the stored values bit for bit.
pub fn eval_h(u: &DisplacementField, x: &TorusPoint) -> TorusPoint {
    TorusPoint {
        coords: eval_h_point(u, &x.coords),
    }
}

/// h(x) with u from trilinear interpolation of the grid.
pub fn eval_h_interp(u: &DisplacementField, x: &TorusPoint) -> TorusPoint {
    TorusPoint {
        coords: wrap(&add(&x.coords, &u.interpolate(&x.coords))),
    }
}

/// Depth cap for inversions driven by floating-point backward orbits.
pub const FLOAT_DEPTH_CAP: usize = 90;

pub fn invert_h(
    u: &DisplacementField,
    z: &TorusPoint,
    tol: f64,
    max_iter: usize,
) -> Result<TorusPoint> {
    let zc = z.coords;
    if u.lipschitz_est < 1.0 {
        let mut y = zc;
        for _ in 0..max_iter {
            let next = wrap(&sub(&zc, &u.u_series(&y)));
            let step = torus_dist(&next, &y);
            y = next;
            if step < 0.5 * tol {
                return Ok(TorusPoint { coords: y });
            }
        }
    }
    let tau = u.center_offset(&zc, tol, max_iter.min(FLOAT_DEPTH_CAP))?;
    Ok(TorusPoint {
        coords: u.on_center(&zc, tau),
    })
}

/// Diameter of the part of the centre segment through h⁻¹(z) mapped within
/// `tol` of z, estimated from `samples` points over `arc_len`.
pub fn fiber_probe(u: &DisplacementField, f: &DaMap, z: &TorusPoint, arc_len: f64) -> f64 {
    fiber_probe_with(u, f, z, arc_len, 1e-9, 33)
}

pub fn fiber_probe_with(
    u: &DisplacementField,
    f: &DaMap,
    z: &TorusPoint,
    arc_len: f64,
    tol: f64,
    samples: usize,
) -> f64 {
    if u.map.amplitude == 0.0 {
        return 0.0;
    }
    let (tau, width) = match u.center_offset(&z.coords, tol, FLOAT_DEPTH_CAP) {
        Ok(t) => (t, 0.0),
        Err(Error::NoConvergence { residual, .. }) => (0.0, residual),
        Err(_) => (0.0, f64::INFINITY),
    };
    let y0 = u.on_center(&z.coords, tau);
    let e2 = *f.e2();
    let mut inside: Vec<f64> = Vec::new();
    for k in 0..samples {
        let off = arc_len * (k as f64 / (samples - 1).max(1) as f64 - 0.5);
        let y = wrap(&add(&y0, &scale(&e2, off)));
        if torus_dist(&eval_h_point(u, &y), &z.coords) < tol {
            inside.push(off);
        }
    }
    let diam = match (inside.first(), inside.last()) {
        (Some(a), Some(b)) => b - a,
        _ => 0.0,
    };
    diam.max(width)
}

/// Minimal (a, b) with d_leaf ≤ a·d + b over the given (d_leaf, d) pairs:
/// a from pairs with d ≥ 1, b from the remaining excess.
pub fn fit_quasi_isometry(pairs: &[(f64, f64)]) -> (f64, f64) {
    let a = pairs
        .iter()
        .filter(|p| p.1 >= 1.0)
        .map(|p| p.0 / p.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let a = if a.is_finite() { a } else { 1.0 };
    let b = pairs.iter().map(|p| p.0 - a * p.1).fold(0.0f64, f64::max);
    (a, b)
}

/// Integrate a unit-speed leaf curve of length `len` in the cover.
pub fn integrate_leaf(
    frames: &FrameField,
    leaf: LeafKind,
    start: &Vec3,
    len: f64,
    step: f64,
) -> Result<Vec3> {
    let mut p = *start;
    let mut dir = frames.interpolate(leaf, &p);
    let field = |q: &Vec3, prev: &Vec3| {
        let v = frames.interpolate(leaf, q);
        if dot(&v, prev) < 0.0 {
            scale(&v, -1.0)
        } else {
            v
        }
    };
    let steps = (len / step).ceil().max(1.0) as usize;
    let h = len / steps as f64;
    for _ in 0..steps {
        let k1 = field(&p, &dir);
        let k2 = field(&add(&p, &scale(&k1, h / 2.0)), &k1);
        let k3 = field(&add(&p, &scale(&k2, h / 2.0)), &k2);
        let k4 = field(&add(&p, &scale(&k3, h)), &k3);
        let inc = [
            (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]) / 6.0,
            (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]) / 6.0,
            (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]) / 6.0,
        ];
        p = add(&p, &scale(&inc, h));
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::LeafIntegrationDiverged { point: p });
        }
        dir = k4;
    }
    Ok(p)
}

pub fn quasi_isometry_probe(
    frames: &FrameField,
    leaf: LeafKind,
    n_pairs: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let start = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let len = rng.gen_range(0.05..6.0);
        let end = integrate_leaf(frames, leaf, &start, len, 0.01)?;
        pairs.push((len, norm(&sub(&end, &start))));
    }
    Ok(fit_quasi_isometry(&pairs))
}

/// Smallest increment of the h-image parameter along the plaque nodes.
pub fn leaf_bijectivity_check(u: &DisplacementField, plaque: &Plaque) -> f64 {
    let d3 = u.map.spectral.dual_frame[2];
    let imgs: Vec<Vec3> = plaque
        .nodes
        .iter()
        .map(|n| eval_h_point(u, &n.coords))
        .collect();
    imgs.windows(2)
        .map(|w| dot(&d3, &min_image(&sub(&w[1], &w[0]))))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SemiconjugacyReport {
    pub residual_sup: f64,
    pub interpolation_error: f64,
    pub fiber_bound_k: f64,
    pub qi_a: f64,
    pub qi_b: f64,
    pub inversion_success_rate: f64,
}

/// Fibre sweep, centre-leaf quasi-isometry fit and inversion success rate.
pub fn semiconjugacy_report(
    u: &DisplacementField,
    frames: &FrameField,
    fiber_samples: usize,
    qi_pairs: usize,
    seed: u64,
) -> Result<SemiconjugacyReport> {
    let f = &u.map;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zs: Vec<Vec3> = (0..fiber_samples)
        .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
        .collect();
    let res: Vec<(f64, bool)> = zs
        .par_iter()
        .map(|z| {
            let tp = TorusPoint { coords: *z };
            let ok = invert_h(u, &tp, 1e-9, 200).is_ok();
            (fiber_probe_with(u, f, &tp, 0.2, 1e-9, 9), ok)
        })
        .collect();
    let fiber_bound_k = res.iter().map(|r| r.0).fold(0.0, f64::max);
    let ok = res.iter().filter(|r| r.1).count();
    let (qi_a, qi_b) = quasi_isometry_probe(frames, Family::C, qi_pairs, seed ^ 0x9e37_79b9)?;
    Ok(SemiconjugacyReport {
        residual_sup: u.residual_sup,
        interpolation_error: u.interpolation_error,
        fiber_bound_k,
        qi_a,
        qi_b,
        inversion_success_rate: if fiber_samples > 0 {
            ok as f64 / fiber_samples as f64
        } else {
            1.0
        },
    })
}
