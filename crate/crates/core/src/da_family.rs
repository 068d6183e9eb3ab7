//! DA perturbations `f = A + s·ρ·e₂`, their differentials, cone-field
//! verification of the dominated splitting and pointwise invariant frames.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::torus_linalg::{
    cross, det3, dot, inverse3, line_angle, mat_vec, min_image, norm, normalize, scale, vec_mat,
    wrap, Mat3, SpectralData, TorusPoint, Vec3,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Profile {
    /// Linear ramp with smoothstep corners of relative width `delta`.
    Ramp { delta: f64 },
    /// (1 − u²)³.
    Cubic,
}

impl Profile {
    /// Profile value and slope in the normalized radius u = t / radius.
    pub fn value_slope(&self, u: f64) -> (f64, f64) {
        if u >= 1.0 {
            return (0.0, 0.0);
        }
        match *self {
            Profile::Cubic => {
                let w = 1.0 - u * u;
                (w * w * w, -6.0 * u * w * w)
            }
            Profile::Ramp { delta } => {
                let c = 1.0 / (1.0 - delta);
                let big_q = |v: f64| v * v * v - 0.5 * v * v * v * v;
                let q = |v: f64| v * v * (3.0 - 2.0 * v);
                let (s, ds) = if u < delta {
                    (c * delta * big_q(u / delta), c * q(u / delta))
                } else if u <= 1.0 - delta {
                    (c * (u - 0.5 * delta), c)
                } else {
                    let v = (1.0 - u) / delta;
                    (1.0 - c * delta * big_q(v), c * q(v))
                };
                (1.0 - s, -ds)
            }
        }
    }

    /// sup |dρ/du|.
    pub fn max_slope(&self) -> f64 {
        match *self {
            Profile::Cubic => 6.0 / 5f64.sqrt() * 16.0 / 25.0,
            Profile::Ramp { delta } => 1.0 / (1.0 - delta),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpSpec {
    pub center: TorusPoint,
    pub radius: f64,
    pub profile: Profile,
}

impl BumpSpec {
    pub fn new(center: TorusPoint, radius: f64, profile: Profile) -> Result<Self> {
        if !(radius > 0.0 && radius < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "bump radius {radius} outside (0, 0.5)"
            )));
        }
        if let Profile::Ramp { delta } = profile {
            if !(delta > 0.0 && delta <= 0.5) {
                return Err(Error::InvalidParameter(format!(
                    "ramp corner width {delta} outside (0, 0.5]"
                )));
            }
        }
        Ok(BumpSpec {
            center,
            radius,
            profile,
        })
    }

    /// Default bump: ramp profile of radius 0.49 centred at the origin.
    pub fn standard() -> Self {
        BumpSpec {
            center: TorusPoint::origin(),
            radius: 0.49,
            profile: Profile::Ramp { delta: 0.1 },
        }
    }

    /// sup |∇ρ| on the torus.
    pub fn max_gradient(&self) -> f64 {
        self.profile.max_slope() / self.radius
    }

    pub fn value(&self, x: &Vec3) -> f64 {
        let d = min_image(&[
            x[0] - self.center.coords[0],
            x[1] - self.center.coords[1],
            x[2] - self.center.coords[2],
        ]);
        let t = norm(&d);
        if t >= self.radius {
            return 0.0;
        }
        self.profile.value_slope(t / self.radius).0
    }

    pub fn value_grad(&self, x: &Vec3) -> (f64, Vec3) {
        let d = min_image(&[
            x[0] - self.center.coords[0],
            x[1] - self.center.coords[1],
            x[2] - self.center.coords[2],
        ]);
        let t = norm(&d);
        if t >= self.radius {
            return (0.0, [0.0; 3]);
        }
        let (v, dv) = self.profile.value_slope(t / self.radius);
        if t == 0.0 {
            return (v, [0.0; 3]);
        }
        (v, scale(&d, dv / (self.radius * t)))
    }

    /// Distance from x to the bump centre on the torus.
    pub fn center_distance(&self, x: &Vec3) -> f64 {
        norm(&min_image(&[
            x[0] - self.center.coords[0],
            x[1] - self.center.coords[1],
            x[2] - self.center.coords[2],
        ]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DaMap {
    pub spectral: SpectralData,
    pub bump: BumpSpec,
    pub amplitude: f64,
    pub power: u32,
    m: Mat3,
    minv: Mat3,
}

pub const DIFFEO_GRID: usize = 64;

pub fn make_da_map(s: &SpectralData, bump: BumpSpec, amplitude: f64) -> Result<DaMap> {
    if !(amplitude >= 0.0) || !amplitude.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "amplitude {amplitude} must be finite and >= 0"
        )));
    }
    let f = DaMap {
        spectral: *s,
        bump,
        amplitude,
        power: 1,
        m: s.automorphism.as_f64(),
        minv: s.automorphism.inverse_f64(),
    };
    if amplitude > 0.0 {
        f.check_diffeomorphism(DIFFEO_GRID)?;
    }
    Ok(f)
}

pub fn eval_and_diff(f: &DaMap, x: &TorusPoint) -> (TorusPoint, Mat3) {
    (
        TorusPoint {
            coords: f.eval(&x.coords),
        },
        f.diff(&x.coords),
    )
}

impl DaMap {
    pub fn with_power(mut self, power: u32) -> Result<Self> {
        if power == 0 {
            return Err(Error::InvalidParameter("power must be >= 1".into()));
        }
        self.power = power;
        Ok(self)
    }

    pub fn e2(&self) -> &Vec3 {
        &self.spectral.frame[1]
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.m
    }

    pub fn inverse_matrix(&self) -> &Mat3 {
        &self.minv
    }

    /// Sup norm of the periodic perturbation p = s·ρ·e₂.
    pub fn perturbation_sup(&self) -> f64 {
        self.amplitude
    }

    #[inline]
    pub fn perturbation(&self, x: &Vec3) -> Vec3 {
        if self.amplitude == 0.0 {
            return [0.0; 3];
        }
        scale(self.e2(), self.amplitude * self.bump.value(x))
    }

    /// f(x) reduced to [0,1)³.
    #[inline]
    pub fn eval(&self, x: &Vec3) -> Vec3 {
        wrap(&self.lift(x))
    }

    /// A·x + p(x) without reduction.
    #[inline]
    pub fn lift(&self, x: &Vec3) -> Vec3 {
        let ax = mat_vec(&self.m, x);
        if self.amplitude == 0.0 {
            return ax;
        }
        let k = self.amplitude * self.bump.value(x);
        let e = self.e2();
        [ax[0] + k * e[0], ax[1] + k * e[1], ax[2] + k * e[2]]
    }

    #[inline]
    pub fn diff(&self, x: &Vec3) -> Mat3 {
        let mut d = self.m;
        if self.amplitude == 0.0 {
            return d;
        }
        let (_, g) = self.bump.value_grad(x);
        let e = self.e2();
        for i in 0..3 {
            for j in 0..3 {
                d[i][j] += self.amplitude * e[i] * g[j];
            }
        }
        d
    }

    /// f^power and its differential.
    pub fn eval_iterate(&self, x: &Vec3) -> (Vec3, Mat3) {
        let mut y = *x;
        let mut d = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for _ in 0..self.power {
            d = crate::torus_linalg::mat_mul(&self.diff(&y), &d);
            y = self.eval(&y);
        }
        (y, d)
    }

    /// Centre coordinate update along e₂: f(z + t·e₂) = A z + (μ₂ t + s ρ(z + t e₂)) e₂.
    #[inline]
    pub fn center_push(&self, z: &Vec3, t: f64) -> f64 {
        let mu2 = self.spectral.mu[1];
        if self.amplitude == 0.0 {
            return mu2 * t;
        }
        let e = self.e2();
        let y = [z[0] + t * e[0], z[1] + t * e[1], z[2] + t * e[2]];
        mu2 * t + self.amplitude * self.bump.value(&y)
    }

    /// e₂-component of df(y)·e₂, the centre derivative in the adapted metric.
    #[inline]
    pub fn center_derivative(&self, y: &Vec3) -> f64 {
        let w = mat_vec(&self.diff(y), self.e2());
        dot(&self.spectral.dual_frame[1], &w)
    }

    /// f⁻¹(x) reduced to [0,1)³.
    pub fn inverse(&self, x: &Vec3) -> Vec3 {
        let w = mat_vec(&self.minv, x);
        if self.amplitude == 0.0 {
            return wrap(&w);
        }
        let s = self.amplitude;
        let mu2 = self.spectral.mu[1];
        let e = *self.e2();
        let span = s / mu2.abs();
        if self.bump.center_distance(&w) >= self.bump.radius + span {
            return wrap(&w);
        }
        let at = |t: f64| {
            [
                w[0] - t / mu2 * e[0],
                w[1] - t / mu2 * e[1],
                w[2] - t / mu2 * e[2],
            ]
        };
        let (mut lo, mut hi) = (0.0f64, s);
        let mut t = s * self.bump.value(&w);
        for _ in 0..60 {
            let y = at(t);
            let (r, g) = self.bump.value_grad(&y);
            let gval = t - s * r;
            if gval > 0.0 {
                hi = hi.min(t);
            } else {
                lo = lo.max(t);
            }
            if gval == 0.0 {
                break;
            }
            let dg = 1.0 + s / mu2 * dot(&g, &e);
            let mut next = t - gval / dg;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() <= 1e-17 + 1e-16 * t.abs() {
                t = next;
                break;
            }
            t = next;
        }
        wrap(&at(t))
    }

    pub fn check_diffeomorphism(&self, n: usize) -> Result<()> {
        let sign = (self.spectral.automorphism.det() as f64).signum();
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let x = [
                        i as f64 / n as f64,
                        j as f64 / n as f64,
                        k as f64 / n as f64,
                    ];
                    let d = det3(&self.diff(&x));
                    if !(d * sign > 0.0) {
                        return Err(Error::NotDiffeomorphism {
                            cell: [i, j, k],
                            det: d,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Differentials along the orbit segment x_{-m} .. x_{m}, with inverses.
pub(crate) struct OrbitWindow {
    pub half: usize,
    pub dfs: Vec<Mat3>,
    pub dinv: Vec<Mat3>,
}

impl OrbitWindow {
    pub fn new(f: &DaMap, x: &Vec3, half: usize) -> Self {
        let len = 2 * half + 1;
        let mut pts = vec![[0.0; 3]; len];
        pts[half] = *x;
        for k in 1..=half {
            pts[half + k] = f.eval(&pts[half + k - 1]);
            pts[half - k] = f.inverse(&pts[half - k + 1]);
        }
        let dfs: Vec<Mat3> = pts.iter().map(|p| f.diff(p)).collect();
        let dinv: Vec<Mat3> = dfs
            .iter()
            .map(|d| inverse3(d).unwrap_or([[f64::NAN; 3]; 3]))
            .collect();
        OrbitWindow { half, dfs, dinv }
    }

    fn idx(&self, i: isize) -> usize {
        (self.half as isize + i) as usize
    }

    /// Frame estimates at x_i from `n` steps of iteration on each side.
    pub fn frames(&self, s: &SpectralData, i: isize, n: usize) -> [Vec3; 3] {
        let c = self.idx(i);
        let mut u = s.frame[2];
        for k in (c - n)..c {
            u = normalize(&mat_vec(&self.dfs[k], &u));
        }
        let mut st = s.frame[0];
        for k in (c..c + n).rev() {
            st = normalize(&mat_vec(&self.dinv[k], &st));
        }
        let mut n_cs = s.dual_frame[2];
        for k in (c..c + n).rev() {
            n_cs = normalize(&vec_mat(&n_cs, &self.dfs[k]));
        }
        let mut n_cu = s.dual_frame[0];
        for k in (c - n)..c {
            n_cu = normalize(&vec_mat(&n_cu, &self.dinv[k]));
        }
        let ce = normalize(&cross(&n_cs, &n_cu));
        let orient = |v: Vec3, d: &Vec3| if dot(&v, d) < 0.0 { scale(&v, -1.0) } else { v };
        [
            orient(st, &s.dual_frame[0]),
            orient(ce, &s.dual_frame[1]),
            orient(u, &s.dual_frame[2]),
        ]
    }
}

/// Columns scaled so that dual_i · Ê^i = 1.
fn adapted_matrix(s: &SpectralData, fr: &[Vec3; 3]) -> Mat3 {
    let cols: Vec<Vec3> = (0..3)
        .map(|i| scale(&fr[i], 1.0 / dot(&s.dual_frame[i], &fr[i])))
        .collect();
    [
        [cols[0][0], cols[1][0], cols[2][0]],
        [cols[0][1], cols[1][1], cols[2][1]],
        [cols[0][2], cols[1][2], cols[2][2]],
    ]
}

fn adapted_rates(s: &SpectralData, df: &Mat3, fr: &[Vec3; 3]) -> ([f64; 3], [f64; 3]) {
    let mut adapted = [0.0; 3];
    let mut euclid = [0.0; 3];
    for i in 0..3 {
        let w = mat_vec(df, &fr[i]);
        adapted[i] = (dot(&s.dual_frame[i], &w).abs() / dot(&s.dual_frame[i], &fr[i]).abs()).ln();
        euclid[i] = (norm(&w) / norm(&fr[i])).ln();
    }
    (adapted, euclid)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartialHyperbolicityReport {
    /// λ₁..λ₆ in the adapted metric.
    pub lambda: [f64; 6],
    pub lambda5_min: f64,
    pub lambda5_max: f64,
    /// Same bounds measured with Euclidean norms on the frame vectors.
    pub euclidean_lambda: [f64; 6],
    /// Largest passing angle for the s, c and u cone families (0 if none passed).
    pub cone_angles: [f64; 3],
    pub grid_resolution: usize,
    pub iterations: usize,
    pub verified: bool,
    pub first_violation: Option<[usize; 3]>,
    pub violation_reason: Option<String>,
}

impl PartialHyperbolicityReport {
    pub fn require_verified(&self) -> Result<()> {
        if self.verified {
            Ok(())
        } else {
            Err(Error::VerificationFailed {
                cell: self.first_violation.unwrap_or([0; 3]),
                reason: self.violation_reason.clone().unwrap_or_default(),
            })
        }
    }
}

pub const CONE_HALVINGS: usize = 4;

struct CellCheck {
    rates: [f64; 3],
    euclid: [f64; 3],
    /// cone_ok[family][attempt], families s, cs, cu, u.
    cone_ok: [[bool; CONE_HALVINGS]; 4],
    finite: bool,
}

fn frame_coords(inv: &Mat3, w: &Vec3) -> Vec3 {
    mat_vec(inv, w)
}

fn check_cell(f: &DaMap, x: &Vec3, iterations: usize, angle: f64) -> CellCheck {
    let s = &f.spectral;
    let win = OrbitWindow::new(f, x, iterations + 1);
    let fr0 = win.frames(s, 0, iterations);
    let frp = win.frames(s, 1, iterations);
    let frm = win.frames(s, -1, iterations);
    let df = &win.dfs[win.idx(0)];
    let dinv_back = &win.dinv[win.idx(-1)];
    let (rates, euclid) = adapted_rates(s, df, &fr0);
    let a0 = adapted_matrix(s, &fr0);
    let inv_p = inverse3(&adapted_matrix(s, &frp));
    let inv_m = inverse3(&adapted_matrix(s, &frm));
    let mut cone_ok = [[false; CONE_HALVINGS]; 4];
    let finite = rates.iter().all(|r| r.is_finite()) && inv_p.is_some() && inv_m.is_some();
    if !finite {
        return CellCheck {
            rates,
            euclid,
            cone_ok,
            finite,
        };
    }
    let (inv_p, inv_m) = (inv_p.unwrap(), inv_m.unwrap());
    let dirs: [(f64, f64); 4] = [
        (1.0, 0.0),
        (0.0, 1.0),
        (0.5f64.sqrt(), 0.5f64.sqrt()),
        (-(0.5f64.sqrt()), 0.5f64.sqrt()),
    ];
    for attempt in 0..CONE_HALVINGS {
        let tn = (angle / 2f64.powi(attempt as i32)).tan();
        let mut good = [true; 4];
        for (ca, sa) in dirs {
            for sign in [1.0, -1.0] {
                // s cone, backward
                let c = [1.0, sign * tn * ca, sign * tn * sa];
                let w = mat_vec(dinv_back, &mat_vec(&a0, &c));
                let k = frame_coords(&inv_m, &w);
                if !((k[1] * k[1] + k[2] * k[2]).sqrt() < tn * k[0].abs()) {
                    good[0] = false;
                }
                // cs cone, backward
                let c = [ca, sa, sign * tn];
                let w = mat_vec(dinv_back, &mat_vec(&a0, &c));
                let k = frame_coords(&inv_m, &w);
                if !(k[2].abs() < tn * (k[0] * k[0] + k[1] * k[1]).sqrt()) {
                    good[1] = false;
                }
                // cu cone, forward
                let c = [sign * tn, ca, sa];
                let w = mat_vec(df, &mat_vec(&a0, &c));
                let k = frame_coords(&inv_p, &w);
                if !(k[0].abs() < tn * (k[1] * k[1] + k[2] * k[2]).sqrt()) {
                    good[2] = false;
                }
                // u cone, forward
                let c = [sign * tn * ca, sign * tn * sa, 1.0];
                let w = mat_vec(df, &mat_vec(&a0, &c));
                let k = frame_coords(&inv_p, &w);
                if !((k[0] * k[0] + k[1] * k[1]).sqrt() < tn * k[2].abs()) {
                    good[3] = false;
                }
            }
        }
        for fam in 0..4 {
            cone_ok[fam][attempt] = good[fam];
        }
    }
    CellCheck {
        rates,
        euclid,
        cone_ok,
        finite,
    }
}

pub(crate) fn grid_point(n: usize, idx: usize) -> ([usize; 3], Vec3) {
    let i = idx % n;
    let j = (idx / n) % n;
    let k = idx / (n * n);
    (
        [i, j, k],
        [
            i as f64 / n as f64,
            j as f64 / n as f64,
            k as f64 / n as f64,
        ],
    )
}

pub fn verify_partial_hyperbolicity(
    f: &DaMap,
    grid_n: usize,
    cone_angle: f64,
    iterations: usize,
) -> Result<PartialHyperbolicityReport> {
    if grid_n < 16 {
        return Err(Error::InvalidParameter(format!(
            "grid_n {grid_n} must be >= 16"
        )));
    }
    if !(cone_angle > 0.0 && cone_angle < std::f64::consts::FRAC_PI_2) || iterations == 0 {
        return Err(Error::InvalidParameter(
            "cone angle in (0, π/2) and iterations >= 1 required".into(),
        ));
    }
    let total = grid_n * grid_n * grid_n;
    let cells: Vec<CellCheck> = (0..total)
        .into_par_iter()
        .map(|idx| check_cell(f, &grid_point(grid_n, idx).1, iterations, cone_angle))
        .collect();

    let mut lambda = [
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    ];
    let mut euclidean = lambda;
    let mut fam_ok = [[true; CONE_HALVINGS]; 4];
    let mut violation: Option<([usize; 3], String)> = None;
    for (idx, c) in cells.iter().enumerate() {
        if !c.finite {
            violation.get_or_insert((grid_point(grid_n, idx).0, "non-finite rates".into()));
            continue;
        }
        for i in 0..3 {
            lambda[2 * i] = lambda[2 * i].min(c.rates[i]);
            lambda[2 * i + 1] = lambda[2 * i + 1].max(c.rates[i]);
            euclidean[2 * i] = euclidean[2 * i].min(c.euclid[i]);
            euclidean[2 * i + 1] = euclidean[2 * i + 1].max(c.euclid[i]);
        }
        if !(c.rates[0] < c.rates[1] && c.rates[1] < c.rates[2]) {
            violation.get_or_insert((grid_point(grid_n, idx).0, "pointwise rate gap fails".into()));
        }
        for fam in 0..4 {
            for a in 0..CONE_HALVINGS {
                fam_ok[fam][a] &= c.cone_ok[fam][a];
            }
        }
    }
    let passing = |fam: usize| -> Option<f64> {
        (0..CONE_HALVINGS)
            .find(|&a| fam_ok[fam][a])
            .map(|a| cone_angle / 2f64.powi(a as i32))
    };
    let ang_s = passing(0);
    let ang_c = match (passing(1), passing(2)) {
        (Some(a), Some(b)) => Some(a.min(b)),
        _ => None,
    };
    let ang_u = passing(3);
    let cones_ok = ang_s.is_some() && ang_c.is_some() && ang_u.is_some();
    if !cones_ok && violation.is_none() {
        // locate the first cell where every angle failed for some family
        for (idx, c) in cells.iter().enumerate() {
            if (0..4).any(|fam| c.cone_ok[fam].iter().all(|ok| !ok)) {
                violation = Some((grid_point(grid_n, idx).0, "cone invariance fails".into()));
                break;
            }
        }
        if violation.is_none() {
            violation = Some(([0; 3], "no common cone angle".into()));
        }
    }
    let signs_ok = lambda[1] < 0.0 && lambda[4] > 0.0;
    if !signs_ok && violation.is_none() {
        violation = Some(([0; 3], "lambda2 < 0 < lambda5 fails".into()));
    }
    let verified = violation.is_none();
    Ok(PartialHyperbolicityReport {
        lambda,
        lambda5_min: lambda[4],
        lambda5_max: lambda[5],
        euclidean_lambda: euclidean,
        cone_angles: [
            ang_s.unwrap_or(0.0),
            ang_c.unwrap_or(0.0),
            ang_u.unwrap_or(0.0),
        ],
        grid_resolution: grid_n,
        iterations,
        verified,
        first_violation: violation.as_ref().map(|v| v.0),
        violation_reason: violation.map(|v| v.1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    S,
    C,
    U,
}

impl Family {
    fn index(self) -> usize {
        match self {
            Family::S => 0,
            Family::C => 1,
            Family::U => 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameField {
    pub grid_n: usize,
    pub iterations: usize,
    pub spectral: SpectralData,
    /// Unit vectors Ê^s, Ê^c, Ê^u per node, x-fastest order.
    pub frames: Vec<[Vec3; 3]>,
    /// Largest invariance defect angle per node.
    pub residuals: Vec<f64>,
}

pub const FRAME_TOLERANCE: f64 = 1e-6;

pub fn compute_frames(f: &DaMap, grid_n: usize, iters: usize) -> Result<FrameField> {
    compute_frames_with_tolerance(f, grid_n, iters, FRAME_TOLERANCE)
}

pub fn compute_frames_with_tolerance(
    f: &DaMap,
    grid_n: usize,
    iters: usize,
    tol: f64,
) -> Result<FrameField> {
    if grid_n == 0 || iters == 0 {
        return Err(Error::InvalidParameter(
            "grid_n and iters must be >= 1".into(),
        ));
    }
    let s = &f.spectral;
    let total = grid_n * grid_n * grid_n;
    let out: Vec<([Vec3; 3], f64)> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let x = grid_point(grid_n, idx).1;
            let win = OrbitWindow::new(f, &x, iters + 1);
            let fr = win.frames(s, 0, iters);
            let frn = win.frames(s, 1, iters);
            let df = &win.dfs[win.idx(0)];
            let defect = (0..3)
                .map(|i| line_angle(&mat_vec(df, &fr[i]), &frn[i]))
                .fold(0.0f64, f64::max);
            (fr, defect)
        })
        .collect();
    let mut frames = Vec::with_capacity(total);
    let mut residuals = Vec::with_capacity(total);
    for (idx, (fr, d)) in out.into_iter().enumerate() {
        if !(d <= tol) {
            let x = grid_point(grid_n, idx).1;
            return Err(Error::NoConvergence {
                point: x,
                residual: d,
            });
        }
        frames.push(fr);
        residuals.push(d * (1.0 + 1e-9) + 1e-15);
    }
    Ok(FrameField {
        grid_n,
        iterations: iters,
        spectral: *s,
        frames,
        residuals,
    })
}

/// Frames at a single point, computed from `iters` steps on each side.
pub fn local_frames(f: &DaMap, x: &Vec3, iters: usize) -> [Vec3; 3] {
    OrbitWindow::new(f, x, iters).frames(&f.spectral, 0, iters)
}

impl FrameField {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }

    /// Largest angle between Ê^c and e₂ over the grid, with its node.
    pub fn max_center_deviation(&self) -> (f64, usize) {
        let e2 = self.spectral.frame[1];
        self.frames
            .iter()
            .enumerate()
            .map(|(i, fr)| (line_angle(&fr[1], &e2), i))
            .fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a })
    }

    /// Trilinear interpolation of one family, renormalized.
    pub fn interpolate(&self, family: Family, x: &Vec3) -> Vec3 {
        let n = self.grid_n;
        let fi = family.index();
        let p = wrap(x);
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for d in 0..3 {
            let g = p[d] * n as f64;
            let b = g.floor();
            base[d] = (b as usize) % n;
            frac[d] = g - b;
        }
        let mut acc = [0.0; 3];
        for corner in 0..8 {
            let mut w = 1.0;
            let mut id = [0usize; 3];
            for d in 0..3 {
                let bit = (corner >> d) & 1;
                id[d] = (base[d] + bit) % n;
                w *= if bit == 1 { frac[d] } else { 1.0 - frac[d] };
            }
            if w == 0.0 {
                continue;
            }
            let v = self.frames[id[0] + n * (id[1] + n * id[2])][fi];
            acc = [acc[0] + w * v[0], acc[1] + w * v[1], acc[2] + w * v[2]];
        }
        normalize(&acc)
    }

    /// Log growth of df on the interpolated frame vector, adapted metric.
    pub fn log_rate(&self, f: &DaMap, family: Family, y: &Vec3) -> f64 {
        let v = self.interpolate(family, y);
        let w = mat_vec(&f.diff(y), &v);
        let d = &self.spectral.dual_frame[family.index()];
        (dot(d, &w).abs() / dot(d, &v).abs()).ln()
    }
}

/// Operator norms of dfⁿ on Ê^{cs}(x) and on Ê^c(x) in the adapted metric.
pub fn cs_center_norms(f: &DaMap, x: &Vec3, n: usize, iters: usize) -> (f64, f64) {
    let s = &f.spectral;
    let win = OrbitWindow::new(f, x, n + iters + 1);
    let fr0 = win.frames(s, 0, iters);
    let frn = win.frames(s, n as isize, iters);
    let a0 = adapted_matrix(s, &fr0);
    let invn = inverse3(&adapted_matrix(s, &frn)).expect("degenerate frame");
    let mut cols = [[0.0; 2]; 2];
    for j in 0..2 {
        let mut w = [a0[0][j], a0[1][j], a0[2][j]];
        for k in 0..n {
            w = mat_vec(&win.dfs[win.idx(k as isize)], &w);
        }
        let c = mat_vec(&invn, &w);
        cols[j] = [c[0], c[1]];
    }
    // largest singular value of the 2x2 matrix with columns cols
    let (a, b, c, d) = (cols[0][0], cols[1][0], cols[0][1], cols[1][1]);
    let s1 = a * a + b * b + c * c + d * d;
    let det = a * d - b * c;
    let disc = (s1 * s1 - 4.0 * det * det).max(0.0).sqrt();
    let cs = ((s1 + disc) / 2.0).sqrt();
    (cs, cols[1][1].abs())
}
