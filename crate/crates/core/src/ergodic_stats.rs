//! Monte Carlo estimators under ν_f: sampling through h⁻¹ on exact lattice
//! orbits, Lyapunov and mostly-contracting checks, Birkhoff sums,
//! correlation and deviation series, and the plaque-tree moment bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::da_family::{DaMap, Family, FrameField};
use crate::error::{Error, Result};
use crate::numerics::{chunked_reduce, linear_fit, KahanSum};
use crate::plaques::{build_plaque, APlaque, Partition, WeightedPlaqueMeasure};
use crate::semiconjugacy::DisplacementField;
use crate::torus_linalg::{
    min_image, norm, sub, torus_dist, IntegerAutomorphism, LatticePoint, LatticeStepper,
    TorusPoint, Vec3, DEFAULT_MODULUS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ObservableKind {
    /// cos(2π k·x).
    Character { k: [i64; 3] },
    /// d(x, center)^exponent.
    Cusp { center: TorusPoint, exponent: f64 },
    /// Trilinear interpolation of periodic node values, x-fastest.
    NodeGrid { n: usize, values: Vec<f64> },
}

/// φ = amplitude·(base observable) + offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableSpec {
    pub kind: ObservableKind,
    pub amplitude: f64,
    pub offset: f64,
    pub holder_exp: f64,
    /// Upper bound for sup|φ| plus the γ-Hölder seminorm.
    pub holder_norm: f64,
}

impl ObservableSpec {
    pub fn character(k: [i64; 3], gamma: f64) -> Self {
        Self::new(ObservableKind::Character { k }, 1.0, 0.0, gamma)
    }

    pub fn cusp(center: TorusPoint, gamma: f64) -> Self {
        Self::new(
            ObservableKind::Cusp {
                center,
                exponent: gamma,
            },
            1.0,
            0.0,
            gamma,
        )
    }

    pub fn nodegrid(n: usize, values: Vec<f64>, gamma: f64) -> Result<Self> {
        if n == 0 || values.len() != n * n * n {
            return Err(Error::InvalidParameter("node grid needs n³ values".into()));
        }
        Ok(Self::new(
            ObservableKind::NodeGrid { n, values },
            1.0,
            0.0,
            gamma,
        ))
    }

    pub fn constant(c: f64) -> Self {
        Self::new(ObservableKind::Character { k: [0, 0, 0] }, 0.0, c, 0.5)
    }

    pub fn new(kind: ObservableKind, amplitude: f64, offset: f64, gamma: f64) -> Self {
        let mut o = ObservableSpec {
            kind,
            amplitude,
            offset,
            holder_exp: gamma,
            holder_norm: 0.0,
        };
        o.holder_norm = o.norm_bound();
        o
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self::new(
            self.kind.clone(),
            self.amplitude * a,
            self.offset * a,
            self.holder_exp,
        )
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self::new(
            self.kind.clone(),
            self.amplitude,
            self.offset + c,
            self.holder_exp,
        )
    }

    fn base_bounds(&self) -> (f64, f64) {
        let g = self.holder_exp;
        match &self.kind {
            ObservableKind::Character { k } => {
                let kn = (k.iter().map(|v| (v * v) as f64).sum::<f64>()).sqrt();
                (1.0, 2.0 * (std::f64::consts::PI * kn).powf(g))
            }
            ObservableKind::Cusp { exponent, .. } => {
                let e = *exponent;
                let diam = 3.0f64.sqrt() / 2.0;
                let semi = if e < g {
                    f64::INFINITY
                } else if e <= 1.0 {
                    1.0
                } else {
                    e * diam.powf(e - g)
                };
                (diam.powf(e), semi)
            }
            ObservableKind::NodeGrid { n, values } => {
                let sup = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
                let n = *n;
                let mut diff = 0.0f64;
                for k in 0..n {
                    for j in 0..n {
                        for i in 0..n {
                            let v = values[i + n * (j + n * k)];
                            for (a, b, c) in [
                                ((i + 1) % n, j, k),
                                (i, (j + 1) % n, k),
                                (i, j, (k + 1) % n),
                            ] {
                                diff = diff.max((values[a + n * (b + n * c)] - v).abs());
                            }
                        }
                    }
                }
                let lip = 3.0f64.sqrt() * n as f64 * diff;
                (sup, (2.0 * sup).powf(1.0 - g) * lip.powf(g))
            }
        }
    }

    fn norm_bound(&self) -> f64 {
        let (sup, semi) = self.base_bounds();
        self.amplitude.abs() * (sup + semi) + self.offset.abs()
    }

    /// Bound on sup|φ|.
    pub fn sup_bound(&self) -> f64 {
        self.amplitude.abs() * self.base_bounds().0 + self.offset.abs()
    }

    #[inline]
    pub fn eval(&self, x: &Vec3) -> f64 {
        if self.amplitude == 0.0 {
            return self.offset;
        }
        let base = match &self.kind {
            ObservableKind::Character { k } => {
                let p = k[0] as f64 * x[0] + k[1] as f64 * x[1] + k[2] as f64 * x[2];
                (2.0 * std::f64::consts::PI * p.rem_euclid(1.0)).cos()
            }
            ObservableKind::Cusp { center, exponent } => {
                torus_dist(x, &center.coords).powf(*exponent)
            }
            ObservableKind::NodeGrid { n, values } => trilinear(*n, values, x),
        };
        self.amplitude * base + self.offset
    }

    /// Lebesgue mean when it is known in closed form.
    pub fn lebesgue_mean(&self) -> Option<f64> {
        match &self.kind {
            ObservableKind::Character { k } if *k != [0, 0, 0] => Some(self.offset),
            ObservableKind::Character { .. } => Some(self.amplitude + self.offset),
            ObservableKind::NodeGrid { values, .. } => Some(
                self.amplitude * values.iter().sum::<f64>() / values.len() as f64 + self.offset,
            ),
            ObservableKind::Cusp { .. } => None,
        }
    }

    /// Largest |φ(x) − φ(y)| / d(x,y)^γ over random pairs, some of them close.
    pub fn empirical_holder_quotient(&self, pairs: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best = 0.0f64;
        for i in 0..pairs {
            let x: Vec3 = [rng.gen(), rng.gen(), rng.gen()];
            let scale = 10f64.powi(-((i % 6) as i32));
            let y: Vec3 = [
                x[0] + scale * (rng.gen::<f64>() - 0.5),
                x[1] + scale * (rng.gen::<f64>() - 0.5),
                x[2] + scale * (rng.gen::<f64>() - 0.5),
            ];
            let d = torus_dist(&x, &y);
            if d > 0.0 {
                best = best.max((self.eval(&x) - self.eval(&y)).abs() / d.powf(self.holder_exp));
            }
        }
        best
    }
}

fn trilinear(n: usize, values: &[f64], x: &Vec3) -> f64 {
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for d in 0..3 {
        let g = x[d].rem_euclid(1.0) * n as f64;
        let b = g.floor();
        base[d] = (b as usize) % n;
        frac[d] = g - b;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut id = [0usize; 3];
        for d in 0..3 {
            let bit = (corner >> d) & 1;
            id[d] = (base[d] + bit) % n;
            w *= if bit == 1 { frac[d] } else { 1.0 - frac[d] };
        }
        acc += w * values[id[0] + n * (id[1] + n * id[2])];
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSeries {
    pub n_values: Vec<usize>,
    pub estimates: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub sample_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub log_intercept: f64,
    /// Slope of log|estimate| against n.
    pub rate: f64,
    pub rate_stderr: f64,
    pub r_squared: f64,
    /// First and last n of the fitted entries.
    pub fit_range: (usize, usize),
    pub usable: usize,
    /// Set when the fitted quantity vanishes after the first entry.
    pub degenerate: bool,
}

impl RateFit {
    pub fn tau(&self) -> f64 {
        self.rate.exp()
    }
}

/// Minimum number of above-noise entries for a fit.
pub const MIN_FIT_ENTRIES: usize = 5;

/// Log-linear fit over the leading run of entries with |estimate| > 3·stderr.
/// The run ends at the first entry below the noise floor.
pub fn fit_exponential(series: &EstimateSeries) -> Result<RateFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut started = false;
    for ((n, e), s) in series
        .n_values
        .iter()
        .zip(&series.estimates)
        .zip(&series.stderrs)
    {
        let above = e.abs() > 3.0 * s && e.abs() > 0.0;
        if above {
            started = true;
            xs.push(*n as f64);
            ys.push(e.abs().ln());
        } else if started {
            break;
        }
    }
    if xs.len() < MIN_FIT_ENTRIES {
        return Err(Error::InsufficientSignal {
            usable: xs.len(),
            needed: MIN_FIT_ENTRIES,
        });
    }
    let (a, b, r2) = linear_fit(&xs, &ys);
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - a - b * x).powi(2))
        .sum();
    let rate_stderr = if m > 2.0 && sxx > 0.0 {
        (ss_res / (m - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(RateFit {
        log_intercept: a,
        rate: b,
        rate_stderr,
        r_squared: r2,
        fit_range: (xs[0] as usize, *xs.last().unwrap() as usize),
        usable: xs.len(),
        degenerate: false,
    })
}

/// Samples of ν_f: Lebesgue-random lattice points x and the centre offsets
/// τ with h(x + τ e₂) = x.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuSamples {
    pub lattice: Vec<LatticePoint>,
    pub taus: Vec<f64>,
    pub requested: usize,
    pub dropped: usize,
    pub seed: u64,
}

impl NuSamples {
    pub fn len(&self) -> usize {
        self.lattice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lattice.is_empty()
    }

    pub fn drop_rate(&self) -> f64 {
        if self.requested == 0 {
            0.0
        } else {
            self.dropped as f64 / self.requested as f64
        }
    }

    /// The point y = h⁻¹(x) of sample i.
    pub fn point(&self, u: &DisplacementField, i: usize) -> Vec3 {
        u.on_center(&self.lattice[i].coords(), self.taus[i])
    }
}

pub const MAX_DROP_RATE: f64 = 0.01;
/// Bracket width and depth cap for sample inversions.
pub const SAMPLE_TOL: f64 = 1e-10;
pub const SAMPLE_DEPTH: usize = 400;

/// The i-th lattice point drawn from (seed, i), independent of any other draw.
pub fn lattice_sample(seed: u64, i: usize) -> LatticePoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let q = DEFAULT_MODULUS;
    LatticePoint {
        numerators: [
            rng.gen_range(0..q),
            rng.gen_range(0..q),
            rng.gen_range(0..q),
        ],
        modulus: q,
    }
}

pub fn sample_nu_f(
    u: &DisplacementField,
    a: &IntegerAutomorphism,
    count: usize,
    seed: u64,
) -> Result<NuSamples> {
    let stepper = LatticeStepper::new(a, DEFAULT_MODULUS)?;
    let res: Vec<(LatticePoint, Option<f64>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let x = lattice_sample(seed, i);
            (
                x,
                u.lattice_offset(&x, &stepper, SAMPLE_TOL, SAMPLE_DEPTH)
                    .ok(),
            )
        })
        .collect();
    let mut lattice = Vec::with_capacity(count);
    let mut taus = Vec::with_capacity(count);
    let mut dropped = 0;
    for (x, t) in res {
        match t {
            Some(t) => {
                lattice.push(x);
                taus.push(t);
            }
            None => dropped += 1,
        }
    }
    let out = NuSamples {
        lattice,
        taus,
        requested: count,
        dropped,
        seed,
    };
    if out.drop_rate() > MAX_DROP_RATE {
        return Err(Error::ExcessiveDropRate {
            rate: out.drop_rate(),
            limit: MAX_DROP_RATE,
        });
    }
    Ok(out)
}

/// Walks the f-orbit of sample i for `steps` points: the lattice part follows
/// A exactly and the centre offset follows τ ↦ μ₂τ + sρ(z + τe₂).
fn for_orbit<F: FnMut(usize, &Vec3)>(
    f: &DaMap,
    stepper: &LatticeStepper,
    x: &LatticePoint,
    tau: f64,
    steps: usize,
    mut visit: F,
) {
    let e2 = *f.e2();
    let mut z = *x;
    let mut t = tau;
    for k in 0..steps {
        let zc = z.coords();
        let y = [zc[0] + t * e2[0], zc[1] + t * e2[1], zc[2] + t * e2[2]];
        visit(k, &y);
        if k + 1 < steps {
            t = f.center_push(&zc, t);
            z = stepper.forward(&z);
        }
    }
}

/// ν_f-mean of φ from the samples, with its standard error.
pub fn nu_mean(u: &DisplacementField, samples: &NuSamples, phi: &ObservableSpec) -> (f64, f64) {
    let m = samples.len();
    let (s1, s2) = chunked_reduce(
        m,
        |r| {
            let mut a = KahanSum::new();
            let mut b = KahanSum::new();
            for i in r {
                let v = phi.eval(&samples.point(u, i));
                a.add(v);
                b.add(v * v);
            }
            (a, b)
        },
        |mut acc, p| {
            acc.0.merge(&p.0);
            acc.1.merge(&p.1);
            acc
        },
        (KahanSum::new(), KahanSum::new()),
    );
    let mean = s1.value() / m as f64;
    let var = (s2.value() / m as f64 - mean * mean).max(0.0);
    (mean, (var / m as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Average of (1/n)·Σ log-rate of df on one frame family along sampled orbits.
pub fn lyapunov_exponent(
    f: &DaMap,
    frames: &FrameField,
    samples: &NuSamples,
    family: Family,
    n_orbit: usize,
) -> Result<ExponentEstimate> {
    if n_orbit == 0 || samples.is_empty() {
        return Err(Error::InvalidParameter(
            "n_orbit and sample count must be positive".into(),
        ));
    }
    let stepper = LatticeStepper::new(&f.spectral.automorphism, DEFAULT_MODULUS)?;
    let (s1, s2) = chunked_reduce(
        samples.len(),
        |r| {
            let mut a = KahanSum::new();
            let mut b = KahanSum::new();
            for i in r {
                let mut acc = 0.0;
                for_orbit(
                    f,
                    &stepper,
                    &samples.lattice[i],
                    samples.taus[i],
                    n_orbit,
                    |_, y| {
                        acc += frames.log_rate(f, family, y);
                    },
                );
                let v = acc / n_orbit as f64;
                a.add(v);
                b.add(v * v);
            }
            (a, b)
        },
        |mut acc, p| {
            acc.0.merge(&p.0);
            acc.1.merge(&p.1);
            acc
        },
        (KahanSum::new(), KahanSum::new()),
    );
    let m = samples.len() as f64;
    let mean = s1.value() / m;
    let var = (s2.value() / m - mean * mean).max(0.0);
    Ok(ExponentEstimate {
        value: mean,
        stderr: (var / m).sqrt(),
        samples: samples.len(),
    })
}

pub fn center_exponent(
    f: &DaMap,
    frames: &FrameField,
    samples: &NuSamples,
    n_orbit: usize,
) -> Result<ExponentEstimate> {
    lyapunov_exponent(f, frames, samples, Family::C, n_orbit)
}

/// log of the centre derivative of fⁿ at y. The centre direction is e₂ for
/// every map of the family, so the derivative is a product along the orbit.
pub fn log_center_growth(f: &DaMap, y: &Vec3, n: usize) -> f64 {
    let mut p = *y;
    let mut acc = 0.0;
    for _ in 0..n {
        acc += f.center_derivative(&p).abs().ln();
        p = f.eval(&p);
    }
    acc
}

/// (worst plaque integral of log‖dfⁿ|E^c‖, α₀ = −worst).
pub fn mostly_contracting_check(
    f: &DaMap,
    plaques: &[WeightedPlaqueMeasure],
    n: usize,
) -> Result<(f64, f64)> {
    if n == 0 || plaques.is_empty() {
        return Err(Error::InvalidParameter(
            "n >= 1 and at least one plaque required".into(),
        ));
    }
    let worst = plaques
        .par_iter()
        .map(|l| l.integrate(|y| log_center_growth(f, y, n)))
        .collect::<Vec<f64>>()
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((worst, -worst))
}

pub fn birkhoff_sum(f: &DaMap, phi: &ObservableSpec, y: &TorusPoint, n: usize) -> f64 {
    let mut p = y.coords;
    let mut acc = KahanSum::new();
    for _ in 0..n {
        acc.add(phi.eval(&p));
        p = f.eval(&p);
    }
    acc.value()
}

pub fn plaque_birkhoff_mean(
    f: &DaMap,
    l: &WeightedPlaqueMeasure,
    phi: &ObservableSpec,
    n: usize,
) -> f64 {
    let mut acc = KahanSum::new();
    for (m, node) in l.masses().iter().zip(&l.plaque.nodes) {
        acc.add(m * birkhoff_sum(f, phi, node, n));
    }
    acc.value()
}

/// True when (Aᵀ)ⁿk ≠ ±k for 1 ≤ n ≤ n_max. An orbit that leaves the i64
/// range counts as free.
pub fn character_orbit_free(a: &IntegerAutomorphism, k: [i64; 3], n_max: usize) -> bool {
    let mut v = k;
    for _ in 0..n_max {
        v = match a.checked_transpose_apply(&v) {
            Some(w) => w,
            None => return true,
        };
        if v == k || v == [-k[0], -k[1], -k[2]] {
            return false;
        }
    }
    true
}

#[derive(Clone)]
struct CorrAcc {
    x: Vec<KahanSum>,
    x2: Vec<KahanSum>,
    p: Vec<KahanSum>,
    p2: Vec<KahanSum>,
    xq: Vec<KahanSum>,
    xp: Vec<KahanSum>,
    q: KahanSum,
    q2: KahanSum,
}

impl CorrAcc {
    fn new(len: usize) -> Self {
        let z = vec![KahanSum::new(); len];
        CorrAcc {
            x: z.clone(),
            x2: z.clone(),
            p: z.clone(),
            p2: z.clone(),
            xq: z.clone(),
            xp: z,
            q: KahanSum::new(),
            q2: KahanSum::new(),
        }
    }

    fn merge(mut self, o: CorrAcc) -> Self {
        for (a, b) in [
            (&mut self.x, &o.x),
            (&mut self.x2, &o.x2),
            (&mut self.p, &o.p),
            (&mut self.p2, &o.p2),
            (&mut self.xq, &o.xq),
            (&mut self.xp, &o.xp),
        ] {
            for (s, t) in a.iter_mut().zip(b) {
                s.merge(t);
            }
        }
        self.q.merge(&o.q);
        self.q2.merge(&o.q2);
        self
    }
}

/// Ĉ_n = mean(φ(yₙ)ψ(y₀)) − mean(φ(yₙ))·mean(ψ(y₀)) for n = 1..n_max, with
/// delta-method standard errors.
pub fn correlation_series(
    u: &DisplacementField,
    samples: &NuSamples,
    phi: &ObservableSpec,
    psi: &ObservableSpec,
    n_max: usize,
) -> Result<EstimateSeries> {
    let f = &u.map;
    let stepper = LatticeStepper::new(&f.spectral.automorphism, DEFAULT_MODULUS)?;
    let len = n_max + 1;
    let m = samples.len();
    if m < 2 {
        return Err(Error::InvalidParameter("need at least two samples".into()));
    }
    let acc = chunked_reduce(
        m,
        |r| {
            let mut a = CorrAcc::new(len);
            for i in r {
                let mut q = 0.0;
                for_orbit(
                    f,
                    &stepper,
                    &samples.lattice[i],
                    samples.taus[i],
                    len,
                    |k, y| {
                        if k == 0 {
                            q = psi.eval(y);
                            a.q.add(q);
                            a.q2.add(q * q);
                        }
                        let p = phi.eval(y);
                        let x = p * q;
                        a.x[k].add(x);
                        a.x2[k].add(x * x);
                        a.p[k].add(p);
                        a.p2[k].add(p * p);
                        a.xq[k].add(x * q);
                        a.xp[k].add(x * p);
                    },
                );
            }
            a
        },
        CorrAcc::merge,
        CorrAcc::new(len),
    );
    let mf = m as f64;
    let eq = acc.q.value() / mf;
    let vq = acc.q2.value() / mf - eq * eq;
    let mut n_values = Vec::with_capacity(n_max);
    let mut estimates = Vec::with_capacity(n_max);
    let mut stderrs = Vec::with_capacity(n_max);
    for n in 1..len {
        let ex = acc.x[n].value() / mf;
        let ep = acc.p[n].value() / mf;
        let vx = acc.x2[n].value() / mf - ex * ex;
        let vp = acc.p2[n].value() / mf - ep * ep;
        let cxq = acc.xq[n].value() / mf - ex * eq;
        let cxp = acc.xp[n].value() / mf - ex * ep;
        let cpq = ex - ep * eq;
        // influence function x − E[φ]·q − E[ψ]·p
        let var = vx + ep * ep * vq + eq * eq * vp - 2.0 * ep * cxq - 2.0 * eq * cxp
            + 2.0 * ep * eq * cpq;
        n_values.push(n);
        estimates.push(ex - ep * eq);
        stderrs.push((var.max(0.0) / mf).sqrt());
    }
    Ok(EstimateSeries {
        n_values,
        estimates,
        stderrs,
        sample_count: m,
        seed: samples.seed,
    })
}

/// Fraction of samples with |S_n(φ)| > ε·n for each n in `n_list`.
pub fn deviation_tail(
    u: &DisplacementField,
    samples: &NuSamples,
    phi: &ObservableSpec,
    eps: f64,
    n_list: &[usize],
) -> Result<EstimateSeries> {
    let f = &u.map;
    let stepper = LatticeStepper::new(&f.spectral.automorphism, DEFAULT_MODULUS)?;
    let n_top = n_list.iter().cloned().max().unwrap_or(0);
    let m = samples.len();
    if m == 0 {
        return Err(Error::InvalidParameter("no samples".into()));
    }
    let counts = chunked_reduce(
        m,
        |r| {
            let mut c = vec![0usize; n_list.len()];
            for i in r {
                let mut s = KahanSum::new();
                let mut sums = vec![0.0; n_top + 1];
                for_orbit(
                    f,
                    &stepper,
                    &samples.lattice[i],
                    samples.taus[i],
                    n_top,
                    |k, y| {
                        s.add(phi.eval(y));
                        sums[k + 1] = s.value();
                    },
                );
                for (j, &n) in n_list.iter().enumerate() {
                    if n > 0 && sums[n].abs() > eps * n as f64 {
                        c[j] += 1;
                    }
                }
            }
            c
        },
        |mut a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
            a
        },
        vec![0usize; n_list.len()],
    );
    let mf = m as f64;
    let estimates: Vec<f64> = counts.iter().map(|&c| c as f64 / mf).collect();
    let stderrs = estimates
        .iter()
        .map(|p| (p * (1.0 - p) / mf).sqrt())
        .collect();
    Ok(EstimateSeries {
        n_values: n_list.to_vec(),
        estimates,
        stderrs,
        sample_count: m,
        seed: samples.seed,
    })
}

/// Children of `ap` after n levels along the path through root parameter
/// `t`, with the root-parameter interval of the final piece.
pub fn tree_path(part: &Partition, ap: &APlaque, t: f64, n: usize) -> Result<(APlaque, f64, f64)> {
    let mut cur = *ap;
    let (mut lo, mut hi) = (0.0, ap.height);
    let mut pos = t;
    for _ in 0..n {
        let kids = part.children(&cur)?;
        let kid = kids
            .iter()
            .find(|k| pos >= k.parent_lo.min(k.parent_hi) && pos <= k.parent_lo.max(k.parent_hi))
            .copied()
            .unwrap_or(kids[kids.len() - 1]);
        // affine maps from child parameter to root parameter
        let a = lo + (hi - lo) * kid.parent_lo / cur.height;
        let b = lo + (hi - lo) * kid.parent_hi / cur.height;
        pos = (pos - kid.parent_lo) / (kid.parent_hi - kid.parent_lo) * kid.plaque.height;
        lo = a;
        hi = b;
        cur = kid.plaque;
    }
    Ok((cur, lo.min(hi), lo.max(hi)))
}

/// max − min of S_n(φ) over the n-step piece of `ap` containing its
/// midpoint, sampled at `nodes` points of the piece's image and evaluated
/// backwards.
pub fn oscillation_check(
    u: &DisplacementField,
    part: &Partition,
    ap: &APlaque,
    phi: &ObservableSpec,
    n: usize,
    nodes: usize,
) -> Result<f64> {
    let f = &u.map;
    let (leaf, _, _) = tree_path(part, ap, 0.5 * ap.height, n)?;
    let params: Vec<f64> = (0..nodes.max(2))
        .map(|i| leaf.height * i as f64 / (nodes.max(2) - 1) as f64)
        .collect();
    let top = build_plaque(u, part, &leaf, &params)?;
    let sums: Vec<f64> = top
        .nodes
        .iter()
        .map(|w| {
            let mut p = w.coords;
            let mut acc = KahanSum::new();
            for _ in 0..n {
                p = f.inverse(&p);
                acc.add(phi.eval(&p));
            }
            acc.value()
        })
        .collect();
    let max = sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = sums.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

/// Euclidean diameter of the n-step piece used by [`oscillation_check`], at its base.
pub fn piece_diameter(
    u: &DisplacementField,
    part: &Partition,
    ap: &APlaque,
    n: usize,
    nodes: usize,
) -> Result<f64> {
    let (_, lo, hi) = tree_path(part, ap, 0.5 * ap.height, n)?;
    let params: Vec<f64> = (0..nodes.max(2))
        .map(|i| lo + (hi - lo) * i as f64 / (nodes.max(2) - 1) as f64)
        .collect();
    let p = build_plaque(u, part, ap, &params)?;
    let mut d = 0.0f64;
    for a in &p.nodes {
        for b in &p.nodes {
            d = d.max(norm(&min_image(&sub(&a.coords, &b.coords))));
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentBound {
    pub n: usize,
    pub leaves: usize,
    /// Σ_j c_j exp(s·max S_n(φ)) over tree leaves.
    pub lhs: f64,
    /// Largest one-step value Σ_i c_i exp(s·max φ) over the internal tree nodes.
    pub theta_hat: f64,
    /// One-step value at the root alone.
    pub theta_root: f64,
    /// Σ_j c_j max ‖dfⁿ|E^c‖ over tree leaves.
    pub lhs_center: f64,
    pub theta_hat_center: f64,
    pub theta_root_center: f64,
}

impl MomentBound {
    pub fn theta_pow(&self) -> f64 {
        self.theta_hat.powi(self.n as i32)
    }
}

pub const MAX_TREE_LEAVES: usize = 200_000;

struct TreeNode {
    depth: usize,
    weight: f64,
    children: Vec<usize>,
    samples: std::ops::Range<usize>,
}

/// Exhaustive n-level plaque tree over `ap` with `per_leaf` sample points
/// per leaf, giving both forms of the moment bound.
#[allow(clippy::too_many_arguments)]
pub fn moment_bound_check(
    u: &DisplacementField,
    part: &Partition,
    ap: &APlaque,
    phi: &ObservableSpec,
    s_mom: f64,
    n: usize,
    per_leaf: usize,
    max_leaves: usize,
) -> Result<MomentBound> {
    if n == 0 || per_leaf < 2 {
        return Err(Error::InvalidParameter(
            "n >= 1 and per_leaf >= 2 required".into(),
        ));
    }
    let f = &u.map;
    // breadth-first expansion; each entry carries its root-parameter interval
    let mut nodes: Vec<TreeNode> = vec![TreeNode {
        depth: 0,
        weight: 1.0,
        children: Vec::new(),
        samples: 0..0,
    }];
    let mut info: Vec<(APlaque, f64, f64)> = vec![(*ap, 0.0, ap.height)];
    let mut frontier = vec![0usize];
    for depth in 0..n {
        let mut next = Vec::new();
        for &id in &frontier {
            let (cur, lo, hi) = info[id];
            for kid in part.children(&cur)? {
                let a = lo + (hi - lo) * kid.parent_lo / cur.height;
                let b = lo + (hi - lo) * kid.parent_hi / cur.height;
                let cid = nodes.len();
                nodes.push(TreeNode {
                    depth: depth + 1,
                    weight: (b - a).abs() / ap.height,
                    children: Vec::new(),
                    samples: 0..0,
                });
                info.push((kid.plaque, a, b));
                nodes[id].children.push(cid);
                next.push(cid);
            }
            if next.len() > max_leaves {
                return Err(Error::TreeTooLarge { limit: max_leaves });
            }
        }
        frontier = next;
    }
    let leaves = frontier;
    let mut params = Vec::with_capacity(leaves.len() * per_leaf);
    for &id in &leaves {
        let (_, a, b) = info[id];
        let start = params.len();
        for k in 0..per_leaf {
            params.push(a + (b - a) * k as f64 / (per_leaf - 1) as f64);
        }
        nodes[id].samples = start..params.len();
    }
    // per sample: φ and log centre derivative at each step 0..n
    let traces: Vec<(Vec<f64>, Vec<f64>)> = params
        .par_iter()
        .map(|&t| -> Result<(Vec<f64>, Vec<f64>)> {
            let z = part.point(ap, t);
            let tau = u.center_offset(
                &z,
                crate::plaques::PLAQUE_TOL,
                crate::semiconjugacy::FLOAT_DEPTH_CAP,
            )?;
            let mut y = u.on_center(&z, tau);
            let mut ph = Vec::with_capacity(n);
            let mut dc = Vec::with_capacity(n);
            for _ in 0..n {
                ph.push(phi.eval(&y));
                dc.push(f.center_derivative(&y).abs().ln());
                y = f.eval(&y);
            }
            Ok((ph, dc))
        })
        .collect::<Result<Vec<_>>>()?;
    // sample ranges of internal nodes are unions over their subtrees
    for id in (0..nodes.len()).rev() {
        if !nodes[id].children.is_empty() {
            let first = nodes[id].children[0];
            let last = *nodes[id].children.last().unwrap();
            let lo = nodes[first].samples.start.min(nodes[last].samples.start);
            let hi = nodes[first].samples.end.max(nodes[last].samples.end);
            nodes[id].samples = lo..hi;
        }
    }
    let max_over = |r: &std::ops::Range<usize>, g: &dyn Fn(usize) -> f64| {
        r.clone().map(g).fold(f64::NEG_INFINITY, f64::max)
    };
    let mut lhs = KahanSum::new();
    let mut lhs_c = KahanSum::new();
    for &id in &leaves {
        let r = &nodes[id].samples;
        let sn = max_over(r, &|j| traces[j].0.iter().sum::<f64>());
        let cn = max_over(r, &|j| traces[j].1.iter().sum::<f64>());
        lhs.add(nodes[id].weight * (s_mom * sn).exp());
        lhs_c.add(nodes[id].weight * cn.exp());
    }
    let mut theta_hat = f64::NEG_INFINITY;
    let mut theta_hat_c = f64::NEG_INFINITY;
    let mut theta_root = 0.0;
    let mut theta_root_c = 0.0;
    for (id, node) in nodes.iter().enumerate() {
        if node.children.is_empty() {
            continue;
        }
        let d = node.depth;
        let mut a = 0.0;
        let mut c = 0.0;
        for &cid in &node.children {
            let w = nodes[cid].weight / node.weight;
            let r = &nodes[cid].samples;
            a += w * (s_mom * max_over(r, &|j| traces[j].0[d])).exp();
            c += w * max_over(r, &|j| traces[j].1[d]).exp();
        }
        theta_hat = theta_hat.max(a);
        theta_hat_c = theta_hat_c.max(c);
        if id == 0 {
            theta_root = a;
            theta_root_c = c;
        }
    }
    Ok(MomentBound {
        n,
        leaves: leaves.len(),
        lhs: lhs.value(),
        theta_hat,
        theta_root,
        lhs_center: lhs_c.value(),
        theta_hat_center: theta_hat_c,
        theta_root_center: theta_root_c,
    })
}

/// ∫ φ∘fⁿ dν^u over the plaque of `ap` for each n in `n_list`, with
/// `nodes` trapezoid nodes in the linear parameter. Equals ∫ φ d(Tⁿ l) for
/// the reference measure l.
pub fn pushed_functional(
    u: &DisplacementField,
    part: &Partition,
    ap: &APlaque,
    phi: &ObservableSpec,
    n_list: &[usize],
    nodes: usize,
) -> Result<Vec<f64>> {
    let f = &u.map;
    let nodes = nodes.max(2);
    let n_top = n_list.iter().cloned().max().unwrap_or(0);
    let vals: Vec<Vec<f64>> = (0..nodes)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let t = ap.height * i as f64 / (nodes - 1) as f64;
            let z = part.point(ap, t);
            let tau = u.center_offset(
                &z,
                crate::plaques::PLAQUE_TOL,
                crate::semiconjugacy::FLOAT_DEPTH_CAP,
            )?;
            let mut y = u.on_center(&z, tau);
            let mut out = Vec::with_capacity(n_top + 1);
            for k in 0..=n_top {
                out.push(phi.eval(&y));
                if k < n_top {
                    y = f.eval(&y);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let w = |i: usize| if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 } / (nodes - 1) as f64;
    Ok(n_list
        .iter()
        .map(|&n| {
            let mut acc = KahanSum::new();
            for (i, v) in vals.iter().enumerate() {
                acc.add(w(i) * v[n]);
            }
            acc.value()
        })
        .collect())
}

/// Deviation of h⁻¹ sample points from exact inversion: dist(h(y), x).
pub fn sample_inversion_error(u: &DisplacementField, samples: &NuSamples, i: usize) -> f64 {
    let y = samples.point(u, i);
    let x = samples.lattice[i].coords();
    let hy = crate::torus_linalg::wrap(&crate::torus_linalg::add(&y, &u.u_series(&y)));
    torus_dist(&hy, &x)
}
