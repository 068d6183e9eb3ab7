//! Coupling of two plaque rectangles Y = plaque × I.
//!
//! Both rectangles are refined level by level along the plaque tree. At each
//! level, pieces of Y₁ and Y₂ lying in the same box are matched when their
//! centre-stable distance at equal linear parameters is at most ε, closest
//! pairs first, and the smaller mass is coupled by cutting heights. Matched
//! pairs are audited for J further steps against β_j ≤ K e^{−λj}; violators
//! return to the free population at the level of violation.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::da_family::DaMap;
use crate::ergodic_stats::{fit_exponential, EstimateSeries, RateFit};
use crate::error::{Error, Result};
use crate::numerics::KahanSum;
use crate::plaques::{build_default, APlaque, Partition, Plaque};
use crate::semiconjugacy::{DisplacementField, FLOAT_DEPTH_CAP};
use crate::torus_linalg::{dot, min_image, norm, sub, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingParams {
    #[serde(rename = "K")]
    pub k: f64,
    pub lambda: f64,
    pub eps: f64,
    pub max_runs: usize,
    pub mass_floor: f64,
    /// Steps of the β audit after each match.
    pub audit_steps: usize,
    pub max_levels: usize,
    /// Largest number of free pieces per side.
    pub max_atoms: usize,
    /// Cap on matched pairs per level; `Some(1)` couples one pair per run.
    pub max_pairs_per_run: Option<usize>,
}

impl Default for CouplingParams {
    fn default() -> Self {
        CouplingParams {
            k: 2.0,
            lambda: 0.1,
            eps: 0.05,
            max_runs: 8,
            mass_floor: 1e-4,
            audit_steps: 20,
            max_levels: 40,
            max_atoms: 400_000,
            max_pairs_per_run: None,
        }
    }
}

impl CouplingParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.k > 0.0
            && self.lambda > 0.0
            && self.eps > 0.0
            && self.max_runs >= 1
            && self.mass_floor >= 0.0
            && self.max_levels >= 1
            && self.max_atoms >= 1
            && self.max_pairs_per_run != Some(0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "coupling parameters out of range: {:?}",
                self
            )))
        }
    }

    /// Contraction rate ρ₁ = e^{−λ/2} of matched distances, and the literal
    /// product K ε e^{−λ/2}.
    pub fn rho1(&self) -> (f64, f64) {
        let r = (-self.lambda / 2.0).exp();
        (r, self.k * self.eps * r)
    }

    /// Conditions that tie the parameters to measured constants; returns the
    /// names of those that fail.
    pub fn check_against(
        &self,
        center_exponent: f64,
        theta1: f64,
        s_mom: f64,
    ) -> Vec<&'static str> {
        let mut bad = Vec::new();
        if !(self.lambda < -center_exponent / 4.0) {
            bad.push("lambda < -lambda_c/4");
        }
        if !((-self.lambda * s_mom).exp() > theta1) {
            bad.push("exp(-lambda*s) > theta1");
        }
        bad
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaqueRectangle {
    pub aplaque: APlaque,
    pub plaque: Plaque,
    pub height: (f64, f64),
}

impl PlaqueRectangle {
    pub fn new(u: &DisplacementField, part: &Partition, ap: &APlaque) -> Result<Self> {
        Ok(PlaqueRectangle {
            aplaque: *ap,
            plaque: build_default(u, part, ap)?,
            height: (0.0, 1.0),
        })
    }

    pub fn total_mass(&self) -> f64 {
        self.height.1 - self.height.0
    }
}

/// A piece of one rectangle: root-parameter interval × height interval,
/// currently sitting over the A-plaque `ap` of its tree level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub ap: APlaque,
    pub level: usize,
    pub root_lo: f64,
    pub root_hi: f64,
    pub h_lo: f64,
    pub h_hi: f64,
}

impl Atom {
    fn mass(&self, root_height: f64) -> f64 {
        (self.root_hi - self.root_lo) / root_height * (self.h_hi - self.h_lo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledPair {
    pub atom1: Atom,
    pub atom2: Atom,
    pub mass: f64,
    /// Coupling time, the level of the surviving match.
    pub r: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingRecord {
    pub pairs: Vec<CoupledPair>,
    /// Y₁ mass not coupled after the matching at level n.
    pub pn_masses: Vec<f64>,
    pub coupled_mass: f64,
    pub uncoupled_mass: f64,
    /// Mass returned to the free population by the β audit.
    pub audit_stopped_mass: f64,
    pub runs: usize,
    pub levels: usize,
    /// Largest |input − coupled − passed on| over runs.
    pub conservation_error: f64,
    pub budget_exhausted: bool,
    pub min_child_weight: f64,
    pub root_heights: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstRunResult {
    pub n0: usize,
    pub matched: (Plaque, Plaque),
    pub matched_atoms: (Atom, Atom),
    pub c_hat: (f64, f64),
    pub t_bar: (f64, f64),
    pub stopped_mass_n0: f64,
    pub coupled_mass: f64,
    /// Smallest child weight met while refining both trees.
    pub a1_hat: f64,
    pub distance: f64,
}

impl FirstRunResult {
    /// a₀·a₁^{n₀}·t₀ with t₀ = min t̄.
    pub fn mass_bound(&self, a0: f64) -> f64 {
        a0 * self.a1_hat.powi(self.n0 as i32) * self.t_bar.0.min(self.t_bar.1)
    }
}

/// Number of linear parameters where distances are sampled.
pub const HEIGHT_SAMPLES: usize = 9;
const PIECE_TOL: f64 = 1e-10;
/// Pieces lighter than this are not refined further and count as uncoupled.
const MIN_PIECE_MASS: f64 = 1e-13;

#[derive(Debug, Clone)]
struct Piece {
    atom: Atom,
    taus: Option<[f64; HEIGHT_SAMPLES]>,
}

fn height_params(h: f64) -> [f64; HEIGHT_SAMPLES] {
    let mut out = [0.0; HEIGHT_SAMPLES];
    for (k, o) in out.iter_mut().enumerate() {
        *o = h * k as f64 / (HEIGHT_SAMPLES - 1) as f64;
    }
    out
}

fn piece_taus(
    u: &DisplacementField,
    part: &Partition,
    ap: &APlaque,
) -> Result<[f64; HEIGHT_SAMPLES]> {
    let mut out = [0.0; HEIGHT_SAMPLES];
    for (k, t) in height_params(ap.height).iter().enumerate() {
        out[k] = u.center_offset(&part.point(ap, *t), PIECE_TOL, FLOAT_DEPTH_CAP)?;
    }
    Ok(out)
}

/// f-nodes of a piece at the sampled parameters.
fn piece_nodes(
    u: &DisplacementField,
    part: &Partition,
    ap: &APlaque,
    taus: &[f64; HEIGHT_SAMPLES],
) -> Vec<Vec3> {
    height_params(ap.height)
        .iter()
        .zip(taus)
        .map(|(t, tau)| u.on_center(&part.point(ap, *t), *tau))
        .collect()
}

/// Largest centre-stable distance at equal parameters of two same-box pieces.
fn cs_distance(
    part: &Partition,
    a: &APlaque,
    ta: &[f64; HEIGHT_SAMPLES],
    b: &APlaque,
    tb: &[f64; HEIGHT_SAMPLES],
) -> f64 {
    let s = &part.spectral;
    let mut d = 0.0f64;
    for k in 0..HEIGHT_SAMPLES {
        let w = s.from_eigen(&[
            b.sigma[0] - a.sigma[0],
            b.sigma[1] - a.sigma[1] + tb[k] - ta[k],
            0.0,
        ]);
        d = d.max(norm(&w));
    }
    d
}

/// β_j = max over nodes of ‖dfʲ|E^c‖ for j = 1..=steps.
pub fn beta_profile(f: &DaMap, nodes: &[Vec3], steps: usize) -> Vec<f64> {
    let mut beta = vec![0.0f64; steps];
    for y in nodes {
        let mut p = *y;
        let mut acc = 0.0;
        for b in beta.iter_mut() {
            acc += f.center_derivative(&p).abs().ln();
            *b = b.max(acc.exp());
            p = f.eval(&p);
        }
    }
    beta
}

/// First j with β_j > K e^{−λj}, if any.
pub fn stopping_step(beta: &[f64], params: &CouplingParams) -> Option<usize> {
    beta.iter()
        .enumerate()
        .find(|(i, b)| **b > params.k * (-params.lambda * (*i as f64 + 1.0)).exp())
        .map(|(i, _)| i + 1)
}

fn expand(part: &Partition, p: &Piece, min_w: &mut f64) -> Result<Vec<Piece>> {
    let a = &p.atom;
    let kids = part.children(&a.ap)?;
    let mut out = Vec::with_capacity(kids.len());
    for kid in kids {
        let w = (kid.parent_hi - kid.parent_lo).abs() / a.ap.height;
        *min_w = min_w.min(w);
        let x = a.root_lo + (a.root_hi - a.root_lo) * kid.parent_lo / a.ap.height;
        let y = a.root_lo + (a.root_hi - a.root_lo) * kid.parent_hi / a.ap.height;
        out.push(Piece {
            atom: Atom {
                ap: kid.plaque,
                level: a.level + 1,
                root_lo: x.min(y),
                root_hi: x.max(y),
                h_lo: a.h_lo,
                h_hi: a.h_hi,
            },
            taus: None,
        });
    }
    Ok(out)
}

struct Candidate {
    d: f64,
    i: usize,
    j: usize,
}

/// All same-box pairs within ε, closest first.
fn candidates(
    u: &DisplacementField,
    part: &Partition,
    sides: &mut [Vec<Piece>; 2],
    eps: f64,
) -> Result<Vec<Candidate>> {
    for side in sides.iter_mut() {
        let fresh: Vec<usize> = (0..side.len())
            .filter(|&i| side[i].taus.is_none())
            .collect();
        let taus: Vec<[f64; HEIGHT_SAMPLES]> = fresh
            .par_iter()
            .map(|&i| piece_taus(u, part, &side[i].atom.ap))
            .collect::<Result<Vec<_>>>()?;
        for (i, t) in fresh.into_iter().zip(taus) {
            side[i].taus = Some(t);
        }
    }
    let s = &part.spectral;
    // |a e₁ + b e₂| ≥ lam·|(a, b)|
    let lam = (1.0 - dot(&s.frame[0], &s.frame[1]).abs()).sqrt();
    let cell = eps / lam;
    let key = |p: &Piece| {
        let mid = p.taus.unwrap()[HEIGHT_SAMPLES / 2];
        (
            (p.atom.ap.sigma[0] / cell).floor() as i64,
            ((p.atom.ap.sigma[1] + mid) / cell).floor() as i64,
        )
    };
    let mut grid: HashMap<([i64; 3], i64, i64), Vec<usize>> = HashMap::new();
    for (j, p) in sides[1].iter().enumerate() {
        let (a, b) = key(p);
        grid.entry((p.atom.ap.ret, a, b)).or_default().push(j);
    }
    let mut out = Vec::new();
    for (i, p) in sides[0].iter().enumerate() {
        let (a, b) = key(p);
        for da in -1..=1 {
            for db in -1..=1 {
                if let Some(js) = grid.get(&(p.atom.ap.ret, a + da, b + db)) {
                    for &j in js {
                        let q = &sides[1][j];
                        let d = cs_distance(
                            part,
                            &p.atom.ap,
                            &p.taus.unwrap(),
                            &q.atom.ap,
                            &q.taus.unwrap(),
                        );
                        if d <= eps {
                            out.push(Candidate { d, i, j });
                        }
                    }
                }
            }
        }
    }
    out.sort_by(|x, y| x.d.total_cmp(&y.d).then(x.i.cmp(&y.i)).then(x.j.cmp(&y.j)));
    Ok(out)
}

fn side_mass(pieces: &[Piece], root_height: f64) -> f64 {
    let mut acc = KahanSum::new();
    for p in pieces {
        acc.add(p.atom.mass(root_height));
    }
    acc.value()
}

fn initial_piece(y: &PlaqueRectangle) -> Piece {
    Piece {
        atom: Atom {
            ap: y.aplaque,
            level: 0,
            root_lo: 0.0,
            root_hi: y.aplaque.height,
            h_lo: y.height.0,
            h_hi: y.height.1,
        },
        taus: None,
    }
}

/// Cut mass m off the bottom of the height interval of `p`.
fn chop(p: &mut Piece, m: f64, root_height: f64) -> Atom {
    let a = p.atom;
    let width = (a.root_hi - a.root_lo) / root_height;
    let dh = (m / width).min(a.h_hi - a.h_lo);
    let cut = Atom {
        h_hi: a.h_lo + dh,
        ..a
    };
    p.atom.h_lo = cut.h_hi;
    cut
}

/// First run: refine both rectangles until a same-box pair within ε appears.
pub fn first_run(
    y1: &PlaqueRectangle,
    y2: &PlaqueRectangle,
    params: &CouplingParams,
    u: &DisplacementField,
    part: &Partition,
) -> Result<FirstRunResult> {
    params.validate()?;
    let hr = (y1.aplaque.height, y2.aplaque.height);
    let mut sides = [vec![initial_piece(y1)], vec![initial_piece(y2)]];
    let mut min_w = 1.0f64;
    for level in 0..=params.max_levels {
        let cands = candidates(u, part, &mut sides, params.eps)?;
        if let Some(best) = cands.first() {
            let a = sides[0][best.i].atom;
            let b = sides[1][best.j].atom;
            let c1 = (a.root_hi - a.root_lo) / hr.0;
            let c2 = (b.root_hi - b.root_lo) / hr.1;
            let t_bar = if c2 <= c1 {
                (c2 / c1, 1.0)
            } else {
                (1.0, c1 / c2)
            };
            let coupled = c1 * t_bar.0 * y1.total_mass();
            let matched = (
                build_default(u, part, &a.ap)?,
                build_default(u, part, &b.ap)?,
            );
            return Ok(FirstRunResult {
                n0: level,
                matched,
                matched_atoms: (a, b),
                c_hat: (c1, c2),
                t_bar,
                stopped_mass_n0: y1.total_mass() - coupled,
                coupled_mass: coupled,
                a1_hat: min_w,
                distance: best.d,
            });
        }
        if level == params.max_levels {
            break;
        }
        let mut next = [Vec::new(), Vec::new()];
        for s in 0..2 {
            for p in &sides[s] {
                next[s].extend(expand(part, p, &mut min_w)?);
            }
            if next[s].len() > params.max_atoms {
                return Err(Error::NoEpsApproachWithinBudget { levels: level + 1 });
            }
        }
        sides = next;
    }
    Err(Error::NoEpsApproachWithinBudget {
        levels: params.max_levels,
    })
}

pub fn run_coupling(
    y1: &PlaqueRectangle,
    y2: &PlaqueRectangle,
    params: &CouplingParams,
    u: &DisplacementField,
    part: &Partition,
) -> Result<CouplingRecord> {
    params.validate()?;
    let f = &u.map;
    let hr = [y1.aplaque.height, y2.aplaque.height];
    let mut sides = [vec![initial_piece(y1)], vec![initial_piece(y2)]];
    // pieces returned by the audit, keyed by the level where they rejoin
    let mut pending: BTreeMap<usize, [Vec<Piece>; 2]> = BTreeMap::new();
    let mut pairs = Vec::new();
    let mut pn_masses = Vec::new();
    let mut runs = 0;
    let mut min_w = 1.0f64;
    let mut dropped = 0.0;
    let mut audit_stopped = 0.0;
    let mut conservation_error = 0.0f64;
    let mut budget_exhausted = false;
    let mut level = 0;
    loop {
        if let Some(back) = pending.remove(&level) {
            let [a, b] = back;
            sides[0].extend(a);
            sides[1].extend(b);
        }
        let before = side_mass(&sides[0], hr[0]);
        let cands = candidates(u, part, &mut sides, params.eps)?;
        let mut matched_here = KahanSum::new();
        let mut count = 0usize;
        let mut new_pairs: Vec<(
            Atom,
            Atom,
            f64,
            f64,
            [f64; HEIGHT_SAMPLES],
            [f64; HEIGHT_SAMPLES],
        )> = Vec::new();
        for c in &cands {
            if params.max_pairs_per_run.map_or(false, |m| count >= m) {
                break;
            }
            let m1 = sides[0][c.i].atom.mass(hr[0]);
            let m2 = sides[1][c.j].atom.mass(hr[1]);
            let m = m1.min(m2);
            if !(m > 0.0) {
                continue;
            }
            let a = chop(&mut sides[0][c.i], m, hr[0]);
            let b = chop(&mut sides[1][c.j], m, hr[1]);
            new_pairs.push((
                a,
                b,
                m,
                c.d,
                sides[0][c.i].taus.unwrap(),
                sides[1][c.j].taus.unwrap(),
            ));
            matched_here.add(m);
            count += 1;
        }
        if count > 0 {
            runs += 1;
        }
        // β audit of the new pairs
        let audits: Vec<Option<usize>> = new_pairs
            .par_iter()
            .map(|(a, b, _, _, ta, tb)| {
                let mut nodes = piece_nodes(u, part, &a.ap, ta);
                nodes.extend(piece_nodes(u, part, &b.ap, tb));
                stopping_step(&beta_profile(f, &nodes, params.audit_steps), params)
            })
            .collect();
        for ((a, b, m, d, _, _), stop) in new_pairs.into_iter().zip(audits) {
            match stop {
                None => pairs.push(CoupledPair {
                    atom1: a,
                    atom2: b,
                    mass: m,
                    r: level,
                    distance: d,
                }),
                Some(j) => {
                    audit_stopped += m;
                    let entry = pending
                        .entry(level + j)
                        .or_insert_with(|| [Vec::new(), Vec::new()]);
                    let mut pa = vec![Piece {
                        atom: a,
                        taus: None,
                    }];
                    let mut pb = vec![Piece {
                        atom: b,
                        taus: None,
                    }];
                    for _ in 0..j {
                        pa = pa
                            .iter()
                            .map(|p| expand(part, p, &mut min_w))
                            .collect::<Result<Vec<_>>>()?
                            .concat();
                        pb = pb
                            .iter()
                            .map(|p| expand(part, p, &mut min_w))
                            .collect::<Result<Vec<_>>>()?
                            .concat();
                    }
                    entry[0].extend(pa);
                    entry[1].extend(pb);
                }
            }
        }
        for s in 0..2 {
            sides[s].retain(|p| p.atom.h_hi - p.atom.h_lo > 0.0);
        }
        let after = side_mass(&sides[0], hr[0]);
        conservation_error = conservation_error.max((before - matched_here.value() - after).abs());
        let pend: f64 = pending.values().map(|v| side_mass(&v[0], hr[0])).sum();
        pn_masses.push(after + pend + dropped);
        let stop = runs >= params.max_runs
            || after + pend < params.mass_floor
            || level >= params.max_levels;
        if stop {
            break;
        }
        let mut next = [Vec::new(), Vec::new()];
        for s in 0..2 {
            for p in &sides[s] {
                for c in expand(part, p, &mut min_w)? {
                    let m = c.atom.mass(hr[s]);
                    if m < MIN_PIECE_MASS {
                        if s == 0 {
                            dropped += m;
                        }
                    } else {
                        next[s].push(c);
                    }
                }
            }
        }
        if next[0].len() > params.max_atoms || next[1].len() > params.max_atoms {
            budget_exhausted = true;
            break;
        }
        sides = next;
        level += 1;
    }
    let mut coupled = KahanSum::new();
    for p in &pairs {
        coupled.add(p.mass);
    }
    let pend: f64 = pending.values().map(|v| side_mass(&v[0], hr[0])).sum();
    Ok(CouplingRecord {
        pairs,
        pn_masses,
        coupled_mass: coupled.value(),
        uncoupled_mass: side_mass(&sides[0], hr[0]) + pend + dropped,
        audit_stopped_mass: audit_stopped,
        runs,
        levels: level,
        conservation_error,
        budget_exhausted,
        min_child_weight: min_w,
        root_heights: (hr[0], hr[1]),
    })
}

/// m₁(R > N) for N from the first coupling time to the last, as a series.
/// The entry at the last time is the uncoupled mass.
pub fn coupling_tail(rec: &CouplingRecord) -> EstimateSeries {
    let n0 = rec.pairs.iter().map(|p| p.r).min().unwrap_or(0);
    let n1 = rec.pairs.iter().map(|p| p.r).max().unwrap_or(0);
    let mut n_values = Vec::new();
    let mut estimates = Vec::new();
    for n in n0..=n1 {
        let above: f64 = rec.pairs.iter().filter(|p| p.r > n).map(|p| p.mass).sum();
        n_values.push(n);
        estimates.push(above + rec.uncoupled_mass);
    }
    let len = n_values.len();
    EstimateSeries {
        n_values,
        estimates,
        stderrs: vec![0.0; len],
        sample_count: rec.pairs.len(),
        seed: 0,
    }
}

/// Exponential fit of m₁(R > N). A record whose tail vanishes after one
/// step is reported as degenerate with rate −∞.
pub fn tail_statistics(rec: &CouplingRecord) -> Result<RateFit> {
    let total = rec.coupled_mass + rec.uncoupled_mass;
    if !(rec.coupled_mass > 0.5 * total) {
        return Err(Error::InsufficientSignal {
            usable: 0,
            needed: 1,
        });
    }
    let series = coupling_tail(rec);
    let positive = series.estimates.iter().filter(|e| **e > 0.0).count();
    if positive <= 1 && rec.uncoupled_mass == 0.0 {
        let n0 = series.n_values.first().copied().unwrap_or(0);
        return Ok(RateFit {
            log_intercept: series
                .estimates
                .first()
                .map_or(f64::NEG_INFINITY, |e| e.ln()),
            rate: f64::NEG_INFINITY,
            rate_stderr: 0.0,
            r_squared: 1.0,
            fit_range: (n0, n0),
            usable: positive,
            degenerate: true,
        });
    }
    fit_exponential(&series)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceAudit {
    /// max d(fʲy₁, fʲy₂)/ρ₁ʲ with ρ₁ = e^{−λ/2}.
    pub c1: f64,
    /// The same with the literal ρ₁ = Kεe^{−λ/2}.
    pub c1_literal: f64,
    /// Largest ratio d_j / (Kεe^{−λj/2}).
    pub radius_ratio: f64,
    pub pairs_checked: usize,
}

/// Distances of matched nodes for j = 0..=steps past the coupling time,
/// over at most `max_pairs` of the heaviest pairs.
pub fn matched_distance_check(
    rec: &CouplingRecord,
    u: &DisplacementField,
    part: &Partition,
    params: &CouplingParams,
    steps: usize,
    max_pairs: usize,
) -> Result<DistanceAudit> {
    let f = &u.map;
    let (rho, rho_lit) = params.rho1();
    let mut order: Vec<usize> = (0..rec.pairs.len()).collect();
    order.sort_by(|a, b| {
        rec.pairs[*b]
            .mass
            .total_cmp(&rec.pairs[*a].mass)
            .then(a.cmp(b))
    });
    order.truncate(max_pairs);
    let res: Vec<(f64, f64, f64)> = order
        .par_iter()
        .map(|&i| -> Result<(f64, f64, f64)> {
            let p = &rec.pairs[i];
            let ta = piece_taus(u, part, &p.atom1.ap)?;
            let tb = piece_taus(u, part, &p.atom2.ap)?;
            let na = piece_nodes(u, part, &p.atom1.ap, &ta);
            let nb = piece_nodes(u, part, &p.atom2.ap, &tb);
            let (mut c, mut cl, mut rr) = (0.0f64, 0.0f64, 0.0f64);
            for (x, y) in na.iter().zip(&nb) {
                let (mut x, mut y) = (*x, *y);
                for j in 0..=steps {
                    let d = norm(&min_image(&sub(&x, &y)));
                    c = c.max(d / rho.powi(j as i32));
                    cl = cl.max(d / rho_lit.powi(j as i32));
                    rr = rr.max(d / (params.k * params.eps * rho.powi(j as i32)));
                    x = f.eval(&x);
                    y = f.eval(&y);
                }
            }
            Ok((c, cl, rr))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = DistanceAudit {
        c1: 0.0,
        c1_literal: 0.0,
        radius_ratio: 0.0,
        pairs_checked: res.len(),
    };
    for (c, cl, rr) in res {
        out.c1 = out.c1.max(c);
        out.c1_literal = out.c1_literal.max(cl);
        out.radius_ratio = out.radius_ratio.max(rr);
    }
    Ok(out)
}

/// (q̂₁, â₀): the mass of plaque points with some n ≤ n_max where
/// ‖dfⁿ|E^c‖ ≥ K e^{−λn} on their n-step piece, and its complement.
pub fn hyperbolic_block_mass(
    u: &DisplacementField,
    part: &Partition,
    ap: &APlaque,
    params: &CouplingParams,
    n_max: usize,
    per_leaf: usize,
    max_leaves: usize,
) -> Result<(f64, f64)> {
    let f = &u.map;
    let mut leaves = vec![(*ap, 0.0, ap.height)];
    for _ in 0..n_max {
        let mut next = Vec::new();
        for (cur, lo, hi) in &leaves {
            for kid in part.children(cur)? {
                let a = lo + (hi - lo) * kid.parent_lo / cur.height;
                let b = lo + (hi - lo) * kid.parent_hi / cur.height;
                next.push((kid.plaque, a.min(b), a.max(b)));
            }
        }
        if next.len() > max_leaves {
            return Err(Error::TreeTooLarge { limit: max_leaves });
        }
        leaves = next;
    }
    let per_leaf = per_leaf.max(2);
    let flagged: Vec<f64> = leaves
        .par_iter()
        .map(|(_, lo, hi)| -> Result<f64> {
            for k in 0..per_leaf {
                let t = lo + (hi - lo) * k as f64 / (per_leaf - 1) as f64;
                let z = part.point(ap, t);
                let mut y = u.on_center(&z, u.center_offset(&z, PIECE_TOL, FLOAT_DEPTH_CAP)?);
                let mut acc = 0.0;
                for n in 1..=n_max {
                    acc += f.center_derivative(&y).abs().ln();
                    if acc >= params.k.ln() - params.lambda * n as f64 {
                        return Ok((hi - lo) / ap.height);
                    }
                    y = f.eval(&y);
                }
            }
            Ok(0.0)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut q = KahanSum::new();
    for v in flagged {
        q.add(v);
    }
    let q = q.value();
    Ok((q, 1.0 - q))
}
