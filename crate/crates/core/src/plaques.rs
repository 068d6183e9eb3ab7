//! Unstable plaques over a tower section of the linear unstable foliation,
//! their reference measures, transfer splits and centre-stable holonomy.
//!
//! The section Σ is the square `[−r, r)²` in the (e₁, e₂) coordinates of the
//! plane c = 0. Every linear unstable segment from a point of Σ to its first
//! return is an A-plaque. Since A maps the section into itself, the image of
//! an A-plaque is an exact concatenation of A-plaques; the boxes are the sets
//! of section points sharing a return vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::da_family::DaMap;
use crate::error::{Error, Result};
use crate::semiconjugacy::{DisplacementField, FLOAT_DEPTH_CAP};
use crate::torus_linalg::{
    add, dot, eigen_coords, min_image, norm, sub, wrap, SpectralData, TorusPoint, Vec3,
};

/// Default spacing of plaque nodes in the linear parameter.
pub const DEFAULT_SPACING: f64 = 0.01;
/// Bracket width for the centre offsets of plaque nodes.
pub const PLAQUE_TOL: f64 = 1e-11;
/// Parameter distance below which a point counts as lying on a plaque face.
const FACE_TOL: f64 = 1e-12;
/// Largest return time searched.
const MAX_RETURN: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct APlaque {
    /// Section coordinates of the bottom point.
    pub sigma: [f64; 2],
    /// Integer return vector, the box identifier.
    pub ret: [i64; 3],
    pub height: f64,
}

/// A child of an A-plaque image. Child parameter 0 and `height` correspond
/// to parent parameters `parent_lo` and `parent_hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AChild {
    pub plaque: APlaque,
    pub parent_lo: f64,
    pub parent_hi: f64,
}

impl AChild {
    pub fn parent_param(&self, t: f64) -> f64 {
        self.parent_lo + (self.parent_hi - self.parent_lo) * t / self.plaque.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Hit {
    n: [i64; 3],
    l: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxInfo {
    pub ret: [i64; 3],
    pub height: f64,
    pub area_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Partition {
    pub spectral: SpectralData,
    pub boxes_per_axis: usize,
    /// Half side r of the section square.
    pub half_width: f64,
    pub boxes: Vec<BoxInfo>,
    /// Mass fraction of sampled plaque images that fail to tile into plaques.
    pub markov_defect: f64,
    /// Mean mass fraction on which two same-box plaques have different child patterns.
    pub cs_pattern_defect: f64,
    max_height: f64,
    hits: Vec<Hit>,
}

/// Tower partition with section area covol·k/2, k = `boxes_per_axis`.
pub fn linear_partition(s: &SpectralData, boxes_per_axis: usize) -> Result<Partition> {
    if boxes_per_axis == 0 {
        return Err(Error::InvalidParameter(
            "boxes_per_axis must be >= 1".into(),
        ));
    }
    let e = s.frame_matrix();
    let covol = crate::torus_linalg::det3(&e).abs().recip();
    let r = (covol * boxes_per_axis as f64 / 8.0).sqrt();
    let bound = [2.0 * r, 2.0 * r, MAX_RETURN];
    let reach: Vec<i64> = (0..3)
        .map(|i| (0..3).map(|j| e[i][j].abs() * bound[j]).sum::<f64>().ceil() as i64)
        .collect();
    let mut hits = Vec::new();
    for a in -reach[0]..=reach[0] {
        for b in -reach[1]..=reach[1] {
            for c in -reach[2]..=reach[2] {
                let n = [a, b, c];
                let l = eigen_coords(s, &[a as f64, b as f64, c as f64]);
                if l[0].abs() < 2.0 * r && l[1].abs() < 2.0 * r && l[2] > 0.0 && l[2] <= MAX_RETURN
                {
                    hits.push(Hit { n, l });
                }
            }
        }
    }
    hits.sort_by(|x, y| x.l[2].total_cmp(&y.l[2]));
    let mut part = Partition {
        spectral: *s,
        boxes_per_axis,
        half_width: r,
        boxes: Vec::new(),
        markov_defect: 0.0,
        cs_pattern_defect: 0.0,
        max_height: MAX_RETURN,
        hits,
    };
    part.survey(96)?;
    Ok(part)
}

impl Partition {
    pub fn in_section(&self, p: &[f64; 2]) -> bool {
        let r = self.half_width;
        p[0] >= -r && p[0] < r && p[1] >= -r && p[1] < r
    }

    /// The A-plaque whose bottom point has section coordinates `sigma`.
    pub fn plaque_at(&self, sigma: [f64; 2]) -> Result<APlaque> {
        if !self.in_section(&sigma) {
            return Err(Error::InvalidParameter(format!(
                "{:?} is outside the section",
                sigma
            )));
        }
        for h in &self.hits {
            if self.in_section(&[sigma[0] - h.l[0], sigma[1] - h.l[1]]) {
                return Ok(APlaque {
                    sigma,
                    ret: h.n,
                    height: h.l[2],
                });
            }
        }
        Err(Error::InvalidParameter(format!(
            "no return within {MAX_RETURN} from {:?}",
            sigma
        )))
    }

    fn return_shift(&self, ret: &[i64; 3]) -> Vec3 {
        eigen_coords(
            &self.spectral,
            &[ret[0] as f64, ret[1] as f64, ret[2] as f64],
        )
    }

    /// Section coordinates of the top point of `ap`.
    pub fn next_sigma(&self, ap: &APlaque) -> [f64; 2] {
        let l = self.return_shift(&ap.ret);
        [ap.sigma[0] - l[0], ap.sigma[1] - l[1]]
    }

    /// Torus point at linear parameter `t` on `ap`.
    pub fn point(&self, ap: &APlaque, t: f64) -> Vec3 {
        wrap(&self.spectral.from_eigen(&[ap.sigma[0], ap.sigma[1], t]))
    }

    /// The A-plaque through z and the parameter of z on it. Faces belong to
    /// the plaque above (half-open section and parameter ranges).
    pub fn locate(&self, z: &Vec3) -> Result<(APlaque, f64)> {
        if let Some(found) = self.locate_within(z, self.max_height) {
            return Ok(found);
        }
        self.locate_within(z, MAX_RETURN)
            .ok_or_else(|| Error::InvalidParameter(format!("cannot place {:?} in the tower", z)))
    }

    fn locate_within(&self, z: &Vec3, hmax: f64) -> Option<(APlaque, f64)> {
        let s = &self.spectral;
        let e = s.frame_matrix();
        let zc = wrap(z);
        let ze = eigen_coords(s, &zc);
        let r = self.half_width;
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for i in 0..3 {
            let centre: f64 = (0..3).map(|j| e[i][j] * ze[j]).sum();
            let mut vmin = 0.0;
            let mut vmax = 0.0;
            for (j, (a, b)) in [(-r, r), (-r, r), (0.0, hmax)].into_iter().enumerate() {
                let p = e[i][j] * a;
                let q = e[i][j] * b;
                vmin += p.min(q);
                vmax += p.max(q);
            }
            lo[i] = (centre - vmax).floor() as i64;
            hi[i] = (centre - vmin).ceil() as i64;
        }
        let mut best: Option<([f64; 2], f64)> = None;
        for a in lo[0]..=hi[0] {
            for b in lo[1]..=hi[1] {
                for c in lo[2]..=hi[2] {
                    let l = eigen_coords(s, &[a as f64, b as f64, c as f64]);
                    let sig = [ze[0] - l[0], ze[1] - l[1]];
                    let t = ze[2] - l[2];
                    if t >= -FACE_TOL
                        && t <= hmax
                        && self.in_section(&sig)
                        && best.map_or(true, |bb| t < bb.1)
                    {
                        best = Some((sig, t));
                    }
                }
            }
        }
        let (sig, t) = best?;
        let ap = self.plaque_at(sig).ok()?;
        if t < ap.height - FACE_TOL {
            Some((ap, t.max(0.0)))
        } else if t < ap.height + FACE_TOL {
            self.plaque_at(self.next_sigma(&ap))
                .ok()
                .map(|next| (next, 0.0))
        } else {
            None
        }
    }

    /// Decomposition of A(ap) into A-plaques, ordered by increasing parameter.
    pub fn children(&self, ap: &APlaque) -> Result<Vec<AChild>> {
        let s = &self.spectral;
        let (mu1, mu2, mu3) = (s.mu[0], s.mu[1], s.mu[2]);
        let k3 = s.kappa[2];
        let img = s.automorphism.entries();
        let mut target = [0i64; 3];
        for i in 0..3 {
            target[i] = (0..3).map(|j| img[i][j] * ap.ret[j]).sum();
        }
        let (mut cur, forward) = if mu3 > 0.0 {
            ([mu1 * ap.sigma[0], mu2 * ap.sigma[1]], true)
        } else {
            let top = self.next_sigma(ap);
            target = [-target[0], -target[1], -target[2]];
            ([mu1 * top[0], mu2 * top[1]], false)
        };
        let len = k3 * ap.height;
        let mut off = 0.0;
        let mut sum = [0i64; 3];
        let mut out = Vec::new();
        let to_parent = |o: f64| if forward { o / k3 } else { ap.height - o / k3 };
        while sum != target {
            if off > len * (1.0 + 1e-9) + 1e-12 || out.len() > 10_000 {
                return Err(Error::ChildConstructionFailed(format!(
                    "image of {:?} overruns its length {len}",
                    ap.sigma
                )));
            }
            let c = self
                .plaque_at(cur)
                .map_err(|e| Error::ChildConstructionFailed(e.to_string()))?;
            out.push(AChild {
                plaque: c,
                parent_lo: to_parent(off),
                parent_hi: to_parent(off + c.height),
            });
            off += c.height;
            for i in 0..3 {
                sum[i] += c.ret[i];
            }
            cur = self.next_sigma(&c);
        }
        if (off - len).abs() > 1e-9 * len.max(1.0) {
            return Err(Error::ChildConstructionFailed(format!(
                "child lengths sum to {off}, expected {len}"
            )));
        }
        if let Some(last) = out.last_mut() {
            last.parent_hi = if forward { ap.height } else { 0.0 };
        }
        Ok(out)
    }

    pub fn random_aplaque<R: Rng>(&self, rng: &mut R) -> Result<APlaque> {
        let r = self.half_width;
        self.plaque_at([rng.gen_range(-r..r), rng.gen_range(-r..r)])
    }

    fn survey(&mut self, g: usize) -> Result<()> {
        let r = self.half_width;
        let mut samples = Vec::with_capacity(g * g);
        for i in 0..g {
            for j in 0..g {
                let sig = [
                    -r + 2.0 * r * (i as f64 + 0.5) / g as f64,
                    -r + 2.0 * r * (j as f64 + 0.5) / g as f64,
                ];
                samples.push(self.plaque_at(sig)?);
            }
        }
        let mut boxes: Vec<BoxInfo> = Vec::new();
        for ap in &samples {
            match boxes.iter_mut().find(|b| b.ret == ap.ret) {
                Some(b) => b.area_fraction += 1.0,
                None => boxes.push(BoxInfo {
                    ret: ap.ret,
                    height: ap.height,
                    area_fraction: 1.0,
                }),
            }
        }
        for b in &mut boxes {
            b.area_fraction /= samples.len() as f64;
        }
        boxes.sort_by(|a, b| a.height.total_cmp(&b.height));
        self.max_height = boxes.iter().map(|b| b.height).fold(0.0, f64::max) + 1e-9;
        self.boxes = boxes;

        let total_mass: f64 = samples.iter().map(|a| a.height).sum();
        let mut bad = 0.0;
        let mut kids = Vec::with_capacity(samples.len());
        for ap in &samples {
            match self.children(ap) {
                Ok(c) => kids.push(Some(c)),
                Err(_) => {
                    bad += ap.height;
                    kids.push(None);
                }
            }
        }
        self.markov_defect = bad / total_mass;

        let mut defect = 0.0;
        let mut pairs = 0usize;
        for (i, a) in samples.iter().enumerate().step_by(7) {
            let j = (i * 31 + 17) % samples.len();
            let b = &samples[j];
            if a.ret != b.ret || i == j {
                continue;
            }
            if let (Some(ka), Some(kb)) = (&kids[i], &kids[j]) {
                let mut matched = 0.0;
                for (x, y) in ka.iter().zip(kb.iter()) {
                    if x.plaque.ret != y.plaque.ret {
                        break;
                    }
                    matched += x.plaque.height;
                }
                defect += 1.0 - matched / (self.spectral.kappa[2] * a.height);
                pairs += 1;
            }
        }
        self.cs_pattern_defect = if pairs > 0 {
            defect / pairs as f64
        } else {
            0.0
        };
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plaque {
    pub base: TorusPoint,
    pub nodes: Vec<TorusPoint>,
    pub f_arclen: Vec<f64>,
    /// Parameter of the h-image along the linear plaque.
    pub h_param: Vec<f64>,
    pub box_id: [i64; 3],
    pub aplaque: APlaque,
    /// Largest distance of an h-image node from the linear plaque.
    pub transverse_deviation: f64,
}

impl Plaque {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn h_length(&self) -> f64 {
        match (self.h_param.first(), self.h_param.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }
}

/// Evenly spaced parameters on [0, height], at most `spacing` apart.
pub fn node_params(height: f64, spacing: f64) -> Vec<f64> {
    let n = ((height / spacing).ceil() as usize).max(2);
    (0..=n).map(|i| height * i as f64 / n as f64).collect()
}

/// Parameter of h(y) on `ap` near `t_guess`, and its distance from the line.
pub fn h_offset(
    u: &DisplacementField,
    part: &Partition,
    ap: &APlaque,
    t_guess: f64,
    y: &Vec3,
) -> (f64, f64) {
    let s = &part.spectral;
    let hy = wrap(&add(y, &u.u_series(y)));
    let d = min_image(&sub(&hy, &part.point(ap, t_guess)));
    let e = eigen_coords(s, &d);
    (t_guess + e[2], norm(&s.from_eigen(&[e[0], e[1], 0.0])))
}

fn cumulative_arclen(nodes: &[TorusPoint]) -> Vec<f64> {
    let mut out = Vec::with_capacity(nodes.len());
    let mut acc = 0.0;
    for (i, n) in nodes.iter().enumerate() {
        if i > 0 {
            acc += norm(&min_image(&sub(&n.coords, &nodes[i - 1].coords)));
        }
        out.push(acc);
    }
    out
}

/// The f-plaque over `ap` with nodes h⁻¹ of the given linear parameters.
pub fn build_plaque(
    u: &DisplacementField,
    part: &Partition,
    ap: &APlaque,
    params: &[f64],
) -> Result<Plaque> {
    let mut nodes = Vec::with_capacity(params.len());
    let mut h_param = Vec::with_capacity(params.len());
    let mut dev = 0.0f64;
    for (k, &t) in params.iter().enumerate() {
        let z = part.point(ap, t);
        let tau = u.center_offset(&z, PLAQUE_TOL, FLOAT_DEPTH_CAP)?;
        let y = u.on_center(&z, tau);
        let (p, d) = h_offset(u, part, ap, t, &y);
        if k > 0 && !(p > h_param[k - 1]) {
            return Err(Error::HImageNonMonotone { node: k });
        }
        dev = dev.max(d);
        nodes.push(TorusPoint { coords: y });
        h_param.push(p);
    }
    let f_arclen = cumulative_arclen(&nodes);
    Ok(Plaque {
        base: nodes.first().copied().unwrap_or_else(TorusPoint::origin),
        nodes,
        f_arclen,
        h_param,
        box_id: ap.ret,
        aplaque: *ap,
        transverse_deviation: dev,
    })
}

pub fn build_default(u: &DisplacementField, part: &Partition, ap: &APlaque) -> Result<Plaque> {
    build_plaque(u, part, ap, &node_params(ap.height, DEFAULT_SPACING))
}

/// Slope β with E^u(y) = e₃ + β(y)·e₂, summed along the backward orbit.
pub fn unstable_slope(f: &DaMap, y: &Vec3, terms: usize) -> f64 {
    if f.amplitude == 0.0 {
        return 0.0;
    }
    let s = &f.spectral;
    let mu3 = s.mu[2];
    let e3 = s.frame[2];
    let mut p = *y;
    let mut prod = 1.0;
    let mut beta = 0.0;
    for _ in 0..terms {
        p = f.inverse(&p);
        let (_, g) = f.bump.value_grad(&p);
        beta += f.amplitude * dot(&g, &e3) / mu3 * prod;
        prod *= f.center_derivative(&p) / mu3;
        if prod.abs() < 1e-18 {
            break;
        }
    }
    beta
}

const SLOPE_TERMS: usize = 30;

/// Grows the f-unstable plaque through y by integrating db/dc = β in the
/// plane a = const, until the h-image leaves the linear plaque of h(y).
pub fn grow_plaque(
    f: &DaMap,
    u: &DisplacementField,
    part: &Partition,
    y: &TorusPoint,
    step: f64,
) -> Result<Plaque> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter("step must be positive".into()));
    }
    let s = &f.spectral;
    let hy = wrap(&add(&y.coords, &u.u_series(&y.coords)));
    let (ap, t0) = part.locate(&hy)?;
    let height = ap.height;
    let zc = s.from_eigen(&[ap.sigma[0], ap.sigma[1], t0]);
    let yc = add(&zc, &min_image(&sub(&y.coords, &wrap(&zc))));
    let ye = eigen_coords(s, &yc);
    let a = ye[0];
    let at = |b: f64, c: f64| wrap(&s.from_eigen(&[a, b, c]));
    let slope = |b: f64, c: f64| unstable_slope(f, &at(b, c), SLOPE_TERMS);
    let rk4 = |b: f64, c: f64, h: f64| {
        let k1 = slope(b, c);
        let k2 = slope(b + 0.5 * h * k1, c + 0.5 * h);
        let k3 = slope(b + 0.5 * h * k2, c + 0.5 * h);
        let k4 = slope(b + h * k3, c + h);
        b + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    };
    // h-image parameter, measured from the point of `ap` at the same c shift
    let param = |b: f64, c: f64| h_offset(u, part, &ap, t0 + (c - ye[2]), &at(b, c));
    let max_steps = (4.0 * height / step).ceil() as usize + 16;

    let mut sides: Vec<Vec<(f64, f64, f64, f64)>> = Vec::new();
    for dir in [1.0, -1.0] {
        let goal = if dir > 0.0 { height } else { 0.0 };
        let (p0, d0) = param(ye[1], ye[2]);
        let mut pts = vec![(ye[1], ye[2], p0, d0)];
        let mut done = false;
        for _ in 0..max_steps {
            let (pb, pc, pp, _) = *pts.last().unwrap();
            let nb = rk4(pb, pc, dir * step);
            let nc = pc + dir * step;
            if !nb.is_finite() {
                return Err(Error::LeafIntegrationDiverged { point: at(pb, pc) });
            }
            let (np, nd) = param(nb, nc);
            if (np - goal) * dir >= 0.0 {
                let frac = ((goal - pp) / (np - pp)).clamp(0.0, 1.0);
                let h = dir * step * frac;
                let eb = rk4(pb, pc, h);
                let (ep, ed) = param(eb, pc + h);
                if (ep - pp) * dir > 0.0 {
                    pts.push((eb, pc + h, ep, ed));
                }
                done = true;
                break;
            }
            pts.push((nb, nc, np, nd));
        }
        if !done {
            return Err(Error::LeafIntegrationStalled { point: y.coords });
        }
        sides.push(pts);
    }
    let mut all: Vec<(f64, f64, f64, f64)> = sides[1].iter().rev().cloned().collect();
    all.extend(sides[0].iter().skip(1).cloned());
    for k in 1..all.len() {
        if !(all[k].2 > all[k - 1].2) {
            return Err(Error::HImageNonMonotone { node: k });
        }
    }
    let nodes: Vec<TorusPoint> = all
        .iter()
        .map(|p| TorusPoint {
            coords: at(p.0, p.1),
        })
        .collect();
    let f_arclen = cumulative_arclen(&nodes);
    Ok(Plaque {
        base: nodes[0],
        nodes,
        f_arclen,
        h_param: all.iter().map(|p| p.2).collect(),
        box_id: ap.ret,
        aplaque: ap,
        transverse_deviation: all.iter().map(|p| p.3).fold(0.0, f64::max),
    })
}

/// Trapezoid weights of the h-parameter, normalized to total 1.
pub fn trapezoid_weights(h: &[f64]) -> Vec<f64> {
    let n = h.len();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![1.0];
    }
    let span = h[n - 1] - h[0];
    (0..n)
        .map(|i| {
            let lo = if i == 0 { h[0] } else { h[i - 1] };
            let hi = if i + 1 == n { h[n - 1] } else { h[i + 1] };
            0.5 * (hi - lo) / span
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPlaqueMeasure {
    pub plaque: Plaque,
    /// log density G per node, relative to the reference measure.
    pub log_density: Vec<f64>,
    pub holder_const: f64,
    pub holder_exp: f64,
    pub total_mass: f64,
}

/// max over node pairs of |G_i − G_j| / |h_i − h_j|^γ.
pub fn holder_constant(h: &[f64], g: &[f64], gamma: f64) -> f64 {
    let mut best = 0.0f64;
    for i in 0..h.len() {
        for j in (i + 1)..h.len() {
            let d = (h[j] - h[i]).abs();
            if d > 0.0 {
                best = best.max((g[j] - g[i]).abs() / d.powf(gamma));
            }
        }
    }
    best
}

impl WeightedPlaqueMeasure {
    /// Measure with density e^G against the reference measure, normalized to mass 1.
    pub fn with_log_density(plaque: Plaque, g: Vec<f64>, gamma: f64) -> Result<Self> {
        if g.len() != plaque.len() || !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidParameter(
                "log density length or exponent out of range".into(),
            ));
        }
        let w = trapezoid_weights(&plaque.h_param);
        let z: f64 = w.iter().zip(&g).map(|(w, g)| w * g.exp()).sum();
        let shift = z.ln();
        let g: Vec<f64> = g.iter().map(|x| x - shift).collect();
        let holder_const = holder_constant(&plaque.h_param, &g, gamma);
        let total_mass = w.iter().zip(&g).map(|(w, g)| w * g.exp()).sum();
        Ok(WeightedPlaqueMeasure {
            plaque,
            log_density: g,
            holder_const,
            holder_exp: gamma,
            total_mass,
        })
    }

    /// Node masses w_i·e^{G_i}.
    pub fn masses(&self) -> Vec<f64> {
        trapezoid_weights(&self.plaque.h_param)
            .iter()
            .zip(&self.log_density)
            .map(|(w, g)| w * g.exp())
            .collect()
    }

    pub fn integrate<F: Fn(&Vec3) -> f64>(&self, phi: F) -> f64 {
        self.masses()
            .iter()
            .zip(&self.plaque.nodes)
            .map(|(m, n)| m * phi(&n.coords))
            .sum()
    }
}

pub fn reference_measure(p: &Plaque) -> WeightedPlaqueMeasure {
    let w = trapezoid_weights(&p.h_param);
    WeightedPlaqueMeasure {
        plaque: p.clone(),
        log_density: vec![0.0; p.len()],
        holder_const: 0.0,
        holder_exp: 0.5,
        total_mass: w.iter().sum(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferSplit {
    pub parent: Plaque,
    pub children: Vec<Plaque>,
    pub weights: Vec<f64>,
    /// Relative variation of the pushed density against each child's reference measure.
    pub density_variation: Vec<f64>,
}

impl TransferSplit {
    pub fn max_density_variation(&self) -> f64 {
        self.density_variation.iter().cloned().fold(0.0, f64::max)
    }
}

/// Splits f(p) into child plaques with weights c_i = ν^u_p(f⁻¹ child) and
/// checks that the pushed reference measure has constant density on each child.
pub fn transfer_split(
    f: &DaMap,
    u: &DisplacementField,
    part: &Partition,
    p: &Plaque,
) -> Result<TransferSplit> {
    let kids = part.children(&p.aplaque)?;
    let hp = p.aplaque.height;
    let mut children = Vec::with_capacity(kids.len());
    let mut weights = Vec::with_capacity(kids.len());
    let mut density_variation = Vec::with_capacity(kids.len());
    for kid in &kids {
        let params = node_params(kid.plaque.height, DEFAULT_SPACING);
        let child = build_plaque(u, part, &kid.plaque, &params)?;
        let mut pulled = Vec::with_capacity(params.len());
        for (k, node) in child.nodes.iter().enumerate() {
            let x = f.inverse(&node.coords);
            pulled.push(h_offset(u, part, &p.aplaque, kid.parent_param(params[k]), &x).0);
        }
        let ratios: Vec<f64> = (1..params.len())
            .map(|k| {
                let dp = (pulled[k] - pulled[k - 1]).abs() / hp;
                let dc = (child.h_param[k] - child.h_param[k - 1]) / kid.plaque.height;
                dp / dc
            })
            .collect();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let var = ratios.iter().map(|r| (r - mean).abs()).fold(0.0, f64::max) / mean;
        weights.push((kid.parent_hi - kid.parent_lo).abs() / hp);
        density_variation.push(var);
        children.push(child);
    }
    Ok(TransferSplit {
        parent: p.clone(),
        children,
        weights,
        density_variation,
    })
}

/// One step of the transfer operator: T(l) = Σ c_i l_i, with l_i carrying the
/// pushed density e^{G∘f⁻¹} on child i.
pub fn transfer_step(
    l: &WeightedPlaqueMeasure,
    f: &DaMap,
    u: &DisplacementField,
    part: &Partition,
) -> Result<Vec<(f64, WeightedPlaqueMeasure)>> {
    let p = &l.plaque;
    let g = &l.log_density;
    let h = &p.h_param;
    let interp = |t: f64| -> f64 {
        let k = h.partition_point(|x| *x < t).clamp(1, h.len() - 1);
        let lam = ((t - h[k - 1]) / (h[k] - h[k - 1])).clamp(0.0, 1.0);
        g[k - 1] + lam * (g[k] - g[k - 1])
    };
    let kids = part.children(&p.aplaque)?;
    let mut out = Vec::with_capacity(kids.len());
    let mut raw = Vec::with_capacity(kids.len());
    for kid in &kids {
        let (lo, hi) = (
            kid.parent_lo.min(kid.parent_hi),
            kid.parent_lo.max(kid.parent_hi),
        );
        let inside: Vec<usize> = (0..h.len()).filter(|&i| h[i] > lo && h[i] < hi).collect();
        // (parent parameter, G, node) in parent order, with cut points at both ends
        let mut pts: Vec<(f64, f64, Option<Vec3>)> = Vec::with_capacity(inside.len() + 2);
        pts.push((lo, interp(lo), None));
        for &i in &inside {
            pts.push((h[i], g[i], Some(p.nodes[i].coords)));
        }
        pts.push((hi, interp(hi), None));
        let mut mass = 0.0;
        for w in pts.windows(2) {
            mass += 0.5 * (w[1].0 - w[0].0) * (w[0].1.exp() + w[1].1.exp());
        }
        raw.push(mass);
        let scale_t = kid.plaque.height / (kid.parent_hi - kid.parent_lo);
        let mut child_pts: Vec<(f64, f64, Option<Vec3>)> = pts
            .into_iter()
            .map(|(t, gv, n)| ((t - kid.parent_lo) * scale_t, gv, n))
            .collect();
        if child_pts
            .first()
            .map_or(false, |a| child_pts.last().map_or(false, |b| a.0 > b.0))
        {
            child_pts.reverse();
        }
        let mut nodes = Vec::with_capacity(child_pts.len());
        let mut params = Vec::with_capacity(child_pts.len());
        let mut gs = Vec::with_capacity(child_pts.len());
        for (t, gv, n) in &child_pts {
            let t = t.clamp(0.0, kid.plaque.height);
            let node = match n {
                Some(x) => f.eval(x),
                None => {
                    let z = part.point(&kid.plaque, t);
                    u.on_center(&z, u.center_offset(&z, PLAQUE_TOL, FLOAT_DEPTH_CAP)?)
                }
            };
            nodes.push(TorusPoint { coords: node });
            params.push(t);
            gs.push(*gv);
        }
        let f_arclen = cumulative_arclen(&nodes);
        let child = Plaque {
            base: nodes[0],
            nodes,
            f_arclen,
            h_param: params,
            box_id: kid.plaque.ret,
            aplaque: kid.plaque,
            transverse_deviation: p.transverse_deviation,
        };
        out.push(WeightedPlaqueMeasure::with_log_density(
            child,
            gs,
            l.holder_exp,
        )?);
    }
    let total: f64 = raw.iter().sum();
    Ok(raw
        .into_iter()
        .zip(out)
        .map(|(m, c)| (m / total, c))
        .collect())
}

/// Reference measure on the same plaque and Σ|m_i − w_i|, the sup of
/// |l(φ) − l̃(φ)| over node functions with |φ| ≤ 1.
pub fn project_e0(l: &WeightedPlaqueMeasure) -> (WeightedPlaqueMeasure, f64) {
    let r = reference_measure(&l.plaque);
    let w = trapezoid_weights(&l.plaque.h_param);
    let dist = l.masses().iter().zip(&w).map(|(m, w)| (m - w).abs()).sum();
    (r, dist)
}

/// Centre-stable holonomy from the plaque of `src` to the plaque whose
/// h-image contains h(dst_base), matching equal linear parameters.
pub fn cs_holonomy(
    src: &WeightedPlaqueMeasure,
    dst_base: &TorusPoint,
    u: &DisplacementField,
    part: &Partition,
) -> Result<WeightedPlaqueMeasure> {
    if *dst_base == src.plaque.base {
        return Ok(src.clone());
    }
    let hz = wrap(&add(&dst_base.coords, &u.u_series(&dst_base.coords)));
    let (mut ap, t) = part.locate(&hz)?;
    if ap.height - t < 1e-9 {
        ap = part.plaque_at(part.next_sigma(&ap))?;
    }
    if ap.ret != src.plaque.box_id {
        return Err(Error::NotSameBox {
            src: src.plaque.box_id,
            dst: ap.ret,
        });
    }
    let mut params = Vec::with_capacity(src.plaque.len());
    for &t in &src.plaque.h_param {
        if t < -1e-9 || t > ap.height + 1e-9 {
            return Err(Error::HolonomyOutOfPlaque { param: t });
        }
        params.push(t.clamp(0.0, ap.height));
    }
    let dst = build_plaque(u, part, &ap, &params)?;
    Ok(WeightedPlaqueMeasure {
        plaque: dst,
        log_density: src.log_density.clone(),
        holder_const: src.holder_const,
        holder_exp: src.holder_exp,
        total_mass: src.total_mass,
    })
}

/// Largest difference of mass between two measures over `cells` equal cells
/// of the linear parameter. Each node mass is spread evenly over the interval
/// between the midpoints to its neighbours.
pub fn cell_discrepancy(a: &WeightedPlaqueMeasure, b: &WeightedPlaqueMeasure, cells: usize) -> f64 {
    let h = a.plaque.aplaque.height.max(b.plaque.aplaque.height);
    let width = h / cells as f64;
    let bin = |m: &WeightedPlaqueMeasure| {
        let mut out = vec![0.0; cells];
        let t = &m.plaque.h_param;
        let n = t.len();
        for (i, mass) in m.masses().iter().enumerate() {
            let lo = if i == 0 {
                t[0]
            } else {
                0.5 * (t[i - 1] + t[i])
            };
            let hi = if i + 1 == n {
                t[i]
            } else {
                0.5 * (t[i] + t[i + 1])
            };
            if hi <= lo {
                let k = ((t[i] / width).floor().max(0.0) as usize).min(cells - 1);
                out[k] += mass;
                continue;
            }
            let first = ((lo / width).floor().max(0.0) as usize).min(cells - 1);
            let last = ((hi / width).floor().max(0.0) as usize).min(cells - 1);
            for (k, cell) in out.iter_mut().enumerate().take(last + 1).skip(first) {
                let c0 = if k == first { lo } else { k as f64 * width };
                let c1 = if k == last {
                    hi
                } else {
                    (k + 1) as f64 * width
                };
                *cell += mass * (c1 - c0).max(0.0) / (hi - lo);
            }
        }
        out
    };
    let (x, y) = (bin(a), bin(b));
    x.iter()
        .zip(&y)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}
