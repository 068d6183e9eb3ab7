//! Integer toral automorphisms, their spectra, exact lattice orbits and
//! eigenframe coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];
pub type IMat3 = [[i64; 3]; 3];

/// Default lattice modulus, the Mersenne prime 2^31 - 1.
pub const DEFAULT_MODULUS: i64 = 2_147_483_647;

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn scale(a: &Vec3, k: f64) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

pub fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn normalize(a: &Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

/// Row vector times matrix.
pub fn vec_mat(v: &Vec3, m: &Mat3) -> Vec3 {
    [
        v[0] * m[0][0] + v[1] * m[1][0] + v[2] * m[2][0],
        v[0] * m[0][1] + v[1] * m[1][1] + v[2] * m[2][1],
        v[0] * m[0][2] + v[1] * m[1][2] + v[2] * m[2][2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn inverse3(m: &Mat3) -> Option<Mat3> {
    let d = det3(m);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / d;
        }
    }
    Some(inv)
}

/// Angle between two lines (sign ignored).
pub fn line_angle(a: &Vec3, b: &Vec3) -> f64 {
    let c = cross(a, b);
    norm(&c).atan2(dot(a, b).abs())
}

/// Wrap a displacement to its minimal image on the unit torus.
pub fn min_image(d: &Vec3) -> Vec3 {
    [
        d[0] - d[0].round(),
        d[1] - d[1].round(),
        d[2] - d[2].round(),
    ]
}

pub fn torus_dist(a: &Vec3, b: &Vec3) -> f64 {
    norm(&min_image(&sub(a, b)))
}

/// Fractional part without finiteness checks; result lies in [0,1).
#[inline]
pub fn wrap(p: &Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for i in 0..3 {
        let r = p[i] - p[i].floor();
        out[i] = if r >= 1.0 { 0.0 } else { r };
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    pub coords: Vec3,
}

impl TorusPoint {
    pub fn new(coords: Vec3) -> Result<Self> {
        torus_reduce(coords)
    }

    pub fn origin() -> Self {
        TorusPoint { coords: [0.0; 3] }
    }
}

pub fn torus_reduce(p: Vec3) -> Result<TorusPoint> {
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(TorusPoint { coords: wrap(&p) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegerAutomorphism {
    entries: IMat3,
    det: i64,
    inverse: IMat3,
}

fn idet(m: &IMat3) -> i64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

impl IntegerAutomorphism {
    pub fn new(entries: IMat3) -> Result<Self> {
        let det = idet(&entries);
        if det != 1 && det != -1 {
            return Err(Error::NotInvertibleOverZ { det });
        }
        let mut inverse = [[0i64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                inverse[i][j] =
                    (entries[r0][c0] * entries[r1][c1] - entries[r0][c1] * entries[r1][c0]) * det;
            }
        }
        Ok(IntegerAutomorphism {
            entries,
            det,
            inverse,
        })
    }

    pub fn entries(&self) -> &IMat3 {
        &self.entries
    }

    pub fn det(&self) -> i64 {
        self.det
    }

    pub fn inverse_entries(&self) -> &IMat3 {
        &self.inverse
    }

    pub fn as_f64(&self) -> Mat3 {
        to_f64(&self.entries)
    }

    pub fn inverse_f64(&self) -> Mat3 {
        to_f64(&self.inverse)
    }

    /// x -> M x on the cover.
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        mat_vec(&self.as_f64(), x)
    }

    pub fn apply_inverse(&self, x: &Vec3) -> Vec3 {
        mat_vec(&self.inverse_f64(), x)
    }

    /// k -> M^T k on integer frequency vectors.
    pub fn transpose_apply(&self, k: &[i64; 3]) -> [i64; 3] {
        let m = &self.entries;
        [
            m[0][0] * k[0] + m[1][0] * k[1] + m[2][0] * k[2],
            m[0][1] * k[0] + m[1][1] * k[1] + m[2][1] * k[2],
            m[0][2] * k[0] + m[1][2] * k[1] + m[2][2] * k[2],
        ]
    }

    /// M^T k, or None on overflow.
    pub fn checked_transpose_apply(&self, k: &[i64; 3]) -> Option<[i64; 3]> {
        let m = &self.entries;
        let mut out = [0i64; 3];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0i64;
            for i in 0..3 {
                acc = acc.checked_add(m[i][j].checked_mul(k[i])?)?;
            }
            *o = acc;
        }
        Some(out)
    }

    pub fn trace(&self) -> i64 {
        self.entries[0][0] + self.entries[1][1] + self.entries[2][2]
    }
}

fn to_f64(m: &IMat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[i][j] as f64;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralData {
    pub automorphism: IntegerAutomorphism,
    /// Signed eigenvalues ordered by modulus.
    pub mu: Vec3,
    pub kappa: Vec3,
    /// Unit eigenvectors e1, e2, e3.
    pub frame: [Vec3; 3],
    /// Rows of the inverse of the matrix with columns e1, e2, e3.
    pub dual_frame: [Vec3; 3],
}

impl SpectralData {
    pub fn log_kappa(&self) -> Vec3 {
        [self.kappa[0].ln(), self.kappa[1].ln(), self.kappa[2].ln()]
    }

    /// Matrix with columns e1, e2, e3.
    pub fn frame_matrix(&self) -> Mat3 {
        let e = &self.frame;
        [
            [e[0][0], e[1][0], e[2][0]],
            [e[0][1], e[1][1], e[2][1]],
            [e[0][2], e[1][2], e[2][2]],
        ]
    }

    pub fn from_eigen(&self, c: &Vec3) -> Vec3 {
        let e = &self.frame;
        [
            c[0] * e[0][0] + c[1] * e[1][0] + c[2] * e[2][0],
            c[0] * e[0][1] + c[1] * e[1][1] + c[2] * e[2][1],
            c[0] * e[0][2] + c[1] * e[1][2] + c[2] * e[2][2],
        ]
    }
}

pub fn eigen_coords(s: &SpectralData, x: &Vec3) -> Vec3 {
    let d = &s.dual_frame;
    [dot(&d[0], x), dot(&d[1], x), dot(&d[2], x)]
}

fn char_poly(m: &IMat3) -> [f64; 3] {
    // x^3 + a x^2 + b x + c
    let tr = (m[0][0] + m[1][1] + m[2][2]) as f64;
    let minors = (m[0][0] * m[1][1] - m[0][1] * m[1][0])
        + (m[0][0] * m[2][2] - m[0][2] * m[2][0])
        + (m[1][1] * m[2][2] - m[1][2] * m[2][1]);
    [-tr, minors as f64, -(idet(m) as f64)]
}

fn real_cubic_roots(a: f64, b: f64, c: f64) -> Result<[f64; 3]> {
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let disc = -(4.0 * p * p * p + 27.0 * q * q);
    if disc <= 1e-9 {
        return Err(Error::SpectrumNotRealSplit {
            reason: format!("characteristic discriminant {disc} is not positive"),
        });
    }
    let m = 2.0 * (-p / 3.0).sqrt();
    let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
    let theta = arg.acos() / 3.0;
    let mut roots = [0.0; 3];
    for (k, r) in roots.iter_mut().enumerate() {
        let y = m * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos();
        let mut x = y - a / 3.0;
        for _ in 0..4 {
            let f = ((x + a) * x + b) * x + c;
            let df = (3.0 * x + 2.0 * a) * x + b;
            if df == 0.0 {
                break;
            }
            x -= f / df;
        }
        *r = x;
    }
    Ok(roots)
}

fn eigenvector(m: &IMat3, mu: f64) -> Vec3 {
    let mut b = to_f64(m);
    for (i, row) in b.iter_mut().enumerate() {
        row[i] -= mu;
    }
    let cands = [
        cross(&b[0], &b[1]),
        cross(&b[0], &b[2]),
        cross(&b[1], &b[2]),
    ];
    let mut best = cands[0];
    for c in &cands[1..] {
        if norm(c) > norm(&best) {
            best = *c;
        }
    }
    let mut v = normalize(&best);
    let imax = (0..3)
        .max_by(|&i, &j| v[i].abs().total_cmp(&v[j].abs()))
        .unwrap();
    if v[imax] < 0.0 {
        v = scale(&v, -1.0);
    }
    v
}

pub fn analyze_matrix(m: IMat3) -> Result<SpectralData> {
    let auto = IntegerAutomorphism::new(m)?;
    let [a, b, c] = char_poly(&m);
    let mut roots = real_cubic_roots(a, b, c)?;
    roots.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let kappa = [roots[0].abs(), roots[1].abs(), roots[2].abs()];
    for k in kappa {
        if (k - 1.0).abs() < 1e-9 {
            return Err(Error::SpectrumNotRealSplit {
                reason: "eigenvalue of modulus 1".into(),
            });
        }
    }
    if kappa[1] - kappa[0] < 1e-9 || kappa[2] - kappa[1] < 1e-9 {
        return Err(Error::SpectrumNotRealSplit {
            reason: "repeated eigenvalue modulus".into(),
        });
    }
    let contracting = kappa.iter().filter(|&&k| k < 1.0).count();
    if contracting != 2 {
        return Err(Error::WrongStableDimension { contracting });
    }
    let frame = [
        eigenvector(&m, roots[0]),
        eigenvector(&m, roots[1]),
        eigenvector(&m, roots[2]),
    ];
    let fm = [
        [frame[0][0], frame[1][0], frame[2][0]],
        [frame[0][1], frame[1][1], frame[2][1]],
        [frame[0][2], frame[1][2], frame[2][2]],
    ];
    let dual_frame = inverse3(&fm).ok_or_else(|| Error::SpectrumNotRealSplit {
        reason: "degenerate eigenframe".into(),
    })?;
    Ok(SpectralData {
        automorphism: auto,
        mu: roots,
        kappa,
        frame,
        dual_frame,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticePoint {
    pub numerators: [i64; 3],
    pub modulus: i64,
}

const MAX_MODULUS: i64 = 1 << 62;

impl LatticePoint {
    pub fn new(numerators: [i64; 3], modulus: i64) -> Result<Self> {
        if modulus <= 0 {
            return Err(Error::InvalidParameter(format!(
                "modulus {modulus} must be positive"
            )));
        }
        if modulus >= MAX_MODULUS {
            return Err(Error::ModulusOverflow { modulus });
        }
        let mut n = numerators;
        for v in n.iter_mut() {
            *v = v.rem_euclid(modulus);
        }
        Ok(LatticePoint {
            numerators: n,
            modulus,
        })
    }

    pub fn to_torus(&self) -> TorusPoint {
        let q = self.modulus as f64;
        TorusPoint {
            coords: [
                self.numerators[0] as f64 / q,
                self.numerators[1] as f64 / q,
                self.numerators[2] as f64 / q,
            ],
        }
    }

    pub fn coords(&self) -> Vec3 {
        self.to_torus().coords
    }
}

fn mat_mod_mul(a: &[[i128; 3]; 3], b: &[[i128; 3]; 3], q: i128) -> [[i128; 3]; 3] {
    let mut out = [[0i128; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = 0i128;
            for k in 0..3 {
                acc = (acc + a[i][k] * b[k][j]) % q;
            }
            out[i][j] = acc;
        }
    }
    out
}

fn reduce_matrix(m: &IMat3, q: i64) -> [[i128; 3]; 3] {
    let mut out = [[0i128; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (m[i][j] as i128).rem_euclid(q as i128);
        }
    }
    out
}

fn apply_mod(m: &[[i128; 3]; 3], x: &[i64; 3], q: i128) -> [i64; 3] {
    let mut out = [0i64; 3];
    for i in 0..3 {
        let mut acc = 0i128;
        for k in 0..3 {
            acc = (acc + m[i][k] * x[k] as i128) % q;
        }
        out[i] = acc as i64;
    }
    out
}

/// Exact image A^n x on the lattice (Z/QZ)^3.
pub fn apply_auto(a: &IntegerAutomorphism, x: &LatticePoint, n: i64) -> Result<LatticePoint> {
    let q = x.modulus;
    if q <= 0 {
        return Err(Error::InvalidParameter(format!(
            "modulus {q} must be positive"
        )));
    }
    if q >= MAX_MODULUS {
        return Err(Error::ModulusOverflow { modulus: q });
    }
    if n == 0 {
        return Ok(*x);
    }
    let base = if n > 0 {
        a.entries()
    } else {
        a.inverse_entries()
    };
    let qq = q as i128;
    let mut pow = reduce_matrix(base, q);
    let mut acc = [[1i128, 0, 0], [0, 1, 0], [0, 0, 1]];
    let mut e = n.unsigned_abs();
    while e > 0 {
        if e & 1 == 1 {
            acc = mat_mod_mul(&pow, &acc, qq);
        }
        pow = mat_mod_mul(&pow, &pow, qq);
        e >>= 1;
    }
    Ok(LatticePoint {
        numerators: apply_mod(&acc, &x.numerators, qq),
        modulus: q,
    })
}

/// Single-step exact stepper for long lattice orbits.
#[derive(Debug, Clone, Copy)]
pub struct LatticeStepper {
    forward: [[i128; 3]; 3],
    backward: [[i128; 3]; 3],
    modulus: i64,
}

impl LatticeStepper {
    pub fn new(a: &IntegerAutomorphism, modulus: i64) -> Result<Self> {
        if modulus <= 0 {
            return Err(Error::InvalidParameter(format!(
                "modulus {modulus} must be positive"
            )));
        }
        if modulus >= MAX_MODULUS {
            return Err(Error::ModulusOverflow { modulus });
        }
        Ok(LatticeStepper {
            forward: reduce_matrix(a.entries(), modulus),
            backward: reduce_matrix(a.inverse_entries(), modulus),
            modulus,
        })
    }

    pub fn forward(&self, x: &LatticePoint) -> LatticePoint {
        LatticePoint {
            numerators: apply_mod(&self.forward, &x.numerators, self.modulus as i128),
            modulus: self.modulus,
        }
    }

    pub fn backward(&self, x: &LatticePoint) -> LatticePoint {
        LatticePoint {
            numerators: apply_mod(&self.backward, &x.numerators, self.modulus as i128),
            modulus: self.modulus,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const COMPANION: IMat3 = [[0, 0, -1], [1, 0, 0], [0, 1, 3]];

    #[test]
    fn companion_spectrum() {
        let s = analyze_matrix(COMPANION).unwrap();
        assert!((s.kappa[0] - 0.5321).abs() < 1e-4);
        assert!((s.kappa[1] - 0.6527).abs() < 1e-4);
        assert!((s.kappa[2] - 2.8794).abs() < 1e-4);
        assert!(s.mu[0] < 0.0);
    }

    #[test]
    fn rejects_identity_and_unit_modulus() {
        let id = [[1, 0, 0], [0, 1, 0], [0, 0, 1]];
        assert!(matches!(
            analyze_matrix(id),
            Err(Error::SpectrumNotRealSplit { .. })
        ));
        let m = [[2, 1, 0], [1, 1, 0], [0, 0, 1]];
        assert!(matches!(
            analyze_matrix(m),
            Err(Error::SpectrumNotRealSplit { .. })
        ));
        let sing = [[1, 0, 0], [0, 2, 0], [0, 0, 1]];
        assert!(matches!(
            analyze_matrix(sing),
            Err(Error::NotInvertibleOverZ { det: 2 })
        ));
    }

    #[test]
    fn inverse_is_integer_inverse() {
        let a = IntegerAutomorphism::new(COMPANION).unwrap();
        let p = mat_mul(&a.as_f64(), &a.inverse_f64());
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(p[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn reduce_examples() {
        assert_eq!(
            torus_reduce([1.25, -0.5, 3.0]).unwrap().coords,
            [0.25, 0.5, 0.0]
        );
        assert_eq!(
            torus_reduce([-1e-18, 0.0, 0.0]).unwrap().coords,
            [0.0, 0.0, 0.0]
        );
        assert!(torus_reduce([f64::NAN, 0.0, 0.0]).is_err());
    }
}
