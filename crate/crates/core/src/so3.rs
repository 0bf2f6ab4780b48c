//! Rotations, Wigner matrices, and the two rotation actions.
//!
//! Active convention throughout: the rotated image is `f'(w) = f(R^-1 w)`
//! and its coefficients are `c'_l = D^l(R) c_l` with
//! `D^l_{m m'}(R) = e^{-i m alpha} d^l_{m m'}(beta) e^{-i m' gamma}` for the
//! ZYZ factorization `R = Rz(alpha) Ry(beta) Rz(gamma)`.

use std::f64::consts::PI;
use std::str::FromStr;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::lf;
use crate::error::{Error, Result};
use crate::grid::{self, Direction, ErpImage};
use crate::harmonics::ShCoefficients;

/// Degree cap for the factorial-sum Wigner formula.
pub const MAX_WIGNER_DEGREE: usize = 32;

/// Unit quaternion `(w, x, y, z)`, sign-canonicalized so `q` and `-q` are
/// stored identically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    q: [f64; 4],
}

impl Rotation {
    pub fn identity() -> Self {
        Self { q: [1.0, 0.0, 0.0, 0.0] }
    }

    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !(n.is_finite() && n > 1e-300) {
            return Err(Error::invalid("quaternion must be finite and nonzero"));
        }
        let mut q = [w / n, x / n, y / n, z / n];
        // canonical representative: first nonzero component positive
        if let Some(&lead) = q.iter().find(|v| **v != 0.0) {
            if lead < 0.0 {
                q.iter_mut().for_each(|v| *v = -*v);
            }
        }
        Ok(Self { q })
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if !(n > 1e-300) {
            return Err(Error::invalid("rotation axis must be nonzero"));
        }
        let (s, c) = (angle / 2.0).sin_cos();
        Self::from_quaternion(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    pub fn from_euler_zyz(alpha: f64, beta: f64, gamma: f64) -> Self {
        let rz = |a: f64| Self::from_axis_angle([0.0, 0.0, 1.0], a).expect("unit axis");
        let ry = Self::from_axis_angle([0.0, 1.0, 0.0], beta).expect("unit axis");
        rz(alpha).compose(&ry).compose(&rz(gamma))
    }

    pub fn quaternion(&self) -> [f64; 4] {
        self.q
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        let [a1, b1, c1, d1] = self.q;
        let [a2, b2, c2, d2] = other.q;
        Rotation::from_quaternion(
            a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
            a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
            a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
            a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
        )
        .expect("product of unit quaternions is nonzero")
    }

    pub fn inverse(&self) -> Rotation {
        let [w, x, y, z] = self.q;
        Rotation::from_quaternion(w, -x, -y, -z).expect("unit quaternion")
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let [w, x, y, z] = self.q;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = self.matrix();
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    /// ZYZ Euler angles `(alpha, beta, gamma)`.
    ///
    /// At `beta = 0` or `beta = pi` only `alpha +- gamma` is defined; `gamma`
    /// is then set to 0.
    pub fn euler_zyz(&self) -> (f64, f64, f64) {
        let [w, x, y, z] = self.q;
        let cb = (w * w + z * z).sqrt();
        let sb = (x * x + y * y).sqrt();
        let beta = 2.0 * sb.atan2(cb);
        let sum = 2.0 * z.atan2(w);
        let diff = 2.0 * (-x).atan2(y);
        const EPS: f64 = 1e-14;
        if sb < EPS {
            (sum, beta, 0.0)
        } else if cb < EPS {
            (diff, beta, 0.0)
        } else {
            ((sum + diff) / 2.0, beta, (sum - diff) / 2.0)
        }
    }

    /// Geodesic distance to the identity, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.q[0].abs().min(1.0).acos()
    }
}

impl FromStr for Rotation {
    type Err = Error;

    /// `"w,x,y,z"` (quaternion) or `"zyz:alpha,beta,gamma"` (radians).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (euler, body) = match s.strip_prefix("zyz:") {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let offset = s.len() - body.len();
        let mut vals = Vec::new();
        let mut pos = offset;
        for part in body.split(',') {
            let v: f64 = part.trim().parse().map_err(|_| Error::Parse {
                position: pos,
                message: format!("expected a number, found {part:?}"),
            })?;
            vals.push(v);
            pos += part.len() + 1;
        }
        match (euler, vals.as_slice()) {
            (true, [a, b, g]) => Ok(Rotation::from_euler_zyz(*a, *b, *g)),
            (false, [w, x, y, z]) => Rotation::from_quaternion(*w, *x, *y, *z),
            (true, _) => Err(Error::Parse {
                position: offset,
                message: "euler rotation needs exactly 3 angles".into(),
            }),
            (false, _) => Err(Error::Parse {
                position: 0,
                message: "quaternion needs exactly 4 components".into(),
            }),
        }
    }
}

/// Haar-uniform rotation from four normal draws.
pub fn random_rotation(seed: u64) -> Rotation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_rotation_with(&mut rng)
}

pub fn random_rotation_with<R: rand::Rng>(rng: &mut R) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        if let Ok(r) = Rotation::from_quaternion(q[0], q[1], q[2], q[3]) {
            return r;
        }
    }
}

/// Uniform axis on the sphere with a fixed rotation angle.
pub fn random_axis_rotation<R: rand::Rng>(rng: &mut R, angle: f64) -> Rotation {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        if let Ok(r) = Rotation::from_axis_angle(v, angle) {
            return r;
        }
    }
}

pub fn rotation_angle(r: &Rotation) -> f64 {
    r.angle()
}

fn check_degree(l: usize) -> Result<()> {
    if l > MAX_WIGNER_DEGREE {
        return Err(Error::invalid(format!(
            "Wigner degree {l} exceeds supported maximum {MAX_WIGNER_DEGREE}"
        )));
    }
    Ok(())
}

/// Wigner small-d `d^l_{m m'}(beta)`, row-major over `(m + l, m' + l)`.
pub fn little_d(l: usize, beta: f64) -> Result<Vec<f64>> {
    check_degree(l)?;
    let n = 2 * l + 1;
    let j = l as i64;
    let (sh, ch) = (beta / 2.0).sin_cos();
    let mut d = vec![0.0; n * n];
    for mp in -j..=j {
        for m in -j..=j {
            let log_pref = 0.5 * (lf(j + mp) + lf(j - mp) + lf(j + m) + lf(j - m));
            let s_min = 0.max(m - mp);
            let s_max = (j + m).min(j - mp);
            let mut sum = 0.0;
            for s in s_min..=s_max {
                let log_den = lf(j + m - s) + lf(s) + lf(mp - m + s) + lf(j - mp - s);
                let term = (log_pref - log_den).exp()
                    * ch.powi((2 * j + m - mp - 2 * s) as i32)
                    * sh.powi((mp - m + 2 * s) as i32);
                if (mp - m + s).rem_euclid(2) == 0 {
                    sum += term;
                } else {
                    sum -= term;
                }
            }
            d[((mp + j) * n as i64 + (m + j)) as usize] = sum;
        }
    }
    Ok(d)
}

/// Square complex matrix `D^l`, row-major over `(m + l, m' + l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WignerD {
    l: usize,
    data: Vec<Complex64>,
}

impl WignerD {
    pub fn degree(&self) -> usize {
        self.l
    }

    pub fn dim(&self) -> usize {
        2 * self.l + 1
    }

    pub fn get(&self, m: i64, mp: i64) -> Complex64 {
        let l = self.l as i64;
        self.data[((m + l) * self.dim() as i64 + (mp + l)) as usize]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn matmul(&self, other: &WignerD) -> WignerD {
        let n = self.dim();
        let mut data = vec![Complex64::new(0.0, 0.0); n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                for j in 0..n {
                    data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        WignerD { l: self.l, data }
    }

    pub fn apply(&self, v: &[Complex64], out: &mut [Complex64]) {
        let n = self.dim();
        for i in 0..n {
            out[i] = (0..n).map(|k| self.data[i * n + k] * v[k]).sum();
        }
    }

    /// `max |D D^dagger - 1|`.
    pub fn unitarity_residual(&self) -> f64 {
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let s: Complex64 = (0..n).map(|k| self.data[i * n + k] * self.data[j * n + k].conj()).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((s - expect).norm());
            }
        }
        worst
    }

    pub fn max_abs_diff(&self, other: &WignerD) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

pub fn wigner_d(l: usize, r: &Rotation) -> Result<WignerD> {
    let (alpha, beta, gamma) = r.euler_zyz();
    let small = little_d(l, beta)?;
    let n = 2 * l + 1;
    let li = l as i64;
    let mut data = vec![Complex64::new(0.0, 0.0); n * n];
    for m in -li..=li {
        for mp in -li..=li {
            let idx = ((m + li) * n as i64 + (mp + li)) as usize;
            let phase = -(m as f64) * alpha - (mp as f64) * gamma;
            data[idx] = Complex64::from_polar(small[idx], phase);
        }
    }
    Ok(WignerD { l, data })
}

/// `c'_l = D^l(R) c_l` for every block and channel.
pub fn rotate_coeffs(c: &ShCoefficients, r: &Rotation) -> Result<ShCoefficients> {
    check_degree(c.l_max())?;
    let mut out = c.clone();
    for l in 0..=c.l_max() {
        let d = wigner_d(l, r)?;
        for ch in 0..c.channels() {
            d.apply(c.block(ch, l), out.block_mut(ch, l));
        }
    }
    if c.is_real() {
        out.check_symmetry()?;
    }
    Ok(out)
}

/// Pulls every output pixel back through `R^-1` and samples bilinearly.
pub fn rotate_image(x: &ErpImage, r: &Rotation) -> ErpImage {
    let h = x.height();
    let w = x.width();
    let nc = x.channels();
    let inv = r.inverse();
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut vals = vec![0.0; w * nc];
            let theta = grid::row_theta(row, h);
            for col in 0..w {
                let d = Direction::new(theta, grid::col_phi(col, w));
                let src = Direction::from_unit_vector(inv.apply(d.to_unit_vector()));
                grid::sample_bilinear_into(x, src.theta, src.phi, &mut vals[col * nc..(col + 1) * nc]);
            }
            vals
        })
        .collect();
    let mut out = x.clone();
    for (row, vals) in rows.into_iter().enumerate() {
        let start = out.index(row, 0, 0);
        out.data_mut()[start..start + vals.len()].copy_from_slice(&vals);
    }
    out
}

/// Mean geodesic angle of a Haar-random rotation, `pi/2 + 2/pi`.
pub const HAAR_MEAN_ANGLE: f64 = PI / 2.0 + 2.0 / PI;
