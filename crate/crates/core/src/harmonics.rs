//! Spherical-harmonic analysis and synthesis on the equirectangular grid.
//!
//! Complex orthonormal harmonics with the Condon-Shortley phase:
//! `Y_l^m(theta, phi) = Pbar_l^m(cos theta) e^{i m phi} / sqrt(2 pi)` and
//! `Y_l^{-m} = (-1)^m conj(Y_l^m)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, Direction, ErpImage};

/// Tolerance on conjugate symmetry of real-flagged coefficients.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Largest imaginary residue tolerated when synthesizing a real field.
pub const IMAG_RESIDUE_TOL: f64 = 1e-7;

#[inline]
pub fn lm_index(l: usize, m: i64) -> usize {
    (l * l) as usize + (l as i64 + m) as usize
}

#[inline]
fn tri_index(l: usize, m: usize) -> usize {
    l * (l + 1) / 2 + m
}

/// Banded coefficient blocks `c_l in C^{2l+1}`, `l = 0..=l_max`, per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShCoefficients {
    l_max: usize,
    channels: usize,
    real: bool,
    /// `channels` consecutive runs of `(l_max + 1)^2` values, ordered by
    /// `(l, m)` with `m` ascending.
    data: Vec<Complex64>,
}

impl ShCoefficients {
    pub fn zeros(l_max: usize, channels: usize) -> Self {
        Self {
            l_max,
            channels,
            real: true,
            data: vec![Complex64::new(0.0, 0.0); channels * (l_max + 1) * (l_max + 1)],
        }
    }

    pub fn from_raw(l_max: usize, channels: usize, real: bool, data: Vec<Complex64>) -> Result<Self> {
        let expected = channels * (l_max + 1) * (l_max + 1);
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected: format!("{expected} coefficients"),
                actual: format!("{} coefficients", data.len()),
            });
        }
        if channels == 0 {
            return Err(Error::invalid("coefficients need at least one channel"));
        }
        let c = Self {
            l_max,
            channels,
            real,
            data,
        };
        if real {
            c.check_symmetry()?;
        }
        Ok(c)
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_real(&self) -> bool {
        self.real
    }

    pub fn set_real(&mut self, real: bool) {
        self.real = real;
    }

    pub fn raw(&self) -> &[Complex64] {
        &self.data
    }

    pub fn raw_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    pub fn per_channel(&self) -> usize {
        (self.l_max + 1) * (self.l_max + 1)
    }

    #[inline]
    pub fn get(&self, ch: usize, l: usize, m: i64) -> Complex64 {
        self.data[ch * self.per_channel() + lm_index(l, m)]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, l: usize, m: i64, v: Complex64) {
        let n = self.per_channel();
        self.data[ch * n + lm_index(l, m)] = v;
    }

    /// The `2l+1` block of degree `l` in channel `ch`, `m` ascending.
    pub fn block(&self, ch: usize, l: usize) -> &[Complex64] {
        let start = ch * self.per_channel() + l * l;
        &self.data[start..start + 2 * l + 1]
    }

    pub fn block_mut(&mut self, ch: usize, l: usize) -> &mut [Complex64] {
        let start = ch * self.per_channel() + l * l;
        &mut self.data[start..start + 2 * l + 1]
    }

    /// Largest violation of `c^{-m} = (-1)^m conj(c^m)`.
    pub fn symmetry_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for ch in 0..self.channels {
            for l in 0..=self.l_max {
                for m in 0..=l as i64 {
                    let pos = self.get(ch, l, m);
                    let neg = self.get(ch, l, -m);
                    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                    worst = worst.max((neg - pos.conj() * sign).norm());
                }
            }
        }
        worst
    }

    pub fn check_symmetry(&self) -> Result<()> {
        let residual = self.symmetry_residual();
        let scale = 1.0 + self.norm();
        if residual > SYMMETRY_TOL * scale {
            return Err(Error::SymmetryViolation {
                residual,
                tolerance: SYMMETRY_TOL * scale,
            });
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &ShCoefficients) -> Result<()> {
        if self.l_max != other.l_max || self.channels != other.channels {
            return Err(Error::DimensionMismatch {
                expected: format!("l_max={} channels={}", self.l_max, self.channels),
                actual: format!("l_max={} channels={}", other.l_max, other.channels),
            });
        }
        Ok(())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Real inner product `Re <self, other>` over all coefficients.
    pub fn dot_re(&self, other: &ShCoefficients) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.conj() * b).re)
            .sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &ShCoefficients, s: f64) -> Result<Self> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        out.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b * s);
        out.real = self.real && other.real;
        Ok(out)
    }

    pub fn sub(&self, other: &ShCoefficients) -> Result<Self> {
        self.add_scaled(other, -1.0)
    }

    /// Energy of the degree-`l` blocks summed over channels.
    pub fn degree_energy(&self, l: usize) -> f64 {
        (0..self.channels)
            .map(|ch| self.block(ch, l).iter().map(|v| v.norm_sqr()).sum::<f64>())
            .sum()
    }

    /// Copy with every block outside `degrees` zeroed.
    pub fn restricted_to(&self, degrees: &[usize]) -> Self {
        let mut out = self.clone();
        for ch in 0..self.channels {
            for l in 0..=self.l_max {
                if !degrees.contains(&l) {
                    out.block_mut(ch, l).fill(Complex64::new(0.0, 0.0));
                }
            }
        }
        out
    }

    /// Copy truncated or zero-padded to a new cutoff.
    pub fn with_l_max(&self, l_max: usize) -> Self {
        let mut out = ShCoefficients::zeros(l_max, self.channels);
        out.real = self.real;
        for ch in 0..self.channels {
            for l in 0..=l_max.min(self.l_max) {
                out.block_mut(ch, l).copy_from_slice(self.block(ch, l));
            }
        }
        out
    }
}

/// Per-degree multiplier `g(l)`, `l = 0..=l_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandProfile(pub Vec<f64>);

impl BandProfile {
    pub fn identity(l_max: usize) -> Self {
        Self(vec![1.0; l_max + 1])
    }

    /// Spherical heat-kernel attenuation `g(l) = exp(-sigma^2 l (l + 1))`.
    pub fn heat_kernel(sigma: f64, l_max: usize) -> Self {
        Self(
            (0..=l_max)
                .map(|l| (-sigma * sigma * (l * (l + 1)) as f64).exp())
                .collect(),
        )
    }

    pub fn get(&self, l: usize) -> f64 {
        self.0[l]
    }
}

/// Orthonormal associated Legendre function `Pbar_l^m(x)` including the
/// Condon-Shortley phase, normalized so `int_{-1}^{1} Pbar^2 dx = 1`.
pub fn assoc_legendre_normalized(l: usize, m: usize, x: f64) -> Result<f64> {
    if m > l {
        return Err(Error::invalid(format!("order m={m} exceeds degree l={l}")));
    }
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::invalid(format!("x={x} outside [-1, 1]")));
    }
    Ok(legendre_table(l, x)[tri_index(l, m)])
}

/// All `Pbar_l^m(x)` for `0 <= m <= l <= l_max`, indexed `l(l+1)/2 + m`.
///
/// Diagonal seeds `Pbar_m^m` first, then the upward three-term recurrence in
/// `l` at fixed `m`.
pub fn legendre_table(l_max: usize, x: f64) -> Vec<f64> {
    let mut p = vec![0.0; tri_index(l_max, l_max) + 1];
    let s = (1.0 - x * x).max(0.0).sqrt();
    p[0] = 1.0 / 2f64.sqrt();
    for m in 1..=l_max {
        let prev = p[tri_index(m - 1, m - 1)];
        p[tri_index(m, m)] = -((2 * m + 1) as f64 / (2 * m) as f64).sqrt() * s * prev;
    }
    for m in 0..l_max {
        let pmm = p[tri_index(m, m)];
        p[tri_index(m + 1, m)] = x * ((2 * m + 3) as f64).sqrt() * pmm;
        for l in (m + 2)..=l_max {
            let lf = l as f64;
            let mf = m as f64;
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0)).sqrt();
            p[tri_index(l, m)] = a * (x * p[tri_index(l - 1, m)] - b * p[tri_index(l - 2, m)]);
        }
    }
    p
}

pub fn sh_eval(l: usize, m: i64, d: Direction) -> Result<Complex64> {
    if m.unsigned_abs() as usize > l {
        return Err(Error::invalid(format!("|m|={} exceeds l={l}", m.abs())));
    }
    let ma = m.unsigned_abs() as usize;
    let p = assoc_legendre_normalized(l, ma, d.theta.cos())?;
    let y = Complex64::from_polar(p / (2.0 * PI).sqrt(), ma as f64 * d.phi);
    if m >= 0 {
        Ok(y)
    } else if ma % 2 == 0 {
        Ok(y.conj())
    } else {
        Ok(-y.conj())
    }
}

/// `c_l^m = sum_pixels w x conj(Y_l^m)` per channel.
///
/// Separable evaluation: a longitude Fourier sum per row, then the
/// Legendre-weighted latitude sum. Negative orders follow from symmetry.
pub fn forward_sht(x: &ErpImage, l_max: usize) -> ShCoefficients {
    let h = x.height();
    let w = x.width();
    let nc = x.channels();
    let quad = grid::quadrature_weights(h).expect("ErpImage height >= 2");
    let nm = l_max + 1;
    let twiddle = phase_table(w, l_max, -1.0);
    let norm = 1.0 / (2.0 * PI).sqrt();

    // Per-row contributions, reduced afterwards so the sum order is fixed.
    let rows: Vec<Vec<Complex64>> = (0..h)
        .into_par_iter()
        .map(|r| {
            let mut fm = vec![Complex64::new(0.0, 0.0); nc * nm];
            for c in 0..w {
                for m in 0..nm {
                    let t = twiddle[c * nm + m];
                    for ch in 0..nc {
                        fm[ch * nm + m] += t * x.get(r, c, ch);
                    }
                }
            }
            let p = legendre_table(l_max, grid::row_theta(r, h).cos());
            let wr = quad.row(r) * norm;
            let per = tri_index(l_max, l_max) + 1;
            let mut out = vec![Complex64::new(0.0, 0.0); nc * per];
            for ch in 0..nc {
                for l in 0..=l_max {
                    for m in 0..=l {
                        out[ch * per + tri_index(l, m)] = fm[ch * nm + m] * (wr * p[tri_index(l, m)]);
                    }
                }
            }
            out
        })
        .collect();

    let per = tri_index(l_max, l_max) + 1;
    let mut acc = vec![Complex64::new(0.0, 0.0); nc * per];
    for row in rows {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let mut coeffs = ShCoefficients::zeros(l_max, nc);
    for ch in 0..nc {
        for l in 0..=l_max {
            for m in 0..=l {
                let v = acc[ch * per + tri_index(l, m)];
                coeffs.set(ch, l, m as i64, v);
                if m > 0 {
                    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                    coeffs.set(ch, l, -(m as i64), v.conj() * sign);
                }
            }
        }
        // m = 0 of a real signal is real
        for l in 0..=l_max {
            let v = coeffs.get(ch, l, 0);
            coeffs.set(ch, l, 0, Complex64::new(v.re, 0.0));
        }
    }
    coeffs
}

/// `e^{sign * i m phi_col}` for every column and `m = 0..=l_max`.
fn phase_table(width: usize, l_max: usize, sign: f64) -> Vec<Complex64> {
    let nm = l_max + 1;
    let mut t = vec![Complex64::new(0.0, 0.0); width * nm];
    for c in 0..width {
        let phi = grid::col_phi(c, width);
        for m in 0..nm {
            t[c * nm + m] = Complex64::from_polar(1.0, sign * m as f64 * phi);
        }
    }
    t
}

/// `f(omega) = sum c_l^m Y_l^m(omega)` at each pixel center.
///
/// The result is an unclamped real field. A symmetry-violating input whose
/// synthesis leaves an imaginary residue above `IMAG_RESIDUE_TOL` is rejected.
pub fn inverse_sht(c: &ShCoefficients, height: usize) -> Result<ErpImage> {
    let l_max = c.l_max();
    let nc = c.channels();
    let mut out = ErpImage::new(height, nc)?;
    let w = out.width();
    let nm = 2 * l_max + 1;
    let norm = 1.0 / (2.0 * PI).sqrt();
    let phases: Vec<Complex64> = (0..w)
        .flat_map(|col| {
            let phi = grid::col_phi(col, w);
            (0..nm).map(move |k| Complex64::from_polar(1.0, (k as f64 - l_max as f64) * phi))
        })
        .collect();

    let rows: Vec<(Vec<f64>, f64)> = (0..height)
        .into_par_iter()
        .map(|r| {
            let p = legendre_table(l_max, grid::row_theta(r, height).cos());
            // g[ch][m + l_max] = sum_l c_l^m Pbar_l^{|m|} (with the -m sign)
            let mut g = vec![Complex64::new(0.0, 0.0); nc * nm];
            for ch in 0..nc {
                for l in 0..=l_max {
                    for m in -(l as i64)..=(l as i64) {
                        let ma = m.unsigned_abs() as usize;
                        let mut pv = p[tri_index(l, ma)];
                        if m < 0 && ma % 2 == 1 {
                            pv = -pv;
                        }
                        g[ch * nm + (m + l_max as i64) as usize] += c.get(ch, l, m) * pv;
                    }
                }
            }
            let mut vals = vec![0.0; w * nc];
            let mut worst: f64 = 0.0;
            for col in 0..w {
                for ch in 0..nc {
                    let mut s = Complex64::new(0.0, 0.0);
                    for k in 0..nm {
                        s += g[ch * nm + k] * phases[col * nm + k];
                    }
                    s *= norm;
                    worst = worst.max(s.im.abs());
                    vals[col * nc + ch] = s.re;
                }
            }
            (vals, worst)
        })
        .collect();

    let mut worst: f64 = 0.0;
    for (r, (vals, im)) in rows.into_iter().enumerate() {
        worst = worst.max(im);
        let start = out.index(r, 0, 0);
        out.data_mut()[start..start + vals.len()].copy_from_slice(&vals);
    }
    if c.is_real() && worst > IMAG_RESIDUE_TOL * (1.0 + c.norm()) {
        return Err(Error::SymmetryViolation {
            residual: worst,
            tolerance: IMAG_RESIDUE_TOL,
        });
    }
    Ok(out)
}

/// `P(l) = sum_m |c_l^m|^2`, summed over channels.
pub fn power_spectrum(c: &ShCoefficients) -> Vec<f64> {
    (0..=c.l_max()).map(|l| c.degree_energy(l)).collect()
}

pub fn apply_band_profile(c: &ShCoefficients, g: &BandProfile) -> Result<ShCoefficients> {
    if g.0.len() < c.l_max() + 1 {
        return Err(Error::DimensionMismatch {
            expected: format!("profile covering 0..={}", c.l_max()),
            actual: format!("{} entries", g.0.len()),
        });
    }
    let mut out = c.clone();
    for ch in 0..c.channels() {
        for l in 0..=c.l_max() {
            let s = g.get(l);
            out.block_mut(ch, l).iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(out)
}

/// Zeroes every block above `l_c`.
pub fn low_pass(c: &ShCoefficients, l_c: usize) -> Result<ShCoefficients> {
    if l_c > c.l_max() {
        return Err(Error::invalid(format!("cutoff {l_c} exceeds l_max {}", c.l_max())));
    }
    let mut out = c.clone();
    for ch in 0..c.channels() {
        for l in (l_c + 1)..=c.l_max() {
            out.block_mut(ch, l).fill(Complex64::new(0.0, 0.0));
        }
    }
    Ok(out)
}

/// Gaussian coefficients with standard deviation `(1 + l)^{-decay}`,
/// conjugate-symmetric so the synthesized field is real.
pub fn synth_random_bandlimited(l_max: usize, channels: usize, seed: u64, decay: f64) -> Result<ShCoefficients> {
    if !(decay > 0.0) {
        return Err(Error::invalid(format!("decay must be positive, got {decay}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = ShCoefficients::zeros(l_max, channels);
    for ch in 0..channels {
        for l in 0..=l_max {
            let sd = (1.0 + l as f64).powf(-decay);
            let g: f64 = StandardNormal.sample(&mut rng);
            c.set(ch, l, 0, Complex64::new(sd * g, 0.0));
            for m in 1..=l as i64 {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                let v = Complex64::new(re, im) * (sd / 2f64.sqrt());
                c.set(ch, l, m, v);
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                c.set(ch, l, -m, v.conj() * sign);
            }
        }
    }
    Ok(c)
}
