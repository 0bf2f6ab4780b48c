//! Equirectangular sampling geometry.
//!
//! Pixel `(row, col)` of an `H x 2H` raster sits at the cell center
//! `theta = pi (row + 0.5) / H`, `phi = 2 pi (col + 0.5) / 2H`. Rows run from
//! the north pole (`theta = 0`) to the south pole.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Equirectangular raster of a spherical signal, `W = 2H`.
///
/// Samples are stored row-major with interleaved channels. Watermarked and
/// attacked images are clamped to `[0, 1]`; intermediate real fields (ISHT
/// output, residuals) may hold any finite value.
#[derive(Debug, Clone, PartialEq)]
pub struct ErpImage {
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ErpImage {
    pub fn new(height: usize, channels: usize) -> Result<Self> {
        Self::validate_shape(height, channels)?;
        Ok(Self {
            height,
            channels,
            data: vec![0.0; height * 2 * height * channels],
        })
    }

    pub fn filled(height: usize, channels: usize, value: f64) -> Result<Self> {
        let mut img = Self::new(height, channels)?;
        img.data.fill(value);
        Ok(img)
    }

    pub fn from_vec(height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::validate_shape(height, channels)?;
        let expected = height * 2 * height * channels;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected: format!("{expected} samples"),
                actual: format!("{} samples", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image samples must be finite"));
        }
        Ok(Self {
            height,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(row, col, channel)` at every sample.
    pub fn from_fn(
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut img = Self::new(height, channels)?;
        let w = img.width();
        for r in 0..height {
            for c in 0..w {
                for ch in 0..channels {
                    let idx = img.index(r, c, ch);
                    img.data[idx] = f(r, c, ch);
                }
            }
        }
        Ok(img)
    }

    fn validate_shape(height: usize, channels: usize) -> Result<()> {
        if height < 2 {
            return Err(Error::invalid(format!("image height must be >= 2, got {height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("channels must be 1 or 3, got {channels}")));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        2 * self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width() + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let idx = self.index(row, col, ch);
        self.data[idx] = value;
    }

    pub fn same_shape(&self, other: &ErpImage) -> bool {
        self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn check_same_shape(&self, other: &ErpImage) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: format!("{}x{}x{}", self.height, self.width(), self.channels),
                actual: format!("{}x{}x{}", other.height, other.width(), other.channels),
            })
        }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn clamped(mut self) -> Self {
        self.clamp_unit();
        self
    }

    /// Channel `ch` as a single-channel image.
    pub fn channel(&self, ch: usize) -> ErpImage {
        let mut out = ErpImage::new(self.height, 1).expect("valid shape");
        for (dst, src) in out.data.iter_mut().zip(self.data.iter().skip(ch).step_by(self.channels)) {
            *dst = *src;
        }
        out
    }

    pub fn max_abs_diff(&self, other: &ErpImage) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A point on the unit sphere in colatitude/longitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    pub theta: f64,
    pub phi: f64,
}

impl Direction {
    /// Normalizes `phi` into `[0, 2pi)` and clamps `theta` into `[0, pi]`.
    pub fn new(theta: f64, phi: f64) -> Self {
        Self {
            theta: theta.clamp(0.0, PI),
            phi: phi.rem_euclid(2.0 * PI),
        }
    }

    pub fn from_unit_vector(v: [f64; 3]) -> Self {
        let theta = v[2].clamp(-1.0, 1.0).acos();
        let phi = v[1].atan2(v[0]);
        Self::new(theta, phi)
    }

    pub fn to_unit_vector(self) -> [f64; 3] {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [st * cp, st * sp, ct]
    }
}

pub fn pixel_center_direction(row: usize, col: usize, height: usize) -> Result<Direction> {
    if height == 0 || row >= height || col >= 2 * height {
        return Err(Error::invalid(format!(
            "pixel ({row}, {col}) outside {height}x{} raster",
            2 * height
        )));
    }
    Ok(Direction {
        theta: row_theta(row, height),
        phi: col_phi(col, 2 * height),
    })
}

#[inline]
pub(crate) fn row_theta(row: usize, height: usize) -> f64 {
    PI * (row as f64 + 0.5) / height as f64
}

#[inline]
pub(crate) fn col_phi(col: usize, width: usize) -> f64 {
    2.0 * PI * (col as f64 + 0.5) / width as f64
}

/// Pixel whose cell contains `d`.
pub fn nearest_pixel(d: Direction, height: usize) -> (usize, usize) {
    let width = 2 * height;
    let row = ((d.theta / PI * height as f64).floor() as isize).clamp(0, height as isize - 1);
    let col = (d.phi.rem_euclid(2.0 * PI) / (2.0 * PI) * width as f64).floor() as isize;
    (row as usize, col.rem_euclid(width as isize) as usize)
}

/// Per-row quadrature weights for integrating over the sphere.
///
/// The weight of one pixel in row `i` is `weights[i]`; each row holds `2H`
/// pixels, so `sum_i 2H * weights[i] = 4 pi`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureWeights {
    weights: Vec<f64>,
}

impl QuadratureWeights {
    pub fn row(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn rows(&self) -> &[f64] {
        &self.weights
    }

    pub fn height(&self) -> usize {
        self.weights.len()
    }

    /// Sum of weights over every pixel of the raster.
    pub fn total(&self) -> f64 {
        2.0 * self.weights.len() as f64 * self.weights.iter().sum::<f64>()
    }
}

/// Fejer's first rule on the pixel-center colatitudes, times the longitude
/// spacing.
///
/// The nodes `cos(theta_i)` are Chebyshev points, so the rule integrates any
/// polynomial in `cos(theta)` of degree `< H` exactly; products of two
/// harmonics up to `l_max` are covered once `H > 2 l_max`.
pub fn quadrature_weights(height: usize) -> Result<QuadratureWeights> {
    if height < 2 {
        return Err(Error::invalid(format!("quadrature needs H >= 2, got {height}")));
    }
    let n = height as f64;
    let dphi = 2.0 * PI / (2 * height) as f64;
    let weights = (0..height)
        .map(|i| {
            let theta = row_theta(i, height);
            let tail: f64 = (1..=height / 2)
                .map(|j| {
                    let j = j as f64;
                    (2.0 * j * theta).cos() / (4.0 * j * j - 1.0)
                })
                .sum();
            dphi * (2.0 / n) * (1.0 - 2.0 * tail)
        })
        .collect();
    Ok(QuadratureWeights { weights })
}

/// `sin(theta_i)` per row, attenuating the residual towards the poles.
pub fn geometric_mask(height: usize) -> Result<Vec<f64>> {
    if height < 2 {
        return Err(Error::invalid(format!("mask needs H >= 2, got {height}")));
    }
    Ok((0..height).map(|i| row_theta(i, height).sin()).collect())
}

/// Gradient-magnitude texture mask in `[floor, 1]`, one value per pixel.
///
/// `m = floor + (1 - floor) * tanh(2 g / mean(g))` where `g` is the
/// channel-averaged central-difference gradient magnitude. Longitude wraps;
/// the first and last rows use one-sided differences.
pub fn texture_mask(x: &ErpImage, floor: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&floor) {
        return Err(Error::invalid(format!("mask floor must be in [0, 1], got {floor}")));
    }
    let h = x.height();
    let w = x.width();
    let nc = x.channels();
    let mut grad = vec![0.0; h * w];
    for r in 0..h {
        let (up, down, rspan) = match r {
            0 => (0, 1, 1.0),
            _ if r == h - 1 => (h - 2, h - 1, 1.0),
            _ => (r - 1, r + 1, 2.0),
        };
        for c in 0..w {
            let left = (c + w - 1) % w;
            let right = (c + 1) % w;
            let mut g = 0.0;
            for ch in 0..nc {
                let gx = (x.get(r, right, ch) - x.get(r, left, ch)) / 2.0;
                let gy = (x.get(down, c, ch) - x.get(up, c, ch)) / rspan;
                g += (gx * gx + gy * gy).sqrt();
            }
            grad[r * w + c] = g / nc as f64;
        }
    }
    let mean = grad.iter().sum::<f64>() / grad.len() as f64;
    if mean <= f64::EPSILON {
        return Ok(vec![floor; h * w]);
    }
    Ok(grad
        .into_iter()
        .map(|g| floor + (1.0 - floor) * (2.0 * g / mean).tanh())
        .collect())
}

/// Bilinear interpolation at `d`, one value per channel.
///
/// Longitude wraps modulo `W`; latitude clamps to the first and last row
/// centers, so nothing is interpolated across a pole.
pub fn sample_bilinear(x: &ErpImage, d: Direction) -> Vec<f64> {
    let mut out = vec![0.0; x.channels()];
    sample_bilinear_into(x, d.theta, d.phi, &mut out);
    out
}

pub(crate) fn sample_bilinear_into(x: &ErpImage, theta: f64, phi: f64, out: &mut [f64]) {
    let h = x.height();
    let w = x.width();
    let rf = (theta / PI * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let cf = (phi / (2.0 * PI) * w as f64 - 0.5).rem_euclid(w as f64);
    let r0 = (rf.floor() as usize).min(h - 1);
    let r1 = (r0 + 1).min(h - 1);
    let fr = rf - r0 as f64;
    let c0 = (cf.floor() as usize) % w;
    let c1 = (c0 + 1) % w;
    let fc = cf - cf.floor();
    for (ch, o) in out.iter_mut().enumerate() {
        let top = x.get(r0, c0, ch) * (1.0 - fc) + x.get(r0, c1, ch) * fc;
        let bottom = x.get(r1, c0, ch) * (1.0 - fc) + x.get(r1, c1, ch) * fc;
        *o = top * (1.0 - fr) + bottom * fr;
    }
}

/// Resamples to a `new_height x 2 new_height` raster by bilinear lookup at
/// the target pixel centers.
pub fn resize_bilinear(x: &ErpImage, new_height: usize) -> Result<ErpImage> {
    if new_height == x.height() {
        return Ok(x.clone());
    }
    let mut out = ErpImage::new(new_height, x.channels())?;
    let w = out.width();
    let nc = x.channels();
    let mut px = vec![0.0; nc];
    for r in 0..new_height {
        let theta = row_theta(r, new_height);
        for c in 0..w {
            sample_bilinear_into(x, theta, col_phi(c, w), &mut px);
            for (ch, v) in px.iter().enumerate() {
                out.set(r, c, ch, *v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_center_formula() {
        let d = pixel_center_direction(0, 0, 2).unwrap();
        assert!((d.theta - PI / 4.0).abs() < 1e-15);
        assert!((d.phi - PI / 4.0).abs() < 1e-15);
        let h = 10;
        let d = pixel_center_direction(h - 1, 0, h).unwrap();
        assert!((d.theta - PI * (1.0 - 1.0 / (2.0 * h as f64))).abs() < 1e-14);
    }

    #[test]
    fn pixel_center_rejects_out_of_range() {
        assert!(pixel_center_direction(4, 0, 4).is_err());
        assert!(pixel_center_direction(0, 8, 4).is_err());
    }

    #[test]
    fn nearest_pixel_round_trip() {
        let h = 8;
        for r in 0..h {
            for c in 0..2 * h {
                let d = pixel_center_direction(r, c, h).unwrap();
                assert_eq!(nearest_pixel(d, h), (r, c));
            }
        }
    }

    #[test]
    fn quadrature_total_area() {
        for h in [2, 3, 8, 64] {
            let q = quadrature_weights(h).unwrap();
            assert!((q.total() - 4.0 * PI).abs() < 1e-12 * 4.0 * PI, "H={h}");
            assert!(q.rows().iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn quadrature_y00_normalized() {
        let h = 64;
        let q = quadrature_weights(h).unwrap();
        let y00 = 1.0 / (4.0 * PI).sqrt();
        let s: f64 = q.total() * y00 * y00;
        assert!((s - 1.0).abs() < 1e-8);
    }

    #[test]
    fn geometric_mask_shape() {
        let h = 16;
        let m = geometric_mask(h).unwrap();
        assert!(m[h / 2] >= (PI / 2.0 - PI / (2.0 * h as f64)).sin() - 1e-15);
        assert!((m[0] - (PI / (2.0 * h as f64)).sin()).abs() < 1e-15);
        for i in 0..h {
            assert!(m[i] > 0.0 && m[i] <= 1.0);
            assert!((m[i] - m[h - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn texture_mask_constant_image_is_floor() {
        let img = ErpImage::filled(8, 3, 0.4).unwrap();
        let m = texture_mask(&img, 0.25).unwrap();
        assert!(m.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn texture_mask_checkerboard_is_textured() {
        // 2x2-pixel cells so central differences are nonzero everywhere
        let img = ErpImage::from_fn(16, 1, |r, c, _| (((r / 2) + (c / 2)) % 2) as f64).unwrap();
        let m = texture_mask(&img, 0.2).unwrap();
        let w = img.width();
        for r in 1..15 {
            for c in 0..w {
                assert!(m[r * w + c] >= 0.9, "({r},{c}) -> {}", m[r * w + c]);
            }
        }
        assert!(m.iter().all(|&v| (0.2..=1.0).contains(&v)));
    }

    #[test]
    fn bilinear_identities() {
        let img = ErpImage::from_fn(8, 3, |r, c, ch| (r * 31 + c * 7 + ch) as f64 / 300.0).unwrap();
        for (r, c) in [(0, 0), (3, 5), (7, 15)] {
            let d = pixel_center_direction(r, c, 8).unwrap();
            let v = sample_bilinear(&img, d);
            for ch in 0..3 {
                assert!((v[ch] - img.get(r, c, ch)).abs() < 1e-12);
            }
            let shifted = sample_bilinear(&img, Direction { theta: d.theta, phi: d.phi + 2.0 * PI });
            for ch in 0..3 {
                assert!((shifted[ch] - v[ch]).abs() < 1e-12);
            }
        }
        let flat = ErpImage::filled(8, 1, 0.3).unwrap();
        let v = sample_bilinear(&flat, Direction::new(1.234, 4.321));
        assert!((v[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn bilinear_exact_on_bilinear_field() {
        let h = 16;
        // affine in (row, col) away from the wrap seam and the poles
        let img = ErpImage::from_fn(h, 1, |r, c, _| 0.1 + 0.02 * r as f64 + 0.003 * c as f64).unwrap();
        let d = Direction::new(PI * (5.3 + 0.5) / h as f64, 2.0 * PI * (9.6 + 0.5) / (2 * h) as f64);
        let v = sample_bilinear(&img, d)[0];
        assert!((v - (0.1 + 0.02 * 5.3 + 0.003 * 9.6)).abs() < 1e-12);
    }
}
