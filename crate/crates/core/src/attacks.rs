//! Distortion models applied to watermarked panoramas.
//!
//! Attack strings follow `kind[:param=value,...]`. Multi-valued parameters
//! continue after commas until the next `name=`, and `mixed` takes a
//! bracketed, `;`-separated list:
//!
//! ```text
//! rotate:q=0.92,0.3,0.2,0.1      rotate:zyz=0.1,0.5,0.2
//! rotate:axis=0,0,1,angle=1.5    rotate:seed=4 (Haar-random)
//! blur:sigma=3,k=7               heat:sigma=0.05
//! noise:std=0.05,seed=7          lowpass:lc=8
//! resize:scale=0.5               brightness:f=1.2
//! contrast:f=0.8                 jpeg:q=60
//! identity                       mixed:[blur:sigma=3;resize:scale=0.5;noise:std=0.05]
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{quadrature_weights, resize_bilinear, ErpImage};
use crate::harmonics::{apply_band_profile, forward_sht, inverse_sht, low_pass, BandProfile};
use crate::so3::{random_rotation, rotate_image, Rotation};

pub const DEFAULT_BLUR_SIGMA: f64 = 3.0;
pub const DEFAULT_BLUR_KERNEL: usize = 7;
/// Band limit of the spectral attacks when none is given.
pub const DEFAULT_ATTACK_L_MAX: usize = 16;

pub fn attack_rotate(x: &ErpImage, r: &Rotation) -> ErpImage {
    rotate_image(x, r)
}

/// Heat-kernel blur `g(l) = exp(-sigma^2 l (l + 1))` applied to the band-limited
/// part of `x`; content above `l_max` is discarded.
pub fn attack_blur_spectral(x: &ErpImage, sigma: f64, l_max: usize) -> Result<ErpImage> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("blur sigma must be >= 0, got {sigma}")));
    }
    let c = forward_sht(x, l_max);
    let c = apply_band_profile(&c, &BandProfile::heat_kernel(sigma, l_max))?;
    Ok(inverse_sht(&c, x.height())?.clamped())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<Vec<f64>> {
    if size % 2 == 0 {
        return Err(Error::invalid(format!("kernel size must be odd, got {size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("blur sigma must be > 0, got {sigma}")));
    }
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / s).collect())
}

/// Separable Gaussian on the ERP raster, wrapping in longitude and clamping
/// in latitude.
pub fn attack_blur_spatial(x: &ErpImage, sigma_px: f64, kernel_size: usize) -> Result<ErpImage> {
    let taps = gaussian_kernel(sigma_px, kernel_size)?;
    let h = x.height();
    let w = x.width();
    let nc = x.channels();
    let r = (kernel_size / 2) as isize;
    let mut tmp = x.clone();
    for row in 0..h {
        for col in 0..w {
            for ch in 0..nc {
                let v: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let c = (col as isize + i as isize - r).rem_euclid(w as isize) as usize;
                        t * x.get(row, c, ch)
                    })
                    .sum();
                tmp.set(row, col, ch, v);
            }
        }
    }
    let mut out = tmp.clone();
    for row in 0..h {
        for col in 0..w {
            for ch in 0..nc {
                let v: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let rr = (row as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                        t * tmp.get(rr, col, ch)
                    })
                    .sum();
                out.set(row, col, ch, v);
            }
        }
    }
    Ok(out.clamped())
}

/// Heat-kernel parameter whose attenuation matches the planar blur
/// `(sigma_px, kernel_size)` at height `h`.
///
/// The truncated kernel's own variance `v` (in pixels squared) is used, not
/// `sigma_px^2`. A pixel spans `pi / H` in colatitude and `pi / H * sin(theta)`
/// of arc in longitude, so the planar kernel is anisotropic on the sphere.
/// Averaging the per-axis angular variance over the sphere (`E[sin^2] = 2/3`)
/// gives an isotropic angular variance `s^2 = v (pi / H)^2 * 5/6`, and a
/// Gaussian of angular variance `s^2` attenuates degree `l` by about
/// `exp(-s^2 l (l + 1) / 2)`.
pub fn matched_heat_sigma(sigma_px: f64, kernel_size: usize, h: usize) -> Result<f64> {
    let taps = gaussian_kernel(sigma_px, kernel_size)?;
    let r = (kernel_size / 2) as f64;
    let v: f64 = taps.iter().enumerate().map(|(i, t)| t * (i as f64 - r).powi(2)).sum();
    let s2 = v * (PI / h as f64).powi(2) * 5.0 / 6.0;
    Ok((s2 / 2.0).sqrt())
}

pub fn attack_noise(x: &ErpImage, std: f64, seed: u64) -> Result<ErpImage> {
    if !(std >= 0.0) {
        return Err(Error::invalid(format!("noise std must be >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    Ok(out.clamped())
}

pub fn attack_lowpass(x: &ErpImage, l_c: usize, l_max: usize) -> Result<ErpImage> {
    let c = low_pass(&forward_sht(x, l_max), l_c)?;
    Ok(inverse_sht(&c, x.height())?.clamped())
}

/// Bilinear down to `floor(scale H)` rows and back up.
pub fn attack_resize(x: &ErpImage, scale: f64) -> Result<ErpImage> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::invalid(format!("resize scale must be in (0, 1], got {scale}")));
    }
    let small = ((scale * x.height() as f64).floor() as usize).max(2);
    if small == x.height() {
        return Ok(x.clone());
    }
    Ok(resize_bilinear(&resize_bilinear(x, small)?, x.height())?.clamped())
}

fn check_factor(factor: f64) -> Result<()> {
    if !(0.5..=1.5).contains(&factor) {
        return Err(Error::invalid(format!("factor must be in [0.5, 1.5], got {factor}")));
    }
    Ok(())
}

pub fn attack_brightness(x: &ErpImage, factor: f64) -> Result<ErpImage> {
    check_factor(factor)?;
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v *= factor);
    Ok(out.clamped())
}

/// `mean + factor (x - mean)` with the per-channel mean taken over the
/// sphere's area measure.
pub fn attack_contrast(x: &ErpImage, factor: f64) -> Result<ErpImage> {
    check_factor(factor)?;
    let means = spherical_mean(x)?;
    let nc = x.channels();
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(nc) {
        for (v, m) in chunk.iter_mut().zip(&means) {
            *v = m + factor * (*v - m);
        }
    }
    Ok(out.clamped())
}

/// Area-weighted mean of each channel.
pub fn spherical_mean(x: &ErpImage) -> Result<Vec<f64>> {
    let q = quadrature_weights(x.height())?;
    let nc = x.channels();
    let mut sums = vec![0.0; nc];
    for r in 0..x.height() {
        for c in 0..x.width() {
            for (ch, s) in sums.iter_mut().enumerate() {
                *s += q.row(r) * x.get(r, c, ch);
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / q.total()).collect())
}

/// Standard JPEG luminance quantization table (quality 50), row-major.
pub const JPEG_LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance table scaled by the usual quality law, entries in `[1, 255]`.
pub fn jpeg_quant_table(quality: u32) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid(format!("JPEG quality must be in 1..=100, got {quality}")));
    }
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality };
    let mut out = [0.0; 64];
    for (o, &t) in out.iter_mut().zip(&JPEG_LUMA_TABLE) {
        *o = ((t as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(out)
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = cu * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
        }
    }
    b
}

/// Blockwise 8x8 DCT quantization per channel on the 0..255 scale, with
/// edge replication for partial blocks. No entropy coding or chroma
/// subsampling.
pub fn attack_jpeg_approx(x: &ErpImage, quality: u32) -> Result<ErpImage> {
    let q = jpeg_quant_table(quality)?;
    let b = dct_basis();
    let h = x.height();
    let w = x.width();
    let nc = x.channels();
    let mut out = x.clone();
    for ch in 0..nc {
        for br in (0..h).step_by(8) {
            for bc in (0..w).step_by(8) {
                let mut block = [[0.0; 8]; 8];
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let r = (br + i).min(h - 1);
                        let c = (bc + j).min(w - 1);
                        *v = x.get(r, c, ch) * 255.0 - 128.0;
                    }
                }
                let mut coef = [[0.0; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for i in 0..8 {
                            for j in 0..8 {
                                s += b[u][i] * b[v][j] * block[i][j];
                            }
                        }
                        let qq = q[u * 8 + v];
                        coef[u][v] = (s / qq).round() * qq;
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let (r, c) = (br + i, bc + j);
                        if r >= h || c >= w {
                            continue;
                        }
                        let mut s = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                s += b[u][i] * b[v][j] * coef[u][v];
                            }
                        }
                        out.set(r, c, ch, (s + 128.0) / 255.0);
                    }
                }
            }
        }
    }
    Ok(out.clamped())
}

/// A parsed distortion.
#[derive(Debug, Clone, PartialEq)]
pub enum Distortion {
    Identity,
    Rotate(RotationSpec),
    BlurSpectral { sigma: f64, l_max: usize },
    BlurSpatial { sigma: f64, kernel: usize },
    Noise { std: f64, seed: Option<u64> },
    Lowpass { l_c: usize, l_max: usize },
    Resize { scale: f64 },
    Brightness { factor: f64 },
    Contrast { factor: f64 },
    Jpeg { quality: u32 },
    Mixed(Vec<Distortion>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RotationSpec {
    Fixed(Rotation),
    /// Haar-random rotation drawn from a seed.
    Random(Option<u64>),
}

/// Seed for the `index`-th stochastic step of a composite attack.
fn derive_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl Distortion {
    /// Applies the distortion. Steps without their own seed draw one from
    /// `seed`.
    pub fn apply(&self, x: &ErpImage, seed: u64) -> Result<ErpImage> {
        match self {
            Distortion::Identity => Ok(x.clone()),
            Distortion::Rotate(RotationSpec::Fixed(r)) => Ok(attack_rotate(x, r)),
            Distortion::Rotate(RotationSpec::Random(s)) => Ok(attack_rotate(x, &random_rotation(s.unwrap_or(seed)))),
            Distortion::BlurSpectral { sigma, l_max } => attack_blur_spectral(x, *sigma, *l_max),
            Distortion::BlurSpatial { sigma, kernel } => attack_blur_spatial(x, *sigma, *kernel),
            Distortion::Noise { std, seed: s } => attack_noise(x, *std, s.unwrap_or(seed)),
            Distortion::Lowpass { l_c, l_max } => attack_lowpass(x, *l_c, *l_max),
            Distortion::Resize { scale } => attack_resize(x, *scale),
            Distortion::Brightness { factor } => attack_brightness(x, *factor),
            Distortion::Contrast { factor } => attack_contrast(x, *factor),
            Distortion::Jpeg { quality } => attack_jpeg_approx(x, *quality),
            Distortion::Mixed(steps) => attack_mixed(x, steps, seed),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Distortion::Identity => "identity",
            Distortion::Rotate(_) => "rotate",
            Distortion::BlurSpectral { .. } => "heat",
            Distortion::BlurSpatial { .. } => "blur",
            Distortion::Noise { .. } => "noise",
            Distortion::Lowpass { .. } => "lowpass",
            Distortion::Resize { .. } => "resize",
            Distortion::Brightness { .. } => "brightness",
            Distortion::Contrast { .. } => "contrast",
            Distortion::Jpeg { .. } => "jpeg",
            Distortion::Mixed(_) => "mixed",
        }
    }
}

pub fn attack_mixed(x: &ErpImage, steps: &[Distortion], seed: u64) -> Result<ErpImage> {
    if steps.is_empty() {
        return Err(Error::invalid("mixed attack needs at least one step"));
    }
    let mut y = x.clone();
    for (i, step) in steps.iter().enumerate() {
        y = step.apply(&y, derive_seed(seed, i))?;
    }
    Ok(y)
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distortion::Identity => write!(f, "identity"),
            Distortion::Rotate(RotationSpec::Fixed(r)) => {
                let q = r.quaternion();
                write!(f, "rotate:q={},{},{},{}", q[0], q[1], q[2], q[3])
            }
            Distortion::Rotate(RotationSpec::Random(None)) => write!(f, "rotate:random"),
            Distortion::Rotate(RotationSpec::Random(Some(s))) => write!(f, "rotate:seed={s}"),
            Distortion::BlurSpectral { sigma, l_max } => write!(f, "heat:sigma={sigma},lmax={l_max}"),
            Distortion::BlurSpatial { sigma, kernel } => write!(f, "blur:sigma={sigma},k={kernel}"),
            Distortion::Noise { std, seed: None } => write!(f, "noise:std={std}"),
            Distortion::Noise { std, seed: Some(s) } => write!(f, "noise:std={std},seed={s}"),
            Distortion::Lowpass { l_c, l_max } => write!(f, "lowpass:lc={l_c},lmax={l_max}"),
            Distortion::Resize { scale } => write!(f, "resize:scale={scale}"),
            Distortion::Brightness { factor } => write!(f, "brightness:f={factor}"),
            Distortion::Contrast { factor } => write!(f, "contrast:f={factor}"),
            Distortion::Jpeg { quality } => write!(f, "jpeg:q={quality}"),
            Distortion::Mixed(steps) => {
                write!(f, "mixed:[")?;
                for (i, s) in steps.iter().enumerate() {
                    if i > 0 {
                        write!(f, ";")?;
                    }
                    write!(f, "{s}")?;
                }
                write!(f, "]")
            }
        }
    }
}

impl FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_spec(s, 0)
    }
}

fn perr(position: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        position,
        message: message.into(),
    }
}

/// Parameter values keyed by name, with the offset of each name.
struct Params {
    items: Vec<(String, Vec<(String, usize)>, usize)>,
    end: usize,
}

impl Params {
    fn parse(body: &str, offset: usize) -> Result<Self> {
        let mut items: Vec<(String, Vec<(String, usize)>, usize)> = Vec::new();
        let mut pos = offset;
        for token in body.split(',') {
            let t = token.trim();
            let lead = token.len() - token.trim_start().len();
            if t.is_empty() {
                return Err(perr(pos, "empty parameter"));
            }
            if let Some((name, value)) = t.split_once('=') {
                let name = name.trim();
                if name.is_empty() {
                    return Err(perr(pos + lead, "missing parameter name"));
                }
                if items.iter().any(|(n, ..)| n == name) {
                    return Err(perr(pos + lead, format!("duplicate parameter '{name}'")));
                }
                let vpos = pos + lead + t.find('=').unwrap_or(0) + 1;
                items.push((name.to_string(), vec![(value.trim().to_string(), vpos)], pos + lead));
            } else if let Some(last) = items.last_mut() {
                last.1.push((t.to_string(), pos + lead));
            } else {
                items.push((t.to_string(), Vec::new(), pos + lead));
            }
            pos += token.len() + 1;
        }
        Ok(Self {
            items,
            end: offset + body.len(),
        })
    }

    fn take(&mut self, name: &str) -> Option<(Vec<(String, usize)>, usize)> {
        let i = self.items.iter().position(|(n, ..)| n == name)?;
        let (_, v, p) = self.items.remove(i);
        Some((v, p))
    }

    fn f64(&mut self, name: &str) -> Result<Option<f64>> {
        match self.take(name) {
            None => Ok(None),
            Some((vals, p)) => {
                if vals.len() != 1 {
                    return Err(perr(p, format!("'{name}' takes one value")));
                }
                let (v, vp) = &vals[0];
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .map(Some)
                    .ok_or_else(|| perr(*vp, format!("'{v}' is not a finite number")))
            }
        }
    }

    fn u64(&mut self, name: &str) -> Result<Option<u64>> {
        match self.take(name) {
            None => Ok(None),
            Some((vals, p)) => {
                if vals.len() != 1 {
                    return Err(perr(p, format!("'{name}' takes one value")));
                }
                let (v, vp) = &vals[0];
                v.parse::<u64>()
                    .map(Some)
                    .map_err(|_| perr(*vp, format!("'{v}' is not a non-negative integer")))
            }
        }
    }

    fn list(&mut self, name: &str, n: usize) -> Result<Option<Vec<f64>>> {
        match self.take(name) {
            None => Ok(None),
            Some((vals, p)) => {
                if vals.len() != n {
                    return Err(perr(p, format!("'{name}' takes {n} values, got {}", vals.len())));
                }
                vals.iter()
                    .map(|(v, vp)| {
                        v.parse::<f64>()
                            .ok()
                            .filter(|x| x.is_finite())
                            .ok_or_else(|| perr(*vp, format!("'{v}' is not a finite number")))
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(Some)
            }
        }
    }

    fn flag(&mut self, name: &str) -> bool {
        self.take(name).is_some()
    }

    fn finish(self) -> Result<()> {
        match self.items.first() {
            Some((n, _, p)) => Err(perr(*p, format!("unknown parameter '{n}'"))),
            None => Ok(()),
        }
    }
}

fn parse_spec(s: &str, offset: usize) -> Result<Distortion> {
    let lead = s.len() - s.trim_start().len();
    let s = s.trim();
    let offset = offset + lead;
    if s.is_empty() {
        return Err(perr(offset, "empty attack spec"));
    }
    let (kind, body, body_off) = match s.find(':') {
        Some(i) => (&s[..i], &s[i + 1..], offset + i + 1),
        None => (s, "", offset + s.len()),
    };
    if kind == "mixed" {
        return parse_mixed(body, body_off);
    }
    let mut p = if body.is_empty() {
        Params {
            items: Vec::new(),
            end: body_off,
        }
    } else {
        Params::parse(body, body_off)?
    };
    let at_end = p.end;
    let d = match kind {
        "identity" | "none" => Distortion::Identity,
        "rotate" => {
            let spec = if let Some(q) = p.list("q", 4)? {
                RotationSpec::Fixed(Rotation::from_quaternion(q[0], q[1], q[2], q[3]).map_err(|e| perr(body_off, e.to_string()))?)
            } else if let Some(a) = p.list("zyz", 3)? {
                RotationSpec::Fixed(Rotation::from_euler_zyz(a[0], a[1], a[2]))
            } else if let Some(axis) = p.list("axis", 3)? {
                let angle = p.f64("angle")?.ok_or_else(|| perr(at_end, "axis rotation needs angle="))?;
                RotationSpec::Fixed(Rotation::from_axis_angle([axis[0], axis[1], axis[2]], angle).map_err(|e| perr(body_off, e.to_string()))?)
            } else if let Some(seed) = p.u64("seed")? {
                RotationSpec::Random(Some(seed))
            } else if p.flag("random") {
                RotationSpec::Random(None)
            } else {
                return Err(perr(at_end, "rotate needs q=, zyz=, axis=..,angle=, seed= or random"));
            };
            Distortion::Rotate(spec)
        }
        "blur" => {
            let sigma = p.f64("sigma")?.unwrap_or(DEFAULT_BLUR_SIGMA);
            let kernel = p.u64("k")?.unwrap_or(DEFAULT_BLUR_KERNEL as u64) as usize;
            if kernel % 2 == 0 {
                return Err(perr(body_off, format!("kernel size must be odd, got {kernel}")));
            }
            if !(sigma > 0.0) {
                return Err(perr(body_off, "blur sigma must be > 0"));
            }
            Distortion::BlurSpatial { sigma, kernel }
        }
        "heat" => {
            let sigma = p.f64("sigma")?.ok_or_else(|| perr(at_end, "heat needs sigma="))?;
            if sigma < 0.0 {
                return Err(perr(body_off, "heat sigma must be >= 0"));
            }
            let l_max = p.u64("lmax")?.unwrap_or(DEFAULT_ATTACK_L_MAX as u64) as usize;
            Distortion::BlurSpectral { sigma, l_max }
        }
        "noise" => {
            let std = p.f64("std")?.ok_or_else(|| perr(at_end, "noise needs std="))?;
            if std < 0.0 {
                return Err(perr(body_off, "noise std must be >= 0"));
            }
            Distortion::Noise { std, seed: p.u64("seed")? }
        }
        "lowpass" => {
            let l_max = p.u64("lmax")?.unwrap_or(DEFAULT_ATTACK_L_MAX as u64) as usize;
            let l_c = p.u64("lc")?.ok_or_else(|| perr(at_end, "lowpass needs lc="))? as usize;
            if l_c > l_max {
                return Err(perr(body_off, format!("lc {l_c} exceeds lmax {l_max}")));
            }
            Distortion::Lowpass { l_c, l_max }
        }
        "resize" => {
            let scale = p.f64("scale")?.ok_or_else(|| perr(at_end, "resize needs scale="))?;
            if !(scale > 0.0 && scale <= 1.0) {
                return Err(perr(body_off, "resize scale must be in (0, 1]"));
            }
            Distortion::Resize { scale }
        }
        "brightness" | "contrast" => {
            let factor = p.f64("f")?.ok_or_else(|| perr(at_end, format!("{kind} needs f=")))?;
            if !(0.5..=1.5).contains(&factor) {
                return Err(perr(body_off, "factor must be in [0.5, 1.5]"));
            }
            if kind == "brightness" {
                Distortion::Brightness { factor }
            } else {
                Distortion::Contrast { factor }
            }
        }
        "jpeg" => {
            let quality = p.u64("q")?.ok_or_else(|| perr(at_end, "jpeg needs q="))?;
            if !(1..=100).contains(&quality) {
                return Err(perr(body_off, "jpeg quality must be in 1..=100"));
            }
            Distortion::Jpeg { quality: quality as u32 }
        }
        other => return Err(perr(offset, format!("unknown attack kind '{other}'"))),
    };
    p.finish()?;
    Ok(d)
}

fn parse_mixed(body: &str, offset: usize) -> Result<Distortion> {
    let inner = body
        .strip_prefix('[')
        .ok_or_else(|| perr(offset, "mixed expects '[' after ':'"))?;
    let inner = inner
        .strip_suffix(']')
        .ok_or_else(|| perr(offset + body.len(), "mixed list is missing its closing ']'"))?;
    let mut steps = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    let bytes = inner.as_bytes();
    for i in 0..=bytes.len() {
        let end = i == bytes.len();
        if !end {
            match bytes[i] {
                b'[' => depth += 1,
                b']' => depth = depth.saturating_sub(1),
                _ => {}
            }
        }
        if end || (bytes[i] == b';' && depth == 0) {
            steps.push(parse_spec(&inner[start..i], offset + 1 + start)?);
            start = i + 1;
        }
    }
    Ok(Distortion::Mixed(steps))
}
