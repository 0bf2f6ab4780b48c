//! Image quality and robustness metrics.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::Payload;
use crate::coupling::{bispectrum_vector, BispectrumVector, TripletIndex};
use crate::error::{Error, Result};
use crate::grid::ErpImage;
use crate::harmonics::ShCoefficients;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// `10 log10(1 / MSE)` on the unit range, capped at 99 dB.
pub fn psnr(a: &ErpImage, b: &ErpImage) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable filtering over valid positions only.
fn filter_valid(x: &[f64], rows: usize, cols: usize, w: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = w.len();
    let oc = cols - k + 1;
    let or = rows - k + 1;
    let mut tmp = vec![0.0; rows * oc];
    for r in 0..rows {
        for c in 0..oc {
            tmp[r * oc + c] = (0..k).map(|i| w[i] * x[r * cols + c + i]).sum();
        }
    }
    let mut out = vec![0.0; or * oc];
    for r in 0..or {
        for c in 0..oc {
            out[r * oc + c] = (0..k).map(|i| w[i] * tmp[(r + i) * oc + c]).sum();
        }
    }
    (out, or, oc)
}

/// Mean local SSIM with an 11-tap Gaussian window (sigma 1.5), averaged
/// over channels. Windows do not wrap and are not area-weighted.
pub fn ssim(a: &ErpImage, b: &ErpImage) -> Result<f64> {
    a.check_same_shape(b)?;
    let h = a.height();
    let w = a.width();
    if h < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs H >= {SSIM_WINDOW}, got {h}")));
    }
    let win = gaussian_window();
    let nc = a.channels();
    let mut total = 0.0;
    for ch in 0..nc {
        let xa: Vec<f64> = a.data().iter().skip(ch).step_by(nc).copied().collect();
        let xb: Vec<f64> = b.data().iter().skip(ch).step_by(nc).copied().collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let (mu_a, ..) = filter_valid(&xa, h, w, &win);
        let (mu_b, ..) = filter_valid(&xb, h, w, &win);
        let (saa, ..) = filter_valid(&prod(&xa, &xa), h, w, &win);
        let (sbb, ..) = filter_valid(&prod(&xb, &xb), h, w, &win);
        let (sab, ..) = filter_valid(&prod(&xa, &xb), h, w, &win);
        let n = mu_a.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cab = sab[i] - ma * mb;
            acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += acc / n as f64;
    }
    Ok(total / nc as f64)
}

pub fn bit_accuracy(w: &Payload, w_hat: &Payload) -> Result<f64> {
    if w.len() != w_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} bits", w.len()),
            actual: format!("{} bits", w_hat.len()),
        });
    }
    if w.is_empty() {
        return Err(Error::invalid("empty payload"));
    }
    let hits = w.bits.iter().zip(&w_hat.bits).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / w.len() as f64)
}

/// Cosine similarity of the real parts; 0 when either vector is zero.
pub fn bispectrum_cosine(a: &BispectrumVector, b: &BispectrumVector) -> Result<f64> {
    if a.triplets != b.triplets {
        return Err(Error::invalid("bispectrum vectors use different triplet orderings"));
    }
    Ok(cosine(&a.real_parts(), &b.real_parts()))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Share of bispectral energy carried by triplets whose degrees all stay at
/// or below `l_c`.
pub fn retained_energy_ratio(c: &ShCoefficients, l_c: usize, triplets: &[TripletIndex]) -> Result<f64> {
    if l_c > c.l_max() {
        return Err(Error::invalid(format!("cutoff {l_c} exceeds l_max {}", c.l_max())));
    }
    let b = bispectrum_vector(c, triplets)?;
    let total: f64 = b.values.iter().map(|v| v.norm_sqr()).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let kept: f64 = b
        .triplets
        .iter()
        .zip(&b.values)
        .filter(|(t, _)| t.max_degree() <= l_c)
        .map(|(_, v)| v.norm_sqr())
        .sum();
    Ok(kept / total)
}

/// Fit of the mean bispectrum ratio against `sigma^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseBiasFit {
    pub lambda: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub sigmas: Vec<f64>,
    /// `<E[I~], I> / |I|^2` per sigma.
    pub ratios: Vec<f64>,
}

/// Real-field white noise in the coefficient domain: `E|eps_l^m|^2 = sigma^2`.
pub fn coefficient_noise(l_max: usize, channels: usize, sigma: f64, rng: &mut ChaCha8Rng) -> ShCoefficients {
    let mut e = ShCoefficients::zeros(l_max, channels);
    for ch in 0..channels {
        for l in 0..=l_max {
            let g: f64 = StandardNormal.sample(rng);
            e.set(ch, l, 0, Complex64::new(sigma * g, 0.0));
            for m in 1..=l as i64 {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                let v = Complex64::new(re, im) * (sigma / 2f64.sqrt());
                e.set(ch, l, m, v);
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                e.set(ch, l, -m, v.conj() * sign);
            }
        }
    }
    e
}

/// Monte-Carlo estimate of `E[I~] = I (1 + lambda sigma^2)` under additive
/// coefficient noise.
///
/// Unit-variance noise fields are drawn once and scaled by every sigma
/// (common random numbers), in antithetic pairs (`eps`, `-eps`) so the
/// odd-order noise terms cancel within each pair. The ratio at each sigma is
/// the projection of the mean bispectrum onto the clean one, and `lambda`
/// is the least-squares slope against `sigma^2`.
pub fn noise_bias_fit(
    cover: &ShCoefficients,
    sigmas: &[f64],
    trials: usize,
    triplets: &[TripletIndex],
    seed: u64,
) -> Result<NoiseBiasFit> {
    if sigmas.len() < 2 {
        return Err(Error::invalid("noise bias fit needs at least two sigma values"));
    }
    if trials < 2 {
        return Err(Error::invalid("noise bias fit needs at least two trials"));
    }
    if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::invalid("sigma values must be finite and >= 0"));
    }
    let clean = bispectrum_vector(cover, triplets)?.real_parts();
    let nn: f64 = clean.iter().map(|v| v * v).sum();
    if nn.sqrt() < 1e-12 {
        return Err(Error::invalid("clean bispectrum is numerically zero; ratio undefined"));
    }
    let pairs = trials.div_ceil(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = vec![vec![0.0; clean.len()]; sigmas.len()];
    for _ in 0..pairs {
        let unit = coefficient_noise(cover.l_max(), cover.channels(), 1.0, &mut rng);
        for (&sigma, sum) in sigmas.iter().zip(sums.iter_mut()) {
            if sigma == 0.0 {
                continue;
            }
            for s in [sigma, -sigma] {
                let b = bispectrum_vector(&cover.add_scaled(&unit, s)?, triplets)?.real_parts();
                sum.iter_mut().zip(&b).for_each(|(m, v)| *m += v);
            }
        }
    }
    let count = (2 * pairs) as f64;
    let ratios: Vec<f64> = sigmas
        .iter()
        .zip(&sums)
        .map(|(&sigma, sum)| {
            if sigma == 0.0 {
                1.0
            } else {
                sum.iter().zip(&clean).map(|(m, c)| m / count * c).sum::<f64>() / nn
            }
        })
        .collect();
    let xs: Vec<f64> = sigmas.iter().map(|s| s * s).collect();
    let (slope, intercept, r2) = linear_fit(&xs, &ratios);
    Ok(NoiseBiasFit {
        lambda: slope,
        intercept,
        r_squared: r2,
        sigmas: sigmas.to_vec(),
        ratios,
    })
}

/// Ordinary least squares `y = a x + b`; returns `(a, b, R^2)`. A constant
/// `y` is fitted perfectly and reports `R^2 = 1`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let a = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let b = my - a * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(u, v)| (v - (a * u + b)).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (a, b, r2)
}

/// Named scalar results with the configuration that produced them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    /// Metrics that hit a documented cap.
    pub saturated: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub version: String,
}

impl MetricReport {
    pub fn new(config: serde_json::Value, seeds: Vec<u64>) -> Self {
        Self {
            values: BTreeMap::new(),
            saturated: Vec::new(),
            config,
            seeds,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        let name = name.into();
        if name.starts_with("psnr") && value >= PSNR_CAP_DB {
            self.saturated.push(name.clone());
        }
        self.values.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in &self.values {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("sphmark {} report\n", self.version);
        for (k, v) in &self.values {
            let mark = if self.saturated.contains(k) { " (capped)" } else { "" };
            out.push_str(&format!("  {k:<28} {v:.6}{mark}\n"));
        }
        out
    }
}
