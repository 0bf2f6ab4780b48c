//! Benchmark protocols shared by the `invariance` and `bench` commands.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::attacks::Distortion;
use crate::codec::{embed, extract_nonblind, synthetic_cover, CodecConfig, EmbedOutput, Payload};
use crate::coupling::{all_triplets, bispectrum_vector, descriptor_triplets};
use crate::error::{Error, Result};
use crate::grid::ErpImage;
use crate::harmonics::{forward_sht, synth_random_bandlimited};
use crate::metrics::{bispectrum_cosine, bit_accuracy, psnr, ssim};
use crate::so3::{random_axis_rotation, random_rotation, rotate_coeffs};

/// Rotation angles of the default sweep, in radians.
pub const DEFAULT_ANGLES: [f64; 6] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0];

/// One attack per distortion family, at the reference parameters.
pub const DEFAULT_ATTACKS: [&str; 12] = [
    "identity",
    "rotate:random",
    "blur:sigma=3,k=7",
    "noise:std=0.05",
    "lowpass:lc=14",
    "resize:scale=0.5",
    "brightness:f=0.7",
    "brightness:f=1.3",
    "contrast:f=0.7",
    "contrast:f=1.3",
    "jpeg:q=60",
    "mixed:[rotate:random;blur:sigma=3,k=7;resize:scale=0.5;noise:std=0.05]",
];

pub const DEFAULT_ALPHAS: [f64; 6] = [0.1, 0.25, 0.5, 0.75, 1.0, 1.5];

/// Stable per-item seed.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce5_e9b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A synthetic cover together with its watermarked copy.
#[derive(Debug, Clone)]
pub struct MarkedCover {
    pub cover: ErpImage,
    pub payload: Payload,
    pub marked: EmbedOutput,
}

/// Embeds a random payload into synthetic covers `seed, seed + 1, ...`.
pub fn mark_covers(cfg: &CodecConfig, height: usize, key: u64, covers: usize, seed: u64) -> Result<Vec<MarkedCover>> {
    (0..covers as u64)
        .into_par_iter()
        .map(|i| {
            let cover = synthetic_cover(height, cfg.l_max, 3, seed + i)?;
            let payload = Payload::random(cfg.bits, mix_seed(seed, i, 1));
            let marked = embed(&cover, &payload, key, cfg)?;
            Ok(MarkedCover { cover, payload, marked })
        })
        .collect()
}

/// Largest `|I(Rc) - I(c)| / (1 + |I(c)|)` over all admissible triplets up
/// to `l_max`, random covers and Haar-random rotations.
pub fn algebraic_invariance(l_max: usize, covers: usize, rotations: usize, seed: u64) -> Result<f64> {
    let triplets = all_triplets(l_max);
    let worst = (0..covers as u64)
        .into_par_iter()
        .map(|i| {
            let c = synth_random_bandlimited(l_max, 1, mix_seed(seed, i, 0), 1.5)?;
            let base = bispectrum_vector(&c, &triplets)?;
            let mut worst = 0.0f64;
            for j in 0..rotations as u64 {
                let r = random_rotation(mix_seed(seed, i, j + 1));
                let b = bispectrum_vector(&rotate_coeffs(&c, &r)?, &triplets)?;
                for (x, y) in base.values.iter().zip(&b.values) {
                    worst = worst.max((x - y).norm() / (1.0 + x.norm()));
                }
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(worst.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub angle: f64,
    pub mean_accuracy: f64,
    pub min_accuracy: f64,
    pub trials: usize,
}

/// For each angle, rotates marked copies about `axes` uniformly random axes
/// (cycling through the covers) and extracts non-blind.
pub fn rotation_sweep(
    marked: &[MarkedCover],
    cfg: &CodecConfig,
    angles: &[f64],
    axes: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if marked.is_empty() || axes == 0 {
        return Err(Error::invalid("rotation sweep needs at least one cover and one axis"));
    }
    angles
        .iter()
        .enumerate()
        .map(|(ai, &angle)| {
            let accs = (0..axes)
                .into_par_iter()
                .map(|t| {
                    let m = &marked[t % marked.len()];
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, ai as u64, t as u64));
                    let r = random_axis_rotation(&mut rng, angle);
                    let y = crate::attacks::attack_rotate(&m.marked.image, &r);
                    let e = extract_nonblind(&y, &m.marked.side, cfg)?;
                    bit_accuracy(&m.payload, &e.payload)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(SweepRow {
                angle,
                mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
                min_accuracy: accs.iter().copied().fold(f64::INFINITY, f64::min),
                trials: accs.len(),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("angle,mean_accuracy,min_accuracy,trials\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.angle, r.mean_accuracy, r.min_accuracy, r.trials));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackRow {
    pub attack: String,
    pub mean_accuracy: f64,
    pub min_accuracy: f64,
    /// Descriptor cosine between each clean cover and its attacked copy.
    pub mean_cosine: f64,
    pub min_cosine: f64,
}

/// Applies every attack to every marked copy (bit accuracy) and to the
/// clean cover (descriptor stability), with the same seed for both.
pub fn attack_grid(marked: &[MarkedCover], cfg: &CodecConfig, attacks: &[Distortion], seed: u64) -> Result<Vec<AttackRow>> {
    let triplets = descriptor_triplets(cfg.l_max);
    let clean: Vec<_> = marked
        .par_iter()
        .map(|m| bispectrum_vector(&forward_sht(&m.cover, cfg.l_max), &triplets))
        .collect::<Result<_>>()?;
    attacks
        .iter()
        .enumerate()
        .map(|(ai, attack)| {
            let per_cover = marked
                .par_iter()
                .zip(clean.par_iter())
                .enumerate()
                .map(|(ci, (m, b0))| {
                    let s = mix_seed(seed, ai as u64, ci as u64);
                    let y = attack.apply(&m.marked.image, s)?;
                    let acc = bit_accuracy(&m.payload, &extract_nonblind(&y, &m.marked.side, cfg)?.payload)?;
                    let yc = attack.apply(&m.cover, s)?;
                    let cos = bispectrum_cosine(b0, &bispectrum_vector(&forward_sht(&yc, cfg.l_max), &triplets)?)?;
                    Ok((acc, cos))
                })
                .collect::<Result<Vec<(f64, f64)>>>()?;
            let n = per_cover.len() as f64;
            Ok(AttackRow {
                attack: attack.to_string(),
                mean_accuracy: per_cover.iter().map(|p| p.0).sum::<f64>() / n,
                min_accuracy: per_cover.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
                mean_cosine: per_cover.iter().map(|p| p.1).sum::<f64>() / n,
                min_cosine: per_cover.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
            })
        })
        .collect()
}

pub fn attack_csv(rows: &[AttackRow]) -> String {
    let mut out = String::from("attack,mean_accuracy,min_accuracy,mean_cosine,min_cosine\n");
    for r in rows {
        out.push_str(&format!(
            "\"{}\",{},{},{},{}\n",
            r.attack, r.mean_accuracy, r.min_accuracy, r.mean_cosine, r.min_cosine
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityRow {
    pub alpha: f64,
    pub mean_psnr: f64,
    pub min_psnr: f64,
    pub mean_ssim: f64,
    pub min_ssim: f64,
    /// Unattacked bit accuracy.
    pub accuracy: f64,
}

pub fn fidelity(marked: &[MarkedCover], alpha: f64) -> Result<FidelityRow> {
    if marked.is_empty() {
        return Err(Error::invalid("fidelity needs at least one cover"));
    }
    let rows = marked
        .par_iter()
        .map(|m| {
            let p = psnr(&m.cover, &m.marked.image)?;
            let s = ssim(&m.cover, &m.marked.image)?;
            let e = extract_nonblind(&m.marked.image, &m.marked.side, &m.marked.side.config)?;
            Ok((p, s, bit_accuracy(&m.payload, &e.payload)?))
        })
        .collect::<Result<Vec<(f64, f64, f64)>>>()?;
    let n = rows.len() as f64;
    Ok(FidelityRow {
        alpha,
        mean_psnr: rows.iter().map(|r| r.0).sum::<f64>() / n,
        min_psnr: rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min),
        mean_ssim: rows.iter().map(|r| r.1).sum::<f64>() / n,
        min_ssim: rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min),
        accuracy: rows.iter().map(|r| r.2).sum::<f64>() / n,
    })
}

/// Fidelity and clean accuracy as a function of the embedding strength.
pub fn alpha_curve(
    cfg: &CodecConfig,
    height: usize,
    key: u64,
    covers: usize,
    alphas: &[f64],
    seed: u64,
) -> Result<Vec<FidelityRow>> {
    alphas
        .iter()
        .map(|&alpha| {
            let c = CodecConfig { alpha, ..cfg.clone() };
            fidelity(&mark_covers(&c, height, key, covers, seed)?, alpha)
        })
        .collect()
}

pub fn fidelity_csv(rows: &[FidelityRow]) -> String {
    let mut out = String::from("alpha,mean_psnr,min_psnr,mean_ssim,min_ssim,accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.alpha, r.mean_psnr, r.min_psnr, r.mean_ssim, r.min_ssim, r.accuracy
        ));
    }
    out
}
