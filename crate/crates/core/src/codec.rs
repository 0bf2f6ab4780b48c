//! Watermark embedding and non-blind extraction.
//!
//! Each payload bit owns a keyed unit pattern `p_k` supported on the
//! embedding degrees. The cover's coefficients are shifted by
//! `alpha * sum_k (2 w_k - 1) p_k`, synthesized back to the sphere, masked and
//! added. Bits are read from rotation-invariant bispectral features.
//!
//! Feature groups: with `G > 1` the channel dimension is lifted into `G`
//! slices `u_g = sum_ch a_{g,ch} c_ch` using fixed unit mixing vectors. Every
//! slice transforms like a single-channel signal, so its bispectrum is
//! invariant. Bit `k` belongs to group `k mod G` and its pattern points along
//! that group's mixing vector.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coupling::{admissible_triplets, bispectrum_vector, TripletIndex};
use crate::error::{Error, Result};
use crate::grid::{geometric_mask, resize_bilinear, texture_mask, ErpImage};
use crate::harmonics::{forward_sht, inverse_sht, synth_random_bandlimited, ShCoefficients};

/// Fixed seed of the public group mixing vectors.
const MIXING_SEED: u64 = 0x6d69_7869_6e67;
/// Fraction of residual energy lost to clamping above which `embed` warns.
pub const CLAMP_WARN_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub l_max: usize,
    pub embed_degrees: Vec<usize>,
    pub bits: usize,
    /// Per-bit strength relative to the cover's coefficient RMS on the
    /// embedding degrees.
    pub alpha: f64,
    /// Feature groups; 0 means one group per bit.
    pub groups: usize,
    pub use_geometric_mask: bool,
    pub use_texture_mask: bool,
    pub mask_floor: f64,
    pub decision: DecisionRule,
    /// Zero-forcing also fits one gain per triplet on the cover features,
    /// absorbing brightness, contrast and band-limiting attacks that rescale
    /// whole triplets.
    pub gain_compensation: bool,
}

/// How per-bit statistics are formed from the feature change `z - z0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionRule {
    /// Least-squares fit `z - z0 ~ sum_k s_k d_k / 2`; cancels the
    /// cross-talk between bits.
    #[default]
    ZeroForcing,
    /// Independent projections `<z - z0, d_k> / |d_k|^2`.
    Matched,
}

impl std::str::FromStr for DecisionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_forcing" | "zf" => Ok(Self::ZeroForcing),
            "matched" => Ok(Self::Matched),
            _ => Err(Error::invalid(format!("unknown decision rule '{s}' (expected zf or matched)"))),
        }
    }
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            l_max: 16,
            embed_degrees: vec![6, 8, 14],
            bits: 32,
            alpha: DEFAULT_ALPHA,
            groups: 0,
            use_geometric_mask: true,
            use_texture_mask: true,
            mask_floor: 0.25,
            decision: DecisionRule::ZeroForcing,
            gain_compensation: true,
        }
    }
}

pub const DEFAULT_ALPHA: f64 = 0.5;

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 {
            return Err(Error::invalid("payload must have at least one bit"));
        }
        if self.embed_degrees.is_empty() {
            return Err(Error::invalid("embedding degree set is empty"));
        }
        if self.embed_degrees.contains(&0) {
            return Err(Error::invalid("degree 0 cannot carry the watermark"));
        }
        if let Some(&l) = self.embed_degrees.iter().find(|&&l| l > self.l_max) {
            return Err(Error::invalid(format!("embedding degree {l} exceeds l_max {}", self.l_max)));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.mask_floor) {
            return Err(Error::invalid(format!("mask floor must be in [0, 1], got {}", self.mask_floor)));
        }
        let g = self.group_count();
        if g > self.bits || self.bits % g != 0 {
            return Err(Error::invalid(format!(
                "group count {g} must divide the payload length {}",
                self.bits
            )));
        }
        Ok(())
    }

    pub fn group_count(&self) -> usize {
        if self.groups == 0 {
            self.bits
        } else {
            self.groups
        }
    }

    pub fn triplets(&self) -> Result<Vec<TripletIndex>> {
        admissible_triplets(&self.embed_degrees, self.l_max)
    }

    /// Number of complex entries of `V_embed` per channel.
    pub fn embed_dim(&self) -> usize {
        self.embed_degrees.iter().map(|l| 2 * l + 1).sum()
    }

    /// Feature vector length for `channels`-channel inputs.
    pub fn feature_len(&self) -> Result<usize> {
        Ok(self.triplets()?.len() * self.group_count())
    }
}

/// A `k`-bit watermark message.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Payload {
    pub bits: Vec<bool>,
}

impl Payload {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn zeros(k: usize) -> Self {
        Self { bits: vec![false; k] }
    }

    pub fn random(k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            bits: (0..k).map(|_| rng.gen::<bool>()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Antipodal symbols `2 w_k - 1`.
    pub fn signs(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect()
    }

    /// Parses `0x`-prefixed hex (most significant bit first) or a plain
    /// string of `0`/`1` characters. Underscores are ignored.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
            Self::from_hex(hex).map_err(|e| match e {
                Error::Parse { position, message } => Error::Parse {
                    position: position + 2,
                    message,
                },
                other => other,
            })
        } else {
            Self::from_bit_string(s)
        }
    }

    pub fn from_hex(hex: &str) -> Result<Self> {
        let mut bits = Vec::with_capacity(hex.len() * 4);
        for (i, ch) in hex.chars().enumerate() {
            if ch == '_' {
                continue;
            }
            let v = ch.to_digit(16).ok_or_else(|| Error::Parse {
                position: i,
                message: format!("'{ch}' is not a hex digit"),
            })?;
            bits.extend((0..4).rev().map(|b| (v >> b) & 1 == 1));
        }
        if bits.is_empty() {
            return Err(Error::invalid("empty payload"));
        }
        Ok(Self { bits })
    }

    pub fn from_bit_string(s: &str) -> Result<Self> {
        let mut bits = Vec::with_capacity(s.len());
        for (i, ch) in s.chars().enumerate() {
            match ch {
                '0' => bits.push(false),
                '1' => bits.push(true),
                '_' => {}
                _ => {
                    return Err(Error::Parse {
                        position: i,
                        message: format!("'{ch}' is not a bit"),
                    })
                }
            }
        }
        if bits.is_empty() {
            return Err(Error::invalid("empty payload"));
        }
        Ok(Self { bits })
    }

    /// Hex digits, most significant bit first; the last digit is zero-padded
    /// on the right when `k` is not a multiple of 4.
    pub fn to_hex(&self) -> String {
        self.bits
            .chunks(4)
            .map(|nib| {
                let v = nib.iter().enumerate().fold(0u32, |acc, (i, &b)| acc | ((b as u32) << (3 - i)));
                std::char::from_digit(v, 16).unwrap_or('0')
            })
            .collect()
    }

    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn check_len(&self, k: usize) -> Result<()> {
        if self.bits.len() != k {
            return Err(Error::DimensionMismatch {
                expected: format!("{k} payload bits"),
                actual: format!("{} bits", self.bits.len()),
            });
        }
        Ok(())
    }
}

/// Keyed per-bit patterns on `V_embed`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternBank {
    pub patterns: Vec<ShCoefficients>,
    /// Group index of each bit.
    pub groups: Vec<usize>,
    /// `G x channels` unit mixing vectors.
    pub mixing: Vec<Vec<f64>>,
}

impl PatternBank {
    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// `sum_k scale * s_k * p_k`.
    pub fn combine(&self, signs: &[f64], scale: f64) -> Result<ShCoefficients> {
        if signs.len() != self.patterns.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} symbols", self.patterns.len()),
                actual: format!("{}", signs.len()),
            });
        }
        let first = &self.patterns[0];
        let mut out = ShCoefficients::zeros(first.l_max(), first.channels());
        for (p, &s) in self.patterns.iter().zip(signs) {
            for (o, v) in out.raw_mut().iter_mut().zip(p.raw()) {
                *o += v * (s * scale);
            }
        }
        Ok(out)
    }

    /// Largest `|<p_j, p_k>|` over `j != k`.
    pub fn max_cross_correlation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..self.patterns.len() {
            for k in j + 1..self.patterns.len() {
                worst = worst.max(self.patterns[j].dot_re(&self.patterns[k]).abs());
            }
        }
        worst
    }
}

/// Public mixing vectors of the `G` feature groups. A single group, or a
/// single channel, uses the plain channel sum.
pub fn group_mixing(groups: usize, channels: usize) -> Vec<Vec<f64>> {
    if groups <= 1 || channels == 1 {
        return vec![vec![1.0; channels]; groups.max(1)];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(MIXING_SEED ^ ((groups as u64) << 8) ^ channels as u64);
    (0..groups).map(|_| random_unit(&mut rng, channels)).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Real coordinates of one conjugate-symmetric degree-`l` block: `m = 0`
/// real part, then `(re, im)` of `m = 1..l`, scaled so the Euclidean norm of
/// the coordinates equals the norm of the full block.
fn write_real_block(block: &mut [Complex64], l: usize, coords: &[f64]) {
    let li = l as i64;
    block[l] = Complex64::new(coords[0], 0.0);
    for m in 1..=li {
        let v = Complex64::new(coords[2 * m as usize - 1], coords[2 * m as usize]) / 2f64.sqrt();
        block[(li + m) as usize] = v;
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        block[(li - m) as usize] = v.conj() * sign;
    }
}

fn gram_schmidt(vectors: &mut [Vec<f64>]) -> usize {
    for i in 0..vectors.len() {
        for _ in 0..2 {
            for j in 0..i {
                let d: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = vectors.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= d * b;
                }
            }
        }
        let norm = vectors[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return i;
        }
        vectors[i].iter_mut().for_each(|x| *x /= norm);
    }
    vectors.len()
}

/// Keyed orthonormal patterns, one per bit.
///
/// Patterns are built as `a_{g(k)} (x) q_k` with `q_k` a keyed real field on
/// `V_embed` and `a` the group mixing vector, orthonormalized by Gram-Schmidt
/// over the scalar fields. When `k` exceeds the scalar dimension the full
/// multichannel vectors are orthonormalized instead.
pub fn generate_patterns(key: u64, cfg: &CodecConfig, channels: usize) -> Result<PatternBank> {
    cfg.validate()?;
    if channels == 0 {
        return Err(Error::invalid("channel count must be positive"));
    }
    let k = cfg.bits;
    let scalar_dim = cfg.embed_dim();
    let achievable = scalar_dim * channels;
    if k > achievable {
        return Err(Error::InfeasiblePatterns {
            requested: k,
            achievable,
        });
    }
    let g = cfg.group_count();
    let mixing = group_mixing(g, channels);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let groups: Vec<usize> = (0..k).map(|i| i % g).collect();

    // Per-bit channel direction: the group's mixing vector, or a keyed
    // direction when every bit shares one group.
    let directions: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            if g == 1 {
                random_unit(&mut rng, channels)
            } else {
                mixing[groups[i]].clone()
            }
        })
        .collect();

    let full = k > scalar_dim;
    let dim = if full { achievable } else { scalar_dim };
    let mut vecs: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let q: Vec<f64> = (0..scalar_dim).map(|_| rng.sample(StandardNormal)).collect();
            if full {
                directions[i].iter().flat_map(|&a| q.iter().map(move |&v| a * v)).collect()
            } else {
                q
            }
        })
        .collect();
    debug_assert!(vecs.iter().all(|v| v.len() == dim));
    let rank = gram_schmidt(&mut vecs);
    if rank < k {
        return Err(Error::InfeasiblePatterns {
            requested: k,
            achievable: rank,
        });
    }

    let patterns = vecs
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut p = ShCoefficients::zeros(cfg.l_max, channels);
            for ch in 0..channels {
                let mut off = if full { ch * scalar_dim } else { 0 };
                let scale = if full { 1.0 } else { directions[i][ch] };
                for &l in &cfg.embed_degrees {
                    let coords: Vec<f64> = v[off..off + 2 * l + 1].iter().map(|x| x * scale).collect();
                    write_real_block(p.block_mut(ch, l), l, &coords);
                    off += 2 * l + 1;
                }
            }
            p
        })
        .collect();
    Ok(PatternBank {
        patterns,
        groups,
        mixing,
    })
}

/// Projects channels onto one group's mixing vector.
fn mix_channels(c: &ShCoefficients, a: &[f64]) -> ShCoefficients {
    let mut out = ShCoefficients::zeros(c.l_max(), 1);
    let per = c.per_channel();
    for (ch, &w) in a.iter().enumerate() {
        for (o, v) in out.raw_mut().iter_mut().zip(&c.raw()[ch * per..(ch + 1) * per]) {
            *o += v * w;
        }
    }
    out.set_real(c.is_real());
    out
}

/// Grouped bispectral features (real parts) of coefficients.
pub fn features_from_coeffs(c: &ShCoefficients, cfg: &CodecConfig) -> Result<Vec<f64>> {
    let triplets = cfg.triplets()?;
    let g = cfg.group_count();
    if g == 1 {
        return Ok(bispectrum_vector(c, &triplets)?.real_parts());
    }
    let mut out = Vec::with_capacity(g * triplets.len());
    for a in group_mixing(g, c.channels()) {
        out.extend(bispectrum_vector(&mix_channels(c, &a), &triplets)?.real_parts());
    }
    Ok(out)
}

/// Grouped power-spectrum features `P_g(l)`, same grouping as
/// [`features_from_coeffs`].
pub fn power_features_from_coeffs(c: &ShCoefficients, cfg: &CodecConfig) -> Result<Vec<f64>> {
    let g = cfg.group_count();
    let mixes = if g == 1 {
        vec![c.clone()]
    } else {
        group_mixing(g, c.channels()).iter().map(|a| mix_channels(c, a)).collect()
    };
    let mut out = Vec::with_capacity(g * cfg.embed_degrees.len());
    for m in &mixes {
        out.extend(cfg.embed_degrees.iter().map(|&l| m.degree_energy(l)));
    }
    Ok(out)
}

pub fn compute_features(y: &ErpImage, cfg: &CodecConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    features_from_coeffs(&forward_sht(y, cfg.l_max), cfg)
}

/// RMS magnitude of the coefficients on the embedding degrees.
pub fn embed_rms(c: &ShCoefficients, degrees: &[usize]) -> f64 {
    let n: usize = degrees.iter().map(|l| 2 * l + 1).sum::<usize>() * c.channels();
    let e: f64 = degrees.iter().map(|&l| c.degree_energy(l)).sum();
    (e / n as f64).sqrt()
}

/// Non-blind side information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureSet {
    pub key: u64,
    pub config: CodecConfig,
    pub height: usize,
    pub channels: usize,
    /// Absolute per-bit amplitude used at embedding time.
    pub amplitude: f64,
    /// Cover features `z0`.
    pub cover_features: Vec<f64>,
    /// Decision directions `d_k`, one per bit.
    pub directions: Vec<Vec<f64>>,
    /// Realized residual `SHT(x_marked) - SHT(x)`.
    pub realized: ShCoefficients,
}

impl SignatureSet {
    pub fn validate(&self, cfg: &CodecConfig) -> Result<()> {
        if &self.config != cfg {
            return Err(Error::invalid("side information was produced with a different codec config"));
        }
        let f = cfg.feature_len()?;
        if self.cover_features.len() != f
            || self.directions.len() != cfg.bits
            || self.directions.iter().any(|d| d.len() != f)
        {
            return Err(Error::DimensionMismatch {
                expected: format!("{} directions of {f} features", cfg.bits),
                actual: format!(
                    "{} directions, cover features of length {}",
                    self.directions.len(),
                    self.cover_features.len()
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EmbedOutput {
    pub image: ErpImage,
    pub side: SignatureSet,
    /// Fraction of the masked residual energy removed by clamping.
    pub clamp_loss: f64,
    pub warning: Option<String>,
}

/// Per-pixel product of the enabled masks, or `None` when both are off.
pub fn combined_mask(x: &ErpImage, cfg: &CodecConfig) -> Result<Option<Vec<f64>>> {
    let h = x.height();
    let w = x.width();
    let mut m = if cfg.use_texture_mask {
        texture_mask(x, cfg.mask_floor)?
    } else if cfg.use_geometric_mask {
        vec![1.0; h * w]
    } else {
        return Ok(None);
    };
    if cfg.use_geometric_mask {
        let geo = geometric_mask(h)?;
        for (r, g) in geo.iter().enumerate() {
            m[r * w..(r + 1) * w].iter_mut().for_each(|v| *v *= g);
        }
    }
    Ok(Some(m))
}

fn apply_mask(field: &mut ErpImage, mask: Option<&[f64]>) {
    if let Some(mask) = mask {
        let nc = field.channels();
        for (px, chunk) in field.data_mut().chunks_mut(nc).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= mask[px]);
        }
    }
}

/// The pattern as seen after spatial masking: `SHT(M * ISHT(p))`.
fn masked_pattern(p: &ShCoefficients, mask: Option<&[f64]>, height: usize) -> Result<ShCoefficients> {
    match mask {
        None => Ok(p.clone()),
        Some(_) => {
            let mut f = inverse_sht(p, height)?;
            apply_mask(&mut f, mask);
            Ok(forward_sht(&f, p.l_max()))
        }
    }
}

/// `d_k = F(c + a p_k) - F(c - a p_k)`.
pub fn decision_direction(
    c: &ShCoefficients,
    p: &ShCoefficients,
    amplitude: f64,
    cfg: &CodecConfig,
) -> Result<Vec<f64>> {
    let plus = features_from_coeffs(&c.add_scaled(p, amplitude)?, cfg)?;
    let minus = features_from_coeffs(&c.add_scaled(p, -amplitude)?, cfg)?;
    Ok(plus.iter().zip(&minus).map(|(a, b)| a - b).collect())
}

pub fn embed(x: &ErpImage, w: &Payload, key: u64, cfg: &CodecConfig) -> Result<EmbedOutput> {
    cfg.validate()?;
    w.check_len(cfg.bits)?;
    let h = x.height();
    let bank = generate_patterns(key, cfg, x.channels())?;
    let c = forward_sht(x, cfg.l_max);
    let amplitude = cfg.alpha * embed_rms(&c, &cfg.embed_degrees);

    let delta = bank.combine(&w.signs(), amplitude)?;
    let mut dx = inverse_sht(&delta, h)?;
    let mask = combined_mask(x, cfg)?;
    apply_mask(&mut dx, mask.as_deref());

    let mut marked = x.clone();
    let mut wanted = 0.0;
    let mut lost = 0.0;
    for (v, d) in marked.data_mut().iter_mut().zip(dx.data()) {
        let target = *v + d;
        let clamped = target.clamp(0.0, 1.0);
        wanted += d * d;
        lost += (target - clamped).powi(2);
        *v = clamped;
    }
    let clamp_loss = if wanted > 0.0 { lost / wanted } else { 0.0 };
    let warning = (clamp_loss > CLAMP_WARN_FRACTION).then(|| {
        format!(
            "clamping removed {:.1}% of the residual energy; lower alpha or use a darker/brighter-balanced cover",
            100.0 * clamp_loss
        )
    });

    let realized = forward_sht(&marked, cfg.l_max).sub(&c)?;
    let directions = bank
        .patterns
        .iter()
        .map(|p| {
            let pm = masked_pattern(p, mask.as_deref(), h)?;
            decision_direction(&c, &pm, amplitude, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let side = SignatureSet {
        key,
        config: cfg.clone(),
        height: h,
        channels: x.channels(),
        amplitude,
        cover_features: features_from_coeffs(&c, cfg)?,
        directions,
        realized,
    };
    Ok(EmbedOutput {
        image: marked,
        side,
        clamp_loss,
        warning,
    })
}

/// Decoded payload with its per-bit statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub payload: Payload,
    /// Per-bit statistic; its sign is the decision.
    pub statistics: Vec<f64>,
    /// [`symbol_consistency`] of the statistics: near 1 for a clean genuine
    /// copy, about `2 / pi` for a wrong key.
    pub consistency: f64,
}

impl Extraction {
    /// Smallest `|statistic|`, a crude confidence margin.
    pub fn margin(&self) -> f64 {
        self.statistics.iter().map(|s| s.abs()).fold(f64::INFINITY, f64::min)
    }
}

/// Per-bit statistics for features `z` under the configured decision rule.
/// Zero-forcing statistics estimate the antipodal symbol and sit near
/// `+-1` on a clean copy.
pub fn decide(z: &[f64], side: &SignatureSet) -> Result<Extraction> {
    if z.len() != side.cover_features.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} features", side.cover_features.len()),
            actual: format!("{}", z.len()),
        });
    }
    let dz: Vec<f64> = z.iter().zip(&side.cover_features).map(|(a, b)| a - b).collect();
    let gains = if side.config.gain_compensation && side.config.decision == DecisionRule::ZeroForcing {
        gain_columns(&side.cover_features, side.config.triplets()?.len())
    } else {
        Vec::new()
    };
    let statistics = match side.config.decision {
        DecisionRule::Matched => side
            .directions
            .iter()
            .map(|d| {
                let nn: f64 = d.iter().map(|v| v * v).sum();
                if nn == 0.0 {
                    0.0
                } else {
                    dz.iter().zip(d).map(|(a, b)| a * b).sum::<f64>() / nn
                }
            })
            .collect(),
        DecisionRule::ZeroForcing => zero_forcing(&dz, &side.directions, &gains)?,
    };
    let payload = Payload::new(statistics.iter().map(|&s| s > 0.0).collect());
    let consistency = symbol_consistency(&statistics);
    Ok(Extraction {
        payload,
        statistics,
        consistency,
    })
}

/// The cover features restricted to each triplet (features are group-major,
/// `t` triplets per group).
fn gain_columns(z0: &[f64], t: usize) -> Vec<Vec<f64>> {
    (0..t)
        .map(|j| {
            z0.iter()
                .enumerate()
                .map(|(i, &v)| if i % t == j { v } else { 0.0 })
                .collect()
        })
        .filter(|c: &Vec<f64>| c.iter().any(|v| *v != 0.0))
        .collect()
}

/// `mean(|s|)^2 / mean(s^2)`: 1 when every statistic has the same
/// magnitude, `2 / pi` for Gaussian statistics, 0 when all vanish.
pub fn symbol_consistency(statistics: &[f64]) -> f64 {
    let n = statistics.len() as f64;
    let ms: f64 = statistics.iter().map(|v| v * v).sum::<f64>() / n;
    if !(ms > 0.0) {
        return 0.0;
    }
    let ma: f64 = statistics.iter().map(|v| v.abs()).sum::<f64>() / n;
    ma * ma / ms
}

/// Least-squares symbols of `dz ~ sum_k s_k d_k / 2 + sum_t g_t e_t`; the
/// nuisance gains `g_t` are discarded.
fn zero_forcing(dz: &[f64], directions: &[Vec<f64>], gains: &[Vec<f64>]) -> Result<Vec<f64>> {
    let f = dz.len();
    let k = directions.len();
    let d = DMatrix::from_fn(f, k + gains.len(), |i, j| {
        if j < k {
            0.5 * directions[j][i]
        } else {
            gains[j - k][i]
        }
    });
    let svd = d.svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return Ok(vec![0.0; k]);
    }
    let s = svd
        .solve(&DVector::from_column_slice(dz), 1e-10 * smax)
        .map_err(|e| Error::Numerical(format!("zero-forcing solve failed: {e}")))?;
    Ok(s.iter().take(k).copied().collect())
}

pub fn extract_nonblind(y: &ErpImage, side: &SignatureSet, cfg: &CodecConfig) -> Result<Extraction> {
    cfg.validate()?;
    side.validate(cfg)?;
    if y.channels() != side.channels {
        return Err(Error::DimensionMismatch {
            expected: format!("{} channels", side.channels),
            actual: format!("{}", y.channels()),
        });
    }
    decide(&compute_features(y, cfg)?, side)
}

/// Extraction with an explicitly supplied key. When it differs from the key
/// in `side`, decision directions are rebuilt from the key's patterns around
/// the received image, so a wrong key yields chance-level bits and a low
/// `consistency`.
pub fn extract_with_key(y: &ErpImage, side: &SignatureSet, key: u64, cfg: &CodecConfig) -> Result<Extraction> {
    if key == side.key {
        return extract_nonblind(y, side, cfg);
    }
    cfg.validate()?;
    side.validate(cfg)?;
    let bank = generate_patterns(key, cfg, y.channels())?;
    let c = forward_sht(y, cfg.l_max);
    let mask = combined_mask(y, cfg)?;
    let directions = bank
        .patterns
        .iter()
        .map(|p| {
            let pm = masked_pattern(p, mask.as_deref(), y.height())?;
            decision_direction(&c, &pm, side.amplitude, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let rekeyed = SignatureSet {
        key,
        directions,
        ..side.clone()
    };
    decide(&features_from_coeffs(&c, cfg)?, &rekeyed)
}

/// Coefficient-domain embedding without masks or clamping.
pub fn embed_coeffs(c: &ShCoefficients, w: &Payload, bank: &PatternBank, amplitude: f64) -> Result<ShCoefficients> {
    c.add_scaled(&bank.combine(&w.signs(), amplitude)?, 1.0)
}

/// Embeds at a native resolution and transfers the residual to any size:
/// downsample, embed, upsample the residual bilinearly, add and clamp.
pub fn resolution_scale_embed(
    x: &ErpImage,
    w: &Payload,
    key: u64,
    cfg: &CodecConfig,
    native_height: usize,
) -> Result<ErpImage> {
    let native = if x.height() == native_height {
        x.clone()
    } else {
        resize_bilinear(x, native_height)?
    };
    let out = embed(&native, w, key, cfg)?;
    let mut residual = out.image.clone();
    for (r, v) in residual.data_mut().iter_mut().zip(native.data()) {
        *r -= v;
    }
    let residual = if x.height() == native_height {
        residual
    } else {
        resize_bilinear(&residual, x.height())?
    };
    let mut y = x.clone();
    for (v, r) in y.data_mut().iter_mut().zip(residual.data()) {
        *v = (*v + r).clamp(0.0, 1.0);
    }
    Ok(y)
}

/// Pixel standard deviation of synthetic covers around mid-gray.
pub const SYNTHETIC_COVER_STD: f64 = 0.2;
pub const SYNTHETIC_COVER_DECAY: f64 = 1.5;

/// Coefficients of a keyed band-limited synthetic cover: Gaussian spectrum
/// with `(1 + l)^-1.5` decay, scaled to pixel standard deviation 0.2 around
/// a mean of 0.5 per channel.
pub fn synthetic_cover_coeffs(l_max: usize, channels: usize, seed: u64) -> Result<ShCoefficients> {
    let mut c = synth_random_bandlimited(l_max, channels, seed, SYNTHETIC_COVER_DECAY)?;
    for ch in 0..channels {
        c.set(ch, 0, 0, Complex64::new(0.0, 0.0));
    }
    // Mean pixel power equals the coefficient energy over 4 pi per channel.
    let var = c.norm_sqr() / (4.0 * std::f64::consts::PI * channels as f64);
    let mut c = c.scaled(SYNTHETIC_COVER_STD / var.sqrt());
    let dc = 0.5 * (4.0 * std::f64::consts::PI).sqrt();
    for ch in 0..channels {
        c.set(ch, 0, 0, Complex64::new(dc, 0.0));
    }
    Ok(c)
}

/// Synthetic cover image at height `h`, clamped to `[0, 1]`.
pub fn synthetic_cover(h: usize, l_max: usize, channels: usize, seed: u64) -> Result<ErpImage> {
    Ok(inverse_sht(&synthetic_cover_coeffs(l_max, channels, seed)?, h)?.clamped())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{attack_brightness, attack_rotate};
    use crate::so3::{random_rotation, rotate_coeffs};

    fn small_cfg() -> CodecConfig {
        CodecConfig {
            bits: 8,
            ..CodecConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(CodecConfig::default().validate().is_ok());
        assert_eq!(CodecConfig::default().feature_len().unwrap(), 9 * 32);
        let bad = [
            CodecConfig { bits: 0, ..Default::default() },
            CodecConfig { embed_degrees: vec![], ..Default::default() },
            CodecConfig { embed_degrees: vec![0, 6], ..Default::default() },
            CodecConfig { embed_degrees: vec![6, 17], ..Default::default() },
            CodecConfig { alpha: -1.0, ..Default::default() },
            CodecConfig { mask_floor: 1.5, ..Default::default() },
            CodecConfig { groups: 5, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))), "{cfg:?}");
        }
    }

    #[test]
    fn decision_rule_parsing() {
        assert_eq!("zf".parse::<DecisionRule>().unwrap(), DecisionRule::ZeroForcing);
        assert_eq!("matched".parse::<DecisionRule>().unwrap(), DecisionRule::Matched);
        assert!("best".parse::<DecisionRule>().is_err());
    }

    #[test]
    fn payload_hex_and_bits() {
        let p = Payload::parse("0xdeadbeef").unwrap();
        assert_eq!(p.len(), 32);
        assert_eq!(p.to_bit_string(), "11011110101011011011111011101111");
        assert_eq!(p.to_hex(), "deadbeef");
        assert_eq!(Payload::parse("1101_1110").unwrap().to_hex(), "de");
        assert_eq!(Payload::parse(&p.to_bit_string()).unwrap(), p);
        assert_eq!(Payload::new(vec![true, false, true]).to_hex(), "a");
        match Payload::parse("0xdeXd") {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 4),
            other => panic!("{other:?}"),
        }
        match Payload::parse("0102") {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 3),
            other => panic!("{other:?}"),
        }
        assert!(Payload::parse("0x").is_err());
        assert!(p.check_len(16).is_err());
        assert_eq!(Payload::random(32, 5), Payload::random(32, 5));
        assert_ne!(Payload::random(32, 5), Payload::random(32, 6));
    }

    #[test]
    fn patterns_orthonormal_real_and_confined() {
        let cfg = CodecConfig::default();
        let bank = generate_patterns(11, &cfg, 3).unwrap();
        assert_eq!(bank.len(), 32);
        assert!(bank.max_cross_correlation() < 1e-12);
        for p in &bank.patterns {
            assert!((p.norm() - 1.0).abs() < 1e-12);
            assert!(p.symmetry_residual() < 1e-15);
            for l in 0..=cfg.l_max {
                if !cfg.embed_degrees.contains(&l) {
                    assert_eq!(p.degree_energy(l), 0.0, "energy leaked into degree {l}");
                }
            }
        }
        for (i, &g) in bank.groups.iter().enumerate() {
            assert_eq!(g, i % 32);
        }
    }

    #[test]
    fn patterns_depend_on_key_only() {
        let cfg = CodecConfig::default();
        let a = generate_patterns(1, &cfg, 3).unwrap();
        assert_eq!(a, generate_patterns(1, &cfg, 3).unwrap());
        let b = generate_patterns(2, &cfg, 3).unwrap();
        assert!(a.patterns[0].sub(&b.patterns[0]).unwrap().norm() > 0.1);
    }

    #[test]
    fn infeasible_pattern_count() {
        let cfg = CodecConfig {
            embed_degrees: vec![1],
            l_max: 4,
            bits: 10,
            groups: 1,
            ..Default::default()
        };
        assert!(matches!(
            generate_patterns(0, &cfg, 3),
            Err(Error::InfeasiblePatterns { requested: 10, achievable: 9 })
        ));
        // Nine bits fit only through the multichannel fallback.
        let cfg = CodecConfig { bits: 9, ..cfg };
        assert!(generate_patterns(0, &cfg, 3).unwrap().max_cross_correlation() < 1e-12);
    }

    #[test]
    fn group_mixing_is_public_and_unit() {
        let a = group_mixing(32, 3);
        assert_eq!(a, group_mixing(32, 3));
        for v in &a {
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(group_mixing(1, 3), vec![vec![1.0; 3]]);
    }

    #[test]
    fn features_are_rotation_invariant() {
        let cfg = CodecConfig::default();
        let c = synthetic_cover_coeffs(16, 3, 4).unwrap();
        let z = features_from_coeffs(&c, &cfg).unwrap();
        let zr = features_from_coeffs(&rotate_coeffs(&c, &random_rotation(9)).unwrap(), &cfg).unwrap();
        let scale = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in z.iter().zip(&zr) {
            assert!((a - b).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn synthetic_cover_statistics() {
        let x = synthetic_cover(64, 16, 3, 2).unwrap();
        let n = x.data().len() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let std = (x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - 0.5).abs() < 0.05, "mean {mean}");
        assert!((std - SYNTHETIC_COVER_STD).abs() < 0.05, "std {std}");
    }

    fn side_for(cfg: &CodecConfig, c: &ShCoefficients, key: u64) -> (SignatureSet, PatternBank) {
        let bank = generate_patterns(key, cfg, c.channels()).unwrap();
        let amplitude = 0.1 * embed_rms(c, &cfg.embed_degrees);
        let directions = bank
            .patterns
            .iter()
            .map(|p| decision_direction(c, p, amplitude, cfg).unwrap())
            .collect();
        let side = SignatureSet {
            key,
            config: cfg.clone(),
            height: 64,
            channels: c.channels(),
            amplitude,
            cover_features: features_from_coeffs(c, cfg).unwrap(),
            directions,
            realized: ShCoefficients::zeros(cfg.l_max, c.channels()),
        };
        (side, bank)
    }

    #[test]
    fn zero_forcing_recovers_coefficient_domain_embedding() {
        let cfg = CodecConfig::default();
        let c = synthetic_cover_coeffs(16, 3, 1).unwrap();
        let (side, bank) = side_for(&cfg, &c, 3);
        let w = Payload::random(32, 8);
        let marked = embed_coeffs(&c, &w, &bank, side.amplitude).unwrap();
        let e = decide(&features_from_coeffs(&marked, &cfg).unwrap(), &side).unwrap();
        assert_eq!(e.payload, w);
        assert!(e.consistency > 0.95, "{}", e.consistency);
        for (s, sign) in e.statistics.iter().zip(w.signs()) {
            assert!((s - sign).abs() < 0.2, "statistic {s} for symbol {sign}");
        }
    }

    #[test]
    fn gain_compensation_absorbs_global_scaling() {
        let cfg = CodecConfig::default();
        let c = synthetic_cover_coeffs(16, 3, 1).unwrap();
        let (side, bank) = side_for(&cfg, &c, 3);
        let w = Payload::random(32, 8);
        let scaled = embed_coeffs(&c, &w, &bank, side.amplitude).unwrap().scaled(0.7);
        let z = features_from_coeffs(&scaled, &cfg).unwrap();
        let e = decide(&z, &side).unwrap();
        assert_eq!(e.payload, w);
        assert!(e.consistency > 0.95);
        for (s, sign) in e.statistics.iter().zip(w.signs()) {
            assert!((s - 0.343 * sign).abs() < 0.1, "statistic {s} for symbol {sign}");
        }
    }

    #[test]
    fn symbol_consistency_values() {
        assert!((symbol_consistency(&[1.0, -1.0, 1.0]) - 1.0).abs() < 1e-15);
        assert!((symbol_consistency(&[2.0, 0.0]) - 0.5).abs() < 1e-15);
        assert_eq!(symbol_consistency(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn matched_rule_on_orthogonal_directions() {
        let cfg = CodecConfig {
            decision: DecisionRule::Matched,
            bits: 2,
            ..CodecConfig::default()
        };
        let side = SignatureSet {
            key: 0,
            config: cfg.clone(),
            height: 8,
            channels: 1,
            amplitude: 1.0,
            cover_features: vec![1.0, 1.0, 1.0],
            directions: vec![vec![2.0, 0.0, 0.0], vec![0.0, 4.0, 0.0]],
            realized: ShCoefficients::zeros(1, 1),
        };
        let e = decide(&[2.0, -1.0, 1.0], &side).unwrap();
        assert_eq!(e.statistics, vec![0.5, -0.5]);
        assert_eq!(e.payload.bits, vec![true, false]);
        assert!(decide(&[1.0], &side).is_err());
    }

    #[test]
    fn image_round_trip_with_rotation_and_brightness() {
        let cfg = CodecConfig::default();
        let x = synthetic_cover(64, 16, 3, 6).unwrap();
        let w = Payload::random(32, 1);
        let out = embed(&x, &w, 77, &cfg).unwrap();
        assert!(out.warning.is_none());
        assert!(out.clamp_loss < CLAMP_WARN_FRACTION);
        assert_eq!(out.image.height(), 64);
        assert!(out.side.validate(&cfg).is_ok());
        assert_eq!(extract_nonblind(&out.image, &out.side, &cfg).unwrap().payload, w);
        let y = attack_rotate(&out.image, &random_rotation(3));
        assert_eq!(extract_nonblind(&y, &out.side, &cfg).unwrap().payload, w);
        let y = attack_brightness(&out.image, 0.8).unwrap();
        assert_eq!(extract_nonblind(&y, &out.side, &cfg).unwrap().payload, w);
    }

    #[test]
    fn wrong_key_is_chance_with_low_confidence() {
        let cfg = CodecConfig::default();
        let x = synthetic_cover(64, 16, 3, 6).unwrap();
        let w = Payload::random(32, 1);
        let out = embed(&x, &w, 77, &cfg).unwrap();
        let right = extract_with_key(&out.image, &out.side, 77, &cfg).unwrap();
        assert_eq!(right.payload, w);
        let wrong = extract_with_key(&out.image, &out.side, 78, &cfg).unwrap();
        let agree = wrong.payload.bits.iter().zip(&w.bits).filter(|(a, b)| a == b).count();
        assert!((6..=26).contains(&agree), "{agree} of 32 bits agree with a wrong key");
        assert!(wrong.consistency < 0.8 && right.consistency > 0.9);
    }

    #[test]
    fn side_info_rejects_other_config() {
        let cfg = small_cfg();
        let x = synthetic_cover(32, 16, 1, 0).unwrap();
        let out = embed(&x, &Payload::zeros(8), 1, &cfg).unwrap();
        let other = CodecConfig { alpha: 0.3, ..cfg.clone() };
        assert!(extract_nonblind(&out.image, &out.side, &other).is_err());
        assert!(embed(&x, &Payload::zeros(7), 1, &cfg).is_err());
    }

    #[test]
    fn zero_alpha_leaves_image_unchanged() {
        let cfg = CodecConfig { alpha: 0.0, ..small_cfg() };
        let x = synthetic_cover(32, 16, 3, 0).unwrap();
        let out = embed(&x, &Payload::random(8, 0), 1, &cfg).unwrap();
        assert_eq!(out.image, x);
    }

    #[test]
    fn resolution_scaling_preserves_size_and_payload() {
        let cfg = CodecConfig::default();
        let x = synthetic_cover(128, 16, 3, 5).unwrap();
        let w = Payload::random(32, 4);
        let y = resolution_scale_embed(&x, &w, 9, &cfg, 64).unwrap();
        assert!(y.same_shape(&x));
        // Decode at the native resolution the side information refers to.
        let native = resize_bilinear(&x, 64).unwrap();
        let side = embed(&native, &w, 9, &cfg).unwrap().side;
        let back = resize_bilinear(&y, 64).unwrap();
        assert_eq!(extract_nonblind(&back, &side, &cfg).unwrap().payload, w);
    }
}
