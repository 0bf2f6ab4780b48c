//! Blind decoding: a linear read-out trained with binary cross-entropy on
//! rotation-invariant features.
//!
//! Features pass through `sign(v) |v|^(1/3)` and per-feature standardization
//! before a single linear layer and a sigmoid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{
    embed_coeffs, embed_rms, features_from_coeffs, generate_patterns, power_features_from_coeffs,
    synthetic_cover_coeffs, CodecConfig, Payload,
};
use crate::error::{Error, Result};
use crate::harmonics::ShCoefficients;

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` inside the loss.
pub const PROB_CLIP: f64 = 1e-7;
/// Training aborts once the epoch loss exceeds this.
pub const DIVERGENCE_LOSS: f64 = 1e3;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn compress(v: f64) -> f64 {
    v.signum() * v.abs().cbrt()
}

/// Normalization, weights `k x F` and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDecoder {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// Free-form description of what produced the decoder.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub payload: Payload,
    pub probabilities: Vec<f64>,
}

impl LinearDecoder {
    /// Zero weights with identity normalization.
    pub fn zeros(features: usize, bits: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            scale: vec![1.0; features],
            weights: vec![vec![0.0; features]; bits],
            bias: vec![0.0; bits],
            config: serde_json::Value::Null,
        }
    }

    pub fn feature_len(&self) -> usize {
        self.mean.len()
    }

    pub fn bits(&self) -> usize {
        self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.mean.len();
        if self.scale.len() != f || self.weights.len() != self.bias.len() || self.weights.iter().any(|r| r.len() != f)
        {
            return Err(Error::Format("decoder arrays have inconsistent shapes".into()));
        }
        if self.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Format("decoder normalization scales must be positive".into()));
        }
        let finite = self.mean.iter().chain(self.bias.iter()).chain(self.weights.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Format("decoder parameters must be finite".into()));
        }
        Ok(())
    }

    /// Compressed, standardized features.
    pub fn normalize(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.feature_len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} features", self.feature_len()),
                actual: format!("{}", features.len()),
            });
        }
        Ok(features
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(&v, (m, s))| (compress(v) - m) / s)
            .collect())
    }

    fn logits_normalized(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits_normalized(&self.normalize(features)?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(s)?;
        d.validate()?;
        Ok(d)
    }
}

/// `p_k = sigmoid(W x + b)`, bit `k` set when `p_k > 0.5`.
pub fn decode(dec: &LinearDecoder, features: &[f64]) -> Result<Decoded> {
    let probabilities: Vec<f64> = dec.logits(features)?.into_iter().map(sigmoid).collect();
    let payload = Payload::new(probabilities.iter().map(|&p| p > 0.5).collect());
    Ok(Decoded { payload, probabilities })
}

/// Mean binary cross-entropy with clipped probabilities.
pub fn bce_loss(probabilities: &[f64], w: &Payload) -> Result<f64> {
    if probabilities.len() != w.len() || w.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} probabilities", w.len()),
            actual: format!("{}", probabilities.len()),
        });
    }
    let total: f64 = probabilities
        .iter()
        .zip(&w.bits)
        .map(|(&p, &b)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            if b {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / w.len() as f64)
}

/// Cross-entropy evaluated from logits, `softplus(z) - w z`, which has the
/// exact gradient `(p - w) / k`.
pub fn bce_from_logits(logits: &[f64], w: &Payload) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(&w.bits)
        .map(|(&z, &b)| {
            let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            softplus - if b { z } else { 0.0 }
        })
        .sum();
    total / logits.len() as f64
}

/// `dL/dz_k = (p_k - w_k) / k`.
pub fn bce_logit_gradient(logits: &[f64], w: &Payload) -> Vec<f64> {
    let k = logits.len() as f64;
    logits
        .iter()
        .zip(&w.bits)
        .map(|(&z, &b)| (sigmoid(z) - if b { 1.0 } else { 0.0 }) / k)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub payload: Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 200,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub curve: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (lowest training loss).
    pub best_epoch: usize,
}

impl TrainRun {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,train_acc\n");
        for r in &self.curve {
            out.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.accuracy));
        }
        out
    }
}

fn check_dataset(data: &[Sample]) -> Result<(usize, usize)> {
    if data.len() < 2 {
        return Err(Error::invalid(format!("training needs at least 2 samples, got {}", data.len())));
    }
    let f = data[0].features.len();
    let k = data[0].payload.len();
    if f == 0 || k == 0 {
        return Err(Error::invalid("samples need at least one feature and one bit"));
    }
    if let Some(i) = data.iter().position(|s| s.features.len() != f || s.payload.len() != k) {
        return Err(Error::DimensionMismatch {
            expected: format!("{f} features and {k} bits"),
            actual: format!(
                "sample {i} has {} features and {} bits",
                data[i].features.len(),
                data[i].payload.len()
            ),
        });
    }
    Ok((f, k))
}

/// Per-feature mean and standard deviation of the compressed features.
/// Constant features get scale 1.
pub fn fit_normalization(data: &[Sample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (f, _) = check_dataset(data)?;
    let n = data.len() as f64;
    let mut mean = vec![0.0; f];
    for s in data {
        mean.iter_mut().zip(&s.features).for_each(|(m, &v)| *m += compress(v) / n);
    }
    let mut var = vec![0.0; f];
    for s in data {
        var.iter_mut()
            .zip(s.features.iter().zip(&mean))
            .for_each(|(acc, (&v, m))| *acc += (compress(v) - m).powi(2) / n);
    }
    let scale = var
        .into_iter()
        .map(|v| {
            let s = v.sqrt();
            if s > 1e-12 * (1.0 + s) && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect();
    Ok((mean, scale))
}

fn dataset_loss_acc(dec: &LinearDecoder, xs: &[Vec<f64>], data: &[Sample]) -> (f64, f64) {
    let mut loss = 0.0;
    let mut hits = 0usize;
    for (x, s) in xs.iter().zip(data) {
        let z = dec.logits_normalized(x);
        loss += bce_from_logits(&z, &s.payload);
        hits += z.iter().zip(&s.payload.bits).filter(|(&v, &b)| (v > 0.0) == b).count();
    }
    let k = data[0].payload.len();
    (loss / data.len() as f64, hits as f64 / (data.len() * k) as f64)
}

/// Minibatch gradient descent on the cross-entropy, starting from zero
/// weights. The shuffling order is drawn from `cfg.seed`, so equal seeds give
/// equal decoders. Returns the parameters with the lowest epoch loss.
pub fn train(data: &[Sample], cfg: &TrainConfig) -> Result<(LinearDecoder, TrainRun)> {
    let (f, k) = check_dataset(data)?;
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.learning_rate)));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("batch size and epoch count must be positive"));
    }
    let (mean, scale) = fit_normalization(data)?;
    let mut dec = LinearDecoder {
        mean,
        scale,
        ..LinearDecoder::zeros(f, k)
    };
    let xs: Vec<Vec<f64>> = data
        .iter()
        .map(|s| dec.normalize(&s.features))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let (loss0, acc0) = dataset_loss_acc(&dec, &xs, data);
    let mut curve = vec![EpochRecord {
        epoch: 0,
        loss: loss0,
        accuracy: acc0,
    }];
    let mut best = (loss0, dec.clone(), 0);
    let mut gw = vec![vec![0.0; f]; k];
    let mut gb = vec![0.0; k];
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            gw.iter_mut().for_each(|r| r.fill(0.0));
            gb.fill(0.0);
            for &i in batch {
                let z = dec.logits_normalized(&xs[i]);
                let dz = bce_logit_gradient(&z, &data[i].payload);
                for ((row, b), d) in gw.iter_mut().zip(gb.iter_mut()).zip(&dz) {
                    *b += d;
                    row.iter_mut().zip(&xs[i]).for_each(|(g, x)| *g += d * x);
                }
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for ((row, b), (grow, gbv)) in dec.weights.iter_mut().zip(dec.bias.iter_mut()).zip(gw.iter().zip(&gb)) {
                row.iter_mut().zip(grow).for_each(|(w, g)| *w -= step * g);
                *b -= step * gbv;
            }
        }
        let (loss, accuracy) = dataset_loss_acc(&dec, &xs, data);
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged { epoch, loss });
        }
        curve.push(EpochRecord { epoch, loss, accuracy });
        if loss < best.0 {
            best = (loss, dec.clone(), epoch);
        }
    }
    let run = TrainRun {
        config: *cfg,
        curve,
        best_epoch: best.2,
    };
    Ok((best.1, run))
}

/// Largest relative discrepancy between the analytic cross-entropy gradient
/// and central differences, over all weights and biases, for one sample.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`; entries where both
/// vanish count as exact.
pub fn gradient_check(dec: &LinearDecoder, sample: &Sample, epsilon: f64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon must be in [1e-6, 1e-3], got {epsilon}")));
    }
    sample.payload.check_len(dec.bits())?;
    let x = dec.normalize(&sample.features)?;
    let dz = bce_logit_gradient(&dec.logits_normalized(&x), &sample.payload);
    let loss_at = |d: &LinearDecoder| bce_from_logits(&d.logits_normalized(&x), &sample.payload);
    let rel = |a: f64, n: f64| {
        let d = (a - n).abs();
        if d == 0.0 {
            0.0
        } else {
            d / a.abs().max(n.abs()).max(1e-8)
        }
    };
    let mut probe = dec.clone();
    let mut worst: f64 = 0.0;
    for kk in 0..dec.bits() {
        for j in 0..dec.feature_len() {
            let w0 = dec.weights[kk][j];
            probe.weights[kk][j] = w0 + epsilon;
            let up = loss_at(&probe);
            probe.weights[kk][j] = w0 - epsilon;
            let down = loss_at(&probe);
            probe.weights[kk][j] = w0;
            worst = worst.max(rel(dz[kk] * x[j], (up - down) / (2.0 * epsilon)));
        }
        let b0 = dec.bias[kk];
        probe.bias[kk] = b0 + epsilon;
        let up = loss_at(&probe);
        probe.bias[kk] = b0 - epsilon;
        let down = loss_at(&probe);
        probe.bias[kk] = b0;
        worst = worst.max(rel(dz[kk], (up - down) / (2.0 * epsilon)));
    }
    Ok(worst)
}

pub fn accuracy(dec: &LinearDecoder, data: &[Sample]) -> Result<f64> {
    let (_, k) = check_dataset(data)?;
    let mut hits = 0usize;
    for s in data {
        let d = decode(dec, &s.features)?;
        hits += d.payload.bits.iter().zip(&s.payload.bits).filter(|(a, b)| a == b).count();
    }
    Ok(hits as f64 / (data.len() * k) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Bispectrum,
    Power,
}

/// Synthetic decoding benchmark: covers are a keyed host plus a small
/// independent perturbation on the embedding degrees, payloads are random,
/// and embedding happens in the coefficient domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HostFamily {
    pub host_seed: u64,
    /// Perturbation scale relative to a fresh cover's embedding-degree content.
    pub jitter: f64,
    pub channels: usize,
}

impl Default for HostFamily {
    fn default() -> Self {
        Self {
            host_seed: 0,
            jitter: 0.05,
            channels: 3,
        }
    }
}

impl HostFamily {
    pub fn cover(&self, l_max: usize, degrees: &[usize], index: u64) -> Result<ShCoefficients> {
        let host = synthetic_cover_coeffs(l_max, self.channels, self.host_seed)?;
        if self.jitter == 0.0 {
            return Ok(host);
        }
        let fresh = synthetic_cover_coeffs(l_max, self.channels, sample_seed(self.host_seed, index))?;
        host.add_scaled(&fresh.restricted_to(degrees), self.jitter)
    }
}

fn sample_seed(base: u64, index: u64) -> u64 {
    base.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ (index + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// `n` samples with indices `first..first + n`.
pub fn generate_dataset(
    family: &HostFamily,
    cfg: &CodecConfig,
    key: u64,
    first: u64,
    n: usize,
    kind: FeatureKind,
) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let bank = generate_patterns(key, cfg, family.channels)?;
    (first..first + n as u64)
        .into_par_iter()
        .map(|i| {
            let c = family.cover(cfg.l_max, &cfg.embed_degrees, i)?;
            let payload = Payload::random(cfg.bits, sample_seed(key, i));
            let amplitude = cfg.alpha * embed_rms(&c, &cfg.embed_degrees);
            let marked = embed_coeffs(&c, &payload, &bank, amplitude)?;
            let features = match kind {
                FeatureKind::Bispectrum => features_from_coeffs(&marked, cfg)?,
                FeatureKind::Power => power_features_from_coeffs(&marked, cfg)?,
            };
            Ok(Sample { features, payload })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub family: HostFamily,
    pub key: u64,
    pub payload_sizes: Vec<usize>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub train: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            family: HostFamily::default(),
            key: 7,
            payload_sizes: vec![16, 32],
            train_samples: 1500,
            test_samples: 300,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub bits: usize,
    pub bispectrum_accuracy: f64,
    pub power_accuracy: f64,
    pub bispectrum_features: usize,
    pub power_features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bits,bispectrum_acc,power_acc,bispectrum_features,power_features\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.bits, r.bispectrum_accuracy, r.power_accuracy, r.bispectrum_features, r.power_features
            ));
        }
        out
    }
}

/// Trains one decoder per feature kind on identical covers, payloads and
/// strength, and reports held-out bit accuracy for each payload size.
pub fn ablate_power_spectrum(codec: &CodecConfig, cfg: &AblationConfig) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &k in &cfg.payload_sizes {
        let c = CodecConfig {
            bits: k,
            groups: 0,
            ..codec.clone()
        };
        let mut acc = [0.0; 2];
        let mut lens = [0usize; 2];
        for (i, kind) in [FeatureKind::Bispectrum, FeatureKind::Power].into_iter().enumerate() {
            let train_set = generate_dataset(&cfg.family, &c, cfg.key, 0, cfg.train_samples, kind)?;
            let test_set = generate_dataset(
                &cfg.family,
                &c,
                cfg.key,
                cfg.train_samples as u64,
                cfg.test_samples,
                kind,
            )?;
            let (dec, _) = train(&train_set, &cfg.train)?;
            acc[i] = accuracy(&dec, &test_set)?;
            lens[i] = train_set[0].features.len();
        }
        rows.push(AblationRow {
            bits: k,
            bispectrum_accuracy: acc[0],
            power_accuracy: acc[1],
            bispectrum_features: lens[0],
            power_features: lens[1],
        });
    }
    Ok(AblationReport {
        config: cfg.clone(),
        rows,
    })
}
