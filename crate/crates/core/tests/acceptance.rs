//! End-to-end acceptance suite at the default desk scale (l_max 16, H 64,
//! embedding degrees {6, 8, 14}, 32 bits, synthetic covers).
//!
//! Every criterion prints one `PASS`/`FAIL` line to stderr (bypassing the
//! test harness capture) and then asserts.

use std::io::Write;
use std::path::Path;
use std::process::Command;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sphmark::attacks::{attack_blur_spatial, attack_blur_spectral, matched_heat_sigma, Distortion};
use sphmark::cli::protocol::{fidelity, mark_covers, rotation_sweep, DEFAULT_ALPHAS, DEFAULT_ANGLES};
use sphmark::codec::{synthetic_cover, synthetic_cover_coeffs, CodecConfig};
use sphmark::coupling::{
    all_triplets, bispectrum_vector, descriptor_triplets, projection_table, wigner_3j, TripletIndex,
};
use sphmark::decoder::{generate_dataset, gradient_check, train, FeatureKind, HostFamily, TrainConfig};
use sphmark::decoder::{ablate_power_spectrum, AblationConfig};
use sphmark::grid::quadrature_weights;
use sphmark::harmonics::{forward_sht, inverse_sht, synth_random_bandlimited, BandProfile, ShCoefficients};
use sphmark::metrics::{bispectrum_cosine, noise_bias_fit};
use sphmark::so3::{random_rotation, rotate_coeffs, rotate_image};

const H: usize = 64;
const L_MAX: usize = 16;

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "[acceptance {n:>2}] {verdict} {name}: {detail}");
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

#[test]
fn c01_algebraic_rotation_invariance() {
    let triplets = all_triplets(L_MAX);
    let mut worst = 0.0f64;
    for cover in 0..50u64 {
        let c = synthetic_cover_coeffs(L_MAX, 3, cover).unwrap();
        let base = bispectrum_vector(&c, &triplets).unwrap();
        for j in 0..20u64 {
            let r = random_rotation(1000 * cover + j);
            let b = bispectrum_vector(&rotate_coeffs(&c, &r).unwrap(), &triplets).unwrap();
            for (x, y) in base.values.iter().zip(&b.values) {
                worst = worst.max((x - y).norm() / (1.0 + x.norm()));
            }
        }
    }
    report(
        1,
        "algebraic rotation invariance",
        worst <= 1e-9,
        &format!("max |dI|/(1+|I|) = {worst:.3e} over 50 covers x 20 rotations, {} triplets (bound 1e-9)", triplets.len()),
    );
}

#[test]
fn c02_end_to_end_rotation_robustness() {
    let cfg = CodecConfig::default();
    let marked = mark_covers(&cfg, H, 11, 20, 200).unwrap();
    let rows = rotation_sweep(&marked, &cfg, &DEFAULT_ANGLES, 100, 21).unwrap();
    let means: Vec<f64> = rows.iter().map(|r| r.mean_accuracy).collect();
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let per_angle: Vec<String> = rows.iter().map(|r| format!("{}:{:.4}", r.angle, r.mean_accuracy)).collect();
    report(
        2,
        "end-to-end rotation robustness",
        lo >= 0.99 && hi - lo <= 0.01,
        &format!("mean accuracy per angle [{}], spread {:.4} (bounds >= 0.99, <= 0.01)", per_angle.join(" "), hi - lo),
    );
}

#[test]
fn c03_fidelity() {
    let cfg = CodecConfig::default();
    let row = fidelity(&mark_covers(&cfg, H, 3, 20, 300).unwrap(), cfg.alpha).unwrap();
    // Trade-off curve on a smaller set: PSNR must fall as alpha grows.
    let curve: Vec<f64> = DEFAULT_ALPHAS
        .iter()
        .map(|&alpha| {
            let c = CodecConfig { alpha, ..cfg.clone() };
            fidelity(&mark_covers(&c, H, 3, 5, 300).unwrap(), alpha).unwrap().mean_psnr
        })
        .collect();
    let monotone = curve.windows(2).all(|w| w[1] < w[0]);
    let curve_txt: Vec<String> = DEFAULT_ALPHAS.iter().zip(&curve).map(|(a, p)| format!("{a}:{p:.1}")).collect();
    report(
        3,
        "fidelity",
        row.min_psnr >= 35.0 && row.min_ssim >= 0.98 && monotone,
        &format!(
            "alpha {}: min PSNR {:.2} dB (>= 35), min SSIM {:.4} (>= 0.98), clean accuracy {:.3}; alpha->PSNR [{}] monotone {monotone}",
            cfg.alpha,
            row.min_psnr,
            row.min_ssim,
            row.accuracy,
            curve_txt.join(" ")
        ),
    );
}

#[test]
fn c04_isolated_bispectrum_stability() {
    let triplets = descriptor_triplets(L_MAX);
    let cases: [(&str, &str, f64); 4] = [
        ("blur", "blur:sigma=3,k=7", 0.99),
        ("resize", "resize:scale=0.5", 0.995),
        ("noise", "noise:std=0.05", 0.995),
        ("combined", "mixed:[blur:sigma=3,k=7;resize:scale=0.5;noise:std=0.05]", 0.99),
    ];
    let covers: Vec<_> = (0..20u64).map(|s| synthetic_cover(H, L_MAX, 3, 400 + s).unwrap()).collect();
    let clean: Vec<_> = covers
        .iter()
        .map(|x| bispectrum_vector(&forward_sht(x, L_MAX), &triplets).unwrap())
        .collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, spec, bound) in cases {
        let attack: Distortion = spec.parse().unwrap();
        let cosines: Vec<f64> = covers
            .iter()
            .zip(&clean)
            .enumerate()
            .map(|(i, (x, b0))| {
                let y = attack.apply(x, 500 + i as u64).unwrap();
                bispectrum_cosine(b0, &bispectrum_vector(&forward_sht(&y, L_MAX), &triplets).unwrap()).unwrap()
            })
            .collect();
        let min = cosines.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
        pass &= min >= bound;
        parts.push(format!("{name} min {min:.4} mean {mean:.4} (>= {bound})"));
    }
    report(4, "isolated bispectrum stability", pass, &parts.join(", "));
}

#[test]
fn c05_blur_law() {
    // Spectral blur: a low-contrast cover stays inside [0, 1], so the attack
    // is exactly linear and the bispectrum must scale by g(l1) g(l2) g(l3).
    let sigma = 0.05;
    let g = BandProfile::heat_kernel(sigma, L_MAX);
    let triplets = all_triplets(L_MAX);
    let mut spectral_err = 0.0f64;
    for seed in 0..5u64 {
        let c = synthetic_cover_coeffs(L_MAX, 3, 600 + seed).unwrap();
        let x = inverse_sht(&low_contrast(&c, 0.5), H).unwrap();
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let b0 = bispectrum_vector(&forward_sht(&x, L_MAX), &triplets).unwrap();
        let y = attack_blur_spectral(&x, sigma, L_MAX).unwrap();
        let b = bispectrum_vector(&forward_sht(&y, L_MAX), &triplets).unwrap();
        let scale = b0.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for ((t, v0), v) in triplets.iter().zip(&b0.values).zip(&b.values) {
            let pred = v0 * (g.get(t.l1) * g.get(t.l2) * g.get(t.l3));
            spectral_err = spectral_err.max((v - pred).norm() / pred.norm().max(1e-6 * scale));
        }
    }

    // Spatial blur: per-degree attenuation, measured as the projection of the
    // blurred coefficients onto the clean ones, against the matched heat law.
    let l_check = 8;
    let hs = matched_heat_sigma(3.0, 7, H).unwrap();
    let gs = BandProfile::heat_kernel(hs, L_MAX);
    let mut num = vec![0.0; l_check + 1];
    let mut den = vec![0.0; l_check + 1];
    for seed in 0..10u64 {
        let c = synthetic_cover_coeffs(L_MAX, 3, 700 + seed).unwrap();
        let x = inverse_sht(&low_contrast(&c, 0.5), H).unwrap();
        let c0 = forward_sht(&x, L_MAX);
        let c1 = forward_sht(&attack_blur_spatial(&x, 3.0, 7).unwrap(), L_MAX);
        for l in 1..=l_check {
            let a = c0.restricted_to(&[l]);
            num[l] += a.dot_re(&c1.restricted_to(&[l]));
            den[l] += a.norm_sqr();
        }
    }
    let mut spatial_err = 0.0f64;
    let mut profile = Vec::new();
    for l in 1..=l_check {
        let ratio = num[l] / den[l];
        spatial_err = spatial_err.max((ratio - gs.get(l)).abs() / gs.get(l));
        profile.push(format!("{l}:{ratio:.3}/{:.3}", gs.get(l)));
    }
    report(
        5,
        "blur law",
        spectral_err <= 1e-10 && spatial_err <= 0.05,
        &format!(
            "spectral g-product max rel err {spectral_err:.2e} (<= 1e-10); spatial sigma=3,k=7 vs heat sigma {hs:.4}: max rel err {:.2}% for l <= 8 (<= 5%) [measured/predicted {}]",
            100.0 * spatial_err,
            profile.join(" ")
        ),
    );
}

/// Cover coefficients with the non-DC part scaled by `s`.
fn low_contrast(c: &ShCoefficients, s: f64) -> ShCoefficients {
    let mut out = c.scaled(s);
    for ch in 0..c.channels() {
        out.set(ch, 0, 0, c.get(ch, 0, 0));
    }
    out
}

/// Expected bias coefficient from the pair contractions
/// `E[eps_lm eps_l'm'] = (-1)^m sigma^2 delta_ll' delta_m,-m'`.
fn analytic_bias(c: &ShCoefficients, t: TripletIndex) -> f64 {
    let table = projection_table(t);
    let sign = |m: i64| if m.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    let mut q = 0.0;
    for ch in 0..c.channels() {
        for &(m1, m2, coef) in table.entries() {
            let m3 = -m1 - m2;
            if t.l1 == t.l2 && m2 == -m1 {
                q += coef * sign(m1) * c.get(ch, t.l3, m3).re;
            }
            if t.l1 == t.l3 && m3 == -m1 {
                q += coef * sign(m1) * c.get(ch, t.l2, m2).re;
            }
            if t.l2 == t.l3 && m3 == -m2 {
                q += coef * sign(m2) * c.get(ch, t.l1, m1).re;
            }
        }
    }
    q
}

#[test]
fn c06_noise_bias_law() {
    // Only blocks with a degree-0 slot carry a noise bias, so the fit runs on
    // all admissible triplets including degree 0.
    let l_max = 8;
    let triplets = all_triplets(l_max);
    let sigmas = [0.0, 0.02, 0.04, 0.06, 0.08];
    let mut min_r2 = f64::INFINITY;
    let mut worst_lambda = 0.0f64;
    let mut parts = Vec::new();
    for cover in 0..10u64 {
        let c = synthetic_cover_coeffs(l_max, 3, 800 + cover).unwrap();
        let fit = noise_bias_fit(&c, &sigmas, 200, &triplets, 900 + cover).unwrap();
        let clean = bispectrum_vector(&c, &triplets).unwrap().real_parts();
        let q: f64 = triplets.iter().zip(&clean).map(|(&t, v)| analytic_bias(&c, t) * v).sum();
        let lambda = q / clean.iter().map(|v| v * v).sum::<f64>();
        min_r2 = min_r2.min(fit.r_squared);
        worst_lambda = worst_lambda.max((fit.lambda - lambda).abs() / lambda.abs());
        parts.push(format!("{:.3}/{:.3}", fit.lambda, lambda));
    }
    report(
        6,
        "noise bias law",
        min_r2 >= 0.9 && worst_lambda <= 0.25,
        &format!(
            "10 covers x 200 trials: min R^2 {min_r2:.5} (>= 0.9); fitted/analytic lambda [{}], max rel dev {:.1}% (<= 25%)",
            parts.join(" "),
            100.0 * worst_lambda
        ),
    );
}

#[test]
fn c07_power_spectrum_ablation() {
    let report_ = ablate_power_spectrum(&CodecConfig::default(), &AblationConfig::default()).unwrap();
    let row = |k: usize| report_.rows.iter().find(|r| r.bits == k).unwrap();
    let (r16, r32) = (row(16), row(32));
    let pass = r32.bispectrum_accuracy >= 0.95
        && r32.bispectrum_accuracy - r32.power_accuracy >= 0.15
        && r16.bispectrum_accuracy >= 0.8
        && r16.power_accuracy >= 0.8
        && r16.bispectrum_accuracy >= r16.power_accuracy;
    report(
        7,
        "power-spectrum ablation",
        pass,
        &format!(
            "k=32 bispectrum {:.3} power {:.3} (>= 0.95, gap >= 0.15); k=16 bispectrum {:.3} power {:.3} (both >= 0.8, bispectrum >= power)",
            r32.bispectrum_accuracy, r32.power_accuracy, r16.bispectrum_accuracy, r16.power_accuracy
        ),
    );
}

fn factorial(n: i64) -> BigInt {
    (1..=n).fold(BigInt::one(), |acc, k| acc * k)
}

/// Racah's formula in exact rational arithmetic; the square root is taken
/// once, at the end, in floating point.
fn wigner_3j_exact(l1: i64, l2: i64, l3: i64, m1: i64, m2: i64, m3: i64) -> f64 {
    if m1 + m2 + m3 != 0 || m1.abs() > l1 || m2.abs() > l2 || m3.abs() > l3 {
        return 0.0;
    }
    if l3 < (l1 - l2).abs() || l3 > l1 + l2 {
        return 0.0;
    }
    let radicand = BigRational::new(
        factorial(l1 + l2 - l3)
            * factorial(l1 - l2 + l3)
            * factorial(-l1 + l2 + l3)
            * factorial(l1 + m1)
            * factorial(l1 - m1)
            * factorial(l2 + m2)
            * factorial(l2 - m2)
            * factorial(l3 + m3)
            * factorial(l3 - m3),
        factorial(l1 + l2 + l3 + 1),
    );
    let k_min = 0.max(l2 - l3 - m1).max(l1 - l3 + m2);
    let k_max = (l1 + l2 - l3).min(l1 - m1).min(l2 + m2);
    let mut sum = BigRational::zero();
    for k in k_min..=k_max {
        let d = factorial(k)
            * factorial(l1 + l2 - l3 - k)
            * factorial(l1 - m1 - k)
            * factorial(l2 + m2 - k)
            * factorial(l3 - l2 + m1 + k)
            * factorial(l3 - l1 - m2 + k);
        let term = BigRational::new(BigInt::one(), d);
        sum = if k % 2 == 0 { sum + term } else { sum - term };
    }
    if sum.is_zero() {
        return 0.0;
    }
    let sign = if (l1 - l2 - m3).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    let sum_sign = if sum.is_negative() { -1.0 } else { 1.0 };
    let square = &sum * &sum * radicand;
    sign * sum_sign * square.to_f64().unwrap().sqrt()
}

#[test]
fn c08_coupling_oracle() {
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for l1 in 0..=8i64 {
        for l2 in 0..=8i64 {
            for l3 in (l1 - l2).abs()..=(l1 + l2).min(8) {
                for m1 in -l1..=l1 {
                    for m2 in -l2..=l2 {
                        let m3 = -m1 - m2;
                        if m3.abs() > l3 {
                            continue;
                        }
                        let ours = wigner_3j(l1 as usize, l2 as usize, l3 as usize, m1, m2, m3);
                        worst = worst.max((ours - wigner_3j_exact(l1, l2, l3, m1, m2, m3)).abs());
                        checked += 1;
                    }
                }
            }
        }
    }

    let mut symmetry = 0.0f64;
    let mut selection = 0.0f64;
    for l1 in 0..=6usize {
        for l2 in 0..=6usize {
            for l3 in 0..=6usize {
                let parity = if (l1 + l2 + l3) % 2 == 0 { 1.0 } else { -1.0 };
                let (a, b, c) = (l1 as i64, l2 as i64, l3 as i64);
                for m1 in -a..=a {
                    for m2 in -b..=b {
                        for m3 in -c..=c {
                            let w = wigner_3j(l1, l2, l3, m1, m2, m3);
                            if m1 + m2 + m3 != 0 || l3 > l1 + l2 || l3 < l1.abs_diff(l2) {
                                selection = selection.max(w.abs());
                                continue;
                            }
                            let dev = [
                                wigner_3j(l2, l3, l1, m2, m3, m1) - w,
                                wigner_3j(l3, l1, l2, m3, m1, m2) - w,
                                wigner_3j(l2, l1, l3, m2, m1, m3) - parity * w,
                                wigner_3j(l1, l3, l2, m1, m3, m2) - parity * w,
                                wigner_3j(l3, l2, l1, m3, m2, m1) - parity * w,
                                wigner_3j(l1, l2, l3, -m1, -m2, -m3) - parity * w,
                            ];
                            symmetry = dev.iter().fold(symmetry, |s, d| s.max(d.abs()));
                        }
                    }
                }
            }
        }
    }
    report(
        8,
        "coupling oracle equivalence",
        worst <= 1e-12 && symmetry <= 1e-12 && selection == 0.0,
        &format!(
            "{checked} symbols vs exact Racah sum: max |diff| {worst:.2e} (<= 1e-12); permutation/sign symmetries to l=6 max dev {symmetry:.2e}; selection-rule zeros exact: {}",
            selection == 0.0
        ),
    );
}

#[test]
fn c09_transform_contracts() {
    let h = 4 * L_MAX;
    let w = quadrature_weights(h).unwrap();
    let mut parseval = 0.0f64;
    let mut round_trip = 0.0f64;
    for seed in 0..5u64 {
        let c = synth_random_bandlimited(L_MAX, 3, 1000 + seed, 1.0).unwrap();
        let x = inverse_sht(&c, h).unwrap();
        let mut energy = 0.0;
        for row in 0..h {
            for col in 0..2 * h {
                for ch in 0..3 {
                    energy += w.row(row) * x.get(row, col, ch).powi(2);
                }
            }
        }
        parseval = parseval.max((energy - c.norm_sqr()).abs() / c.norm_sqr());
        let back = inverse_sht(&forward_sht(&x, L_MAX), h).unwrap();
        round_trip = round_trip.max(back.max_abs_diff(&x));
    }

    let bridge = |h: usize| {
        let mut worst = 0.0f64;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let c = synth_random_bandlimited(L_MAX, 1, rng.gen(), 1.5).unwrap();
            let x = inverse_sht(&c, h).unwrap();
            let r = random_rotation(rng.gen());
            let from_image = forward_sht(&rotate_image(&x, &r), L_MAX);
            let from_coeffs = rotate_coeffs(&forward_sht(&x, L_MAX), &r).unwrap();
            for (a, b) in from_image.raw().iter().zip(from_coeffs.raw()) {
                worst = worst.max((a - b).norm());
            }
        }
        worst
    };
    let (bridge, bridge_2x) = (bridge(h), bridge(2 * h));
    report(
        9,
        "transform contracts",
        parseval <= 1e-6 && round_trip <= 1e-5 && bridge <= 1e-3,
        &format!(
            "H = {h}: Parseval rel err {parseval:.2e} (<= 1e-6), round trip max err {round_trip:.2e} (<= 1e-5), equivariance bridge max coeff err {bridge:.2e} (<= 1e-3; {bridge_2x:.2e} at H = {})",
            2 * h
        ),
    );
}

#[test]
fn c10_decoder_gradient_check() {
    let cfg = CodecConfig::default();
    let family = HostFamily::default();
    let data = generate_dataset(&family, &cfg, 7, 0, 200, FeatureKind::Bispectrum).unwrap();
    let train_cfg = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    let (dec, _) = train(&data, &train_cfg).unwrap();
    let held_out = generate_dataset(&family, &cfg, 7, 10_000, 20, FeatureKind::Bispectrum).unwrap();
    let worst = held_out
        .iter()
        .map(|s| gradient_check(&dec, s, 1e-5).unwrap())
        .fold(0.0f64, f64::max);
    report(
        10,
        "decoder gradient check",
        worst <= 1e-4,
        &format!("20 held-out samples, {} weights: max rel err {worst:.2e} (<= 1e-4)", dec.bits() * (dec.feature_len() + 1)),
    );
}

fn sphmark(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_sphmark"))
        .args(args)
        .current_dir(dir)
        .env("SPHMARK_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "sphmark {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn c11_determinism() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        sphmark(
            d,
            &[
                "embed", "--synthetic", "5", "--output", "marked.ppm", "--seed", "9", "--key", "3", "--coef", "marked.coef",
                "--report", "embed.csv",
            ],
        );
        sphmark(d, &["attack", "--input", "marked.ppm", "--spec", "mixed:[rotate:random;noise:std=0.02]", "--output", "attacked.ppm", "--seed", "4"]);
        sphmark(d, &["extract", "--input", "attacked.ppm", "--side", "marked.sig.json", "--report", "extract.csv"]);
        sphmark(
            d,
            &[
                "bench", "--covers", "2", "--attack", "rotate:random", "--attack", "noise:std=0.05", "--alphas", "0.25,0.5", "--seed",
                "6", "--out-dir", "bench",
            ],
        );
        let files = snapshot(d);
        (dir, files)
    };
    let (_a, first) = run();
    let (_b, second) = run();
    let names: Vec<&str> = first.iter().map(|f| f.0.as_str()).collect();
    let identical = first == second;
    report(
        11,
        "determinism",
        identical && first.len() >= 8,
        &format!("embed/attack/extract/bench rerun: {} files byte-identical: {identical} [{}]", first.len(), names.join(", ")),
    );
}

