//! Wigner 3j symbols, trivial-irrep projection coefficients and the
//! third-order (bispectrum) invariants built from them.
//!
//! For a triplet of degrees `(l1, l2, l3)` the projection of
//! `V_l1 (x) V_l2 (x) V_l3` onto the trivial representation is
//!
//! ```text
//! C(m1, m2, m3) = sqrt((2l1+1)(2l2+1)(2l3+1) / 4pi)
//!                 * (l1 l2 l3; 0 0 0) * (l1 l2 l3; m1 m2 m3)
//! ```
//!
//! and the invariant of a coefficient set is
//! `I = sum_{m1+m2+m3=0} C(m1, m2, m3) c_l1^m1 c_l2^m2 c_l3^m3`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonics::ShCoefficients;

/// Largest argument covered by the log-factorial table.
pub const LOG_FACTORIAL_MAX: usize = 300;

fn log_factorial_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = Vec::with_capacity(LOG_FACTORIAL_MAX + 1);
        let mut acc = 0.0f64;
        t.push(0.0);
        for k in 1..=LOG_FACTORIAL_MAX {
            acc += (k as f64).ln();
            t.push(acc);
        }
        t
    })
}

/// `ln(n!)` from a cumulative table.
pub fn log_factorial(n: usize) -> Result<f64> {
    log_factorial_table()
        .get(n)
        .copied()
        .ok_or_else(|| Error::invalid(format!("log_factorial argument {n} exceeds table size {LOG_FACTORIAL_MAX}")))
}

#[inline]
pub(crate) fn lf(n: i64) -> f64 {
    log_factorial_table()[n as usize]
}

/// Wigner 3j symbol via the Racah sum, magnitudes in log space.
///
/// Returns exactly `0.0` when a selection rule fails (triangle inequality,
/// `m1 + m2 + m3 = 0`, `|m_i| <= l_i`).
pub fn wigner_3j(l1: usize, l2: usize, l3: usize, m1: i64, m2: i64, m3: i64) -> f64 {
    let (j1, j2, j3) = (l1 as i64, l2 as i64, l3 as i64);
    if m1 + m2 + m3 != 0 || m1.abs() > j1 || m2.abs() > j2 || m3.abs() > j3 {
        return 0.0;
    }
    if j3 < (j1 - j2).abs() || j3 > j1 + j2 {
        return 0.0;
    }
    // (l1 l2 l3; 0 0 0) vanishes for odd l1 + l2 + l3
    if m1 == 0 && m2 == 0 && (j1 + j2 + j3) % 2 != 0 {
        return 0.0;
    }
    let log_delta = lf(j1 + j2 - j3) + lf(j1 - j2 + j3) + lf(-j1 + j2 + j3) - lf(j1 + j2 + j3 + 1);
    let log_pref = 0.5
        * (log_delta
            + lf(j1 + m1)
            + lf(j1 - m1)
            + lf(j2 + m2)
            + lf(j2 - m2)
            + lf(j3 + m3)
            + lf(j3 - m3));
    let k_min = 0.max(j2 - j3 - m1).max(j1 - j3 + m2);
    let k_max = (j1 + j2 - j3).min(j1 - m1).min(j2 + m2);
    let mut sum = 0.0;
    for k in k_min..=k_max {
        let log_den = lf(k)
            + lf(j3 - j2 + k + m1)
            + lf(j3 - j1 + k - m2)
            + lf(j1 + j2 - j3 - k)
            + lf(j1 - k - m1)
            + lf(j2 - k + m2);
        let term = (log_pref - log_den).exp();
        if k % 2 == 0 {
            sum += term;
        } else {
            sum -= term;
        }
    }
    if (j1 - j2 - m3).rem_euclid(2) == 1 {
        -sum
    } else {
        sum
    }
}

/// Ordered degree triplet `l1 <= l2 <= l3` (not enforced for ad-hoc use).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripletIndex {
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
}

impl TripletIndex {
    pub fn new(l1: usize, l2: usize, l3: usize) -> Self {
        Self { l1, l2, l3 }
    }

    pub fn satisfies_triangle(&self) -> bool {
        let (a, b, c) = (self.l1 as i64, self.l2 as i64, self.l3 as i64);
        (a - b).abs() <= c && c <= a + b
    }

    pub fn is_admissible(&self) -> bool {
        self.satisfies_triangle() && (self.l1 + self.l2 + self.l3) % 2 == 0
    }

    pub fn max_degree(&self) -> usize {
        self.l1.max(self.l2).max(self.l3)
    }

    pub fn degrees(&self) -> [usize; 3] {
        [self.l1, self.l2, self.l3]
    }
}

impl std::fmt::Display for TripletIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.l1, self.l2, self.l3)
    }
}

/// `C(m1, m2, m3)` for `m1 + m2 + m3 = 0`, one entry per `(m1, m2)` pair with
/// `|m1 + m2| <= l3`.
#[derive(Debug, Clone)]
pub struct TrivialProjectionTable {
    triplet: TripletIndex,
    entries: Vec<(i64, i64, f64)>,
}

impl TrivialProjectionTable {
    pub fn build(t: TripletIndex) -> Self {
        let (l1, l2, l3) = (t.l1 as i64, t.l2 as i64, t.l3 as i64);
        let mut entries = Vec::new();
        for m1 in -l1..=l1 {
            for m2 in -l2..=l2 {
                let m3 = -m1 - m2;
                if m3.abs() > l3 {
                    continue;
                }
                let v = trivial_projection_coeff(t, m1, m2, m3);
                if v != 0.0 {
                    entries.push((m1, m2, v));
                }
            }
        }
        Self { triplet: t, entries }
    }

    pub fn triplet(&self) -> TripletIndex {
        self.triplet
    }

    /// Nonzero `(m1, m2, C)` entries; `m3 = -m1 - m2`.
    pub fn entries(&self) -> &[(i64, i64, f64)] {
        &self.entries
    }

    pub fn get(&self, m1: i64, m2: i64, m3: i64) -> f64 {
        if m1 + m2 + m3 != 0 {
            return 0.0;
        }
        self.entries
            .iter()
            .find(|(a, b, _)| *a == m1 && *b == m2)
            .map_or(0.0, |e| e.2)
    }

    /// `sum C a_l1^m1 b_l2^m2 c_l3^m3` over blocks indexed `m + l`.
    pub fn contract(&self, a: &[Complex64], b: &[Complex64], c: &[Complex64]) -> Complex64 {
        let t = self.triplet;
        let (o1, o2, o3) = (t.l1 as i64, t.l2 as i64, t.l3 as i64);
        let mut acc = Complex64::new(0.0, 0.0);
        for &(m1, m2, coeff) in &self.entries {
            let m3 = -m1 - m2;
            acc += a[(m1 + o1) as usize] * b[(m2 + o2) as usize] * c[(m3 + o3) as usize] * coeff;
        }
        acc
    }
}

/// Shared, lazily built projection table for `t`.
pub fn projection_table(t: TripletIndex) -> Arc<TrivialProjectionTable> {
    static CACHE: OnceLock<RwLock<HashMap<TripletIndex, Arc<TrivialProjectionTable>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| RwLock::new(HashMap::new()));
    if let Some(table) = cache.read().expect("projection cache poisoned").get(&t) {
        return Arc::clone(table);
    }
    let table = Arc::new(TrivialProjectionTable::build(t));
    cache
        .write()
        .expect("projection cache poisoned")
        .entry(t)
        .or_insert(table)
        .clone()
}

pub fn trivial_projection_coeff(t: TripletIndex, m1: i64, m2: i64, m3: i64) -> f64 {
    if m1 + m2 + m3 != 0 {
        return 0.0;
    }
    let pref = (((2 * t.l1 + 1) * (2 * t.l2 + 1) * (2 * t.l3 + 1)) as f64 / (4.0 * PI)).sqrt();
    pref * wigner_3j(t.l1, t.l2, t.l3, 0, 0, 0) * wigner_3j(t.l1, t.l2, t.l3, m1, m2, m3)
}

/// All `l1 <= l2 <= l3` drawn from `degrees` that satisfy the triangle
/// inequality with even degree sum, in lexicographic order.
pub fn admissible_triplets(degrees: &[usize], l_max: usize) -> Result<Vec<TripletIndex>> {
    let mut ls: Vec<usize> = degrees.to_vec();
    ls.sort_unstable();
    ls.dedup();
    if let Some(&bad) = ls.iter().find(|&&l| l > l_max) {
        return Err(Error::invalid(format!("degree {bad} exceeds l_max {l_max}")));
    }
    let mut out = Vec::new();
    for (i, &l1) in ls.iter().enumerate() {
        for (j, &l2) in ls.iter().enumerate().skip(i) {
            for &l3 in ls.iter().skip(j) {
                let t = TripletIndex::new(l1, l2, l3);
                if t.is_admissible() {
                    out.push(t);
                }
            }
        }
    }
    Ok(out)
}

/// Every admissible triplet with degrees in `0..=l_max`.
pub fn all_triplets(l_max: usize) -> Vec<TripletIndex> {
    let all: Vec<usize> = (0..=l_max).collect();
    admissible_triplets(&all, l_max).expect("degrees within range")
}

/// Admissible triplets over degrees `1..=l_max`: the image descriptor
/// without the mean-brightness block.
pub fn descriptor_triplets(l_max: usize) -> Vec<TripletIndex> {
    let degrees: Vec<usize> = (1..=l_max).collect();
    admissible_triplets(&degrees, l_max).expect("degrees within range")
}

fn check_triplet(c: &ShCoefficients, t: TripletIndex) -> Result<()> {
    if !t.is_admissible() {
        return Err(Error::invalid(format!("triplet {t} is not admissible")));
    }
    if t.max_degree() > c.l_max() {
        return Err(Error::invalid(format!("triplet {t} exceeds l_max {}", c.l_max())));
    }
    Ok(())
}

/// `I_{l1,l2,l3}` summed over channels.
pub fn bispectrum_component(c: &ShCoefficients, t: TripletIndex) -> Result<Complex64> {
    check_triplet(c, t)?;
    let table = projection_table(t);
    Ok((0..c.channels())
        .map(|ch| table.contract(c.block(ch, t.l1), c.block(ch, t.l2), c.block(ch, t.l3)))
        .sum())
}

/// Per-triplet invariants in a fixed triplet order, plus their total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BispectrumVector {
    pub triplets: Vec<TripletIndex>,
    pub values: Vec<Complex64>,
    pub total: Complex64,
}

impl BispectrumVector {
    pub fn new(triplets: Vec<TripletIndex>, values: Vec<Complex64>) -> Self {
        let total = values.iter().sum();
        Self {
            triplets,
            values,
            total,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn real_parts(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.re).collect()
    }

    /// Largest `|Im I_t| / (|I_t| + 1e-30)`.
    pub fn max_imag_ratio(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v.im.abs() / (v.norm() + 1e-30))
            .fold(0.0, f64::max)
    }
}

pub fn bispectrum_vector(c: &ShCoefficients, triplets: &[TripletIndex]) -> Result<BispectrumVector> {
    let values = triplets
        .iter()
        .map(|&t| bispectrum_component(c, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(BispectrumVector::new(triplets.to_vec(), values))
}

/// First-order change of each `I_t` under `c -> c + delta`: the three
/// single-slot substitutions of the trilinear form, no `O(delta^2)` terms.
pub fn perturbation_sensitivity(
    c: &ShCoefficients,
    delta: &ShCoefficients,
    triplets: &[TripletIndex],
) -> Result<Vec<Complex64>> {
    c.check_compatible(delta)?;
    triplets
        .iter()
        .map(|&t| {
            check_triplet(c, t)?;
            let table = projection_table(t);
            Ok((0..c.channels())
                .map(|ch| {
                    let (a1, a2, a3) = (c.block(ch, t.l1), c.block(ch, t.l2), c.block(ch, t.l3));
                    let (d1, d2, d3) = (delta.block(ch, t.l1), delta.block(ch, t.l2), delta.block(ch, t.l3));
                    table.contract(d1, a2, a3) + table.contract(a1, d2, a3) + table.contract(a1, a2, d3)
                })
                .sum())
        })
        .collect()
}

/// `[P(l) for l in degrees]`, summed over channels.
pub fn power_spectrum_features(c: &ShCoefficients, degrees: &[usize]) -> Result<Vec<f64>> {
    degrees
        .iter()
        .map(|&l| {
            if l > c.l_max() {
                Err(Error::invalid(format!("degree {l} exceeds l_max {}", c.l_max())))
            } else {
                Ok(c.degree_energy(l))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmonics::synth_random_bandlimited;

    #[test]
    fn log_factorial_values() {
        assert_eq!(log_factorial(0).unwrap(), 0.0);
        assert!((log_factorial(5).unwrap() - 120f64.ln()).abs() < 1e-14);
        let a = log_factorial(169).unwrap();
        let b = log_factorial(170).unwrap();
        assert!(b.is_finite() && b > a);
        assert!(log_factorial(LOG_FACTORIAL_MAX + 1).is_err());
    }

    #[test]
    fn known_3j_values() {
        assert!((wigner_3j(0, 0, 0, 0, 0, 0) - 1.0).abs() < 1e-15);
        assert!((wigner_3j(1, 1, 0, 0, 0, 0) + 1.0 / 3f64.sqrt()).abs() < 1e-14);
        assert!((wigner_3j(2, 2, 2, 0, 0, 0) + (2.0f64 / 35.0).sqrt()).abs() < 1e-14);
        assert_eq!(wigner_3j(1, 1, 1, 0, 0, 0), 0.0);
        assert_eq!(wigner_3j(2, 3, 4, 0, 0, 0), 0.0);
        assert_eq!(wigner_3j(1, 1, 3, 0, 0, 0), 0.0);
        assert_eq!(wigner_3j(2, 2, 2, 1, 1, 0), 0.0);
    }

    fn sign(p: i64) -> f64 {
        if p.rem_euclid(2) == 0 {
            1.0
        } else {
            -1.0
        }
    }

    #[test]
    fn symmetries_exhaustive_to_six() {
        for l1 in 0..=6usize {
            for l2 in 0..=6usize {
                for l3 in 0..=6usize {
                    let s = sign((l1 + l2 + l3) as i64);
                    for m1 in -(l1 as i64)..=l1 as i64 {
                        for m2 in -(l2 as i64)..=l2 as i64 {
                            let m3 = -m1 - m2;
                            if m3.abs() > l3 as i64 {
                                continue;
                            }
                            let v = wigner_3j(l1, l2, l3, m1, m2, m3);
                            // even (cyclic) permutations
                            assert!((wigner_3j(l2, l3, l1, m2, m3, m1) - v).abs() < 1e-13);
                            assert!((wigner_3j(l3, l1, l2, m3, m1, m2) - v).abs() < 1e-13);
                            // odd permutation and m -> -m
                            assert!((wigner_3j(l2, l1, l3, m2, m1, m3) - s * v).abs() < 1e-13);
                            assert!((wigner_3j(l1, l2, l3, -m1, -m2, -m3) - s * v).abs() < 1e-13);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn orthogonality_to_eight() {
        for l1 in 0..=8usize {
            for l2 in 0..=8usize {
                let lo = l1.abs_diff(l2);
                for l3 in lo..=(l1 + l2).min(8) {
                    for l3p in lo..=(l1 + l2).min(8) {
                        for m3 in -(l3 as i64)..=l3 as i64 {
                            if m3.abs() > l3p as i64 {
                                continue;
                            }
                            let mut s = 0.0;
                            for m1 in -(l1 as i64)..=l1 as i64 {
                                let m2 = -m1 - m3;
                                if m2.abs() > l2 as i64 {
                                    continue;
                                }
                                s += wigner_3j(l1, l2, l3, m1, m2, m3) * wigner_3j(l1, l2, l3p, m1, m2, m3);
                            }
                            let expect = if l3 == l3p { 1.0 / (2 * l3 + 1) as f64 } else { 0.0 };
                            assert!((s - expect).abs() < 1e-10, "({l1},{l2},{l3},{l3p},{m3}) {s}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn projection_coefficient_values() {
        let t = TripletIndex::new(0, 0, 0);
        assert!((trivial_projection_coeff(t, 0, 0, 0) - (1.0 / (4.0 * PI)).sqrt()).abs() < 1e-15);
        let t = TripletIndex::new(2, 2, 2);
        assert_eq!(trivial_projection_coeff(t, 1, 1, 1), 0.0);
        let table = projection_table(t);
        assert_eq!(table.get(1, 1, 1), 0.0);
        assert!((table.get(1, -1, 0) - trivial_projection_coeff(t, 1, -1, 0)).abs() < 1e-15);
    }

    #[test]
    fn triplet_enumeration() {
        let ts = admissible_triplets(&[6, 8, 14], 16).unwrap();
        for want in [(6, 8, 14), (6, 6, 6), (8, 8, 8), (14, 14, 14), (6, 6, 8), (6, 8, 8), (8, 8, 14)] {
            assert!(ts.contains(&TripletIndex::new(want.0, want.1, want.2)), "{want:?}");
        }
        assert!(!ts.contains(&TripletIndex::new(6, 6, 14)));
        let mut sorted = ts.clone();
        sorted.sort();
        assert_eq!(sorted, ts);
        assert_eq!(ts.len(), 9);
        assert_eq!(admissible_triplets(&[0], 4).unwrap(), vec![TripletIndex::new(0, 0, 0)]);
        assert!(admissible_triplets(&[1], 4).unwrap().is_empty());
        assert!(admissible_triplets(&[5], 4).is_err());
    }

    #[test]
    fn component_multilinearity() {
        let c = synth_random_bandlimited(8, 2, 11, 1.0).unwrap();
        let t = TripletIndex::new(2, 4, 6);
        let base = bispectrum_component(&c, t).unwrap();
        let s = 1.7;
        let scaled = bispectrum_component(&c.scaled(s), t).unwrap();
        assert!((scaled - base * s.powi(3)).norm() <= 1e-12 * base.norm().max(1.0));
        let zeroed = c.restricted_to(&[2, 6]);
        assert_eq!(bispectrum_component(&zeroed, t).unwrap(), Complex64::new(0.0, 0.0));
        assert!(bispectrum_component(&c, TripletIndex::new(1, 1, 1)).is_err());
        assert!(bispectrum_component(&c, TripletIndex::new(6, 8, 10)).is_err());
    }

    #[test]
    fn empty_vector() {
        let c = synth_random_bandlimited(4, 1, 1, 1.5).unwrap();
        let v = bispectrum_vector(&c, &[]).unwrap();
        assert!(v.is_empty());
        assert_eq!(v.total, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn sensitivity_matches_central_difference() {
        let c = synth_random_bandlimited(16, 3, 5, 1.5).unwrap();
        let d = synth_random_bandlimited(16, 3, 6, 1.5).unwrap().restricted_to(&[6, 8, 14]);
        let ts = admissible_triplets(&[6, 8, 14], 16).unwrap();
        let lin = perturbation_sensitivity(&c, &d, &ts).unwrap();
        let eps = 1e-4;
        let plus = bispectrum_vector(&c.add_scaled(&d, eps).unwrap(), &ts).unwrap();
        let minus = bispectrum_vector(&c.add_scaled(&d, -eps).unwrap(), &ts).unwrap();
        let mut any_nonzero = false;
        for i in 0..ts.len() {
            let fd = (plus.values[i] - minus.values[i]) / (2.0 * eps);
            assert!((fd - lin[i]).norm() <= 1e-4 * lin[i].norm().max(1e-12), "{}", ts[i]);
            any_nonzero |= lin[i].norm() > 0.0;
        }
        assert!(any_nonzero);
        let zero = perturbation_sensitivity(&c, &c.scaled(0.0), &ts).unwrap();
        assert!(zero.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn realness_of_real_signals() {
        let c = synth_random_bandlimited(16, 3, 9, 1.5).unwrap();
        let v = bispectrum_vector(&c, &all_triplets(10)).unwrap();
        assert!(v.max_imag_ratio() < 1e-8);
    }
}
