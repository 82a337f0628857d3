//! Statistical self-checks with fixed seeds.
//!
//! Each check measures one property of the hypervector machinery and
//! compares it with the value the probability model predicts.

use std::f64::consts::PI;
use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::hdcore::{bundle, Hypervector, TieRule};
use crate::lsh::{LshProjector, ProjectorRole};
use crate::matrix::Matrix;
use crate::rng::{counter_rng, fill_gaussian};

const DOMAIN_SELFTEST: u64 = 0x4844_5345_4c46_5445;

#[derive(Debug, Clone, Serialize)]
pub struct SelftestConfig {
    pub beta: usize,
    pub seed: u64,
    /// Random pairs for the orthogonality check.
    pub pairs: usize,
    /// Vector pairs per angle for the collision curve.
    pub lsh_pairs: usize,
    pub lsh_input_dims: usize,
    /// Vectors bundled in the membership check (odd avoids ties).
    pub bundle_size: usize,
    pub bundle_probes: usize,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        Self {
            beta: 50_000,
            seed: 7,
            pairs: 200,
            lsh_pairs: 50,
            lsh_input_dims: 64,
            bundle_size: 15,
            bundle_probes: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyReport {
    pub name: String,
    pub measured: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for PropertyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} measured={:.6} expected={:.6} tol={:.6} {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.expected,
            self.tolerance,
            self.detail
        )
    }
}

fn sigma(p: f64, beta: usize) -> f64 {
    (p * (1.0 - p) / beta as f64).sqrt()
}

fn random_hv(seed: u64, index: u64, beta: usize) -> Hypervector {
    Hypervector::random(beta, &mut counter_rng(seed, DOMAIN_SELFTEST, index))
}

/// Every pair of independent random hypervectors sits within 5σ of 0.5.
/// `measured` is the worst pair.
pub fn orthogonality(cfg: &SelftestConfig) -> PropertyReport {
    let tol = 5.0 * sigma(0.5, cfg.beta);
    let distances: Vec<f64> = (0..cfg.pairs as u64)
        .into_par_iter()
        .map(|i| {
            let a = random_hv(cfg.seed, 2 * i, cfg.beta);
            let b = random_hv(cfg.seed, 2 * i + 1, cfg.beta);
            a.normalized_hamming(&b).expect("same dims")
        })
        .collect();
    let worst = distances
        .iter()
        .copied()
        .max_by(|x, y| (x - 0.5).abs().total_cmp(&(y - 0.5).abs()))
        .unwrap_or(0.5);
    let outside = distances.iter().filter(|d| (*d - 0.5).abs() > tol).count();
    PropertyReport {
        name: "orthogonality".into(),
        measured: worst,
        expected: 0.5,
        tolerance: tol,
        pass: outside == 0,
        detail: format!("{} pairs, {outside} outside", cfg.pairs),
    }
}

/// A pair of unit vectors at angle `theta`, built from two Gaussian draws
/// by Gram-Schmidt.
pub fn unit_pair_at_angle(seed: u64, index: u64, dims: usize, theta: f64) -> (Vec<f32>, Vec<f32>) {
    let mut rng = counter_rng(seed, DOMAIN_SELFTEST ^ 0xa5a5, index);
    let mut x = vec![0f32; dims];
    let mut u = vec![0f32; dims];
    fill_gaussian(&mut rng, &mut x);
    fill_gaussian(&mut rng, &mut u);
    let mut x: Vec<f64> = x.into_iter().map(f64::from).collect();
    let mut u: Vec<f64> = u.into_iter().map(f64::from).collect();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v /= nx);
    let proj: f64 = x.iter().zip(&u).map(|(a, b)| a * b).sum();
    u.iter_mut().zip(&x).for_each(|(b, a)| *b -= proj * a);
    let nu = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= nu);
    let (c, s) = (theta.cos(), theta.sin());
    let y: Vec<f32> = x.iter().zip(&u).map(|(a, b)| (c * a + s * b) as f32).collect();
    (x.into_iter().map(|v| v as f32).collect(), y)
}

#[derive(Debug, Clone, Serialize)]
pub struct AngleMeasurement {
    pub theta: f64,
    pub expected: f64,
    pub mean: f64,
    pub sigma: f64,
    /// Pairs whose own distance lies outside 3σ.
    pub pairs_outside: usize,
}

/// Mean normalized Hamming distance after projection for pairs at each angle.
pub fn lsh_angles(cfg: &SelftestConfig, thetas: &[f64]) -> Vec<AngleMeasurement> {
    let lsh = LshProjector::new(cfg.seed, ProjectorRole::Caption, cfg.lsh_input_dims, cfg.beta)
        .expect("non-empty dims");
    let n = cfg.lsh_pairs;
    let mut rows = Vec::with_capacity(thetas.len() * n * 2);
    for (a, &theta) in thetas.iter().enumerate() {
        for i in 0..n {
            let (x, y) = unit_pair_at_angle(cfg.seed, (a * n + i) as u64, cfg.lsh_input_dims, theta);
            rows.push(x);
            rows.push(y);
        }
    }
    let hvs = lsh
        .project_block(&Matrix::from_rows(&rows).expect("uniform rows"))
        .expect("dims checked");
    thetas
        .iter()
        .enumerate()
        .map(|(a, &theta)| {
            let p = theta / PI;
            let s = sigma(p, cfg.beta);
            let ds: Vec<f64> = (0..n)
                .map(|i| {
                    let k = 2 * (a * n + i);
                    hvs[k].normalized_hamming(&hvs[k + 1]).expect("same dims")
                })
                .collect();
            AngleMeasurement {
                theta,
                expected: p,
                mean: ds.iter().sum::<f64>() / n as f64,
                sigma: s,
                pairs_outside: ds.iter().filter(|d| (*d - p).abs() > 3.0 * s).count(),
            }
        })
        .collect()
}

pub const LSH_ANGLES: [f64; 4] = [PI / 8.0, PI / 4.0, PI / 2.0, 3.0 * PI / 4.0];

/// Collision curve: for each angle the mean distance is within 3σ of θ/π.
/// `measured` is the largest deviation in units of σ.
pub fn lsh_collision(cfg: &SelftestConfig) -> PropertyReport {
    let ms = lsh_angles(cfg, &LSH_ANGLES);
    let worst = ms
        .iter()
        .map(|m| (m.mean - m.expected).abs() / m.sigma)
        .fold(0.0, f64::max);
    let detail = ms
        .iter()
        .map(|m| format!("θ/π={:.3}:{:.4}", m.expected, m.mean))
        .collect::<Vec<_>>()
        .join(" ");
    PropertyReport {
        name: "lsh_collision_curve".into(),
        measured: worst,
        expected: 0.0,
        tolerance: 3.0,
        pass: worst <= 3.0,
        detail,
    }
}

/// Probability that a member agrees with the majority of `k` (odd) random
/// bipolar vectors in one component.
pub fn bundle_agreement(k: usize) -> f64 {
    let m = k - 1;
    let mut c = 1.0f64;
    for i in 0..m / 2 {
        c = c * (m - i) as f64 / (i + 1) as f64;
    }
    0.5 + c / 2f64.powi(k as i32)
}

/// Members of a bundle sit at the predicted distance from it, and every
/// member is closer than every non-member.
pub fn bundle_membership(cfg: &SelftestConfig) -> PropertyReport {
    let k = cfg.bundle_size | 1;
    let base = 1_000_000u64;
    let members: Vec<Hypervector> = (0..k as u64).map(|i| random_hv(cfg.seed, base + i, cfg.beta)).collect();
    let b = bundle(cfg.beta, &members, TieRule::Positive).expect("same dims");
    let member_d: Vec<f64> = members.iter().map(|m| m.normalized_hamming(&b).unwrap()).collect();
    let probe_d: Vec<f64> = (0..cfg.bundle_probes as u64)
        .map(|i| random_hv(cfg.seed, base + k as u64 + i, cfg.beta).normalized_hamming(&b).unwrap())
        .collect();
    let expected = 1.0 - bundle_agreement(k);
    let tol = 5.0 * sigma(expected, cfg.beta);
    let mean = member_d.iter().sum::<f64>() / k as f64;
    let max_member = member_d.iter().copied().fold(0.0, f64::max);
    let min_probe = probe_d.iter().copied().fold(1.0, f64::min);
    PropertyReport {
        name: "bundle_membership".into(),
        measured: mean,
        expected,
        tolerance: tol,
        pass: (mean - expected).abs() <= tol && max_member < min_probe,
        detail: format!("k={k} max_member={max_member:.4} min_nonmember={min_probe:.4}"),
    }
}

pub fn run_all(cfg: &SelftestConfig) -> Vec<PropertyReport> {
    vec![orthogonality(cfg), lsh_collision(cfg), bundle_membership(cfg)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agreement_matches_enumeration() {
        for k in [1usize, 3, 5, 7] {
            let mut agree = 0u64;
            for bits in 0u32..(1 << k) {
                let ones = bits.count_ones() as usize;
                let majority = 2 * ones > k;
                if (bits & 1 == 1) == majority {
                    agree += 1;
                }
            }
            let exact = agree as f64 / (1u64 << k) as f64;
            assert!((bundle_agreement(k) - exact).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn angle_pairs_have_requested_angle() {
        for theta in LSH_ANGLES {
            let (x, y) = unit_pair_at_angle(1, 3, 32, theta);
            let c = crate::matrix::cosine(&x, &y);
            assert!((c - theta.cos()).abs() < 1e-5);
        }
    }

    #[test]
    fn small_selftest_passes() {
        let cfg = SelftestConfig {
            beta: 8192,
            pairs: 50,
            lsh_pairs: 10,
            ..Default::default()
        };
        for r in run_all(&cfg) {
            assert!(r.pass, "{r}");
        }
    }
}
