//! Privacy accounting for projected messages and for the Gaussian mechanism,
//! plus Monte-Carlo checks of the bounds the accountant relies on.
//!
//! For a single round the projected protocol is `(eps, delta)`-DP with
//!
//! ```text
//! eps = (Δ / σ_min) (m + sqrt(8 m ln(1/δ)))
//! ```
//!
//! and the Gaussian baseline with `eps = Δ sqrt(2 ln(1.25/δ)) / σ`. Rounds
//! compose linearly.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::projection::{project, ProjectionSpec};
use crate::rng::{self, Purpose};
use crate::vector::{dot, norm2, ParamVector};

/// Monte-Carlo work is split into this many independently seeded slices, so
/// results do not depend on the thread count.
const PARTITIONS: usize = 32;

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FedRpBudget {
    pub delta_sensitivity: f64,
    pub sigma_min: f64,
    pub m: usize,
    pub delta: f64,
    pub rounds: u32,
}

impl FedRpBudget {
    pub fn validate(&self) -> Result<()> {
        check_delta(self.delta)?;
        if !(self.sigma_min > 0.0 && self.sigma_min.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma_min must be positive, got {}", self.sigma_min)));
        }
        if !(self.delta_sensitivity >= 0.0 && self.delta_sensitivity.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sensitivity must be non-negative, got {}",
                self.delta_sensitivity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianBudget {
    pub delta_sensitivity: f64,
    pub sigma: f64,
    pub delta: f64,
}

/// Single-round epsilon of the projected protocol. `m = 0` gives zero.
pub fn epsilon_fedrp(b: &FedRpBudget) -> Result<f64> {
    b.validate()?;
    let m = b.m as f64;
    Ok(b.delta_sensitivity / b.sigma_min * (m + (8.0 * m * (1.0 / b.delta).ln()).sqrt()))
}

/// Single-round epsilon of the Gaussian mechanism.
pub fn epsilon_gaussian(b: &GaussianBudget) -> Result<f64> {
    check_delta(b.delta)?;
    if !(b.sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("noise sigma must be positive, got {}", b.sigma)));
    }
    Ok(b.delta_sensitivity * (2.0 * (1.25 / b.delta).ln()).sqrt() / b.sigma)
}

pub fn compose_linear(eps_per_round: f64, rounds: u32) -> f64 {
    eps_per_round * rounds as f64
}

/// Rescales `w` up to norm `sigma_min` if it is shorter.
pub fn enforce_sigma_min(w: ParamVector, sigma_min: f64) -> Result<ParamVector> {
    if !(sigma_min > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_min must be positive, got {sigma_min}")));
    }
    let norm = norm2(&w);
    if norm == 0.0 {
        return Err(Error::InvalidArgument("cannot rescale the zero vector to sigma_min".into()));
    }
    if norm >= sigma_min {
        return Ok(w);
    }
    let scale = sigma_min / norm;
    Ok(ParamVector::from(w.iter().map(|x| x * scale).collect::<Vec<_>>()))
}

/// `ln p(z) - ln p'(z)` for `z ~ N(0, v ||w||^2 I)` versus `N(0, v ||w'||^2 I)`.
pub fn log_density_ratio(norm_w: f64, norm_w_prime: f64, z: &[f64], entry_variance: f64) -> Result<f64> {
    if !(norm_w > 0.0 && norm_w_prime > 0.0) {
        return Err(Error::InvalidArgument("parameter norms must be positive".into()));
    }
    if !(entry_variance > 0.0) {
        return Err(Error::InvalidArgument("entry variance must be positive".into()));
    }
    let m = z.len() as f64;
    let zz = dot(z, z);
    Ok(m * (norm_w_prime / norm_w).ln()
        - zz / (2.0 * entry_variance) * (1.0 / (norm_w * norm_w) - 1.0 / (norm_w_prime * norm_w_prime)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DpReport {
    pub epsilon: f64,
    pub trials: u64,
    pub upper_bound_violations: u64,
    pub lower_tail_mass: f64,
    /// `3 sqrt(δ(1-δ)/trials)`.
    pub margin: f64,
    pub max_log_ratio: f64,
    pub pass: bool,
}

struct Tally {
    upper: u64,
    lower: u64,
    max: f64,
}

impl Default for Tally {
    fn default() -> Self {
        Self {
            upper: 0,
            lower: 0,
            max: f64::NEG_INFINITY,
        }
    }
}

impl Tally {
    fn merge(self, o: Tally) -> Tally {
        Tally {
            upper: self.upper + o.upper,
            lower: self.lower + o.lower,
            max: self.max.max(o.max),
        }
    }
}

fn partition_range(trials: u64, p: usize) -> u64 {
    let base = trials / PARTITIONS as u64;
    base + u64::from((p as u64) < trials % PARTITIONS as u64)
}

fn finish(b: &FedRpBudget, epsilon: f64, trials: u64, t: Tally) -> DpReport {
    let lower_tail_mass = t.lower as f64 / trials as f64;
    let margin = 3.0 * (b.delta * (1.0 - b.delta) / trials as f64).sqrt();
    DpReport {
        epsilon,
        trials,
        upper_bound_violations: t.upper,
        lower_tail_mass,
        margin,
        max_log_ratio: t.max,
        pass: t.upper == 0 && lower_tail_mass <= b.delta + margin,
    }
}

/// Certifies the accountant's epsilon empirically for the worst-case pair
/// `||w|| = σ_min`, `||w'|| = σ_min + Δ`.
///
/// The densities of `z = A w` depend on `w` only through its norm, so the
/// pair can be taken collinear and `z` drawn directly from `N(0, v ||w||^2 I)`.
pub fn verify_dp_empirical(b: &FedRpBudget, trials: u64, rng_seed: u64) -> Result<DpReport> {
    let eps = epsilon_fedrp(b)?;
    verify_dp_with_epsilon(b, eps, trials, rng_seed)
}

/// As [`verify_dp_empirical`] but against a caller-chosen epsilon.
pub fn verify_dp_with_epsilon(b: &FedRpBudget, epsilon: f64, trials: u64, rng_seed: u64) -> Result<DpReport> {
    b.validate()?;
    if b.m == 0 || trials == 0 {
        return Err(Error::InvalidArgument("verifier needs m >= 1 and at least one trial".into()));
    }
    let s = b.sigma_min;
    let s_prime = b.sigma_min + b.delta_sensitivity;
    // Any entry variance gives the same ratio; use 1/m for well-scaled z.
    let v = 1.0 / b.m as f64;
    let sd = s * v.sqrt();
    let tally = (0..PARTITIONS)
        .into_par_iter()
        .map(|p| {
            let mut r = rng::chacha(rng::derive_seed(rng_seed, Purpose::MonteCarlo, &[p as u64]));
            let mut z = vec![0.0; b.m];
            let mut t = Tally::default();
            for _ in 0..partition_range(trials, p) {
                for zi in z.iter_mut() {
                    let g: f64 = r.sample(StandardNormal);
                    *zi = g * sd;
                }
                let l = log_density_ratio(s, s_prime, &z, v).expect("validated norms");
                t.upper += u64::from(l > epsilon);
                t.lower += u64::from(l < -epsilon);
                t.max = t.max.max(l);
            }
            t
        })
        .reduce(Tally::default, Tally::merge);
    Ok(finish(b, epsilon, trials, tally))
}

/// Slow cross-check: draws real projection matrices for a fixed `w` of
/// dimension `n` and evaluates the same ratio on `z = A w`.
pub fn verify_dp_matrix_sampling(b: &FedRpBudget, n: usize, trials: u64, rng_seed: u64) -> Result<DpReport> {
    let eps = epsilon_fedrp(b)?;
    if b.m == 0 || n == 0 || trials == 0 {
        return Err(Error::InvalidArgument("matrix sampling needs m, n and trials positive".into()));
    }
    let mut dir = rng::chacha(rng::derive_seed(rng_seed, Purpose::MonteCarlo, &[u64::MAX]));
    let raw: Vec<f64> = (0..n).map(|_| dir.sample(StandardNormal)).collect();
    let scale = b.sigma_min / norm2(&raw);
    let w: Vec<f64> = raw.iter().map(|x| x * scale).collect();
    let s_prime = b.sigma_min + b.delta_sensitivity;
    let v = 1.0 / n as f64;
    let mut t = Tally::default();
    for k in 0..trials {
        let seed = rng::derive_seed(rng_seed, Purpose::MonteCarlo, &[k, 1]);
        let z = project(&ProjectionSpec::new(seed, b.m, n)?, &w)?;
        let l = log_density_ratio(b.sigma_min, s_prime, &z, v)?;
        t.upper += u64::from(l > eps);
        t.lower += u64::from(l < -eps);
        t.max = t.max.max(l);
    }
    Ok(finish(b, eps, trials, t))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailRow {
    pub t: f64,
    pub empirical: f64,
    pub bound: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailReport {
    pub m: usize,
    pub trials: u64,
    pub rows: Vec<TailRow>,
    pub pass: bool,
}

/// Compares `Pr(Y/m - 1 >= t)` for `Y ~ χ²_m` with `exp(-m t²/8)`.
pub fn chi_square_tail_check(m: usize, t_values: &[f64], trials: u64, rng_seed: u64) -> Result<TailReport> {
    if m == 0 || trials == 0 {
        return Err(Error::InvalidArgument("tail check needs m >= 1 and trials >= 1".into()));
    }
    if let Some(t) = t_values.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::InvalidArgument(format!("tail threshold must be positive, got {t}")));
    }
    let chi = ChiSquared::new(m as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let counts = (0..PARTITIONS)
        .into_par_iter()
        .map(|p| {
            let mut r = rng::chacha(rng::derive_seed(rng_seed, Purpose::MonteCarlo, &[m as u64, p as u64]));
            let mut c = vec![0u64; t_values.len()];
            for _ in 0..partition_range(trials, p) {
                let excess = chi.sample(&mut r) / m as f64 - 1.0;
                for (ci, t) in c.iter_mut().zip(t_values) {
                    *ci += u64::from(excess >= *t);
                }
            }
            c
        })
        .reduce(
            || vec![0u64; t_values.len()],
            |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect(),
        );
    let rows: Vec<TailRow> = t_values
        .iter()
        .zip(counts)
        .map(|(&t, c)| {
            let bound = (-(m as f64) * t * t / 8.0).exp();
            let p = bound.min(1.0);
            let margin = 3.0 * (p * (1.0 - p) / trials as f64).sqrt();
            let empirical = c as f64 / trials as f64;
            TailRow {
                t,
                empirical,
                bound,
                margin,
                pass: empirical <= bound + margin,
            }
        })
        .collect();
    let pass = rows.iter().all(|r| r.pass);
    Ok(TailReport { m, trials, rows, pass })
}

/// `w + η` with `η ~ N(0, σ² I)`.
pub fn add_gaussian_noise(w: &[f64], sigma: f64, rng_seed: u64) -> Result<ParamVector> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(ParamVector::from(w));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut r = rng::chacha(rng_seed);
    Ok(ParamVector::from(w.iter().map(|x| x + normal.sample(&mut r)).collect::<Vec<_>>()))
}
