//! Gradient-inversion attacks: recover a training sample from what a
//! curious server observes, and measure how well that works against
//! parameter-sending baselines versus projected messages.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::error::{ensure_len, Error, Result};
use crate::models::{self, Architecture, Batch, ModelSpec};
use crate::projection::{ConsensusMap, Projector, ProjectionSpec};
use crate::rng::{self, Purpose};
use crate::vector::{dot, ParamVector};

/// What the attacker gets to see.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackObservation {
    Gradient(ParamVector),
    ParamSnapshots {
        w_t: ParamVector,
        w_t1: ParamVector,
        known_learning_rate: f64,
    },
    /// Two consecutive projected messages of one client.
    ProjectedVector {
        z_t: Vec<f64>,
        z_t1: Vec<f64>,
        known_learning_rate: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reconstruction {
    pub recovered_input: Vec<f64>,
    pub recovered_label: usize,
    pub matching_loss: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionResult {
    pub recovered_input: Vec<f64>,
    pub recovered_label: usize,
    pub mse_vs_truth: f64,
    pub iterations: usize,
}

impl Reconstruction {
    pub fn scored(self, truth: &[f64]) -> ReconstructionResult {
        ReconstructionResult {
            mse_vs_truth: mse(&self.recovered_input, truth),
            recovered_label: self.recovered_label,
            recovered_input: self.recovered_input,
            iterations: self.iterations,
        }
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// `(w_t - w_t1) / lr`: the gradient that one SGD step would have used.
pub fn gradient_from_snapshots(w_t: &[f64], w_t1: &[f64], lr: f64) -> Result<ParamVector> {
    ensure_len("parameter snapshot", w_t.len(), w_t1.len())?;
    if lr == 0.0 || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be non-zero, got {lr}")));
    }
    Ok(ParamVector::from(w_t.iter().zip(w_t1).map(|(a, b)| (a - b) / lr).collect::<Vec<_>>()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DlgConfig {
    pub max_iters: usize,
    pub initial_step: f64,
    /// Stop once the matching loss falls below this.
    pub tolerance: f64,
}

impl Default for DlgConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            initial_step: 0.1,
            tolerance: 1e-24,
        }
    }
}

pub const MAX_ITERS: usize = 5000;

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `J u` for the softmax Jacobian `diag(p) - p p^T`.
fn softmax_jvp(p: &[f64], u: &[f64]) -> Vec<f64> {
    let pu = dot(p, u);
    p.iter().zip(u).map(|(pi, ui)| pi * (ui - pu)).collect()
}

/// Cross-entropy gradient for one input against a soft label.
fn soft_label_gradient(spec: &ModelSpec, w: &[f64], x: &[f64], label: &[f64]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; w.len()];
    for (k, &yk) in label.iter().enumerate() {
        let batch = Batch::new(x.to_vec(), vec![k], x.len())?;
        let gk = models::gradient(spec, w, &batch)?;
        crate::vector::axpy(yk, &gk, &mut g);
    }
    Ok(g)
}

struct Matcher<'a> {
    spec: &'a ModelSpec,
    w: &'a [f64],
    target: &'a [f64],
}

impl Matcher<'_> {
    fn d(&self) -> usize {
        self.spec.input_dim
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        let (x, l) = theta.split_at(self.d());
        let g = soft_label_gradient(self.spec, self.w, x, &softmax(l))?;
        Ok(g.iter().zip(self.target).map(|(a, b)| (a - b).powi(2)).sum())
    }

    /// Closed-form gradient of the matching loss for logistic regression.
    fn logistic_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let d = self.d();
        let c = self.spec.num_classes;
        let (x, l) = theta.split_at(d);
        let (weights, bias) = self.w.split_at(c * d);
        let (gw, gb) = self.target.split_at(c * d);
        let logits: Vec<f64> = (0..c).map(|k| dot(&weights[k * d..(k + 1) * d], x) + bias[k]).collect();
        let p = softmax(&logits);
        let yh = softmax(l);
        let e: Vec<f64> = p.iter().zip(&yh).map(|(a, b)| a - b).collect();
        let mut value = 0.0;
        let mut u = vec![0.0; c];
        let mut dx = vec![0.0; d];
        for k in 0..c {
            let rb = e[k] - gb[k];
            value += rb * rb;
            u[k] = 2.0 * rb;
            for j in 0..d {
                let r = e[k] * x[j] - gw[k * d + j];
                value += r * r;
                u[k] += 2.0 * r * x[j];
                dx[j] += 2.0 * r * e[k];
            }
        }
        let jp = softmax_jvp(&p, &u);
        for k in 0..c {
            crate::vector::axpy(jp[k], &weights[k * d..(k + 1) * d], &mut dx);
        }
        let dl: Vec<f64> = softmax_jvp(&yh, &u).into_iter().map(|v| -v).collect();
        dx.extend(dl);
        (value, dx)
    }

    fn value_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        if self.spec.architecture == Architecture::LogisticRegression {
            return Ok(self.logistic_grad(theta));
        }
        let value = self.loss(theta)?;
        let h = 1e-6;
        let mut t = theta.to_vec();
        let mut g = vec![0.0; theta.len()];
        for i in 0..theta.len() {
            let orig = t[i];
            t[i] = orig + h;
            let fp = self.loss(&t)?;
            t[i] = orig - h;
            let fm = self.loss(&t)?;
            t[i] = orig;
            g[i] = (fp - fm) / (2.0 * h);
        }
        Ok((value, g))
    }
}

/// Optimises a dummy input and soft label so their gradient at `w` matches
/// `observed_gradient`. Gradient descent with an adaptive step: grow by 10%
/// on improvement, halve and retry otherwise. The input is clamped to
/// `[0, 1]` at the end.
pub fn dlg_reconstruct(
    spec: &ModelSpec,
    w: &[f64],
    observed_gradient: &[f64],
    cfg: &DlgConfig,
    seed: u64,
) -> Result<Reconstruction> {
    spec.validate()?;
    ensure_len("model parameters", spec.num_params(), w.len())?;
    ensure_len("observed gradient", spec.num_params(), observed_gradient.len())?;
    let iters = cfg.max_iters.min(MAX_ITERS);
    let matcher = Matcher {
        spec,
        w,
        target: observed_gradient,
    };
    let mut r = rng::chacha(rng::derive_seed(seed, Purpose::Attack, &[0]));
    let mut theta: Vec<f64> = (0..spec.input_dim).map(|_| r.random::<f64>()).collect();
    theta.extend(std::iter::repeat_n(0.0, spec.num_classes));

    let (mut value, mut grad) = matcher.value_grad(&theta)?;
    if !value.is_finite() {
        return Err(Error::InvalidArgument("matching loss is not finite".into()));
    }
    let mut step = cfg.initial_step;
    let mut done = 0;
    while done < iters && value > cfg.tolerance && step > 1e-30 {
        done += 1;
        let cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - step * g).collect();
        let (cv, cg) = matcher.value_grad(&cand)?;
        if cv.is_finite() && cv < value {
            theta = cand;
            value = cv;
            grad = cg;
            step *= 1.1;
        } else {
            step *= 0.5;
        }
    }
    let (x, l) = theta.split_at(spec.input_dim);
    Ok(Reconstruction {
        recovered_input: x.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        recovered_label: models::argmax(l),
        matching_loss: value,
        iterations: done,
    })
}

/// Least-squares estimate of `w` from `z = A w` under a (possibly guessed)
/// projection: minimum-norm when `m < n`, normal equations otherwise.
pub fn invert_projection(map: &dyn ConsensusMap, z: &[f64]) -> Result<Vec<f64>> {
    ensure_len("projected vector", map.output_dim(), z.len())?;
    let (m, n) = (map.output_dim(), map.input_dim());
    if m < n {
        let gram = gram(m, |e| map.apply(&map.adjoint(e)));
        let u = solve_spd(gram, z.to_vec(), m)?;
        Ok(map.adjoint(&u))
    } else {
        let gram = gram(n, |e| map.adjoint(&map.apply(e)));
        solve_spd(gram, map.adjoint(z), n)
    }
}

fn gram(k: usize, op: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let mut g = vec![0.0; k * k];
    let mut e = vec![0.0; k];
    for j in 0..k {
        e[j] = 1.0;
        for (i, v) in op(&e).into_iter().enumerate() {
            g[i * k + j] = v;
        }
        e[j] = 0.0;
    }
    g
}

/// Cholesky solve of a symmetric positive-definite `k x k` system.
fn solve_spd(mut a: Vec<f64>, mut b: Vec<f64>, k: usize) -> Result<Vec<f64>> {
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= a[j * k + p] * a[j * k + p];
        }
        if !(d > 0.0) {
            return Err(Error::InvalidArgument("projection Gram matrix is singular".into()));
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in j + 1..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = s / d;
        }
    }
    for i in 0..k {
        for p in 0..i {
            b[i] -= a[i * k + p] * b[p];
        }
        b[i] /= a[i * k + i];
    }
    for i in (0..k).rev() {
        for p in i + 1..k {
            b[i] -= a[p * k + i] * b[p];
        }
        b[i] /= a[i * k + i];
    }
    Ok(b)
}

/// Seed-blind attack on two consecutive projected messages: guess both
/// matrices, invert, difference the estimates and run gradient matching at
/// the estimated model. With `true_specs` the attacker uses the real
/// matrices instead (ablation).
pub fn attack_fedrp_observation(
    spec: &ModelSpec,
    z_t: &[f64],
    z_t1: &[f64],
    lr: f64,
    cfg: &DlgConfig,
    seed: u64,
    true_specs: Option<(ProjectionSpec, ProjectionSpec)>,
) -> Result<Reconstruction> {
    let n = spec.num_params();
    let m = z_t.len();
    ensure_len("projected message", m, z_t1.len())?;
    let (spec_t, spec_t1) = match true_specs {
        Some(s) => s,
        None => (
            ProjectionSpec::new(rng::derive_seed(seed, Purpose::Attack, &[1]), m, n)?,
            ProjectionSpec::new(rng::derive_seed(seed, Purpose::Attack, &[2]), m, n)?,
        ),
    };
    let w_t = invert_projection(&Projector::new(spec_t), z_t)?;
    let w_t1 = invert_projection(&Projector::new(spec_t1), z_t1)?;
    let g = gradient_from_snapshots(&w_t, &w_t1, lr)?;
    dlg_reconstruct(spec, &w_t, &g, cfg, seed)
}

/// Mean mse of a uniformly random guess against uniformly random truth.
pub fn baseline_mse(spec: &ModelSpec, trials: usize, seed: u64) -> f64 {
    let d = spec.input_dim;
    let mut r = rng::chacha(rng::derive_seed(seed, Purpose::Attack, &[3]));
    let total: f64 = (0..trials)
        .map(|_| {
            let a: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
            let b: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
            mse(&a, &b)
        })
        .sum();
    total / trials.max(1) as f64
}

/// One-sided Mann-Whitney test that `a` tends to be smaller than `b`
/// (normal approximation with tie and continuity corrections). Returns the
/// p-value.
pub fn mann_whitney_less(a: &[f64], b: &[f64]) -> f64 {
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let mut all: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_sum_a += all[i..=j].iter().filter(|e| e.1).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    let n = n1 + n2;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = (u - mean + 0.5) / var.sqrt();
    StdNormal::new(0.0, 1.0).expect("unit normal").cdf(z)
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k == 0 {
        return f64::NAN;
    }
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// The standard benchmark: logistic regression, batch of one, uniform inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackHarness {
    pub model: ModelSpec,
    pub learning_rate: f64,
    pub dlg: DlgConfig,
}

impl Default for AttackHarness {
    fn default() -> Self {
        Self {
            model: ModelSpec::logistic_regression(16, 4),
            learning_rate: 0.1,
            dlg: DlgConfig::default(),
        }
    }
}

/// One victim: a private sample, the model before the step and after it.
pub struct Victim {
    pub input: Vec<f64>,
    pub label: usize,
    pub w_t: ParamVector,
    pub w_t1: ParamVector,
    pub gradient: ParamVector,
}

impl AttackHarness {
    pub fn victim(&self, seed: u64) -> Result<Victim> {
        let mut r = rng::chacha(rng::derive_seed(seed, Purpose::Attack, &[4]));
        let d = self.model.input_dim;
        let input: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
        let label = r.random_range(0..self.model.num_classes);
        let w_t = models::init_params(&self.model, rng::derive_seed(seed, Purpose::Attack, &[5]));
        let batch = Batch::new(input.clone(), vec![label], d)?;
        let gradient = models::gradient(&self.model, &w_t, &batch)?;
        let mut w_t1 = w_t.clone();
        crate::vector::axpy(-self.learning_rate, &gradient, &mut w_t1);
        Ok(Victim {
            input,
            label,
            w_t,
            w_t1,
            gradient,
        })
    }

    /// Attack on a parameter-sending baseline (two consecutive snapshots).
    pub fn fedavg_trial(&self, seed: u64) -> Result<ReconstructionResult> {
        let v = self.victim(seed)?;
        let g = gradient_from_snapshots(&v.w_t, &v.w_t1, self.learning_rate)?;
        Ok(dlg_reconstruct(&self.model, &v.w_t, &g, &self.dlg, seed)?.scored(&v.input))
    }

    /// Attack on a projected client's messages with `m` rows. Messages pass
    /// through 32-bit rounding as on the wire.
    pub fn fedrp_trial(&self, seed: u64, m: usize, attacker_knows_matrix: bool) -> Result<ReconstructionResult> {
        let v = self.victim(seed)?;
        let n = self.model.num_params();
        let spec_t = ProjectionSpec::new(rng::derive_seed(seed, Purpose::RoundSeed, &[0]), m, n)?;
        let spec_t1 = ProjectionSpec::new(rng::derive_seed(seed, Purpose::RoundSeed, &[1]), m, n)?;
        let wire = |spec: ProjectionSpec, w: &[f64]| -> Vec<f64> {
            Projector::new(spec).apply(w).into_iter().map(|x| x as f32 as f64).collect()
        };
        let z_t = wire(spec_t, &v.w_t);
        let z_t1 = wire(spec_t1, &v.w_t1);
        let known = attacker_knows_matrix.then_some((spec_t, spec_t1));
        Ok(attack_fedrp_observation(&self.model, &z_t, &z_t1, self.learning_rate, &self.dlg, seed, known)?.scored(&v.input))
    }

    /// Mse of a random guess for the same victim.
    pub fn random_trial(&self, seed: u64) -> Result<f64> {
        let v = self.victim(seed)?;
        let mut r = rng::chacha(rng::derive_seed(seed, Purpose::Attack, &[6]));
        let guess: Vec<f64> = (0..v.input.len()).map(|_| r.random::<f64>()).collect();
        Ok(mse(&guess, &v.input))
    }

    pub fn separation(&self, seeds: u64, m: usize) -> Result<SeparationReport> {
        let rows: Vec<SeedRow> = (0..seeds)
            .into_par_iter()
            .map(|s| {
                Ok(SeedRow {
                    seed: s,
                    fedavg_mse: self.fedavg_trial(s)?.mse_vs_truth,
                    fedrp_mse: self.fedrp_trial(s, m, false)?.mse_vs_truth,
                    random_mse: self.random_trial(s)?,
                })
            })
            .collect::<Result<_>>()?;
        let col = |f: fn(&SeedRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        let (fedavg, fedrp, random) = (col(|r| r.fedavg_mse), col(|r| r.fedrp_mse), col(|r| r.random_mse));
        let median_fedavg = median(&fedavg);
        let median_fedrp = median(&fedrp);
        let p_value = mann_whitney_less(&fedrp, &random);
        Ok(SeparationReport {
            m,
            median_fedavg,
            median_fedrp,
            median_random: median(&random),
            p_value,
            pass: median_fedavg < 0.1 * median_fedrp && p_value > 0.05,
            rows,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRow {
    pub seed: u64,
    pub fedavg_mse: f64,
    pub fedrp_mse: f64,
    pub random_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparationReport {
    pub m: usize,
    pub median_fedavg: f64,
    pub median_fedrp: f64,
    pub median_random: f64,
    /// One-sided rank test that the projected attack beats random guessing.
    pub p_value: f64,
    pub pass: bool,
    pub rows: Vec<SeedRow>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshots_recover_the_step() {
        let w = vec![1.0, -2.0, 0.5];
        let g = vec![0.3, 0.1, -4.0];
        let lr = 0.05;
        let w1: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a - lr * b).collect();
        let got = gradient_from_snapshots(&w, &w1, lr).unwrap();
        for (a, b) in got.iter().zip(&g) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(gradient_from_snapshots(&w, &w, lr).unwrap().iter().all(|x| *x == 0.0));
        assert!(gradient_from_snapshots(&w, &w, 0.0).is_err());
    }

    #[test]
    fn multi_step_snapshots_point_along_the_gradient() {
        let spec = ModelSpec::logistic_regression(5, 3);
        let ds = crate::data::synth_gaussian(3, 20, 5, 2.0, 1).unwrap();
        let all: Vec<usize> = (0..ds.len()).collect();
        let batch = ds.gather(&all);
        let w0 = models::init_params(&spec, 2);
        let lr = 0.01;
        let mut w = w0.clone();
        for _ in 0..5 {
            let g = models::gradient(&spec, &w, &batch).unwrap();
            crate::vector::axpy(-lr, &g, &mut w);
        }
        let est = gradient_from_snapshots(&w0, &w, 5.0 * lr).unwrap();
        let g0 = models::gradient(&spec, &w0, &batch).unwrap();
        let cos = dot(&est, &g0) / (crate::vector::norm2(&est) * crate::vector::norm2(&g0));
        assert!(cos > 10f64.to_radians().cos(), "cos = {cos}");
    }

    #[test]
    fn logistic_matching_gradient_matches_finite_differences() {
        let spec = ModelSpec::logistic_regression(4, 3);
        let w = models::init_params(&spec, 8);
        let target: Vec<f64> = (0..spec.num_params()).map(|i| (i as f64 * 0.37).sin()).collect();
        let matcher = Matcher {
            spec: &spec,
            w: &w,
            target: &target,
        };
        let theta = vec![0.2, 0.9, -0.3, 0.5, 0.1, -0.4, 0.7];
        let (v, g) = matcher.logistic_grad(&theta);
        assert!((v - matcher.loss(&theta).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut t = theta.clone();
            t[i] += h;
            let fp = matcher.loss(&t).unwrap();
            t[i] -= 2.0 * h;
            let fm = matcher.loss(&t).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn dlg_recovers_a_logistic_regression_sample() {
        let h = AttackHarness::default();
        let r = h.fedavg_trial(3).unwrap();
        assert!(r.mse_vs_truth < 1e-3, "{r:?}");
        assert!(r.iterations <= 2000);
        assert_eq!(r.recovered_label, h.victim(3).unwrap().label);
    }

    #[test]
    fn dlg_on_a_small_mlp_reduces_matching_loss() {
        let h = AttackHarness {
            model: ModelSpec::mlp(4, vec![3], 2),
            dlg: DlgConfig { max_iters: 300, ..DlgConfig::default() },
            ..AttackHarness::default()
        };
        let v = h.victim(1).unwrap();
        let r = dlg_reconstruct(&h.model, &v.w_t, &v.gradient, &h.dlg, 1).unwrap();
        let start = {
            let m = Matcher { spec: &h.model, w: &v.w_t, target: &v.gradient };
            let mut rr = rng::chacha(rng::derive_seed(1, Purpose::Attack, &[0]));
            let mut t: Vec<f64> = (0..4).map(|_| rr.random::<f64>()).collect();
            t.extend([0.0, 0.0]);
            m.loss(&t).unwrap()
        };
        assert!(r.matching_loss < start);
    }

    #[test]
    fn zero_gradient_gives_no_better_than_baseline() {
        let h = AttackHarness::default();
        let n = h.model.num_params();
        let mses: Vec<f64> = (0..40)
            .map(|s| {
                let v = h.victim(s).unwrap();
                dlg_reconstruct(&h.model, &v.w_t, &vec![0.0; n], &h.dlg, s + 100)
                    .unwrap()
                    .scored(&v.input)
                    .mse_vs_truth
            })
            .collect();
        let mean = mses.iter().sum::<f64>() / mses.len() as f64;
        assert!(mean > 0.1, "mean mse {mean}");
    }

    #[test]
    fn reconstruction_matches_its_own_sample_not_a_decoy() {
        let h = AttackHarness::default();
        let v = h.victim(11).unwrap();
        let decoy = h.victim(12).unwrap();
        let r = dlg_reconstruct(&h.model, &v.w_t, &v.gradient, &h.dlg, 5).unwrap();
        assert!(mse(&r.recovered_input, &v.input) < 1e-3);
        assert!(mse(&r.recovered_input, &decoy.input) > 0.02);
    }

    #[test]
    fn baseline_is_one_sixth() {
        let spec = ModelSpec::logistic_regression(16, 4);
        let b = baseline_mse(&spec, 20_000, 1);
        assert!((b / (1.0 / 6.0) - 1.0).abs() < 0.05, "{b}");
        assert_eq!(b, baseline_mse(&spec, 20_000, 1));
        let one = ModelSpec::logistic_regression(1, 2);
        assert!(baseline_mse(&one, 1, 2) <= 1.0);
    }

    #[test]
    fn inversion_is_exact_with_square_known_matrix() {
        let n = 10;
        let p = Projector::new(ProjectionSpec::new(3, n, n).unwrap());
        let w: Vec<f64> = (0..n).map(|i| i as f64 - 4.5).collect();
        let back = invert_projection(&p, &p.apply(&w)).unwrap();
        for (a, b) in back.iter().zip(&w) {
            assert!((a - b).abs() < 1e-8);
        }
        // Minimum-norm solution reproduces the message.
        let p = Projector::new(ProjectionSpec::new(3, 2, n).unwrap());
        let z = p.apply(&w);
        let est = invert_projection(&p, &z).unwrap();
        for (a, b) in p.apply(&est).iter().zip(&z) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn known_matrix_ablation_succeeds() {
        let h = AttackHarness::default();
        let n = h.model.num_params();
        let r = h.fedrp_trial(2, n, true).unwrap();
        assert!(r.mse_vs_truth < 0.01, "{r:?}");
    }

    #[test]
    fn zero_message_carries_no_signal() {
        let h = AttackHarness::default();
        let r = attack_fedrp_observation(&h.model, &[0.0], &[0.0], 0.1, &h.dlg, 4, None).unwrap();
        assert!(r.recovered_input.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn rank_test_reference_values() {
        let a: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..20).map(|i| i as f64 + 100.0).collect();
        assert!(mann_whitney_less(&a, &b) < 1e-6);
        assert!(mann_whitney_less(&b, &a) > 0.999);
        let p = mann_whitney_less(&a, &a);
        assert!((p - 0.5).abs() < 0.05, "{p}");
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
