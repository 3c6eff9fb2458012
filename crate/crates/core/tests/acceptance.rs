//! Acceptance suite. Runs every criterion in order and prints one
//! `PASS`/`FAIL` line for each; exits non-zero if any fails.
//!
//! `FEDRP_ACCEPTANCE=3,5` restricts the run to the listed criteria.

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedrp::admm::{LocalObjective, LocalSolveConfig, QuadraticObjective};
use fedrp::attack::AttackHarness;
use fedrp::data::{self, Dataset};
use fedrp::models::{self, Batch, ModelSpec};
use fedrp::orchestrator::{self, Algorithm, DualAnchor, ExperimentConfig, Federation, ProjectionKind, RunReport};
use fedrp::privacy::{self, FedRpBudget, GaussianBudget};
use fedrp::projection::{self, ProjectionSpec};
use fedrp::transport::{self, MsgType, WireMessage};
use fedrp::vector::{dot, mean_of, ParamVector};

const CHILD_ENV: &str = "FEDRP_ACCEPTANCE_PROJECTION_CHILD";

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn check(failures: &mut Vec<String>, ok: bool, what: String) {
    if !ok {
        failures.push(what);
    }
}

fn finish(failures: Vec<String>, summary: String) -> Outcome {
    if failures.is_empty() {
        Outcome::new(true, summary)
    } else {
        Outcome::new(false, format!("{summary}; failed: {}", failures.join("; ")))
    }
}

fn within_budget(failures: &mut Vec<String>, start: Instant, limit: Duration) {
    let took = start.elapsed();
    check(failures, took < limit, format!("took {took:.1?}, limit {limit:?}"));
}

// 1. Accountant reproduction.
fn accountant() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let gauss = privacy::epsilon_gaussian(&GaussianBudget {
        delta_sensitivity: 1.0,
        sigma: 0.1,
        delta: 0.01,
    })
    .unwrap();
    check(&mut failures, (gauss - 31.07).abs() <= 0.01, format!("gaussian epsilon {gauss}"));
    let zero = privacy::epsilon_fedrp(&FedRpBudget {
        delta_sensitivity: 1.0,
        sigma_min: 1.0,
        m: 0,
        delta: 0.01,
        rounds: 1,
    })
    .unwrap();
    check(&mut failures, zero == 0.0, format!("m = 0 epsilon {zero}"));
    within_budget(&mut failures, start, Duration::from_secs(1));
    finish(failures, format!("epsilon_gaussian = {gauss:.4}, epsilon_fedrp(m=0) = {zero}"))
}

fn tiny_federation(spec: &ModelSpec, train: &Dataset, clients: usize) -> (data::PartitionPlan, ParamVector) {
    let plan = data::partition_iid(train, clients, 5).unwrap();
    (plan, models::init_params(spec, 6))
}

// 2. Communication reproduction.
fn communication() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let local = LocalSolveConfig::new(1, 4, 0.05).unwrap();

    let spec = ModelSpec::logistic_regression(4, 2);
    let train = data::synth_gaussian(2, 8, 4, 2.0, 1).unwrap();
    let (plan, init) = tiny_federation(&spec, &train, 2);
    let fed = Federation::from_dataset(&spec, &train, &plan, None, init).unwrap();
    let expected = [(1, 4), (5, 20), (10, 40), (50, 200), (100, 400), (1000, 4000), (10000, 40000)];
    let mut seen = Vec::new();
    for (m, bytes) in expected {
        let mut cfg = ExperimentConfig::new(Algorithm::Fedrp, 2, 2, local);
        cfg.m = Some(m);
        cfg.sigma_min = Some(0.1);
        let report = orchestrator::run(&cfg, &fed).unwrap();
        for r in &report.metrics {
            check(
                &mut failures,
                r.bytes_up_per_client == bytes,
                format!("m={m} round {} metered {} bytes", r.round, r.bytes_up_per_client),
            );
        }
        seen.push(format!("{m}->{}", report.last().bytes_up_per_client));
    }

    // 5999 inputs and 10 classes give exactly 60 000 parameters.
    let spec = ModelSpec::logistic_regression(5999, 10);
    check(&mut failures, spec.num_params() == 60_000, format!("n = {}", spec.num_params()));
    let train = data::synth_gaussian(10, 2, 5999, 1.0, 2).unwrap();
    let (plan, init) = tiny_federation(&spec, &train, 2);
    let fed = Federation::from_dataset(&spec, &train, &plan, None, init).unwrap();
    let cfg = ExperimentConfig::new(Algorithm::Fedavg, 2, 1, local);
    let report = orchestrator::run(&cfg, &fed).unwrap();
    let fedavg = report.last().bytes_up_per_client;
    let rel = (fedavg as f64 - 241_000.0).abs() / 241_000.0;
    check(&mut failures, rel <= 0.01, format!("fedavg {fedavg} bytes, {rel:.4} from 241 KB"));
    within_budget(&mut failures, start, Duration::from_secs(60));
    finish(failures, format!("fedrp bytes [{}], fedavg n=60000 -> {fedavg}", seen.join(", ")))
}

// 3. Empirical DP certification.
fn dp_certification() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut cells = 0;
    let mut worst_gap = f64::NEG_INFINITY;
    for m in [1usize, 10, 100] {
        for delta in [0.1, 0.01] {
            for ratio in [0.01, 0.1, 1.0] {
                let b = FedRpBudget {
                    delta_sensitivity: ratio,
                    sigma_min: 1.0,
                    m,
                    delta,
                    rounds: 1,
                };
                let seed = 1000 + cells as u64;
                let r = privacy::verify_dp_empirical(&b, 100_000, seed).unwrap();
                cells += 1;
                worst_gap = worst_gap.max(r.lower_tail_mass - (delta + r.margin));
                check(
                    &mut failures,
                    r.pass && r.upper_bound_violations == 0,
                    format!(
                        "m={m} delta={delta} ratio={ratio}: {} violations, tail {}",
                        r.upper_bound_violations, r.lower_tail_mass
                    ),
                );
            }
        }
    }
    let halved_b = FedRpBudget {
        delta_sensitivity: 0.01,
        sigma_min: 1.0,
        m: 1,
        delta: 0.01,
        rounds: 1,
    };
    let eps = privacy::epsilon_fedrp(&halved_b).unwrap();
    let halved = privacy::verify_dp_with_epsilon(&halved_b, eps / 2.0, 100_000, 77).unwrap();
    check(&mut failures, !halved.pass, format!("halved epsilon run passed (tail {})", halved.lower_tail_mass));
    within_budget(&mut failures, start, Duration::from_secs(300));
    finish(
        failures,
        format!(
            "{cells} cells x 1e5 trials, worst tail slack {worst_gap:.2e}; halved-epsilon tail {:.4} > {:.4}",
            halved.lower_tail_mass,
            0.01 + halved.margin
        ),
    )
}

// 4. Chi-squared tail bound.
fn chi_square_tails() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut rows = 0;
    for (i, m) in [1usize, 10, 100].into_iter().enumerate() {
        let report = privacy::chi_square_tail_check(m, &[0.5, 1.0, 2.0], 1_000_000, 40 + i as u64).unwrap();
        for row in &report.rows {
            rows += 1;
            check(
                &mut failures,
                row.pass && row.empirical <= row.bound + row.margin,
                format!("m={m} t={}: {} > {}", row.t, row.empirical, row.bound + row.margin),
            );
        }
    }
    within_budget(&mut failures, start, Duration::from_secs(120));
    finish(failures, format!("{rows} (m, t) pairs at 1e6 trials"))
}

fn quadratic_federation(centers: &[Vec<f64>], init: Vec<f64>) -> Federation<'static> {
    Federation::from_objectives(
        centers
            .iter()
            .map(|c| Box::new(QuadraticObjective { center: c.clone() }) as Box<dyn LocalObjective>)
            .collect(),
        ParamVector::from(init),
    )
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// 5. ADMM correctness.
fn admm_correctness() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10;
    let centers: Vec<Vec<f64>> = (0..5).map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let mean = mean_of(&centers).unwrap();
    let init: Vec<f64> = (0..n).map(|i| 0.1 + 0.01 * i as f64).collect();
    let fed = quadratic_federation(&centers, init);
    // One gradient step of size 1/(1+rho) is the exact local minimizer.
    let exact = LocalSolveConfig::new(1, 1, 0.5).unwrap();

    let mut admm = ExperimentConfig::new(Algorithm::Fedadmm, 5, 200, exact);
    admm.record_trajectory = true;
    let classic = orchestrator::run(&admm, &fed).unwrap();
    let first_ok = classic
        .trajectory
        .iter()
        .position(|ws| ws.iter().all(|w| max_abs_diff(w, &mean) < 1e-3))
        .map(|t| t + 1);
    check(&mut failures, first_ok.is_some(), "classic consensus did not reach the mean".into());

    let mut rp = ExperimentConfig::new(Algorithm::Fedrp, 5, 200, exact);
    rp.record_trajectory = true;
    rp.projection = ProjectionKind::Identity;
    rp.dual_anchor = DualAnchor::Aggregated;
    rp.m = Some(n);
    rp.sigma_min = Some(1e-9);
    let identity = orchestrator::run(&rp, &fed).unwrap();
    let traj_gap = classic
        .trajectory
        .iter()
        .zip(&identity.trajectory)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| max_abs_diff(x, y)))
        .fold(0.0, f64::max);
    check(&mut failures, traj_gap < 1e-8, format!("identity-projection trajectory gap {traj_gap:.2e}"));

    let (residual, tail_min) = projected_residual();
    check(
        &mut failures,
        residual < 0.05,
        format!("projected residual {residual:.4} after 300 rounds (best of last 50: {tail_min:.4})"),
    );
    within_budget(&mut failures, start, Duration::from_secs(120));
    finish(
        failures,
        format!(
            "mean reached at round {}, identity gap {traj_gap:.1e}, projected residual {residual:.4}",
            first_ok.map(|t| t.to_string()).unwrap_or("-".into())
        ),
    )
}

/// Full-batch logistic regression on IID shards of a Gaussian mixture.
fn projected_residual() -> (f64, f64) {
    let spec = ModelSpec::logistic_regression(5, 3);
    let train = data::synth_gaussian(3, 2000, 5, 2.0, 51).unwrap();
    let plan = data::partition_iid(&train, 5, 52).unwrap();
    let fed = Federation::from_dataset(&spec, &train, &plan, None, models::init_params(&spec, 53)).unwrap();
    let shard = plan.shards[0].len();
    let mut cfg = ExperimentConfig::new(Algorithm::Fedrp, 5, 300, LocalSolveConfig::new(20, shard, 0.5).unwrap());
    cfg.m = Some(4);
    cfg.sigma_min = Some(0.1);
    let report = orchestrator::run(&cfg, &fed).unwrap();
    let tail_min = report.metrics[250..]
        .iter()
        .filter_map(|m| m.consensus_residual)
        .fold(f64::INFINITY, f64::min);
    (report.last().consensus_residual.unwrap(), tail_min)
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("FEDRP_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn mnist_run(alg: Algorithm, clients: usize, train: &Dataset, test: &Dataset, spec: &ModelSpec) -> RunReport {
    let plan = data::partition_iid(train, clients, 100).unwrap();
    let init = models::init_params(spec, 101);
    let fed = Federation::from_dataset(spec, train, &plan, Some(test), init).unwrap();
    let mut cfg = ExperimentConfig::new(alg, clients, 30, LocalSolveConfig::new(1, 64, 0.1).unwrap());
    cfg.m = Some(64);
    cfg.sigma_min = Some(1.0);
    cfg.dp_sigma = Some(0.01);
    cfg.master_seed = 102;
    orchestrator::run(&cfg, &fed).unwrap()
}

// 6. End-to-end learning parity.
fn learning_parity() -> Outcome {
    let start = Instant::now();
    let dir = mnist_dir();
    let (train, test) = match data::load_mnist_dir(&dir) {
        Ok(d) => d,
        Err(e) => {
            return Outcome::new(
                false,
                format!("MNIST not available in {} ({e}); run scripts/fetch-mnist.sh", dir.display()),
            )
        }
    };
    let mut failures = Vec::new();
    let spec = ModelSpec::logistic_regression(784, 10);
    let acc = |r: &RunReport| r.last().test_accuracy.unwrap();
    let fedavg = acc(&mnist_run(Algorithm::Fedavg, 10, &train, &test, &spec));
    let fedrp = acc(&mnist_run(Algorithm::Fedrp, 10, &train, &test, &spec));
    let dp = acc(&mnist_run(Algorithm::FedavgDp, 10, &train, &test, &spec));
    let fwc = acc(&mnist_run(Algorithm::Fwc, 50, &train, &test, &spec));
    check(&mut failures, fedavg >= 0.90, format!("fedavg {fedavg:.4} < 0.90"));
    check(&mut failures, (fedrp - fedavg).abs() <= 0.03, format!("|fedrp - fedavg| = {:.4}", (fedrp - fedavg).abs()));
    check(&mut failures, fedrp >= dp, format!("fedrp {fedrp:.4} < fedavg+dp {dp:.4}"));
    check(&mut failures, fwc < fedavg, format!("fwc {fwc:.4} >= fedavg {fedavg:.4}"));
    within_budget(&mut failures, start, Duration::from_secs(900));
    finish(
        failures,
        format!("accuracy fedavg {fedavg:.4}, fedrp {fedrp:.4}, fedavg+dp {dp:.4}, fwc(K=50) {fwc:.4}"),
    )
}

// 7. Attack separation.
fn attack_separation() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let report = AttackHarness::default().separation(20, 1).unwrap();
    check(
        &mut failures,
        report.median_fedavg < 0.1 * report.median_fedrp,
        format!("median fedavg {:.3e} vs fedrp {:.3e}", report.median_fedavg, report.median_fedrp),
    );
    check(&mut failures, report.p_value > 0.05, format!("rank test p = {:.3}", report.p_value));
    within_budget(&mut failures, start, Duration::from_secs(600));
    finish(
        failures,
        format!(
            "median mse fedavg {:.2e}, fedrp {:.3}, random {:.3}, p = {:.3}",
            report.median_fedavg, report.median_fedrp, report.median_random, report.p_value
        ),
    )
}

fn projection_bytes() -> Vec<u8> {
    let spec = ProjectionSpec::new(0xFEED_5EED, 32, 257).unwrap();
    let w: Vec<f64> = (0..257).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
    let mut out = Vec::new();
    for r in [0, 5, 31] {
        for v in projection::matrix_row_stream(&spec, r).unwrap() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in projection::project(&spec, &w).unwrap().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn finite_difference_error(spec: &ModelSpec, w: &[f64], batch: &Batch, rng: &mut ChaCha8Rng) -> f64 {
    let (_, g) = models::loss_and_gradient(spec, w, batch).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let j = rng.random_range(0..w.len());
        let h = 1e-5;
        let mut plus = w.to_vec();
        let mut minus = w.to_vec();
        plus[j] += h;
        minus[j] -= h;
        let fd = (models::loss(spec, &plus, batch).unwrap() - models::loss(spec, &minus, batch).unwrap()) / (2.0 * h);
        let err = (fd - g[j]).abs() / (fd.abs() + g[j].abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

// 8. Numerical substrate.
fn numerical_substrate() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let mut grad_worst: f64 = 0.0;
    for case in 0..100 {
        let spec = if case % 2 == 0 {
            ModelSpec::logistic_regression(rng.random_range(2..12), rng.random_range(2..6))
        } else {
            ModelSpec::mlp(rng.random_range(2..8), vec![rng.random_range(2..7)], rng.random_range(2..5))
        };
        let w = models::init_params(&spec, case);
        let rows = rng.random_range(1..6);
        let inputs: Vec<f64> = (0..rows * spec.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..spec.num_classes)).collect();
        let batch = Batch::new(inputs, labels, spec.input_dim).unwrap();
        grad_worst = grad_worst.max(finite_difference_error(&spec, &w, &batch, &mut rng));
    }
    check(&mut failures, grad_worst < 1e-4, format!("gradient relative error {grad_worst:.2e}"));

    let mut adjoint_worst: f64 = 0.0;
    for case in 0..20u64 {
        let (m, n) = (rng.random_range(1..40), rng.random_range(1..300));
        let spec = ProjectionSpec::new(case, m, n).unwrap();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs = dot(&projection::project(&spec, &w).unwrap(), &v);
        let rhs = dot(&w, &projection::project_transpose(&spec, &v).unwrap());
        adjoint_worst = adjoint_worst.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
    }
    check(&mut failures, adjoint_worst < 1e-9, format!("adjoint error {adjoint_worst:.2e}"));

    let here = projection_bytes();
    let child = Command::new(std::env::current_exe().unwrap()).env(CHILD_ENV, "1").output().unwrap();
    let identical = child.status.success() && child.stdout == here;
    check(&mut failures, identical, "projection differs across processes".into());

    let (mut crashes, mut rejected) = (0u32, 0u32);
    let seed_frame = transport::encode(
        &WireMessage::vector(MsgType::ClientUpdate, 3, 1, &[0.5, -1.0, 2.0, 3.5, 0.0, 1e-3]).unwrap(),
    )
    .unwrap();
    for _ in 0..100_000 {
        let mut frame = seed_frame.clone();
        match rng.random_range(0..4) {
            0 => frame.truncate(rng.random_range(0..frame.len())),
            1 => frame.extend((0..rng.random_range(1..9)).map(|_| rng.random::<u8>())),
            _ => {
                for _ in 0..rng.random_range(1..5) {
                    let i = rng.random_range(0..frame.len());
                    frame[i] = rng.random();
                }
            }
        }
        match catch_unwind(|| transport::decode(&frame).map(|m| m.to_vector())) {
            Err(_) => crashes += 1,
            Ok(Err(_)) | Ok(Ok(Err(_))) => rejected += 1,
            Ok(Ok(Ok(_))) => {}
        }
    }
    check(&mut failures, crashes == 0, format!("{crashes} decoder panics"));
    within_budget(&mut failures, start, Duration::from_secs(300));
    finish(
        failures,
        format!(
            "gradient err {grad_worst:.1e}, adjoint err {adjoint_worst:.1e}, cross-process identical: {identical}, fuzz 1e5 frames ({rejected} rejected, {crashes} panics)"
        ),
    )
}

fn selected() -> Vec<usize> {
    match std::env::var("FEDRP_ACCEPTANCE") {
        Ok(list) if !list.trim().is_empty() => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        _ => (1..=8).collect(),
    }
}

fn main() -> ExitCode {
    if std::env::var_os(CHILD_ENV).is_some() {
        std::io::stdout().write_all(&projection_bytes()).unwrap();
        return ExitCode::SUCCESS;
    }
    // Ignore libtest flags such as --nocapture or a test filter.
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("accountant reproduction", accountant),
        ("communication reproduction", communication),
        ("empirical DP certification", dp_certification),
        ("chi-squared tail bound", chi_square_tails),
        ("ADMM correctness", admm_correctness),
        ("end-to-end learning parity", learning_parity),
        ("attack separation", attack_separation),
        ("numerical substrate", numerical_substrate),
    ];
    let wanted = selected();
    let mut all_pass = true;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !wanted.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|_| Outcome::new(false, "panicked"));
        all_pass &= outcome.pass;
        println!(
            "criterion {} {name}: {} ({:.1?}) {}",
            i + 1,
            if outcome.pass { "PASS" } else { "FAIL" },
            start.elapsed(),
            outcome.detail
        );
    }
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
