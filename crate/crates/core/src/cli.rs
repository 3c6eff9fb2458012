//! Configuration documents, the experiment runner behind the binary, and
//! the metrics/summary writers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::admm::LocalSolveConfig;
use crate::attack::{AttackHarness, DlgConfig, SeparationReport};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::models::{self, ModelSpec};
use crate::orchestrator::{
    self, Algorithm, DualAnchor, EvalModel, ExperimentConfig, Federation, RoundMetrics, RunReport, TransportMode,
};
use crate::privacy::{self, DpReport, FedRpBudget, TailReport};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    VerifyDp,
    MeterOnly,
    Attack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// IDX files under `dataset_dir`.
    Mnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    Synthetic {
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_grid_m")]
    pub m: Vec<usize>,
    #[serde(default = "default_grid_delta")]
    pub delta: Vec<f64>,
    /// Values of `Δ / σ_min`.
    #[serde(default = "default_grid_ratio")]
    pub ratio: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default = "default_tail_t")]
    pub tail_t: Vec<f64>,
    #[serde(default = "default_tail_trials")]
    pub tail_trials: u64,
}

fn default_grid_m() -> Vec<usize> {
    vec![1, 10, 100]
}
fn default_grid_delta() -> Vec<f64> {
    vec![0.1, 0.01]
}
fn default_grid_ratio() -> Vec<f64> {
    vec![0.01, 0.1, 1.0]
}
fn default_trials() -> u64 {
    100_000
}
fn default_tail_t() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_tail_trials() -> u64 {
    1_000_000
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            m: default_grid_m(),
            delta: default_grid_delta(),
            ratio: default_grid_ratio(),
            trials: default_trials(),
            tail_t: default_tail_t(),
            tail_trials: default_tail_trials(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeterSection {
    #[serde(default = "default_meter_m")]
    pub m: Vec<usize>,
}

fn default_meter_m() -> Vec<usize> {
    vec![1, 5, 10, 50, 100, 1000, 10000]
}

impl Default for MeterSection {
    fn default() -> Self {
        Self { m: default_meter_m() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "default_attack_seeds")]
    pub seeds: u64,
    #[serde(default = "default_attack_m")]
    pub m: usize,
    #[serde(default = "default_attack_dim")]
    pub input_dim: usize,
    #[serde(default = "default_attack_classes")]
    pub num_classes: usize,
    #[serde(default = "default_attack_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_attack_iters")]
    pub max_iters: usize,
}

fn default_attack_seeds() -> u64 {
    20
}
fn default_attack_m() -> usize {
    1
}
fn default_attack_dim() -> usize {
    16
}
fn default_attack_classes() -> usize {
    4
}
fn default_attack_lr() -> f64 {
    0.1
}
fn default_attack_iters() -> usize {
    2000
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            seeds: default_attack_seeds(),
            m: default_attack_m(),
            input_dim: default_attack_dim(),
            num_classes: default_attack_classes(),
            learning_rate: default_attack_lr(),
            max_iters: default_attack_iters(),
        }
    }
}

fn default_rho() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    0.01
}
fn default_sensitivity() -> f64 {
    1.0
}
fn default_tcp_addr() -> String {
    "127.0.0.1:0".into()
}

/// The JSON configuration document. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub mode: Mode,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<DatasetSource>,
    #[serde(default)]
    pub algorithm: Option<Algorithm>,
    #[serde(default)]
    pub clients: Option<usize>,
    #[serde(default)]
    pub rounds: Option<u32>,
    #[serde(default)]
    pub local_epochs: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub dp_sigma: Option<f64>,
    #[serde(default)]
    pub sigma_min: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_sensitivity")]
    pub sensitivity: f64,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub transport: TransportMode,
    #[serde(default = "default_tcp_addr")]
    pub tcp_addr: String,
    #[serde(default)]
    pub eval_model: EvalModel,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub dual_anchor: DualAnchor,
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub verify: Option<VerifySection>,
    #[serde(default)]
    pub meter: Option<MeterSection>,
    #[serde(default)]
    pub attack: Option<AttackSection>,
}

fn missing(key: &str, why: &str) -> Error {
    Error::Config(format!("missing required key `{key}` ({why})"))
}

impl ConfigDocument {
    /// Checks mode-specific requirements and fills mode sections with
    /// defaults.
    pub fn resolve(mut self) -> Result<Self> {
        match self.mode {
            Mode::Train => {
                let alg = self.algorithm.ok_or_else(|| missing("algorithm", "train mode"))?;
                for (key, present) in [
                    ("clients", self.clients.is_some()),
                    ("rounds", self.rounds.is_some()),
                    ("local_epochs", self.local_epochs.is_some()),
                    ("batch_size", self.batch_size.is_some()),
                    ("learning_rate", self.learning_rate.is_some()),
                    ("model", self.model.is_some()),
                    ("dataset", self.dataset.is_some()),
                ] {
                    if !present {
                        return Err(missing(key, "train mode"));
                    }
                }
                if alg == Algorithm::Fedrp {
                    if self.m.is_none() {
                        return Err(missing("m", "fedrp"));
                    }
                    if self.sigma_min.is_none() {
                        return Err(missing("sigma_min", "fedrp"));
                    }
                }
                if alg == Algorithm::FedavgDp && self.dp_sigma.is_none() {
                    return Err(missing("dp_sigma", "fedavg_dp"));
                }
                if matches!(self.dataset, Some(DatasetSource::Mnist { .. })) && self.dataset_dir.is_none() {
                    return Err(missing("dataset_dir", "mnist dataset"));
                }
                self.experiment()?.validate()?;
            }
            Mode::VerifyDp => {
                self.verify.get_or_insert_with(VerifySection::default);
            }
            Mode::MeterOnly => {
                if self.model.is_none() {
                    return Err(missing("model", "meter-only mode"));
                }
                self.meter.get_or_insert_with(MeterSection::default);
            }
            Mode::Attack => {
                self.attack.get_or_insert_with(AttackSection::default);
            }
        }
        if let Some(model) = &self.model {
            model.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta: must lie in (0, 1), got {}", self.delta)));
        }
        Ok(self)
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let local = LocalSolveConfig::new(
            self.local_epochs.unwrap_or(0),
            self.batch_size.unwrap_or(0),
            self.learning_rate.unwrap_or(0.0),
        )
        .map_err(|e| Error::Config(e.to_string()))?;
        let algorithm = self.algorithm.ok_or_else(|| missing("algorithm", "train mode"))?;
        let mut cfg = ExperimentConfig::new(algorithm, self.clients.unwrap_or(0), self.rounds.unwrap_or(0), local);
        cfg.rho = self.rho;
        cfg.m = self.m;
        cfg.dp_sigma = self.dp_sigma;
        cfg.sigma_min = self.sigma_min;
        cfg.delta = self.delta;
        cfg.sensitivity = self.sensitivity;
        cfg.eval_model = self.eval_model;
        cfg.master_seed = self.master_seed;
        cfg.transport = self.transport;
        cfg.tcp_addr = self.tcp_addr.clone();
        cfg.dual_anchor = self.dual_anchor;
        cfg.record_wall_time = self.record_wall_time;
        Ok(cfg)
    }
}

/// Parses and resolves a configuration document.
pub fn parse_config_str(text: &str) -> Result<ConfigDocument> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: ConfigDocument = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." || path.is_empty() {
            Error::Config(inner.to_string())
        } else {
            Error::Config(format!("{path}: {inner}"))
        }
    })?;
    doc.resolve()
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ConfigDocument> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

pub const CSV_HEADER: &str = "round,algorithm,mean_train_loss,test_accuracy,bytes_up,bytes_down,epsilon_round,epsilon_cum,wall_ms";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[RoundMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.round,
            r.algorithm.name(),
            r.mean_train_loss,
            opt(r.test_accuracy),
            r.bytes_up_per_client,
            r.bytes_down_per_client,
            opt(r.epsilon_round),
            opt(r.epsilon_cumulative),
            r.wall_time_ms
        );
    }
    out
}

pub fn train_summary(doc: &ConfigDocument, report: &RunReport) -> String {
    let last = report.last();
    let up: u64 = report.metrics.iter().map(|m| m.bytes_up_per_client).sum();
    let down: u64 = report.metrics.iter().map(|m| m.bytes_down_per_client).sum();
    let max_shift = report.metrics.iter().map(|m| m.max_update_norm).fold(0.0, f64::max);
    let mut s = String::new();
    let _ = writeln!(s, "algorithm: {}", report.algorithm.name());
    let _ = writeln!(s, "rounds: {}", report.metrics.len());
    let _ = writeln!(s, "clients: {}", report.final_params.len());
    let _ = writeln!(s, "final accuracy ({:?}): {}", doc.eval_model, opt(last.test_accuracy));
    let _ = writeln!(s, "final accuracy (client zero): {}", opt(report.final_accuracy_client_zero));
    let _ = writeln!(s, "final accuracy (average): {}", opt(report.final_accuracy_average));
    let _ = writeln!(s, "final mean train loss: {}", last.mean_train_loss);
    let _ = writeln!(s, "bytes per client: up {up}, down {down}");
    let _ = writeln!(s, "seed envelope bytes: {}", report.metrics.iter().map(|m| m.envelope_bytes).sum::<u64>() + report.setup_meter.envelope_bytes);
    match last.epsilon_cumulative {
        Some(e) => {
            let _ = writeln!(s, "epsilon per round: {}", opt(last.epsilon_round));
            let _ = writeln!(s, "epsilon total: {e}");
        }
        None => {
            let _ = writeln!(s, "epsilon total: not accounted");
        }
    }
    let _ = writeln!(s, "max per-round parameter shift (sensitivity diagnostic): {max_shift}");
    s
}

/// Loads the configured dataset and splits it into train and test sets.
pub fn load_dataset(doc: &ConfigDocument) -> Result<(Dataset, Dataset)> {
    match doc.dataset.as_ref().ok_or_else(|| missing("dataset", "train mode"))? {
        DatasetSource::Mnist { train_limit, test_limit } => {
            let dir = doc.dataset_dir.as_ref().ok_or_else(|| missing("dataset_dir", "mnist dataset"))?;
            let (mut train, mut test) = data::load_mnist_dir(dir)?;
            if let Some(n) = train_limit {
                train = train.truncate(*n);
            }
            if let Some(n) = test_limit {
                test = test.truncate(*n);
            }
            Ok((train, test))
        }
        DatasetSource::Synthetic {
            classes,
            per_class,
            dim,
            separation,
            test_fraction,
        } => {
            let seed = rng::derive_seed(doc.master_seed, Purpose::Synthetic, &[]);
            let all = data::synth_gaussian(*classes, *per_class, *dim, *separation, seed)?;
            all.split(*test_fraction, rng::derive_seed(doc.master_seed, Purpose::Split, &[]))
        }
    }
}

pub fn run_train(doc: &ConfigDocument) -> Result<RunReport> {
    let cfg = doc.experiment()?;
    let model = doc.model.clone().ok_or_else(|| missing("model", "train mode"))?;
    let (train, test) = load_dataset(doc)?;
    if train.num_classes > model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model only {}",
            train.num_classes, model.num_classes
        )));
    }
    let plan = data::partition_iid(&train, cfg.clients, rng::derive_seed(cfg.master_seed, Purpose::Partition, &[]))
        .map_err(|e| Error::Config(e.to_string()))?;
    let init = models::init_params(&model, rng::derive_seed(cfg.master_seed, Purpose::ModelInit, &[]));
    let fed = Federation::from_dataset(&model, &train, &plan, Some(&test), init)?;
    orchestrator::run(&cfg, &fed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub m: usize,
    pub delta: f64,
    pub ratio: f64,
    pub report: DpReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyOutcome {
    pub cells: Vec<GridCell>,
    pub tails: Vec<TailReport>,
    pub pass: bool,
}

pub fn run_verify(section: &VerifySection, seed: u64) -> Result<VerifyOutcome> {
    let mut cells = Vec::new();
    for &m in &section.m {
        for &delta in &section.delta {
            for &ratio in &section.ratio {
                let b = FedRpBudget {
                    delta_sensitivity: ratio,
                    sigma_min: 1.0,
                    m,
                    delta,
                    rounds: 1,
                };
                let cell_seed = rng::derive_seed(seed, Purpose::MonteCarlo, &[m as u64, delta.to_bits(), ratio.to_bits()]);
                let report = privacy::verify_dp_empirical(&b, section.trials, cell_seed)?;
                cells.push(GridCell { m, delta, ratio, report });
            }
        }
    }
    let tails = section
        .m
        .iter()
        .map(|&m| privacy::chi_square_tail_check(m, &section.tail_t, section.tail_trials, seed))
        .collect::<Result<Vec<_>>>()?;
    let pass = cells.iter().all(|c| c.report.pass) && tails.iter().all(|t| t.pass);
    Ok(VerifyOutcome { cells, tails, pass })
}

pub fn verify_csv(v: &VerifyOutcome) -> String {
    let mut s = String::from("m,delta,ratio,epsilon,trials,upper_violations,lower_tail_mass,margin,pass\n");
    for c in &v.cells {
        let r = &c.report;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            c.m, c.delta, c.ratio, r.epsilon, r.trials, r.upper_bound_violations, r.lower_tail_mass, r.margin, r.pass
        );
    }
    s.push_str("\nm,t,empirical_tail,bound,margin,pass\n");
    for t in &v.tails {
        for row in &t.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", t.m, row.t, row.empirical, row.bound, row.margin, row.pass);
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeterRow {
    pub algorithm: Algorithm,
    pub m: Option<usize>,
    pub bytes_up: u64,
}

pub fn run_meter(doc: &ConfigDocument) -> Result<Vec<MeterRow>> {
    let n = doc.model.as_ref().ok_or_else(|| missing("model", "meter-only mode"))?.num_params();
    let section = doc.meter.clone().unwrap_or_default();
    let mut rows = Vec::new();
    let algorithms = match doc.algorithm {
        Some(a) => vec![a],
        None => vec![Algorithm::Fedavg, Algorithm::Fedrp],
    };
    for alg in algorithms {
        if alg == Algorithm::Fedrp {
            for &m in &section.m {
                rows.push(MeterRow {
                    algorithm: alg,
                    m: Some(m),
                    bytes_up: orchestrator::metered_uplink_bytes(alg, n, Some(m))?,
                });
            }
        } else {
            rows.push(MeterRow {
                algorithm: alg,
                m: None,
                bytes_up: orchestrator::metered_uplink_bytes(alg, n, None)?,
            });
        }
    }
    Ok(rows)
}

pub fn run_attack(section: &AttackSection) -> Result<SeparationReport> {
    let harness = AttackHarness {
        model: ModelSpec::logistic_regression(section.input_dim, section.num_classes),
        learning_rate: section.learning_rate,
        dlg: DlgConfig {
            max_iters: section.max_iters,
            ..DlgConfig::default()
        },
    };
    harness.separation(section.seeds, section.m)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

/// Executes a resolved document, writing its outputs into `output_dir`.
pub fn run(doc: &ConfigDocument) -> Result<()> {
    let dir = &doc.output_dir;
    fs::create_dir_all(dir)?;
    let resolved = serde_json::to_string_pretty(doc).map_err(|e| Error::Config(e.to_string()))?;
    write(dir, "resolved_config.json", &(resolved + "\n"))?;
    match doc.mode {
        Mode::Train => {
            let report = run_train(doc)?;
            write(dir, "metrics.csv", &metrics_csv(&report.metrics))?;
            write(dir, "summary.txt", &train_summary(doc, &report))?;
        }
        Mode::VerifyDp => {
            let section = doc.verify.clone().unwrap_or_default();
            let outcome = run_verify(&section, doc.master_seed)?;
            write(dir, "verify_dp.csv", &verify_csv(&outcome))?;
            let failing = outcome.cells.iter().filter(|c| !c.report.pass).count()
                + outcome.tails.iter().flat_map(|t| &t.rows).filter(|r| !r.pass).count();
            let summary = format!(
                "privacy grid cells: {}\ntail checks: {}\nfailures: {failing}\nresult: {}\n",
                outcome.cells.len(),
                outcome.tails.iter().map(|t| t.rows.len()).sum::<usize>(),
                if outcome.pass { "PASS" } else { "FAIL" }
            );
            write(dir, "summary.txt", &summary)?;
            if !outcome.pass {
                return Err(Error::Verification(format!("{failing} privacy checks failed")));
            }
        }
        Mode::MeterOnly => {
            let rows = run_meter(doc)?;
            let mut csv = String::from("algorithm,m,bytes_up_per_round\n");
            let mut summary = String::new();
            for r in &rows {
                let m = r.m.map(|m| m.to_string()).unwrap_or_default();
                let _ = writeln!(csv, "{},{},{}", r.algorithm.name(), m, r.bytes_up);
                let _ = writeln!(summary, "{} m={m}: {} bytes ({:.1} KB) per client per round", r.algorithm.name(), r.bytes_up, r.bytes_up as f64 / 1000.0);
            }
            write(dir, "meter.csv", &csv)?;
            write(dir, "summary.txt", &summary)?;
        }
        Mode::Attack => {
            let section = doc.attack.clone().unwrap_or_default();
            let report = run_attack(&section)?;
            let mut csv = String::from("seed,fedavg_mse,fedrp_mse,random_mse\n");
            for r in &report.rows {
                let _ = writeln!(csv, "{},{},{},{}", r.seed, r.fedavg_mse, r.fedrp_mse, r.random_mse);
            }
            write(dir, "attack.csv", &csv)?;
            let summary = format!(
                "median mse fedavg: {}\nmedian mse fedrp (m={}): {}\nmedian mse random: {}\nrank test p (fedrp better than random): {}\nresult: {}\n",
                report.median_fedavg,
                report.m,
                report.median_fedrp,
                report.median_random,
                report.p_value,
                if report.pass { "PASS" } else { "FAIL" }
            );
            write(dir, "summary.txt", &summary)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL_FEDAVG: &str = r#"{
        "mode": "train", "output_dir": "out", "algorithm": "fedavg",
        "clients": 2, "rounds": 3, "local_epochs": 1, "batch_size": 8, "learning_rate": 0.1,
        "model": {"architecture": "logistic-regression", "input_dim": 4, "num_classes": 2},
        "dataset": {"kind": "synthetic", "classes": 2, "per_class": 20, "dim": 4, "separation": 4.0}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let doc = parse_config_str(MINIMAL_FEDAVG).unwrap();
        assert_eq!(doc.rho, 1.0);
        assert_eq!(doc.delta, 0.01);
        assert_eq!(doc.eval_model, EvalModel::ClientZero);
        assert_eq!(doc.transport, TransportMode::Loopback);
    }

    #[test]
    fn fedrp_without_m_names_the_key() {
        let text = MINIMAL_FEDAVG.replace("\"fedavg\"", "\"fedrp\"");
        let err = parse_config_str(&text).unwrap_err().to_string();
        assert!(err.contains("`m`"), "{err}");
    }

    #[test]
    fn duplicate_and_unknown_keys_are_rejected() {
        let dup = MINIMAL_FEDAVG.replace("\"clients\": 2,", "\"clients\": 2, \"clients\": 3,");
        let err = parse_config_str(&dup).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
        let unknown = MINIMAL_FEDAVG.replace("\"clients\": 2,", "\"clientz\": 2,");
        let err = parse_config_str(&unknown).unwrap_err().to_string();
        assert!(err.contains("clientz"), "{err}");
    }

    #[test]
    fn type_errors_carry_the_key_path() {
        let bad = MINIMAL_FEDAVG.replace("\"input_dim\": 4", "\"input_dim\": \"four\"");
        let err = parse_config_str(&bad).unwrap_err().to_string();
        assert!(err.contains("model.input_dim"), "{err}");
    }

    #[test]
    fn csv_has_fixed_header_and_one_row_per_round() {
        let doc = parse_config_str(MINIMAL_FEDAVG).unwrap();
        let report = run_train(&doc).unwrap();
        let csv = metrics_csv(&report.metrics);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("1,fedavg,"));
        // Non-private baselines leave the epsilon columns empty.
        assert!(lines[1].ends_with(",,,0"), "{}", lines[1]);
    }
}
