//! Consensus ADMM, both in full parameter space (FedADMM) and in a randomly
//! projected space (FedRP).
//!
//! Client `i` minimises the augmented objective
//!
//! ```text
//! L_i(w) = f_i(w) + y_i^T (A w - z̄) + rho/2 ||A w - z̄||^2
//! ```
//!
//! with `A` the identity for the classic variant. The argmin is solved
//! inexactly with epochs of minibatch gradient descent; every epoch must not
//! increase `L_i` on the full shard, otherwise it is redone at half the
//! learning rate.

use std::num::NonZeroUsize;

use serde::{Deserialize, Serialize};

use crate::data::{batch_positions, Dataset};
use crate::error::{ensure_len, Error, Result};
use crate::models::{self, ModelSpec};
use crate::projection::{ConsensusMap, IdentityMap, Projector, ProjectionSpec};
use crate::rng::{self, Purpose};
use crate::vector::{axpy, dot, mean_of, sub, DualVector, ParamVector, ProjectedVector};

/// Absolute slack allowed when checking that an epoch did not increase the
/// objective.
pub const DESCENT_TOLERANCE: f64 = 1e-6;
/// Learning-rate halvings tried before an epoch is rejected.
pub const MAX_HALVINGS: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalSolveConfig {
    pub epochs: NonZeroUsize,
    pub batch_size: NonZeroUsize,
    pub learning_rate: f64,
}

impl LocalSolveConfig {
    pub fn new(epochs: usize, batch_size: usize, learning_rate: f64) -> Result<Self> {
        let epochs = NonZeroUsize::new(epochs)
            .ok_or_else(|| Error::InvalidArgument("local epochs must be positive".into()))?;
        let batch_size = NonZeroUsize::new(batch_size)
            .ok_or_else(|| Error::InvalidArgument("batch size must be positive".into()))?;
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            epochs,
            batch_size,
            learning_rate,
        })
    }
}

/// A client's private loss `f_i`, evaluated on subsets of its local samples.
pub trait LocalObjective: Send + Sync {
    fn num_params(&self) -> usize;
    fn num_samples(&self) -> usize;
    /// Mean loss over the samples at `positions` (indices into `0..num_samples`).
    fn loss(&self, w: &[f64], positions: &[usize]) -> Result<f64>;
    fn loss_grad(&self, w: &[f64], positions: &[usize]) -> Result<(f64, Vec<f64>)>;

    fn full_loss(&self, w: &[f64]) -> Result<f64> {
        let all: Vec<usize> = (0..self.num_samples()).collect();
        self.loss(w, &all)
    }
}

/// Cross-entropy of a model on one client's shard of a dataset.
pub struct ShardObjective<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub shard: &'a [usize],
}

impl ShardObjective<'_> {
    fn batch(&self, positions: &[usize]) -> models::Batch {
        let ix: Vec<usize> = positions.iter().map(|&p| self.shard[p]).collect();
        self.data.gather(&ix)
    }
}

impl LocalObjective for ShardObjective<'_> {
    fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    fn num_samples(&self) -> usize {
        self.shard.len()
    }

    fn loss(&self, w: &[f64], positions: &[usize]) -> Result<f64> {
        models::loss(self.spec, w, &self.batch(positions))
    }

    fn loss_grad(&self, w: &[f64], positions: &[usize]) -> Result<(f64, Vec<f64>)> {
        let (l, g) = models::loss_and_gradient(self.spec, w, &self.batch(positions))?;
        Ok((l, g.into_inner()))
    }
}

/// `f(w) = 1/2 ||w - c||^2`, a single-sample objective with a known minimiser.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub center: Vec<f64>,
}

impl LocalObjective for QuadraticObjective {
    fn num_params(&self) -> usize {
        self.center.len()
    }

    fn num_samples(&self) -> usize {
        1
    }

    fn loss(&self, w: &[f64], _positions: &[usize]) -> Result<f64> {
        ensure_len("parameter vector", self.center.len(), w.len())?;
        let d = sub(w, &self.center);
        Ok(0.5 * dot(&d, &d))
    }

    fn loss_grad(&self, w: &[f64], positions: &[usize]) -> Result<(f64, Vec<f64>)> {
        let l = self.loss(w, positions)?;
        Ok((l, sub(w, &self.center)))
    }
}

/// Per-client ADMM state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientAdmmState {
    pub w: ParamVector,
    pub y: DualVector,
    pub rho: f64,
}

impl ClientAdmmState {
    /// Zero duals in a consensus space of dimension `consensus_dim`.
    pub fn new(w: ParamVector, consensus_dim: usize, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
        }
        Ok(Self {
            w,
            y: DualVector::zeros(consensus_dim),
            rho,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub z_bar: ProjectedVector,
    pub round: u32,
}

impl GlobalState {
    pub fn new(consensus_dim: usize) -> Self {
        Self {
            z_bar: ProjectedVector::zeros(consensus_dim),
            round: 0,
        }
    }
}

/// The linear and quadratic consensus terms of the augmented objective.
pub struct Penalty<'a> {
    pub map: &'a dyn ConsensusMap,
    pub y: &'a [f64],
    pub z_bar: &'a [f64],
    pub rho: f64,
}

impl Penalty<'_> {
    fn check(&self, n: usize) -> Result<()> {
        ensure_len("consensus map input", self.map.input_dim(), n)?;
        ensure_len("dual vector", self.map.output_dim(), self.y.len())?;
        ensure_len("consensus target", self.map.output_dim(), self.z_bar.len())
    }

    /// Value and gradient `A^T (y + rho (A w - z̄))`.
    pub fn value_grad(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let r = sub(&self.map.apply(w), self.z_bar);
        let value = dot(self.y, &r) + 0.5 * self.rho * dot(&r, &r);
        let mut v = self.y.to_vec();
        axpy(self.rho, &r, &mut v);
        (value, self.map.adjoint(&v))
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        let r = sub(&self.map.apply(w), self.z_bar);
        dot(self.y, &r) + 0.5 * self.rho * dot(&r, &r)
    }
}

/// Where a local update sits in the run; used to label divergence errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UpdateTag {
    pub round: u32,
    pub client: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalSolveOutcome {
    pub w: ParamVector,
    /// `f_i` on the full shard at the returned point.
    pub local_loss: f64,
    /// Augmented objective on the full shard: at the start, then after each epoch.
    pub objective_trace: Vec<f64>,
    /// Epochs that needed at least one learning-rate halving.
    pub backoffs: usize,
    /// Epochs rejected after all halvings (the previous iterate was kept).
    pub rejected_epochs: usize,
}

fn full_objective(obj: &dyn LocalObjective, penalty: Option<&Penalty>, w: &[f64]) -> Result<(f64, f64)> {
    let f = obj.full_loss(w)?;
    let p = penalty.map_or(0.0, |p| p.value(w));
    Ok((f, f + p))
}

/// Gradient of the augmented objective on one minibatch.
pub fn augmented_grad(
    obj: &dyn LocalObjective,
    penalty: Option<&Penalty>,
    w: &[f64],
    positions: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let (mut value, mut grad) = obj.loss_grad(w, positions)?;
    if let Some(p) = penalty {
        let (pv, pg) = p.value_grad(w);
        value += pv;
        axpy(1.0, &pg, &mut grad);
    }
    Ok((value, grad))
}

/// Runs `cfg.epochs` epochs of minibatch descent from `w0` on `f + penalty`.
/// Epoch `e` shuffles with `derive_seed(batch_seed, Batching, [e])`.
pub fn local_solve(
    obj: &dyn LocalObjective,
    penalty: Option<&Penalty>,
    w0: &[f64],
    cfg: &LocalSolveConfig,
    batch_seed: u64,
    tag: UpdateTag,
) -> Result<LocalSolveOutcome> {
    ensure_len("initial parameters", obj.num_params(), w0.len())?;
    if obj.num_samples() == 0 {
        return Err(Error::InvalidArgument("local shard is empty".into()));
    }
    if let Some(p) = penalty {
        p.check(w0.len())?;
    }
    let diverged = |detail: String| Error::Divergence {
        round: tag.round,
        client: tag.client,
        detail,
    };

    let mut w = w0.to_vec();
    let (mut f, mut objective) = full_objective(obj, penalty, &w)?;
    if !objective.is_finite() {
        return Err(diverged(format!("initial objective is {objective}")));
    }
    let mut trace = vec![objective];
    let mut backoffs = 0;
    let mut rejected = 0;

    for epoch in 0..cfg.epochs.get() {
        let seed = rng::derive_seed(batch_seed, Purpose::Batching, &[epoch as u64]);
        let order = batch_positions(obj.num_samples(), cfg.batch_size.get(), seed)?;
        let mut lr = cfg.learning_rate;
        let mut accepted = None;
        let mut last_seen = f64::NAN;
        for attempt in 0..=MAX_HALVINGS {
            let mut cand = w.clone();
            for positions in &order {
                let (_, g) = augmented_grad(obj, penalty, &cand, positions)?;
                axpy(-lr, &g, &mut cand);
            }
            let (cf, cobj) = full_objective(obj, penalty, &cand)?;
            last_seen = cobj;
            if cobj.is_finite() && cobj <= objective + DESCENT_TOLERANCE {
                if attempt > 0 {
                    backoffs += 1;
                }
                accepted = Some((cand, cf, cobj));
                break;
            }
            lr *= 0.5;
        }
        match accepted {
            Some((cand, cf, cobj)) => {
                w = cand;
                f = cf;
                objective = cobj;
            }
            None if last_seen.is_finite() => rejected += 1,
            None => {
                return Err(diverged(format!(
                    "objective became {last_seen} in epoch {epoch} even after {MAX_HALVINGS} halvings"
                )))
            }
        }
        trace.push(objective);
    }

    Ok(LocalSolveOutcome {
        w: ParamVector::from(w),
        local_loss: f,
        objective_trace: trace,
        backoffs,
        rejected_epochs: rejected,
    })
}

/// Gradient of the projected augmented objective on `batch`.
pub fn augmented_objective_grad_fedrp(
    state: &ClientAdmmState,
    spec: &ProjectionSpec,
    z_bar: &[f64],
    model: &ModelSpec,
    batch: &models::Batch,
) -> Result<ParamVector> {
    ensure_len("parameter vector", spec.n, state.w.len())?;
    let projector = Projector::new(*spec);
    let penalty = Penalty {
        map: &projector,
        y: &state.y,
        z_bar,
        rho: state.rho,
    };
    penalty.check(state.w.len())?;
    let (_, mut g) = models::loss_and_gradient(model, &state.w, batch)?;
    let (_, pg) = penalty.value_grad(&state.w);
    axpy(1.0, &pg, &mut g);
    Ok(g)
}

/// Scalar projected augmented objective on `batch`.
pub fn augmented_objective_fedrp(
    state: &ClientAdmmState,
    w: &[f64],
    spec: &ProjectionSpec,
    z_bar: &[f64],
    model: &ModelSpec,
    batch: &models::Batch,
) -> Result<f64> {
    let projector = Projector::new(*spec);
    let penalty = Penalty {
        map: &projector,
        y: &state.y,
        z_bar,
        rho: state.rho,
    };
    penalty.check(w.len())?;
    Ok(models::loss(model, w, batch)? + penalty.value(w))
}

/// Local step of the projected protocol under the current round's map.
pub fn local_update_fedrp(
    state: &ClientAdmmState,
    map: &dyn ConsensusMap,
    z_bar: &[f64],
    obj: &dyn LocalObjective,
    cfg: &LocalSolveConfig,
    batch_seed: u64,
    tag: UpdateTag,
) -> Result<LocalSolveOutcome> {
    let penalty = Penalty {
        map,
        y: &state.y,
        z_bar,
        rho: state.rho,
    };
    local_solve(obj, Some(&penalty), &state.w, cfg, batch_seed, tag)
}

/// Local step of classic consensus ADMM (`A = I`).
pub fn local_update_classic(
    state: &ClientAdmmState,
    z_bar: &[f64],
    obj: &dyn LocalObjective,
    cfg: &LocalSolveConfig,
    batch_seed: u64,
    tag: UpdateTag,
) -> Result<LocalSolveOutcome> {
    let identity = IdentityMap { n: state.w.len() };
    local_update_fedrp(state, &identity, z_bar, obj, cfg, batch_seed, tag)
}

/// `y + rho (A w_new - z̄)`.
pub fn dual_update_fedrp(
    state: &ClientAdmmState,
    map: &dyn ConsensusMap,
    w_new: &[f64],
    z_bar: &[f64],
) -> Result<DualVector> {
    ensure_len("parameter vector", map.input_dim(), w_new.len())?;
    ensure_len("consensus target", map.output_dim(), z_bar.len())?;
    ensure_len("dual vector", map.output_dim(), state.y.len())?;
    dual_step(&state.y, state.rho, &map.apply(w_new), z_bar)
}

/// `y + rho (w_new - z̄)`.
pub fn dual_update_classic(state: &ClientAdmmState, w_new: &[f64], z_bar: &[f64]) -> Result<DualVector> {
    ensure_len("parameter vector", state.y.len(), w_new.len())?;
    ensure_len("consensus target", state.y.len(), z_bar.len())?;
    dual_step(&state.y, state.rho, w_new, z_bar)
}

/// `y + rho (projected - z̄)` where `projected` is already in consensus space.
pub fn dual_step(y: &[f64], rho: f64, projected: &[f64], z_bar: &[f64]) -> Result<DualVector> {
    ensure_len("projected vector", y.len(), projected.len())?;
    ensure_len("consensus target", y.len(), z_bar.len())?;
    let mut out = y.to_vec();
    for ((o, a), z) in out.iter_mut().zip(projected).zip(z_bar) {
        *o += rho * (a - z);
    }
    Ok(DualVector::from(out))
}

/// `z = A^{t+1} w_new` under the next round's matrix.
pub fn compute_z(spec_next: &ProjectionSpec, w_new: &[f64]) -> Result<ProjectedVector> {
    crate::projection::project(spec_next, w_new)
}

/// Elementwise mean of the client messages.
pub fn aggregate<V: AsRef<[f64]>>(z_list: &[V]) -> Result<ProjectedVector> {
    Ok(ProjectedVector::from(mean_of(z_list)?))
}
