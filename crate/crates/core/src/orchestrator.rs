//! Round-based execution of the five algorithms over a real transport.
//!
//! Every client runs in its own thread and talks to the server only through
//! framed messages on its channel; the server relays seed envelopes,
//! averages what it receives and broadcasts the result. Metrics are taken
//! from the server's byte meters and from instrumentation returned by the
//! client threads.

use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::admm::{
    dual_step, dual_update_fedrp, local_solve, local_update_fedrp, ClientAdmmState, LocalObjective,
    LocalSolveConfig, ShardObjective, UpdateTag,
};
use crate::data::{Dataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::models::{self, Batch, ModelSpec};
use crate::privacy::{self, FedRpBudget, GaussianBudget};
use crate::projection::{
    open_round_seed, seal_round_seed, seed_generator, ClientKey, ConsensusMap, IdentityMap, KeyedHashSeal,
    Projector, ProjectionSpec, SeedEnvelope, SeedSchedule, DEFAULT_MATERIALIZE_LIMIT,
};
use crate::rng::{self, Purpose};
use crate::transport::{
    loopback_pair, tcp_pairs, transport_recv, transport_send, ByteMeter, Channel, Direction, MsgType,
    WireMessage, SERVER_ID,
};
use crate::vector::{mean_of, norm2, sub, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedrp,
    Fedavg,
    Fedadmm,
    FedavgDp,
    Fwc,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fedrp => "fedrp",
            Algorithm::Fedavg => "fedavg",
            Algorithm::Fedadmm => "fedadmm",
            Algorithm::FedavgDp => "fedavg_dp",
            Algorithm::Fwc => "fwc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    #[default]
    ClientZero,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    #[default]
    Loopback,
    Tcp,
}

/// Which consensus target the projected dual step measures against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualAnchor {
    /// `y += rho (A^t w^{t+1} - z̄^t)` right after the local step.
    #[default]
    Previous,
    /// `y += rho (z_i - z̄^{t+1})` after the broadcast, as classic ADMM does.
    /// Exact for a fixed identity map; diverges when the map changes every round.
    Aggregated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    #[default]
    Gaussian,
    /// Forces `A = I` (requires `m = n`); for structural tests.
    Identity,
}

/// A client that drops its connection at the start of a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub client: u32,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub clients: usize,
    pub rounds: u32,
    pub local: LocalSolveConfig,
    pub rho: f64,
    pub m: Option<usize>,
    pub dp_sigma: Option<f64>,
    pub sigma_min: Option<f64>,
    pub delta: f64,
    /// Sensitivity used by the accountant.
    pub sensitivity: f64,
    pub eval_model: EvalModel,
    pub master_seed: u64,
    pub transport: TransportMode,
    pub tcp_addr: String,
    pub dual_anchor: DualAnchor,
    pub projection: ProjectionKind,
    pub materialize_limit: usize,
    pub record_trajectory: bool,
    pub record_trace: bool,
    pub record_wall_time: bool,
    pub fault: Option<FaultPlan>,
}

impl ExperimentConfig {
    pub fn new(algorithm: Algorithm, clients: usize, rounds: u32, local: LocalSolveConfig) -> Self {
        Self {
            algorithm,
            clients,
            rounds,
            local,
            rho: 1.0,
            m: None,
            dp_sigma: None,
            sigma_min: None,
            delta: 0.01,
            sensitivity: 1.0,
            eval_model: EvalModel::ClientZero,
            master_seed: 0,
            transport: TransportMode::Loopback,
            tcp_addr: "127.0.0.1:0".into(),
            dual_anchor: DualAnchor::Previous,
            projection: ProjectionKind::Gaussian,
            materialize_limit: DEFAULT_MATERIALIZE_LIMIT,
            record_trajectory: false,
            record_trace: false,
            record_wall_time: false,
            fault: None,
        }
    }

    pub fn with_algorithm(&self, algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.clients == 0 {
            return bad("clients must be positive".into());
        }
        if self.clients > u32::MAX as usize - 1 {
            return bad("too many clients".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be positive".into());
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be positive, got {}", self.rho));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.sensitivity >= 0.0 && self.sensitivity.is_finite()) {
            return bad(format!("sensitivity must be non-negative, got {}", self.sensitivity));
        }
        match self.algorithm {
            Algorithm::Fedrp => {
                match self.m {
                    None => return bad("m is required for fedrp".into()),
                    Some(0) => return bad("m must be positive".into()),
                    Some(_) => {}
                }
                match self.sigma_min {
                    Some(s) if s > 0.0 && s.is_finite() => {}
                    Some(s) => return bad(format!("sigma_min must be positive, got {s}")),
                    None => return bad("sigma_min is required for fedrp".into()),
                }
            }
            Algorithm::FedavgDp => match self.dp_sigma {
                Some(s) if s >= 0.0 && s.is_finite() => {}
                Some(s) => return bad(format!("dp_sigma must be non-negative, got {s}")),
                None => return bad("dp_sigma is required for fedavg_dp".into()),
            },
            _ => {}
        }
        if let Some(f) = self.fault {
            if f.client as usize >= self.clients {
                return bad(format!("fault client {} out of range", f.client));
            }
        }
        Ok(())
    }
}

/// Per-client objectives, the shared starting point and an optional test
/// evaluator returning accuracy.
pub struct Federation<'a> {
    pub clients: Vec<Box<dyn LocalObjective + 'a>>,
    pub init: ParamVector,
    pub evaluator: Option<Box<dyn Fn(&[f64]) -> Result<f64> + Send + Sync + 'a>>,
}

/// Evaluation batch size.
pub const EVAL_BATCH: usize = 16;

impl<'a> Federation<'a> {
    pub fn from_objectives(clients: Vec<Box<dyn LocalObjective + 'a>>, init: ParamVector) -> Self {
        Self {
            clients,
            init,
            evaluator: None,
        }
    }

    /// One shard objective per partition entry; accuracy on `test` if given.
    pub fn from_dataset(
        model: &'a ModelSpec,
        train: &'a Dataset,
        plan: &'a PartitionPlan,
        test: Option<&'a Dataset>,
        init: ParamVector,
    ) -> Result<Self> {
        model.validate()?;
        if train.dim != model.input_dim {
            return Err(Error::Config(format!(
                "dataset has {} features but the model expects {}",
                train.dim, model.input_dim
            )));
        }
        let clients = plan
            .shards
            .iter()
            .map(|shard| {
                Box::new(ShardObjective {
                    spec: model,
                    data: train,
                    shard,
                }) as Box<dyn LocalObjective + 'a>
            })
            .collect();
        let evaluator = test.map(|t| {
            let batches: Vec<Batch> = t.eval_batches(EVAL_BATCH);
            Box::new(move |w: &[f64]| models::evaluate(model, w, &batches))
                as Box<dyn Fn(&[f64]) -> Result<f64> + Send + Sync + 'a>
        });
        Ok(Self {
            clients,
            init,
            evaluator,
        })
    }

    pub fn num_params(&self) -> usize {
        self.init.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub algorithm: Algorithm,
    pub mean_train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub bytes_up_per_client: u64,
    pub bytes_down_per_client: u64,
    pub epsilon_round: Option<f64>,
    pub epsilon_cumulative: Option<f64>,
    pub wall_time_ms: u64,
    /// `max_i ||z_i - z̄|| / ||z̄||` over this round's messages.
    pub consensus_residual: Option<f64>,
    /// `max_i ||w_i^t - w_i^{t-1}||`.
    pub max_update_norm: f64,
    pub envelope_bytes: u64,
    pub header_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub round: u32,
    pub client: u32,
    pub direction: Direction,
    pub frame: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub algorithm: Algorithm,
    pub metrics: Vec<RoundMetrics>,
    pub final_params: Vec<ParamVector>,
    /// Model evaluated under the configured mode.
    pub eval_params: ParamVector,
    /// Accuracy of client 0's model and of the client average after the last round.
    pub final_accuracy_client_zero: Option<f64>,
    pub final_accuracy_average: Option<f64>,
    /// Round seeds as opened by client 0, setup round included.
    pub seed_log: Vec<(u32, u64)>,
    /// Envelopes relayed by the server (opaque to it).
    pub envelope_log: Vec<SeedEnvelope>,
    /// `trajectory[t][i]` is client `i`'s parameters after round `t + 1`.
    pub trajectory: Vec<Vec<ParamVector>>,
    pub trace: Vec<TraceEntry>,
    pub setup_meter: ByteMeter,
}

impl RunReport {
    pub fn last(&self) -> &RoundMetrics {
        self.metrics.last().expect("at least one round")
    }
}

struct Node {
    id: u32,
    state: ClientAdmmState,
    z_bar: Vec<f64>,
    key: ClientKey,
    schedule: SeedSchedule,
    map: Option<Box<dyn ConsensusMap>>,
    pending_seed: Option<u64>,
}

struct ClientOut {
    local_loss: f64,
    update_norm: f64,
}

struct ServerOut {
    meters: Vec<ByteMeter>,
    residual: Option<f64>,
    trace: Vec<TraceEntry>,
    envelopes: Vec<SeedEnvelope>,
}

struct Ctx<'c, 'a> {
    cfg: &'c ExperimentConfig,
    fed: &'c Federation<'a>,
    /// Client key directory; only client code paths read it.
    keys: Vec<ClientKey>,
    n: usize,
    m: usize,
    seal: KeyedHashSeal,
}

impl Ctx<'_, '_> {
    fn make_map(&self, seed: u64) -> Result<Box<dyn ConsensusMap>> {
        Ok(match self.cfg.projection {
            ProjectionKind::Identity => Box::new(IdentityMap { n: self.n }),
            ProjectionKind::Gaussian => Box::new(Projector::with_limit(
                ProjectionSpec::new(seed, self.m, self.n)?,
                self.cfg.materialize_limit,
            )),
        })
    }

    fn batch_seed(&self, client: u32, round: u32) -> u64 {
        rng::derive_seed(self.cfg.master_seed, Purpose::Batching, &[client as u64, round as u64])
    }

    fn send_seed(&self, node: &mut Node, ch: &mut dyn Channel, round: u32) -> Result<()> {
        let seed = rng::derive_seed(self.cfg.master_seed, Purpose::RoundSeed, &[round as u64, node.id as u64]);
        let recipients: Vec<(u32, &ClientKey)> = self
            .keys
            .iter()
            .enumerate()
            .filter(|(j, _)| *j as u32 != node.id)
            .map(|(j, k)| (j as u32, k))
            .collect();
        let nonce_seed = rng::derive_seed(self.cfg.master_seed, Purpose::SealNonce, &[node.id as u64]);
        let envelopes = seal_round_seed(&self.seal, &mut node.schedule, round, seed, node.id, &recipients, nonce_seed)?;
        for env in &envelopes {
            transport_send(ch, &WireMessage::seed_envelope(env))?;
        }
        node.pending_seed = Some(seed);
        Ok(())
    }

    fn recv_seed(&self, node: &mut Node, ch: &mut dyn Channel, round: u32) -> Result<u64> {
        let msg = expect(transport_recv(ch)?, MsgType::SeedEnvelope, round)?;
        let env = msg.to_envelope()?;
        if env.recipient_client != node.id {
            return Err(Error::Protocol(format!(
                "client {} received an envelope for client {}",
                node.id, env.recipient_client
            )));
        }
        let seed = open_round_seed(&self.seal, &env, &node.key)?;
        node.schedule.register(round, seed)?;
        Ok(seed)
    }

    /// Seed exchange for the round's matrix; returns the seed.
    fn exchange_seed(&self, node: &mut Node, ch: &mut dyn Channel, round: u32, generator: u32) -> Result<u64> {
        if node.id == generator {
            Ok(node.pending_seed.take().expect("generator sealed a seed this round"))
        } else {
            self.recv_seed(node, ch, round)
        }
    }
}

fn expect(msg: WireMessage, ty: MsgType, round: u32) -> Result<WireMessage> {
    if msg.msg_type != ty || msg.round != round {
        return Err(Error::Protocol(format!(
            "expected {ty:?} for round {round}, got {:?} for round {}",
            msg.msg_type, msg.round
        )));
    }
    Ok(msg)
}

fn client_setup(ctx: &Ctx, node: &mut Node, ch: &mut dyn Channel) -> Result<ClientOut> {
    let generator = seed_generator(0, ctx.cfg.clients as u32);
    if node.id == generator {
        ctx.send_seed(node, ch, 0)?;
    }
    let seed = ctx.exchange_seed(node, ch, 0, generator)?;
    node.map = Some(ctx.make_map(seed)?);
    Ok(ClientOut {
        local_loss: 0.0,
        update_norm: 0.0,
    })
}

fn client_round(ctx: &Ctx, node: &mut Node, ch: &mut dyn Channel, t: u32) -> Result<ClientOut> {
    if ctx.cfg.fault == Some(FaultPlan { client: node.id, round: t }) {
        ch.close();
        return Err(Error::RoundAborted {
            round: t,
            reason: format!("client {} dropped out", node.id),
        });
    }
    let result = match ctx.cfg.algorithm {
        Algorithm::Fedrp => fedrp_client(ctx, node, ch, t),
        Algorithm::Fedadmm => fedadmm_client(ctx, node, ch, t),
        Algorithm::Fedavg | Algorithm::FedavgDp => fedavg_client(ctx, node, ch, t),
        Algorithm::Fwc => fwc_client(ctx, node, t),
    };
    if result.is_err() {
        ch.close();
    }
    result
}

fn fedrp_client(ctx: &Ctx, node: &mut Node, ch: &mut dyn Channel, t: u32) -> Result<ClientOut> {
    let cfg = ctx.cfg;
    let generator = seed_generator(t, cfg.clients as u32);
    if node.id == generator {
        ctx.send_seed(node, ch, t)?;
    }
    let tag = UpdateTag { round: t, client: node.id };
    let obj = ctx.fed.clients[node.id as usize].as_ref();
    let map = node.map.as_deref().expect("setup installs the first matrix");
    let out = local_update_fedrp(&node.state, map, &node.z_bar, obj, &cfg.local, ctx.batch_seed(node.id, t), tag)?;
    if cfg.dual_anchor == DualAnchor::Previous {
        node.state.y = dual_update_fedrp(&node.state, map, &out.w, &node.z_bar)?;
    }
    let w = privacy::enforce_sigma_min(out.w, cfg.sigma_min.expect("validated"))?;
    let seed = ctx.exchange_seed(node, ch, t, generator)?;
    let next = ctx.make_map(seed)?;
    let z = next.apply(&w);
    transport_send(ch, &WireMessage::vector(MsgType::ClientUpdate, t, node.id, &z)?)?;
    let z_bar = expect(transport_recv(ch)?, MsgType::ServerBroadcast, t)?.to_vector()?;
    if z_bar.len() != ctx.m {
        return Err(Error::Protocol(format!("broadcast has {} entries, expected {}", z_bar.len(), ctx.m)));
    }
    if cfg.dual_anchor == DualAnchor::Aggregated {
        node.state.y = dual_step(&node.state.y, node.state.rho, &z, &z_bar)?;
    }
    let update_norm = norm2(&sub(&w, &node.state.w));
    node.state.w = w;
    node.map = Some(next);
    node.z_bar = z_bar;
    Ok(ClientOut {
        local_loss: out.local_loss,
        update_norm,
    })
}

fn fedadmm_client(ctx: &Ctx, node: &mut Node, ch: &mut dyn Channel, t: u32) -> Result<ClientOut> {
    let tag = UpdateTag { round: t, client: node.id };
    let obj = ctx.fed.clients[node.id as usize].as_ref();
    let identity = IdentityMap { n: ctx.n };
    let out = local_update_fedrp(&node.state, &identity, &node.z_bar, obj, &ctx.cfg.local, ctx.batch_seed(node.id, t), tag)?;
    transport_send(ch, &WireMessage::vector(MsgType::FullParams, t, node.id, &out.w)?)?;
    let z_bar = expect(transport_recv(ch)?, MsgType::ServerBroadcast, t)?.to_vector()?;
    if z_bar.len() != ctx.n {
        return Err(Error::Protocol(format!("broadcast has {} entries, expected {}", z_bar.len(), ctx.n)));
    }
    node.state.y = dual_step(&node.state.y, node.state.rho, &out.w, &z_bar)?;
    let update_norm = norm2(&sub(&out.w, &node.state.w));
    node.state.w = out.w;
    node.z_bar = z_bar;
    Ok(ClientOut {
        local_loss: out.local_loss,
        update_norm,
    })
}

fn fedavg_client(ctx: &Ctx, node: &mut Node, ch: &mut dyn Channel, t: u32) -> Result<ClientOut> {
    let tag = UpdateTag { round: t, client: node.id };
    let obj = ctx.fed.clients[node.id as usize].as_ref();
    let out = local_solve(obj, None, &node.state.w, &ctx.cfg.local, ctx.batch_seed(node.id, t), tag)?;
    let sent = match (ctx.cfg.algorithm, ctx.cfg.dp_sigma) {
        (Algorithm::FedavgDp, Some(sigma)) => {
            let seed = rng::derive_seed(ctx.cfg.master_seed, Purpose::DpNoise, &[t as u64, node.id as u64]);
            privacy::add_gaussian_noise(&out.w, sigma, seed)?
        }
        _ => out.w.clone(),
    };
    transport_send(ch, &WireMessage::vector(MsgType::FullParams, t, node.id, &sent)?)?;
    let w_bar = expect(transport_recv(ch)?, MsgType::ServerBroadcast, t)?.to_vector()?;
    if w_bar.len() != ctx.n {
        return Err(Error::Protocol(format!("broadcast has {} entries, expected {}", w_bar.len(), ctx.n)));
    }
    let update_norm = norm2(&sub(&w_bar, &node.state.w));
    node.state.w = ParamVector::from(w_bar);
    Ok(ClientOut {
        local_loss: out.local_loss,
        update_norm,
    })
}

fn fwc_client(ctx: &Ctx, node: &mut Node, t: u32) -> Result<ClientOut> {
    let tag = UpdateTag { round: t, client: node.id };
    let obj = ctx.fed.clients[node.id as usize].as_ref();
    let out = local_solve(obj, None, &node.state.w, &ctx.cfg.local, ctx.batch_seed(node.id, t), tag)?;
    let update_norm = norm2(&sub(&out.w, &node.state.w));
    node.state.w = out.w;
    Ok(ClientOut {
        local_loss: out.local_loss,
        update_norm,
    })
}

struct Server<'s> {
    channels: &'s mut [Box<dyn Channel>],
    meters: Vec<ByteMeter>,
    trace: Vec<TraceEntry>,
    record: bool,
    round: u32,
}

impl Server<'_> {
    fn recv(&mut self, client: usize) -> Result<WireMessage> {
        let msg = transport_recv(self.channels[client].as_mut())?;
        self.meters[client].record(&msg, Direction::Up);
        self.log(client, Direction::Up, &msg)?;
        Ok(msg)
    }

    fn send(&mut self, client: usize, msg: &WireMessage) -> Result<()> {
        transport_send(self.channels[client].as_mut(), msg)?;
        self.meters[client].record(msg, Direction::Down);
        self.log(client, Direction::Down, msg)
    }

    fn log(&mut self, client: usize, direction: Direction, msg: &WireMessage) -> Result<()> {
        if self.record {
            self.trace.push(TraceEntry {
                round: self.round,
                client: client as u32,
                direction,
                frame: crate::transport::encode(msg)?,
            });
        }
        Ok(())
    }

    /// Relays the generator's envelopes to their recipients.
    fn relay_envelopes(&mut self, generator: usize) -> Result<Vec<SeedEnvelope>> {
        let k = self.channels.len();
        let mut seen = vec![false; k];
        let mut log = Vec::with_capacity(k.saturating_sub(1));
        for _ in 1..k {
            let msg = expect(self.recv(generator)?, MsgType::SeedEnvelope, self.round)?;
            let env = msg.to_envelope()?;
            let r = env.recipient_client as usize;
            if r >= k || r == generator || seen[r] || env.sender_client as usize != generator {
                return Err(Error::Protocol(format!(
                    "bad envelope routing from {} to {}",
                    env.sender_client, env.recipient_client
                )));
            }
            seen[r] = true;
            self.send(r, &msg)?;
            log.push(env);
        }
        Ok(log)
    }

    /// Collects exactly one update per client, averages and broadcasts.
    fn aggregate_round(&mut self, ty: MsgType, dim: usize) -> Result<Option<f64>> {
        let k = self.channels.len();
        let mut updates = Vec::with_capacity(k);
        for i in 0..k {
            let msg = expect(self.recv(i)?, ty, self.round)?;
            if msg.client_id as usize != i {
                return Err(Error::Protocol(format!("update on channel {i} claims client {}", msg.client_id)));
            }
            let v = msg.to_vector()?;
            if v.len() != dim {
                return Err(Error::Protocol(format!("update from client {i} has {} entries, expected {dim}", v.len())));
            }
            updates.push(v);
        }
        let mean = crate::admm::aggregate(&updates)?;
        let msg = WireMessage::vector(MsgType::ServerBroadcast, self.round, SERVER_ID, &mean)?;
        for i in 0..k {
            self.send(i, &msg)?;
        }
        let z_bar = msg.to_vector()?;
        let denom = norm2(&z_bar);
        Ok((denom > 0.0).then(|| {
            updates
                .iter()
                .map(|u| norm2(&sub(u, &z_bar)) / denom)
                .fold(0.0, f64::max)
        }))
    }
}

fn server_phase(ctx: &Ctx, channels: &mut [Box<dyn Channel>], t: u32, setup: bool) -> Result<ServerOut> {
    let k = channels.len();
    let mut server = Server {
        channels,
        meters: vec![ByteMeter::default(); k],
        trace: Vec::new(),
        record: ctx.cfg.record_trace,
        round: t,
    };
    let mut envelopes = Vec::new();
    let mut residual = None;
    match ctx.cfg.algorithm {
        Algorithm::Fedrp => {
            envelopes = server.relay_envelopes(seed_generator(t, k as u32) as usize)?;
            if !setup {
                residual = server.aggregate_round(MsgType::ClientUpdate, ctx.m)?;
            }
        }
        Algorithm::Fedavg | Algorithm::FedavgDp | Algorithm::Fedadmm if !setup => {
            residual = server.aggregate_round(MsgType::FullParams, ctx.n)?;
        }
        _ => {}
    }
    Ok(ServerOut {
        meters: server.meters,
        residual,
        trace: server.trace,
        envelopes,
    })
}

fn run_phase(
    ctx: &Ctx,
    nodes: &mut [Node],
    client_channels: &mut [Box<dyn Channel>],
    server_channels: &mut [Box<dyn Channel>],
    t: u32,
    setup: bool,
) -> Result<(Vec<ClientOut>, ServerOut)> {
    thread::scope(|s| {
        let handles: Vec<_> = nodes
            .iter_mut()
            .zip(client_channels.iter_mut())
            .map(|(node, ch)| {
                s.spawn(move || {
                    if setup {
                        client_setup(ctx, node, ch.as_mut())
                    } else {
                        client_round(ctx, node, ch.as_mut(), t)
                    }
                })
            })
            .collect();
        let server = server_phase(ctx, server_channels, t, setup);
        if server.is_err() {
            for ch in server_channels.iter_mut() {
                ch.close();
            }
        }
        let clients: Vec<Result<ClientOut>> = handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Protocol("client thread panicked".into()))))
            .collect();

        if let Some(e) = clients.iter().position(|r| matches!(r, Err(Error::Divergence { .. }))) {
            return Err(clients.into_iter().nth(e).expect("index in range").err().expect("is error"));
        }
        let server = server.map_err(|e| match e {
            Error::Transport(reason) => Error::RoundAborted { round: t, reason },
            other => other,
        })?;
        let outs = clients.into_iter().collect::<Result<Vec<_>>>()?;
        Ok((outs, server))
    })
}

type Channels = (Vec<Box<dyn Channel>>, Vec<Box<dyn Channel>>);

fn open_channels(cfg: &ExperimentConfig) -> Result<Channels> {
    let mut server = Vec::with_capacity(cfg.clients);
    let mut client = Vec::with_capacity(cfg.clients);
    match cfg.transport {
        TransportMode::Loopback => {
            for _ in 0..cfg.clients {
                let (s, c) = loopback_pair();
                server.push(Box::new(s) as Box<dyn Channel>);
                client.push(Box::new(c) as Box<dyn Channel>);
            }
        }
        TransportMode::Tcp => {
            for (s, c) in tcp_pairs(&cfg.tcp_addr, cfg.clients)? {
                server.push(Box::new(s) as Box<dyn Channel>);
                client.push(Box::new(c) as Box<dyn Channel>);
            }
        }
    }
    Ok((server, client))
}

/// Accuracy of client 0's model or of the client average.
pub fn evaluate_global(mode: EvalModel, fed: &Federation, client_params: &[ParamVector]) -> Result<Option<f64>> {
    let Some(eval) = fed.evaluator.as_ref() else {
        return Ok(None);
    };
    Ok(Some(eval(&global_params(mode, client_params)?)?))
}

pub fn global_params(mode: EvalModel, client_params: &[ParamVector]) -> Result<ParamVector> {
    match mode {
        EvalModel::ClientZero => client_params
            .first()
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("no client models".into())),
        EvalModel::Average => Ok(ParamVector::from(mean_of(client_params)?)),
    }
}

fn epsilons(cfg: &ExperimentConfig, t: u32) -> Result<(Option<f64>, Option<f64>)> {
    let per_round = match cfg.algorithm {
        Algorithm::Fedrp => Some(privacy::epsilon_fedrp(&FedRpBudget {
            delta_sensitivity: cfg.sensitivity,
            sigma_min: cfg.sigma_min.expect("validated"),
            m: cfg.m.expect("validated"),
            delta: cfg.delta,
            rounds: cfg.rounds,
        })?),
        Algorithm::FedavgDp => match cfg.dp_sigma.expect("validated") {
            s if s > 0.0 => Some(privacy::epsilon_gaussian(&GaussianBudget {
                delta_sensitivity: cfg.sensitivity,
                sigma: s,
                delta: cfg.delta,
            })?),
            _ => Some(f64::INFINITY),
        },
        _ => None,
    };
    Ok((per_round, per_round.map(|e| privacy::compose_linear(e, t))))
}

/// Runs `cfg.algorithm` on `fed` for `cfg.rounds` rounds.
pub fn run(cfg: &ExperimentConfig, fed: &Federation) -> Result<RunReport> {
    cfg.validate()?;
    if fed.clients.len() != cfg.clients {
        return Err(Error::Config(format!(
            "config asks for {} clients but {} objectives were supplied",
            cfg.clients,
            fed.clients.len()
        )));
    }
    if cfg.algorithm == Algorithm::Fedrp
        && cfg.dual_anchor == DualAnchor::Aggregated
        && cfg.projection == ProjectionKind::Gaussian
    {
        log::warn!("aggregated dual anchor with a fresh projection per round is not stable");
    }
    let n = fed.num_params();
    if let Some(c) = fed.clients.iter().find(|c| c.num_params() != n) {
        return Err(Error::dims("client objective parameters", n, c.num_params()));
    }
    let m = match (cfg.algorithm, cfg.projection) {
        (Algorithm::Fedrp, ProjectionKind::Identity) => {
            let m = cfg.m.expect("validated");
            if m != n {
                return Err(Error::Config(format!("identity projection needs m = n = {n}, got m = {m}")));
            }
            n
        }
        (Algorithm::Fedrp, ProjectionKind::Gaussian) => cfg.m.expect("validated"),
        _ => n,
    };
    let k = cfg.clients;
    let ctx = Ctx {
        cfg,
        fed,
        keys: (0..k as u32).map(|i| ClientKey::derive(cfg.master_seed, i)).collect(),
        n,
        m,
        seal: KeyedHashSeal,
    };
    let consensus_dim = if cfg.algorithm == Algorithm::Fedrp { m } else { n };
    let mut nodes: Vec<Node> = (0..k as u32)
        .map(|i| {
            Ok(Node {
                id: i,
                state: ClientAdmmState::new(fed.init.clone(), consensus_dim, cfg.rho)?,
                z_bar: vec![0.0; consensus_dim],
                key: ctx.keys[i as usize].clone(),
                schedule: SeedSchedule::new(),
                map: None,
                pending_seed: None,
            })
        })
        .collect::<Result<_>>()?;
    let (mut server_ch, mut client_ch) = open_channels(cfg)?;

    let mut report = RunReport {
        algorithm: cfg.algorithm,
        metrics: Vec::with_capacity(cfg.rounds as usize),
        final_params: Vec::new(),
        eval_params: fed.init.clone(),
        final_accuracy_client_zero: None,
        final_accuracy_average: None,
        seed_log: Vec::new(),
        envelope_log: Vec::new(),
        trajectory: Vec::new(),
        trace: Vec::new(),
        setup_meter: ByteMeter::default(),
    };

    if cfg.algorithm == Algorithm::Fedrp {
        let (_, server) = run_phase(&ctx, &mut nodes, &mut client_ch, &mut server_ch, 0, true)?;
        report.envelope_log.extend(server.envelopes);
        report.trace.extend(server.trace);
        for m in &server.meters {
            report.setup_meter.envelope_bytes += m.envelope_bytes;
            report.setup_meter.header_bytes += m.header_bytes;
        }
    }

    for t in 1..=cfg.rounds {
        let start = Instant::now();
        let (outs, server) = run_phase(&ctx, &mut nodes, &mut client_ch, &mut server_ch, t, false)?;
        let up = server.meters.iter().map(|m| m.per_round_up).max().unwrap_or(0);
        let down = server.meters.iter().map(|m| m.per_round_down).max().unwrap_or(0);
        if server.meters.iter().any(|m| m.per_round_up != up || m.per_round_down != down) {
            return Err(Error::Protocol(format!("round {t}: clients exchanged unequal byte counts")));
        }
        let params: Vec<ParamVector> = nodes.iter().map(|n| n.state.w.clone()).collect();
        let accuracy = evaluate_global(cfg.eval_model, fed, &params)?;
        let (epsilon_round, epsilon_cumulative) = epsilons(cfg, t)?;
        let wall_time_ms = if cfg.record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        report.metrics.push(RoundMetrics {
            round: t,
            algorithm: cfg.algorithm,
            mean_train_loss: outs.iter().map(|o| o.local_loss).sum::<f64>() / k as f64,
            test_accuracy: accuracy,
            bytes_up_per_client: up,
            bytes_down_per_client: down,
            epsilon_round,
            epsilon_cumulative,
            wall_time_ms,
            consensus_residual: server.residual,
            max_update_norm: outs.iter().map(|o| o.update_norm).fold(0.0, f64::max),
            envelope_bytes: server.meters.iter().map(|m| m.envelope_bytes).sum(),
            header_bytes: server.meters.iter().map(|m| m.header_bytes).sum(),
        });
        report.envelope_log.extend(server.envelopes);
        report.trace.extend(server.trace);
        if cfg.record_trajectory {
            report.trajectory.push(params);
        }
        log::info!(
            "{} round {t}: loss {:.5} acc {:?}",
            cfg.algorithm.name(),
            report.metrics.last().map_or(f64::NAN, |m| m.mean_train_loss),
            accuracy
        );
    }

    report.final_params = nodes.iter().map(|n| n.state.w.clone()).collect();
    report.eval_params = global_params(cfg.eval_model, &report.final_params)?;
    report.final_accuracy_client_zero = evaluate_global(EvalModel::ClientZero, fed, &report.final_params)?;
    report.final_accuracy_average = evaluate_global(EvalModel::Average, fed, &report.final_params)?;
    report.seed_log = nodes[0].schedule.history().to_vec();
    for ch in client_ch.iter_mut().chain(server_ch.iter_mut()) {
        ch.close();
    }
    Ok(report)
}

pub fn run_fedrp(cfg: &ExperimentConfig, fed: &Federation) -> Result<RunReport> {
    run(&cfg.with_algorithm(Algorithm::Fedrp), fed)
}

pub fn run_fedavg(cfg: &ExperimentConfig, fed: &Federation) -> Result<RunReport> {
    run(&cfg.with_algorithm(Algorithm::Fedavg), fed)
}

pub fn run_fedadmm(cfg: &ExperimentConfig, fed: &Federation) -> Result<RunReport> {
    run(&cfg.with_algorithm(Algorithm::Fedadmm), fed)
}

pub fn run_fedavg_dp(cfg: &ExperimentConfig, fed: &Federation) -> Result<RunReport> {
    run(&cfg.with_algorithm(Algorithm::FedavgDp), fed)
}

pub fn run_fwc(cfg: &ExperimentConfig, fed: &Federation) -> Result<RunReport> {
    run(&cfg.with_algorithm(Algorithm::Fwc), fed)
}

/// Uplink payload bytes per client per round, computed by framing a
/// message of the right size without training.
pub fn metered_uplink_bytes(algorithm: Algorithm, n: usize, m: Option<usize>) -> Result<u64> {
    let (ty, len) = match algorithm {
        Algorithm::Fwc => return Ok(0),
        Algorithm::Fedrp => (
            MsgType::ClientUpdate,
            m.ok_or_else(|| Error::Config("m is required for fedrp".into()))?,
        ),
        _ => (MsgType::FullParams, n),
    };
    let msg = WireMessage::vector(ty, 1, 0, &vec![0.0; len])?;
    Ok(crate::transport::meter(ByteMeter::default(), &msg, Direction::Up).per_round_up)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admm::QuadraticObjective;

    fn quad_fed(centers: &[Vec<f64>]) -> Federation<'static> {
        let n = centers[0].len();
        Federation::from_objectives(
            centers
                .iter()
                .map(|c| Box::new(QuadraticObjective { center: c.clone() }) as Box<dyn LocalObjective>)
                .collect(),
            ParamVector::zeros(n),
        )
    }

    fn exact_cfg(alg: Algorithm, k: usize, rounds: u32, rho: f64) -> ExperimentConfig {
        ExperimentConfig::new(alg, k, rounds, LocalSolveConfig::new(1, 1, 1.0 / (1.0 + rho)).unwrap())
    }

    #[test]
    fn validation_names_missing_fields() {
        let base = exact_cfg(Algorithm::Fedrp, 2, 1, 1.0);
        let err = base.validate().unwrap_err().to_string();
        assert!(err.contains("m is required"), "{err}");
        let err = ExperimentConfig { m: Some(2), ..base.clone() }.validate().unwrap_err().to_string();
        assert!(err.contains("sigma_min"), "{err}");
        assert!(exact_cfg(Algorithm::FedavgDp, 2, 1, 1.0).validate().is_err());
        assert!(ExperimentConfig { clients: 0, ..exact_cfg(Algorithm::Fedavg, 1, 1, 1.0) }.validate().is_err());
    }

    #[test]
    fn fedadmm_over_transport_reaches_mean_of_centers() {
        let centers: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, -(i as f64) * 0.5, 2.0]).collect();
        let fed = quad_fed(&centers);
        let report = run(&exact_cfg(Algorithm::Fedadmm, 5, 200, 1.0), &fed).unwrap();
        let mean = mean_of(&centers).unwrap();
        for w in &report.final_params {
            for (a, b) in w.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-3, "{a} vs {b}");
            }
        }
        assert!(report.metrics.iter().all(|m| m.bytes_up_per_client == 12));
        assert!(report.metrics.iter().all(|m| m.epsilon_round.is_none()));
    }

    #[test]
    fn fedrp_bytes_and_epsilon_per_round() {
        let centers: Vec<Vec<f64>> = (0..3).map(|i| vec![1.0 + i as f64; 8]).collect();
        let fed = quad_fed(&centers);
        let cfg = ExperimentConfig {
            m: Some(3),
            sigma_min: Some(0.5),
            ..exact_cfg(Algorithm::Fedrp, 3, 4, 1.0)
        };
        let report = run(&cfg, &fed).unwrap();
        let eps = report.metrics[0].epsilon_round.unwrap();
        for (i, m) in report.metrics.iter().enumerate() {
            assert_eq!(m.bytes_up_per_client, 12);
            assert_eq!(m.bytes_down_per_client, 12);
            assert!((m.epsilon_cumulative.unwrap() - eps * (i + 1) as f64).abs() < 1e-9);
        }
        // Setup plus four rounds, two recipients each.
        assert_eq!(report.envelope_log.len(), 10);
        let seeds: std::collections::HashSet<u64> = report.seed_log.iter().map(|s| s.1).collect();
        assert_eq!(seeds.len(), report.seed_log.len());
        assert_eq!(report.seed_log.len(), 5);
    }

    #[test]
    fn fwc_sends_nothing() {
        let fed = quad_fed(&[vec![1.0], vec![3.0]]);
        let report = run(&exact_cfg(Algorithm::Fwc, 2, 3, 1.0), &fed).unwrap();
        assert!(report.metrics.iter().all(|m| m.bytes_up_per_client == 0 && m.bytes_down_per_client == 0));
    }

    #[test]
    fn metered_bytes_follow_the_four_byte_law() {
        assert_eq!(metered_uplink_bytes(Algorithm::Fedrp, 100, Some(7)).unwrap(), 28);
        assert_eq!(metered_uplink_bytes(Algorithm::Fedavg, 100, None).unwrap(), 400);
        assert_eq!(metered_uplink_bytes(Algorithm::Fwc, 100, None).unwrap(), 0);
    }

    #[test]
    fn eval_modes_agree_on_identical_clients() {
        let w = ParamVector::from(vec![1.0, 2.0]);
        let same = vec![w.clone(), w.clone(), w.clone()];
        assert_eq!(global_params(EvalModel::ClientZero, &same).unwrap(), global_params(EvalModel::Average, &same).unwrap());
        let one = vec![w.clone()];
        assert_eq!(global_params(EvalModel::Average, &one).unwrap(), w);
    }
}
