//! Round and message protocol of the proposed scheme: clients run their
//! sub-models in parallel, the server processes boundary activations
//! strictly one at a time against a single shared frozen base model with
//! per-client adapters.
//!
//! Time is simulated: every event carries timestamps derived from the
//! supplied per-client phase durations, while the numeric work itself runs
//! in deterministic order (client forwards by client index, server jobs in
//! schedule order). Per-client server updates touch disjoint adapters, so
//! the processing order never changes any parameter value, only
//! timestamps.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aggregate::{self, GlobalAdapterSet, PairedAdapters, Weighting};
use crate::cost::{task_profiles, ClientTiming};
use crate::data::{Example, Shard};
use crate::error::{Error, Result};
use crate::model::{
    accuracy, eval_logits, forward_client, forward_server, sgd_step_client, sgd_step_server,
    AdapterSet, BaseWeights, ClientAdapters, ClientPass, Partition, ServerAdapters,
};
use crate::sched::{self, Schedule};
use crate::tensor::Tensor;

/// Boundary activation uploaded by a client: the smashed data, its labels,
/// and the sender's split index.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMsg {
    pub client_id: usize,
    pub split_index: usize,
    /// Shape `[batch*seq, hidden]`.
    pub activation: Tensor,
    pub labels: Vec<usize>,
    /// Simulated instant the client finished computing it.
    pub produced_at: f64,
}

impl ActivationMsg {
    /// Wire size: f64 payload, one f64 label slot per batch row, 16-byte
    /// header.
    pub fn byte_size(&self) -> u64 {
        self.activation.numel() as u64 * 8 + self.labels.len() as u64 * 8 + 16
    }
}

/// Boundary gradient returned by the server; shape matches the activation
/// it answers.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMsg {
    pub client_id: usize,
    pub grad: Tensor,
}

impl GradientMsg {
    pub fn byte_size(&self) -> u64 {
        self.grad.numel() as u64 * 8 + 16
    }
}

/// Client lifecycle within a round. Legal transitions:
/// Idle -> ForwardDone -> AwaitGrad -> BackwardDone -> (Idle | AwaitAggregate),
/// and AwaitAggregate -> Idle once fresh adapters arrive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Idle,
    ForwardDone,
    AwaitGrad,
    BackwardDone,
    AwaitAggregate,
}

/// One client: its share of the model, its data shard, and its phase.
pub struct ClientState {
    pub client_id: usize,
    pub partition: Partition,
    base: Arc<BaseWeights>,
    pub adapters: ClientAdapters,
    shard: Shard,
    cursor: usize,
    batch_size: usize,
    lr: f64,
    phase: Phase,
    pending: Option<ClientPass>,
}

impl ClientState {
    pub fn new(
        client_id: usize,
        partition: Partition,
        base: Arc<BaseWeights>,
        adapters: ClientAdapters,
        shard: Shard,
        batch_size: usize,
        lr: f64,
    ) -> Result<Self> {
        if adapters.cut != partition.cut() {
            return Err(Error::SplitMismatch {
                client: client_id,
                got: adapters.cut,
                expected: partition.cut(),
            });
        }
        if shard.examples.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "client {client_id}: empty data shard"
            )));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "client {client_id}: batch_size must be >= 1"
            )));
        }
        Ok(Self {
            client_id,
            partition,
            base,
            adapters,
            shard,
            cursor: 0,
            batch_size,
            lr,
            phase: Phase::Idle,
            pending: None,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn sample_count(&self) -> u64 {
        self.shard.examples.len() as u64
    }

    pub fn base(&self) -> &Arc<BaseWeights> {
        &self.base
    }

    fn wrong_phase(&self, op: &str) -> Error {
        Error::Protocol {
            client: self.client_id,
            reason: format!("{op} in phase {:?}", self.phase),
        }
    }

    /// Next `batch_size` examples in shard order, wrapping around.
    fn next_batch(&mut self) -> (Vec<usize>, Vec<usize>) {
        let n = self.shard.examples.len();
        let mut tokens = Vec::with_capacity(self.batch_size * self.base.config.seq_len);
        let mut labels = Vec::with_capacity(self.batch_size);
        for j in 0..self.batch_size {
            let ex = &self.shard.examples[(self.cursor + j) % n];
            tokens.extend_from_slice(&ex.tokens);
            labels.push(ex.label);
        }
        self.cursor = (self.cursor + self.batch_size) % n;
        (tokens, labels)
    }

    /// Forward through the client sub-model on the next local batch. The
    /// tape is retained for the later backward pass.
    pub fn client_local_step(&mut self, produced_at: f64) -> Result<ActivationMsg> {
        if self.phase != Phase::Idle {
            return Err(self.wrong_phase("client_local_step"));
        }
        let (tokens, labels) = self.next_batch();
        let pass = forward_client(&self.base, &self.adapters, &tokens)?;
        let activation = pass.activation().clone();
        self.pending = Some(pass);
        self.phase = Phase::ForwardDone;
        Ok(ActivationMsg {
            client_id: self.client_id,
            split_index: self.partition.cut(),
            activation,
            labels,
            produced_at,
        })
    }

    /// Marks the activation as uploaded; the client now blocks on the
    /// gradient.
    pub fn activation_sent(&mut self) -> Result<()> {
        if self.phase != Phase::ForwardDone {
            return Err(self.wrong_phase("activation_sent"));
        }
        self.phase = Phase::AwaitGrad;
        Ok(())
    }

    /// Chains the received boundary gradient through the retained tape and
    /// applies one SGD step to the client-side adapters.
    pub fn client_apply_grad(&mut self, msg: &GradientMsg) -> Result<()> {
        if self.phase != Phase::AwaitGrad {
            return Err(self.wrong_phase("client_apply_grad"));
        }
        if msg.client_id != self.client_id {
            return Err(Error::Protocol {
                client: self.client_id,
                reason: format!("received gradient addressed to client {}", msg.client_id),
            });
        }
        let pass = self.pending.as_ref().ok_or_else(|| Error::Protocol {
            client: self.client_id,
            reason: "no retained forward tape".into(),
        })?;
        let grads = pass.boundary_backward(&msg.grad)?;
        sgd_step_client(&mut self.adapters, &grads, self.lr)?;
        self.pending = None;
        self.phase = Phase::BackwardDone;
        Ok(())
    }

    /// Closes the round: back to Idle, or parked until aggregation
    /// delivers fresh adapters.
    pub fn finish_round(&mut self, await_aggregate: bool) -> Result<()> {
        if self.phase != Phase::BackwardDone {
            return Err(self.wrong_phase("finish_round"));
        }
        self.phase = if await_aggregate {
            Phase::AwaitAggregate
        } else {
            Phase::Idle
        };
        Ok(())
    }

    /// Replaces the client-side adapters after aggregation.
    pub fn install_adapters(&mut self, adapters: ClientAdapters) -> Result<()> {
        if self.phase != Phase::AwaitAggregate {
            return Err(self.wrong_phase("install_adapters"));
        }
        if adapters.cut != self.partition.cut() {
            return Err(Error::SplitMismatch {
                client: self.client_id,
                got: adapters.cut,
                expected: self.partition.cut(),
            });
        }
        self.adapters = adapters;
        self.phase = Phase::Idle;
        Ok(())
    }
}

/// The server: one shared frozen base model and one server-side adapter
/// entry per registered client.
pub struct ServerState {
    base: Arc<BaseWeights>,
    entries: BTreeMap<usize, ServerAdapters>,
    lr: f64,
    /// Simulated seconds to swap a client's adapters in before processing.
    pub adapter_load_latency: f64,
}

impl ServerState {
    pub fn new(base: Arc<BaseWeights>, lr: f64) -> Self {
        Self {
            base,
            entries: BTreeMap::new(),
            lr,
            adapter_load_latency: 0.0,
        }
    }

    pub fn base(&self) -> &Arc<BaseWeights> {
        &self.base
    }

    pub fn register_client(&mut self, client_id: usize, adapters: ServerAdapters) -> Result<()> {
        if self.entries.contains_key(&client_id) {
            return Err(Error::Protocol {
                client: client_id,
                reason: "already registered".into(),
            });
        }
        self.entries.insert(client_id, adapters);
        Ok(())
    }

    pub fn adapters(&self, client_id: usize) -> Result<&ServerAdapters> {
        self.entries
            .get(&client_id)
            .ok_or(Error::UnknownClient(client_id))
    }

    pub fn client_ids(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    /// Replaces one client's server-side adapters after aggregation.
    pub fn install_adapters(&mut self, client_id: usize, adapters: ServerAdapters) -> Result<()> {
        let entry = self
            .entries
            .get_mut(&client_id)
            .ok_or(Error::UnknownClient(client_id))?;
        if adapters.cut != entry.cut {
            return Err(Error::SplitMismatch {
                client: client_id,
                got: adapters.cut,
                expected: entry.cut,
            });
        }
        *entry = adapters;
        Ok(())
    }

    /// Forward and backward through the server sub-model with the sender's
    /// adapters, one SGD step on them, and the boundary gradient back.
    /// Never touches any other client's entry.
    pub fn process(&mut self, msg: &ActivationMsg) -> Result<(GradientMsg, f64)> {
        let entry = self
            .entries
            .get_mut(&msg.client_id)
            .ok_or(Error::UnknownClient(msg.client_id))?;
        if msg.split_index != entry.cut {
            return Err(Error::SplitMismatch {
                client: msg.client_id,
                got: msg.split_index,
                expected: entry.cut,
            });
        }
        let pass = forward_server(&self.base, entry, &msg.activation, &msg.labels)?;
        let loss = pass.loss();
        let (boundary, grads) = pass.backward()?;
        sgd_step_server(entry, &grads, self.lr)?;
        Ok((
            GradientMsg {
                client_id: msg.client_id,
                grad: boundary,
            },
            loss,
        ))
    }
}

/// One timestamped simulation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub event: String,
    pub actor: String,
    pub t_start: f64,
    pub t_end: f64,
    pub bytes: u64,
}

/// All events of one round, in emission order (client phases first, then
/// server jobs in serve order).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundTrace {
    pub events: Vec<TraceEvent>,
}

impl RoundTrace {
    pub fn start_time(&self) -> f64 {
        self.events
            .iter()
            .map(|e| e.t_start)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn end_time(&self) -> f64 {
        self.events
            .iter()
            .map(|e| e.t_end)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn duration(&self) -> f64 {
        if self.events.is_empty() {
            return 0.0;
        }
        self.end_time() - self.start_time()
    }

    /// Server busy intervals in serve order.
    pub fn server_intervals(&self) -> Vec<(f64, f64)> {
        self.events
            .iter()
            .filter(|e| e.event == "server_process")
            .map(|e| (e.t_start, e.t_end))
            .collect()
    }

    /// Newline-delimited JSON, one event per line.
    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_ndjson(text: &str) -> Result<Self> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str::<TraceEvent>(l)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { events })
    }
}

/// Server processing-order policy for a round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    /// Longest-tail-first event-driven list scheduling.
    Greedy,
    /// Earliest release first.
    Fifo,
    /// Explicit serve order (testing and what-if runs).
    Fixed(Vec<usize>),
}

/// Everything one round produces besides mutated client/server state.
pub struct RoundOutcome {
    pub trace: RoundTrace,
    pub schedule: Schedule,
    /// Training loss per client, keyed by client id.
    pub losses: BTreeMap<usize, f64>,
}

/// Runs one full round at simulated time `t0`: every client computes one
/// local batch step, the server answers each exactly once in policy order.
/// Client phases end at Idle, or AwaitAggregate when `await_aggregate`.
pub fn run_round(
    clients: &mut [ClientState],
    server: &mut ServerState,
    policy: &Policy,
    timings: &[ClientTiming],
    t0: f64,
    await_aggregate: bool,
) -> Result<RoundOutcome> {
    if clients.is_empty() {
        return Err(Error::InvalidArgument("no clients in round".into()));
    }
    if clients.len() != timings.len() {
        return Err(Error::InvalidArgument(format!(
            "{} clients but {} timing rows",
            clients.len(),
            timings.len()
        )));
    }
    for (c, t) in clients.iter().zip(timings) {
        if c.client_id != t.client_id {
            return Err(Error::InvalidArgument(format!(
                "timing row for client {} aligned with client {}",
                t.client_id, c.client_id
            )));
        }
        if c.phase != Phase::Idle {
            return Err(Error::Protocol {
                client: c.client_id,
                reason: format!("round start requires Idle, found {:?}", c.phase),
            });
        }
    }

    let mut trace = RoundTrace::default();
    let mut inbox: BTreeMap<usize, ActivationMsg> = BTreeMap::new();
    let mut index_of: BTreeMap<usize, usize> = BTreeMap::new();

    // Client-side parallel phase: all forwards start at t0.
    for (i, (client, timing)) in clients.iter_mut().zip(timings).enumerate() {
        let forward_end = t0 + timing.forward_s;
        let msg = client.client_local_step(forward_end)?;
        client.activation_sent()?;
        trace.events.push(TraceEvent {
            event: "client_forward".into(),
            actor: format!("client:{}", client.client_id),
            t_start: t0,
            t_end: forward_end,
            bytes: 0,
        });
        trace.events.push(TraceEvent {
            event: "uplink".into(),
            actor: format!("client:{}", client.client_id),
            t_start: forward_end,
            t_end: forward_end + timing.uplink_s,
            bytes: msg.byte_size(),
        });
        if index_of.insert(client.client_id, i).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate client id {}",
                client.client_id
            )));
        }
        inbox.insert(client.client_id, msg);
    }

    // Adapter swap-in counts as server busy time, so it shifts the
    // schedule itself.
    let mut tasks = task_profiles(timings);
    for task in &mut tasks {
        task.server_time += server.adapter_load_latency;
    }
    let schedule = match policy {
        Policy::Greedy => sched::greedy_order(&tasks)?,
        Policy::Fifo => sched::fifo_order(&tasks)?,
        Policy::Fixed(order) => sched::schedule_with_order(&tasks, order, "fixed")?,
    };

    // Server-side sequential phase, in schedule order.
    let mut losses = BTreeMap::new();
    for job in &schedule.jobs {
        let msg = inbox.remove(&job.client).expect("schedule covers inbox");
        let timing = &timings[index_of[&job.client]];
        let (grad_msg, loss) = server.process(&msg)?;
        trace.events.push(TraceEvent {
            event: "server_process".into(),
            actor: "server".into(),
            t_start: t0 + job.start,
            t_end: t0 + job.end,
            bytes: 0,
        });
        let down_end = t0 + job.end + timing.downlink_s;
        trace.events.push(TraceEvent {
            event: "downlink".into(),
            actor: "server".into(),
            t_start: t0 + job.end,
            t_end: down_end,
            bytes: grad_msg.byte_size(),
        });
        trace.events.push(TraceEvent {
            event: "client_backward".into(),
            actor: format!("client:{}", job.client),
            t_start: down_end,
            t_end: down_end + timing.backward_s,
            bytes: 0,
        });
        let client = &mut clients[index_of[&job.client]];
        client.client_apply_grad(&grad_msg)?;
        losses.insert(job.client, loss);
    }

    for client in clients.iter_mut() {
        client.finish_round(await_aggregate)?;
    }
    Ok(RoundOutcome {
        trace,
        schedule,
        losses,
    })
}

/// Rejoins every client's two adapter fragments for aggregation.
pub fn pair_all(clients: &[ClientState], server: &ServerState) -> Result<Vec<PairedAdapters>> {
    clients
        .iter()
        .map(|c| {
            Ok(PairedAdapters {
                client_id: c.client_id,
                sample_count: c.sample_count(),
                set: aggregate::pair(&c.adapters, server.adapters(c.client_id)?, c.partition)?,
            })
        })
        .collect()
}

/// Training loop configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub rounds: usize,
    /// Aggregate after every this many rounds.
    pub agg_every: usize,
    pub policy: Policy,
    pub weighting: Weighting,
}

/// Per-round metrics. `train_loss` averages the clients' batch losses;
/// the held-out numbers evaluate the would-be aggregate of that round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub heldout_accuracy: f64,
    pub aggregated: bool,
}

/// The result of a full training run.
pub struct TrainingRun {
    pub history: Vec<RoundRecord>,
    pub global: GlobalAdapterSet,
    pub traces: Vec<RoundTrace>,
}

/// Mean cross-entropy and accuracy of `set` on a held-out list.
pub fn heldout_metrics(
    base: &BaseWeights,
    set: &AdapterSet,
    heldout: &[Example],
) -> Result<(f64, f64)> {
    if heldout.is_empty() {
        return Err(Error::InvalidArgument("empty held-out set".into()));
    }
    let mut tokens = Vec::with_capacity(heldout.len() * base.config.seq_len);
    let mut labels = Vec::with_capacity(heldout.len());
    for ex in heldout {
        tokens.extend_from_slice(&ex.tokens);
        labels.push(ex.label);
    }
    let logits = eval_logits(base, set, &tokens)?;
    let c = logits.cols();
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks_exact(c).zip(&labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
    }
    Ok((loss / labels.len() as f64, accuracy(&logits, &labels)))
}

/// Runs `rounds` rounds with aggregation every `agg_every` rounds:
/// pair -> weighted average -> split -> redistribute to every party.
/// Rounds chain on the simulated clock; aggregation itself costs zero
/// simulated time. The returned global set is the average of the final
/// client states (installed state when the last round aggregated), with
/// `version` counting installed aggregations.
pub fn run_training(
    clients: &mut [ClientState],
    server: &mut ServerState,
    timings: &[ClientTiming],
    setup: &TrainSetup,
    heldout: &[Example],
) -> Result<TrainingRun> {
    if setup.rounds == 0 || setup.agg_every == 0 {
        return Err(Error::InvalidArgument(
            "rounds and agg_every must be >= 1".into(),
        ));
    }
    let base = Arc::clone(clients[0].base());
    let mut history = Vec::with_capacity(setup.rounds);
    let mut traces = Vec::with_capacity(setup.rounds);
    let mut version = 0u32;
    let mut latest: Option<AdapterSet> = None;
    let mut t = 0.0f64;

    for round in 0..setup.rounds {
        let aggregate_now = (round + 1) % setup.agg_every == 0;
        let outcome = run_round(clients, server, &setup.policy, timings, t, aggregate_now)?;

        let paired = pair_all(clients, server)?;
        let averaged = aggregate::fedavg(&paired, setup.weighting)?;
        let (heldout_loss, heldout_accuracy) = heldout_metrics(&base, &averaged, heldout)?;
        let train_loss =
            outcome.losses.values().sum::<f64>() / outcome.losses.len() as f64;

        if aggregate_now {
            version += 1;
            let global = GlobalAdapterSet {
                set: averaged.clone(),
                version,
            };
            let partitions: BTreeMap<usize, Partition> =
                clients.iter().map(|c| (c.client_id, c.partition)).collect();
            let shares = aggregate::split_and_distribute(&global, &partitions)?;
            for client in clients.iter_mut() {
                let (client_half, server_half) = shares[&client.client_id].clone();
                client.install_adapters(client_half)?;
                server.install_adapters(client.client_id, server_half)?;
            }
        }

        let t_end = outcome.trace.end_time();
        history.push(RoundRecord {
            round,
            t_start: t,
            t_end,
            train_loss,
            heldout_loss,
            heldout_accuracy,
            aggregated: aggregate_now,
        });
        traces.push(outcome.trace);
        latest = Some(averaged);
        t = t_end;
    }

    Ok(TrainingRun {
        history,
        global: GlobalAdapterSet {
            set: latest.expect("rounds >= 1"),
            version,
        },
        traces,
    })
}
