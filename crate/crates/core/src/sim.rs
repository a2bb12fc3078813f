//! Deterministic in-process network simulator.
//!
//! Every node is a real [`NodeState`] driven by the same operations the UDP
//! runtime uses. Datagrams are encoded and decoded with the real codec and
//! delivered synchronously, so byte counts are exact. A virtual clock with
//! one-second resolution drives all timers.
//!
//! Given the same [`ScenarioConfig`] the simulator produces a byte-identical
//! [`ScenarioReport`]. Each concern (topology, loss, churn, probes, node
//! secrets) draws from its own seeded stream, so two configs differing only
//! in, say, churn share the same documents and voters.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashSet};
use std::io;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{fetch_votes, CombineMode};
use crate::id::{InfoHash, NodeId};
use crate::kademlia::{LookupError, LookupOutcome};
use crate::node::ops::{self, AnnounceReport, Host, RpcError};
use crate::node::{CastOutcome, Clock, Journal, LocalVote, ManualClock, NodeConfig, NodeError, NodeState};
use crate::vote_store::{hour_of, in_window, Polarity, SECS_PER_HOUR};
use crate::wire::{Body, KrpcMessage, Method, Query, Response, VoteSketches};

/// Start of simulated time (an hour boundary).
pub const SIM_EPOCH: u64 = 1_699_999_200;
const BASE_PORT: u16 = 6881;
const SEND_ATTEMPTS: usize = 3;
const CAST_SPREAD_SECS: u64 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaliciousStrategy {
    /// Reply to `get_votes` with every register at 255.
    #[default]
    InflateRegisters,
    /// Reply to `get_votes` with empty sketches.
    ZeroOut,
    /// Swap the positive and negative sketches.
    FlipPolarity,
    /// Answer routing queries but drop `get_votes` and `announce_vote`.
    Silent,
}

fn default_k() -> usize {
    crate::kademlia::DEFAULT_K
}
fn default_alpha() -> usize {
    crate::kademlia::DEFAULT_ALPHA
}
fn default_announce_minutes() -> u64 {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub node_count: usize,
    pub duration_hours: u64,
    #[serde(default)]
    pub churn_rate: f64,
    #[serde(default)]
    pub message_loss: f64,
    #[serde(default)]
    pub malicious_fraction: f64,
    #[serde(default)]
    pub malicious_strategy: MaliciousStrategy,
    /// Upper bound on adversaries among any document's initial k replicas.
    /// Adversaries are placed to reach this bound where they can.
    #[serde(default)]
    pub max_malicious_replicas: Option<usize>,
    pub document_count: usize,
    pub positive_voters: usize,
    pub negative_voters: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_alpha")]
    pub alpha: usize,
    #[serde(default = "default_announce_minutes")]
    pub announce_period_minutes: u64,
    #[serde(default)]
    pub combiner: CombineMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{0} must be within [0, 1]")]
    Fraction(&'static str),
    #[error("{0}")]
    Invalid(String),
}

impl ScenarioConfig {
    /// The no-fault baseline: 100 nodes, 20 documents, 40 up and 10 down
    /// voters each, 12 hours.
    pub fn baseline(seed: u64) -> Self {
        Self {
            seed,
            node_count: 100,
            duration_hours: 12,
            churn_rate: 0.0,
            message_loss: 0.0,
            malicious_fraction: 0.0,
            malicious_strategy: MaliciousStrategy::default(),
            max_malicious_replicas: None,
            document_count: 20,
            positive_voters: 40,
            negative_voters: 10,
            k: default_k(),
            alpha: default_alpha(),
            announce_period_minutes: default_announce_minutes(),
            combiner: CombineMode::Robust,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("churn_rate", self.churn_rate),
            ("message_loss", self.message_loss),
            ("malicious_fraction", self.malicious_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Fraction(name));
            }
        }
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.node_count < 2 {
            return invalid("node_count must be at least 2");
        }
        if self.duration_hours == 0 {
            return invalid("duration_hours must be at least 1");
        }
        if self.positive_voters + self.negative_voters > self.node_count {
            return invalid("voters per document cannot exceed node_count (one vote per node address)");
        }
        if self.k == 0 || self.alpha == 0 {
            return invalid("k and alpha must be at least 1");
        }
        if self.announce_period_minutes == 0 || self.announce_period_minutes >= 60 {
            return invalid("announce_period_minutes must be between 1 and 59");
        }
        if self.message_loss >= 1.0 {
            return invalid("message_loss must be below 1");
        }
        Ok(())
    }

    fn announce_period_secs(&self) -> u64 {
        self.announce_period_minutes * 60
    }
}

/// A delivered vote: the announce reached at least one replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteEvent {
    pub time: u64,
    pub info_hash: InfoHash,
    pub voter: Ipv4Addr,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLog {
    pub documents: Vec<InfoHash>,
    pub probe_times: Vec<u64>,
    pub votes: Vec<VoteEvent>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrueCounts {
    pub positive: u64,
    pub negative: u64,
}

/// Distinct voters of `doc` whose vote was delivered inside the 24-hour
/// window ending at `at`.
pub fn true_counts(votes: &[VoteEvent], doc: &InfoHash, at: u64) -> TrueCounts {
    let mut pos = HashSet::new();
    let mut neg = HashSet::new();
    for v in votes {
        if v.info_hash == *doc && v.time <= at && in_window(hour_of(v.time), at) {
            match v.polarity {
                Polarity::Positive => pos.insert(v.voter),
                Polarity::Negative => neg.insert(v.voter),
            };
        }
    }
    TrueCounts {
        positive: pos.len() as u64,
        negative: neg.len() as u64,
    }
}

/// Ground truth for every probe, indexed `[probe][document]`.
pub fn replay_oracle(log: &EventLog) -> Vec<Vec<TrueCounts>> {
    log.probe_times
        .iter()
        .map(|&t| log.documents.iter().map(|d| true_counts(&log.votes, d, t)).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficCount {
    pub datagrams: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRow {
    pub doc: String,
    pub true_pos: u64,
    pub est_pos: u64,
    pub true_neg: u64,
    pub est_neg: u64,
    pub responders: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub time: u64,
    pub hour: u64,
    pub rows: Vec<DocumentRow>,
    pub queried: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub samples: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

impl ErrorSummary {
    fn from_samples(mut s: Vec<f64>) -> Self {
        s.sort_by(|a, b| a.total_cmp(b));
        let pct = |p: f64| {
            if s.is_empty() {
                0.0
            } else {
                let rank = ((p * s.len() as f64).ceil() as usize).clamp(1, s.len());
                s[rank - 1]
            }
        };
        Self {
            samples: s.len(),
            mean: if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 },
            p50: pct(0.50),
            p95: pct(0.95),
            p99: pct(0.99),
            max: s.last().copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub config: ScenarioConfig,
    pub probes: Vec<ProbeReport>,
    /// Relative error `|est - true| / max(true, 1)` over every probe,
    /// document and polarity with at least one responder.
    pub relative_error: ErrorSummary,
    /// Fraction of fetches with at least one responder.
    pub availability: f64,
    pub traffic: BTreeMap<String, TrafficCount>,
    pub total_datagrams: u64,
    pub total_bytes: u64,
    pub nodes_replaced: usize,
    pub malicious_nodes: usize,
    /// Adversaries among each document's initial k replicas.
    pub malicious_replicas: Vec<usize>,
}

impl ScenarioReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Rows of the final probe as CSV.
    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        if let Some(last) = self.probes.last() {
            for row in &last.rows {
                w.serialize(row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

struct SimNode {
    slot: usize,
    state: NodeState,
}

/// In-memory datagram network. Every datagram goes through the real codec.
struct Network {
    nodes: BTreeMap<SocketAddrV4, SimNode>,
    clock: Arc<ManualClock>,
    loss: f64,
    loss_rng: ChaCha8Rng,
    malicious: BTreeSet<usize>,
    strategy: MaliciousStrategy,
    traffic: BTreeMap<String, TrafficCount>,
    // Independent of `traffic`, cross-checks it.
    wire_datagrams: u64,
    wire_bytes: u64,
    next_tid: u16,
}

impl Network {
    fn count(&mut self, method: Method, len: usize) {
        let t = self.traffic.entry(method.name().to_string()).or_default();
        t.datagrams += 1;
        t.bytes += len as u64;
    }

    fn transmit(&mut self, data: &[u8]) -> bool {
        self.wire_datagrams += 1;
        self.wire_bytes += data.len() as u64;
        !(self.loss > 0.0 && self.loss_rng.gen_bool(self.loss))
    }

    fn deliver(&mut self, from: SocketAddrV4, to: SocketAddrV4, query: &Query) -> Result<Response, RpcError> {
        let method = query.method();
        for _ in 0..SEND_ATTEMPTS {
            let tid = self.next_tid.to_be_bytes().to_vec();
            self.next_tid = self.next_tid.wrapping_add(1);
            let datagram = KrpcMessage::query(tid.clone(), query.clone()).encode();
            self.count(method, datagram.len());
            if !self.transmit(&datagram) {
                continue;
            }
            let now = self.clock.now();
            let Some(target) = self.nodes.get_mut(&to) else {
                continue;
            };
            let hostile = self.malicious.contains(&target.slot);
            if hostile
                && self.strategy == MaliciousStrategy::Silent
                && matches!(method, Method::GetVotes | Method::AnnounceVote)
            {
                continue;
            }
            let Some(mut reply) = target.state.handle_datagram(&datagram, from, now) else {
                continue;
            };
            if hostile && method == Method::GetVotes {
                reply = tamper(&reply, self.strategy);
            }
            self.count(method, reply.len());
            if !self.transmit(&reply) {
                continue;
            }
            return match KrpcMessage::decode(&reply) {
                Ok(KrpcMessage {
                    transaction_id, body, ..
                }) if transaction_id == tid => match body {
                    Body::Response(r) => Ok(r),
                    Body::Error(e) => Err(RpcError::Remote(e)),
                    Body::Query(_) => Err(RpcError::Unexpected("query in reply slot")),
                },
                _ => Err(RpcError::Unexpected("undecodable reply")),
            };
        }
        Err(RpcError::Timeout)
    }
}

fn tamper(reply: &[u8], strategy: MaliciousStrategy) -> Vec<u8> {
    let Ok(mut msg) = KrpcMessage::decode(reply) else {
        return reply.to_vec();
    };
    if let Body::Response(r) = &mut msg.body {
        r.votes = match strategy {
            MaliciousStrategy::InflateRegisters => Some(VoteSketches {
                positive: [255; 256],
                negative: [255; 256],
            }),
            MaliciousStrategy::ZeroOut => Some(VoteSketches {
                positive: [0; 256],
                negative: [0; 256],
            }),
            MaliciousStrategy::FlipPolarity => r.votes.take().map(|v| VoteSketches {
                positive: v.negative,
                negative: v.positive,
            }),
            MaliciousStrategy::Silent => r.votes.take(),
        };
    }
    msg.encode()
}

struct SimHost<'a> {
    me: &'a mut NodeState,
    addr: SocketAddrV4,
    net: &'a mut Network,
}

impl Host for SimHost<'_> {
    fn now(&self) -> u64 {
        self.net.clock.now()
    }

    fn with_state<R>(&mut self, f: impl FnOnce(&mut NodeState) -> R) -> R {
        f(self.me)
    }

    fn exchange(&mut self, queries: Vec<(SocketAddrV4, Query)>) -> Vec<Result<Response, RpcError>> {
        queries
            .iter()
            .map(|(to, q)| {
                if *to == self.addr {
                    Err(RpcError::Timeout)
                } else {
                    self.net.deliver(self.addr, *to, q)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    HourTick { hour: u64 },
    Probe { index: usize },
    Cast { slot: usize },
    Announce { slot: usize, generation: u16 },
}

struct Slot {
    ip: Ipv4Addr,
    generation: u16,
    journal: Journal,
    /// Votes this slot's operator casts at the start.
    plan: Vec<(InfoHash, Polarity)>,
}

/// A running simulation. [`run_scenario`] drives one to completion; the
/// step methods let tests interleave their own actions.
pub struct Simulation {
    config: ScenarioConfig,
    net: Network,
    slots: Vec<Slot>,
    documents: Vec<InfoHash>,
    queue: BinaryHeap<Reverse<(u64, u64, Event)>>,
    seq: u64,
    id_rng: ChaCha8Rng,
    churn_rng: ChaCha8Rng,
    probe_rng: ChaCha8Rng,
    seed_rng: ChaCha8Rng,
    events: Vec<VoteEvent>,
    probes: Vec<ProbeReport>,
    probe_times: Vec<u64>,
    nodes_replaced: usize,
    malicious_replicas: Vec<usize>,
}

fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

fn slot_ip(slot: usize) -> Ipv4Addr {
    Ipv4Addr::from(0x0a00_0001u32 + slot as u32)
}

impl Simulation {
    pub fn new(config: ScenarioConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let seed = config.seed;
        let mut topo = stream(seed, 1);
        let clock = Arc::new(ManualClock::new(SIM_EPOCH));
        let n = config.node_count;

        let documents: Vec<InfoHash> = (0..config.document_count)
            .map(|_| InfoHash(topo.gen()))
            .collect();
        let mut slots: Vec<Slot> = (0..n)
            .map(|i| Slot {
                ip: slot_ip(i),
                generation: 0,
                journal: Journal::in_memory(),
                plan: Vec::new(),
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        for doc in &documents {
            order.shuffle(&mut topo);
            for (j, &slot) in order.iter().take(config.positive_voters + config.negative_voters).enumerate() {
                let p = if j < config.positive_voters {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                };
                slots[slot].plan.push((*doc, p));
            }
        }

        let mut sim = Simulation {
            net: Network {
                nodes: BTreeMap::new(),
                clock,
                loss: config.message_loss,
                loss_rng: stream(seed, 2),
                malicious: BTreeSet::new(),
                strategy: config.malicious_strategy,
                traffic: BTreeMap::new(),
                wire_datagrams: 0,
                wire_bytes: 0,
                next_tid: 0,
            },
            slots,
            documents,
            queue: BinaryHeap::new(),
            seq: 0,
            id_rng: stream(seed, 3),
            churn_rng: stream(seed, 4),
            probe_rng: stream(seed, 5),
            seed_rng: stream(seed, 6),
            events: Vec::new(),
            probes: Vec::new(),
            probe_times: Vec::new(),
            nodes_replaced: 0,
            malicious_replicas: Vec::new(),
            config,
        };

        // Join one by one, each through a random earlier node, then let every
        // node look itself up once more now that the network is complete.
        let mut joined: Vec<SocketAddrV4> = Vec::new();
        for slot in 0..n {
            let via = if joined.is_empty() {
                None
            } else {
                Some(joined[topo.gen_range(0..joined.len())])
            };
            joined.push(sim.spawn(slot, via));
        }
        for slot in 0..n {
            let addr = sim.addr_of(slot);
            sim.act(addr, |h| {
                let id = h.me.id();
                let _ = ops::lookup(h, id);
            });
        }

        sim.place_adversaries(&mut topo);

        let period = sim.config.announce_period_secs();
        for slot in 0..n {
            if !sim.slots[slot].plan.is_empty() {
                let at = SIM_EPOCH + topo.gen_range(0..CAST_SPREAD_SECS);
                sim.schedule(at, Event::Cast { slot });
            }
        }
        for hour in 1..sim.config.duration_hours {
            sim.schedule(SIM_EPOCH + hour * SECS_PER_HOUR, Event::HourTick { hour });
        }
        // One probe per simulated hour at a random second within it.
        for hour in 0..sim.config.duration_hours {
            let at = SIM_EPOCH + hour * SECS_PER_HOUR + sim.probe_rng.gen_range(CAST_SPREAD_SECS + period.min(60)..SECS_PER_HOUR);
            sim.probe_times.push(at);
        }
        for (index, &at) in sim.probe_times.clone().iter().enumerate() {
            sim.schedule(at, Event::Probe { index });
        }
        Ok(sim)
    }

    fn schedule(&mut self, at: u64, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq, event)));
    }

    fn node_config(&self, slot: usize) -> NodeConfig {
        let s = &self.slots[slot];
        NodeConfig {
            bind: SocketAddrV4::new(s.ip, BASE_PORT + s.generation),
            k: self.config.k,
            alpha: self.config.alpha,
            announce_period_secs: self.config.announce_period_secs(),
            external_ip: Some(s.ip),
            clock: self.net.clock.clone(),
            ..NodeConfig::default()
        }
    }

    pub fn addr_of(&self, slot: usize) -> SocketAddrV4 {
        let s = &self.slots[slot];
        SocketAddrV4::new(s.ip, BASE_PORT + s.generation)
    }

    /// Starts a node for `slot` with a fresh id and empty soft state,
    /// reloading the slot's journal, and bootstraps it through `via`.
    fn spawn(&mut self, slot: usize, via: Option<SocketAddrV4>) -> SocketAddrV4 {
        let id = NodeId::random(&mut self.id_rng);
        let cfg = self.node_config(slot);
        let addr = cfg.bind;
        let journal = self.slots[slot].journal.clone();
        let (state, _) = NodeState::new(id, cfg, Some(journal), self.seed_rng.gen())
            .expect("simulated node config is valid");
        self.net.nodes.insert(
            addr,
            SimNode { slot, state },
        );
        if let Some(via) = via {
            self.act(addr, |h| {
                let _ = ops::bootstrap(h, &[via]);
            });
        }
        addr
    }

    fn act<R>(&mut self, addr: SocketAddrV4, f: impl FnOnce(&mut SimHost<'_>) -> R) -> Option<R> {
        let mut node = self.net.nodes.remove(&addr)?;
        let out = {
            let mut host = SimHost {
                me: &mut node.state,
                addr,
                net: &mut self.net,
            };
            f(&mut host)
        };
        self.net.nodes.insert(addr, node);
        Some(out)
    }

    fn place_adversaries(&mut self, rng: &mut ChaCha8Rng) {
        let n = self.config.node_count;
        let k = self.config.k;
        let target = (self.config.malicious_fraction * n as f64).round() as usize;
        let cap = self.config.max_malicious_replicas.unwrap_or(usize::MAX);
        let ids: Vec<(NodeId, usize)> = self.net.nodes.values().map(|nd| (nd.state.id(), nd.slot)).collect();
        let replica_sets: Vec<Vec<usize>> = self
            .documents
            .iter()
            .map(|d| {
                let key = d.vote_key();
                let mut v = ids.clone();
                v.sort_by_key(|(id, _)| (id.distance(&key), *id));
                v.into_iter().take(k).map(|(_, s)| s).collect()
            })
            .collect();
        let mut chosen: BTreeSet<usize> = BTreeSet::new();
        let fits = |chosen: &BTreeSet<usize>, slot: usize| {
            replica_sets
                .iter()
                .all(|set| !set.contains(&slot) || set.iter().filter(|s| chosen.contains(s)).count() < cap)
        };
        // Fill each replica set up to the cap first, so the bound is
        // actually exercised, then spread the rest at random.
        if cap != usize::MAX {
            for set in &replica_sets {
                let mut members = set.clone();
                members.shuffle(rng);
                for slot in members {
                    if chosen.len() >= target || set.iter().filter(|s| chosen.contains(s)).count() >= cap {
                        break;
                    }
                    if !chosen.contains(&slot) && fits(&chosen, slot) {
                        chosen.insert(slot);
                    }
                }
            }
        }
        let mut rest: Vec<usize> = (0..n).collect();
        rest.shuffle(rng);
        for slot in rest {
            if chosen.len() >= target {
                break;
            }
            if !chosen.contains(&slot) && fits(&chosen, slot) {
                chosen.insert(slot);
            }
        }
        self.malicious_replicas = replica_sets
            .iter()
            .map(|set| set.iter().filter(|s| chosen.contains(s)).count())
            .collect();
        self.net.malicious = chosen;
    }

    pub fn now(&self) -> u64 {
        self.net.clock.now()
    }

    pub fn documents(&self) -> &[InfoHash] {
        &self.documents
    }

    pub fn events(&self) -> &[VoteEvent] {
        &self.events
    }

    pub fn is_malicious(&self, slot: usize) -> bool {
        self.net.malicious.contains(&slot)
    }

    pub fn planned_votes(&self, slot: usize) -> &[(InfoHash, Polarity)] {
        &self.slots[slot].plan
    }

    pub fn local_votes(&self, slot: usize) -> Vec<LocalVote> {
        self.net
            .nodes
            .get(&self.addr_of(slot))
            .map(|n| n.state.local_votes().to_vec())
            .unwrap_or_default()
    }

    pub fn node_id(&self, slot: usize) -> Option<NodeId> {
        self.net.nodes.get(&self.addr_of(slot)).map(|n| n.state.id())
    }

    /// Ids of every live node.
    pub fn node_ids(&self) -> Vec<NodeId> {
        self.net.nodes.values().map(|n| n.state.id()).collect()
    }

    /// Runs an iterative lookup from `slot`'s node over the simulated network.
    pub fn lookup_from(&mut self, slot: usize, target: NodeId) -> Result<LookupOutcome, LookupError> {
        let addr = self.addr_of(slot);
        self.act(addr, |h| ops::lookup(h, target))
            .unwrap_or(Err(LookupError::NoResponsiveContacts))
    }

    /// Casts a vote from `slot`'s node now, announcing it when accepted.
    pub fn cast(&mut self, slot: usize, info_hash: InfoHash, polarity: Polarity) -> Result<CastOutcome, NodeError> {
        let addr = self.addr_of(slot);
        let (outcome, report) = self
            .act(addr, |h| ops::cast_and_announce(h, info_hash, polarity))
            .expect("slot has a live node")?;
        self.log_report(slot, &report);
        Ok(outcome)
    }

    /// Kills `slot`'s node and starts a replacement: same address and
    /// journal, new port and id, empty routing table and vote store. The
    /// replacement announces its journaled votes at once.
    pub fn restart_node(&mut self, slot: usize) {
        let old = self.addr_of(slot);
        self.net.nodes.remove(&old);
        self.slots[slot].generation = self.slots[slot].generation.wrapping_add(1);
        let via = {
            let live: Vec<SocketAddrV4> = self.net.nodes.keys().copied().collect();
            live.choose(&mut self.churn_rng).copied()
        };
        self.spawn(slot, via);
        self.nodes_replaced += 1;
        self.announce(slot);
    }

    fn announce(&mut self, slot: usize) {
        let addr = self.addr_of(slot);
        let Some(report) = self.act(addr, |h| ops::announce_round(h)) else {
            return;
        };
        self.log_report(slot, &report);
        let generation = self.slots[slot].generation;
        let next = self.now() + self.config.announce_period_secs();
        if !self.slots[slot].plan.is_empty() || !report.votes.is_empty() {
            self.schedule(next, Event::Announce { slot, generation });
        }
    }

    fn log_report(&mut self, slot: usize, report: &AnnounceReport) {
        let now = self.now();
        let voter = self.slots[slot].ip;
        let votes = self.local_votes(slot);
        for d in &report.votes {
            if d.delivered > 0 || d.stored_locally {
                let polarity = votes
                    .iter()
                    .find(|v| v.info_hash == d.info_hash)
                    .map(|v| v.polarity)
                    .expect("announced votes are journaled");
                self.events.push(VoteEvent {
                    time: now,
                    info_hash: d.info_hash,
                    voter,
                    polarity,
                });
            }
        }
    }

    fn churn(&mut self) {
        let count = (self.config.churn_rate * self.config.node_count as f64).round() as usize;
        let mut slots: Vec<usize> = (0..self.config.node_count).collect();
        slots.shuffle(&mut self.churn_rng);
        for slot in slots.into_iter().take(count) {
            self.restart_node(slot);
        }
    }

    fn probe(&mut self, index: usize) {
        let now = self.now();
        let ip = Ipv4Addr::new(10, 255, (index >> 8) as u8, index as u8);
        let addr = SocketAddrV4::new(ip, BASE_PORT);
        let cfg = NodeConfig {
            bind: addr,
            k: self.config.k,
            alpha: self.config.alpha,
            announce_period_secs: self.config.announce_period_secs(),
            clock: self.net.clock.clone(),
            ..NodeConfig::default()
        };
        let (mut observer, _) = NodeState::new(NodeId::random(&mut self.id_rng), cfg, None, self.seed_rng.gen())
            .expect("observer config is valid");
        let live: Vec<SocketAddrV4> = self.net.nodes.keys().copied().collect();
        let via = *live.choose(&mut self.probe_rng).expect("network is not empty");
        let mode = self.config.combiner;
        let documents = self.documents.clone();
        let results = {
            let mut host = SimHost {
                me: &mut observer,
                addr,
                net: &mut self.net,
            };
            let _ = ops::bootstrap(&mut host, &[via]);
            documents
                .iter()
                .map(|d| fetch_votes(&mut host, *d, mode))
                .collect::<Vec<_>>()
        };
        let rows = documents
            .iter()
            .zip(&results)
            .map(|(doc, r)| {
                let truth = true_counts(&self.events, doc, now);
                DocumentRow {
                    doc: doc.to_hex(),
                    true_pos: truth.positive,
                    est_pos: r.positive_count,
                    true_neg: truth.negative,
                    est_neg: r.negative_count,
                    responders: r.responders,
                }
            })
            .collect();
        self.probes.push(ProbeReport {
            time: now,
            hour: (now - SIM_EPOCH) / SECS_PER_HOUR,
            rows,
            queried: results.iter().map(|r| r.queried).collect(),
        });
    }

    /// Processes every event scheduled up to and including `until`, then
    /// leaves the clock at `until`.
    pub fn run_until(&mut self, until: u64) {
        while let Some(Reverse((at, _, event))) = self.queue.peek().copied() {
            if at > until {
                break;
            }
            self.queue.pop();
            self.net.clock.set(at.max(self.now()));
            match event {
                Event::Cast { slot } => {
                    let plan = self.slots[slot].plan.clone();
                    for (doc, p) in plan {
                        let _ = self.cast(slot, doc, p);
                    }
                    let generation = self.slots[slot].generation;
                    let next = self.now() + self.config.announce_period_secs();
                    self.schedule(next, Event::Announce { slot, generation });
                }
                Event::Announce { slot, generation } => {
                    if self.slots[slot].generation == generation {
                        self.announce(slot);
                    }
                }
                Event::HourTick { .. } => {
                    let now = self.now();
                    for node in self.net.nodes.values_mut() {
                        node.state.expire(now);
                    }
                    self.churn();
                }
                Event::Probe { index } => self.probe(index),
            }
        }
        if until > self.now() {
            self.net.clock.set(until);
        }
    }

    pub fn event_log(&self) -> EventLog {
        EventLog {
            documents: self.documents.clone(),
            probe_times: self.probes.iter().map(|p| p.time).collect(),
            votes: self.events.clone(),
        }
    }

    /// Runs to the end of the configured duration and builds the report.
    pub fn finish(mut self) -> (ScenarioReport, EventLog) {
        let end = SIM_EPOCH + self.config.duration_hours * SECS_PER_HOUR;
        self.run_until(end);
        let mut samples = Vec::new();
        let mut fetches = 0usize;
        let mut answered = 0usize;
        for p in &self.probes {
            for r in &p.rows {
                fetches += 1;
                if r.responders == 0 {
                    continue;
                }
                answered += 1;
                samples.push(relative_error(r.est_pos, r.true_pos));
                samples.push(relative_error(r.est_neg, r.true_neg));
            }
        }
        let log = self.event_log();
        let report = ScenarioReport {
            relative_error: ErrorSummary::from_samples(samples),
            availability: if fetches == 0 { 1.0 } else { answered as f64 / fetches as f64 },
            traffic: self.net.traffic.clone(),
            total_datagrams: self.net.wire_datagrams,
            total_bytes: self.net.wire_bytes,
            nodes_replaced: self.nodes_replaced,
            malicious_nodes: self.net.malicious.len(),
            malicious_replicas: self.malicious_replicas.clone(),
            probes: self.probes,
            config: self.config,
        };
        (report, log)
    }
}

pub fn relative_error(estimate: u64, truth: u64) -> f64 {
    (estimate as f64 - truth as f64).abs() / truth.max(1) as f64
}

pub fn run_scenario(config: ScenarioConfig) -> Result<ScenarioReport, ConfigError> {
    Ok(Simulation::new(config)?.finish().0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            node_count: 30,
            duration_hours: 2,
            document_count: 3,
            positive_voters: 8,
            negative_voters: 4,
            ..ScenarioConfig::baseline(seed)
        }
    }

    fn ev(time: u64, voter: u8, p: Polarity) -> VoteEvent {
        VoteEvent {
            time,
            info_hash: InfoHash([1; 20]),
            voter: Ipv4Addr::new(1, 1, 1, voter),
            polarity: p,
        }
    }

    #[test]
    fn oracle_without_events_is_zero() {
        let log = EventLog {
            documents: vec![InfoHash([1; 20])],
            probe_times: vec![SIM_EPOCH],
            votes: vec![],
        };
        assert_eq!(replay_oracle(&log), vec![vec![TrueCounts::default()]]);
    }

    #[test]
    fn oracle_forgets_after_window() {
        let votes = vec![ev(SIM_EPOCH + 10, 1, Polarity::Positive), ev(SIM_EPOCH + 20, 1, Polarity::Positive)];
        let doc = InfoHash([1; 20]);
        assert_eq!(true_counts(&votes, &doc, SIM_EPOCH + 23 * 3600).positive, 1);
        assert_eq!(true_counts(&votes, &doc, SIM_EPOCH + 25 * 3600).positive, 0);
        // not yet happened
        assert_eq!(true_counts(&votes, &doc, SIM_EPOCH + 5).positive, 0);
    }

    #[test]
    fn config_validation() {
        let mut c = small(1);
        c.churn_rate = 1.5;
        assert_eq!(c.validate(), Err(ConfigError::Fraction("churn_rate")));
        let mut c = small(1);
        c.positive_voters = 40;
        assert!(c.validate().is_err());
        let mut c = small(1);
        c.announce_period_minutes = 60;
        assert!(c.validate().is_err());
        assert!(ScenarioConfig::from_json(r#"{"seed":1}"#).is_err());
        let json = serde_json::to_string(&small(1)).unwrap();
        assert_eq!(ScenarioConfig::from_json(&json).unwrap(), small(1));
    }

    #[test]
    fn same_seed_same_report() {
        let a = run_scenario(small(9)).unwrap();
        let b = run_scenario(small(9)).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.to_csv(), b.to_csv());
        let c = run_scenario(small(10)).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn traffic_tally_matches_wire_counter() {
        let r = run_scenario(small(3)).unwrap();
        let datagrams: u64 = r.traffic.values().map(|t| t.datagrams).sum();
        let bytes: u64 = r.traffic.values().map(|t| t.bytes).sum();
        assert_eq!(datagrams, r.total_datagrams);
        assert_eq!(bytes, r.total_bytes);
        assert!(r.traffic.contains_key("announce_vote"));
    }

    #[test]
    fn small_network_counts_votes() {
        let r = run_scenario(small(4)).unwrap();
        assert_eq!(r.availability, 1.0);
        let last = r.probes.last().unwrap();
        for row in &last.rows {
            assert_eq!((row.true_pos, row.true_neg), (8, 4));
            assert!(row.est_pos.abs_diff(8) <= 2, "{row:?}");
            assert!(row.est_neg.abs_diff(4) <= 1, "{row:?}");
        }
        let csv = r.to_csv();
        assert!(csv.starts_with("doc,true_pos,est_pos,true_neg,est_neg,responders\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn adversaries_respect_cap() {
        let mut c = small(5);
        c.malicious_fraction = 0.5;
        c.max_malicious_replicas = Some(3);
        c.duration_hours = 1;
        let r = run_scenario(c).unwrap();
        assert!(r.malicious_replicas.iter().all(|&m| m <= 3));
        assert!(r.malicious_replicas.contains(&3));
    }
}
