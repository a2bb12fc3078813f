//! The voting node.
//!
//! [`NodeState`] holds everything a node owns (routing table, vote table,
//! token secrets, its own journaled votes) and answers queries without doing
//! any I/O. Outbound work (lookups, announce rounds, fetching votes) lives in
//! [`ops`] and runs against a [`Host`](ops::Host), which the UDP runtime in
//! [`udp`] and the simulator both implement.
//!
//! All mutation of a node's state is serialized: the UDP runtime keeps the
//! state behind one mutex shared by its receive loop and its timers.

pub mod journal;
pub mod ops;
pub mod token;
pub mod udp;

use std::fmt;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::id::{InfoHash, NodeId};
use crate::kademlia::{Contact, RoutingTable, DEFAULT_ALPHA, DEFAULT_K};
use crate::vote_store::{Polarity, StoreError, VoteTable, DEFAULT_MAX_KEYS};
use crate::wire::{
    Body, CompactNode, KrpcMessage, Query, Response, VoteSketches, ERR_PROTOCOL, ERR_SERVER,
};

pub use journal::{Journal, JournalContents, JournalError, JournalWarning, LocalVote};
pub use token::TokenState;

pub const DEFAULT_ANNOUNCE_PERIOD_SECS: u64 = 30 * 60;

/// Time source in whole Unix seconds.
pub trait Clock: Send + Sync + fmt::Debug {
    fn now(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }
}

/// Clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(now: u64) -> Self {
        Self(AtomicU64::new(now))
    }

    pub fn set(&self, now: u64) {
        self.0.store(now, Ordering::SeqCst);
    }

    pub fn advance(&self, secs: u64) {
        self.0.fetch_add(secs, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("vote not registered: {0}")]
    Persistence(#[from] JournalError),
    #[error("socket error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bootstrap failed: no bootstrap contact answered")]
    Bootstrap,
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub bind: SocketAddrV4,
    pub state_dir: Option<PathBuf>,
    pub bootstrap: Vec<SocketAddr>,
    pub k: usize,
    pub alpha: usize,
    pub announce_period_secs: u64,
    pub max_keys: usize,
    /// Our address as others see it, when known. Lets the node count its own
    /// vote when it is itself one of the replicas for a key.
    pub external_ip: Option<Ipv4Addr>,
    /// Mark outgoing queries read-only so peers keep us out of their
    /// routing tables. For short-lived clients.
    pub read_only: bool,
    pub clock: Arc<dyn Clock>,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0),
            state_dir: None,
            bootstrap: Vec::new(),
            k: DEFAULT_K,
            alpha: DEFAULT_ALPHA,
            announce_period_secs: DEFAULT_ANNOUNCE_PERIOD_SECS,
            max_keys: DEFAULT_MAX_KEYS,
            external_ip: None,
            read_only: false,
            clock: Arc::new(SystemClock),
        }
    }
}

impl NodeConfig {
    pub fn validate(&self) -> Result<(), NodeError> {
        if self.k == 0 {
            return Err(NodeError::Config("k must be at least 1".into()));
        }
        if self.alpha == 0 {
            return Err(NodeError::Config("alpha must be at least 1".into()));
        }
        // A vote must be refreshed before its hour block can be skipped.
        if self.announce_period_secs == 0 || self.announce_period_secs >= 3600 {
            return Err(NodeError::Config(
                "announce period must be between 1 second and 59 minutes".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CastOutcome {
    Accepted,
    AlreadyVoted,
}

#[derive(Debug)]
pub struct NodeState {
    id: NodeId,
    config: NodeConfig,
    pub routing: RoutingTable,
    pub votes: VoteTable,
    tokens: TokenState,
    local_votes: Vec<LocalVote>,
    journal: Option<Journal>,
    rng: ChaCha8Rng,
}

impl NodeState {
    /// Builds a node, reloading its own votes from `journal` when given.
    /// Returns the journal warnings alongside the state.
    pub fn new(
        id: NodeId,
        config: NodeConfig,
        journal: Option<Journal>,
        seed: u64,
    ) -> Result<(NodeState, Vec<JournalWarning>), NodeError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let now = config.clock.now();
        let tokens = TokenState::new(&mut rng, now);
        let contents = match &journal {
            Some(j) => j.load()?,
            None => JournalContents::default(),
        };
        let state = NodeState {
            id,
            routing: RoutingTable::new(id, config.k),
            votes: VoteTable::new(config.max_keys),
            tokens,
            local_votes: contents.votes,
            journal,
            rng,
            config,
        };
        Ok((state, contents.warnings))
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn now(&self) -> u64 {
        self.config.clock.now()
    }

    pub fn local_votes(&self) -> &[LocalVote] {
        &self.local_votes
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Registers our own vote, once per info-hash. The journal write comes
    /// first; if it fails the vote is not registered.
    pub fn cast_vote(
        &mut self,
        info_hash: InfoHash,
        polarity: Polarity,
        now: u64,
    ) -> Result<CastOutcome, NodeError> {
        if self.local_votes.iter().any(|v| v.info_hash == info_hash) {
            return Ok(CastOutcome::AlreadyVoted);
        }
        let vote = LocalVote {
            info_hash,
            polarity,
            created_at: now,
        };
        if let Some(j) = &self.journal {
            j.append(&vote)?;
        }
        self.local_votes.push(vote);
        Ok(CastOutcome::Accepted)
    }

    pub fn issue_token(&mut self, addr: &SocketAddrV4, now: u64) -> Vec<u8> {
        self.tokens.issue(addr, now, &mut self.rng)
    }

    pub fn observe(&mut self, id: NodeId, addr: SocketAddrV4, now: u64) {
        let _ = self.routing.insert(Contact::new(id, addr, now));
    }

    fn advertised(&self, target: &NodeId) -> Vec<CompactNode> {
        self.routing
            .closest_good(target, self.config.k)
            .into_iter()
            .map(|c| CompactNode {
                id: c.id,
                addr: c.addr,
            })
            .collect()
    }

    /// Answers one well-formed query.
    pub fn handle_query(
        &mut self,
        transaction_id: Vec<u8>,
        query: &Query,
        source: SocketAddrV4,
        now: u64,
    ) -> KrpcMessage {
        self.answer(transaction_id, query, source, now, true)
    }

    fn answer(
        &mut self,
        transaction_id: Vec<u8>,
        query: &Query,
        source: SocketAddrV4,
        now: u64,
        routable: bool,
    ) -> KrpcMessage {
        let response = match query {
            Query::Ping { .. } => Response::id_only(self.id),
            Query::FindNode { target, .. } => Response::find_node(self.id, self.advertised(target)),
            Query::GetVotes { target, .. } => {
                let token = self.issue_token(&source, now);
                let votes = self.votes.aggregate_present(target, now).map(|(pos, neg)| VoteSketches {
                    positive: *pos.registers(),
                    negative: *neg.registers(),
                });
                Response::get_votes(self.id, token, self.advertised(target), votes)
            }
            Query::AnnounceVote {
                target, vote, token, ..
            } => {
                let Some(polarity) = Polarity::from_vote(*vote) else {
                    return KrpcMessage::error(transaction_id, ERR_PROTOCOL, "vote must be 1 or -1");
                };
                if !self.tokens.validate(token, &source, now, &mut self.rng) {
                    return KrpcMessage::error(transaction_id, ERR_PROTOCOL, "invalid token");
                }
                if let Err(StoreError::Full) = self.votes.record_vote(*target, polarity, *source.ip(), now) {
                    return KrpcMessage::error(transaction_id, ERR_SERVER, "vote table full");
                }
                Response::id_only(self.id)
            }
        };
        if routable && query.sender() != self.id {
            self.observe(query.sender(), source, now);
        }
        KrpcMessage::response(transaction_id, response)
    }

    /// Handles one raw datagram. Returns the encoded reply, or `None` when
    /// the datagram should be dropped (undecodable, or not a query).
    pub fn handle_datagram(&mut self, data: &[u8], source: SocketAddrV4, now: u64) -> Option<Vec<u8>> {
        match KrpcMessage::decode(data) {
            Ok(KrpcMessage {
                transaction_id,
                body: Body::Query(q),
                read_only,
            }) => Some(self.answer(transaction_id, &q, source, now, !read_only).encode()),
            Ok(_) => None,
            Err(e) => match (e.is_query, e.transaction_id.clone()) {
                (true, Some(tid)) => {
                    Some(KrpcMessage::error(tid, e.error_code(), e.kind.to_string()).encode())
                }
                _ => None,
            },
        }
    }

    pub fn expire(&mut self, now: u64) -> usize {
        self.votes.expire(now)
    }
}
