//! Outbound node work: lookups, bootstrap, announce rounds.
//!
//! Everything here is written against [`Host`], so the same code drives a
//! real UDP node and a simulated one. A host never holds the node state
//! across an [`exchange`](Host::exchange), so inbound queries keep being
//! answered while outbound ones are in flight.

use std::net::SocketAddrV4;

use serde::Serialize;
use thiserror::Error;

use super::{CastOutcome, LocalVote, NodeError, NodeState};
use crate::id::{InfoHash, NodeId};
use crate::kademlia::{self, Contact, FindNode, FindNodeReply, LookupError, LookupOutcome};
use crate::vote_store::Polarity;
use crate::wire::{KrpcError, Query, Response};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RpcError {
    #[error("timed out")]
    Timeout,
    #[error("remote error {}: {}", .0.code, .0.message)]
    Remote(KrpcError),
    #[error("unexpected reply: {0}")]
    Unexpected(&'static str),
}

/// Transport and state access for a node.
pub trait Host {
    fn now(&self) -> u64;

    /// Runs `f` with exclusive access to the node state.
    fn with_state<R>(&mut self, f: impl FnOnce(&mut NodeState) -> R) -> R;

    /// Sends every query concurrently and waits for each to answer, fail or
    /// time out. Results are in query order.
    fn exchange(&mut self, queries: Vec<(SocketAddrV4, Query)>) -> Vec<Result<Response, RpcError>>;
}

/// Queries known contacts and folds the outcome back into the routing table.
pub fn query_contacts<H: Host>(
    host: &mut H,
    batch: Vec<(Contact, Query)>,
) -> Vec<Result<Response, RpcError>> {
    let wire: Vec<(SocketAddrV4, Query)> = batch.iter().map(|(c, q)| (c.addr, q.clone())).collect();
    let mut results = host.exchange(wire);
    let now = host.now();
    host.with_state(|s| {
        for ((contact, _), result) in batch.iter().zip(results.iter_mut()) {
            match result {
                Ok(resp) if resp.id == contact.id => s.observe(contact.id, contact.addr, now),
                Ok(_) => {
                    // Someone else answers at that address now.
                    s.routing.remove(&contact.id);
                    *result = Err(RpcError::Unexpected("responder id mismatch"));
                }
                Err(RpcError::Timeout) => s.routing.mark_failed(&contact.id),
                Err(_) => {}
            }
        }
    });
    results
}

struct HostFinder<'a, H: Host> {
    host: &'a mut H,
    own_id: NodeId,
    now: u64,
}

impl<H: Host> FindNode for HostFinder<'_, H> {
    fn find_node(&mut self, target: &NodeId, contacts: &[Contact]) -> Vec<Option<FindNodeReply>> {
        let batch = contacts
            .iter()
            .map(|c| {
                let q = Query::FindNode {
                    id: self.own_id,
                    target: *target,
                };
                (c.clone(), q)
            })
            .collect();
        query_contacts(self.host, batch)
            .into_iter()
            .map(|r| {
                let resp = r.ok()?;
                let nodes = resp
                    .nodes
                    .unwrap_or_default()
                    .into_iter()
                    .map(|n| Contact::new(n.id, n.addr, self.now))
                    .collect();
                Some(FindNodeReply {
                    responder: resp.id,
                    nodes,
                })
            })
            .collect()
    }
}

/// Iterative lookup for `target`, seeded from the routing table.
pub fn lookup<H: Host>(host: &mut H, target: NodeId) -> Result<LookupOutcome, LookupError> {
    let now = host.now();
    let (own_id, k, alpha, seeds) = host.with_state(|s| {
        let k = s.config().k;
        let mut seeds = s.routing.closest_good(&target, k);
        if seeds.is_empty() {
            seeds = s.routing.closest(&target, k);
        }
        (s.id(), k, s.config().alpha, seeds)
    });
    let mut finder = HostFinder { host, own_id, now };
    kademlia::lookup(own_id, target, seeds, k, alpha, now, &mut finder)
}

/// Pings the bootstrap contacts, then looks up our own id to fill the
/// routing table. Returns how many bootstrap contacts answered.
pub fn bootstrap<H: Host>(host: &mut H, contacts: &[SocketAddrV4]) -> Result<usize, NodeError> {
    let own_id = host.with_state(|s| s.id());
    let queries = contacts.iter().map(|a| (*a, Query::Ping { id: own_id })).collect();
    let results = host.exchange(queries);
    let now = host.now();
    let answered = host.with_state(|s| {
        let mut n = 0;
        for (addr, r) in contacts.iter().zip(results) {
            if let Ok(resp) = r {
                if resp.id != own_id {
                    s.observe(resp.id, *addr, now);
                    n += 1;
                }
            }
        }
        n
    });
    if answered == 0 {
        return Err(NodeError::Bootstrap);
    }
    let _ = lookup(host, own_id);
    Ok(answered)
}

/// Looks up a random id in every bucket that has been quiet too long.
pub fn refresh_buckets<H: Host>(host: &mut H) -> usize {
    let now = host.now();
    let targets = host.with_state(|s| {
        let NodeState { routing, rng, .. } = s;
        routing.refresh_targets(now, rng)
    });
    for t in &targets {
        let _ = lookup(host, *t);
    }
    targets.len()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeliveryFailure {
    pub node: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VoteDelivery {
    pub info_hash: InfoHash,
    /// False when the lookup found nobody; the vote waits for the next round.
    pub lookup_ok: bool,
    pub delivered: usize,
    pub failures: Vec<DeliveryFailure>,
    /// Whether we are ourselves one of the replicas and stored the vote locally.
    pub stored_locally: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AnnounceReport {
    pub votes: Vec<VoteDelivery>,
}

impl AnnounceReport {
    pub fn delivered(&self) -> usize {
        self.votes.iter().map(|v| v.delivered).sum()
    }
}

/// Announces each vote to the k closest nodes of its key: `get_votes` to
/// obtain a token, then `announce_vote` with it.
pub fn announce_votes<H: Host>(host: &mut H, votes: &[LocalVote]) -> AnnounceReport {
    let mut report = AnnounceReport::default();
    for vote in votes {
        report.votes.push(announce_one(host, vote));
    }
    report
}

fn announce_one<H: Host>(host: &mut H, vote: &LocalVote) -> VoteDelivery {
    let key = vote.info_hash.vote_key();
    let mut delivery = VoteDelivery {
        info_hash: vote.info_hash,
        lookup_ok: false,
        delivered: 0,
        failures: Vec::new(),
        stored_locally: false,
    };
    let Ok(found) = lookup(host, key) else {
        return delivery;
    };
    delivery.lookup_ok = true;
    let own_id = host.with_state(|s| s.id());
    let replicas = found.closest;

    let token_queries = replicas
        .iter()
        .map(|c| (c.clone(), Query::GetVotes { id: own_id, target: key }))
        .collect();
    let tokens = query_contacts(host, token_queries);

    let mut announces = Vec::new();
    for (c, r) in replicas.iter().zip(tokens) {
        match r {
            Ok(Response { token: Some(token), .. }) => announces.push((
                c.clone(),
                Query::AnnounceVote {
                    id: own_id,
                    target: key,
                    vote: vote.polarity.as_vote(),
                    token,
                },
            )),
            Ok(_) => delivery.failures.push(failure(c, "get_votes reply without token")),
            Err(e) => delivery.failures.push(failure(c, &e.to_string())),
        }
    }
    let acked: Vec<Contact> = announces.iter().map(|(c, _)| c.clone()).collect();
    for (c, r) in acked.iter().zip(query_contacts(host, announces)) {
        match r {
            Ok(_) => delivery.delivered += 1,
            Err(e) => delivery.failures.push(failure(c, &e.to_string())),
        }
    }

    let now = host.now();
    let k = replicas.len();
    delivery.stored_locally = host.with_state(|s| {
        let Some(ip) = s.config().external_ip else {
            return false;
        };
        let ours = own_id.distance(&key);
        let is_replica = k < s.config().k || replicas.last().is_some_and(|c| ours < c.id.distance(&key));
        is_replica && s.votes.record_vote(key, vote.polarity, ip, now).is_ok()
    });
    delivery
}

fn failure(c: &Contact, reason: &str) -> DeliveryFailure {
    DeliveryFailure {
        node: c.addr.to_string(),
        reason: reason.to_string(),
    }
}

/// Announces every journaled vote.
pub fn announce_round<H: Host>(host: &mut H) -> AnnounceReport {
    let votes = host.with_state(|s| s.local_votes().to_vec());
    announce_votes(host, &votes)
}

/// Registers a vote and, when accepted, announces it right away.
pub fn cast_and_announce<H: Host>(
    host: &mut H,
    info_hash: InfoHash,
    polarity: Polarity,
) -> Result<(CastOutcome, AnnounceReport), NodeError> {
    let now = host.now();
    let outcome = host.with_state(|s| s.cast_vote(info_hash, polarity, now))?;
    let report = match outcome {
        CastOutcome::Accepted => {
            let vote = host.with_state(|s| {
                *s.local_votes()
                    .iter()
                    .find(|v| v.info_hash == info_hash)
                    .expect("accepted vote is journaled")
            });
            announce_votes(host, &[vote])
        }
        CastOutcome::AlreadyVoted => AnnounceReport::default(),
    };
    Ok((outcome, report))
}
