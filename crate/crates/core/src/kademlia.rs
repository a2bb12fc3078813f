//! XOR-metric routing table and iterative lookup.
//!
//! The lookup is transport-agnostic: it drives a [`FindNode`] implementation
//! that sends a batch of `find_node` queries concurrently and reports one
//! outcome per contact. The UDP node and the simulator both provide one.

use std::collections::BTreeMap;
use std::net::SocketAddrV4;

use rand::Rng;
use thiserror::Error;

use crate::id::{Distance, NodeId, ID_LEN};

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_ALPHA: usize = 3;
pub const NUM_BUCKETS: usize = ID_LEN * 8;
/// Failed queries after which a contact may be replaced by a newcomer.
pub const REPLACEABLE_AFTER_FAILURES: u8 = 2;
pub const BUCKET_REFRESH_SECS: u64 = 15 * 60;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RoutingError {
    #[error("refusing to insert our own id")]
    OwnId,
    #[error("contact port must be non-zero")]
    InvalidPort,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LookupError {
    #[error("lookup failed: no responsive contacts")]
    NoResponsiveContacts,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contact {
    pub id: NodeId,
    pub addr: SocketAddrV4,
    pub last_seen: u64,
    pub failed_queries: u8,
}

impl Contact {
    pub fn new(id: NodeId, addr: SocketAddrV4, last_seen: u64) -> Self {
        Self {
            id,
            addr,
            last_seen,
            failed_queries: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    Updated,
    /// Bucket full of healthy contacts; the newcomer was dropped.
    BucketFullPending,
}

/// 160 k-buckets. Bucket `i` holds contacts whose distance from `own_id`
/// has exactly `i` leading zero bits. Within a bucket, contacts are ordered
/// least-recently-seen first.
#[derive(Debug, Clone)]
pub struct RoutingTable {
    own_id: NodeId,
    k: usize,
    buckets: Vec<Vec<Contact>>,
    touched: Vec<u64>,
}

impl RoutingTable {
    pub fn new(own_id: NodeId, k: usize) -> Self {
        assert!(k >= 1, "bucket size must be at least 1");
        Self {
            own_id,
            k,
            buckets: vec![Vec::new(); NUM_BUCKETS],
            touched: vec![0; NUM_BUCKETS],
        }
    }

    pub fn own_id(&self) -> NodeId {
        self.own_id
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.iter().all(Vec::is_empty)
    }

    pub fn bucket_index(&self, id: &NodeId) -> Option<usize> {
        let d = self.own_id.distance(id);
        if d == Distance::ZERO {
            None
        } else {
            Some(d.leading_zeros() as usize)
        }
    }

    pub fn bucket(&self, index: usize) -> &[Contact] {
        &self.buckets[index]
    }

    pub fn contacts(&self) -> impl Iterator<Item = &Contact> {
        self.buckets.iter().flatten()
    }

    pub fn get(&self, id: &NodeId) -> Option<&Contact> {
        let b = self.bucket_index(id)?;
        self.buckets[b].iter().find(|c| c.id == *id)
    }

    pub fn insert(&mut self, contact: Contact) -> Result<InsertOutcome, RoutingError> {
        let index = self.bucket_index(&contact.id).ok_or(RoutingError::OwnId)?;
        if contact.addr.port() == 0 {
            return Err(RoutingError::InvalidPort);
        }
        let seen = contact.last_seen;
        let bucket = &mut self.buckets[index];

        if let Some(pos) = bucket.iter().position(|c| c.id == contact.id) {
            let mut existing = bucket.remove(pos);
            existing.addr = contact.addr;
            existing.last_seen = existing.last_seen.max(seen);
            existing.failed_queries = 0;
            bucket.push(existing);
            self.touched[index] = self.touched[index].max(seen);
            return Ok(InsertOutcome::Updated);
        }

        if bucket.len() < self.k {
            bucket.push(Contact {
                failed_queries: 0,
                ..contact
            });
            self.touched[index] = self.touched[index].max(seen);
            return Ok(InsertOutcome::Inserted);
        }

        match bucket
            .iter()
            .position(|c| c.failed_queries >= REPLACEABLE_AFTER_FAILURES)
        {
            Some(pos) => {
                bucket.remove(pos);
                bucket.push(Contact {
                    failed_queries: 0,
                    ..contact
                });
                self.touched[index] = self.touched[index].max(seen);
                Ok(InsertOutcome::Inserted)
            }
            None => Ok(InsertOutcome::BucketFullPending),
        }
    }

    /// Counts one failed query (all retries exhausted) against a contact.
    pub fn mark_failed(&mut self, id: &NodeId) {
        if let Some(b) = self.bucket_index(id) {
            if let Some(c) = self.buckets[b].iter_mut().find(|c| c.id == *id) {
                c.failed_queries = c.failed_queries.saturating_add(1);
            }
        }
    }

    pub fn remove(&mut self, id: &NodeId) -> Option<Contact> {
        let b = self.bucket_index(id)?;
        let pos = self.buckets[b].iter().position(|c| c.id == *id)?;
        Some(self.buckets[b].remove(pos))
    }

    /// Up to `k` contacts ordered by XOR distance to `target`, ties by raw id.
    pub fn closest(&self, target: &NodeId, k: usize) -> Vec<Contact> {
        let mut all: Vec<&Contact> = self.contacts().collect();
        all.sort_by(|a, b| {
            a.id.distance(target)
                .cmp(&b.id.distance(target))
                .then_with(|| a.id.cmp(&b.id))
        });
        all.into_iter().take(k).cloned().collect()
    }

    /// Like [`closest`](Self::closest) but skips contacts that have failed
    /// often enough to be replaceable. This is what a node advertises to
    /// others.
    pub fn closest_good(&self, target: &NodeId, k: usize) -> Vec<Contact> {
        let mut all: Vec<&Contact> = self
            .contacts()
            .filter(|c| c.failed_queries < REPLACEABLE_AFTER_FAILURES)
            .collect();
        all.sort_by(|a, b| {
            a.id.distance(target)
                .cmp(&b.id.distance(target))
                .then_with(|| a.id.cmp(&b.id))
        });
        all.into_iter().take(k).cloned().collect()
    }

    /// Random targets for non-empty buckets that have not been touched for
    /// [`BUCKET_REFRESH_SECS`].
    pub fn refresh_targets<R: Rng + ?Sized>(&mut self, now: u64, rng: &mut R) -> Vec<NodeId> {
        let mut out = Vec::new();
        for i in 0..NUM_BUCKETS {
            if !self.buckets[i].is_empty() && now.saturating_sub(self.touched[i]) >= BUCKET_REFRESH_SECS {
                out.push(self.own_id.random_in_bucket(i, rng));
                self.touched[i] = now;
            }
        }
        out
    }
}

/// Reply to a `find_node` query.
#[derive(Debug, Clone)]
pub struct FindNodeReply {
    pub responder: NodeId,
    pub nodes: Vec<Contact>,
}

/// Concurrent `find_node` capability supplied by the transport.
pub trait FindNode {
    /// Queries every contact for `target`; returns one entry per contact in
    /// order, `None` when the contact did not answer.
    fn find_node(&mut self, target: &NodeId, contacts: &[Contact]) -> Vec<Option<FindNodeReply>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Probe {
    Pending,
    Responded,
    Failed,
}

#[derive(Debug, Clone, Default)]
pub struct LookupOutcome {
    /// The k closest contacts that answered, nearest first.
    pub closest: Vec<Contact>,
    pub responded: Vec<Contact>,
    pub failed: Vec<NodeId>,
    pub rounds: usize,
    pub queries: usize,
}

/// Iterative Kademlia lookup.
///
/// Each round queries the `alpha` closest unqueried contacts among the
/// current k best. When a round brings nothing closer than the best contact
/// already known, the next round queries every remaining unqueried contact
/// among the k best. The lookup ends once the k best live contacts have all
/// answered.
pub fn lookup<N: FindNode + ?Sized>(
    own_id: NodeId,
    target: NodeId,
    seeds: Vec<Contact>,
    k: usize,
    alpha: usize,
    now: u64,
    net: &mut N,
) -> Result<LookupOutcome, LookupError> {
    let mut shortlist: BTreeMap<(Distance, NodeId), (Contact, Probe)> = BTreeMap::new();
    for c in seeds {
        if c.id != own_id {
            shortlist
                .entry((c.id.distance(&target), c.id))
                .or_insert((c, Probe::Pending));
        }
    }
    if shortlist.is_empty() {
        return Err(LookupError::NoResponsiveContacts);
    }

    let closest_live = |list: &BTreeMap<(Distance, NodeId), (Contact, Probe)>| {
        list.iter()
            .find(|(_, (_, p))| *p != Probe::Failed)
            .map(|(key, _)| key.0)
    };

    let mut outcome = LookupOutcome::default();
    let mut stalled = false;

    loop {
        let top: Vec<(Distance, NodeId)> = shortlist
            .iter()
            .filter(|(_, (_, p))| *p != Probe::Failed)
            .take(k)
            .map(|(key, _)| *key)
            .collect();
        let limit = if stalled { k } else { alpha.max(1) };
        let batch: Vec<(Distance, NodeId)> = top
            .iter()
            .filter(|key| shortlist[*key].1 == Probe::Pending)
            .take(limit)
            .copied()
            .collect();
        if batch.is_empty() {
            break;
        }

        let contacts: Vec<Contact> = batch.iter().map(|key| shortlist[key].0.clone()).collect();
        let replies = net.find_node(&target, &contacts);
        outcome.rounds += 1;
        outcome.queries += contacts.len();

        let before = closest_live(&shortlist);
        for (key, reply) in batch.iter().zip(replies) {
            match reply {
                Some(reply) if reply.responder == key.1 => {
                    let entry = shortlist.get_mut(key).expect("batch entries are in the shortlist");
                    entry.1 = Probe::Responded;
                    entry.0.last_seen = now;
                    entry.0.failed_queries = 0;
                    outcome.responded.push(entry.0.clone());
                    for c in reply.nodes {
                        if c.id == own_id || c.addr.port() == 0 {
                            continue;
                        }
                        shortlist
                            .entry((c.id.distance(&target), c.id))
                            .or_insert((c, Probe::Pending));
                    }
                }
                _ => {
                    shortlist.get_mut(key).expect("batch entries are in the shortlist").1 = Probe::Failed;
                    outcome.failed.push(key.1);
                }
            }
        }
        // A round that found nothing closer than before switches to
        // querying the whole remaining top k.
        stalled = match (before, closest_live(&shortlist)) {
            (Some(b), Some(c)) => c >= b,
            _ => false,
        };
    }

    outcome.closest = shortlist
        .values()
        .filter(|(_, p)| *p == Probe::Responded)
        .take(k)
        .map(|(c, _)| c.clone())
        .collect();
    if outcome.closest.is_empty() {
        return Err(LookupError::NoResponsiveContacts);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;
    use std::net::Ipv4Addr;

    fn addr(n: u32) -> SocketAddrV4 {
        SocketAddrV4::new(Ipv4Addr::from(0x0a00_0000 + n), 6881)
    }

    fn brute_force(contacts: &[Contact], target: &NodeId, k: usize) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = contacts.iter().map(|c| c.id).collect();
        ids.sort_by_key(|id| (id.distance(target), *id));
        ids.truncate(k);
        ids
    }

    #[test]
    fn insert_update_and_reject_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let own = NodeId::random(&mut rng);
        let mut t = RoutingTable::new(own, 8);
        let c = Contact::new(NodeId::random(&mut rng), addr(1), 1);
        assert_eq!(t.insert(c.clone()), Ok(InsertOutcome::Inserted));
        assert_eq!(t.insert(c.clone()), Ok(InsertOutcome::Updated));
        assert_eq!(t.len(), 1);
        assert_eq!(t.insert(Contact::new(own, addr(2), 1)), Err(RoutingError::OwnId));
        let zero_port = Contact::new(NodeId::random(&mut rng), SocketAddrV4::new(Ipv4Addr::LOCALHOST, 0), 1);
        assert_eq!(t.insert(zero_port), Err(RoutingError::InvalidPort));
    }

    #[test]
    fn full_bucket_keeps_healthy_contacts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let own = NodeId::random(&mut rng);
        let k = 8;
        let mut t = RoutingTable::new(own, k);
        // All of these share the first bit with own and differ at bit 1.
        let ids: Vec<NodeId> = (0..=k).map(|_| own.random_in_bucket(1, &mut rng)).collect();
        for (i, id) in ids.iter().enumerate().take(k) {
            assert_eq!(t.insert(Contact::new(*id, addr(i as u32), i as u64)), Ok(InsertOutcome::Inserted));
        }
        assert_eq!(
            t.insert(Contact::new(ids[k], addr(99), 99)),
            Ok(InsertOutcome::BucketFullPending)
        );
        assert_eq!(t.bucket(1).len(), k);

        t.mark_failed(&ids[3]);
        t.mark_failed(&ids[3]);
        assert_eq!(
            t.insert(Contact::new(ids[k], addr(99), 100)),
            Ok(InsertOutcome::Inserted)
        );
        assert!(t.get(&ids[3]).is_none());
        assert_eq!(t.bucket(1).last().unwrap().id, ids[k]);
    }

    #[test]
    fn update_moves_to_most_recent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let own = NodeId::random(&mut rng);
        let mut t = RoutingTable::new(own, 8);
        let a = own.random_in_bucket(0, &mut rng);
        let b = own.random_in_bucket(0, &mut rng);
        t.insert(Contact::new(a, addr(1), 1)).unwrap();
        t.insert(Contact::new(b, addr(2), 2)).unwrap();
        t.insert(Contact::new(a, addr(1), 3)).unwrap();
        let order: Vec<NodeId> = t.bucket(0).iter().map(|c| c.id).collect();
        assert_eq!(order, vec![b, a]);
    }

    #[test]
    fn closest_on_empty_and_exact_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let own = NodeId::random(&mut rng);
        let mut t = RoutingTable::new(own, 8);
        let target = NodeId::random(&mut rng);
        assert!(t.closest(&target, 8).is_empty());
        for i in 0..5 {
            let _ = t.insert(Contact::new(NodeId::random(&mut rng), addr(i), 1));
        }
        assert_eq!(t.insert(Contact::new(target, addr(77), 1)), Ok(InsertOutcome::Inserted));
        assert_eq!(t.closest(&target, 8)[0].id, target);
    }

    #[test]
    fn closest_matches_brute_force_on_random_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let own = NodeId::random(&mut rng);
        let mut t = RoutingTable::new(own, 8);
        for i in 0..50 {
            let _ = t.insert(Contact::new(NodeId::random(&mut rng), addr(i), 1));
        }
        let all: Vec<Contact> = t.contacts().cloned().collect();
        let target = NodeId::random(&mut rng);
        let got: Vec<NodeId> = t.closest(&target, 8).iter().map(|c| c.id).collect();
        assert_eq!(got, brute_force(&all, &target, 8));
    }

    #[test]
    fn refresh_targets_only_for_stale_buckets() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let own = NodeId::random(&mut rng);
        let mut t = RoutingTable::new(own, 8);
        t.insert(Contact::new(own.random_in_bucket(2, &mut rng), addr(1), 100)).unwrap();
        assert!(t.refresh_targets(100 + BUCKET_REFRESH_SECS - 1, &mut rng).is_empty());
        let targets = t.refresh_targets(100 + BUCKET_REFRESH_SECS, &mut rng);
        assert_eq!(targets.len(), 1);
        assert_eq!(t.bucket_index(&targets[0]), Some(2));
        assert!(t.refresh_targets(100 + BUCKET_REFRESH_SECS, &mut rng).is_empty());
    }

    /// In-memory network where every node knows a full routing table.
    struct StaticNet {
        tables: HashMap<NodeId, RoutingTable>,
        down: std::collections::HashSet<NodeId>,
        k: usize,
    }

    impl FindNode for StaticNet {
        fn find_node(&mut self, target: &NodeId, contacts: &[Contact]) -> Vec<Option<FindNodeReply>> {
            contacts
                .iter()
                .map(|c| {
                    if self.down.contains(&c.id) {
                        return None;
                    }
                    let t = self.tables.get(&c.id)?;
                    Some(FindNodeReply {
                        responder: c.id,
                        nodes: t.closest_good(target, self.k),
                    })
                })
                .collect()
        }
    }

    fn build_net(n: usize, seed: u64) -> (Vec<Contact>, StaticNet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes: Vec<Contact> = (0..n)
            .map(|i| Contact::new(NodeId::random(&mut rng), addr(i as u32), 0))
            .collect();
        let mut tables = HashMap::new();
        for me in &nodes {
            let mut t = RoutingTable::new(me.id, 8);
            let mut order = nodes.clone();
            order.shuffle(&mut rng);
            for other in &order {
                if other.id != me.id {
                    let _ = t.insert(other.clone());
                }
            }
            tables.insert(me.id, t);
        }
        (
            nodes,
            StaticNet {
                tables,
                down: Default::default(),
                k: 8,
            },
        )
    }

    #[test]
    fn lookup_in_two_node_network() {
        let (nodes, mut net) = build_net(2, 1);
        let seeds = net.tables[&nodes[0].id].closest(&nodes[1].id, 8);
        let out = lookup(nodes[0].id, nodes[1].id, seeds, 8, 3, 5, &mut net).unwrap();
        assert_eq!(out.closest.len(), 1);
        assert_eq!(out.closest[0].id, nodes[1].id);
    }

    #[test]
    fn lookup_skips_unresponsive_nodes() {
        let (nodes, mut net) = build_net(100, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for c in nodes.iter().skip(1) {
            if rng.gen_bool(0.3) {
                net.down.insert(c.id);
            }
        }
        // Every node has already seen its dead contacts time out twice and
        // has since heard from live nodes again, which lets replacements in.
        for table in net.tables.values_mut() {
            for dead in &net.down {
                table.mark_failed(dead);
                table.mark_failed(dead);
            }
            for live in nodes.iter().filter(|c| !net.down.contains(&c.id)) {
                let _ = table.insert(live.clone());
            }
        }
        let me = nodes[0].id;
        for _ in 0..200 {
            let target = NodeId::random(&mut rng);
            let live: Vec<Contact> = nodes
                .iter()
                .filter(|c| c.id != me && !net.down.contains(&c.id))
                .cloned()
                .collect();
            let expected = brute_force(&live, &target, 8);
            let seeds = net.tables[&me].closest(&target, 8);
            let out = lookup(me, target, seeds, 8, 3, 0, &mut net).unwrap();
            let got: Vec<NodeId> = out.closest.iter().map(|c| c.id).collect();
            assert!(got.iter().all(|id| !net.down.contains(id)));
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn lookup_without_live_contacts_fails() {
        let (nodes, mut net) = build_net(5, 3);
        for c in &nodes[1..] {
            net.down.insert(c.id);
        }
        let seeds = net.tables[&nodes[0].id].closest(&nodes[0].id, 8);
        assert_eq!(
            lookup(nodes[0].id, NodeId([7; 20]), seeds, 8, 3, 0, &mut net).unwrap_err(),
            LookupError::NoResponsiveContacts
        );
        assert!(lookup(nodes[0].id, NodeId([7; 20]), vec![], 8, 3, 0, &mut net).is_err());
    }
}
