//! Per-node vote storage.
//!
//! Each vote key maps to a ring of 24 hourly blocks. A block holds one
//! sketch of positive voters and one of negative voters. Writing into a slot
//! whose block belongs to an older hour resets that block first, and reads
//! only merge blocks from the trailing 24 hours, so a vote that is not
//! re-announced ages out after a day.
//!
//! Concurrency: a table has a single writer. Readers may share it only while
//! no write is in progress; the node wraps it accordingly.

use std::collections::{BTreeMap, HashMap};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::id::VoteKey;
use crate::sketch::HllSketch;

pub const SLOTS: usize = 24;
pub const SECS_PER_HOUR: u64 = 3600;
pub const DEFAULT_MAX_KEYS: usize = 65_536;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("vote table is full and has nothing to evict")]
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn from_vote(vote: i64) -> Option<Polarity> {
        match vote {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn as_vote(self) -> i64 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn flipped(self) -> Polarity {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

pub fn hour_of(now: u64) -> u64 {
    now / SECS_PER_HOUR
}

/// True when a block written in `block_hour` is still inside the window at `now`.
pub fn in_window(block_hour: u64, now: u64) -> bool {
    let current = hour_of(now);
    block_hour <= current && block_hour + (SLOTS as u64) > current
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HourBlock {
    pub hour_epoch: u64,
    pub positive: HllSketch,
    pub negative: HllSketch,
}

impl HourBlock {
    fn new(hour_epoch: u64) -> Self {
        Self {
            hour_epoch,
            positive: HllSketch::new(),
            negative: HllSketch::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VoteRing {
    blocks: [Option<HourBlock>; SLOTS],
}

impl VoteRing {
    pub fn blocks(&self) -> impl Iterator<Item = &HourBlock> {
        self.blocks.iter().flatten()
    }

    fn record(&mut self, polarity: Polarity, voter_ip: Ipv4Addr, now: u64) {
        let hour = hour_of(now);
        let slot = (hour % SLOTS as u64) as usize;
        let block = match &mut self.blocks[slot] {
            Some(b) if b.hour_epoch == hour => b,
            other => other.insert(HourBlock::new(hour)),
        };
        let sketch = match polarity {
            Polarity::Positive => &mut block.positive,
            Polarity::Negative => &mut block.negative,
        };
        sketch
            .add(&voter_ip.octets())
            .expect("ipv4 octets are never empty");
    }

    /// Merge of all in-window blocks, or `None` when no block is in the window.
    pub fn aggregate(&self, now: u64) -> Option<(HllSketch, HllSketch)> {
        let mut out: Option<(HllSketch, HllSketch)> = None;
        for block in self.blocks().filter(|b| in_window(b.hour_epoch, now)) {
            let (pos, neg) = out.get_or_insert_with(Default::default);
            pos.merge_from(&block.positive);
            neg.merge_from(&block.negative);
        }
        out
    }

    fn has_live_block(&self, now: u64) -> bool {
        self.blocks().any(|b| in_window(b.hour_epoch, now))
    }
}

#[derive(Debug, Clone)]
struct Entry {
    ring: VoteRing,
    write_seq: u64,
}

/// Map from vote key to its ring, bounded by `max_keys` with
/// least-recently-written eviction.
#[derive(Debug, Clone)]
pub struct VoteTable {
    entries: HashMap<VoteKey, Entry>,
    by_write: BTreeMap<u64, VoteKey>,
    next_seq: u64,
    max_keys: usize,
}

impl Default for VoteTable {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_KEYS)
    }
}

impl VoteTable {
    pub fn new(max_keys: usize) -> Self {
        Self {
            entries: HashMap::new(),
            by_write: BTreeMap::new(),
            next_seq: 0,
            max_keys,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_keys(&self) -> usize {
        self.max_keys
    }

    pub fn contains(&self, key: &VoteKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn ring(&self, key: &VoteKey) -> Option<&VoteRing> {
        self.entries.get(key).map(|e| &e.ring)
    }

    pub fn record_vote(
        &mut self,
        key: VoteKey,
        polarity: Polarity,
        voter_ip: Ipv4Addr,
        now: u64,
    ) -> Result<(), StoreError> {
        let seq = self.next_seq;
        self.next_seq += 1;

        if let Some(entry) = self.entries.get_mut(&key) {
            self.by_write.remove(&entry.write_seq);
            entry.write_seq = seq;
            entry.ring.record(polarity, voter_ip, now);
            self.by_write.insert(seq, key);
            return Ok(());
        }

        if self.entries.len() >= self.max_keys {
            let (_, victim) = self.by_write.pop_first().ok_or(StoreError::Full)?;
            self.entries.remove(&victim);
        }
        let mut ring = VoteRing::default();
        ring.record(polarity, voter_ip, now);
        self.entries.insert(key, Entry { ring, write_seq: seq });
        self.by_write.insert(seq, key);
        Ok(())
    }

    /// Positive and negative sketches over the trailing 24 hours. An absent
    /// key yields two empty sketches.
    pub fn aggregate(&self, key: &VoteKey, now: u64) -> (HllSketch, HllSketch) {
        self.aggregate_present(key, now).unwrap_or_default()
    }

    /// Like [`aggregate`](Self::aggregate) but distinguishes "no data" from
    /// "zero votes".
    pub fn aggregate_present(&self, key: &VoteKey, now: u64) -> Option<(HllSketch, HllSketch)> {
        self.entries.get(key).and_then(|e| e.ring.aggregate(now))
    }

    /// Drops rings with no block inside the window. Returns how many went.
    pub fn expire(&mut self, now: u64) -> usize {
        let dead: Vec<(VoteKey, u64)> = self
            .entries
            .iter()
            .filter(|(_, e)| !e.ring.has_live_block(now))
            .map(|(k, e)| (*k, e.write_seq))
            .collect();
        for (key, seq) in &dead {
            self.entries.remove(key);
            self.by_write.remove(seq);
        }
        dead.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::id::NodeId;

    const H: u64 = 500_000;

    fn key(b: u8) -> VoteKey {
        NodeId([b; 20])
    }

    fn ip(n: u32) -> Ipv4Addr {
        Ipv4Addr::from(0x0a00_0000 + n)
    }

    #[test]
    fn single_positive_vote() {
        let mut t = VoteTable::default();
        t.record_vote(key(1), Polarity::Positive, ip(1), H * 3600).unwrap();
        let (pos, neg) = t.aggregate(&key(1), H * 3600 + 10);
        assert_eq!(pos.count(), 1);
        assert_eq!(neg.count(), 0);
        assert!(neg.is_empty());
    }

    #[test]
    fn repeated_announce_from_one_ip_counts_once() {
        let mut once = VoteTable::default();
        once.record_vote(key(1), Polarity::Positive, ip(7), H * 3600).unwrap();
        let mut many = VoteTable::default();
        for i in 0..5 {
            many.record_vote(key(1), Polarity::Positive, ip(7), H * 3600 + i * 600)
                .unwrap();
        }
        let now = H * 3600 + 3599;
        assert_eq!(once.aggregate(&key(1), now), many.aggregate(&key(1), now));
    }

    #[test]
    fn stale_slot_is_reset_on_write() {
        let mut t = VoteTable::default();
        t.record_vote(key(1), Polarity::Positive, ip(1), H * 3600).unwrap();
        t.record_vote(key(1), Polarity::Negative, ip(2), (H + 24) * 3600).unwrap();
        let ring = t.ring(&key(1)).unwrap();
        let blocks: Vec<_> = ring.blocks().collect();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].hour_epoch, H + 24);
        assert!(blocks[0].positive.is_empty());
        let (pos, neg) = t.aggregate(&key(1), (H + 24) * 3600);
        assert!(pos.is_empty());
        assert_eq!(neg.count(), 1);
    }

    #[test]
    fn absent_key_and_expired_blocks_aggregate_to_zero() {
        let mut t = VoteTable::default();
        assert_eq!(t.aggregate(&key(9), 0), (HllSketch::new(), HllSketch::new()));
        t.record_vote(key(1), Polarity::Positive, ip(1), H * 3600).unwrap();
        assert!(t.aggregate_present(&key(1), (H + 24) * 3600).is_none());
        assert_eq!(
            t.aggregate(&key(1), (H + 30) * 3600),
            (HllSketch::new(), HllSketch::new())
        );
    }

    #[test]
    fn polarity_isolation() {
        let mut t = VoteTable::default();
        for i in 0..50 {
            t.record_vote(key(1), Polarity::Positive, ip(i), H * 3600).unwrap();
        }
        let (_, neg) = t.aggregate(&key(1), H * 3600);
        assert!(neg.is_empty());
    }

    #[test]
    fn expire_counts() {
        let mut t = VoteTable::default();
        assert_eq!(t.expire(H * 3600), 0);
        t.record_vote(key(1), Polarity::Positive, ip(1), H * 3600).unwrap();
        assert_eq!(t.expire((H + 25) * 3600), 1);
        assert!(t.is_empty());
        assert_eq!(
            t.aggregate(&key(1), (H + 25) * 3600),
            (HllSketch::new(), HllSketch::new())
        );
    }

    #[test]
    fn least_recently_written_key_is_evicted() {
        let mut t = VoteTable::new(2);
        t.record_vote(key(1), Polarity::Positive, ip(1), H * 3600).unwrap();
        t.record_vote(key(2), Polarity::Positive, ip(1), H * 3600).unwrap();
        t.record_vote(key(1), Polarity::Positive, ip(2), H * 3600).unwrap();
        t.record_vote(key(3), Polarity::Positive, ip(1), H * 3600).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t.contains(&key(1)));
        assert!(!t.contains(&key(2)));
        assert!(t.contains(&key(3)));
    }

    #[test]
    fn zero_capacity_is_full() {
        let mut t = VoteTable::new(0);
        assert_eq!(
            t.record_vote(key(1), Polarity::Positive, ip(1), 0),
            Err(StoreError::Full)
        );
    }

    #[test]
    fn window_edges() {
        assert!(in_window(H, H * 3600));
        assert!(in_window(H, (H + 23) * 3600 + 3599));
        assert!(!in_window(H, (H + 24) * 3600));
        assert!(!in_window(H + 1, H * 3600));
    }
}
