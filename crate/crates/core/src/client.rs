//! Vote retrieval and the replica spam filter.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::id::InfoHash;
use crate::node::ops::{self, Host};
use crate::sketch::{HllSketch, NUM_REGISTERS};
use crate::wire::{Query, VoteSketches};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CombineError {
    #[error("nothing to combine")]
    Empty,
}

/// How replica sketches are folded into one answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombineMode {
    /// Per-register lower median once there are three or more replicas.
    #[default]
    Robust,
    /// Per-register max. A single inflated replica dominates it.
    MaxMerge,
}

impl fmt::Display for CombineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CombineMode::Robust => "robust",
            CombineMode::MaxMerge => "max-merge",
        })
    }
}

impl FromStr for CombineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "robust" => Ok(CombineMode::Robust),
            "max-merge" => Ok(CombineMode::MaxMerge),
            other => Err(format!("unknown combiner {other:?}")),
        }
    }
}

pub fn max_merge(sketches: &[HllSketch]) -> Result<HllSketch, CombineError> {
    let (first, rest) = sketches.split_first().ok_or(CombineError::Empty)?;
    let mut out = first.clone();
    for s in rest {
        out.merge_from(s);
    }
    Ok(out)
}

/// Per-register lower median (element `floor((n-1)/2)` of the sorted
/// values). Falls back to [`max_merge`] below three sketches, where a
/// median cannot outvote anyone. The result does not depend on input order.
pub fn robust_combine(sketches: &[HllSketch]) -> Result<HllSketch, CombineError> {
    let n = sketches.len();
    if n < 3 {
        return max_merge(sketches);
    }
    let mut registers = [0u8; NUM_REGISTERS];
    let mut column = vec![0u8; n];
    for (i, out) in registers.iter_mut().enumerate() {
        for (slot, s) in column.iter_mut().zip(sketches) {
            *slot = s.registers()[i];
        }
        column.sort_unstable();
        *out = column[(n - 1) / 2];
    }
    Ok(HllSketch::from_registers(registers).expect("median of valid registers is valid"))
}

pub fn combine(mode: CombineMode, sketches: &[HllSketch]) -> Result<HllSketch, CombineError> {
    match mode {
        CombineMode::Robust => robust_combine(sketches),
        CombineMode::MaxMerge => max_merge(sketches),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteResult {
    pub info_hash: InfoHash,
    pub positive_count: u64,
    pub negative_count: u64,
    /// Replicas that answered `get_votes`, with or without data.
    pub responders: usize,
    pub queried: usize,
    /// True when the median filter actually ran (robust mode, three or more
    /// replicas with data).
    pub filtered: bool,
}

impl VoteResult {
    pub fn no_data(info_hash: InfoHash) -> Self {
        Self {
            info_hash,
            positive_count: 0,
            negative_count: 0,
            responders: 0,
            queried: 0,
            filtered: false,
        }
    }
}

/// Folds the sketches of the replicas that returned data. Remote registers
/// above the valid rank are clamped rather than rejected, so an inflated
/// reply still reaches the combiner (and is outvoted there).
pub fn combine_replies(
    info_hash: InfoHash,
    replies: &[VoteSketches],
    responders: usize,
    queried: usize,
    mode: CombineMode,
) -> VoteResult {
    let pos: Vec<HllSketch> = replies
        .iter()
        .map(|v| HllSketch::from_registers_saturating(v.positive))
        .collect();
    let neg: Vec<HllSketch> = replies
        .iter()
        .map(|v| HllSketch::from_registers_saturating(v.negative))
        .collect();
    let count = |s: &[HllSketch]| combine(mode, s).map(|c| c.count()).unwrap_or(0);
    VoteResult {
        info_hash,
        positive_count: count(&pos),
        negative_count: count(&neg),
        responders,
        queried,
        filtered: mode == CombineMode::Robust && replies.len() >= 3,
    }
}

/// Looks up the replicas for `info_hash`, asks each for its sketches and
/// combines what comes back.
pub fn fetch_votes<H: Host>(host: &mut H, info_hash: InfoHash, mode: CombineMode) -> VoteResult {
    let key = info_hash.vote_key();
    let Ok(found) = ops::lookup(host, key) else {
        return VoteResult::no_data(info_hash);
    };
    let own_id = host.with_state(|s| s.id());
    let batch = found
        .closest
        .iter()
        .map(|c| (c.clone(), Query::GetVotes { id: own_id, target: key }))
        .collect();
    let results = ops::query_contacts(host, batch);
    let queried = results.len();
    let mut responders = 0;
    let mut replies = Vec::new();
    for r in results.into_iter().flatten() {
        responders += 1;
        if let Some(v) = r.votes {
            replies.push(v);
        }
    }
    combine_replies(info_hash, &replies, responders, queried, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::MAX_RANK;
    use proptest::prelude::*;

    fn sketch_of(ips: std::ops::Range<u32>) -> HllSketch {
        let mut s = HllSketch::new();
        for ip in ips {
            s.add(&ip.to_be_bytes()).unwrap();
        }
        s
    }

    fn brute_lower_median(sketches: &[HllSketch]) -> [u8; NUM_REGISTERS] {
        let mut out = [0u8; NUM_REGISTERS];
        for (i, o) in out.iter_mut().enumerate() {
            let mut col: Vec<u8> = sketches.iter().map(|s| s.registers()[i]).collect();
            col.sort();
            *o = col[(col.len() - 1) / 2];
        }
        out
    }

    #[test]
    fn empty_is_rejected() {
        assert_eq!(robust_combine(&[]), Err(CombineError::Empty));
        assert_eq!(max_merge(&[]), Err(CombineError::Empty));
    }

    #[test]
    fn identical_replicas_pass_through() {
        let s = sketch_of(0..500);
        let out = robust_combine(&vec![s.clone(); 8]).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn two_sketches_merge() {
        let a = sketch_of(0..300);
        let b = sketch_of(200..700);
        assert_eq!(robust_combine(&[a.clone(), b.clone()]).unwrap(), a.merged(&b).unwrap());
    }

    #[test]
    fn inflated_minority_is_outvoted() {
        let honest: Vec<HllSketch> = (0..5).map(|i| sketch_of(0..(400 + i * 10))).collect();
        let bad = HllSketch::from_registers([MAX_RANK; NUM_REGISTERS]).unwrap();
        let mut all = honest.clone();
        all.extend([bad.clone(), bad]);
        // Two high outliers shift the median rank by one, so the output sits
        // inside the honest spread rather than on the honest lower median.
        let out = robust_combine(&all).unwrap();
        for i in 0..NUM_REGISTERS {
            let mut col: Vec<u8> = honest.iter().map(|s| s.registers()[i]).collect();
            col.sort();
            assert!(out.registers()[i] >= col[0] && out.registers()[i] <= col[4]);
        }
        assert_eq!(out.registers(), &brute_lower_median(&all));
        assert!(max_merge(&all).unwrap().count() >= 1 << 31);
    }

    #[test]
    fn lower_median_of_honest_with_register_identical_replicas() {
        let honest = sketch_of(0..1000);
        let bad = HllSketch::from_registers([MAX_RANK; NUM_REGISTERS]).unwrap();
        let all = vec![honest.clone(), bad.clone(), honest.clone(), bad.clone(), honest.clone(), bad, honest.clone()];
        assert_eq!(robust_combine(&all).unwrap(), honest);
    }

    #[test]
    fn combine_replies_clamps_wire_registers() {
        let honest = sketch_of(0..40);
        let wire = |s: &HllSketch| VoteSketches {
            positive: *s.registers(),
            negative: [0; NUM_REGISTERS],
        };
        let mut replies = vec![wire(&honest); 5];
        replies.extend(vec![
            VoteSketches {
                positive: [255; NUM_REGISTERS],
                negative: [255; NUM_REGISTERS],
            };
            3
        ]);
        let h = InfoHash([1; 20]);
        let robust = combine_replies(h, &replies, 8, 8, CombineMode::Robust);
        assert_eq!(robust.positive_count, honest.count());
        assert_eq!(robust.negative_count, 0);
        assert!(robust.filtered);
        let merged = combine_replies(h, &replies, 8, 8, CombineMode::MaxMerge);
        assert!(merged.positive_count > 1_000_000);
        assert!(!merged.filtered);
    }

    fn arb_sketch() -> impl Strategy<Value = HllSketch> {
        proptest::collection::vec(0..=MAX_RANK, NUM_REGISTERS)
            .prop_map(|v| HllSketch::from_registers(v.try_into().unwrap()).unwrap())
    }

    proptest! {
        #[test]
        fn permutation_invariant(mut list in proptest::collection::vec(arb_sketch(), 1..9), seed: u64) {
            let before = robust_combine(&list).unwrap();
            use rand::{seq::SliceRandom, SeedableRng};
            list.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(robust_combine(&list).unwrap(), before);
        }

        #[test]
        fn matches_brute_force(list in proptest::collection::vec(arb_sketch(), 3..9)) {
            prop_assert_eq!(*robust_combine(&list).unwrap().registers(), brute_lower_median(&list));
        }

        #[test]
        fn breakdown_bound(honest in arb_sketch(), n in 3usize..12, junk in arb_sketch()) {
            let bad = (n - 1) / 2;
            let mut list = vec![junk; bad];
            list.extend(vec![honest.clone(); n - bad]);
            prop_assert_eq!(robust_combine(&list).unwrap(), honest);
        }
    }
}
