//! HyperLogLog distinct counter with 256 one-byte registers.
//!
//! Items are hashed with SHA1: the first digest byte selects the register,
//! the next four bytes (big-endian) supply the rank. Every node hashes the
//! same way, so sketches produced by different replicas merge correctly.
//!
//! The register array doubles as the wire and disk encoding: 256 bytes in
//! index order.

use sha1::{Digest, Sha1};
use thiserror::Error;

/// Number of index bits taken from the digest.
pub const PRECISION_BITS: u8 = 8;
/// Register count, `2^PRECISION_BITS`.
pub const NUM_REGISTERS: usize = 1 << PRECISION_BITS;
/// Largest legal register value: 32 rank bits plus one.
pub const MAX_RANK: u8 = 33;

const M: f64 = NUM_REGISTERS as f64;
/// Bias correction for m = 256.
pub const ALPHA: f64 = 0.7213 / (1.0 + 1.079 / M);
const TWO_POW_32: f64 = 4_294_967_296.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SketchError {
    #[error("cannot add an empty item")]
    EmptyItem,
    #[error("malformed sketch: expected {NUM_REGISTERS} bytes, got {0}")]
    BadLength(usize),
    #[error("malformed sketch: register {index} holds {value}, max is {MAX_RANK}")]
    RegisterOutOfRange { index: usize, value: u8 },
    #[error("precision mismatch: {0} vs {1}")]
    PrecisionMismatch(u8, u8),
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct HllSketch {
    registers: [u8; NUM_REGISTERS],
}

impl Default for HllSketch {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for HllSketch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let nonzero = self.registers.iter().filter(|&&r| r != 0).count();
        f.debug_struct("HllSketch")
            .field("nonzero_registers", &nonzero)
            .field("estimate", &self.estimate())
            .finish()
    }
}

/// Register index and rank for one item.
pub fn index_and_rank(item: &[u8]) -> (usize, u8) {
    let digest = Sha1::digest(item);
    let index = digest[0] as usize;
    let w = u32::from_be_bytes([digest[1], digest[2], digest[3], digest[4]]);
    // leading_zeros(0) == 32, so rank tops out at 33
    let rank = (w.leading_zeros() + 1) as u8;
    (index, rank)
}

impl HllSketch {
    pub fn new() -> Self {
        Self {
            registers: [0; NUM_REGISTERS],
        }
    }

    pub fn precision_bits(&self) -> u8 {
        PRECISION_BITS
    }

    pub fn registers(&self) -> &[u8; NUM_REGISTERS] {
        &self.registers
    }

    /// Builds a sketch from registers that are already known to be in range.
    pub fn from_registers(registers: [u8; NUM_REGISTERS]) -> Result<Self, SketchError> {
        if let Some((index, &value)) = registers.iter().enumerate().find(|(_, &v)| v > MAX_RANK) {
            return Err(SketchError::RegisterOutOfRange { index, value });
        }
        Ok(Self { registers })
    }

    /// Accepts any 256 register bytes, clamping values above [`MAX_RANK`].
    ///
    /// Used for sketches received from remote replicas: an out-of-range
    /// register is treated as the largest rank it could legally claim rather
    /// than discarding the reply, so the spam filter sees it.
    pub fn from_registers_saturating(mut registers: [u8; NUM_REGISTERS]) -> Self {
        for r in registers.iter_mut() {
            *r = (*r).min(MAX_RANK);
        }
        Self { registers }
    }

    pub fn add(&mut self, item: &[u8]) -> Result<(), SketchError> {
        if item.is_empty() {
            return Err(SketchError::EmptyItem);
        }
        let (index, rank) = index_and_rank(item);
        if rank > self.registers[index] {
            self.registers[index] = rank;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.registers.iter().all(|&r| r == 0)
    }

    /// Cardinality estimate with the standard small- and large-range
    /// corrections. Saturates at 2^32 once the raw estimate exceeds the
    /// 32-bit hash space, where the large-range formula is undefined.
    pub fn estimate(&self) -> f64 {
        let mut sum = 0.0f64;
        let mut zeros = 0usize;
        for &r in &self.registers {
            sum += (-(r as f64)).exp2();
            if r == 0 {
                zeros += 1;
            }
        }
        let raw = ALPHA * M * M / sum;
        if raw <= 2.5 * M {
            if zeros > 0 {
                M * (M / zeros as f64).ln()
            } else {
                raw
            }
        } else if raw > TWO_POW_32 / 30.0 {
            if raw >= TWO_POW_32 {
                TWO_POW_32
            } else {
                -TWO_POW_32 * (1.0 - raw / TWO_POW_32).ln()
            }
        } else {
            raw
        }
    }

    /// Estimate rounded to the nearest integer.
    pub fn count(&self) -> u64 {
        self.estimate().round() as u64
    }

    pub fn merge_from(&mut self, other: &HllSketch) {
        for (mine, &theirs) in self.registers.iter_mut().zip(other.registers.iter()) {
            if theirs > *mine {
                *mine = theirs;
            }
        }
    }

    pub fn merged(&self, other: &HllSketch) -> Result<HllSketch, SketchError> {
        if self.precision_bits() != other.precision_bits() {
            return Err(SketchError::PrecisionMismatch(
                self.precision_bits(),
                other.precision_bits(),
            ));
        }
        let mut out = self.clone();
        out.merge_from(other);
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.registers.to_vec()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SketchError> {
        let registers: [u8; NUM_REGISTERS] = bytes
            .try_into()
            .map_err(|_| SketchError::BadLength(bytes.len()))?;
        Self::from_registers(registers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_sketch_is_empty_and_estimates_zero() {
        let s = HllSketch::new();
        assert!(s.registers().iter().all(|&r| r == 0));
        assert_eq!(s.estimate(), 0.0);
        assert_eq!(s.merged(&HllSketch::new()).unwrap(), HllSketch::new());
    }

    #[test]
    fn localhost_lands_in_register_17_with_rank_1() {
        // SHA1(7f000001) = 11d1def534ea1be07cf4e4ced4b128798aff7599
        // index = 0x11, w = 0xd1def534 has no leading zeros
        let mut s = HllSketch::new();
        s.add(&[127, 0, 0, 1]).unwrap();
        let changed: Vec<_> = s
            .registers()
            .iter()
            .enumerate()
            .filter(|(_, &r)| r != 0)
            .collect();
        assert_eq!(changed, vec![(17, &1)]);

        // 192.168.1.1 -> index 175, rank 2
        assert_eq!(index_and_rank(&[192, 168, 1, 1]), (175, 2));
    }

    #[test]
    fn alpha_for_256_registers() {
        assert!((ALPHA - 0.718_27).abs() < 1e-5);
    }

    #[test]
    fn single_register_uses_linear_counting() {
        let mut regs = [0u8; NUM_REGISTERS];
        regs[3] = 1;
        let s = HllSketch::from_registers(regs).unwrap();
        assert!((s.estimate() - 1.001_958_226).abs() < 1e-6);
        assert_eq!(s.count(), 1);
    }

    #[test]
    fn saturated_sketch_estimate_is_finite() {
        let s = HllSketch::from_registers_saturating([255; NUM_REGISTERS]);
        assert!(s.registers().iter().all(|&r| r == MAX_RANK));
        assert_eq!(s.estimate(), TWO_POW_32);
    }

    #[test]
    fn empty_item_rejected() {
        assert_eq!(HllSketch::new().add(&[]), Err(SketchError::EmptyItem));
    }

    #[test]
    fn duplicate_adds_are_idempotent() {
        let mut once = HllSketch::new();
        once.add(b"10.1.2.3").unwrap();
        let mut many = HllSketch::new();
        for _ in 0..5 {
            many.add(b"10.1.2.3").unwrap();
        }
        assert_eq!(once, many);
        assert_eq!(once.estimate(), many.estimate());
    }

    #[test]
    fn deserialize_rejects_bad_input() {
        assert_eq!(HllSketch::new().to_bytes(), vec![0u8; 256]);
        assert_eq!(
            HllSketch::from_bytes(&[0u8; 255]),
            Err(SketchError::BadLength(255))
        );
        let mut bytes = [0u8; 256];
        bytes[9] = 34;
        assert_eq!(
            HllSketch::from_bytes(&bytes),
            Err(SketchError::RegisterOutOfRange { index: 9, value: 34 })
        );
    }

    fn arb_sketch() -> impl Strategy<Value = HllSketch> {
        proptest::collection::vec(0..=MAX_RANK, NUM_REGISTERS).prop_map(|v| {
            HllSketch::from_registers(v.try_into().unwrap()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn serialization_round_trips(s in arb_sketch()) {
            prop_assert_eq!(HllSketch::from_bytes(&s.to_bytes()).unwrap(), s);
        }

        #[test]
        fn merge_is_commutative_associative_idempotent(a in arb_sketch(), b in arb_sketch(), c in arb_sketch()) {
            prop_assert_eq!(a.merged(&b).unwrap(), b.merged(&a).unwrap());
            prop_assert_eq!(
                a.merged(&b).unwrap().merged(&c).unwrap(),
                a.merged(&b.merged(&c).unwrap()).unwrap()
            );
            prop_assert_eq!(a.merged(&a).unwrap(), a.clone());
            prop_assert_eq!(a.merged(&HllSketch::new()).unwrap(), a);
        }

        #[test]
        fn insertion_order_does_not_matter(items in proptest::collection::vec(any::<[u8; 4]>(), 1..200)) {
            let mut forward = HllSketch::new();
            let mut reverse = HllSketch::new();
            let mut monotone = HllSketch::new();
            for it in &items {
                forward.add(it).unwrap();
                let before = monotone.clone();
                monotone.add(it).unwrap();
                prop_assert!(before.registers().iter().zip(monotone.registers()).all(|(b, a)| b <= a));
            }
            for it in items.iter().rev() {
                reverse.add(it).unwrap();
            }
            prop_assert_eq!(forward, reverse);
        }
    }
}
