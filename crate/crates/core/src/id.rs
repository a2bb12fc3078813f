//! 160-bit identifiers shared by the routing layer and the vote store.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};
use thiserror::Error;

pub const ID_LEN: usize = 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdError {
    #[error("expected {ID_LEN} bytes, got {0}")]
    Length(usize),
    #[error("expected 40 hex characters: {0}")]
    Hex(String),
}

/// Node id or DHT key. Node ids and vote keys live in one id space.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct NodeId(pub [u8; ID_LEN]);

/// DHT key under which votes for a document are stored.
pub type VoteKey = NodeId;

/// XOR distance, ordered as a big-endian unsigned integer.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Distance(pub [u8; ID_LEN]);

impl Distance {
    pub const ZERO: Distance = Distance([0; ID_LEN]);

    pub fn leading_zeros(&self) -> u32 {
        let mut n = 0;
        for &b in &self.0 {
            if b == 0 {
                n += 8;
            } else {
                return n + b.leading_zeros();
            }
        }
        n
    }
}

impl NodeId {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, IdError> {
        let arr: [u8; ID_LEN] = bytes.try_into().map_err(|_| IdError::Length(bytes.len()))?;
        Ok(NodeId(arr))
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut id = [0u8; ID_LEN];
        rng.fill(&mut id[..]);
        NodeId(id)
    }

    pub fn as_bytes(&self) -> &[u8; ID_LEN] {
        &self.0
    }

    pub fn distance(&self, other: &NodeId) -> Distance {
        let mut d = [0u8; ID_LEN];
        for (i, out) in d.iter_mut().enumerate() {
            *out = self.0[i] ^ other.0[i];
        }
        Distance(d)
    }

    /// Random id whose distance from `self` has exactly `bucket` leading zero bits.
    pub fn random_in_bucket<R: Rng + ?Sized>(&self, bucket: usize, rng: &mut R) -> NodeId {
        assert!(bucket < ID_LEN * 8);
        let mut d = NodeId::random(rng).0;
        let byte = bucket / 8;
        let bit = bucket % 8;
        for b in d.iter_mut().take(byte) {
            *b = 0;
        }
        let top = 0x80u8 >> bit;
        d[byte] = (d[byte] & (top - 1)) | top;
        let mut out = self.0;
        for (o, x) in out.iter_mut().zip(d.iter()) {
            *o ^= x;
        }
        NodeId(out)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({})", hex::encode(&self.0[..6]))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Document identifier (a torrent info-hash).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct InfoHash(pub [u8; ID_LEN]);

impl InfoHash {
    /// The DHT key is the SHA1 of the info-hash, so storing nodes cannot tell
    /// which document a vote belongs to.
    pub fn vote_key(&self) -> VoteKey {
        NodeId(Sha1::digest(self.0).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl FromStr for InfoHash {
    type Err = IdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 40 {
            return Err(IdError::Hex(s.to_string()));
        }
        let bytes = hex::decode(s).map_err(|_| IdError::Hex(s.to_string()))?;
        Ok(InfoHash(bytes.try_into().expect("40 hex chars decode to 20 bytes")))
    }
}

impl Serialize for InfoHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for InfoHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Debug for InfoHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "InfoHash({})", self.to_hex())
    }
}

impl fmt::Display for InfoHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn id_with_last(b: u8) -> NodeId {
        let mut a = [0u8; ID_LEN];
        a[ID_LEN - 1] = b;
        NodeId(a)
    }

    #[test]
    fn distance_basics() {
        let a = id_with_last(1);
        let b = id_with_last(3);
        assert_eq!(a.distance(&a), Distance::ZERO);
        assert_eq!(a.distance(&b), b.distance(&a));
        assert_eq!(a.distance(&b).0, id_with_last(2).0);
        assert_eq!(a.distance(&b).leading_zeros(), 158);
    }

    #[test]
    fn random_in_bucket_hits_requested_bucket() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let own = NodeId::random(&mut rng);
        for bucket in [0usize, 1, 7, 8, 9, 63, 159] {
            let id = own.random_in_bucket(bucket, &mut rng);
            assert_eq!(own.distance(&id).leading_zeros() as usize, bucket);
        }
    }

    #[test]
    fn infohash_hex_parsing() {
        let h: InfoHash = "00112233445566778899aabbccddeeff00112233".parse().unwrap();
        assert_eq!(h.0[1], 0x11);
        assert!("0011".parse::<InfoHash>().is_err());
        assert!("zz112233445566778899aabbccddeeff00112233".parse::<InfoHash>().is_err());
    }

    #[test]
    fn vote_key_is_sha1_of_infohash() {
        // SHA1 of twenty zero bytes
        let key = InfoHash([0; 20]).vote_key();
        assert_eq!(key.to_string(), "6768033e216468247bd031a0a2d9876d79818f8f");
    }
}
