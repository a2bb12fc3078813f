//! Distributed like/unlike voting on top of a Kademlia DHT.
//!
//! Votes for a document are stored under `SHA1(info_hash)` on the k nodes
//! closest to that key. Each storing node keeps a positive and a negative
//! HyperLogLog sketch per hour of the last day, keyed by voter IP, so every
//! IP counts once and stale votes age out unless re-announced. Readers query
//! all k replicas and combine their sketches with a per-register median,
//! which tolerates a minority of lying replicas.

pub mod client;
pub mod id;
pub mod kademlia;
pub mod node;
pub mod sim;
pub mod sketch;
pub mod vote_store;
pub mod wire;

pub use id::{InfoHash, NodeId, VoteKey};
pub use sketch::HllSketch;
pub use vote_store::Polarity;
