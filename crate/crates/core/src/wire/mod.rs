//! Bencode codec and KRPC message formats.

pub mod bencode;
pub mod krpc;

pub use bencode::{Bencode, DecodeError, DecodeErrorKind};
pub use krpc::{
    compact_addr, decode_compact_nodes, encode_compact_nodes, Body, CompactNode, KrpcError,
    KrpcMessage, Method, ParseError, ParseErrorKind, Query, Response, VoteSketches,
    COMPACT_NODE_LEN, ERR_GENERIC, ERR_METHOD_UNKNOWN, ERR_PROTOCOL, ERR_SERVER,
};
