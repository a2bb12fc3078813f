//! KRPC envelopes for `ping`, `find_node`, `get_votes` and `announce_vote`.
//!
//! Top level: `{"t": tid, "y": "q"|"r"|"e", ...}`. Queries carry `"q"`
//! (method) and `"a"` (arguments), responses `"r"`, errors `"e": [code, msg]`.
//!
//! `get_votes` arguments are `{"id", "target"}`; its response carries `"id"`,
//! `"token"`, `"nodes"` and, only when the responder holds data for the key,
//! `"vp"`/`"vn"` with 256 raw register bytes each. `announce_vote` arguments
//! are `{"id", "target", "vote": 1|-1, "token"}` and the response is `{"id"}`.

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddrV4};

use thiserror::Error;

use super::bencode::{Bencode, DecodeError};
use crate::id::{NodeId, ID_LEN};
use crate::sketch::NUM_REGISTERS;

pub const COMPACT_NODE_LEN: usize = ID_LEN + 6;

pub const ERR_GENERIC: i64 = 201;
pub const ERR_SERVER: i64 = 202;
pub const ERR_PROTOCOL: i64 = 203;
pub const ERR_METHOD_UNKNOWN: i64 = 204;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ping,
    FindNode,
    GetVotes,
    AnnounceVote,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ping => "ping",
            Method::FindNode => "find_node",
            Method::GetVotes => "get_votes",
            Method::AnnounceVote => "announce_vote",
        }
    }

    pub fn from_name(name: &[u8]) -> Option<Method> {
        match name {
            b"ping" => Some(Method::Ping),
            b"find_node" => Some(Method::FindNode),
            b"get_votes" => Some(Method::GetVotes),
            b"announce_vote" => Some(Method::AnnounceVote),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Query {
    Ping {
        id: NodeId,
    },
    FindNode {
        id: NodeId,
        target: NodeId,
    },
    GetVotes {
        id: NodeId,
        target: NodeId,
    },
    AnnounceVote {
        id: NodeId,
        target: NodeId,
        vote: i64,
        token: Vec<u8>,
    },
}

impl Query {
    pub fn method(&self) -> Method {
        match self {
            Query::Ping { .. } => Method::Ping,
            Query::FindNode { .. } => Method::FindNode,
            Query::GetVotes { .. } => Method::GetVotes,
            Query::AnnounceVote { .. } => Method::AnnounceVote,
        }
    }

    pub fn sender(&self) -> NodeId {
        match self {
            Query::Ping { id }
            | Query::FindNode { id, .. }
            | Query::GetVotes { id, .. }
            | Query::AnnounceVote { id, .. } => *id,
        }
    }
}

/// One entry of compact node info: id, IPv4 address, big-endian port.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompactNode {
    pub id: NodeId,
    pub addr: SocketAddrV4,
}

/// Raw positive and negative registers as carried on the wire.
#[derive(Clone, PartialEq, Eq)]
pub struct VoteSketches {
    pub positive: [u8; NUM_REGISTERS],
    pub negative: [u8; NUM_REGISTERS],
}

impl std::fmt::Debug for VoteSketches {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VoteSketches")
            .field("positive_nonzero", &self.positive.iter().filter(|&&r| r != 0).count())
            .field("negative_nonzero", &self.negative.iter().filter(|&&r| r != 0).count())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub id: NodeId,
    pub token: Option<Vec<u8>>,
    pub nodes: Option<Vec<CompactNode>>,
    pub votes: Option<VoteSketches>,
}

impl Response {
    /// Response to `ping` or `announce_vote`.
    pub fn id_only(id: NodeId) -> Self {
        Self {
            id,
            token: None,
            nodes: None,
            votes: None,
        }
    }

    pub fn find_node(id: NodeId, nodes: Vec<CompactNode>) -> Self {
        Self {
            id,
            token: None,
            nodes: Some(nodes),
            votes: None,
        }
    }

    pub fn get_votes(
        id: NodeId,
        token: Vec<u8>,
        nodes: Vec<CompactNode>,
        votes: Option<VoteSketches>,
    ) -> Self {
        Self {
            id,
            token: Some(token),
            nodes: Some(nodes),
            votes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KrpcError {
    pub code: i64,
    pub message: String,
}

// One message per datagram; boxing the response buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Query(Query),
    Response(Response),
    Error(KrpcError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KrpcMessage {
    pub transaction_id: Vec<u8>,
    pub body: Body,
    /// Top-level `"ro": 1` on a query: the sender is a short-lived client
    /// and should not be added to routing tables (as in Mainline's BEP 43).
    pub read_only: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error(transparent)]
    Bencode(#[from] DecodeError),
    #[error("malformed message: {0}")]
    Malformed(&'static str),
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
}

/// Parse failure, with whatever envelope fields could be recovered so the
/// receiver can still answer with a KRPC error.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind}")]
pub struct ParseError {
    pub transaction_id: Option<Vec<u8>>,
    pub is_query: bool,
    pub kind: ParseErrorKind,
}

impl ParseError {
    /// KRPC error code to report back for this failure.
    pub fn error_code(&self) -> i64 {
        match self.kind {
            ParseErrorKind::UnknownMethod(_) => ERR_METHOD_UNKNOWN,
            _ => ERR_PROTOCOL,
        }
    }
}

pub fn encode_compact_nodes(nodes: &[CompactNode]) -> Vec<u8> {
    let mut out = Vec::with_capacity(nodes.len() * COMPACT_NODE_LEN);
    for n in nodes {
        out.extend_from_slice(n.id.as_bytes());
        out.extend_from_slice(&n.addr.ip().octets());
        out.extend_from_slice(&n.addr.port().to_be_bytes());
    }
    out
}

pub fn decode_compact_nodes(bytes: &[u8]) -> Option<Vec<CompactNode>> {
    if !bytes.len().is_multiple_of(COMPACT_NODE_LEN) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(COMPACT_NODE_LEN)
            .map(|c| {
                let id = NodeId::from_slice(&c[..ID_LEN]).expect("chunk holds 20 id bytes");
                let ip = Ipv4Addr::new(c[20], c[21], c[22], c[23]);
                let port = u16::from_be_bytes([c[24], c[25]]);
                CompactNode {
                    id,
                    addr: SocketAddrV4::new(ip, port),
                }
            })
            .collect(),
    )
}

/// 6-byte compact address: IPv4 then big-endian port.
pub fn compact_addr(addr: &SocketAddrV4) -> [u8; 6] {
    let mut out = [0u8; 6];
    out[..4].copy_from_slice(&addr.ip().octets());
    out[4..].copy_from_slice(&addr.port().to_be_bytes());
    out
}

fn key(k: &str) -> Vec<u8> {
    k.as_bytes().to_vec()
}

impl KrpcMessage {
    pub fn query(transaction_id: Vec<u8>, query: Query) -> Self {
        Self {
            transaction_id,
            body: Body::Query(query),
            read_only: false,
        }
    }

    pub fn response(transaction_id: Vec<u8>, response: Response) -> Self {
        Self {
            transaction_id,
            body: Body::Response(response),
            read_only: false,
        }
    }

    pub fn error(transaction_id: Vec<u8>, code: i64, message: impl Into<String>) -> Self {
        Self {
            transaction_id,
            body: Body::Error(KrpcError {
                code,
                message: message.into(),
            }),
            read_only: false,
        }
    }

    pub fn to_bencode(&self) -> Bencode {
        let mut top = BTreeMap::new();
        top.insert(key("t"), Bencode::bytes(self.transaction_id.clone()));
        match &self.body {
            Body::Query(q) => {
                top.insert(key("y"), Bencode::bytes("q"));
                top.insert(key("q"), Bencode::bytes(q.method().name()));
                let mut args = BTreeMap::new();
                args.insert(key("id"), Bencode::bytes(q.sender().0.to_vec()));
                match q {
                    Query::Ping { .. } => {}
                    Query::FindNode { target, .. } | Query::GetVotes { target, .. } => {
                        args.insert(key("target"), Bencode::bytes(target.0.to_vec()));
                    }
                    Query::AnnounceVote {
                        target, vote, token, ..
                    } => {
                        args.insert(key("target"), Bencode::bytes(target.0.to_vec()));
                        args.insert(key("vote"), Bencode::Int(*vote));
                        args.insert(key("token"), Bencode::bytes(token.clone()));
                    }
                }
                top.insert(key("a"), Bencode::Dict(args));
                if self.read_only {
                    top.insert(key("ro"), Bencode::Int(1));
                }
            }
            Body::Response(r) => {
                top.insert(key("y"), Bencode::bytes("r"));
                let mut vals = BTreeMap::new();
                vals.insert(key("id"), Bencode::bytes(r.id.0.to_vec()));
                if let Some(token) = &r.token {
                    vals.insert(key("token"), Bencode::bytes(token.clone()));
                }
                if let Some(nodes) = &r.nodes {
                    vals.insert(key("nodes"), Bencode::Bytes(encode_compact_nodes(nodes)));
                }
                if let Some(v) = &r.votes {
                    vals.insert(key("vp"), Bencode::bytes(v.positive.to_vec()));
                    vals.insert(key("vn"), Bencode::bytes(v.negative.to_vec()));
                }
                top.insert(key("r"), Bencode::Dict(vals));
            }
            Body::Error(e) => {
                top.insert(key("y"), Bencode::bytes("e"));
                top.insert(
                    key("e"),
                    Bencode::List(vec![
                        Bencode::Int(e.code),
                        Bencode::bytes(e.message.as_bytes().to_vec()),
                    ]),
                );
            }
        }
        Bencode::Dict(top)
    }

    pub fn encode(&self) -> Vec<u8> {
        self.to_bencode().encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ParseError> {
        let value = Bencode::decode(bytes).map_err(|e| ParseError {
            transaction_id: None,
            is_query: false,
            kind: e.into(),
        })?;
        Self::from_bencode(&value)
    }

    pub fn from_bencode(value: &Bencode) -> Result<Self, ParseError> {
        let bad = |tid: Option<Vec<u8>>, is_query: bool, why: &'static str| ParseError {
            transaction_id: tid,
            is_query,
            kind: ParseErrorKind::Malformed(why),
        };

        let top = value.as_dict().ok_or_else(|| bad(None, false, "top level is not a dict"))?;
        let tid = top
            .get(b"t".as_slice())
            .and_then(Bencode::as_bytes)
            .ok_or_else(|| bad(None, false, "missing transaction id"))?
            .to_vec();
        let kind = top
            .get(b"y".as_slice())
            .and_then(Bencode::as_bytes)
            .ok_or_else(|| bad(Some(tid.clone()), false, "missing message type"))?;

        let body = match kind {
            b"q" => {
                let t = || Some(tid.clone());
                let method = top
                    .get(b"q".as_slice())
                    .and_then(Bencode::as_bytes)
                    .ok_or_else(|| bad(t(), true, "missing method"))?;
                let args = top
                    .get(b"a".as_slice())
                    .and_then(Bencode::as_dict)
                    .ok_or_else(|| bad(t(), true, "missing arguments"))?;
                let method = Method::from_name(method).ok_or_else(|| ParseError {
                    transaction_id: t(),
                    is_query: true,
                    kind: ParseErrorKind::UnknownMethod(String::from_utf8_lossy(method).into_owned()),
                })?;
                let id20 = |name: &str, why: &'static str| {
                    args.get(name.as_bytes())
                        .and_then(Bencode::as_bytes)
                        .and_then(|b| NodeId::from_slice(b).ok())
                        .ok_or_else(|| bad(t(), true, why))
                };
                let id = id20("id", "missing or short id")?;
                let query = match method {
                    Method::Ping => Query::Ping { id },
                    Method::FindNode => Query::FindNode {
                        id,
                        target: id20("target", "missing or short target")?,
                    },
                    Method::GetVotes => Query::GetVotes {
                        id,
                        target: id20("target", "missing or short target")?,
                    },
                    Method::AnnounceVote => Query::AnnounceVote {
                        id,
                        target: id20("target", "missing or short target")?,
                        vote: args
                            .get(b"vote".as_slice())
                            .and_then(Bencode::as_int)
                            .ok_or_else(|| bad(t(), true, "missing vote"))?,
                        token: args
                            .get(b"token".as_slice())
                            .and_then(Bencode::as_bytes)
                            .ok_or_else(|| bad(t(), true, "missing token"))?
                            .to_vec(),
                    },
                };
                Body::Query(query)
            }
            b"r" => {
                let t = || Some(tid.clone());
                let vals = top
                    .get(b"r".as_slice())
                    .and_then(Bencode::as_dict)
                    .ok_or_else(|| bad(t(), false, "missing response values"))?;
                let id = vals
                    .get(b"id".as_slice())
                    .and_then(Bencode::as_bytes)
                    .and_then(|b| NodeId::from_slice(b).ok())
                    .ok_or_else(|| bad(t(), false, "missing or short id"))?;
                let token = match vals.get(b"token".as_slice()) {
                    None => None,
                    Some(v) => Some(v.as_bytes().ok_or_else(|| bad(t(), false, "token is not a string"))?.to_vec()),
                };
                let nodes = match vals.get(b"nodes".as_slice()) {
                    None => None,
                    Some(v) => Some(
                        v.as_bytes()
                            .and_then(decode_compact_nodes)
                            .ok_or_else(|| bad(t(), false, "nodes is not compact node info"))?,
                    ),
                };
                let sketch = |name: &str| -> Result<Option<[u8; NUM_REGISTERS]>, ParseError> {
                    match vals.get(name.as_bytes()) {
                        None => Ok(None),
                        Some(v) => v
                            .as_bytes()
                            .and_then(|b| <[u8; NUM_REGISTERS]>::try_from(b).ok())
                            .map(Some)
                            .ok_or_else(|| bad(t(), false, "sketch must be 256 bytes")),
                    }
                };
                let votes = match (sketch("vp")?, sketch("vn")?) {
                    (Some(positive), Some(negative)) => Some(VoteSketches { positive, negative }),
                    (None, None) => None,
                    _ => return Err(bad(t(), false, "vp and vn must appear together")),
                };
                Body::Response(Response {
                    id,
                    token,
                    nodes,
                    votes,
                })
            }
            b"e" => {
                let list = top
                    .get(b"e".as_slice())
                    .and_then(Bencode::as_list)
                    .ok_or_else(|| bad(Some(tid.clone()), false, "missing error list"))?;
                match list {
                    [Bencode::Int(code), Bencode::Bytes(msg)] => Body::Error(KrpcError {
                        code: *code,
                        message: String::from_utf8_lossy(msg).into_owned(),
                    }),
                    _ => return Err(bad(Some(tid.clone()), false, "error must be [code, message]")),
                }
            }
            _ => return Err(bad(Some(tid.clone()), false, "unknown message type")),
        };
        let read_only =
            matches!(body, Body::Query(_)) && matches!(top.get(b"ro".as_slice()), Some(Bencode::Int(1)));
        Ok(KrpcMessage {
            transaction_id: tid,
            body,
            read_only,
        })
    }
}
