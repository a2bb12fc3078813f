//! UDP runtime for [`NodeState`].
//!
//! One receive thread answers queries and routes replies to whoever is
//! waiting on their transaction id. Outbound calls go through
//! [`UdpNode`]'s [`Host`] impl and wait on a channel, never on the state
//! lock.

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, SocketAddrV4, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU16, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use rand::Rng;

use super::ops::{self, AnnounceReport, Host, RpcError};
use super::{Journal, JournalWarning, NodeConfig, NodeError, NodeState};
use crate::id::NodeId;
use crate::wire::{Body, KrpcMessage, Query, Response};

pub const QUERY_TIMEOUT: Duration = Duration::from_secs(2);
pub const QUERY_RETRIES: usize = 2;
const EXPIRE_EVERY_SECS: u64 = 60;
const REFRESH_EVERY_SECS: u64 = 15 * 60;
const MAX_DATAGRAM: usize = 65_536;

type Waiter = (Sender<(usize, SocketAddrV4, KrpcMessage)>, usize);

struct Shared {
    socket: UdpSocket,
    state: Mutex<NodeState>,
    pending: Mutex<HashMap<Vec<u8>, Waiter>>,
    next_tid: AtomicU16,
    shutdown: AtomicBool,
    timeout: Duration,
    retries: usize,
}

impl Shared {
    fn state(&self) -> MutexGuard<'_, NodeState> {
        self.state.lock().expect("node state poisoned")
    }
}

/// A running node. Cloning gives another handle to the same node.
#[derive(Clone)]
pub struct UdpNode {
    shared: Arc<Shared>,
    receiver: Arc<Mutex<Option<JoinHandle<()>>>>,
}

/// Resolves `host:port` strings to IPv4 socket addresses.
pub fn resolve_v4(addrs: &[SocketAddr]) -> Vec<SocketAddrV4> {
    addrs
        .iter()
        .filter_map(|a| match a {
            SocketAddr::V4(v4) => Some(*v4),
            SocketAddr::V6(_) => None,
        })
        .collect()
}

pub fn resolve_host(host: &str) -> io::Result<Vec<SocketAddrV4>> {
    let all: Vec<SocketAddr> = host.to_socket_addrs()?.collect();
    Ok(resolve_v4(&all))
}

impl UdpNode {
    /// Binds the socket, loads the journal and starts answering queries.
    /// Returns the journal warnings found while loading.
    pub fn start(config: NodeConfig) -> Result<(UdpNode, Vec<JournalWarning>), NodeError> {
        config.validate()?;
        let journal = match &config.state_dir {
            Some(dir) => Some(Journal::open_dir(dir)?),
            None => None,
        };
        let socket = UdpSocket::bind(config.bind)?;
        socket.set_read_timeout(Some(Duration::from_millis(100)))?;
        let mut config = config;
        if config.external_ip.is_none() && !config.bind.ip().is_unspecified() {
            config.external_ip = Some(*config.bind.ip());
        }
        let mut rng = rand::thread_rng();
        let id = NodeId::random(&mut rng);
        let (state, warnings) = NodeState::new(id, config, journal, rng.gen())?;
        for w in &warnings {
            warn!("{w}");
        }
        let shared = Arc::new(Shared {
            socket,
            state: Mutex::new(state),
            pending: Mutex::new(HashMap::new()),
            next_tid: AtomicU16::new(rng.gen()),
            shutdown: AtomicBool::new(false),
            timeout: QUERY_TIMEOUT,
            retries: QUERY_RETRIES,
        });
        let rx_shared = Arc::clone(&shared);
        let handle = thread::Builder::new()
            .name("dhtvote-recv".into())
            .spawn(move || receive_loop(&rx_shared))?;
        info!("node {id} listening on {}", shared.socket.local_addr()?);
        Ok((
            UdpNode {
                shared,
                receiver: Arc::new(Mutex::new(Some(handle))),
            },
            warnings,
        ))
    }

    pub fn local_addr(&self) -> io::Result<SocketAddrV4> {
        match self.shared.socket.local_addr()? {
            SocketAddr::V4(a) => Ok(a),
            SocketAddr::V6(_) => Err(io::Error::other("bound to IPv6")),
        }
    }

    pub fn id(&self) -> NodeId {
        self.shared.state().id()
    }

    /// Direct access to the state, for inspection.
    pub fn lock_state(&self) -> MutexGuard<'_, NodeState> {
        self.shared.state()
    }

    /// Bootstraps from the configured contacts.
    pub fn bootstrap(&mut self) -> Result<usize, NodeError> {
        let contacts = resolve_v4(&self.shared.state().config().bootstrap);
        if contacts.is_empty() {
            return Ok(0);
        }
        ops::bootstrap(self, &contacts)
    }

    pub fn announce_round(&mut self) -> AnnounceReport {
        ops::announce_round(self)
    }

    /// Runs timers until [`shutdown`](Self::shutdown) is called: announce
    /// rounds, expiry, bucket refresh.
    pub fn run(&mut self) {
        let period = self.shared.state().config().announce_period_secs;
        let mut next_announce = 0;
        let mut next_expire = 0;
        let mut next_refresh = self.now() + REFRESH_EVERY_SECS;
        while !self.shared.shutdown.load(Ordering::SeqCst) {
            let now = self.now();
            if now >= next_announce {
                let r = self.announce_round();
                if !r.votes.is_empty() {
                    info!("announce round: {} deliveries for {} votes", r.delivered(), r.votes.len());
                }
                next_announce = now + period;
            }
            if now >= next_expire {
                let dropped = self.shared.state().expire(now);
                if dropped > 0 {
                    debug!("expired {dropped} keys");
                }
                next_expire = now + EXPIRE_EVERY_SECS;
            }
            if now >= next_refresh {
                ops::refresh_buckets(self);
                next_refresh = now + REFRESH_EVERY_SECS;
            }
            thread::sleep(Duration::from_millis(200));
        }
    }

    pub fn shutdown(&self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        if let Some(h) = self.receiver.lock().expect("receiver handle poisoned").take() {
            let _ = h.join();
        }
    }

    fn next_tid(&self) -> Vec<u8> {
        self.shared.next_tid.fetch_add(1, Ordering::Relaxed).to_be_bytes().to_vec()
    }
}

fn receive_loop(shared: &Shared) {
    let mut buf = vec![0u8; MAX_DATAGRAM];
    while !shared.shutdown.load(Ordering::SeqCst) {
        let (len, from) = match shared.socket.recv_from(&mut buf) {
            Ok(x) => x,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(e) => {
                debug!("recv error: {e}");
                continue;
            }
        };
        let SocketAddr::V4(from) = from else {
            continue;
        };
        let data = &buf[..len];
        match KrpcMessage::decode(data) {
            Ok(msg) if !matches!(msg.body, Body::Query(_)) => {
                let waiter = shared
                    .pending
                    .lock()
                    .expect("pending map poisoned")
                    .get(&msg.transaction_id)
                    .cloned();
                if let Some((tx, index)) = waiter {
                    let _ = tx.send((index, from, msg));
                }
            }
            _ => {
                let reply = {
                    let mut state = shared.state();
                    let now = state.now();
                    state.handle_datagram(data, from, now)
                };
                if let Some(reply) = reply {
                    if let Err(e) = shared.socket.send_to(&reply, from) {
                        debug!("send to {from} failed: {e}");
                    }
                }
            }
        }
    }
}

impl Host for UdpNode {
    fn now(&self) -> u64 {
        self.shared.state().now()
    }

    fn with_state<R>(&mut self, f: impl FnOnce(&mut NodeState) -> R) -> R {
        f(&mut self.shared.state())
    }

    fn exchange(&mut self, queries: Vec<(SocketAddrV4, Query)>) -> Vec<Result<Response, RpcError>> {
        let n = queries.len();
        let mut results: Vec<Option<Result<Response, RpcError>>> = vec![None; n];
        if n == 0 {
            return Vec::new();
        }
        let read_only = self.lock_state().config().read_only;
        let (tx, rx) = mpsc::channel();
        let encoded: Vec<(Vec<u8>, SocketAddrV4, Vec<u8>)> = queries
            .into_iter()
            .map(|(addr, q)| {
                let tid = self.next_tid();
                let mut message = KrpcMessage::query(tid.clone(), q);
                message.read_only = read_only;
                let bytes = message.encode();
                (tid, addr, bytes)
            })
            .collect();
        {
            let mut pending = self.shared.pending.lock().expect("pending map poisoned");
            for (i, (tid, _, _)) in encoded.iter().enumerate() {
                pending.insert(tid.clone(), (tx.clone(), i));
            }
        }
        drop(tx);

        for _attempt in 0..=self.shared.retries {
            for (i, (_, addr, bytes)) in encoded.iter().enumerate() {
                if results[i].is_none() {
                    if let Err(e) = self.shared.socket.send_to(bytes, *addr) {
                        debug!("send to {addr} failed: {e}");
                    }
                }
            }
            let deadline = Instant::now() + self.shared.timeout;
            while results.iter().any(Option::is_none) {
                let left = deadline.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    break;
                }
                let Ok((i, from, msg)) = rx.recv_timeout(left) else {
                    break;
                };
                // Replies must come from where the query went.
                if results[i].is_some() || from != encoded[i].1 {
                    continue;
                }
                results[i] = Some(match msg.body {
                    Body::Response(r) => Ok(r),
                    Body::Error(e) => Err(RpcError::Remote(e)),
                    Body::Query(_) => Err(RpcError::Unexpected("query in reply slot")),
                });
            }
            if results.iter().all(Option::is_some) {
                break;
            }
        }

        let mut pending = self.shared.pending.lock().expect("pending map poisoned");
        for (tid, _, _) in &encoded {
            pending.remove(tid);
        }
        results
            .into_iter()
            .map(|r| r.unwrap_or(Err(RpcError::Timeout)))
            .collect()
    }
}
