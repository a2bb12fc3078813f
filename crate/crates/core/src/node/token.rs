use std::net::SocketAddrV4;

use rand::RngCore;
use sha1::{Digest, Sha1};

use crate::wire::compact_addr;

pub const TOKEN_ROTATION_SECS: u64 = 5 * 60;
pub const TOKEN_LEN: usize = 8;

/// Two rotating secrets. A token is the first 8 bytes of
/// `SHA1(secret ++ compact source address)`, valid while its secret is
/// either the current or the previous one.
#[derive(Debug, Clone)]
pub struct TokenState {
    current: [u8; 16],
    previous: [u8; 16],
    rotated_at: u64,
}

pub fn token_for(secret: &[u8; 16], addr: &SocketAddrV4) -> [u8; TOKEN_LEN] {
    let mut h = Sha1::new();
    h.update(secret);
    h.update(compact_addr(addr));
    let digest = h.finalize();
    let mut out = [0u8; TOKEN_LEN];
    out.copy_from_slice(&digest[..TOKEN_LEN]);
    out
}

impl TokenState {
    pub fn new<R: RngCore + ?Sized>(rng: &mut R, now: u64) -> Self {
        let mut current = [0u8; 16];
        let mut previous = [0u8; 16];
        rng.fill_bytes(&mut current);
        rng.fill_bytes(&mut previous);
        Self {
            current,
            previous,
            rotated_at: now,
        }
    }

    pub fn rotated_at(&self) -> u64 {
        self.rotated_at
    }

    pub fn rotate_if_due<R: RngCore + ?Sized>(&mut self, now: u64, rng: &mut R) {
        if now >= self.rotated_at + 2 * TOKEN_ROTATION_SECS {
            rng.fill_bytes(&mut self.previous);
            rng.fill_bytes(&mut self.current);
            self.rotated_at = now;
            return;
        }
        if now >= self.rotated_at + TOKEN_ROTATION_SECS {
            self.previous = self.current;
            rng.fill_bytes(&mut self.current);
            self.rotated_at += TOKEN_ROTATION_SECS;
        }
    }

    pub fn issue<R: RngCore + ?Sized>(&mut self, addr: &SocketAddrV4, now: u64, rng: &mut R) -> Vec<u8> {
        self.rotate_if_due(now, rng);
        token_for(&self.current, addr).to_vec()
    }

    pub fn validate<R: RngCore + ?Sized>(
        &mut self,
        token: &[u8],
        addr: &SocketAddrV4,
        now: u64,
        rng: &mut R,
    ) -> bool {
        self.rotate_if_due(now, rng);
        token == token_for(&self.current, addr) || token == token_for(&self.previous, addr)
    }
}
