//! FNV-1a 64-bit content hashing.
//!
//! Instruction and response identifiers, template hashes and the random
//! selector all derive from this hash, so its output is part of the on-disk
//! format and must stay bit-exact across implementations.

const OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental FNV-1a-64 hasher.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a64 {
    state: u64,
}

impl Default for Fnv1a64 {
    fn default() -> Self {
        Self {
            state: OFFSET_BASIS,
        }
    }
}

impl Fnv1a64 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, bytes: &[u8]) -> &mut Self {
        for &b in bytes {
            self.state ^= u64::from(b);
            self.state = self.state.wrapping_mul(PRIME);
        }
        self
    }

    pub fn finish(&self) -> u64 {
        self.state
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    Fnv1a64::new().update(bytes).finish()
}

/// Lowercase, zero-padded 16-digit hex rendering of the FNV-1a-64 hash.
pub fn content_id(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}
