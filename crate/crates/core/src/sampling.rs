//! Publicly reproducible precinct selection.
//!
//! The generator is SHA-256 in counter mode. Block `i` of a stream is
//!
//! ```text
//! SHA-256( "ballotaudit-v1"
//!        || seed (u64, big-endian)
//!        || len(contest_id) (u32, big-endian) || contest_id (UTF-8)
//!        || stage (u32, big-endian)
//!        || len(stream) (u32, big-endian) || stream (UTF-8)
//!        || i (u64, big-endian) )
//! ```
//!
//! and each 32-byte block yields four big-endian `u64` words in order. A uniform
//! integer below `n` takes words until one falls below `n * floor(2^64 / n)` and
//! returns it modulo `n`. A draw of `k` precincts sorts the eligible precincts by
//! id and runs the first `k` steps of a Fisher-Yates shuffle: at step `i` it swaps
//! position `i` with position `i + uniform(len - i)`.

use sha2::{Digest, Sha256};

use crate::contest::Contest;
use crate::error::{AuditError, Result};

const DOMAIN: &[u8] = b"ballotaudit-v1";

/// Keyed deterministic word stream.
#[derive(Debug, Clone)]
pub struct AuditRng {
    prefix: Vec<u8>,
    counter: u64,
    block: [u64; 4],
    used: usize,
}

impl AuditRng {
    pub fn new(seed: u64, contest_id: &str, stage: u32, stream: &str) -> Self {
        let mut prefix = Vec::with_capacity(DOMAIN.len() + 24 + contest_id.len() + stream.len());
        prefix.extend_from_slice(DOMAIN);
        prefix.extend_from_slice(&seed.to_be_bytes());
        prefix.extend_from_slice(&(contest_id.len() as u32).to_be_bytes());
        prefix.extend_from_slice(contest_id.as_bytes());
        prefix.extend_from_slice(&stage.to_be_bytes());
        prefix.extend_from_slice(&(stream.len() as u32).to_be_bytes());
        prefix.extend_from_slice(stream.as_bytes());
        Self {
            prefix,
            counter: 0,
            block: [0; 4],
            used: 4,
        }
    }

    /// The raw 32-byte block for counter `i`.
    pub fn block(&self, i: u64) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(&self.prefix);
        hasher.update(i.to_be_bytes());
        hasher.finalize().into()
    }

    pub fn next_u64(&mut self) -> u64 {
        if self.used == 4 {
            let bytes = self.block(self.counter);
            self.counter += 1;
            for (word, chunk) in self.block.iter_mut().zip(bytes.chunks_exact(8)) {
                *word = u64::from_be_bytes(chunk.try_into().unwrap());
            }
            self.used = 0;
        }
        let word = self.block[self.used];
        self.used += 1;
        word
    }

    /// Uniform on `0..n`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        let limit = (u64::MAX / n) * n;
        loop {
            let word = self.next_u64();
            if word < limit {
                return word % n;
            }
        }
    }
}

/// Selects `k` of `eligible` (precinct indices) uniformly without replacement, in
/// draw order. The eligible set is put in precinct-id order first so the result
/// does not depend on how the caller listed it.
pub fn draw_precincts(rng: &mut AuditRng, contest: &Contest, eligible: &[usize], k: usize) -> Result<Vec<usize>> {
    if k > eligible.len() {
        return Err(AuditError::ExhaustedPopulation {
            requested: k,
            available: eligible.len(),
        });
    }
    let mut pool = eligible.to_vec();
    pool.sort_by(|&a, &b| contest.precincts[a].id.cmp(&contest.precincts[b].id));
    for i in 0..k {
        let j = i + rng.below((pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_block_is_pinned() {
        let rng = AuditRng::new(20081104, "sausalito", 1, "");
        let mut hasher = Sha256::new();
        hasher.update(b"ballotaudit-v1");
        hasher.update(20081104u64.to_be_bytes());
        hasher.update(9u32.to_be_bytes());
        hasher.update(b"sausalito");
        hasher.update(1u32.to_be_bytes());
        hasher.update(0u32.to_be_bytes());
        hasher.update(0u64.to_be_bytes());
        let expected: [u8; 32] = hasher.finalize().into();
        assert_eq!(rng.block(0), expected);
    }

    #[test]
    fn words_come_from_consecutive_blocks() {
        let mut rng = AuditRng::new(7, "c", 2, "x");
        let b0 = rng.block(0);
        let b1 = rng.block(1);
        let words: Vec<u64> = (0..5).map(|_| rng.next_u64()).collect();
        assert_eq!(words[0], u64::from_be_bytes(b0[0..8].try_into().unwrap()));
        assert_eq!(words[3], u64::from_be_bytes(b0[24..32].try_into().unwrap()));
        assert_eq!(words[4], u64::from_be_bytes(b1[0..8].try_into().unwrap()));
    }

    #[test]
    fn keys_separate_streams() {
        let base = AuditRng::new(1, "c", 1, "").block(0);
        assert_ne!(base, AuditRng::new(2, "c", 1, "").block(0));
        assert_ne!(base, AuditRng::new(1, "d", 1, "").block(0));
        assert_ne!(base, AuditRng::new(1, "c", 2, "").block(0));
        assert_ne!(base, AuditRng::new(1, "c", 1, "a").block(0));
        // Length prefixes keep ("ab", "") and ("a", "b") apart.
        assert_ne!(
            AuditRng::new(1, "ab", 1, "").block(0),
            AuditRng::new(1, "a", 1, "b").block(0)
        );
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = AuditRng::new(3, "c", 1, "");
        for n in 1..50 {
            assert!(rng.below(n) < n);
        }
    }
}
