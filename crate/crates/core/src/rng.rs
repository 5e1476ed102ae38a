//! Deterministic random streams.
//!
//! Every replica draws from its own generator whose seed is a pure function
//! of `(master seed, stream tag, replica index)`. Nothing depends on thread
//! scheduling, so results are identical for any worker count.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

/// Generator used inside a replica.
pub type ReplicaRng = Xoshiro256PlusPlus;

/// Stable 64-bit id for a stream tag.
pub fn stream_id(tag: &str) -> u64 {
    let digest = Sha256::digest(tag.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Seed for replica `replica` of stream `tag`.
pub fn replica_seed(master: u64, tag: &str, replica: u64) -> u64 {
    let mut c = ChaCha8Rng::seed_from_u64(master);
    c.set_stream(stream_id(tag));
    c.set_word_pos(replica as u128 * 2);
    c.next_u64()
}

pub fn replica_rng(master: u64, tag: &str, replica: u64) -> ReplicaRng {
    ReplicaRng::seed_from_u64(replica_seed(master, tag, replica))
}

/// SplitMix64 finalizer, used to derive per-particle keys.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key of child `rank` of a particle with key `parent`.
#[inline]
pub fn child_key(parent: u64, rank: u32) -> u64 {
    mix64(parent ^ mix64(rank as u64 + 1))
}

/// Generator owned by one particle.
#[inline]
pub fn particle_rng(key: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(key)
}

/// Maps `f` over `0..n`, in parallel, returning results in index order.
///
/// `threads = None` uses the global rayon pool.
pub fn par_map<T, F>(n: usize, threads: Option<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    run_with_threads(threads, || (0..n).into_par_iter().map(&f).collect())
}

/// Runs `op` inside a pool with the requested number of workers.
pub fn run_with_threads<R, OP>(threads: Option<usize>, op: OP) -> R
where
    R: Send,
    OP: FnOnce() -> R + Send,
{
    match threads {
        Some(t) if t > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .expect("thread pool")
            .install(op),
        _ => op(),
    }
}
