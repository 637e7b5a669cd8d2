//! Seed derivation and the worker pool.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a
//! master seed and a stable label, so results never depend on the order in
//! which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "ICF_THREADS";

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `master` and a label (FNV-1a, then splitmix).
pub fn derive(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(master ^ splitmix(h))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(master: u64, label: &str) -> Rng {
    rng(derive(master, label))
}

/// Worker count from `ICF_THREADS`, defaulting to 1.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Runs `f` inside a rayon pool sized by [`thread_count`].
pub fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(thread_count()).build().expect("thread pool");
    pool.install(f)
}
