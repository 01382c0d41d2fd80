//! Deterministic random substreams.
//!
//! Every Monte Carlo routine takes an explicit seed. Work is split into
//! fixed-size chunks and chunk `i` draws from ChaCha stream `i` of the seed, so
//! results do not depend on how many rayon workers execute the chunks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub type StreamRng = ChaCha8Rng;

/// Values generated per substream by [`generate`].
pub const CHUNK: usize = 8192;

pub fn substream(seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Produces `n` values, filling chunk `i` from `substream(seed, i)`.
pub fn generate<T, F>(n: usize, seed: u64, draw: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut StreamRng) -> T + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let parts: Vec<Vec<T>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = CHUNK.min(n - c * CHUNK);
            let mut rng = substream(seed, c as u64);
            (0..len).map(|_| draw(&mut rng)).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p);
    }
    out
}

/// Sums per-item contributions over `n` items where item `i` is handed its
/// own index. Used for simulations that need per-item substreams.
pub fn fold_indexed<A, F, M>(n: u64, block: u64, make: M, step: F) -> A
where
    A: Send + Default + std::ops::AddAssign,
    M: Fn() -> A + Sync,
    F: Fn(&mut A, u64) + Sync,
{
    let blocks = n.div_ceil(block);
    let partials: Vec<A> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = make();
            let start = b * block;
            let end = (start + block).min(n);
            for i in start..end {
                step(&mut acc, i);
            }
            acc
        })
        .collect();
    let mut total = A::default();
    for p in partials {
        total += p;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn independent_of_worker_count() {
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| generate(3 * CHUNK + 17, 99, |r| r.random::<f64>()))
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn streams_differ() {
        let a: u64 = substream(1, 0).random();
        let b: u64 = substream(1, 1).random();
        assert_ne!(a, b);
    }
}
