//! Reproducible replica streams and the parallel replica runner.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Independent stream `replica` of the generator seeded with `seed`.
pub fn replica_rng(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

/// Run `f(replica, rng)` for replicas `0..reps` in parallel. Results come
/// back in replica order, so the output does not depend on the thread count.
pub fn par_replicas<T, E, F>(seed: u64, reps: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(u64, &mut ChaCha8Rng) -> Result<T, E> + Sync,
{
    (0..reps as u64)
        .into_par_iter()
        .map(|i| f(i, &mut replica_rng(seed, i)))
        .collect()
}
