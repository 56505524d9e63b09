//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch onto the rayon pool;
//! without it they run as plain sequential loops. Every helper writes each
//! output from exactly one closure call, so results are bit-identical across
//! thread counts and across the two builds.

/// Environment variable that caps internal parallelism.
pub const THREADS_ENV: &str = "BRAINVIS_FORGE_THREADS";

/// Below this many scalar multiply-adds a kernel stays on the calling thread.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Configure the global pool from `BRAINVIS_FORGE_THREADS` (or an explicit
/// override). Returns the number of worker threads in effect.
///
/// Calling this more than once is harmless; only the first call can size the
/// global pool.
pub fn init_threads(explicit: Option<usize>) -> usize {
    let requested = explicit.or_else(|| {
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
    });
    init_pool(requested)
}

#[cfg(feature = "parallel")]
fn init_pool(requested: Option<usize>) -> usize {
    if let Some(n) = requested {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            log::debug!("global rayon pool already initialised; keeping it");
        }
    }
    rayon::current_num_threads()
}

#[cfg(not(feature = "parallel"))]
fn init_pool(_requested: Option<usize>) -> usize {
    1
}

pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// `(0..n).map(f).collect()`, in parallel when enabled.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Like [`map_indexed`] but only goes parallel when `work` is large enough
/// to amortise scheduling.
pub fn map_indexed_weighted<R, F>(n: usize, work: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if work < MIN_PARALLEL_WORK || n < 2 {
        (0..n).map(f).collect()
    } else {
        map_indexed(n, f)
    }
}

/// Apply `f(chunk_index, chunk)` to consecutive `chunk_len`-sized chunks.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    if work < MIN_PARALLEL_WORK {
        data.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

/// Derive an independent, reproducible stream seed from a master seed and a
/// path of indices (record, sample, ...). SplitMix64 finaliser per step.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut s = master;
    for &p in path {
        s = splitmix(s ^ splitmix(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    s
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }

    #[test]
    fn chunks_cover_everything() {
        let mut v = vec![0usize; 100_003];
        for_each_chunk_mut(&mut v, 7, usize::MAX, |i, c| {
            for x in c.iter_mut() {
                *x = i;
            }
        });
        assert!(v.iter().enumerate().all(|(j, &x)| x == j / 7));
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, &[0, 0]);
        let b = derive_seed(1, &[0, 1]);
        let c = derive_seed(1, &[1, 0]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(1, &[0, 0]));
    }
}
