//! Seed derivation and deterministic thread fan-out.

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "ZOOMLENS_THREADS";

/// Derives an independent child seed from a master seed, a stream tag, and an
/// index. Two distinct (stream, index) pairs yield unrelated generators, so
/// per-sample work can run in any order without changing results.
pub fn child_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9)
        .wrapping_add(index);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn worker_count(items: usize) -> usize {
    let hw = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(hw);
    cap.min(hw).min(items).max(1)
}

/// Runs `f(i)` for every `i in 0..n` across worker threads and returns the
/// results in index order. Aggregation is order-independent: each result goes
/// into its own slot, so the output does not depend on scheduling.
pub fn fan_out<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if n == 0 {
        return Vec::new();
    }
    let workers = worker_count(n);
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, piece) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                let base = w * chunk;
                for (k, slot) in piece.iter_mut().enumerate() {
                    *slot = Some(f(base + k));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
}
