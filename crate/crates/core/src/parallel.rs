//! Scoped-thread helpers for data-parallel loops.
//!
//! Work is always split over *output* units, each unit written by exactly one
//! thread with a fixed per-unit accumulation order. Results are therefore
//! bitwise identical for any thread count, including one; parallelism never
//! costs reproducibility.

/// Applies `f` to every `unit_len`-sized chunk of `out`, passing the chunk
/// index. Chunks are distributed over `threads` OS threads.
pub fn for_each_unit<F>(out: &mut [f64], unit_len: usize, threads: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    debug_assert_eq!(out.len() % unit_len, 0);
    let n_units = out.len() / unit_len;
    let threads = threads.clamp(1, n_units.max(1));
    if threads <= 1 || n_units <= 1 {
        for (u, chunk) in out.chunks_mut(unit_len).enumerate() {
            f(u, chunk);
        }
        return;
    }
    let per = n_units.div_ceil(threads);
    std::thread::scope(|scope| {
        for (c, block) in out.chunks_mut(per * unit_len).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, unit) in block.chunks_mut(unit_len).enumerate() {
                    f(c * per + j, unit);
                }
            });
        }
    });
}

/// Splits `out` into one contiguous band of whole `unit_len` chunks per
/// thread and hands each band (with its first unit index and unit count) to
/// `f`. Like [`for_each_unit`], every unit is written by exactly one thread;
/// bands let the callee hoist loops over shared operands so they stream once
/// per thread instead of once per unit.
pub fn for_each_band<F>(out: &mut [f64], unit_len: usize, threads: usize, f: F)
where
    F: Fn(usize, usize, &mut [f64]) + Sync,
{
    debug_assert_eq!(out.len() % unit_len, 0);
    let n_units = out.len() / unit_len;
    let threads = threads.clamp(1, n_units.max(1));
    if threads <= 1 {
        f(0, n_units, out);
        return;
    }
    let per = n_units.div_ceil(threads);
    std::thread::scope(|scope| {
        for (c, band) in out.chunks_mut(per * unit_len).enumerate() {
            let f = &f;
            scope.spawn(move || {
                let n = band.len() / unit_len;
                f(c * per, n, band);
            });
        }
    });
}

/// Evaluates `f(0..n)` across threads and returns the results in index
/// order. Each index is computed exactly once, so the output is independent
/// of the thread count.
pub fn map_indexed<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let per = n.div_ceil(threads);
    let mut chunks: Vec<Vec<T>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for c in 0..threads {
            let start = c * per;
            let end = ((c + 1) * per).min(n);
            if start >= end {
                break;
            }
            let f = &f;
            handles.push(scope.spawn(move || (start..end).map(f).collect::<Vec<T>>()));
        }
        for h in handles {
            chunks.push(h.join().expect("worker panicked"));
        }
    });
    chunks.into_iter().flatten().collect()
}
