//! Deterministic data-parallel helper.
//!
//! `FEPN_THREADS` caps the worker count (0 or unset = auto). Each worker
//! computes a contiguous chunk of indices with a pure closure and the chunks
//! are concatenated in order, so the output is byte-identical regardless of
//! the thread count.

pub fn thread_count() -> usize {
    let auto = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("FEPN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(0) | None => auto,
        Some(n) => n,
    }
}

/// Map `f` over `0..n`, in parallel when worthwhile. `f` must be pure.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = thread_count().min(n.max(1));
    if workers <= 1 || n < 64 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    let mut chunks: Vec<Vec<T>> = Vec::with_capacity(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                let start = w * chunk;
                let end = ((w + 1) * chunk).min(n);
                scope.spawn(move || (start..end).map(f).collect::<Vec<T>>())
            })
            .collect();
        for h in handles {
            chunks.push(h.join().expect("worker thread panicked"));
        }
    });
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_order() {
        let seq: Vec<usize> = (0..1000).map(|i| i * i).collect();
        let par = map_indexed(1000, |i| i * i);
        assert_eq!(seq, par);
    }

    #[test]
    fn tiny_inputs_take_the_sequential_path() {
        assert_eq!(map_indexed(3, |i| i + 1), vec![1, 2, 3]);
        assert_eq!(map_indexed(0, |i| i), Vec::<usize>::new());
    }
}
