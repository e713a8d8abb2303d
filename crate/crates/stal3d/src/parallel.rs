//! A small fork-join helper that maps a function over an index range on a
//! bounded number of worker threads. Results are collected by index, so
//! downstream reductions stay deterministic regardless of scheduling.
//!
//! The `STAL3D_THREADS` environment variable caps worker parallelism.

/// Number of worker threads to use.
pub fn worker_count() -> usize {
    if let Ok(v) = std::env::var("STAL3D_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Apply `f` to every index in `0..n`, in parallel, returning results in
/// index order. `f` must be pure with respect to the index.
pub fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = worker_count().min(n.max(1));
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slot_ptr = SlotsPtr(slots.as_mut_ptr());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let f = &f;
            let next = &next;
            let slot_ptr = &slot_ptr;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let value = f(i);
                // Each index is claimed exactly once, so the write is
                // exclusive to this thread.
                unsafe {
                    *slot_ptr.0.add(i) = Some(value);
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("all indices filled")).collect()
}

struct SlotsPtr<T>(*mut Option<T>);
unsafe impl<T: Send> Sync for SlotsPtr<T> {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_index_order() {
        let out = parallel_map(100, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn respects_thread_cap() {
        std::env::set_var("STAL3D_THREADS", "2");
        assert_eq!(worker_count(), 2);
        let out = parallel_map(10, |i| i + 1);
        assert_eq!(out[9], 10);
        std::env::remove_var("STAL3D_THREADS");
    }
}
