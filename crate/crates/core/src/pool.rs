//! Bounded worker pool for independent replicas and sweep points.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

/// Number of workers: explicit request, else `NESSLAB_JOBS`, else available cores.
pub fn resolve_jobs(requested: Option<usize>) -> usize {
    requested
        .or_else(|| std::env::var("NESSLAB_JOBS").ok()?.parse().ok())
        .filter(|&j| j > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Apply `f` to every item on at most `jobs` threads; results keep input order.
pub fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    parallel_for_each(items, jobs, f, |i, r| out[i] = Some(r));
    out.into_iter()
        .map(|r| r.expect("every item is processed"))
        .collect()
}

/// Like [`parallel_map`], but hands each result to `sink` on the calling
/// thread as soon as it is ready (in completion order).
pub fn parallel_for_each<T, R, F, S>(items: &[T], jobs: usize, f: F, mut sink: S)
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
    S: FnMut(usize, R),
{
    let workers = jobs.max(1).min(items.len());
    if workers <= 1 {
        for (i, t) in items.iter().enumerate() {
            sink(i, f(i, t));
        }
        return;
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, R)>();
    thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, f) = (&next, &f);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                if tx.send((i, f(i, &items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, r) in rx {
            sink(i, r);
        }
    });
}
