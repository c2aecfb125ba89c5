//! Bounded fan-out over per-candidate work.
//!
//! Workers pull the next unclaimed index from a shared counter, so at most
//! `limit` items are in flight; results are reassembled by input index,
//! which makes the output independent of completion order and of the
//! limit itself.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::Result;

/// Apply `work` to every item with at most `limit` concurrent calls.
/// The output preserves input order.
pub(crate) fn bounded_map<T, R, F>(items: &[T], limit: usize, work: F) -> Vec<Result<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
{
    if items.is_empty() {
        return Vec::new();
    }
    let workers = limit.max(1).min(items.len());
    if workers == 1 {
        return items
            .iter()
            .enumerate()
            .map(|(index, item)| work(index, item))
            .collect();
    }

    let next = AtomicUsize::new(0);
    let collected: Mutex<Vec<(usize, Result<R>)>> = Mutex::new(Vec::with_capacity(items.len()));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::Relaxed);
                if index >= items.len() {
                    break;
                }
                let outcome = work(index, &items[index]);
                collected.lock().expect("fan-out lock").push((index, outcome));
            });
        }
    });

    let mut pairs = collected.into_inner().expect("fan-out lock");
    pairs.sort_by_key(|(index, _)| *index);
    pairs.into_iter().map(|(_, outcome)| outcome).collect()
}
