//! Bounded parallel map over a slice with order-preserving results.

use std::sync::atomic::{AtomicUsize, Ordering};

/// Apply `f` to every item on at most `lanes` scoped threads. Items are pulled
/// from a shared cursor, so lanes stay busy regardless of per-item cost, and
/// results come back in input order.
pub fn parallel_map<T, R, F>(items: &[T], lanes: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let lanes = lanes.max(1).min(items.len());
    if lanes <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let cursor = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..lanes)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = cursor.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break;
                        }
                        done.push((i, f(i, &items[i])));
                    }
                    done
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker lane panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every index is processed exactly once"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::{Duration, Instant};

    #[test]
    fn preserves_order() {
        let items: Vec<u64> = (0..1000).collect();
        let out = parallel_map(&items, 7, |_, x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn empty_input() {
        let out: Vec<u8> = parallel_map(&[] as &[u8], 4, |_, x| *x);
        assert!(out.is_empty());
    }

    #[test]
    fn runs_in_parallel() {
        let items = [(); 8];
        let start = Instant::now();
        parallel_map(&items, 8, |_, _| std::thread::sleep(Duration::from_millis(50)));
        assert!(start.elapsed() < Duration::from_millis(300));
    }
}
