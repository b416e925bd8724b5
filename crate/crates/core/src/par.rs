//! Data-parallel helpers. With the `parallel` feature (default) the heavy
//! scans fan out over rayon; without it everything runs sequentially.
//! Callers must keep per-item work independent so both paths produce
//! bit-identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Candidate counts below this are scanned sequentially; rayon overhead
/// dominates for small views.
pub const PARALLEL_THRESHOLD: usize = 4096;

/// Size the global rayon pool. `0` keeps the library default. Calling this
/// more than once only takes effect the first time; later calls are ignored.
#[cfg(feature = "parallel")]
pub fn configure_threads(n: usize) {
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(n: usize) {
    if n > 1 {
        log::warn!("built without the `parallel` feature; --threads {n} ignored");
    }
}

/// Order-preserving map. Runs in parallel when the feature is on and the
/// input is at least `min_len`.
pub fn map_threshold<T, U, F>(items: &[T], min_len: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if items.len() >= min_len {
            return items.par_iter().map(f).collect();
        }
    }
    let _ = min_len;
    items.iter().map(f).collect()
}

/// Order-preserving fallible map; first error wins (same error either path
/// because per-item results are position-stable).
pub fn try_map_threshold<T, U, E, F>(items: &[T], min_len: usize, f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if items.len() >= min_len {
            return items.par_iter().map(f).collect();
        }
    }
    let _ = min_len;
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<usize> = (0..10_000).collect();
        let out = map_threshold(&items, 0, |&i| i * 2);
        assert!(out.iter().enumerate().all(|(i, &v)| v == i * 2));
    }

    #[test]
    fn try_map_propagates_errors() {
        let items: Vec<usize> = (0..100).collect();
        let res: Result<Vec<usize>, String> =
            try_map_threshold(&items, 0, |&i| if i == 42 { Err("boom".into()) } else { Ok(i) });
        assert_eq!(res.unwrap_err(), "boom");
    }
}
