//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they run the same closures in a plain loop. Every helper preserves input
//! order in its output, so results never depend on the worker count.

macro_rules! if_parallel {
    ($parallel: expr, $sequential: expr) => {{
        #[cfg(feature = "parallel")]
        {
            $parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            $sequential
        }
    }};
}

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if_parallel!(
        (0..n).into_par_iter().map(f).collect(),
        (0..n).map(f).collect()
    )
}

/// Fallible variant of [`map_indexed`]; the first error in index order wins.
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    let results: Vec<Result<T, E>> = map_indexed(n, f);
    results.into_iter().collect()
}

/// Apply `f` to consecutive mutable chunks of `data` (the last may be short).
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    if_parallel!(
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c))
    )
}

/// Number of worker threads the parallel helpers will use.
pub fn workers() -> usize {
    if_parallel!(rayon::current_num_threads(), 1)
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
    fn first_error_in_index_order() {
        let r: Result<Vec<usize>, usize> =
            try_map_indexed(100, |i| if i % 30 == 29 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(29));
    }

    #[test]
    fn chunks_cover_everything() {
        let mut v = vec![0usize; 103];
        for_each_chunk_mut(&mut v, 10, |c, s| s.iter_mut().for_each(|x| *x = c));
        assert_eq!(v[0], 0);
        assert_eq!(v[102], 10);
    }
}
