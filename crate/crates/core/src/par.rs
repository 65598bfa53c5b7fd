//! Optional data-parallel execution of kernels.
//!
//! Kernels split their output into disjoint chunks (one per output plane or
//! row) and hand them to [`for_each_chunk`]. Every chunk is computed with the
//! same sequential inner loop whichever worker runs it, so results are
//! bit-identical to single-threaded execution.
//!
//! Dispatch is decided per calling thread: kernels go parallel only when
//! they run on a worker of a pool entered through [`with_threads`]. Other
//! threads, including concurrent callers, stay sequential, which keeps the
//! thread-local operation counter complete for them. Without the
//! `parallel` feature everything runs sequentially.

/// Whether kernels called on this thread dispatch chunks to a rayon pool.
pub fn enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::current_thread_index().is_some()
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Runs `f` with `threads` workers. `threads <= 1` runs `f` on the calling
/// thread.
#[cfg(feature = "parallel")]
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads <= 1 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        // Pool creation only fails on resource exhaustion; fall back to serial.
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<R: Send>(_threads: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}

/// Applies `f(chunk_index, chunk)` to consecutive `chunk_len`-sized pieces of `out`.
pub(crate) fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 || out.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if enabled() {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    out.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_output() {
        let mut v = vec![0usize; 10];
        for_each_chunk(&mut v, 3, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v, [0, 0, 0, 1, 1, 1, 2, 2, 2, 3]);
    }

    #[test]
    fn scoped_parallel_matches_serial() {
        let serial = {
            let mut v = vec![0u64; 1000];
            for_each_chunk(&mut v, 7, |i, c| c.iter_mut().for_each(|x| *x = i as u64 * 3));
            v
        };
        let par = with_threads(4, || {
            let mut v = vec![0u64; 1000];
            for_each_chunk(&mut v, 7, |i, c| c.iter_mut().for_each(|x| *x = i as u64 * 3));
            v
        });
        assert_eq!(serial, par);
    }

    #[test]
    fn dispatch_is_per_thread() {
        assert!(!enabled());
        let inside = with_threads(2, enabled);
        assert_eq!(inside, cfg!(feature = "parallel"));
        assert!(!enabled());
    }
}
