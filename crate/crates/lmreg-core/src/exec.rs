//! Execution-mode control for the data-parallel inner loops.
//!
//! Kernels parallelize over disjoint output chunks only; each chunk is
//! computed by the same sequential code regardless of thread count, so the
//! parallel and sequential paths produce bitwise identical results. The
//! runtime switch exists so benchmarks can compare both paths and so
//! `REG_DETERMINISTIC=1` can force the conservative single-threaded path.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force all kernels onto the sequential path (set from `REG_DETERMINISTIC`).
pub fn set_sequential(force: bool) {
    FORCE_SEQUENTIAL.store(force, Ordering::Relaxed);
}

/// True when kernels will run sequentially (feature off or forced).
pub fn sequential() -> bool {
    if cfg!(feature = "parallel") {
        FORCE_SEQUENTIAL.load(Ordering::Relaxed)
    } else {
        true
    }
}

/// Configure the global thread pool from `REG_THREADS`/`REG_DETERMINISTIC`.
///
/// Must be called before any parallel work; later calls are ignored by rayon.
pub fn init_from_env() {
    if std::env::var("REG_DETERMINISTIC").map(|v| v == "1").unwrap_or(false) {
        set_sequential(true);
    }
    #[cfg(feature = "parallel")]
    if let Ok(v) = std::env::var("REG_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

/// Run `body(chunk_index, chunk)` over consecutive `chunk_len` slices of `out`.
///
/// Chunks are disjoint, so the parallel path is bitwise identical to the
/// sequential one.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, body: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk_len > 0 && out.len() % chunk_len == 0);
    #[cfg(feature = "parallel")]
    if !sequential() {
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| body(i, c));
        return;
    }
    out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| body(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_loop_covers_all_chunks() {
        let mut v = vec![0usize; 12];
        for_each_chunk(&mut v, 3, |i, c| c.iter_mut().for_each(|x| *x = i));
        assert_eq!(v, [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn sequential_override_matches_parallel() {
        let run = |seq: bool| {
            set_sequential(seq);
            let mut v = vec![0f32; 64];
            for_each_chunk(&mut v, 8, |i, c| {
                for (j, x) in c.iter_mut().enumerate() {
                    *x = (i * 31 + j) as f32 * 0.25;
                }
            });
            set_sequential(false);
            v
        };
        assert_eq!(run(true), run(false));
    }
}
