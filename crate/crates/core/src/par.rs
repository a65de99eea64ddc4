//! Data-parallel helpers.
//!
//! Every kernel in the crate partitions its *output* into disjoint chunks and
//! computes each chunk with a fixed, sequential accumulation order. The
//! parallel and sequential paths therefore produce bitwise-identical results.
//!
//! With the `parallel` feature disabled everything runs on the calling thread.
//! With it enabled, [`set_parallel`] toggles the rayon path at runtime (used by
//! the benches to compare both paths in one binary).

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Enable or disable the rayon path at runtime. No-op without the `parallel` feature.
pub fn set_parallel(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

/// Whether kernels currently dispatch to rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Below this many scalar outputs the sequential path is always taken.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_LEN: usize = 2048;

/// Calls `f(chunk_index, chunk)` for every `chunk_len`-sized chunk of `out`.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && out.len() >= MIN_PARALLEL_LEN && out.len() > chunk_len {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    out.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Maps `0..n` through `f`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Calls `f(row, segment)` for each row segment of a CSR-style value buffer,
/// where row `i` owns `out[offsets[i]..offsets[i + 1]]`.
pub fn for_each_segment<T, F>(out: &mut [T], offsets: &[usize], f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let rows = offsets.len().saturating_sub(1);
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && out.len() >= MIN_PARALLEL_LEN && rows > 1 {
            use rayon::prelude::*;
            // Group consecutive rows so each task owns a reasonably large slice.
            let target = (out.len() / (4 * rayon::current_num_threads().max(1))).max(256);
            let mut groups: Vec<(usize, usize, &mut [T])> = Vec::new();
            let mut rest = out;
            let mut start = 0;
            while start < rows {
                let mut end = start + 1;
                while end < rows && offsets[end] - offsets[start] < target {
                    end += 1;
                }
                let len = offsets[end] - offsets[start];
                let (head, tail) = std::mem::take(&mut rest).split_at_mut(len);
                groups.push((start, end, head));
                rest = tail;
                start = end;
            }
            groups.into_par_iter().for_each(|(r0, r1, seg)| {
                let base = offsets[r0];
                for r in r0..r1 {
                    f(r, &mut seg[offsets[r] - base..offsets[r + 1] - base]);
                }
            });
            return;
        }
    }
    let mut rest = out;
    for r in 0..rows {
        let len = offsets[r + 1] - offsets[r];
        let (head, tail) = std::mem::take(&mut rest).split_at_mut(len);
        f(r, head);
        rest = tail;
    }
}
