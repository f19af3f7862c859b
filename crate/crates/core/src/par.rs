//! Parallel dispatch helpers.
//!
//! The `parallel` feature routes row-parallel kernels through rayon; without
//! it everything runs sequentially. Both paths produce bit-identical output:
//! each output row is written by exactly one task and the per-row reduction
//! order is the same in either mode, so the flag only changes scheduling.

/// Apply `f(row_index, row)` to every `row_len`-sized chunk of `out`.
#[inline]
pub fn for_each_row<F>(out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(row_len > 0 && out.len().is_multiple_of(row_len));
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// Sequential twin of [`for_each_row`], always available so benches can
/// compare the two schedulers within one build.
#[inline]
pub fn for_each_row_seq<F>(out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    debug_assert!(row_len > 0 && out.len().is_multiple_of(row_len));
    out.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
}
