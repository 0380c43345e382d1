//! Data-parallel helpers with a sequential fallback.
//!
//! Every parallel loop in this crate goes through these functions. Each
//! output element is computed by exactly the same sequential inner code in
//! both modes, and reductions are always performed in a fixed order, so
//! results are bitwise identical with the `parallel` feature on or off and
//! for any worker count.

/// Below this element count the parallel split overhead dominates; run the
/// loop inline.
const PAR_MIN_ELEMS: usize = 4096;

/// Apply `f(row_index, row)` to every `cols`-wide row of `data`.
#[cfg(feature = "parallel")]
pub fn rows_for_each_mut<T, F>(data: &mut [T], cols: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    if data.len() < PAR_MIN_ELEMS {
        for (i, row) in data.chunks_exact_mut(cols).enumerate() {
            f(i, row);
        }
        return;
    }
    use rayon::prelude::*;
    data.par_chunks_exact_mut(cols)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

#[cfg(not(feature = "parallel"))]
pub fn rows_for_each_mut<T, F>(data: &mut [T], cols: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    for (i, row) in data.chunks_exact_mut(cols).enumerate() {
        f(i, row);
    }
}

/// `(0..n).map(f)` collected in index order. Items run concurrently when the
/// `parallel` feature is on; output order is the index order either way.
#[cfg(feature = "parallel")]
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(100, |i| i * 3);
        assert_eq!(v[0], 0);
        assert_eq!(v[99], 297);
        assert!(v.windows(2).all(|w| w[1] == w[0] + 3));
    }

    #[test]
    fn rows_visit_every_row() {
        let mut data = vec![0u32; 8 * 16];
        rows_for_each_mut(&mut data, 16, |i, row| {
            for v in row.iter_mut() {
                *v = i as u32 + 1;
            }
        });
        for (i, row) in data.chunks(16).enumerate() {
            assert!(row.iter().all(|&v| v == i as u32 + 1));
        }
    }
}
