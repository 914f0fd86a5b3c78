//! Dense matrix kernels. Each output row is produced by a single thread in a
//! fixed accumulation order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::real::Real;

const PAR_WORK: usize = 1 << 15;

/// `c[m×n] += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
/// With `ta`, `a` is stored `k×m`; with `tb`, `b` is stored `n×k`.
pub fn gemm<T: Real>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    let row = |i: usize, crow: &mut [T]| {
        match (ta, tb) {
            (false, false) => {
                let arow = &a[i * k..(i + 1) * k];
                for (p, &aip) in arow.iter().enumerate() {
                    if aip == T::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cj, &bj) in crow.iter_mut().zip(brow) {
                        *cj += aip * bj;
                    }
                }
            }
            (false, true) => {
                let arow = &a[i * k..(i + 1) * k];
                for (j, cj) in crow.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for (&x, &y) in arow.iter().zip(brow) {
                        acc += x * y;
                    }
                    *cj += acc;
                }
            }
            (true, false) => {
                for p in 0..k {
                    let aip = a[p * m + i];
                    if aip == T::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cj, &bj) in crow.iter_mut().zip(brow) {
                        *cj += aip * bj;
                    }
                }
            }
            (true, true) => {
                for (j, cj) in crow.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    *cj += acc;
                }
            }
        }
    };
    if m > 1 && m * n * k >= PAR_WORK {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow));
    } else {
        c.chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow));
    }
}

/// Batched [`gemm`]; matrices are consecutive blocks. `b_shared` reuses one
/// `b` for every batch entry.
#[allow(clippy::too_many_arguments)]
pub fn gemm_batched<T: Real>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    b_shared: bool,
    c: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    let (sa, sb, sc) = (m * k, k * n, m * n);
    if sc == 0 {
        return;
    }
    let one = |bi: usize, cb: &mut [T]| {
        let bb = if b_shared { b } else { &b[bi * sb..(bi + 1) * sb] };
        gemm(&a[bi * sa..(bi + 1) * sa], ta, bb, tb, cb, m, k, n);
    };
    if batch > 1 && batch * sc * k >= PAR_WORK {
        c.par_chunks_mut(sc).enumerate().for_each(|(bi, cb)| one(bi, cb));
    } else {
        c.chunks_mut(sc).enumerate().for_each(|(bi, cb)| one(bi, cb));
    }
}
