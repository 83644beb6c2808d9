//! Mirror-paired reductions.
//!
//! The dataset augmentation mirrors everything about the line x2 = 0, and
//! several invariants require that mirroring *commutes bitwise* with the
//! plant step, the cost, and the adjoint gradient. IEEE addition is
//! commutative (a + b == b + a bitwise) but not associative, so plain
//! left-to-right sums over the grid would round differently after the row
//! permutation. Every reduction here therefore pairs row j with row
//! nx−1−j: under a mirror the two partial sums swap and the accumulation
//! sequence is unchanged bit for bit.
//!
//! Cell k of an nx×nx grid sits at (i, j) = (k % nx, k / nx); j indexes x2.

/// Index of the cell mirrored about x2 = 0.
#[inline]
pub fn mirror_index(nx: usize, k: usize) -> usize {
    let i = k % nx;
    let j = k / nx;
    (nx - 1 - j) * nx + i
}

/// Sum of `f(k)` over all cells, accumulated in mirror-paired row order.
pub fn sym_sum(nx: usize, f: impl Fn(usize) -> f64) -> f64 {
    debug_assert!(nx % 2 == 0);
    let mut acc = 0.0;
    for jl in 0..nx / 2 {
        let jh = nx - 1 - jl;
        let mut lo = 0.0;
        let mut hi = 0.0;
        for i in 0..nx {
            lo += f(jl * nx + i);
            hi += f(jh * nx + i);
        }
        acc += lo + hi;
    }
    acc
}

/// Dot product of two cell vectors in mirror-paired row order.
pub fn sym_dot(nx: usize, a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), nx * nx);
    debug_assert_eq!(a.len(), b.len());
    sym_sum(nx, |k| a[k] * b[k])
}

/// Dot product over a flat buffer made of consecutive nx²-sized field
/// blocks (e.g. a stacked control trajectory), each block reduced in
/// mirror-paired order. Sign flips on mirrored blocks cancel in the
/// products, so the result is mirror-invariant bitwise.
pub fn sym_dot_blocks(nx: usize, a: &[f64], b: &[f64]) -> f64 {
    let n = nx * nx;
    debug_assert_eq!(a.len() % n, 0);
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (ab, bb) in a.chunks_exact(n).zip(b.chunks_exact(n)) {
        acc += sym_dot(nx, ab, bb);
    }
    acc
}

/// Mirrors a cell vector about x2 = 0 (row reversal).
pub fn mirror_cells(nx: usize, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(v.len(), nx * nx);
    let mut out = vec![0.0; v.len()];
    for (k, o) in out.iter_mut().enumerate() {
        *o = v[mirror_index(nx, k)];
    }
    out
}
