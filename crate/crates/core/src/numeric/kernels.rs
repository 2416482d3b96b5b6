//! Dense loops shared by the graph operations and the indices.
//!
//! Every output element accumulates its products in ascending inner-index
//! order regardless of how rows are blocked, so results do not depend on the
//! blocking factor or on how callers split the rows.

use alloc::vec::Vec;

use super::Real;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm_acc<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for kk in 0..k {
            let br = &b[kk * n..(kk + 1) * n];
            let (x0, x1, x2, x3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
            for j in 0..n {
                let bv = br[j];
                o0[j] = o0[j] + x0 * bv;
                o1[j] = o1[j] + x1 * bv;
                o2[j] = o2[j] + x2 * bv;
                o3[j] = o3[j] + x3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let o = &mut out[i * n..(i + 1) * n];
        let ar = &a[i * k..(i + 1) * k];
        for kk in 0..k {
            let br = &b[kk * n..(kk + 1) * n];
            let x = ar[kk];
            for j in 0..n {
                o[j] = o[j] + x * br[j];
            }
        }
        i += 1;
    }
}

/// `out[k×n] += a[m×k]ᵀ · c[m×n]`
pub fn gemm_tn_acc<F: Real>(m: usize, k: usize, n: usize, a: &[F], c: &[F], out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let cr = &c[i * n..(i + 1) * n];
        let ar = &a[i * k..(i + 1) * k];
        for kk in 0..k {
            let x = ar[kk];
            let o = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                o[j] = o[j] + x * cr[j];
            }
        }
    }
}

/// Inner product with sixteen independent lanes, reduced pairwise.
///
/// The summation order is fixed, so a given pair of slices always yields the
/// same bits. Every index in the crate scores with this function.
pub fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 16];
    let chunks = a.len() / 16;
    for c in 0..chunks {
        let x = &a[c * 16..c * 16 + 16];
        let y = &b[c * 16..c * 16 + 16];
        for l in 0..16 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut width = 16;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 16..a.len() {
        tail += a[i] * b[i];
    }
    acc[0] + tail
}

pub fn transpose<F: Real>(rows: usize, cols: usize, src: &[F]) -> Vec<F> {
    let mut out = alloc::vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn blocked_and_unblocked_rows_agree() {
        let m = 7;
        let (k, n) = (5, 3);
        let a: Vec<f32> = (0..m * k).map(|x| (x as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|x| (x as f32 * 0.11).cos()).collect();
        let mut full = vec![0.0; m * n];
        gemm_acc(m, k, n, &a, &b, &mut full);
        for i in 0..m {
            let mut one = vec![0.0; n];
            gemm_acc(1, k, n, &a[i * k..(i + 1) * k], &b, &mut one);
            assert_eq!(&full[i * n..(i + 1) * n], &one[..]);
        }
    }
}
