//! Row-major matrix kernels on raw slices.
//!
//! All routines accumulate into `out` (`out += ...`), which lets callers
//! sum gradient contributions without temporaries.

use crate::scalar::Scalar;

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

/// `out[m] += a[m,k] * x[k]`
pub fn gemv<T: Scalar>(m: usize, k: usize, a: &[T], x: &[T], out: &mut [T]) {
    gemm_nt(1, k, m, x, a, out);
}

/// `out[k] += a[m,k]^T * y[m]`
pub fn gemv_t<T: Scalar>(m: usize, k: usize, a: &[T], y: &[T], out: &mut [T]) {
    gemm_nn(1, m, k, y, a, out);
}

/// `out[m,k] += y[m] x[k]^T`
pub fn ger<T: Scalar>(m: usize, k: usize, y: &[T], x: &[T], out: &mut [T]) {
    gemm_nn(m, 1, k, y, x, out);
}
