//! Raw dense kernels shared by forward ops and their VJPs.

use super::Real;

/// C = A(m,k) * B(k,n), row-major.
pub(crate) fn matmul(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// C = A(m,k) * B(n,k)^T, row-major.
pub(crate) fn matmul_nt(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// C = A(p,m)^T * B(p,n), row-major.
pub(crate) fn matmul_tn(a: &[Real], b: &[Real], p: usize, m: usize, n: usize) -> Vec<Real> {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    let mut out = vec![0.0; m * n];
    for r in 0..p {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// 3x3 product C = A * B on row-major 9-slices.
pub(crate) fn mat3_mul(a: &[Real], b: &[Real], out: &mut [Real]) {
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] =
                a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
        }
    }
}

/// y = A * v for a row-major 3x3 slice and a 3-vector.
pub(crate) fn mat3_apply(a: &[Real], v: &[Real], out: &mut [Real]) {
    for i in 0..3 {
        out[i] = a[i * 3] * v[0] + a[i * 3 + 1] * v[1] + a[i * 3 + 2] * v[2];
    }
}

/// y = A^T * v for a row-major 3x3 slice and a 3-vector.
pub(crate) fn mat3_apply_t(a: &[Real], v: &[Real], out: &mut [Real]) {
    for i in 0..3 {
        out[i] = a[i] * v[0] + a[3 + i] * v[1] + a[6 + i] * v[2];
    }
}

pub(crate) fn cross3(a: &[Real], b: &[Real], out: &mut [Real]) {
    out[0] = a[1] * b[2] - a[2] * b[1];
    out[1] = a[2] * b[0] - a[0] * b[2];
    out[2] = a[0] * b[1] - a[1] * b[0];
}
