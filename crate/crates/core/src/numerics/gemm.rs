//! Single-precision GEMM kernels tuned for the skinny shapes of video
//! convolutions (few output channels, many output positions), plus the
//! row-list GEMMs behind implicit (unfold-free) convolution.
//!
//! The AVX-512 path is used when the CPU reports AVX-512F; otherwise callers
//! fall back to portable code. Reduction order is fixed, so results are
//! deterministic on a given machine.

use std::any::TypeId;

#[cfg(target_arch = "x86_64")]
use std::arch::x86_64::*;

use super::tensor::{MatRef, Scalar};

/// Whether the AVX-512 path can run on this CPU.
pub fn fast_path_available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        use std::sync::OnceLock;
        static AVAILABLE: OnceLock<bool> = OnceLock::new();
        *AVAILABLE.get_or_init(|| {
            std::env::var_os("MAVR_NO_SIMD").is_none() && is_x86_feature_detected!("avx512f")
        })
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `c[m,n] (+)= Σ_k a[m,k]·b[k,n]` with `a` addressed through strides and `b`
/// row-major. Returns false when the fast path is unavailable.
#[allow(clippy::too_many_arguments)]
pub fn sgemm_nn(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    ldb: usize,
    c: &mut [f32],
    ldc: usize,
    accumulate: bool,
) -> bool {
    let rows: Vec<usize> = (0..k).map(|kk| kk * ldb).collect();
    sgemm_nn_rows(m, n, a, rsa, csa, b, &rows, c, ldc, accumulate)
}

/// As [`sgemm_nn`], with row `kk` of `b` starting at `b[b_rows[kk]]`.
#[allow(clippy::too_many_arguments)]
pub fn sgemm_nn_rows(
    m: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    b_rows: &[usize],
    c: &mut [f32],
    ldc: usize,
    accumulate: bool,
) -> bool {
    let k = b_rows.len();
    if !fast_path_available() || m == 0 || n == 0 || k == 0 {
        return false;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(b_rows.iter().all(|&r| r + n <= b.len()));
    assert!(ldc >= n && c.len() >= (m - 1) * ldc + n);
    #[cfg(target_arch = "x86_64")]
    // SAFETY: feature checked above; indices bounded by the asserts.
    unsafe {
        nn_avx512(m, n, a.as_ptr(), rsa, csa, b.as_ptr(), b_rows, c.as_mut_ptr(), ldc, accumulate);
    }
    #[cfg(not(target_arch = "x86_64"))]
    let _ = accumulate;
    true
}

const SHORT_K: usize = 128;

/// `c[m,n] (+)= Σ_k a[m,k]·b[n,k]`, both operands row-major along `k`.
#[allow(clippy::too_many_arguments)]
pub fn sgemm_nt(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    lda: usize,
    b: &[f32],
    ldb: usize,
    c: &mut [f32],
    ldc: usize,
    accumulate: bool,
) -> bool {
    let rows: Vec<usize> = (0..n).map(|j| j * ldb).collect();
    sgemm_nt_rows(m, k, a, lda, b, &rows, c, ldc, accumulate)
}

/// As [`sgemm_nt`], with row `j` of `b` starting at `b[b_rows[j]]`.
#[allow(clippy::too_many_arguments)]
pub fn sgemm_nt_rows(
    m: usize,
    k: usize,
    a: &[f32],
    lda: usize,
    b: &[f32],
    b_rows: &[usize],
    c: &mut [f32],
    ldc: usize,
    accumulate: bool,
) -> bool {
    let n = b_rows.len();
    if !fast_path_available() || m == 0 || n == 0 || k == 0 {
        return false;
    }
    assert!(lda >= k && a.len() >= (m - 1) * lda + k);
    assert!(b_rows.iter().all(|&r| r + k <= b.len()));
    assert!(ldc >= n && c.len() >= (m - 1) * ldc + n);
    if k <= SHORT_K {
        // short reductions run faster as NN on a transposed copy
        let mut bt = vec![0f32; k * n];
        for (j, &r) in b_rows.iter().enumerate() {
            for (kk, &v) in b[r..r + k].iter().enumerate() {
                bt[kk * n + j] = v;
            }
        }
        let rows: Vec<usize> = (0..k).map(|kk| kk * n).collect();
        return sgemm_nn_rows(m, n, a, lda, 1, &bt, &rows, c, ldc, accumulate);
    }
    #[cfg(target_arch = "x86_64")]
    // SAFETY: feature checked above; indices bounded by the asserts.
    unsafe {
        nt_avx512(m, k, a.as_ptr(), lda, b.as_ptr(), b_rows, c.as_mut_ptr(), ldc, accumulate);
    }
    true
}

fn as_f32<T: Scalar>(x: &[T]) -> Option<&[f32]> {
    // SAFETY: T is f32 exactly when the type ids agree.
    (TypeId::of::<T>() == TypeId::of::<f32>()).then(|| unsafe { &*(x as *const [T] as *const [f32]) })
}

fn as_f32_mut<T: Scalar>(x: &mut [T]) -> Option<&mut [f32]> {
    // SAFETY: T is f32 exactly when the type ids agree.
    (TypeId::of::<T>() == TypeId::of::<f32>()).then(|| unsafe { &mut *(x as *mut [T] as *mut [f32]) })
}

/// `c[m,n] (+)= Σ_kk a[m,kk]·b[b_rows[kk] + n]`, for any scalar type.
#[allow(clippy::too_many_arguments)]
pub fn gemm_nn_rows<T: Scalar>(m: usize, n: usize, a: MatRef<T>, b: &[T], b_rows: &[usize], c: &mut [T], ldc: usize, accumulate: bool) {
    let (rsa, csa) = if a.t { (1, a.ld) } else { (a.ld, 1) };
    if let (Some(a32), Some(b32)) = (as_f32(a.data), as_f32(b)) {
        let c32 = as_f32_mut(c).expect("same scalar type");
        if !sgemm_nn_rows(m, n, a32, rsa, csa, b32, b_rows, c32, ldc, accumulate) {
            portable_nn_rows(m, n, a32, rsa, csa, b32, b_rows, c32, ldc, accumulate);
        }
        return;
    }
    portable_nn_rows(m, n, a.data, rsa, csa, b, b_rows, c, ldc, accumulate)
}

/// `c[m,n] (+)= Σ_kk a[m,kk]·b[b_rows[n] + kk]`, for any scalar type.
#[allow(clippy::too_many_arguments)]
pub fn gemm_nt_rows<T: Scalar>(m: usize, k: usize, a: &[T], lda: usize, b: &[T], b_rows: &[usize], c: &mut [T], ldc: usize, accumulate: bool) {
    if let (Some(a32), Some(b32)) = (as_f32(a), as_f32(b)) {
        let c32 = as_f32_mut(c).expect("same scalar type");
        if sgemm_nt_rows(m, k, a32, lda, b32, b_rows, c32, ldc, accumulate) {
            return;
        }
    }
    for i in 0..m {
        let arow = &a[i * lda..i * lda + k];
        for (j, &r) in b_rows.iter().enumerate() {
            let mut s = T::ZERO;
            for (&x, &y) in arow.iter().zip(&b[r..r + k]) {
                s += x * y;
            }
            let dst = &mut c[i * ldc + j];
            *dst = if accumulate { *dst + s } else { s };
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn portable_nn_rows<T: Scalar>(
    m: usize,
    n: usize,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    b_rows: &[usize],
    c: &mut [T],
    ldc: usize,
    accumulate: bool,
) {
    for i in 0..m {
        let crow = &mut c[i * ldc..i * ldc + n];
        if !accumulate {
            crow.fill(T::ZERO);
        }
        for (kk, &r) in b_rows.iter().enumerate() {
            let av = a[i * rsa + kk * csa];
            for (d, &v) in crow.iter_mut().zip(&b[r..r + n]) {
                *d += av * v;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[inline]
fn lane_mask(width: usize) -> u16 {
    if width >= 16 {
        0xffff
    } else {
        ((1u32 << width) - 1) as u16
    }
}

#[cfg(target_arch = "x86_64")]
const NB: usize = 32;

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[allow(clippy::too_many_arguments)]
unsafe fn nn_avx512(
    m: usize,
    n: usize,
    a: *const f32,
    rsa: usize,
    csa: usize,
    b: *const f32,
    b_rows: &[usize],
    c: *mut f32,
    ldc: usize,
    accumulate: bool,
) {
    let k = b_rows.len();
    let mut panel = vec![0.0f32; k * NB];
    let mut j0 = 0;
    while j0 < n {
        let width = (n - j0).min(NB);
        let m0 = lane_mask(width);
        let m1 = lane_mask(width.saturating_sub(16));
        // contiguous copy of the k×32 column panel avoids cache-set conflicts
        // between rows of b that sit a power of two apart
        for (kk, &r) in b_rows.iter().enumerate() {
            std::ptr::copy_nonoverlapping(b.add(r + j0), panel.as_mut_ptr().add(kk * NB), width);
        }
        let mut i0 = 0;
        while i0 < m {
            let rows = (m - i0).min(8);
            let args = NnTile {
                k,
                ldc,
                a: a.add(i0 * rsa),
                rsa,
                csa,
                b: panel.as_ptr(),
                c: c.add(i0 * ldc + j0),
                m0,
                m1,
                accumulate,
            };
            match rows {
                8 => nn_tile::<8>(&args),
                7 => nn_tile::<7>(&args),
                6 => nn_tile::<6>(&args),
                5 => nn_tile::<5>(&args),
                4 => nn_tile::<4>(&args),
                3 => nn_tile::<3>(&args),
                2 => nn_tile::<2>(&args),
                _ => nn_tile::<1>(&args),
            }
            i0 += rows;
        }
        j0 += NB;
    }
}

#[cfg(target_arch = "x86_64")]
struct NnTile {
    k: usize,
    ldc: usize,
    a: *const f32,
    rsa: usize,
    csa: usize,
    b: *const f32,
    c: *mut f32,
    m0: u16,
    m1: u16,
    accumulate: bool,
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn nn_tile<const MR: usize>(t: &NnTile) {
    let mut acc0 = [_mm512_setzero_ps(); MR];
    let mut acc1 = [_mm512_setzero_ps(); MR];
    let two = t.m1 != 0;
    for kk in 0..t.k {
        let brow = t.b.add(kk * NB);
        let b0 = _mm512_loadu_ps(brow);
        let acol = t.a.add(kk * t.csa);
        if two {
            let b1 = _mm512_loadu_ps(brow.add(16));
            for r in 0..MR {
                let av = _mm512_set1_ps(*acol.add(r * t.rsa));
                acc0[r] = _mm512_fmadd_ps(av, b0, acc0[r]);
                acc1[r] = _mm512_fmadd_ps(av, b1, acc1[r]);
            }
        } else {
            for r in 0..MR {
                let av = _mm512_set1_ps(*acol.add(r * t.rsa));
                acc0[r] = _mm512_fmadd_ps(av, b0, acc0[r]);
            }
        }
    }
    for r in 0..MR {
        let crow = t.c.add(r * t.ldc);
        let mut v0 = acc0[r];
        if t.accumulate {
            v0 = _mm512_add_ps(v0, _mm512_maskz_loadu_ps(t.m0, crow));
        }
        _mm512_mask_storeu_ps(crow, t.m0, v0);
        if two {
            let mut v1 = acc1[r];
            if t.accumulate {
                v1 = _mm512_add_ps(v1, _mm512_maskz_loadu_ps(t.m1, crow.add(16)));
            }
            _mm512_mask_storeu_ps(crow.add(16), t.m1, v1);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[allow(clippy::too_many_arguments)]
unsafe fn nt_avx512(
    m: usize,
    k: usize,
    a: *const f32,
    lda: usize,
    b: *const f32,
    b_rows: &[usize],
    c: *mut f32,
    ldc: usize,
    accumulate: bool,
) {
    // k is blocked so that the rows of one block stay cache resident
    const KB: usize = 1024;
    let n = b_rows.len();
    let mut k0 = 0;
    while k0 < k {
        let kw = (k - k0).min(KB);
        let acc_here = accumulate || k0 > 0;
        let mut i0 = 0;
        while i0 < m {
            let mr = (m - i0).min(4);
            let mut j0 = 0;
            while j0 < n {
                let nr = (n - j0).min(4);
                let t = NtTile {
                    k: kw,
                    lda,
                    ldc,
                    a: a.add(i0 * lda + k0),
                    b,
                    b_rows: b_rows.as_ptr().add(j0),
                    k0,
                    c: c.add(i0 * ldc + j0),
                    accumulate: acc_here,
                };
                match (mr, nr) {
                    (4, 4) => nt_tile::<4, 4>(&t),
                    (4, 3) => nt_tile::<4, 3>(&t),
                    (4, 2) => nt_tile::<4, 2>(&t),
                    (4, _) => nt_tile::<4, 1>(&t),
                    (3, 4) => nt_tile::<3, 4>(&t),
                    (2, 4) => nt_tile::<2, 4>(&t),
                    (1, 4) => nt_tile::<1, 4>(&t),
                    (3, 3) => nt_tile::<3, 3>(&t),
                    (3, 2) => nt_tile::<3, 2>(&t),
                    (3, _) => nt_tile::<3, 1>(&t),
                    (2, 3) => nt_tile::<2, 3>(&t),
                    (2, 2) => nt_tile::<2, 2>(&t),
                    (2, _) => nt_tile::<2, 1>(&t),
                    (_, 3) => nt_tile::<1, 3>(&t),
                    (_, 2) => nt_tile::<1, 2>(&t),
                    _ => nt_tile::<1, 1>(&t),
                }
                j0 += nr;
            }
            i0 += mr;
        }
        k0 += KB;
    }
}

#[cfg(target_arch = "x86_64")]
struct NtTile {
    k: usize,
    lda: usize,
    ldc: usize,
    a: *const f32,
    b: *const f32,
    b_rows: *const usize,
    k0: usize,
    c: *mut f32,
    accumulate: bool,
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn nt_tile<const MR: usize, const NR: usize>(t: &NtTile) {
    let mut acc = [[_mm512_setzero_ps(); NR]; MR];
    let mut brow = [t.b; NR];
    for (j, p) in brow.iter_mut().enumerate() {
        *p = t.b.add(*t.b_rows.add(j) + t.k0);
    }
    let mut kk = 0;
    while kk < t.k {
        let mask = lane_mask(t.k - kk);
        let mut bv = [_mm512_setzero_ps(); NR];
        for (j, v) in bv.iter_mut().enumerate() {
            *v = _mm512_maskz_loadu_ps(mask, brow[j].add(kk));
        }
        for (r, row) in acc.iter_mut().enumerate() {
            let av = _mm512_maskz_loadu_ps(mask, t.a.add(r * t.lda + kk));
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = _mm512_fmadd_ps(av, bv[j], *cell);
            }
        }
        kk += 16;
    }
    for (r, row) in acc.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let dst = t.c.add(r * t.ldc + j);
            let s = _mm512_reduce_add_ps(*cell);
            *dst = if t.accumulate { *dst + s } else { s };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: impl Fn(usize, usize) -> f32, b: impl Fn(usize, usize) -> f32) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a(i, p) as f64 * b(p, j) as f64).sum();
            }
        }
        c
    }

    fn val(i: usize) -> f32 {
        ((i * 2654435761) % 1000) as f32 / 500.0 - 1.0
    }

    fn close(got: &[f32], want: &[f64], offset: f64) -> bool {
        got.iter().zip(want).all(|(x, y)| (*x as f64 - (y + offset)).abs() < 1e-3)
    }

    #[test]
    fn kernels_match_naive_on_ragged_shapes() {
        if !fast_path_available() {
            return;
        }
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (9, 17, 33), (16, 441, 50), (13, 40, 20), (5, 2100, 6)] {
            let a: Vec<f32> = (0..m * k).map(val).collect();
            let bt: Vec<f32> = (0..k * n).map(|i| val(i + 7)).collect();
            let mut c = vec![1.0f32; m * n];
            assert!(sgemm_nn(m, k, n, &a, k, 1, &bt, n, &mut c, n, true));
            assert!(close(&c, &naive(m, k, n, |i, p| a[i * k + p], |p, j| bt[p * n + j]), 1.0), "nn {m}x{k}x{n}");
            // a stored [k, m]
            let mut c2 = vec![0.0f32; m * n];
            assert!(sgemm_nn(m, k, n, &a, 1, m, &bt, n, &mut c2, n, false));
            assert!(close(&c2, &naive(m, k, n, |i, p| a[p * m + i], |p, j| bt[p * n + j]), 0.0));
            // b stored [n, k]
            let mut c3 = vec![0.5f32; m * n];
            assert!(sgemm_nt(m, k, n, &a, k, &bt, k, &mut c3, n, true));
            assert!(close(&c3, &naive(m, k, n, |i, p| a[i * k + p], |p, j| bt[j * k + p]), 0.5), "nt {m}x{k}x{n}");
        }
    }

    #[test]
    fn row_lists_match_portable_path() {
        let (m, n) = (5usize, 21usize);
        let b: Vec<f64> = (0..200).map(|i| val(i) as f64).collect();
        let rows = [3usize, 40, 7, 150, 0, 90];
        let a: Vec<f64> = (0..m * rows.len()).map(|i| val(i + 3) as f64).collect();
        let amat = MatRef { data: &a[..], ld: rows.len(), t: false };
        let mut c = vec![0.0f64; m * n];
        gemm_nn_rows(m, n, amat, &b, &rows, &mut c, n, false);
        let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let a32: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let mut c32 = vec![0.0f32; m * n];
        gemm_nn_rows(m, n, MatRef { data: &a32[..], ld: rows.len(), t: false }, &b32, &rows, &mut c32, n, false);
        assert!(close(&c32, &c, 0.0));
        for i in 0..m {
            for j in 0..n {
                let want: f64 = rows.iter().enumerate().map(|(kk, &r)| a[i * rows.len() + kk] * b[r + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // nt: c[i, j] = Σ_p a[i, p]·b[rows[j] + p]
        let k = 30;
        let a: Vec<f64> = (0..m * k).map(|i| val(i + 11) as f64).collect();
        let rows = [0usize, 55, 120, 9];
        let mut c = vec![0.0f64; m * rows.len()];
        gemm_nt_rows(m, k, &a, k, &b, &rows, &mut c, rows.len(), false);
        let a32: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let mut c32 = vec![0.0f32; m * rows.len()];
        gemm_nt_rows(m, k, &a32, k, &b32, &rows, &mut c32, rows.len(), false);
        assert!(close(&c32, &c, 0.0));
        for i in 0..m {
            for (j, &r) in rows.iter().enumerate() {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[r + p]).sum();
                assert!((c[i * rows.len() + j] - want).abs() < 1e-12);
            }
        }
    }
}
