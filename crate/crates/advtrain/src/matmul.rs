//! Dense matrix product kernels.
//!
//! Every kernel computes `out[i][j] = sum_l a[i][l] * b[l][j]` with the sum
//! taken in ascending `l` order per output element, each step as a separate
//! IEEE multiply then add (no fused multiply-add). Because the SIMD paths
//! only vectorize across output columns, the per-element operation sequence
//! is identical in all kernels and the results are bitwise equal, which
//! keeps the product reproducible regardless of which path the dispatcher
//! picks on a given machine.
//!
//! The SIMD paths pack one column panel of `b` at a time into a contiguous
//! scratch buffer. Packing only relocates data; it never reorders the
//! arithmetic. Without it, column counts around 512 put the rows of `b` a
//! full page apart and the walk down a column misses cache on every step.

/// Reference kernel: rank-1 updates, `l` ascending per element.
pub(crate) fn matmul_scalar(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &b_lj) in out_row.iter_mut().zip(b_row) {
                *o += a_il * b_lj;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    #[cfg(target_arch = "x86_64")]
    use std::arch::x86_64::*;

    use super::matmul_scalar;

    const MR: usize = 4; // rows per register tile
    const NC: usize = 128; // column panel width

    /// Pack the column panel b[0..k][jp..jp+width] tile-major: consecutive
    /// chunks of `nr` columns, each chunk holding its k rows contiguously.
    /// `width` must be a multiple of `nr`.
    fn pack_panel(b: &[f64], k: usize, n: usize, jp: usize, width: usize, nr: usize, buf: &mut Vec<f64>) {
        buf.clear();
        buf.reserve(k * width);
        let tiles = width / nr;
        for t in 0..tiles {
            let j = jp + t * nr;
            for l in 0..k {
                buf.extend_from_slice(&b[l * n + j..l * n + j + nr]);
            }
        }
    }

    macro_rules! simd_kernel {
        ($name:ident, $feature:literal, $nr:expr, $vec:ty, $setzero:ident, $loadu:ident, $set1:ident, $mul:ident, $add:ident, $storeu:ident, $lanes:expr) => {
            /// # Safety
            /// Caller must ensure the CPU supports the target feature and
            /// that the slices have the lengths implied by (m, k, n).
            #[target_feature(enable = $feature)]
            pub(crate) unsafe fn $name(
                a: &[f64],
                b: &[f64],
                out: &mut [f64],
                m: usize,
                k: usize,
                n: usize,
            ) {
                const NR: usize = $nr;
                let mi = m - m % MR;
                let nj = n - n % NR;
                let ap = a.as_ptr();
                let op = out.as_mut_ptr();
                let mut packed: Vec<f64> = Vec::new();
                let mut jp = 0;
                while jp < nj {
                    let panel = (NC).min(nj - jp);
                    pack_panel(b, k, n, jp, panel, NR, &mut packed);
                    let pp = packed.as_ptr();
                    let mut i = 0;
                    while i < mi {
                        for t in 0..panel / NR {
                            let j = jp + t * NR;
                            let tile = pp.add(t * k * NR);
                            let mut acc = [[$setzero(); 2]; MR];
                            for l in 0..k {
                                let b0 = $loadu(tile.add(l * NR));
                                let b1 = $loadu(tile.add(l * NR + $lanes));
                                for (r, acc_r) in acc.iter_mut().enumerate() {
                                    let av = $set1(*ap.add((i + r) * k + l));
                                    acc_r[0] = $add(acc_r[0], $mul(av, b0));
                                    acc_r[1] = $add(acc_r[1], $mul(av, b1));
                                }
                            }
                            for (r, acc_r) in acc.iter().enumerate() {
                                $storeu(op.add((i + r) * n + j), acc_r[0]);
                                $storeu(op.add((i + r) * n + j + $lanes), acc_r[1]);
                            }
                        }
                        i += MR;
                    }
                    jp += panel;
                }
                finish_edges(a, b, out, m, k, n, mi, nj);
            }
        };
    }

    simd_kernel!(
        matmul_avx2,
        "avx2",
        8,
        __m256d,
        _mm256_setzero_pd,
        _mm256_loadu_pd,
        _mm256_set1_pd,
        _mm256_mul_pd,
        _mm256_add_pd,
        _mm256_storeu_pd,
        4
    );

    simd_kernel!(
        matmul_avx512,
        "avx512f",
        16,
        __m512d,
        _mm512_setzero_pd,
        _mm512_loadu_pd,
        _mm512_set1_pd,
        _mm512_mul_pd,
        _mm512_add_pd,
        _mm512_storeu_pd,
        8
    );

    /// Handle the row and column remainders with the scalar kernel. The
    /// scalar kernel uses the same per-element order, so mixing paths does
    /// not change any result bit.
    #[allow(clippy::too_many_arguments)]
    fn finish_edges(
        a: &[f64],
        b: &[f64],
        out: &mut [f64],
        m: usize,
        k: usize,
        n: usize,
        mi: usize,
        nj: usize,
    ) {
        if nj < n {
            for i in 0..mi {
                let a_row = &a[i * k..(i + 1) * k];
                let out_row = &mut out[i * n + nj..(i + 1) * n];
                for (l, &a_il) in a_row.iter().enumerate() {
                    let b_row = &b[l * n + nj..(l + 1) * n];
                    for (o, &b_lj) in out_row.iter_mut().zip(b_row) {
                        *o += a_il * b_lj;
                    }
                }
            }
        }
        if mi < m {
            matmul_scalar(&a[mi * k..], b, &mut out[mi * n..], m - mi, k, n);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kernel {
    Scalar,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

fn detect_kernel() -> Kernel {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") {
            return Kernel::Avx512;
        }
        if is_x86_feature_detected!("avx2") {
            return Kernel::Avx2;
        }
    }
    Kernel::Scalar
}

/// Multiply into `out` (must be zeroed by the caller) using the fastest
/// kernel the CPU supports. A single execution stream; no threading.
pub(crate) fn matmul_dispatch(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    use std::sync::OnceLock;
    static KERNEL: OnceLock<Kernel> = OnceLock::new();
    match KERNEL.get_or_init(detect_kernel) {
        Kernel::Scalar => matmul_scalar(a, b, out, m, k, n),
        // SAFETY: the dispatcher only selects these after runtime detection.
        #[cfg(target_arch = "x86_64")]
        Kernel::Avx2 => unsafe { x86::matmul_avx2(a, b, out, m, k, n) },
        #[cfg(target_arch = "x86_64")]
        Kernel::Avx512 => unsafe { x86::matmul_avx512(a, b, out, m, k, n) },
    }
}
