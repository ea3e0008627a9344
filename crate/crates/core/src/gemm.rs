//! Matrix product kernel with a fixed accumulation order.
//!
//! Every output element is produced by one fused multiply-add chain over the
//! inner index in increasing order, starting from `0.0` (or from the existing
//! output value when accumulating):
//!
//! ```text
//! acc = c[i][j] or 0.0
//! for l in 0..k { acc = fma(a[i][l], b[l][j], acc) }
//! c[i][j] = acc
//! ```
//!
//! FMA is correctly rounded, so the SIMD paths and the scalar fallback give
//! bit-identical results on every machine, and a plain loop with
//! `f64::mul_add` reproduces them exactly.

/// Strided read-only matrix view over a slice.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> Mat<'a> {
    pub(crate) fn new(data: &'a [f64], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * rs + (cols - 1) * cs;
            assert!(
                last < data.len(),
                "view {rows}x{cols} ({rs},{cs}) exceeds {}",
                data.len()
            );
        }
        Mat {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    /// Contiguous row-major `rows × cols` view.
    pub(crate) fn rm(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self::new(data, rows, cols, cols, 1)
    }

    pub(crate) fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.rs + j * self.cs]
    }
}

/// `c[i][j] (+)= Σ_l a[i][l]·b[l][j]`; `c` is row-major with row stride `ldc`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, c: &mut [f64], ldc: usize, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(ldc >= n && (m - 1) * ldc + n <= c.len(), "gemm output too small");

    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: feature detected at runtime; the views were bounds
            // checked on construction and `c` above.
            unsafe { blocked(a, b, m, k, n, c, ldc, accumulate, 8, 16, x86::tile_avx512) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: as above.
            unsafe { blocked(a, b, m, k, n, c, ldc, accumulate, 6, 8, x86::tile_avx2) };
            return;
        }
    }
    gemm_scalar(a, b, m, k, n, c, ldc, accumulate);
}

/// Block sizes. Partial sums are parked in `c` between inner-dimension
/// blocks, which leaves every FMA chain unchanged.
const KC: usize = 256;
const MC: usize = 96;
const NC: usize = 512;

/// `tile(kc, a, ars, acs, b, c, ldc, rows, cols, accumulate)` updates a
/// `rows × cols` corner of `c` from an `mr`-row sliver of `a` (strided) and
/// an `nr`-column panel of `b` packed with the inner index outermost.
#[cfg(target_arch = "x86_64")]
type Tile = unsafe fn(usize, *const f64, usize, usize, *const f64, *mut f64, usize, usize, usize, bool);

#[allow(clippy::too_many_arguments)]
#[cfg(target_arch = "x86_64")]
unsafe fn blocked(
    a: Mat<'_>,
    b: Mat<'_>,
    m: usize,
    k: usize,
    n: usize,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
    mr: usize,
    nr: usize,
    tile: Tile,
) {
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                c[i * ldc..i * ldc + n].fill(0.0);
            }
        }
        return;
    }
    let cp = c.as_mut_ptr();
    let kcap = KC.min(k);
    let mut bpack = vec![0.0; kcap * NC.min(n).div_ceil(nr) * nr];
    let mut apack = vec![0.0; kcap * MC.min(m).div_ceil(mr) * mr];
    for jc in (0..n).step_by(NC) {
        let nc = (n - jc).min(NC);
        for pc in (0..k).step_by(KC) {
            let kc = (k - pc).min(KC);
            for (p, panel) in bpack.chunks_exact_mut(kc * nr).take(nc.div_ceil(nr)).enumerate() {
                let j0 = jc + p * nr;
                pack(b, pc, kc, j0, (jc + nc - j0).min(nr), nr, panel, true);
            }
            let acc = accumulate || pc > 0;
            for ic in (0..m).step_by(MC) {
                let mcb = (m - ic).min(MC);
                // With a single column panel there is nothing to reuse, so
                // whole slivers are read in place and only the ragged edge
                // is copied.
                let direct = nc <= nr;
                for (s, sliver) in apack.chunks_exact_mut(kc * mr).take(mcb.div_ceil(mr)).enumerate() {
                    let i0 = ic + s * mr;
                    let rows = (ic + mcb - i0).min(mr);
                    if direct && rows == mr {
                        continue;
                    }
                    pack(a, i0, rows, pc, kc, mr, sliver, false);
                }
                for p in 0..nc.div_ceil(nr) {
                    let j0 = jc + p * nr;
                    let cols = (jc + nc - j0).min(nr);
                    for s in 0..mcb.div_ceil(mr) {
                        let i0 = ic + s * mr;
                        let rows = (ic + mcb - i0).min(mr);
                        let (ap, ars, acs) = if direct && rows == mr {
                            (a.data.as_ptr().add(i0 * a.rs + pc * a.cs), a.rs, a.cs)
                        } else {
                            (apack.as_ptr().add(s * kc * mr), 1, mr)
                        };
                        tile(
                            kc,
                            ap,
                            ars,
                            acs,
                            bpack.as_ptr().add(p * kc * nr),
                            cp.add(i0 * ldc + j0),
                            ldc,
                            rows,
                            cols,
                            acc,
                        );
                    }
                }
            }
        }
    }
}

/// Copies a `rows × cols` block starting at `(r0, c0)` into `out`, zero
/// padded to `width`. Row-major blocks (`by_rows`) fill `out` one row of
/// `width` at a time; otherwise one column of `width` at a time.
#[allow(clippy::too_many_arguments)]
#[cfg(target_arch = "x86_64")]
fn pack(m: Mat<'_>, r0: usize, rows: usize, c0: usize, cols: usize, width: usize, out: &mut [f64], by_rows: bool) {
    let base = &m.data[r0 * m.rs + c0 * m.cs..];
    if by_rows {
        for (l, dst) in out.chunks_exact_mut(width).take(rows).enumerate() {
            let row = &base[l * m.rs..];
            for (q, v) in dst.iter_mut().enumerate() {
                *v = if q < cols { row[q * m.cs] } else { 0.0 };
            }
        }
    } else {
        for (l, dst) in out.chunks_exact_mut(width).take(cols).enumerate() {
            let col = &base[l * m.cs..];
            for (r, v) in dst.iter_mut().enumerate() {
                *v = if r < rows { col[r * m.rs] } else { 0.0 };
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_scalar(
    a: Mat<'_>,
    b: Mat<'_>,
    m: usize,
    k: usize,
    n: usize,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = if accumulate { c[i * ldc + j] } else { 0.0 };
            for l in 0..k {
                acc = a.get(i, l).mul_add(b.get(l, j), acc);
            }
            c[i * ldc + j] = acc;
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn tile_avx512(
        k: usize,
        a: *const f64,
        ars: usize,
        acs: usize,
        b: *const f64,
        c: *mut f64,
        ldc: usize,
        rows: usize,
        cols: usize,
        accumulate: bool,
    ) {
        const R: usize = 8;
        let m0: __mmask8 = if cols >= 8 { 0xff } else { ((1u16 << cols) - 1) as u8 };
        let m1: __mmask8 = if cols <= 8 { 0 } else { ((1u16 << (cols - 8)) - 1) as u8 };
        let mut acc0 = [_mm512_setzero_pd(); R];
        let mut acc1 = [_mm512_setzero_pd(); R];
        if accumulate {
            for r in 0..rows {
                acc0[r] = _mm512_maskz_loadu_pd(m0, c.add(r * ldc));
                acc1[r] = _mm512_maskz_loadu_pd(m1, c.wrapping_add(r * ldc + 8));
            }
        }
        for l in 0..k {
            let b0 = _mm512_loadu_pd(b.add(l * 16));
            let b1 = _mm512_loadu_pd(b.add(l * 16 + 8));
            for r in 0..R {
                let av = _mm512_set1_pd(*a.add(r * ars + l * acs));
                acc0[r] = _mm512_fmadd_pd(av, b0, acc0[r]);
                acc1[r] = _mm512_fmadd_pd(av, b1, acc1[r]);
            }
        }
        for r in 0..rows {
            _mm512_mask_storeu_pd(c.add(r * ldc), m0, acc0[r]);
            _mm512_mask_storeu_pd(c.wrapping_add(r * ldc + 8), m1, acc1[r]);
        }
    }

    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn tile_avx2(
        k: usize,
        a: *const f64,
        ars: usize,
        acs: usize,
        b: *const f64,
        c: *mut f64,
        ldc: usize,
        rows: usize,
        cols: usize,
        accumulate: bool,
    ) {
        const R: usize = 6;
        let lane = |q: usize| -> i64 { if q < cols { -1 } else { 0 } };
        let m0 = _mm256_set_epi64x(lane(3), lane(2), lane(1), lane(0));
        let m1 = _mm256_set_epi64x(lane(7), lane(6), lane(5), lane(4));
        let mut acc0 = [_mm256_setzero_pd(); R];
        let mut acc1 = [_mm256_setzero_pd(); R];
        if accumulate {
            for r in 0..rows {
                acc0[r] = _mm256_maskload_pd(c.add(r * ldc), m0);
                acc1[r] = _mm256_maskload_pd(c.wrapping_add(r * ldc + 4), m1);
            }
        }
        for l in 0..k {
            let b0 = _mm256_loadu_pd(b.add(l * 8));
            let b1 = _mm256_loadu_pd(b.add(l * 8 + 4));
            for r in 0..R {
                let av = _mm256_set1_pd(*a.add(r * ars + l * acs));
                acc0[r] = _mm256_fmadd_pd(av, b0, acc0[r]);
                acc1[r] = _mm256_fmadd_pd(av, b1, acc1[r]);
            }
        }
        for r in 0..rows {
            _mm256_maskstore_pd(c.add(r * ldc), m0, acc0[r]);
            _mm256_maskstore_pd(c.wrapping_add(r * ldc + 4), m1, acc1[r]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle(a: &[f64], ars: usize, acs: usize, b: &[f64], brs: usize, bcs: usize, m: usize, k: usize, n: usize, c0: &[f64]) -> Vec<f64> {
        let mut out = c0.to_vec();
        for i in 0..m {
            for j in 0..n {
                let mut acc = out[i * n + j];
                for l in 0..k {
                    acc = a[i * ars + l * acs].mul_add(b[l * brs + j * bcs], acc);
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn all_paths_match_fma_chain_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (8, 7, 16), (9, 13, 17), (17, 3, 33), (13, 40, 5), (1, 64, 512), (20, 0, 3), (11, 600, 19), (101, 300, 530)] {
            let a: Vec<f64> = (0..m * k.max(1)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k.max(1) * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c0: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            for acc in [false, true] {
                let start = if acc { c0.clone() } else { vec![0.0; m * n] };
                let expect = oracle(&a, k, 1, &b, n, 1, m, k, n, &start);
                let mut c = c0.clone();
                gemm(Mat::rm(&a, m, k), Mat::rm(&b, k, n), &mut c, n, acc);
                assert_eq!(c, expect, "{m}x{k}x{n} acc={acc}");
                let mut c = c0.clone();
                gemm_scalar(Mat::rm(&a, m, k), Mat::rm(&b, k, n), m, k, n, &mut c, n, acc);
                assert_eq!(c, expect, "scalar {m}x{k}x{n}");
            }
            // transposed operands: a stored k×m, b stored n×k
            if k > 0 {
                let at: Vec<f64> = (0..k * m).map(|_| rng.random_range(-1.0..1.0)).collect();
                let bt: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
                let expect = oracle(&at, 1, m, &bt, 1, k, m, k, n, &vec![0.0; m * n]);
                let mut c = vec![7.0; m * n];
                gemm(Mat::rm(&at, k, m).t(), Mat::rm(&bt, n, k).t(), &mut c, n, false);
                assert_eq!(c, expect);
            }
        }
    }

    #[test]
    fn strided_output_leaves_gaps_untouched() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = [9.0; 6];
        gemm(Mat::rm(&a, 2, 2), Mat::rm(&b, 2, 2), &mut c, 3, false);
        assert_eq!(c, [1.0, 2.0, 9.0, 3.0, 4.0, 9.0]);
    }
}
