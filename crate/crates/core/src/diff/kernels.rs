//! Dense matrix kernels. All accumulate into `out` (`out += ...`).

/// `out[m x n] += a[m x k] * b[k x n]`
///
/// Four output rows share every load of `b`, and columns are tiled so the
/// live rows stay in L1. Each output accumulates over `p` in order with
/// separate multiplies and adds, so the wide-vector path on x86 gives the
/// same bits as the baseline one.
pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n, "gemm_nn operand sizes");
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports every feature the function is compiled for.
            unsafe { gemm_nn_avx2(a, b, out, m, k, n) };
            return;
        }
    }
    gemm_nn_body(a, b, out, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_nn_avx2(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_nn_body(a, b, out, m, k, n);
}

#[inline(always)]
fn gemm_nn_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    const TILE: usize = 256;
    let quads = m / 4 * 4;
    for j0 in (0..n).step_by(TILE) {
        let j1 = (j0 + TILE).min(n);
        for i in (0..quads).step_by(4) {
            let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
            let (o1, rest) = rest.split_at_mut(n);
            let (o2, o3) = rest.split_at_mut(n);
            let (o0, o1, o2, o3) = (&mut o0[j0..j1], &mut o1[j0..j1], &mut o2[j0..j1], &mut o3[j0..j1]);
            for p in 0..k {
                let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
                if a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0 {
                    continue;
                }
                let br = &b[p * n + j0..p * n + j1];
                let lanes = o0.iter_mut().zip(o1.iter_mut()).zip(o2.iter_mut()).zip(o3.iter_mut());
                for ((((x0, x1), x2), x3), &bv) in lanes.zip(br) {
                    *x0 += a0 * bv;
                    *x1 += a1 * bv;
                    *x2 += a2 * bv;
                    *x3 += a3 * bv;
                }
            }
        }
        for i in quads..m {
            let row = &mut out[i * n + j0..i * n + j1];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&b[p * n + j0..p * n + j1]) {
                    *o += av * bv;
                }
            }
        }
    }
}

fn transposed(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for (i, row) in a.chunks_exact(cols).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j * rows + i] = v;
        }
    }
    t
}

/// `out[m x n] += a[m x k] * b[n x k]^T`
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(b.len(), n * k);
    if m == 1 {
        for (o, b_row) in out.iter_mut().zip(b.chunks_exact(k.max(1))) {
            *o += dot(a, b_row);
        }
        return;
    }
    gemm_nn(a, &transposed(b, n, k), out, m, k, n);
}

/// `out[m x n] += a[k x m]^T * b[k x n]`
pub fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    gemm_nn(&transposed(a, k, m), b, out, m, k, n);
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorize.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}
