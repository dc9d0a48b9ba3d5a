//! Safe wrappers around `matrixmultiply::dgemm`.

use rayon::prelude::*;

/// Operand layout: a logical `rows x cols` matrix stored row-major, or stored as
/// its transpose.
#[derive(Clone, Copy)]
pub(crate) enum Layout {
    Normal,
    Transposed,
}

/// `c (m x n) = a (m x k) . b (k x n) + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    if m * k * n <= SMALL_GEMM {
        small_gemm(k, n, a, (rsa as usize, csa as usize), b, (rsb as usize, csb as usize), beta, c);
        return;
    }
    // SAFETY: the debug-asserted lengths match the strides above, so every
    // index dgemm touches lies inside the three slices, and `c` is exclusive.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// Below this many multiply-adds the packing in dgemm costs more than it saves.
const SMALL_GEMM: usize = 4096;

#[allow(clippy::too_many_arguments)]
fn small_gemm(
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if beta == 0.0 {
        c.fill(0.0);
    } else if beta != 1.0 {
        c.iter_mut().for_each(|v| *v *= beta);
    }
    for (i, row) in c.chunks_exact_mut(n).enumerate() {
        for p in 0..k {
            let aip = a[i * rsa + p * csa];
            if csb == 1 {
                let brow = &b[p * rsb..p * rsb + n];
                for (cv, bv) in row.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            } else {
                for (j, cv) in row.iter_mut().enumerate() {
                    *cv += aip * b[p * rsb + j * csb];
                }
            }
        }
    }
}

const PAR_MIN_BATCH: usize = 8;

/// Batched `c[i] = a[i] . b[i] + beta * c[i]`, parallel over the batch.
/// Each batch item is computed independently, so results do not depend on the
/// thread count.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_gemm(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    let (sa, sb, sc) = (m * k, k * n, m * n);
    if sc == 0 {
        return;
    }
    let body = |(i, ci): (usize, &mut [f64])| {
        gemm(m, k, n, &a[i * sa..(i + 1) * sa], la, &b[i * sb..(i + 1) * sb], lb, beta, ci);
    };
    if batch >= PAR_MIN_BATCH {
        c.par_chunks_mut(sc).enumerate().for_each(body);
    } else {
        c.chunks_mut(sc).enumerate().for_each(body);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        out
    }

    #[test]
    fn layouts_agree_with_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let expect = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, la) in [(&a, Layout::Normal), (&at, Layout::Transposed)] {
            for (bb, lb) in [(&b, Layout::Normal), (&bt, Layout::Transposed)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, la, bb, lb, 0.0, &mut c);
                for (x, y) in c.iter().zip(&expect) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
        let mut c = expect.clone();
        gemm(m, k, n, &a, Layout::Normal, &b, Layout::Normal, 1.0, &mut c);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }
}
