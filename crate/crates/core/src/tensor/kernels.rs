//! Dense loops behind the tape primitives.
//!
//! Every output row of [`gemm`] is computed with the same sequence of
//! floating-point operations regardless of where the row sits in the
//! matrix, so permuting the rows of `a` permutes the output bit-for-bit.

/// `out[m,n] = a[m,k] * b[k,n]`
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_acc(a, b, &mut out, m, k, n);
    out
}

/// `out[m,n] += a[m,k] * b[k,n]`
///
/// Tiled over `MR x NR` blocks of the output held in registers; every
/// element still accumulates its products in increasing `k` order.
pub fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    const MR: usize = 4;
    const NR: usize = 8;
    let (m_full, n_full) = (m - m % MR, n - n % NR);
    for i0 in (0..m_full).step_by(MR) {
        for j0 in (0..n_full).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            let ar: [&[f64]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
            for (p, brow) in b.chunks_exact(n).enumerate().take(k) {
                let bv: &[f64; NR] = brow[j0..j0 + NR].try_into().unwrap();
                for r in 0..MR {
                    let av = ar[r][p];
                    for c in 0..NR {
                        acc[r][c] += av * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        if n_full < n {
            gemm_scalar(a, b, out, i0..i0 + MR, n_full..n, k, n);
        }
    }
    gemm_scalar(a, b, out, m_full..m, 0..n, k, n);
}

fn gemm_scalar(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    for i in rows {
        let row = &mut out[i * n + cols.start..i * n + cols.end];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n + cols.start..p * n + cols.end]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`, tiled like [`gemm_acc`].
pub fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    const MR: usize = 4;
    const NR: usize = 8;
    // rows of a and g are consumed in blocks that stay in cache
    const PB: usize = 128;
    let (k_full, n_full) = (k - k % MR, n - n % NR);
    for p0 in (0..m).step_by(PB) {
        let p1 = (p0 + PB).min(m);
        let (ab, gb) = (&a[p0 * k..p1 * k], &g[p0 * n..p1 * n]);
        for i0 in (0..k_full).step_by(MR) {
            for j0 in (0..n_full).step_by(NR) {
                let mut acc = [[0.0f64; NR]; MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
                }
                for (a_row, g_row) in ab.chunks_exact(k).zip(gb.chunks_exact(n)) {
                    let av: &[f64; MR] = a_row[i0..i0 + MR].try_into().unwrap();
                    let gv: &[f64; NR] = g_row[j0..j0 + NR].try_into().unwrap();
                    for r in 0..MR {
                        for c in 0..NR {
                            acc[r][c] += av[r] * gv[c];
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
                }
            }
            if n_full < n {
                tn_scalar(ab, gb, out, i0..i0 + MR, n_full..n, p1 - p0, k, n);
            }
        }
        tn_scalar(ab, gb, out, k_full..k, 0..n, p1 - p0, k, n);
    }
}

#[allow(clippy::too_many_arguments)]
fn tn_scalar(
    a: &[f64],
    g: &[f64],
    out: &mut [f64],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    m: usize,
    k: usize,
    n: usize,
) {
    for p in 0..m {
        let gv = &g[p * n + cols.start..p * n + cols.end];
        for i in rows.clone() {
            let av = a[p * k + i];
            for (o, &x) in out[i * n + cols.start..i * n + cols.end].iter_mut().zip(gv) {
                *o += av * x;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
pub fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    gemm_acc(g, &bt, out, m, n, k);
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Unfolds one `[c, h, w]` image into `[c*9, h*w]` patches for a 3x3
/// kernel with zero padding 1.
pub fn im2col3(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[row + y * w + x] = plane[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`]: scatters patch gradients back onto the image.
pub fn col2im3_acc(cols: &[f64], out: &mut [f64], c: usize, h: usize, w: usize) {
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[ch * hw + sy as usize * w + sx as usize] += cols[row + y * w + x];
                    }
                }
            }
        }
    }
}

/// Sum that does not depend on the order of `values`.
pub fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(gemm(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 * 0.5 - 1.0).collect(); // [3,2]
        let g: Vec<f64> = (0..12).map(|x| (x as f64).sin()).collect(); // [3,4]
        let mut out = vec![0.0; 8];
        gemm_tn_acc(&a, &g, &mut out, 3, 2, 4);
        let at = transpose(&a, 3, 2);
        assert_eq!(out, gemm(&at, &g, 2, 3, 4));
    }

    #[test]
    fn ordered_sum_is_permutation_invariant() {
        let mut a = vec![1e16, 1.0, -1e16, 3.5, 1e-3];
        let mut b = vec![3.5, -1e16, 1e-3, 1.0, 1e16];
        assert_eq!(ordered_sum(&mut a).to_bits(), ordered_sum(&mut b).to_bits());
    }
}
