//! Raw-slice kernels shared by the convolution ops.
//!
//! Layout conventions: images are `C×H×W` row-major; padded images are
//! `C×(H+2)×(W+2)`; im2col matrices are `(C·9)×(H·W)` with row index
//! `c·9 + ky·3 + kx`.

/// Border handling for a width-1 pad around each plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Padding {
    /// Mirror without repeating the edge (`-1 → 1`, `n → n-2`).
    Reflect,
    Zero,
}

#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

pub(crate) fn pad(src: &[f64], c: usize, h: usize, w: usize, mode: Padding, dst: &mut [f64]) {
    let (ph, pw) = (h + 2, w + 2);
    debug_assert_eq!(dst.len(), c * ph * pw);
    for ch in 0..c {
        let s = &src[ch * h * w..(ch + 1) * h * w];
        let d = &mut dst[ch * ph * pw..(ch + 1) * ph * pw];
        match mode {
            Padding::Zero => {
                d.fill(0.0);
                for y in 0..h {
                    d[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(&s[y * w..(y + 1) * w]);
                }
            }
            Padding::Reflect => {
                for py in 0..ph {
                    let sy = reflect_index(py as isize - 1, h);
                    let row = &s[sy * w..(sy + 1) * w];
                    let drow = &mut d[py * pw..(py + 1) * pw];
                    drow[1..=w].copy_from_slice(row);
                    drow[0] = row[1];
                    drow[w + 1] = row[w - 2];
                }
            }
        }
    }
}

/// Adjoint of [`pad`]: accumulates a padded gradient back onto the source
/// plane. For reflection the border cells fold onto the interior cells they
/// were copied from.
pub(crate) fn pad_adjoint(src: &[f64], c: usize, h: usize, w: usize, mode: Padding, dst: &mut [f64]) {
    let (ph, pw) = (h + 2, w + 2);
    for ch in 0..c {
        let s = &src[ch * ph * pw..(ch + 1) * ph * pw];
        let d = &mut dst[ch * h * w..(ch + 1) * h * w];
        match mode {
            Padding::Zero => {
                for y in 0..h {
                    let srow = &s[(y + 1) * pw + 1..(y + 1) * pw + 1 + w];
                    for (a, b) in d[y * w..(y + 1) * w].iter_mut().zip(srow) {
                        *a += b;
                    }
                }
            }
            Padding::Reflect => {
                for py in 0..ph {
                    let sy = reflect_index(py as isize - 1, h);
                    let srow = &s[py * pw..(py + 1) * pw];
                    let drow = &mut d[sy * w..(sy + 1) * w];
                    for (a, b) in drow.iter_mut().zip(&srow[1..=w]) {
                        *a += b;
                    }
                    drow[1] += srow[0];
                    drow[w - 2] += srow[w + 1];
                }
            }
        }
    }
}

pub(crate) fn im2col(padded: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let (ph, pw, hw) = (h + 2, w + 2, h * w);
    debug_assert_eq!(cols.len(), c * 9 * hw);
    for ch in 0..c {
        let plane = &padded[ch * ph * pw..(ch + 1) * ph * pw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ch * 9 + ky * 3 + kx) * hw..(ch * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let start = (y + ky) * pw + kx;
                    row[y * w..(y + 1) * w].copy_from_slice(&plane[start..start + w]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]; accumulates into `padded`.
pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, padded: &mut [f64]) {
    let (ph, pw, hw) = (h + 2, w + 2, h * w);
    for ch in 0..c {
        let plane = &mut padded[ch * ph * pw..(ch + 1) * ph * pw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ch * 9 + ky * 3 + kx) * hw..(ch * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let start = (y + ky) * pw + kx;
                    for (a, b) in plane[start..start + w].iter_mut().zip(&row[y * w..(y + 1) * w]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// `C = alpha · op(A) · op(B) + beta · C` with `op(A)` of shape `m×k` and
/// `op(B)` of shape `k×n`. A transposed operand is stored in its own
/// row-major layout (`k×m` for A, `n×k` for B).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index reachable through the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(2, 4), 2);
    }

    #[test]
    fn pad_adjoint_matches_inner_product() {
        let (c, h, w) = (2, 3, 4);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * (h + 2) * (w + 2)).map(|i| (i as f64 * 0.91).cos()).collect();
        for mode in [Padding::Reflect, Padding::Zero] {
            let mut px = vec![0.0; y.len()];
            pad(&x, c, h, w, mode, &mut px);
            let mut aty = vec![0.0; x.len()];
            pad_adjoint(&y, c, h, w, mode, &mut aty);
            let lhs: f64 = px.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{mode:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, 1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, 1.0, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
