//! Raw numeric kernels shared by the tape's forward and backward passes.

/// `c (+)= op(a) · op(b)` for row-major `op(a): m×k`, `op(b): k×n`.
///
/// `trans_a` means `a` is stored `k×m`; `trans_b` means `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(0.0);
    }
    match (trans_a, trans_b) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for (&x, &y) in arow.iter().zip(brow) {
                        s += x * y;
                    }
                    c[i * n + j] += s;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    if av == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

/// Unfolds one `[cin, h, w]` image into `[cin·9, h·w]` patch columns for a
/// 3×3 kernel with zero padding 1.
pub(crate) fn im2col(x: &[f64], cin: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(col.len(), cin * 9 * hw);
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                let (x_lo, x_hi) = valid_range(kx, w);
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(0.0);
                    out[x_hi..].fill(0.0);
                    let shift = kx as isize - 1;
                    for xx in x_lo..x_hi {
                        out[xx] = src[(xx as isize + shift) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-add patch columns back into an image.
pub(crate) fn col2im(col: &[f64], cin: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                let (x_lo, x_hi) = valid_range(kx, w);
                let shift = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for xx in x_lo..x_hi {
                        dst[(xx as isize + shift) as usize] += src[xx];
                    }
                }
            }
        }
    }
}

// Output columns whose source column x+kx-1 lies inside [0, w).
fn valid_range(kx: usize, w: usize) -> (usize, usize) {
    match kx {
        0 => (1.min(w), w),
        1 => (0, w),
        _ => (0, w.saturating_sub(1)),
    }
}

/// Same-padded 3×3 cross-correlation of a `[n, cin, h, w]` batch with
/// `[cout, cin, 3, 3]` weights and an optional `[cout]` bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: &[f64],
    cout: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; n * cout * hw];
    let mut col = vec![0.0; cin * 9 * hw];
    for b in 0..n {
        im2col(&x[b * cin * hw..(b + 1) * cin * hw], cin, h, w, &mut col);
        let o = &mut out[b * cout * hw..(b + 1) * cout * hw];
        gemm(cout, hw, cin * 9, k, false, &col, false, o, false);
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                o[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, weights and bias.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: &[f64],
    cout: usize,
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let hw = h * w;
    let mut col = vec![0.0; cin * 9 * hw];
    let mut dx = dx;
    let mut dk = dk;
    for b in 0..n {
        let g = &dout[b * cout * hw..(b + 1) * cout * hw];
        if let Some(dk) = dk.as_deref_mut() {
            im2col(&x[b * cin * hw..(b + 1) * cin * hw], cin, h, w, &mut col);
            gemm(cout, cin * 9, hw, g, false, &col, true, dk, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(cin * 9, hw, cout, k, true, g, false, &mut col, false);
            col2im(&col, cin, h, w, &mut dx[b * cin * hw..(b + 1) * cin * hw]);
        }
    }
    if let Some(db) = dbias {
        for b in 0..n {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dout[(b * cout + co) * hw..(b * cout + co + 1) * hw]
                    .iter()
                    .sum::<f64>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_all_transpose_modes_agree() {
        let (m, n, k) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, n, k, &a, &b);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            gemm(m, n, k, aa, ta, bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "mode ({ta},{tb})");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let (cin, h, w) = (2, 3, 4);
        let x: Vec<f64> = (0..cin * h * w).map(|i| (i as f64).sin()).collect();
        let c: Vec<f64> = (0..cin * 9 * h * w).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut col = vec![0.0; c.len()];
        im2col(&x, cin, h, w, &mut col);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im(&c, cin, h, w, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_on_single_column_width() {
        // w == 1 exercises the clipped column ranges.
        let x = vec![1.0, 2.0, 3.0];
        let mut k = vec![0.0; 9];
        k[1] = 1.0; // row above
        let out = conv2d_forward(&x, 1, 1, 3, 1, &k, 1, None);
        assert_eq!(out, vec![0.0, 1.0, 2.0]);
    }
}
