//! Low-level convolution helpers over single-sample `C x H x W` buffers.

use super::spec::PadMode;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where
/// `op(x)` is `x` or its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe exactly the buffers whose lengths are
    // checked above; `c` does not alias `a` or `b`.
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

#[inline]
fn reflect(i: isize, n: usize) -> usize {
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

/// Pads every channel by `p` on all sides.
pub(crate) fn pad(src: &[f64], c: usize, h: usize, w: usize, p: usize, mode: PadMode) -> Vec<f64> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        let s = &src[ch * h * w..(ch + 1) * h * w];
        let d = &mut out[ch * hp * wp..(ch + 1) * hp * wp];
        match mode {
            PadMode::Zero => {
                for y in 0..h {
                    d[(y + p) * wp + p..(y + p) * wp + p + w].copy_from_slice(&s[y * w..(y + 1) * w]);
                }
            }
            PadMode::Reflect => {
                for y in 0..hp {
                    let sy = reflect(y as isize - p as isize, h);
                    for x in 0..wp {
                        let sx = reflect(x as isize - p as isize, w);
                        d[y * wp + x] = s[sy * w + sx];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad`]: folds a padded gradient back onto the source grid.
pub(crate) fn unpad(grad: &[f64], c: usize, h: usize, w: usize, p: usize, mode: PadMode, dst: &mut [f64]) {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    for ch in 0..c {
        let g = &grad[ch * hp * wp..(ch + 1) * hp * wp];
        let d = &mut dst[ch * h * w..(ch + 1) * h * w];
        match mode {
            PadMode::Zero => {
                for y in 0..h {
                    for x in 0..w {
                        d[y * w + x] += g[(y + p) * wp + x + p];
                    }
                }
            }
            PadMode::Reflect => {
                for y in 0..hp {
                    let sy = reflect(y as isize - p as isize, h);
                    for x in 0..wp {
                        let sx = reflect(x as isize - p as isize, w);
                        d[sy * w + sx] += g[y * wp + x];
                    }
                }
            }
        }
    }
}

/// Unfolds `k x k` patches at stride `s` into a `(c*k*k) x (oh*ow)` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    oh: usize,
    ow: usize,
    dst: &mut [f64],
) {
    debug_assert!((oh - 1) * s + k <= h && (ow - 1) * s + k <= w);
    let cols = oh * ow;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut dst[((ch * k + ky) * k + kx) * cols..][..cols];
                for oy in 0..oh {
                    let sy = oy * s + ky;
                    let src_row = &plane[sy * w..];
                    let out = &mut row[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        out.copy_from_slice(&src_row[kx..kx + ow]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            *o = src_row[ox * s + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dst`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    oh: usize,
    ow: usize,
    dst: &mut [f64],
) {
    let cols = oh * ow;
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ch * k + ky) * k + kx) * cols..][..cols];
                for oy in 0..oh {
                    let sy = oy * s + ky;
                    let base = sy * w + kx;
                    let src = &row[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        for (d, v) in plane[base..base + ow].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (ox, v) in src.iter().enumerate() {
                            plane[base + ox * s] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn ramp(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64) * k).sin()).collect()
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a = ramp(m * k, 0.7);
        let b = ramp(k * n, 1.3);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // transposed operands
        let mut ct = vec![0.0; k * k];
        gemm(k, m, k, &a, true, &a, false, 0.0, &mut ct);
        for i in 0..k {
            for j in 0..k {
                let want: f64 = (0..m).map(|t| a[t * k + i] * a[t * k + j]).sum();
                assert!((ct[i * k + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        for &(h, w, k, s) in &[(5, 6, 3, 1), (7, 7, 3, 2), (8, 8, 4, 2)] {
            let c = 2;
            let oh = (h - k) / s + 1;
            let ow = (w - k) / s + 1;
            let x = ramp(c * h * w, 0.37);
            let y = ramp(c * k * k * oh * ow, 0.91);
            let mut cx = vec![0.0; y.len()];
            im2col(&x, c, h, w, k, s, oh, ow, &mut cx);
            let mut aty = vec![0.0; x.len()];
            col2im(&y, c, h, w, k, s, oh, ow, &mut aty);
            assert!((dot(&cx, &y) - dot(&x, &aty)).abs() < 1e-10);
        }
    }

    #[test]
    fn pad_unpad_are_adjoint() {
        for mode in [PadMode::Zero, PadMode::Reflect] {
            let (c, h, w, p) = (2, 4, 5, 2);
            let x = ramp(c * h * w, 0.5);
            let y = ramp(c * (h + 2 * p) * (w + 2 * p), 0.8);
            let px = pad(&x, c, h, w, p, mode);
            let mut aty = vec![0.0; x.len()];
            unpad(&y, c, h, w, p, mode, &mut aty);
            assert!((dot(&px, &y) - dot(&x, &aty)).abs() < 1e-10);
        }
    }

    #[test]
    fn reflect_padding_mirrors_without_edge() {
        let x = [1.0, 2.0, 3.0];
        let p = pad(&x, 1, 1, 3, 0, PadMode::Reflect);
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
        let row = pad(
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
            1,
            3,
            3,
            1,
            PadMode::Reflect,
        );
        // first padded row mirrors source row 1
        assert_eq!(&row[0..5], &[5.0, 4.0, 5.0, 6.0, 5.0]);
    }
}
