//! Slice-level correlation kernels.
//!
//! All convolutions in this crate use the correlation convention
//! `y[n] = sum_t x[n*stride + t] * f[t]` with no filter flip, so a stored
//! filter row reads directly as a basis function.

/// Copies `rows` rows of length `len` into a zero-padded buffer.
pub(crate) fn pad_rows(x: &[f64], rows: usize, len: usize, left: usize, right: usize) -> Vec<f64> {
    let plen = len + left + right;
    let mut out = vec![0.0; rows * plen];
    for r in 0..rows {
        out[r * plen + left..r * plen + left + len].copy_from_slice(&x[r * len..(r + 1) * len]);
    }
    out
}

/// Removes padding from each row of a padded buffer.
pub(crate) fn unpad_rows(
    xp: &[f64],
    rows: usize,
    plen: usize,
    left: usize,
    len: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * len];
    for r in 0..rows {
        out[r * len..(r + 1) * len].copy_from_slice(&xp[r * plen + left..r * plen + left + len]);
    }
    out
}

/// `y[n] += sum_t x[n*stride + t] * f[t]` for `n < y.len()`.
#[inline]
pub(crate) fn correlate_accumulate(x: &[f64], f: &[f64], stride: usize, y: &mut [f64]) {
    let n_out = y.len();
    if n_out == 0 {
        return;
    }
    if stride == 1 {
        for (t, &w) in f.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (yv, xv) in y.iter_mut().zip(&x[t..t + n_out]) {
                *yv += w * xv;
            }
        }
    } else {
        for (t, &w) in f.iter().enumerate() {
            for (n, yv) in y.iter_mut().enumerate() {
                *yv += w * x[n * stride + t];
            }
        }
    }
}

/// Adjoint of [`correlate_accumulate`] with respect to the signal:
/// `gx[n*stride + t] += f[t] * g[n]`.
#[inline]
pub(crate) fn scatter_accumulate(g: &[f64], f: &[f64], stride: usize, gx: &mut [f64]) {
    let n_out = g.len();
    if n_out == 0 {
        return;
    }
    if stride == 1 {
        for (t, &w) in f.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (gv, &go) in gx[t..t + n_out].iter_mut().zip(g) {
                *gv += w * go;
            }
        }
    } else {
        for (t, &w) in f.iter().enumerate() {
            for (n, &go) in g.iter().enumerate() {
                gx[n * stride + t] += w * go;
            }
        }
    }
}

/// Adjoint with respect to the filter: `gf[t] += sum_n g[n] * x[n*stride + t]`.
#[inline]
pub(crate) fn filter_grad_accumulate(x: &[f64], g: &[f64], stride: usize, gf: &mut [f64]) {
    let n_out = g.len();
    for (t, gw) in gf.iter_mut().enumerate() {
        let mut acc = 0.0;
        if stride == 1 {
            for (xv, gv) in x[t..t + n_out].iter().zip(g) {
                acc += xv * gv;
            }
        } else {
            for (n, gv) in g.iter().enumerate() {
                acc += x[n * stride + t] * gv;
            }
        }
        *gw += acc;
    }
}

/// Multi-channel correlation of padded rows `xp` (`c_in` rows of `plen`)
/// with filters `[c_out][c_in][width]`, producing `c_out` rows of `n_out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate_channels(
    xp: &[f64],
    c_in: usize,
    plen: usize,
    filters: &[f64],
    c_out: usize,
    width: usize,
    stride: usize,
    n_out: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; c_out * n_out];
    for o in 0..c_out {
        let yrow = &mut y[o * n_out..(o + 1) * n_out];
        for c in 0..c_in {
            let f = &filters[(o * c_in + c) * width..(o * c_in + c + 1) * width];
            correlate_accumulate(&xp[c * plen..(c + 1) * plen], f, stride, yrow);
        }
    }
    y
}

/// Adjoint of [`correlate_channels`] with respect to the padded signal.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scatter_channels(
    g: &[f64],
    c_out: usize,
    n_out: usize,
    filters: &[f64],
    c_in: usize,
    width: usize,
    stride: usize,
    plen: usize,
) -> Vec<f64> {
    let mut gx = vec![0.0; c_in * plen];
    for o in 0..c_out {
        let grow = &g[o * n_out..(o + 1) * n_out];
        for c in 0..c_in {
            let f = &filters[(o * c_in + c) * width..(o * c_in + c + 1) * width];
            scatter_accumulate(grow, f, stride, &mut gx[c * plen..(c + 1) * plen]);
        }
    }
    gx
}

/// Adjoint of [`correlate_channels`] with respect to the filters.
#[allow(clippy::too_many_arguments)]
pub(crate) fn filter_grad_channels(
    xp: &[f64],
    c_in: usize,
    plen: usize,
    g: &[f64],
    c_out: usize,
    n_out: usize,
    width: usize,
    stride: usize,
) -> Vec<f64> {
    let mut gf = vec![0.0; c_out * c_in * width];
    for o in 0..c_out {
        let grow = &g[o * n_out..(o + 1) * n_out];
        for c in 0..c_in {
            filter_grad_accumulate(
                &xp[c * plen..(c + 1) * plen],
                grow,
                stride,
                &mut gf[(o * c_in + c) * width..(o * c_in + c + 1) * width],
            );
        }
    }
    gf
}

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    /// Rows and columns as stored.
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl Mat<'_> {
    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c += op(a) · op(b)` with `c` row-major `[m, n]`.
pub(crate) fn matmul_accumulate(a: Mat, b: Mat, c: &mut [f64]) {
    let (m, k) = a.dims();
    let (kb, n) = b.dims();
    assert_eq!(k, kb, "inner dimensions");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above bound every index dgemm touches within the
    // three slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
