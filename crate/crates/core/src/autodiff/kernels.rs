//! Dense numeric kernels shared by forward and backward rules.
//!
//! Every loop runs in a fixed order so results are bitwise reproducible.

use crate::tensor::Scalar;

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `a[m,k] · b[k,n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// `c[k,n] += a[m,k]ᵀ · d[m,n]`
pub fn matmul_tn_acc<T: Scalar>(a: &[T], d: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let d_row = &d[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &dv) in c_row.iter_mut().zip(d_row) {
                *cv += av * dv;
            }
        }
    }
}

/// `c[m,n] += d[m,k] · b[n,k]ᵀ`
pub fn matmul_nt_acc<T: Scalar>(d: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul_acc(d, &bt, c, m, k, n);
}

/// Transpose of a row-major `rows × cols` matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a strided, padded 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub len_in: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Spacing between kernel taps.
    pub dilation: usize,
    pub pad_left: usize,
    pub len_out: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        len_in: usize,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Option<Self> {
        Self::dilated(c_in, len_in, kernel, stride, 1, pad_left, pad_right)
    }

    pub fn dilated(
        c_in: usize,
        len_in: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Option<Self> {
        let padded = len_in + pad_left + pad_right;
        if stride == 0 || kernel == 0 || dilation == 0 {
            return None;
        }
        let span = (kernel - 1) * dilation + 1;
        if padded < span {
            return None;
        }
        Some(ConvGeom {
            c_in,
            len_in,
            kernel,
            stride,
            dilation,
            pad_left,
            len_out: (padded - span) / stride + 1,
        })
    }

    /// Input index touched by output `o` and tap `k`, if inside the signal.
    #[inline]
    fn source(&self, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.pad_left as isize;
        if pos >= 0 && (pos as usize) < self.len_in {
            Some(pos as usize)
        } else {
            None
        }
    }
}

/// Unfolds `x[c_in, len_in]` into columns `[c_in·kernel, len_out]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let mut cols = vec![T::ZERO; g.c_in * g.kernel * g.len_out];
    for c in 0..g.c_in {
        let xs = &x[c * g.len_in..(c + 1) * g.len_in];
        for k in 0..g.kernel {
            let row = &mut cols[(c * g.kernel + k) * g.len_out..(c * g.kernel + k + 1) * g.len_out];
            for (o, slot) in row.iter_mut().enumerate() {
                if let Some(src) = g.source(o, k) {
                    *slot = xs[src];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx[c_in, len_in]`.
pub fn col2im_acc<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    for c in 0..g.c_in {
        for k in 0..g.kernel {
            let row = &cols[(c * g.kernel + k) * g.len_out..(c * g.kernel + k + 1) * g.len_out];
            for (o, &v) in row.iter().enumerate() {
                if let Some(src) = g.source(o, k) {
                    dx[c * g.len_in + src] += v;
                }
            }
        }
    }
}
