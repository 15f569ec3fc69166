//! 3×3 same-padding convolutions via im2col and a dense GEMM.

use crate::tensor::Tensor3;

/// Row-major matrix view: `rows × cols`, optionally read transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    fn shape(&self) -> (usize, usize) {
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

/// `c = a·b + beta·c` with `c` row-major.
pub fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(c.len(), m * n, "output has the wrong size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the shapes and strides above describe exactly the slices passed in.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `(C·9) × (H·W)` patch matrix; rows ordered `(c, ky, kx)`.
pub fn im2col(x: &Tensor3) -> Vec<f64> {
    let (c, h, w) = x.shape();
    let n = h * w;
    let mut cols = vec![0.0; c * 9 * n];
    for ci in 0..c {
        let plane = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im(cols: &[f64], c: usize, h: usize, w: usize) -> Tensor3 {
    let n = h * w;
    let mut x = Tensor3::zeros(c, h, w);
    for ci in 0..c {
        let plane = x.channel_mut(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..][..w];
                    let dst = &mut plane[sy as usize * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    x
}

/// `weight` is `cout × (cin·9)`. Returns the output and the patch matrix for backward.
pub fn conv3x3(x: &Tensor3, weight: &[f64], bias: &[f64], cout: usize) -> (Tensor3, Vec<f64>) {
    let cols = im2col(x);
    let n = x.plane_len();
    let mut out = Tensor3::zeros(cout, x.height, x.width);
    for (o, &b) in bias.iter().enumerate() {
        out.channel_mut(o).iter_mut().for_each(|v| *v = b);
    }
    gemm(Mat::new(weight, cout, x.channels * 9), Mat::new(&cols, x.channels * 9, n), 1.0, &mut out.data);
    (out, cols)
}

/// Accumulates weight and bias gradients; returns the input gradient when requested.
pub fn conv3x3_backward(
    cols: &[f64],
    weight: &[f64],
    cin: usize,
    dout: &Tensor3,
    dweight: &mut [f64],
    dbias: &mut [f64],
    need_input: bool,
) -> Option<Tensor3> {
    let (cout, h, w) = dout.shape();
    let n = h * w;
    for (o, db) in dbias.iter_mut().enumerate() {
        *db += dout.channel(o).iter().sum::<f64>();
    }
    gemm(Mat::new(&dout.data, cout, n), Mat::new(cols, cin * 9, n).t(), 1.0, dweight);
    if !need_input {
        return None;
    }
    let mut dcols = vec![0.0; cin * 9 * n];
    gemm(Mat::new(weight, cout, cin * 9).t(), Mat::new(&dout.data, cout, n), 0.0, &mut dcols);
    Some(col2im(&dcols, cin, h, w))
}
