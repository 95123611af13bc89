//! Raw numeric kernels behind the tape ops. Everything here works on flat
//! row-major slices; shape validation happens in the tape layer.

/// Row-major matrix view: `rows x cols`, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
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

/// `c = a * b + beta * c`, `c` row-major `m x n`.
pub(crate) fn gemm(a: Mat, b: Mat, beta: f64, c: &mut [f64]) {
    let (m, k) = a.logical();
    let (kb, n) = b.logical();
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the strides describe exactly the `m x k` / `k x n` / `m x n`
    // row-major buffers whose lengths are asserted above.
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }
    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
    /// 1x1 kernels without padding read the input plane directly.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }
}

/// Unfolds one `(C, H, W)` sample into a `(C*kh*kw) x (out_h*out_w)` matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.in_c {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = oy as isize + ky as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - pad;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the column matrix back into the input.
pub(crate) fn col2im_add(col: &[f64], g: &ConvGeom, input_grad: &mut [f64]) {
    let p = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.in_c {
        let plane = &mut input_grad[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = ox as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of one sample. `out` is `(out_c, out_h*out_w)`.
pub(crate) fn conv_forward_sample(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    g: &ConvGeom,
    scratch: &mut Vec<f64>,
    out: &mut [f64],
) {
    let out_c = bias.len();
    let p = g.col_cols();
    for (o, row) in out.chunks_mut(p).enumerate() {
        row.iter_mut().for_each(|v| *v = bias[o]);
    }
    let col: &[f64] = if g.is_pointwise() {
        input
    } else {
        scratch.resize(g.col_rows() * p, 0.0);
        im2col(input, g, scratch);
        scratch
    };
    gemm(
        Mat::new(kernel, out_c, g.col_rows()),
        Mat::new(col, g.col_rows(), p),
        1.0,
        out,
    );
}

/// Backward convolution of one sample. Accumulates into `kernel_grad`,
/// `bias_grad`, and (if given) `input_grad`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_sample(
    input: &[f64],
    kernel: &[f64],
    out_grad: &[f64],
    g: &ConvGeom,
    scratch: &mut Vec<f64>,
    kernel_grad: Option<&mut [f64]>,
    bias_grad: Option<&mut [f64]>,
    input_grad: Option<&mut [f64]>,
) {
    let p = g.col_cols();
    let k = g.col_rows();
    let out_c = out_grad.len() / p;
    if let Some(bg) = bias_grad {
        for (o, row) in out_grad.chunks(p).enumerate() {
            bg[o] += row.iter().sum::<f64>();
        }
    }
    if let Some(kg) = kernel_grad {
        let col: &[f64] = if g.is_pointwise() {
            input
        } else {
            scratch.resize(k * p, 0.0);
            im2col(input, g, scratch);
            scratch
        };
        gemm(
            Mat::new(out_grad, out_c, p),
            Mat::new(col, k, p).t(),
            1.0,
            kg,
        );
    }
    if let Some(ig) = input_grad {
        let w = Mat::new(kernel, out_c, k).t();
        let dy = Mat::new(out_grad, out_c, p);
        if g.is_pointwise() {
            gemm(w, dy, 1.0, ig);
        } else {
            scratch.resize(k * p, 0.0);
            gemm(w, dy, 0.0, scratch);
            col2im_add(scratch, g, ig);
        }
    }
}

/// 2x2 max pool over one plane; records the flat input index of each max.
/// Ties keep the first element in row-major window order.
pub(crate) fn maxpool2_plane(
    input: &[f64],
    h: usize,
    w: usize,
    base: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let (oh, ow) = (h / 2, w / 2);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut best = 2 * oy * w + 2 * ox;
            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                let i = (2 * oy + dy) * w + 2 * ox + dx;
                if input[i] > input[best] {
                    best = i;
                }
            }
            out[oy * ow + ox] = input[best];
            argmax[oy * ow + ox] = base + best;
        }
    }
}

pub(crate) fn avgpool2_plane(input: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for oy in 0..oh {
        for ox in 0..ow {
            let i = 2 * oy * w + 2 * ox;
            out[oy * ow + ox] = 0.25 * (input[i] + input[i + 1] + input[i + w] + input[i + w + 1]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.7).cos()).collect();
        let want = naive_matmul(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm(Mat::new(&a, m, k), Mat::new(&b, k, n), 0.0, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        let mut c2 = vec![1.0; m * n];
        gemm(Mat::new(&at, k, m).t(), Mat::new(&bt, n, k).t(), 0.0, &mut c2);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            in_c: 2,
            in_h: 5,
            in_w: 4,
            kh: 3,
            kw: 3,
            pad: 1,
            out_h: 5,
            out_w: 4,
        };
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, &g, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
