//! Dense kernels shared by the differentiable ops.

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
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

/// Geometry of a 2-D sliding window over one `channels x height x width` plane stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds `input` (`C x H x W`) into `(C*kh*kw) x (Ho*Wo)` columns.
pub fn im2col(input: &[f64], win: &Window, cols: &mut [f64]) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let plane = win.height * win.width;
    let ncols = oh * ow;
    debug_assert_eq!(cols.len(), win.col_rows() * ncols);
    let pad = win.padding as isize;
    for c in 0..win.channels {
        let src = &input[c * plane..(c + 1) * plane];
        for ki in 0..win.kernel_h {
            for kj in 0..win.kernel_w {
                let row = (c * win.kernel_h + ki) * win.kernel_w + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ki) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= win.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let base = iy as usize * win.width;
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kj) as isize - pad;
                        *slot = if ix < 0 || ix >= win.width as isize {
                            0.0
                        } else {
                            src[base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `output` (`C x H x W`).
pub fn col2im(cols: &[f64], win: &Window, output: &mut [f64]) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let plane = win.height * win.width;
    let ncols = oh * ow;
    let pad = win.padding as isize;
    for c in 0..win.channels {
        let dst = &mut output[c * plane..(c + 1) * plane];
        for ki in 0..win.kernel_h {
            for kj in 0..win.kernel_w {
                let row = (c * win.kernel_h + ki) * win.kernel_w + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ki) as isize - pad;
                    if iy < 0 || iy >= win.height as isize {
                        continue;
                    }
                    let base = iy as usize * win.width;
                    for ox in 0..ow {
                        let ix = (ox * win.stride + kj) as isize - pad;
                        if ix >= 0 && ix < win.width as isize {
                            dst[base + ix as usize] += src[oy * ow + ox];
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

    #[test]
    fn gemm_matches_naive_product_for_all_transpositions() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        let mut expected = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    expected[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let lhs = if ta { &at } else { &a };
            let rhs = if tb { &bt } else { &b };
            let mut c = vec![0.0; m * n];
            gemm(ta, tb, m, k, n, 1.0, lhs, rhs, 0.0, &mut c);
            for (x, y) in c.iter().zip(&expected) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let win = Window {
            channels: 2,
            height: 5,
            width: 4,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).cos()).collect();
        let y: Vec<f64> = (0..win.col_rows() * win.col_cols())
            .map(|v| (v as f64 * 0.11).sin())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &win, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &win, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
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
}
