//! Numeric kernels shared by the graph ops.
//!
//! The inner GEMM is `matrixmultiply::dgemm`, which is single-threaded and
//! accumulates in a fixed order, so every kernel here is bit-deterministic.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices.
///
/// `a` is `m x k` after the optional transpose, `b` is `k x n`, `c` is `m x n`.
/// When `ta` is set, `a` is stored as `k x m` and read transposed (likewise
/// `tb` for `b`); no copies are made, only strides change.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
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

/// Spatial geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent along one axis, or `None` if the kernel does not fit.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> Option<usize> {
    let eff = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if padded < eff {
        return None;
    }
    Some((padded - eff) / stride + 1)
}

/// Gather one image's patches into `cols[out_h*out_w, C*kh*kw]`, zero-padding
/// out-of-range taps.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    debug_assert_eq!(x.len(), g.channels * g.height * g.width);
    debug_assert_eq!(cols.len(), g.out_len() * g.patch_len());
    let (h, w) = (g.height as isize, g.width as isize);
    let mut row = 0usize;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let base = row * g.patch_len();
            let mut col = 0usize;
            for c in 0..g.channels {
                let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
                for i in 0..g.kh {
                    let iy = (oy * g.stride + i * g.dilation) as isize - g.padding as isize;
                    for j in 0..g.kw {
                        let ix = (ox * g.stride + j * g.dilation) as isize - g.padding as isize;
                        cols[base + col] = if iy >= 0 && iy < h && ix >= 0 && ix < w {
                            plane[(iy * w + ix) as usize]
                        } else {
                            0.0
                        };
                        col += 1;
                    }
                }
            }
            row += 1;
        }
    }
}

/// Scatter-add the patch-gradient matrix back onto one image (inverse of
/// [`im2col`]).
pub fn col2im_add(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    debug_assert_eq!(dx.len(), g.channels * g.height * g.width);
    debug_assert_eq!(dcols.len(), g.out_len() * g.patch_len());
    let (h, w) = (g.height as isize, g.width as isize);
    let mut row = 0usize;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let base = row * g.patch_len();
            let mut col = 0usize;
            for c in 0..g.channels {
                let off = c * g.height * g.width;
                for i in 0..g.kh {
                    let iy = (oy * g.stride + i * g.dilation) as isize - g.padding as isize;
                    for j in 0..g.kw {
                        let ix = (ox * g.stride + j * g.dilation) as isize - g.padding as isize;
                        if iy >= 0 && iy < h && ix >= 0 && ix < w {
                            dx[off + (iy * w + ix) as usize] += dcols[base + col];
                        }
                        col += 1;
                    }
                }
            }
            row += 1;
        }
    }
}

/// Row-wise softmax with max subtraction, in place. Returns nothing; rows of
/// the result sum to 1.
pub fn softmax_rows(m: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(m.len(), rows * cols);
    for r in 0..rows {
        let row = &mut m[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_hand_product() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_transpose_flags() {
        // a^T * b with a stored 2x3: logical 3x2.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [[1,2,3],[4,5,6]]
        let b = [1.0, 0.0, 0.0, 1.0]; // identity 2x2
        let mut c = [0.0; 6];
        gemm(3, 2, 2, 1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish data: the pair is a
        // transpose pair, which is exactly what the conv backward relies on.
        let g = ConvGeom {
            channels: 2,
            height: 4,
            width: 5,
            kh: 3,
            kw: 3,
            stride: 1,
            dilation: 2,
            padding: 2,
            out_h: conv_out_extent(4, 3, 1, 2, 2).unwrap(),
            out_w: conv_out_extent(5, 3, 1, 2, 2).unwrap(),
        };
        let x: Vec<f64> = (0..g.channels * g.height * g.width)
            .map(|i| (i as f64 * 0.7).sin())
            .collect();
        let y: Vec<f64> = (0..g.out_len() * g.patch_len())
            .map(|i| (i as f64 * 0.3).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im_add(&y, &g, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m = vec![1.0, 2.0, 3.0, 1000.0, 1000.0, 1000.0];
        softmax_rows(&mut m, 2, 3);
        for r in 0..2 {
            let s: f64 = m[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
