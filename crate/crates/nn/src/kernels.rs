//! Low-level numeric kernels: GEMM wrapper and im2col/col2im.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above.
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

/// Geometry of a 2-D sliding window over a single `[C, H, W]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn conv(
        channels: usize,
        height: usize,
        width: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Self {
        assert!(
            height + 2 * pad.0 >= kernel.0 && width + 2 * pad.1 >= kernel.1,
            "kernel {kernel:?} larger than padded input {height}x{width}"
        );
        let out_h = (height + 2 * pad.0 - kernel.0) / stride.0 + 1;
        let out_w = (width + 2 * pad.1 - kernel.1) / stride.1 + 1;
        Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold `img` (`[C, H, W]`) into `cols` (`[C*kh*kw, out_h*out_w]`).
pub fn im2col(img: &[f64], win: &Window, cols: &mut [f64]) {
    let (kh, kw) = win.kernel;
    let (sh, sw) = win.stride;
    let (ph, pw) = win.pad;
    let ncols = win.col_cols();
    debug_assert_eq!(cols.len(), win.col_rows() * ncols);
    for c in 0..win.channels {
        let plane = &img[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..win.out_h {
                    let y = (oy * sh + ki) as isize - ph as isize;
                    let out_row = &mut dst[oy * win.out_w..(oy + 1) * win.out_w];
                    if y < 0 || y >= win.height as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[y as usize * win.width..(y as usize + 1) * win.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let x = (ox * sw + kj) as isize - pw as isize;
                        *v = if x < 0 || x >= win.width as isize {
                            0.0
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back onto `img`.
pub fn col2im(cols: &[f64], win: &Window, img: &mut [f64]) {
    let (kh, kw) = win.kernel;
    let (sh, sw) = win.stride;
    let (ph, pw) = win.pad;
    let ncols = win.col_cols();
    for c in 0..win.channels {
        let plane = &mut img[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..win.out_h {
                    let y = (oy * sh + ki) as isize - ph as isize;
                    if y < 0 || y >= win.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * win.width..(y as usize + 1) * win.width];
                    for ox in 0..win.out_w {
                        let x = (ox * sw + kj) as isize - pw as isize;
                        if x >= 0 && x < win.width as isize {
                            dst[x as usize] += src[oy * win.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
