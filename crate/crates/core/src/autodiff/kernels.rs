//! Dense kernels shared by the forward and backward passes.

/// `c = op(a) · op(b) + beta · c` for row-major buffers.
///
/// `op(a)` is `m×k`; when `trans_a` is set, `a` is stored as `k×m`.
/// `op(b)` is `k×n`; when `trans_b` is set, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds are asserted above and strides describe the stated layouts.
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

/// Geometry of one 2-D convolution over a `channels×height×width` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds `input` (`channels×height×width`) into a `(C·k·k) × (Ho·Wo)` column matrix.
pub fn im2col(input: &[f64], geo: &ConvGeometry, cols: &mut [f64]) {
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let k = geo.kernel;
    let hw = geo.height * geo.width;
    for c in 0..geo.channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let out_row = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    let dst = &mut out_row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= geo.height as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        *d = if ix < 0 || ix >= geo.width as isize {
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

/// Adjoint of [`im2col`]: scatters columns back onto `grad_input`, accumulating.
pub fn col2im_add(cols: &[f64], geo: &ConvGeometry, grad_input: &mut [f64]) {
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let k = geo.kernel;
    let hw = geo.height * geo.width;
    for c in 0..geo.channels {
        let plane = &mut grad_input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let col_row = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for ox in 0..wo {
                        let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        if ix >= 0 && (ix as usize) < geo.width {
                            dst[ix as usize] += col_row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
