//! Raw loops over row-major buffers; matrix products go through a blocked GEMM.

/// `out = a · b` with explicit row/column strides for both operands.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (usize, usize), b: &[f64], b_strides: (usize, usize), out: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out[..m * n].iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    // SAFETY: the length checks above keep every strided access in bounds for
    // the given (m, k, n) and row-major/transposed stride pairs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out[m×n] = a[m×k] · b[k×n]
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// out[m×n] = a[m×k] · b[n×k]ᵀ
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, (k, 1), b, (1, k), out);
}

/// out[m×n] = a[k×m]ᵀ · b[k×n]
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, (1, m), b, (n, 1), out);
}

/// Geometry of a square-kernel NHWC convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    /// Number of patch rows (N·OH·OW).
    pub fn patches(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Patch width (K·K·C).
    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }
}

pub fn conv_geometry(input: &[usize], k: usize, pad: usize, stride: usize) -> Option<ConvGeometry> {
    if input.len() != 4 || stride == 0 || k == 0 {
        return None;
    }
    let (n, h, w, c) = (input[0], input[1], input[2], input[3]);
    if h + 2 * pad < k || w + 2 * pad < k {
        return None;
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    Some(ConvGeometry { n, h, w, c, k, pad, stride, oh, ow })
}

/// Unfold NHWC input into patch rows ordered (ky, kx, c).
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let pl = g.patch_len();
    let mut cols = vec![0.0; g.patches() * pl];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * pl;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let dst = row + (ky * g.k + kx) * g.c;
                        cols[dst..dst + g.c].copy_from_slice(&x[src..src + g.c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch rows back into NHWC layout.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let pl = g.patch_len();
    let mut x = vec![0.0; g.n * g.h * g.w * g.c];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * pl;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let src = row + (ky * g.k + kx) * g.c;
                        for c in 0..g.c {
                            x[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2×2 average pooling with stride 2 over NHWC; odd trailing rows/cols are dropped.
pub(crate) fn avg_pool2(x: &[f64], shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * oh * ow * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((b * oh + oy) * ow + ox) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                    for ch in 0..c {
                        out[o + ch] += 0.25 * x[i + ch];
                    }
                }
            }
        }
    }
    (vec![n, oh, ow, c], out)
}

pub(crate) fn avg_pool2_backward(g: &[f64], in_shape: &[usize]) -> Vec<f64> {
    let (n, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; n * h * w * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((b * oh + oy) * ow + ox) * c;
                for (dy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = ((b * h + 2 * oy + dy) * w + 2 * ox + ddx) * c;
                    for ch in 0..c {
                        dx[i + ch] += 0.25 * g[o + ch];
                    }
                }
            }
        }
    }
    dx
}
