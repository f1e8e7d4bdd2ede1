//! Numeric kernels: GEMM variants, im2col/col2im, shape arithmetic, argmax.
//!
//! Every kernel sums its reduction axis in ascending index order from 0.0, so
//! results are bitwise reproducible and independent of the blocking used.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Shape2D, Tensor};

const PANEL: usize = 64;

/// `a (R×K) · b (K×C)` on tensors.
pub fn gemm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "gemm",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut out);
    Tensor::new(vec![m, n], out)
}

/// `c = a·b` with `a` m×k, `b` k×n, all row-major. `c` is overwritten.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for j0 in (0..n).step_by(PANEL) {
        let nb = PANEL.min(n - j0);
        let mut i = 0;
        while i + 4 <= m {
            let mut acc0 = [0.0f64; PANEL];
            let mut acc1 = [0.0f64; PANEL];
            let mut acc2 = [0.0f64; PANEL];
            let mut acc3 = [0.0f64; PANEL];
            for p in 0..k {
                let brow = &b[p * n + j0..p * n + j0 + nb];
                let a0 = a[i * k + p];
                let a1 = a[(i + 1) * k + p];
                let a2 = a[(i + 2) * k + p];
                let a3 = a[(i + 3) * k + p];
                for ((((x0, x1), x2), x3), &bv) in acc0[..nb]
                    .iter_mut()
                    .zip(acc1[..nb].iter_mut())
                    .zip(acc2[..nb].iter_mut())
                    .zip(acc3[..nb].iter_mut())
                    .zip(brow)
                {
                    *x0 += a0 * bv;
                    *x1 += a1 * bv;
                    *x2 += a2 * bv;
                    *x3 += a3 * bv;
                }
            }
            for (r, acc) in [&acc0, &acc1, &acc2, &acc3].into_iter().enumerate() {
                c[(i + r) * n + j0..(i + r) * n + j0 + nb].copy_from_slice(&acc[..nb]);
            }
            i += 4;
        }
        while i < m {
            let mut acc = [0.0f64; PANEL];
            for p in 0..k {
                let brow = &b[p * n + j0..p * n + j0 + nb];
                let av = a[i * k + p];
                for (x, &bv) in acc[..nb].iter_mut().zip(brow) {
                    *x += av * bv;
                }
            }
            c[i * n + j0..i * n + j0 + nb].copy_from_slice(&acc[..nb]);
            i += 1;
        }
    }
}

/// `c = a·bᵀ` with `a` m×k, `b` n×k. `c` is overwritten.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c = aᵀ·b` with `a` k×m, `b` k×n. `c` is overwritten.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let at = transpose(k, m, a);
    gemm_nn(m, k, n, &at, b, c);
}

/// Row-major transpose of an r×c matrix.
pub fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Four-lane dot product; lanes are combined in a fixed order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let chunks = a.len() / 4;
    for q in 0..chunks {
        let (x, y) = (&a[q * 4..q * 4 + 4], &b[q * 4..q * 4 + 4]);
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for p in chunks * 4..a.len() {
        tail += a[p] * b[p];
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + tail
}

/// `floor((input + 2·pad − kernel)/stride) + 1`.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::geometry("stride must be >= 1"));
    }
    if kernel == 0 {
        return Err(Error::geometry("kernel must be >= 1"));
    }
    let padded = input + 2 * pad;
    if kernel > padded {
        return Err(Error::geometry(alloc::format!(
            "kernel {kernel} larger than padded input {padded} ({input} + 2*{pad})"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Window geometry shared by convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: Shape2D,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn new(kernel: Shape2D, stride: usize, pad: usize) -> Self {
        Window { kernel, stride, pad }
    }

    pub fn square(kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        Ok(Window::new(Shape2D::square(kernel)?, stride, pad))
    }

    pub fn output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            conv_out_extent(h, self.kernel.height, self.stride, self.pad)?,
            conv_out_extent(w, self.kernel.width, self.stride, self.pad)?,
        ))
    }
}

/// Unfold one C×H×W image into a (C·kh·kw)×(Ho·Wo) column matrix.
///
/// Row `(c·kh + i)·kw + j` holds kernel tap `(c, i, j)`; column `oh·Wo + ow`
/// holds the receptive field of output position `(oh, ow)`. Out-of-image taps
/// are zero.
pub fn im2col_slice(image: &[f64], c: usize, h: usize, w: usize, win: Window) -> Result<Vec<f64>> {
    let (ho, wo) = win.output(h, w)?;
    let (kh, kw) = (win.kernel.height, win.kernel.width);
    let cols = ho * wo;
    let mut out = vec![0.0; c * kh * kw * cols];
    for ci in 0..c {
        let plane = &image[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oh in 0..ho {
                    let y = (oh * win.stride + ki) as isize - win.pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let src = &plane[y as usize * w..(y as usize + 1) * w];
                    for ow in 0..wo {
                        let x = (ow * win.stride + kj) as isize - win.pad as isize;
                        if x >= 0 && x < w as isize {
                            dst[oh * wo + ow] = src[x as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`im2col_slice`]: scatter-add columns back into a C×H×W image.
pub fn col2im_slice(cols: &[f64], c: usize, h: usize, w: usize, win: Window, image: &mut [f64]) -> Result<()> {
    let (ho, wo) = win.output(h, w)?;
    let (kh, kw) = (win.kernel.height, win.kernel.width);
    let ncols = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oh in 0..ho {
                    let y = (oh * win.stride + ki) as isize - win.pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + y as usize * w;
                    for ow in 0..wo {
                        let x = (ow * win.stride + kj) as isize - win.pad as isize;
                        if x >= 0 && x < w as isize {
                            image[base + x as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// [`im2col_slice`] on a 1×C×H×W tensor, returning the column matrix.
pub fn im2col(x: &Tensor, kernel: Shape2D, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if n != 1 {
        return Err(Error::geometry(alloc::format!(
            "im2col expects a single image, got batch of {n}"
        )));
    }
    let win = Window::new(kernel, stride, pad);
    let (ho, wo) = win.output(h, w)?;
    let cols = im2col_slice(x.data(), c, h, w, win)?;
    Tensor::new(vec![c * kernel.area(), ho * wo], cols)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> Result<usize> {
    let (first, rest) = v.split_first().ok_or(Error::EmptyInput("argmax"))?;
    let mut best = (0, *first);
    for (i, &x) in rest.iter().enumerate() {
        if x > best.1 {
            best = (i + 1, x);
        }
    }
    Ok(best.0)
}
