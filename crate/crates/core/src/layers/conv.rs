//! 2-D convolution (cross-correlation, no kernel flip) via im2col + GEMM.

use alloc::vec;
use alloc::vec::Vec;

use super::{GradBundle, LayerParams};
use crate::error::{Error, Result};
use crate::kernels::{self, Window};
use crate::tensor::{Shape2D, Tensor};

/// Forward state needed by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvCache {
    input_shape: [usize; 4],
    window: Window,
    cols: Vec<Vec<f64>>,
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    window: Window,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn taps(&self) -> usize {
        self.cin * self.window.kernel.area()
    }
}

fn geometry(x: &Tensor, p: &LayerParams, stride: usize, pad: usize) -> Result<Geometry> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, wcin, kh, kw) = p.weights.dims4()?;
    if wcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d channels",
            left: x.shape().to_vec(),
            right: p.weights.shape().to_vec(),
        });
    }
    if p.bias.len() != cout {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            left: vec![cout],
            right: vec![p.bias.len()],
        });
    }
    let window = Window::new(Shape2D::new(kh, kw)?, stride, pad);
    let (ho, wo) = window.output(h, w)?;
    Ok(Geometry {
        n,
        cin,
        h,
        w,
        cout,
        window,
        ho,
        wo,
    })
}

fn run(x: &Tensor, p: &LayerParams, stride: usize, pad: usize, keep: bool) -> Result<(Tensor, Option<ConvCache>)> {
    let g = geometry(x, p, stride, pad)?;
    let plane = g.ho * g.wo;
    let in_size = g.cin * g.h * g.w;
    let mut out = vec![0.0; g.n * g.cout * plane];
    let mut kept = Vec::new();
    for i in 0..g.n {
        let image = &x.data()[i * in_size..(i + 1) * in_size];
        let cols = kernels::im2col_slice(image, g.cin, g.h, g.w, g.window)?;
        let dst = &mut out[i * g.cout * plane..(i + 1) * g.cout * plane];
        kernels::gemm_nn(g.cout, g.taps(), plane, p.weights.data(), &cols, dst);
        for (o, &b) in p.bias.iter().enumerate() {
            for v in &mut dst[o * plane..(o + 1) * plane] {
                *v += b;
            }
        }
        if keep {
            kept.push(cols);
        }
    }
    let y = Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out)?;
    let cache = keep.then_some(ConvCache {
        input_shape: [g.n, g.cin, g.h, g.w],
        window: g.window,
        cols: kept,
    });
    Ok((y, cache))
}

/// `x` is N×Cin×H×W, weights Cout×Cin×kh×kw, bias length Cout.
pub fn conv2d(x: &Tensor, p: &LayerParams, stride: usize, pad: usize) -> Result<Tensor> {
    run(x, p, stride, pad, false).map(|(y, _)| y)
}

pub fn conv2d_train(x: &Tensor, p: &LayerParams, stride: usize, pad: usize) -> Result<(Tensor, ConvCache)> {
    let (y, cache) = run(x, p, stride, pad, true)?;
    Ok((y, cache.expect("cache kept in train mode")))
}

/// Gradients w.r.t. input, and w.r.t. weights and bias when `param_grads`.
pub fn conv2d_backward(cache: &ConvCache, p: &LayerParams, d_out: &Tensor, param_grads: bool) -> Result<GradBundle> {
    let [n, cin, h, w] = cache.input_shape;
    let (cout, _, kh, kw) = p.weights.dims4()?;
    let (ho, wo) = cache.window.output(h, w)?;
    let expected = [n, cout, ho, wo];
    if d_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            left: expected.to_vec(),
            right: d_out.shape().to_vec(),
        });
    }
    let taps = cin * kh * kw;
    let plane = ho * wo;
    let w_t = kernels::transpose(cout, taps, p.weights.data());
    let mut d_input = vec![0.0; n * cin * h * w];
    let mut d_cols = vec![0.0; taps * plane];
    let mut d_weights = if param_grads {
        vec![0.0; cout * taps]
    } else {
        Vec::new()
    };
    let mut d_bias = if param_grads { vec![0.0; cout] } else { Vec::new() };
    let mut scratch = if param_grads {
        vec![0.0; cout * taps]
    } else {
        Vec::new()
    };
    for i in 0..n {
        let g = &d_out.data()[i * cout * plane..(i + 1) * cout * plane];
        kernels::gemm_nn(taps, cout, plane, &w_t, g, &mut d_cols);
        let dst = &mut d_input[i * cin * h * w..(i + 1) * cin * h * w];
        kernels::col2im_slice(&d_cols, cin, h, w, cache.window, dst)?;
        if param_grads {
            kernels::gemm_nt(cout, plane, taps, g, &cache.cols[i], &mut scratch);
            for (a, b) in d_weights.iter_mut().zip(&scratch) {
                *a += b;
            }
            for (o, db) in d_bias.iter_mut().enumerate() {
                *db += g[o * plane..(o + 1) * plane].iter().sum::<f64>();
            }
        }
    }
    Ok(GradBundle {
        d_input: Tensor::new(vec![n, cin, h, w], d_input)?,
        d_weights: if param_grads {
            Some(Tensor::new(p.weights.shape().to_vec(), d_weights)?)
        } else {
            None
        },
        d_bias: param_grads.then_some(d_bias),
    })
}
