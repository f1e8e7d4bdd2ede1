//! Max pooling and global average pooling.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::Window;
use crate::tensor::Tensor;

/// Winner index (into the flat input) for every output element.
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    input_shape: Vec<usize>,
    winners: Vec<usize>,
}

/// Max over each window. Padded taps never win; the first maximum in
/// row-major window order wins ties.
pub fn maxpool(x: &Tensor, window: Window) -> Result<(Tensor, MaxPoolCache)> {
    let (n, c, h, w) = x.dims4()?;
    let (kh, kw) = (window.kernel.height, window.kernel.width);
    if 2 * window.pad > kh.min(kw) {
        return Err(Error::geometry(alloc::format!(
            "pool padding {} exceeds half the {kh}x{kw} window",
            window.pad
        )));
    }
    let (ho, wo) = window.output(h, w)?;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut winners = Vec::with_capacity(n * c * ho * wo);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut at = usize::MAX;
                for i in 0..kh {
                    let y = (oy * window.stride + i) as isize - window.pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for j in 0..kw {
                        let xx = (ox * window.stride + j) as isize - window.pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let idx = base + y as usize * w + xx as usize;
                        if at == usize::MAX || data[idx] > best {
                            best = data[idx];
                            at = idx;
                        }
                    }
                }
                out.push(best);
                winners.push(at);
            }
        }
    }
    let y = Tensor::new(vec![n, c, ho, wo], out)?;
    Ok((
        y,
        MaxPoolCache {
            input_shape: x.shape().to_vec(),
            winners,
        },
    ))
}

/// Routes each upstream gradient to its window's winner; overlaps accumulate.
pub fn maxpool_backward(cache: &MaxPoolCache, d_out: &Tensor) -> Result<Tensor> {
    if d_out.len() != cache.winners.len() {
        return Err(Error::ShapeMismatch {
            op: "maxpool_backward",
            left: vec![cache.winners.len()],
            right: d_out.shape().to_vec(),
        });
    }
    let mut d_input = Tensor::zeros(&cache.input_shape);
    let dst = d_input.data_mut();
    for (&idx, &g) in cache.winners.iter().zip(d_out.data()) {
        dst[idx] += g;
    }
    Ok(d_input)
}

/// N×C×H×W → N×C spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let area = (h * w) as f64;
    let data = x
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f64>() / area)
        .collect();
    Tensor::new(vec![n, c], data)
}

/// Spreads each N×C gradient uniformly (factor `1/(H·W)`) over its plane.
pub fn global_avg_pool_backward(input_shape: &[usize], d_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = <[usize; 4]>::try_from(input_shape)
        .map_err(|_| Error::geometry("global_avg_pool_backward needs a rank-4 input shape"))?;
    if d_out.shape() != [n, c] {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool_backward",
            left: vec![n, c],
            right: d_out.shape().to_vec(),
        });
    }
    let area = (h * w) as f64;
    let mut data = Vec::with_capacity(n * c * h * w);
    for &g in d_out.data() {
        data.extend(core::iter::repeat_n(g / area, h * w));
    }
    Tensor::new(input_shape.to_vec(), data)
}
