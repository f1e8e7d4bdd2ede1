//! Cross-channel local response normalization:
//! `y_c = x_c / (k + α·Σ x_{c'}²)^β` over channels `c' ∈ [c − ⌊n/2⌋, c + ⌊n/2⌋]`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrnParams {
    pub k: f64,
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        LrnParams {
            k: 2.0,
            n: 5,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LrnCache {
    input: Tensor,
    /// `k + α·Σ x²` per element.
    scale: Vec<f64>,
}

fn window(c: usize, channels: usize, n: usize) -> core::ops::RangeInclusive<usize> {
    let half = n / 2;
    c.saturating_sub(half)..=(c + half).min(channels - 1)
}

pub fn local_response_norm(x: &Tensor, p: LrnParams) -> Result<(Tensor, LrnCache)> {
    let (n, c, h, w) = x.dims4()?;
    if p.n == 0 {
        return Err(Error::geometry("LRN window size must be >= 1"));
    }
    let plane = h * w;
    let data = x.data();
    let mut scale = Vec::with_capacity(data.len());
    let mut out = Vec::with_capacity(data.len());
    for b in 0..n {
        let img = &data[b * c * plane..(b + 1) * c * plane];
        for ch in 0..c {
            for s in 0..plane {
                let sum: f64 = window(ch, c, p.n)
                    .map(|q| img[q * plane + s] * img[q * plane + s])
                    .sum();
                let sc = p.k + p.alpha * sum;
                scale.push(sc);
                out.push(img[ch * plane + s] * libm::pow(sc, -p.beta));
            }
        }
    }
    let y = Tensor::new(x.shape().to_vec(), out)?;
    Ok((
        y,
        LrnCache {
            input: x.clone(),
            scale,
        },
    ))
}

pub fn local_response_norm_backward(cache: &LrnCache, p: LrnParams, d_out: &Tensor) -> Result<Tensor> {
    cache.input.expect_same_shape("local_response_norm_backward", d_out)?;
    let (n, c, h, w) = cache.input.dims4()?;
    let plane = h * w;
    let x = cache.input.data();
    let g = d_out.data();
    // t_c = g_c · x_c · s_c^(−β−1), shared by every j in c's window
    let t: Vec<f64> = (0..x.len())
        .map(|i| g[i] * x[i] * libm::pow(cache.scale[i], -p.beta - 1.0))
        .collect();
    let mut d = Vec::with_capacity(x.len());
    for b in 0..n {
        let off = b * c * plane;
        for ch in 0..c {
            for s in 0..plane {
                let i = off + ch * plane + s;
                let cross: f64 = window(ch, c, p.n).map(|q| t[off + q * plane + s]).sum();
                d.push(g[i] * libm::pow(cache.scale[i], -p.beta) - 2.0 * p.alpha * p.beta * x[i] * cross);
            }
        }
    }
    Tensor::new(cache.input.shape().to_vec(), d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input() {
        let (y, _) = local_response_norm(&Tensor::zeros(&[1, 6, 2, 2]), LrnParams::default()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_channel_hand_value() {
        let (y, _) = local_response_norm(&Tensor::full(&[1, 1, 1, 1], 1.0), LrnParams::default()).unwrap();
        let expected = 1.0 / (2.0f64 + 1e-4).powf(0.75);
        assert!((y.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn window_is_clipped_at_edges() {
        assert_eq!(window(0, 8, 5), 0..=2);
        assert_eq!(window(4, 8, 5), 2..=6);
        assert_eq!(window(7, 8, 5), 5..=7);
        assert_eq!(window(0, 1, 5), 0..=0);
    }
}
