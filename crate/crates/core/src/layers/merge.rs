//! Channel concatenation (inception merges) and residual addition.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Concatenate N×Cᵢ×H×W tensors into N×ΣCᵢ×H×W, preserving order.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or(Error::EmptyInput("concat_channels"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut channels = 0;
    for x in xs {
        let (xn, xc, xh, xw) = x.dims4()?;
        if (xn, xh, xw) != (n, h, w) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: first.shape().to_vec(),
                right: x.shape().to_vec(),
            });
        }
        channels += xc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * channels * plane);
    for b in 0..n {
        for x in xs {
            let c = x.shape()[1];
            data.extend_from_slice(&x.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Tensor::new(alloc::vec![n, channels, h, w], data)
}

/// Inverse of [`concat_channels`]: split by the given channel counts.
pub fn split_channels(x: &Tensor, counts: &[usize]) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = x.dims4()?;
    if counts.iter().sum::<usize>() != c {
        return Err(Error::ShapeMismatch {
            op: "split_channels",
            left: x.shape().to_vec(),
            right: counts.to_vec(),
        });
    }
    let plane = h * w;
    let mut parts: Vec<Vec<f64>> = counts.iter().map(|k| Vec::with_capacity(n * k * plane)).collect();
    for b in 0..n {
        let mut start = (b * c) * plane;
        for (part, &k) in parts.iter_mut().zip(counts) {
            part.extend_from_slice(&x.data()[start..start + k * plane]);
            start += k * plane;
        }
    }
    parts
        .into_iter()
        .zip(counts)
        .map(|(d, &k)| Tensor::new(alloc::vec![n, k, h, w], d))
        .collect()
}

pub fn residual_add(x: &Tensor, shortcut: &Tensor) -> Result<Tensor> {
    x.add(shortcut)
}

/// Both addends receive `d_out` unchanged.
pub fn residual_add_backward(d_out: &Tensor) -> (Tensor, Tensor) {
    (d_out.clone(), d_out.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::from_fn(&[2, 2, 3, 3], |i| i as f64);
        let b = Tensor::from_fn(&[2, 3, 3, 3], |i| -(i as f64));
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[2, 5, 3, 3]);
        assert_eq!(y.at4(1, 2, 0, 0), b.at4(1, 0, 0, 0));
        let parts = split_channels(&y, &[2, 3]).unwrap();
        assert_eq!(parts, vec![a.clone(), b]);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::zeros(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1, 1, 2, 3]);
        assert!(concat_channels(&[&a, &b]).is_err());
        assert!(concat_channels(&[]).is_err());
    }

    #[test]
    fn residual_examples() {
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        assert_eq!(residual_add(&x, &Tensor::zeros(x.shape())).unwrap(), x);
        assert_eq!(residual_add(&x, &x).unwrap(), x.scale(2.0));
        let g = Tensor::full(x.shape(), 0.3);
        let (a, b) = residual_add_backward(&g);
        assert_eq!(a, g);
        assert_eq!(b, g);
    }
}
