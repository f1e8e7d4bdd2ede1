//! Per-channel batch normalization over batch and spatial axes.

use alloc::vec;
use alloc::vec::Vec;

use super::{GradBundle, LayerParams, RunningStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

fn check(x: &Tensor, p: &LayerParams) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if p.weights.len() != c || p.bias.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            left: x.shape().to_vec(),
            right: p.weights.shape().to_vec(),
        });
    }
    Ok((n, c, h * w))
}

fn running(p: &LayerParams) -> Result<&RunningStats> {
    p.running.as_ref().ok_or_else(|| Error::Parameter {
        name: "batch_norm".into(),
        reason: "running statistics missing".into(),
    })
}

/// Normalizes with batch statistics and folds them into the running
/// statistics (momentum [`BN_MOMENTUM`], biased variance).
pub fn batch_norm_train(x: &Tensor, p: &mut LayerParams) -> Result<(Tensor, BatchNormCache)> {
    let (n, c, plane) = check(x, p)?;
    let m = (n * plane) as f64;
    let data = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += data[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
        }
        mean[ch] = s / m;
        let mut v = 0.0;
        for b in 0..n {
            for &x in &data[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                v += (x - mean[ch]) * (x - mean[ch]);
            }
        }
        var[ch] = v / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
    let mut normalized = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            let (gamma, beta) = (p.weights.data()[ch], p.bias[ch]);
            for i in range {
                let xh = (data[i] - mean[ch]) * inv_std[ch];
                normalized.data_mut()[i] = xh;
                out.data_mut()[i] = gamma * xh + beta;
            }
        }
    }
    let stats = p.running.get_or_insert_with(|| RunningStats {
        mean: vec![0.0; c],
        var: vec![1.0; c],
    });
    for ch in 0..c {
        stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean[ch];
        stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * var[ch];
    }
    Ok((out, BatchNormCache { normalized, inv_std }))
}

/// Normalizes with the running statistics.
pub fn batch_norm_eval(x: &Tensor, p: &LayerParams) -> Result<Tensor> {
    let (n, c, plane) = check(x, p)?;
    let stats = running(p)?;
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / libm::sqrt(stats.var[ch] + BN_EPS);
            let (gamma, beta, mu) = (p.weights.data()[ch], p.bias[ch], stats.mean[ch]);
            for v in &mut out.data_mut()[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                *v = gamma * ((*v - mu) * inv) + beta;
            }
        }
    }
    Ok(out)
}

/// Backward of [`batch_norm_train`]:
/// `dx = γ·σ⁻¹/m · (m·dy − Σdy − x̂·Σ(dy·x̂))`.
pub fn batch_norm_backward(
    cache: &BatchNormCache,
    p: &LayerParams,
    d_out: &Tensor,
    param_grads: bool,
) -> Result<GradBundle> {
    cache.normalized.expect_same_shape("batch_norm_backward", d_out)?;
    let (n, c, h, w) = d_out.dims4()?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let (g, xh) = (d_out.data(), cache.normalized.data());
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xh = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                sum_dy[ch] += g[i];
                sum_dy_xh[ch] += g[i] * xh[i];
            }
        }
    }
    let mut d_input = Tensor::zeros(d_out.shape());
    for b in 0..n {
        for ch in 0..c {
            let k = p.weights.data()[ch] * cache.inv_std[ch] / m;
            for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                d_input.data_mut()[i] = k * (m * g[i] - sum_dy[ch] - xh[i] * sum_dy_xh[ch]);
            }
        }
    }
    Ok(GradBundle {
        d_input,
        d_weights: if param_grads {
            Some(Tensor::new(p.weights.shape().to_vec(), sum_dy_xh)?)
        } else {
            None
        },
        d_bias: param_grads.then_some(sum_dy),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Rng};

    fn unit_params(c: usize) -> LayerParams {
        LayerParams {
            weights: Tensor::full(&[c], 1.0),
            bias: vec![0.0; c],
            running: Some(RunningStats {
                mean: vec![0.0; c],
                var: vec![1.0; c],
            }),
        }
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut r = rng::rng(8);
        let x = Tensor::from_fn(&[3, 2, 4, 4], |i| r.gen_range(-30.0..50.0) + (i % 2) as f64);
        let mut p = unit_params(2);
        let (y, _) = batch_norm_train(&x, &mut p).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| y.data()[(b * 2 + ch) * 16..(b * 2 + ch + 1) * 16].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6, "{var}");
        }
        let stats = p.running.unwrap();
        assert!(stats.mean.iter().all(|&m| m != 0.0));
    }

    #[test]
    fn eval_mode_with_unit_stats() {
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 - 3.0);
        let y = batch_norm_eval(&x, &unit_params(2)).unwrap();
        let expected = x.scale(1.0 / (1.0 + BN_EPS).sqrt());
        assert!(y.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn eval_without_running_stats_is_an_error() {
        let p = LayerParams::new(Tensor::full(&[1], 1.0), vec![0.0]);
        assert!(batch_norm_eval(&Tensor::zeros(&[1, 1, 1, 1]), &p).is_err());
    }
}
