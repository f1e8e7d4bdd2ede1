//! Central-difference gradient checking and the per-layer gradient suite.
//!
//! Each check draws a random projection `r` and differentiates the scalar
//! loss `L(x) = Σ r ⊙ f(x)`; the analytic side is the layer's backward pass
//! fed with `d_out = r`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernels::Window;
use crate::layers::{self, LayerParams, LrnParams, Mode, RunningStats};
use crate::rng::{self, ChaCha8Rng, Rng};
use crate::tensor::Tensor;

pub const GRAD_EPS: f64 = 1e-5;
/// Acceptance threshold on the maximum relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / f64::max(1e-8, libm::fabs(analytic) + libm::fabs(numeric))
}

/// Max relative error between `analytic` and the central-difference gradient
/// of `loss` at `x`.
pub fn grad_check<F>(mut loss: F, x: &Tensor, analytic: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    x.expect_same_shape("grad_check", analytic)?;
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = loss(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = loss(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Layer types covered by [`gradient_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckedLayer {
    Conv,
    FullyConnected,
    Relu,
    MaxPool,
    Lrn,
    BatchNorm,
    Dropout,
    SoftmaxCrossEntropy,
    Concat,
    ResidualAdd,
    GlobalAvgPool,
    ToyGraph,
}

impl CheckedLayer {
    pub const ALL: [CheckedLayer; 12] = [
        CheckedLayer::Conv,
        CheckedLayer::FullyConnected,
        CheckedLayer::Relu,
        CheckedLayer::MaxPool,
        CheckedLayer::Lrn,
        CheckedLayer::BatchNorm,
        CheckedLayer::Dropout,
        CheckedLayer::SoftmaxCrossEntropy,
        CheckedLayer::Concat,
        CheckedLayer::ResidualAdd,
        CheckedLayer::GlobalAvgPool,
        CheckedLayer::ToyGraph,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLayer::Conv => "conv",
            CheckedLayer::FullyConnected => "fc",
            CheckedLayer::Relu => "relu",
            CheckedLayer::MaxPool => "maxpool",
            CheckedLayer::Lrn => "lrn",
            CheckedLayer::BatchNorm => "batchnorm",
            CheckedLayer::Dropout => "dropout",
            CheckedLayer::SoftmaxCrossEntropy => "softmax-cross-entropy",
            CheckedLayer::Concat => "concat",
            CheckedLayer::ResidualAdd => "residual-add",
            CheckedLayer::GlobalAvgPool => "global-avg-pool",
            CheckedLayer::ToyGraph => "toy-graph",
        }
    }

    /// Max relative error of one seeded random instance.
    pub fn check(self, seed: u64) -> Result<f64> {
        let mut r = rng::rng(seed);
        match self {
            CheckedLayer::Conv => check_conv(&mut r),
            CheckedLayer::FullyConnected => check_fc(&mut r),
            CheckedLayer::Relu => check_relu(&mut r),
            CheckedLayer::MaxPool => check_maxpool(&mut r),
            CheckedLayer::Lrn => check_lrn(&mut r, seed % 2 == 1),
            CheckedLayer::BatchNorm => check_batchnorm(&mut r),
            CheckedLayer::Dropout => check_dropout(&mut r, seed),
            CheckedLayer::SoftmaxCrossEntropy => check_softmax_ce(&mut r),
            CheckedLayer::Concat => check_concat(&mut r),
            CheckedLayer::ResidualAdd => check_residual(&mut r),
            CheckedLayer::GlobalAvgPool => check_gap(&mut r),
            CheckedLayer::ToyGraph => crate::graph::toy_graph_check(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub layer: CheckedLayer,
    pub instances: usize,
    pub max_error: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_error < GRAD_TOLERANCE
    }
}

/// Runs `instances` seeded checks for every [`CheckedLayer`].
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<SuiteRow>> {
    CheckedLayer::ALL
        .iter()
        .enumerate()
        .map(|(k, &layer)| {
            let mut worst: f64 = 0.0;
            for i in 0..instances {
                let s = rng::derive_seed(seed, (k * 1_000_003 + i) as u64);
                worst = worst.max(layer.check(s)?);
            }
            Ok(SuiteRow {
                layer,
                instances,
                max_error: worst,
            })
        })
        .collect()
}

pub(crate) fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Uniform in ±[margin, 1): keeps values away from a kink at zero.
fn away_from_zero(shape: &[usize], margin: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(margin..1.0);
        if r.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn small_image(r: &mut ChaCha8Rng) -> Vec<usize> {
    vec![
        r.gen_range(1..=2),
        r.gen_range(1..=4),
        r.gen_range(3..=9),
        r.gen_range(3..=9),
    ]
}

fn with_weights(p: &LayerParams, w: &Tensor) -> LayerParams {
    LayerParams {
        weights: w.clone(),
        ..p.clone()
    }
}

fn with_bias(p: &LayerParams, b: &Tensor) -> LayerParams {
    LayerParams {
        bias: b.data().to_vec(),
        ..p.clone()
    }
}

fn bias_tensor(b: &[f64]) -> Tensor {
    Tensor::new(vec![b.len()], b.to_vec()).expect("non-empty bias")
}

fn check_conv(r: &mut ChaCha8Rng) -> Result<f64> {
    let shape = small_image(r);
    let (h, w) = (shape[2], shape[3]);
    let k = r.gen_range(1..=h.min(w).min(3));
    let stride = r.gen_range(1..=2);
    let pad = r.gen_range(0..=1);
    let cout = r.gen_range(1..=3);
    let x = random_tensor(&shape, r);
    let p = LayerParams::new(
        random_tensor(&[cout, shape[1], k, k], r),
        (0..cout).map(|_| r.gen_range(-1.0..1.0)).collect(),
    );
    let (y, cache) = layers::conv2d_train(&x, &p, stride, pad)?;
    let proj = random_tensor(y.shape(), r);
    let g = layers::conv2d_backward(&cache, &p, &proj, true)?;
    let e_x = grad_check(
        |t| layers::conv2d(t, &p, stride, pad)?.dot(&proj),
        &x,
        &g.d_input,
        GRAD_EPS,
    )?;
    let e_w = grad_check(
        |t| layers::conv2d(&x, &with_weights(&p, t), stride, pad)?.dot(&proj),
        &p.weights,
        g.d_weights.as_ref().expect("requested"),
        GRAD_EPS,
    )?;
    let e_b = grad_check(
        |t| layers::conv2d(&x, &with_bias(&p, t), stride, pad)?.dot(&proj),
        &bias_tensor(&p.bias),
        &bias_tensor(g.d_bias.as_ref().expect("requested")),
        GRAD_EPS,
    )?;
    Ok(e_x.max(e_w).max(e_b))
}

fn check_fc(r: &mut ChaCha8Rng) -> Result<f64> {
    let n = r.gen_range(1..=3);
    let din = r.gen_range(1..=12);
    let dout = r.gen_range(1..=6);
    let x = random_tensor(&[n, din], r);
    let p = LayerParams::new(
        random_tensor(&[dout, din], r),
        (0..dout).map(|_| r.gen_range(-1.0..1.0)).collect(),
    );
    let proj = random_tensor(&[n, dout], r);
    let g = layers::fully_connected_backward(&x, &p, &proj, true)?;
    let e_x = grad_check(|t| layers::fully_connected(t, &p)?.dot(&proj), &x, &g.d_input, GRAD_EPS)?;
    let e_w = grad_check(
        |t| layers::fully_connected(&x, &with_weights(&p, t))?.dot(&proj),
        &p.weights,
        g.d_weights.as_ref().expect("requested"),
        GRAD_EPS,
    )?;
    let e_b = grad_check(
        |t| layers::fully_connected(&x, &with_bias(&p, t))?.dot(&proj),
        &bias_tensor(&p.bias),
        &bias_tensor(g.d_bias.as_ref().expect("requested")),
        GRAD_EPS,
    )?;
    Ok(e_x.max(e_w).max(e_b))
}

fn check_relu(r: &mut ChaCha8Rng) -> Result<f64> {
    let shape = small_image(r);
    let x = away_from_zero(&shape, 1e-3, r);
    let proj = random_tensor(&shape, r);
    let g = layers::relu_backward(&x, &proj)?;
    grad_check(|t| layers::relu(t).dot(&proj), &x, &g, GRAD_EPS)
}

fn check_maxpool(r: &mut ChaCha8Rng) -> Result<f64> {
    let shape = small_image(r);
    let len: usize = shape.iter().product();
    // distinct values 0.01 apart keep every window's maximum unique by a margin
    let mut values: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
    for i in (1..len).rev() {
        let j = r.gen_range(0..=i);
        values.swap(i, j);
    }
    let x = Tensor::new(shape.clone(), values)?;
    let k = r.gen_range(1..=shape[2].min(shape[3]).min(3));
    let window = Window::square(k, r.gen_range(1..=2), 0)?;
    let (y, cache) = layers::maxpool(&x, window)?;
    let proj = random_tensor(y.shape(), r);
    let g = layers::maxpool_backward(&cache, &proj)?;
    grad_check(|t| layers::maxpool(t, window)?.0.dot(&proj), &x, &g, GRAD_EPS)
}

fn check_lrn(r: &mut ChaCha8Rng, strong: bool) -> Result<f64> {
    // the default α = 1e-4 makes the cross-channel term tiny; odd seeds use a
    // large α so that term is exercised too
    let p = if strong {
        LrnParams {
            alpha: 0.5,
            ..LrnParams::default()
        }
    } else {
        LrnParams::default()
    };
    let mut shape = small_image(r);
    shape[1] = r.gen_range(1..=6);
    let x = random_tensor(&shape, r).scale(3.0);
    let (y, cache) = layers::local_response_norm(&x, p)?;
    let proj = random_tensor(y.shape(), r);
    let g = layers::local_response_norm_backward(&cache, p, &proj)?;
    grad_check(|t| layers::local_response_norm(t, p)?.0.dot(&proj), &x, &g, GRAD_EPS)
}

fn check_batchnorm(r: &mut ChaCha8Rng) -> Result<f64> {
    let mut shape = small_image(r);
    shape[0] = 2;
    let c = shape[1];
    let x = random_tensor(&shape, r);
    let p = LayerParams {
        weights: Tensor::from_fn(&[c], |_| r.gen_range(0.5..1.5)),
        bias: (0..c).map(|_| r.gen_range(-0.5..0.5)).collect(),
        running: Some(RunningStats {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        }),
    };
    let mut fwd = p.clone();
    let (y, cache) = layers::batch_norm_train(&x, &mut fwd)?;
    let proj = random_tensor(y.shape(), r);
    let g = layers::batch_norm_backward(&cache, &p, &proj, true)?;
    let run = |x: &Tensor, p: &LayerParams| -> Result<f64> {
        let mut q = p.clone();
        layers::batch_norm_train(x, &mut q)?.0.dot(&proj)
    };
    let e_x = grad_check(|t| run(t, &p), &x, &g.d_input, GRAD_EPS)?;
    let e_w = grad_check(
        |t| run(&x, &with_weights(&p, t)),
        &p.weights,
        g.d_weights.as_ref().expect("requested"),
        GRAD_EPS,
    )?;
    let e_b = grad_check(
        |t| run(&x, &with_bias(&p, t)),
        &bias_tensor(&p.bias),
        &bias_tensor(g.d_bias.as_ref().expect("requested")),
        GRAD_EPS,
    )?;
    Ok(e_x.max(e_w).max(e_b))
}

fn check_dropout(r: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let shape = small_image(r);
    let x = random_tensor(&shape, r);
    let (y, mask) = layers::dropout(&x, 0.5, Mode::Train, seed)?;
    let proj = random_tensor(y.shape(), r);
    let g = layers::dropout_backward(mask.as_ref(), &proj)?;
    grad_check(
        |t| layers::dropout(t, 0.5, Mode::Train, seed)?.0.dot(&proj),
        &x,
        &g,
        GRAD_EPS,
    )
}

fn check_softmax_ce(r: &mut ChaCha8Rng) -> Result<f64> {
    let n = r.gen_range(1..=3);
    let k = r.gen_range(2..=4);
    let logits = random_tensor(&[n, k], r).scale(2.0);
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
    let (_, probs) = layers::softmax_cross_entropy(&logits, &labels)?;
    let g = layers::softmax_cross_entropy_backward(&probs, &labels)?;
    grad_check(
        |t| Ok(layers::softmax_cross_entropy(t, &labels)?.0),
        &logits,
        &g,
        GRAD_EPS,
    )
}

fn check_concat(r: &mut ChaCha8Rng) -> Result<f64> {
    let shape = small_image(r);
    let mut other = shape.clone();
    other[1] = r.gen_range(1..=3);
    let a = random_tensor(&shape, r);
    let b = random_tensor(&other, r);
    let y = layers::concat_channels(&[&a, &b])?;
    let proj = random_tensor(y.shape(), r);
    let parts = layers::split_channels(&proj, &[shape[1], other[1]])?;
    let e_a = grad_check(
        |t| layers::concat_channels(&[t, &b])?.dot(&proj),
        &a,
        &parts[0],
        GRAD_EPS,
    )?;
    let e_b = grad_check(
        |t| layers::concat_channels(&[&a, t])?.dot(&proj),
        &b,
        &parts[1],
        GRAD_EPS,
    )?;
    Ok(e_a.max(e_b))
}

fn check_residual(r: &mut ChaCha8Rng) -> Result<f64> {
    let shape = small_image(r);
    let a = random_tensor(&shape, r);
    let b = random_tensor(&shape, r);
    let proj = random_tensor(&shape, r);
    let (ga, gb) = layers::residual_add_backward(&proj);
    let e_a = grad_check(|t| layers::residual_add(t, &b)?.dot(&proj), &a, &ga, GRAD_EPS)?;
    let e_b = grad_check(|t| layers::residual_add(&a, t)?.dot(&proj), &b, &gb, GRAD_EPS)?;
    Ok(e_a.max(e_b))
}

fn check_gap(r: &mut ChaCha8Rng) -> Result<f64> {
    let shape = small_image(r);
    let x = random_tensor(&shape, r);
    let proj = random_tensor(&shape[..2], r);
    let g = layers::global_avg_pool_backward(&shape, &proj)?;
    grad_check(|t| layers::global_avg_pool(t)?.dot(&proj), &x, &g, GRAD_EPS)
}

/// Formats one suite row for the diagnostic stream.
pub fn describe(row: &SuiteRow) -> String {
    alloc::format!(
        "{:<24} instances={:<3} max_rel_err={:.3e} {}",
        row.layer.name(),
        row.instances,
        row.max_error,
        if row.passed() { "PASS" } else { "FAIL" }
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        for seed in 0..5 {
            assert!(CheckedLayer::FullyConnected.check(seed).unwrap() < 1e-7);
        }
    }

    #[test]
    fn conv_random_case() {
        assert!(CheckedLayer::Conv.check(17).unwrap() < 1e-4);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut r = rng::rng(5);
        let x = random_tensor(&[1, 2, 5, 5], &mut r);
        let p = LayerParams::new(random_tensor(&[2, 2, 3, 3], &mut r), vec![0.1, -0.2]);
        let (y, cache) = layers::conv2d_train(&x, &p, 1, 1).unwrap();
        let proj = random_tensor(y.shape(), &mut r);
        let g = layers::conv2d_backward(&cache, &p, &proj, false).unwrap();
        let bad = g.d_input.scale(1.01);
        let err = grad_check(|t| layers::conv2d(t, &p, 1, 1)?.dot(&proj), &x, &bad, GRAD_EPS).unwrap();
        assert!(err > 1e-3, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.01) - 0.01 / 2.01).abs() < 1e-15);
    }

    #[test]
    fn every_layer_small_suite() {
        for row in gradient_suite(4, 99).unwrap() {
            assert!(row.passed(), "{}", describe(&row));
        }
    }
}
