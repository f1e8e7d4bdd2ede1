//! Fully-connected layer: `y = x·Wᵀ + b`.

use alloc::vec;

use super::{GradBundle, LayerParams};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

fn dims(x: &Tensor, p: &LayerParams) -> Result<(usize, usize, usize)> {
    let (n, din) = x.batch_view();
    let (dout, wdin) = p.weights.dims2()?;
    if wdin != din || p.bias.len() != dout {
        return Err(Error::ShapeMismatch {
            op: "fully_connected",
            left: x.shape().to_vec(),
            right: p.weights.shape().to_vec(),
        });
    }
    Ok((n, din, dout))
}

/// Any N×… input is flattened to N×Din. Weights are Dout×Din.
pub fn fully_connected(x: &Tensor, p: &LayerParams) -> Result<Tensor> {
    let (n, din, dout) = dims(x, p)?;
    let mut out = vec![0.0; n * dout];
    kernels::gemm_nt(n, din, dout, x.data(), p.weights.data(), &mut out);
    for row in out.chunks_exact_mut(dout) {
        for (v, b) in row.iter_mut().zip(&p.bias) {
            *v += b;
        }
    }
    Tensor::new(vec![n, dout], out)
}

/// `d_input` keeps the (unflattened) shape of `x`.
pub fn fully_connected_backward(x: &Tensor, p: &LayerParams, d_out: &Tensor, param_grads: bool) -> Result<GradBundle> {
    let (n, din, dout) = dims(x, p)?;
    if d_out.shape() != [n, dout] {
        return Err(Error::ShapeMismatch {
            op: "fully_connected_backward",
            left: vec![n, dout],
            right: d_out.shape().to_vec(),
        });
    }
    let mut d_input = vec![0.0; n * din];
    kernels::gemm_nn(n, dout, din, d_out.data(), p.weights.data(), &mut d_input);
    let (d_weights, d_bias) = if param_grads {
        let mut dw = vec![0.0; dout * din];
        kernels::gemm_tn(dout, n, din, d_out.data(), x.data(), &mut dw);
        let mut db = vec![0.0; dout];
        for row in d_out.data().chunks_exact(dout) {
            for (acc, g) in db.iter_mut().zip(row) {
                *acc += g;
            }
        }
        (Some(Tensor::new(vec![dout, din], dw)?), Some(db))
    } else {
        (None, None)
    };
    Ok(GradBundle {
        d_input: Tensor::new(x.shape().to_vec(), d_input)?,
        d_weights,
        d_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5);
        let p = LayerParams::new(Tensor::identity(4), vec![0.0; 4]);
        assert_eq!(fully_connected(&x, &p).unwrap(), x);
    }

    #[test]
    fn hand_evaluated_case() {
        let x = Tensor::matrix(&[&[1.0, 2.0]]).unwrap();
        let p = LayerParams::new(Tensor::matrix(&[&[1.0, 1.0], &[0.0, 1.0]]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(fully_connected(&x, &p).unwrap().data(), &[4.0, 2.0]);
    }

    #[test]
    fn flattens_image_input() {
        let x = Tensor::from_fn(&[2, 2, 1, 2], |i| i as f64);
        let p = LayerParams::new(Tensor::full(&[1, 4], 1.0), vec![0.0]);
        let y = fully_connected(&x, &p).unwrap();
        assert_eq!(y.data(), &[6.0, 22.0]);
        let g = fully_connected_backward(&x, &p, &Tensor::full(&[2, 1], 1.0), true).unwrap();
        assert_eq!(g.d_input.shape(), x.shape());
        assert_eq!(g.d_bias.unwrap(), vec![2.0]);
        assert_eq!(g.d_weights.unwrap().data(), &[4.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn rejects_wrong_width() {
        let p = LayerParams::new(Tensor::zeros(&[2, 3]), vec![0.0; 2]);
        assert!(fully_connected(&Tensor::zeros(&[1, 4]), &p).is_err());
    }
}
