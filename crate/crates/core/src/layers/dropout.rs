//! Inverted dropout with an explicit seed.

use alloc::vec::Vec;

use super::Mode;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Per-element multiplier: 0 for dropped elements, `1/(1−p)` for survivors.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(Vec<f64>);

/// Eval mode and `rate == 0` are exact identities (no mask is drawn).
pub fn dropout(x: &Tensor, rate: f64, mode: Mode, seed: u64) -> Result<(Tensor, Option<DropoutMask>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(alloc::format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mut r = rng::rng(seed);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if r.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let y = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
    )?;
    Ok((y, Some(DropoutMask(mask))))
}

pub fn dropout_backward(mask: Option<&DropoutMask>, d_out: &Tensor) -> Result<Tensor> {
    match mask {
        None => Ok(d_out.clone()),
        Some(DropoutMask(m)) => {
            if m.len() != d_out.len() {
                return Err(Error::ShapeMismatch {
                    op: "dropout_backward",
                    left: alloc::vec![m.len()],
                    right: d_out.shape().to_vec(),
                });
            }
            Tensor::new(
                d_out.shape().to_vec(),
                d_out.data().iter().zip(m).map(|(g, k)| g * k).collect(),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities() {
        let x = Tensor::from_fn(&[4, 8], |i| i as f64);
        assert_eq!(dropout(&x, 0.5, Mode::Eval, 1).unwrap().0, x);
        assert_eq!(dropout(&x, 0.0, Mode::Train, 1).unwrap().0, x);
    }

    #[test]
    fn seeded_mask_is_reproducible() {
        let x = Tensor::full(&[1000], 1.0);
        let (a, _) = dropout(&x, 0.5, Mode::Train, 9).unwrap();
        let (b, _) = dropout(&x, 0.5, Mode::Train, 9).unwrap();
        let (c, _) = dropout(&x, 0.5, Mode::Train, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = a.data().iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn rejects_rate_one() {
        assert!(dropout(&Tensor::zeros(&[1]), 1.0, Mode::Train, 0).is_err());
    }
}
