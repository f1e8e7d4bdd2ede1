use crate::error::Result;
use crate::tensor::Tensor;

/// `max(x, 0)` elementwise.
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes `d_out` where `x > 0`; the subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    x.zip_map(d_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clamps_negatives() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn idempotent(v in proptest::collection::vec(-10.0f64..10.0, 1..32)) {
            let x = Tensor::new(vec![v.len()], v).unwrap();
            prop_assert_eq!(relu(&relu(&x)), relu(&x));
        }
    }
}
