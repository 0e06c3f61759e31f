use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu_forward(input: &Tensor, slope: f32) -> Tensor {
    input.map(|x| if x >= 0.0 { x } else { slope * x })
}

pub fn leaky_relu_inplace(t: &mut Tensor, slope: f32) {
    for x in t.data_mut() {
        if *x < 0.0 {
            *x *= slope;
        }
    }
}

/// Subgradient at 0 takes the positive branch.
pub fn leaky_relu_backward(input: &Tensor, grad_out: &Tensor, slope: f32) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "leaky relu grad {:?} does not match input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x >= 0.0 { g } else { slope * g })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_negative_inputs_pass_through() {
        let t = Tensor::new(vec![4], vec![0.0, 1.0, 2.5, 1e6]).unwrap();
        assert_eq!(leaky_relu_forward(&t, 0.01), t);
    }

    #[test]
    fn zero_slope_is_relu() {
        let t = Tensor::new(vec![3], vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(leaky_relu_forward(&t, 0.0).data(), &[0.0, 0.0, 3.0]);
        let mut u = t.clone();
        leaky_relu_inplace(&mut u, 0.0);
        assert_eq!(u.data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn subgradient_at_zero_is_positive_branch() {
        let t = Tensor::new(vec![2], vec![0.0, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        assert_eq!(
            leaky_relu_backward(&t, &g, 0.1).unwrap().data(),
            &[1.0, 0.1]
        );
    }
}
