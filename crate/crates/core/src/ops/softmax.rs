use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(input: &Tensor, temperature: f32) -> Result<[usize; 4]> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    let dims = input.dims4()?;
    if dims[0] < 2 {
        return Err(Error::shape(format!(
            "softmax over classes needs at least 2 channels, got {}",
            dims[0]
        )));
    }
    Ok(dims)
}

/// Per-voxel log-softmax over the class axis of `z / temperature`, in `f64`.
///
/// Returned as a flat `[C * voxels]` buffer in the input layout.
pub fn log_softmax_channels(input: &Tensor, temperature: f32) -> Result<Vec<f64>> {
    let [c, ..] = check(input, temperature)?;
    let n = input.spatial_len();
    let x = input.data();
    let t = temperature as f64;
    let mut out = vec![0f64; c * n];
    for v in 0..n {
        let max = (0..c)
            .map(|k| x[k * n + v] as f64 / t)
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = (0..c)
            .map(|k| (x[k * n + v] as f64 / t - max).exp())
            .sum::<f64>()
            .ln();
        for k in 0..c {
            out[k * n + v] = x[k * n + v] as f64 / t - max - lse;
        }
    }
    Ok(out)
}

/// Per-voxel `softmax(z / temperature)` over the class axis.
pub fn softmax_channels(input: &Tensor, temperature: f32) -> Result<Tensor> {
    let logp = log_softmax_channels(input, temperature)?;
    Tensor::new(
        input.shape().to_vec(),
        logp.into_iter().map(|l| l.exp() as f32).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn voxel_sums(p: &Tensor) -> Vec<f64> {
        let c = p.shape()[0];
        let n = p.spatial_len();
        (0..n)
            .map(|v| (0..c).map(|k| p.data()[k * n + v] as f64).sum())
            .collect()
    }

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let z = Tensor::full(&[4, 2, 1, 3], 7.5);
        for tau in [0.1, 1.0, 50.0] {
            let p = softmax_channels(&z, tau).unwrap();
            assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        }
    }

    #[test]
    fn huge_temperature_flattens() {
        let z = Tensor::new(vec![3, 1, 1, 1], vec![10.0, -4.0, 0.5]).unwrap();
        let p = softmax_channels(&z, 1e6).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-4));
    }

    #[test]
    fn two_class_scalar_case() {
        // e^2 / (e^2 + 1)
        let z = Tensor::new(vec![2, 1, 1, 1], vec![2.0, 0.0]).unwrap();
        let p = softmax_channels(&z, 1.0).unwrap();
        assert!((p.data()[0] - 0.8808).abs() < 1e-4);
        assert!((p.data()[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_temperature_and_single_class() {
        let z = Tensor::zeros(&[2, 1, 1, 1]);
        assert!(softmax_channels(&z, 0.0).is_err());
        assert!(softmax_channels(&z, -1.0).is_err());
        assert!(softmax_channels(&Tensor::zeros(&[1, 1, 1, 1]), 1.0).is_err());
    }

    #[test]
    fn rows_sum_to_one_and_ignore_voxel_shifts() {
        let data: Vec<f32> = (0..24).map(|i| ((i * 37) % 11) as f32 - 5.0).collect();
        let z = Tensor::new(vec![3, 2, 2, 2], data).unwrap();
        let p = softmax_channels(&z, 1.5).unwrap();
        assert!(voxel_sums(&p).iter().all(|s| (s - 1.0).abs() < 1e-6));
        let mut shifted = z.clone();
        let n = z.spatial_len();
        for k in 0..3 {
            for v in 0..n {
                shifted.data_mut()[k * n + v] += v as f32 * 3.0 - 4.0;
            }
        }
        let q = softmax_channels(&shifted, 1.5).unwrap();
        assert!(p.max_abs_diff(&q).unwrap() < 1e-6);
    }
}
