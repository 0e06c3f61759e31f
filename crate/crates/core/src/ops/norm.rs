use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to the per-channel variance before the square root.
pub const NORM_EPS: f32 = 1e-5;

/// Saved forward state for [`instance_norm_backward`].
#[derive(Clone, Debug)]
pub struct NormCache {
    /// Standardized input (before gain and shift).
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct NormGrads {
    pub input: Tensor,
    pub gain: Tensor,
    pub shift: Tensor,
}

fn check(input: &Tensor, gain: &Tensor, shift: &Tensor) -> Result<usize> {
    let [c, ..] = input.dims4()?;
    if input.spatial_len() < 2 {
        return Err(Error::shape(
            "instance norm needs more than one voxel per channel".to_string(),
        ));
    }
    for (name, t) in [("gain", gain), ("shift", shift)] {
        if t.shape() != [c] {
            return Err(Error::shape(format!(
                "instance norm {name} axis 0: expected [{c}], got {:?}",
                t.shape()
            )));
        }
    }
    Ok(c)
}

pub fn instance_norm_forward_cached(
    input: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
    eps: f32,
) -> Result<(Tensor, NormCache)> {
    let c = check(input, gain, shift)?;
    let n = input.spatial_len();
    let mut normalized = input.clone();
    let mut out = input.clone();
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let x = input.channel(ch);
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        inv_std.push(inv);
        let (g, b) = (gain.data()[ch] as f64, shift.data()[ch] as f64);
        for ((xh, y), &v) in normalized
            .channel_mut(ch)
            .iter_mut()
            .zip(out.channel_mut(ch).iter_mut())
            .zip(x)
        {
            let s = (v as f64 - mean) * inv;
            *xh = s as f32;
            *y = (g * s + b) as f32;
        }
    }
    Ok((
        out,
        NormCache {
            normalized,
            inv_std,
        },
    ))
}

/// Per-channel standardization followed by `gain * x + shift`.
pub fn instance_norm_forward(
    input: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    instance_norm_forward_cached(input, gain, shift, eps).map(|(out, _)| out)
}

pub fn instance_norm_backward(
    cache: &NormCache,
    gain: &Tensor,
    grad_out: &Tensor,
) -> Result<NormGrads> {
    let xhat = &cache.normalized;
    if xhat.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "instance norm grad {:?} does not match input {:?}",
            grad_out.shape(),
            xhat.shape()
        )));
    }
    let c = xhat.shape()[0];
    let n = xhat.spatial_len() as f64;
    let mut grad_in = grad_out.clone();
    let mut grad_gain = vec![0f32; c];
    let mut grad_shift = vec![0f32; c];
    for ch in 0..c {
        let dy = grad_out.channel(ch);
        let xh = xhat.channel(ch);
        let sum_dy: f64 = dy.iter().map(|&v| v as f64).sum();
        let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum();
        grad_gain[ch] = sum_dy_xh as f32;
        grad_shift[ch] = sum_dy as f32;
        let scale = gain.data()[ch] as f64 * cache.inv_std[ch] / n;
        for ((gi, &d), &x) in grad_in.channel_mut(ch).iter_mut().zip(dy).zip(xh) {
            *gi = (scale * (n * d as f64 - sum_dy - x as f64 * sum_dy_xh)) as f32;
        }
    }
    Ok(NormGrads {
        input: grad_in,
        gain: Tensor::new(vec![c], grad_gain)?,
        shift: Tensor::new(vec![c], grad_shift)?,
    })
}
