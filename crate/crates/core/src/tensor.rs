//! Dense row-major `f32` tensors.
//!
//! Volumetric tensors use the channel-major layout `[C, D, H, W]` with `W`
//! varying fastest. There is no implicit broadcasting anywhere in the crate:
//! every operation states the shapes it accepts.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&s| s == 0) {
            return Err(Error::shape(format!(
                "tensor shape must be non-empty with positive sizes, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&s| s > 0),
            "invalid tensor shape {shape:?}"
        );
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns `[C, D, H, W]`, rejecting tensors of any other rank.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[c, d, h, w] => Ok([c, d, h, w]),
            other => Err(Error::shape(format!(
                "expected a [C, D, H, W] tensor, got shape {other:?}"
            ))),
        }
    }

    /// Number of voxels per channel of a `[C, D, H, W]` tensor.
    pub fn spatial_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.spatial_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Tensor, alpha: f32) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot add tensors of shape {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f32) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Concatenates `[Ca, D, H, W]` and `[Cb, D, H, W]` along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let [ca, d, h, w] = a.dims4()?;
        let [cb, d2, h2, w2] = b.dims4()?;
        if (d, h, w) != (d2, h2, w2) {
            return Err(Error::shape(format!(
                "channel concat needs equal spatial dims, got {:?} and {:?}",
                &a.shape[1..],
                &b.shape[1..]
            )));
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor::new(vec![ca + cb, d, h, w], data)
    }

    /// Splits off the first `first` channels; inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, first: usize) -> Result<(Tensor, Tensor)> {
        let [c, d, h, w] = self.dims4()?;
        if first == 0 || first >= c {
            return Err(Error::shape(format!(
                "cannot split {c} channels at {first}"
            )));
        }
        let n = self.spatial_len();
        let (lo, hi) = self.data.split_at(first * n);
        Ok((
            Tensor::new(vec![first, d, h, w], lo.to_vec())?,
            Tensor::new(vec![c - first, d, h, w], hi.to_vec())?,
        ))
    }

    /// Copies the sub-block `[.., z0..z0+pd, y0..y0+ph, x0..x0+pw]`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Tensor> {
        let [c, d, h, w] = self.dims4()?;
        let dims = [d, h, w];
        for axis in 0..3 {
            if size[axis] == 0 || origin[axis] + size[axis] > dims[axis] {
                return Err(Error::shape(format!(
                    "crop of size {} at {} exceeds axis {axis} of length {}",
                    size[axis], origin[axis], dims[axis]
                )));
            }
        }
        let [pd, ph, pw] = size;
        let mut out = Vec::with_capacity(c * pd * ph * pw);
        for ch in 0..c {
            for z in 0..pd {
                for y in 0..ph {
                    let start = ((ch * d + origin[0] + z) * h + origin[1] + y) * w + origin[2];
                    out.extend_from_slice(&self.data[start..start + pw]);
                }
            }
        }
        Tensor::new(vec![c, pd, ph, pw], out)
    }

    /// Reverses the order of voxels along spatial axis `axis` (0 = D, 1 = H, 2 = W).
    pub fn flip_spatial(&self, axis: usize) -> Result<Tensor> {
        let [c, d, h, w] = self.dims4()?;
        let mut out = self.clone();
        for ch in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let (sz, sy, sx) = match axis {
                            0 => (d - 1 - z, y, x),
                            1 => (z, h - 1 - y, x),
                            2 => (z, y, w - 1 - x),
                            _ => return Err(Error::invalid(format!("no spatial axis {axis}"))),
                        };
                        out.data[((ch * d + z) * h + y) * w + x] =
                            self.data[((ch * d + sz) * h + sy) * w + sx];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Largest absolute elementwise difference; `None` if shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f32> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_buffers() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1, 2, 2], (5..13).map(|v| v as f32).collect()).unwrap();
        let cat = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), &[3, 1, 2, 2]);
        let (a2, b2) = cat.split_channels(1).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn crop_and_flip() {
        let t = Tensor::new(vec![1, 2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        let c = t.crop([1, 0, 1], [1, 2, 2]).unwrap();
        assert_eq!(c.data(), &[7.0, 8.0, 10.0, 11.0]);
        let f = t.flip_spatial(2).unwrap();
        assert_eq!(&f.data()[..3], &[2.0, 1.0, 0.0]);
        assert_eq!(f.flip_spatial(2).unwrap(), t);
        assert!(t.crop([1, 0, 0], [2, 1, 1]).is_err());
    }
}
