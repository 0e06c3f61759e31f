//! Images and label maps on a voxel grid with physical spacing.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// NIfTI orientation fields, carried through untouched.
///
/// Data is never reoriented: inference and metrics work on the stored grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    /// `pixdim[0]`, the qform handedness factor.
    pub qfac: f32,
    pub srow: [[f32; 4]; 3],
    pub xyzt_units: u8,
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation {
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            qfac: 1.0,
            srow: [[0.0; 4]; 3],
            // millimetres
            xyzt_units: 2,
        }
    }
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!(
            "voxel spacing must be positive and finite, got {spacing:?}"
        )));
    }
    Ok(())
}

/// Single-channel image `[1, D, H, W]`; spacing in mm along D, H, W.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Tensor,
    spacing: [f64; 3],
    pub orientation: Orientation,
}

impl Volume {
    pub fn new(data: Tensor, spacing: [f64; 3]) -> Result<Self> {
        let [c, ..] = data.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!(
                "volume axis 0 must be a single channel, got {c}"
            )));
        }
        check_spacing(spacing)?;
        Ok(Volume {
            data,
            spacing,
            orientation: Orientation::default(),
        })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }
}

/// Integer class map over a `[D, H, W]` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    dims: [usize; 3],
    labels: Vec<u16>,
    spacing: [f64; 3],
    pub orientation: Orientation,
}

impl LabelMap {
    pub fn new(dims: [usize; 3], labels: Vec<u16>, spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "label map dims must be positive, got {dims:?}"
            )));
        }
        let n: usize = dims.iter().product();
        if n != labels.len() {
            return Err(Error::shape(format!(
                "label map {dims:?} holds {n} voxels but buffer has {}",
                labels.len()
            )));
        }
        check_spacing(spacing)?;
        Ok(LabelMap {
            dims,
            labels,
            spacing,
            orientation: Orientation::default(),
        })
    }

    pub fn filled(dims: [usize; 3], label: u16, spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, vec![label; dims.iter().product()], spacing)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u16] {
        &mut self.labels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Fails with the first voxel index whose label is not below `num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        if let Some(i) = self.labels.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::invalid(format!(
                "label {} at voxel {i} is outside [0, {num_classes})",
                self.labels[i]
            )));
        }
        Ok(())
    }

    /// Voxel counts per class.
    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &l in &self.labels {
            if (l as usize) < num_classes {
                h[l as usize] += 1;
            }
        }
        h
    }

    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<LabelMap> {
        for axis in 0..3 {
            if size[axis] == 0 || origin[axis] + size[axis] > self.dims[axis] {
                return Err(Error::shape(format!(
                    "label crop of size {} at {} exceeds axis {axis} of length {}",
                    size[axis], origin[axis], self.dims[axis]
                )));
            }
        }
        let mut out = Vec::with_capacity(size.iter().product());
        for z in 0..size[0] {
            for y in 0..size[1] {
                let start = self.index(origin[0] + z, origin[1] + y, origin[2]);
                out.extend_from_slice(&self.labels[start..start + size[2]]);
            }
        }
        LabelMap::new(size, out, self.spacing)
    }

    pub fn flip(&self, axis: usize) -> Result<LabelMap> {
        if axis > 2 {
            return Err(Error::invalid(format!("no spatial axis {axis}")));
        }
        let [d, h, w] = self.dims;
        let mut out = self.clone();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let src = match axis {
                        0 => self.index(d - 1 - z, y, x),
                        1 => self.index(z, h - 1 - y, x),
                        _ => self.index(z, y, w - 1 - x),
                    };
                    out.labels[self.index(z, y, x)] = self.labels[src];
                }
            }
        }
        Ok(out)
    }

    pub fn same_grid(&self, other: &LabelMap) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "label maps differ in shape: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        if self.spacing != other.spacing {
            return Err(Error::shape(format!(
                "label maps differ in spacing: {:?} vs {:?}",
                self.spacing, other.spacing
            )));
        }
        Ok(())
    }
}
