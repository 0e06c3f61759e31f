//! Sliding-window prediction over whole volumes.
//!
//! Windows are laid out per axis at `i * step` (the last one clamped to the
//! far edge), with `step = ceil(patch * (1 - overlap))`. Each window's
//! softmax is accumulated with a blend weight and the sums are normalized
//! per voxel. Axes shorter than the patch are reflect-padded symmetrically
//! and the padded region is dropped on reassembly. Windows are visited in
//! a fixed z-y-x order, so accumulation order never depends on threading.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::softmax_channels;
use crate::tensor::Tensor;
use crate::unet::{capacity_for_patch, Network};
use crate::volume::{LabelMap, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Blend {
    Uniform,
    Gaussian,
}

impl fmt::Display for Blend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Blend::Uniform => "uniform",
            Blend::Gaussian => "gaussian",
        })
    }
}

impl FromStr for Blend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Blend::Uniform),
            "gaussian" => Ok(Blend::Gaussian),
            _ => Err(Error::invalid(format!("unknown blend mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlidingWindowConfig {
    pub patch_size: [usize; 3],
    /// Fraction of a patch shared by neighbouring windows, in `[0, 1)`.
    pub overlap: f64,
    pub blend: Blend,
    /// Gaussian sigma as a fraction of the patch edge.
    pub gaussian_sigma_scale: f64,
}

impl SlidingWindowConfig {
    pub fn new(patch_size: [usize; 3]) -> Self {
        SlidingWindowConfig {
            patch_size,
            overlap: 0.5,
            blend: Blend::Gaussian,
            gaussian_sigma_scale: 1.0 / 8.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::invalid(format!(
                "overlap must be in [0, 1), got {}",
                self.overlap
            )));
        }
        if self.patch_size.iter().any(|&p| p == 0) {
            return Err(Error::invalid("patch size must be positive"));
        }
        if self.blend == Blend::Gaussian && !(self.gaussian_sigma_scale > 0.0) {
            return Err(Error::invalid("gaussian sigma scale must be positive"));
        }
        Ok(())
    }

    pub fn steps(&self) -> [usize; 3] {
        self.patch_size
            .map(|p| ((p as f64 * (1.0 - self.overlap)).ceil() as usize).max(1))
    }

    /// Window origins along each axis for a volume of `dims` voxels.
    pub fn window_origins(&self, dims: [usize; 3]) -> [Vec<usize>; 3] {
        let steps = self.steps();
        std::array::from_fn(|a| {
            let (dim, patch, step) = (dims[a], self.patch_size[a], steps[a]);
            if dim <= patch {
                return vec![0];
            }
            let n = (dim - patch).div_ceil(step) + 1;
            (0..n).map(|i| (i * step).min(dim - patch)).collect()
        })
    }

    pub fn window_count(&self, dims: [usize; 3]) -> usize {
        self.window_origins(dims).iter().map(Vec::len).product()
    }

    /// Blend weight per patch voxel, strictly positive, peak 1.
    pub fn blend_weights(&self) -> Vec<f64> {
        let [pd, ph, pw] = self.patch_size;
        match self.blend {
            Blend::Uniform => vec![1.0; pd * ph * pw],
            Blend::Gaussian => {
                let axis = |p: usize| -> Vec<f64> {
                    let sigma = p as f64 * self.gaussian_sigma_scale;
                    let center = (p as f64 - 1.0) / 2.0;
                    (0..p)
                        .map(|i| (-(i as f64 - center).powi(2) / (2.0 * sigma * sigma)).exp())
                        .collect()
                };
                let (gz, gy, gx) = (axis(pd), axis(ph), axis(pw));
                let mut w = Vec::with_capacity(pd * ph * pw);
                for &a in &gz {
                    for &b in &gy {
                        for &c in &gx {
                            w.push(a * b * c);
                        }
                    }
                }
                let max = w.iter().cloned().fold(0.0, f64::max);
                w.iter_mut()
                    .for_each(|v| *v = (*v / max).max(f64::MIN_POSITIVE));
                w
            }
        }
    }
}

/// Smallest axis length that can be reflect-padded up to `patch`.
pub fn min_reflect_size(patch: usize) -> usize {
    (1..=patch)
        .find(|&m| {
            let total = patch - m;
            total - total / 2 < m
        })
        .unwrap_or(patch)
}

fn reflect(j: isize, dim: usize) -> usize {
    let d = dim as isize;
    let r = if j < 0 {
        -j
    } else if j >= d {
        2 * (d - 1) - j
    } else {
        j
    };
    r as usize
}

/// Reflect-pads `data` symmetrically so each axis reaches at least `patch`.
fn pad_to_patch(data: &Tensor, patch: [usize; 3]) -> Result<(Tensor, [usize; 3])> {
    let [c, d, h, w] = data.dims4()?;
    let dims = [d, h, w];
    let mut before = [0usize; 3];
    let mut padded = dims;
    for a in 0..3 {
        if dims[a] < patch[a] {
            let min = min_reflect_size(patch[a]);
            if dims[a] < min {
                return Err(Error::shape(format!(
                    "volume axis {a} has {} voxels; patch {} needs at least {min}",
                    dims[a], patch[a]
                )));
            }
            before[a] = (patch[a] - dims[a]) / 2;
            padded[a] = patch[a];
        }
    }
    if padded == dims {
        return Ok((data.clone(), before));
    }
    let [pd, ph, pw] = padded;
    let mut out = Vec::with_capacity(c * pd * ph * pw);
    for ch in 0..c {
        let plane = data.channel(ch);
        for z in 0..pd {
            let sz = reflect(z as isize - before[0] as isize, d);
            for y in 0..ph {
                let sy = reflect(y as isize - before[1] as isize, h);
                for x in 0..pw {
                    let sx = reflect(x as isize - before[2] as isize, w);
                    out.push(plane[(sz * h + sy) * w + sx]);
                }
            }
        }
    }
    Ok((Tensor::new(vec![c, pd, ph, pw], out)?, before))
}

/// Per-voxel argmax over classes; ties go to the lower class index.
pub fn argmax_labels(probs: &Tensor, spacing: [f64; 3]) -> Result<LabelMap> {
    let [c, d, h, w] = probs.dims4()?;
    let n = d * h * w;
    let p = probs.data();
    let labels = (0..n)
        .map(|v| {
            let mut best = 0;
            for k in 1..c {
                if p[k * n + v] > p[best * n + v] {
                    best = k;
                }
            }
            best as u16
        })
        .collect();
    LabelMap::new([d, h, w], labels, spacing)
}

/// Blended class probabilities `[C, D, H, W]` and their argmax label map.
pub fn predict(
    net: &Network,
    vol: &Volume,
    cfg: &SlidingWindowConfig,
) -> Result<(LabelMap, Tensor)> {
    cfg.validate()?;
    let plan = net.plan();
    if plan.input_channels != 1 {
        return Err(Error::shape(format!(
            "volumes are single-channel but the network expects {} input channels",
            plan.input_channels
        )));
    }
    plan.check_spatial(cfg.patch_size)?;
    let c = plan.num_classes;
    let dims = vol.dims();
    let (padded, before) = pad_to_patch(vol.data(), cfg.patch_size)?;
    let [_, pd, ph, pw] = padded.dims4()?;
    let pdims = [pd, ph, pw];
    let pn = pd * ph * pw;
    let weights = cfg.blend_weights();
    let origins = cfg.window_origins(pdims);

    let mut acc = vec![0f64; c * pn];
    let mut wsum = vec![0f64; pn];
    let [sd, sh, sw] = cfg.patch_size;
    let sn = sd * sh * sw;
    for &z0 in &origins[0] {
        for &y0 in &origins[1] {
            for &x0 in &origins[2] {
                let patch = padded.crop([z0, y0, x0], cfg.patch_size)?;
                let probs = softmax_channels(&net.forward(&patch)?, 1.0)?;
                let p = probs.data();
                for z in 0..sd {
                    for y in 0..sh {
                        let row = ((z0 + z) * ph + y0 + y) * pw + x0;
                        let prow = (z * sh + y) * sw;
                        for x in 0..sw {
                            let wv = weights[prow + x];
                            wsum[row + x] += wv;
                            for k in 0..c {
                                acc[k * pn + row + x] += wv * p[k * sn + prow + x] as f64;
                            }
                        }
                    }
                }
            }
        }
    }

    let [d, h, w] = dims;
    let n = d * h * w;
    let mut out = vec![0f32; c * n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let src = ((z + before[0]) * ph + y + before[1]) * pw + x + before[2];
                let dst = (z * h + y) * w + x;
                for k in 0..c {
                    out[k * n + dst] = (acc[k * pn + src] / wsum[src]) as f32;
                }
            }
        }
    }
    let probs = Tensor::new(vec![c, d, h, w], out)?;
    let mut labels = argmax_labels(&probs, vol.spacing())?;
    labels.orientation = vol.orientation;
    Ok((labels, probs))
}

/// Analytic FLOPs of [`predict`]: window count times per-patch FLOPs.
pub fn count_inference_cost(net: &Network, vol: &Volume, cfg: &SlidingWindowConfig) -> Result<u64> {
    cfg.validate()?;
    let per_patch = capacity_for_patch(net.plan(), cfg.patch_size)?.flops_per_patch;
    let padded = std::array::from_fn(|a| vol.dims()[a].max(cfg.patch_size[a]));
    Ok(cfg.window_count(padded) as u64 * per_patch)
}
