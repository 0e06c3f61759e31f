//! 3D convolution and transposed convolution, forward and backward.
//!
//! All three kernels work on the relation `i = o * stride + k - pad` between a
//! correlation input index `i` and output index `o`. A transposed convolution
//! is the adjoint of that relation, so it reuses the same kernels with the
//! roles of input and output swapped:
//!
//! | operation                  | kernel                |
//! |----------------------------|-----------------------|
//! | conv forward               | `correlate`           |
//! | conv grad wrt input        | `correlate_adjoint`   |
//! | transposed forward         | `correlate_adjoint`   |
//! | transposed grad wrt input  | `correlate`           |
//! | both grads wrt weights     | `correlate_weight_grad` |
//!
//! Each kernel lowers to an `f64` matrix product over an im2col buffer, one
//! slab of output z-planes at a time; results are rounded to `f32` once. The
//! slab partition depends on the geometry only and partial results are
//! combined in slab order, so every element has a fixed summation order
//! regardless of the number of threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvSpec {
    /// Stride-1 convolution with "same" zero padding for an odd cubic kernel.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: [kernel; 3],
            stride: [1; 3],
            padding: [kernel / 2; 3],
        }
    }

    /// Output spatial size of a convolution over `input` voxels.
    pub fn conv_output(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            let span = input[axis] + 2 * self.padding[axis];
            if span < self.kernel[axis] {
                return Err(Error::shape(format!(
                    "axis {axis}: input {} with padding {} is smaller than kernel {}",
                    input[axis], self.padding[axis], self.kernel[axis]
                )));
            }
            out[axis] = (span - self.kernel[axis]) / self.stride[axis] + 1;
        }
        Ok(out)
    }

    /// Output spatial size of a transposed convolution over `input` voxels.
    pub fn transposed_output(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            let full = (input[axis] - 1) * self.stride[axis] + self.kernel[axis];
            if full <= 2 * self.padding[axis] {
                return Err(Error::shape(format!(
                    "axis {axis}: transposed output would be empty"
                )));
            }
            out[axis] = full - 2 * self.padding[axis];
        }
        Ok(out)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn check_basic(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid(
                "convolution channel counts must be positive",
            ));
        }
        for axis in 0..3 {
            if self.kernel[axis] == 0 || self.stride[axis] == 0 {
                return Err(Error::invalid(format!(
                    "axis {axis}: kernel and stride must be positive"
                )));
            }
        }
        Ok(())
    }

    fn check_odd(&self) -> Result<()> {
        self.check_basic()?;
        if let Some(axis) = (0..3).find(|&a| self.kernel[a] % 2 == 0) {
            return Err(Error::invalid(format!(
                "axis {axis}: convolution kernel {} must be odd",
                self.kernel[axis]
            )));
        }
        Ok(())
    }
}

/// Gradients of a (transposed) convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Geometry of one correlation: `corr_in` is the side indexed by `o * s + k - p`.
#[derive(Clone, Copy, Debug)]
struct Geom {
    in_c: usize,
    out_c: usize,
    corr_in: [usize; 3],
    corr_out: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Geom {
    fn in_plane(&self) -> usize {
        self.corr_in.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.corr_out.iter().product()
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output indices `o` along `axis` whose input `o * s + k - p` is in bounds.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p) = (self.stride[axis], self.pad[axis]);
        let n_in = self.corr_in[axis] as isize;
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi_num = n_in - 1 + p as isize - k as isize;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num as usize / s + 1).min(self.corr_out[axis]);
        (lo, hi.max(lo))
    }

    fn in_index(&self, axis: usize, o: usize, k: usize) -> usize {
        o * self.stride[axis] + k - self.pad[axis]
    }
}

/// Column-matrix entries per slab; bounds the im2col buffer to 8 MiB.
const SLAB_ELEMS: usize = 1 << 20;

/// Output z-ranges processed as one matrix product. Depends on the geometry
/// only, so the partition (and every summation order) is thread-independent.
fn slabs(g: &Geom) -> Vec<(usize, usize)> {
    let [od, oh, ow] = g.corr_out;
    let k = g.in_c * g.kvol();
    let rows = (SLAB_ELEMS / (k * oh * ow).max(1)).clamp(1, od.max(1));
    (0..od)
        .step_by(rows)
        .map(|z0| (z0, (z0 + rows).min(od)))
        .collect()
}

/// `C[m x n] = A[m x k] B[k x n] + beta C`, row/column strides in elements.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, cc: usize| (r - 1) * rs + (cc - 1) * cs;
    assert!(last(rsa, csa, m, k) < a.len());
    assert!(last(rsb, csb, k, n) < b.len());
    assert!(last(rsc, 1, m, n) < c.len());
    // SAFETY: the asserts above keep every strided access in bounds, and `c`
    // is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Column matrix `[in_c * kvol, n]` of the slab: row `(ci, k)`, column `o`
/// holds `x[ci][o*s + k - p]`, or 0 in the padding.
fn im2col(g: &Geom, x: &[f32], (z0, z1): (usize, usize)) -> Vec<f64> {
    let [_, oh, ow] = g.corr_out;
    let [_, ih, iw] = g.corr_in;
    let [kd, kh, kw] = g.kernel;
    let n = (z1 - z0) * oh * ow;
    let in_plane = g.in_plane();
    let mut col = vec![0f64; g.in_c * g.kvol() * n];
    let mut rows = col.chunks_mut(n);
    for ci in 0..g.in_c {
        let xplane = &x[ci * in_plane..(ci + 1) * in_plane];
        for kz in 0..kd {
            let (vz0, vz1) = g.valid(0, kz);
            for ky in 0..kh {
                let (vy0, vy1) = g.valid(1, ky);
                for kx in 0..kw {
                    let row = rows.next().expect("one row per (channel, tap)");
                    let (vx0, vx1) = g.valid(2, kx);
                    if vx0 >= vx1 {
                        continue;
                    }
                    let ix0 = g.in_index(2, vx0, kx);
                    for oz in z0.max(vz0)..z1.min(vz1) {
                        let iz = g.in_index(0, oz, kz);
                        for oy in vy0..vy1 {
                            let iy = g.in_index(1, oy, ky);
                            let src = &xplane[(iz * ih + iy) * iw + ix0..];
                            let dst = &mut row[((oz - z0) * oh + oy) * ow + vx0..][..vx1 - vx0];
                            for (i, d) in dst.iter_mut().enumerate() {
                                *d = src[i * g.stride[2]] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds the column matrix into `acc`.
fn col2im(g: &Geom, col: &[f64], (z0, z1): (usize, usize), acc: &mut [f64]) {
    let [_, oh, ow] = g.corr_out;
    let [_, ih, iw] = g.corr_in;
    let [kd, kh, kw] = g.kernel;
    let n = (z1 - z0) * oh * ow;
    let in_plane = g.in_plane();
    let mut rows = col.chunks(n);
    for ci in 0..g.in_c {
        let aplane = &mut acc[ci * in_plane..(ci + 1) * in_plane];
        for kz in 0..kd {
            let (vz0, vz1) = g.valid(0, kz);
            for ky in 0..kh {
                let (vy0, vy1) = g.valid(1, ky);
                for kx in 0..kw {
                    let row = rows.next().expect("one row per (channel, tap)");
                    let (vx0, vx1) = g.valid(2, kx);
                    if vx0 >= vx1 {
                        continue;
                    }
                    let ix0 = g.in_index(2, vx0, kx);
                    for oz in z0.max(vz0)..z1.min(vz1) {
                        let iz = g.in_index(0, oz, kz);
                        for oy in vy0..vy1 {
                            let iy = g.in_index(1, oy, ky);
                            let src = &row[((oz - z0) * oh + oy) * ow + vx0..][..vx1 - vx0];
                            let dst = &mut aplane[(iz * ih + iy) * iw + ix0..];
                            for (i, &v) in src.iter().enumerate() {
                                dst[i * g.stride[2]] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[co][o] = bias[co] + sum_{ci,k} w[co][ci][k] * x[ci][o*s + k - p]`.
fn correlate(g: &Geom, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let [_, oh, ow] = g.corr_out;
    let k = g.in_c * g.kvol();
    let out_plane = g.out_plane();
    let wf = widen(w);
    let parts: Vec<((usize, usize), Vec<f64>)> = slabs(g)
        .into_par_iter()
        .map(|slab| {
            let col = im2col(g, x, slab);
            let n = (slab.1 - slab.0) * oh * ow;
            let mut c = vec![0f64; g.out_c * n];
            gemm(g.out_c, k, n, &wf, (k, 1), &col, (n, 1), 0.0, &mut c, n);
            (slab, c)
        })
        .collect();
    let mut out = vec![0f32; g.out_c * out_plane];
    for ((z0, z1), c) in parts {
        let n = (z1 - z0) * oh * ow;
        for co in 0..g.out_c {
            let b = bias.map_or(0.0, |b| b[co] as f64);
            let dst = &mut out[co * out_plane + z0 * oh * ow..][..n];
            for (d, &v) in dst.iter_mut().zip(&c[co * n..(co + 1) * n]) {
                *d = (v + b) as f32;
            }
        }
    }
    out
}

/// Adjoint of [`correlate`] with respect to its input:
/// `out[ci][o*s + k - p] += w[co][ci][k] * y[co][o]`.
fn correlate_adjoint(g: &Geom, y: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let [_, oh, ow] = g.corr_out;
    let k = g.in_c * g.kvol();
    let out_plane = g.out_plane();
    let wf = widen(w);
    let yf = widen(y);
    let parts: Vec<((usize, usize), Vec<f64>)> = slabs(g)
        .into_par_iter()
        .map(|slab| {
            let n = (slab.1 - slab.0) * oh * ow;
            let mut col = vec![0f64; k * n];
            let ys = &yf[slab.0 * oh * ow..];
            gemm(
                k,
                g.out_c,
                n,
                &wf,
                (1, k),
                ys,
                (out_plane, 1),
                0.0,
                &mut col,
                n,
            );
            (slab, col)
        })
        .collect();
    let in_plane = g.in_plane();
    let mut acc = vec![0f64; g.in_c * in_plane];
    // slab order, so the scatter sums in a fixed order
    for (slab, col) in parts {
        col2im(g, &col, slab, &mut acc);
    }
    acc.chunks(in_plane)
        .enumerate()
        .flat_map(|(ci, plane)| {
            let b = bias.map_or(0.0, |b| b[ci] as f64);
            plane.iter().map(move |&v| (v + b) as f32)
        })
        .collect()
}

/// `gw[co][ci][k] = sum_o y[co][o] * x[ci][o*s + k - p]`.
fn correlate_weight_grad(g: &Geom, x: &[f32], y: &[f32]) -> Vec<f32> {
    let [_, oh, ow] = g.corr_out;
    let k = g.in_c * g.kvol();
    let out_plane = g.out_plane();
    let yf = widen(y);
    let parts: Vec<Vec<f64>> = slabs(g)
        .into_par_iter()
        .map(|slab| {
            let n = (slab.1 - slab.0) * oh * ow;
            let col = im2col(g, x, slab);
            let mut gw = vec![0f64; g.out_c * k];
            let ys = &yf[slab.0 * oh * ow..];
            gemm(
                g.out_c,
                n,
                k,
                ys,
                (out_plane, 1),
                &col,
                (1, n),
                0.0,
                &mut gw,
                k,
            );
            gw
        })
        .collect();
    let mut total = vec![0f64; g.out_c * k];
    for part in parts {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total.into_iter().map(|v| v as f32).collect()
}

fn channel_sums(t: &Tensor) -> Vec<f32> {
    let c = t.shape()[0];
    (0..c)
        .map(|ch| t.channel(ch).iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect()
}

fn check_weights(
    spec: &ConvSpec,
    weights: &Tensor,
    bias: Option<&Tensor>,
    transposed: bool,
) -> Result<()> {
    let (lead, second) = if transposed {
        (spec.in_channels, spec.out_channels)
    } else {
        (spec.out_channels, spec.in_channels)
    };
    let expected = [lead, second, spec.kernel[0], spec.kernel[1], spec.kernel[2]];
    if weights.shape() != expected {
        let axis = weights
            .shape()
            .iter()
            .zip(&expected)
            .position(|(a, b)| a != b)
            .unwrap_or(0);
        return Err(Error::shape(format!(
            "weight axis {axis}: expected shape {expected:?}, got {:?}",
            weights.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape(format!(
                "bias axis 0: expected [{}], got {:?}",
                spec.out_channels,
                b.shape()
            )));
        }
    }
    Ok(())
}

fn check_input(spec_channels: usize, input: &Tensor, what: &str) -> Result<[usize; 3]> {
    let [c, d, h, w] = input.dims4()?;
    if c != spec_channels {
        return Err(Error::shape(format!(
            "{what} axis 0 (channels): expected {spec_channels}, got {c}"
        )));
    }
    Ok([d, h, w])
}

fn check_grad_out(grad_out: &Tensor, channels: usize, spatial: [usize; 3]) -> Result<()> {
    let expected = [channels, spatial[0], spatial[1], spatial[2]];
    if grad_out.shape() != expected {
        let axis = grad_out
            .shape()
            .iter()
            .zip(&expected)
            .position(|(a, b)| a != b)
            .unwrap_or(0);
        return Err(Error::shape(format!(
            "grad_out axis {axis}: expected shape {expected:?}, got {:?}",
            grad_out.shape()
        )));
    }
    Ok(())
}

fn conv_geom(spec: &ConvSpec, input: [usize; 3]) -> Result<Geom> {
    Ok(Geom {
        in_c: spec.in_channels,
        out_c: spec.out_channels,
        corr_in: input,
        corr_out: spec.conv_output(input)?,
        kernel: spec.kernel,
        stride: spec.stride,
        pad: spec.padding,
    })
}

fn transposed_geom(spec: &ConvSpec, input: [usize; 3]) -> Result<Geom> {
    Ok(Geom {
        in_c: spec.out_channels,
        out_c: spec.in_channels,
        corr_in: spec.transposed_output(input)?,
        corr_out: input,
        kernel: spec.kernel,
        stride: spec.stride,
        pad: spec.padding,
    })
}

fn with_shape(channels: usize, spatial: [usize; 3], data: Vec<f32>) -> Tensor {
    Tensor::new(vec![channels, spatial[0], spatial[1], spatial[2]], data)
        .expect("kernel produced a buffer of the contracted size")
}

/// Zero-padded cross-correlation. `weights` is `[C_out, C_in, kd, kh, kw]`.
pub fn conv3d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
) -> Result<Tensor> {
    spec.check_odd()?;
    let spatial = check_input(spec.in_channels, input, "input")?;
    check_weights(spec, weights, Some(bias), false)?;
    let g = conv_geom(spec, spatial)?;
    let out = correlate(&g, input.data(), weights.data(), Some(bias.data()));
    Ok(with_shape(spec.out_channels, g.corr_out, out))
}

pub fn conv3d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    spec: &ConvSpec,
) -> Result<ConvGrads> {
    spec.check_odd()?;
    let spatial = check_input(spec.in_channels, input, "input")?;
    check_weights(spec, weights, None, false)?;
    let g = conv_geom(spec, spatial)?;
    check_grad_out(grad_out, spec.out_channels, g.corr_out)?;
    let gi = correlate_adjoint(&g, grad_out.data(), weights.data(), None);
    let gw = correlate_weight_grad(&g, input.data(), grad_out.data());
    Ok(ConvGrads {
        input: with_shape(spec.in_channels, spatial, gi),
        weight: Tensor::new(weights.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![spec.out_channels], channel_sums(grad_out))?,
    })
}

/// Transposed convolution. `weights` is `[C_in, C_out, kd, kh, kw]`; output
/// size per axis is `(in - 1) * stride - 2 * pad + kernel`.
pub fn transposed_conv3d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
) -> Result<Tensor> {
    spec.check_basic()?;
    let spatial = check_input(spec.in_channels, input, "input")?;
    check_weights(spec, weights, Some(bias), true)?;
    let g = transposed_geom(spec, spatial)?;
    let out = correlate_adjoint(&g, input.data(), weights.data(), Some(bias.data()));
    Ok(with_shape(spec.out_channels, g.corr_in, out))
}

pub fn transposed_conv3d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    spec: &ConvSpec,
) -> Result<ConvGrads> {
    spec.check_basic()?;
    let spatial = check_input(spec.in_channels, input, "input")?;
    check_weights(spec, weights, None, true)?;
    let g = transposed_geom(spec, spatial)?;
    check_grad_out(grad_out, spec.out_channels, g.corr_in)?;
    let gi = correlate(&g, grad_out.data(), weights.data(), None);
    // Weight layout [C_in, C_out, k] indexes the correlation as [out_c][in_c][k].
    let gw = correlate_weight_grad(&g, grad_out.data(), input.data());
    Ok(ConvGrads {
        input: with_shape(spec.in_channels, spatial, gi),
        weight: Tensor::new(weights.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![spec.out_channels], channel_sums(grad_out))?,
    })
}
