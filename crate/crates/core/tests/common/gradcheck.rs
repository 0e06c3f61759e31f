//! Central finite-difference checks of every analytic gradient.
//!
//! Each check compares a directional derivative `g . v` against the
//! fourth-order central difference of the same scalar along a random
//! direction `v`; relative error must stay under 1e-3. Points and directions
//! are dyadic so every perturbed input is exactly representable in f32.

use kdseg::kd::{kd_loss, seg_loss, total_loss, DistillConfig};
use kdseg::ops::{
    conv3d_backward, conv3d_forward, instance_norm_backward, instance_norm_forward,
    instance_norm_forward_cached, leaky_relu_backward, leaky_relu_forward,
    transposed_conv3d_backward, transposed_conv3d_forward, ConvSpec, NORM_EPS,
};
use kdseg::unet::{LayerKind, Network, NetworkPlan, Scale};
use kdseg::volume::LabelMap;
use kdseg::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const REL_TOL: f64 = 1e-3;
const INSTANCES: u64 = 20;

/// Normal samples rounded to multiples of 2^-12 and clamped to (-16, 16).
fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    quantized(rng, shape, scale, 4096.0, 15.0)
}

fn dyadic(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(-15.0, 15.0) * 4096.0).round() / 4096.0)
}

/// Directions: multiples of 2^-6 in (-4, 4).
fn direction(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    quantized(rng, shape, 1.0, 64.0, 3.9)
}

/// Random direction tilted towards the analytic gradient, so `g . v` cannot
/// cancel to a value below the f32 noise floor by chance. An error in any
/// gradient component still shifts `g . v` away from the difference quotient.
fn along(rng: &mut ChaCha8Rng, g: &Tensor) -> Tensor {
    let max = g.data().iter().fold(0f32, |m, x| m.max(x.abs()));
    let noise = quantized(rng, g.shape(), 0.5, 64.0, 1.0);
    if max == 0.0 {
        return noise;
    }
    let data = g
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &n)| (2.0 * x / max * 64.0).round() / 64.0 + n)
        .collect();
    Tensor::new(g.shape().to_vec(), data).unwrap()
}

fn quantized(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32, steps: f32, limit: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            ((scale * z).clamp(-limit, limit) * steps).round() / steps
        })
        .collect::<Vec<f32>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Step for maps that are linear in the perturbed argument.
const H_LINEAR: f64 = 0.5;
/// Step for smooth maps whose output is rounded to f32: large enough that
/// output rounding stays far below the tolerance.
const H_F32_OUTPUT: f64 = 1.0 / 32.0;
/// Step for smooth nonlinear maps (a power of two, so perturbations stay exact).
const H_SMOOTH: f64 = 1.0 / 1024.0;

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

fn perturbed(x: &Tensor, v: &Tensor, h: f64) -> Tensor {
    let data: Vec<f32> = x
        .data()
        .iter()
        .zip(v.data())
        .map(|(&a, &d)| (a as f64 + h * d as f64) as f32)
        .collect();
    debug_assert!(x
        .data()
        .iter()
        .zip(v.data())
        .zip(&data)
        .all(|((&a, &d), &p)| p as f64 == a as f64 + h * d as f64));
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Fourth-order central difference of `f` at `x` along `v`.
fn directional_fd(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, v: &Tensor, h: f64) -> f64 {
    let at = |s: f64| f(&perturbed(x, v, s * h));
    (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * h)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn check(what: &str, analytic: f64, numeric: f64) {
    check_tol(what, analytic, numeric, REL_TOL);
}

fn check_tol(what: &str, analytic: f64, numeric: f64, tol: f64) {
    let e = rel_err(analytic, numeric);
    assert!(
        e < tol,
        "{what}: analytic {analytic:.9e} vs finite difference {numeric:.9e} (rel {e:.2e})"
    );
}

/// Inner product of an f32 tensor with fixed weights, in f64.
fn probe(out: &Tensor, r: &Tensor) -> f64 {
    dot(out, r)
}

fn random_dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> [usize; 3] {
    [
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
    ]
}

pub fn conv3d_backward_matches_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
        let k = if rng.random_bool(0.7) { 3 } else { 1 };
        let stride = rng.random_range(1..3);
        let mut spec = ConvSpec::same(ci, co, k);
        spec.stride = [stride; 3];
        let dims = random_dims(&mut rng, 2, 6);
        let x = randn(&mut rng, &[ci, dims[0], dims[1], dims[2]], 1.0);
        let w = randn(&mut rng, &[co, ci, k, k, k], 0.5);
        let b = randn(&mut rng, &[co], 0.5);
        let out = conv3d_forward(&x, &w, &b, &spec).unwrap();
        let r = randn(&mut rng, out.shape(), 1.0);
        let g = conv3d_backward(&x, &w, &r, &spec).unwrap();

        let (vx, vw, vb) = (
            along(&mut rng, &g.input),
            along(&mut rng, &g.weight),
            along(&mut rng, &g.bias),
        );
        let fx = |t: &Tensor| probe(&conv3d_forward(t, &w, &b, &spec).unwrap(), &r);
        let fw = |t: &Tensor| probe(&conv3d_forward(&x, t, &b, &spec).unwrap(), &r);
        let fb = |t: &Tensor| probe(&conv3d_forward(&x, &w, t, &spec).unwrap(), &r);
        check(
            &format!("conv input seed {seed}"),
            dot(&g.input, &vx),
            directional_fd(&fx, &x, &vx, H_LINEAR),
        );
        check(
            &format!("conv weight seed {seed}"),
            dot(&g.weight, &vw),
            directional_fd(&fw, &w, &vw, H_LINEAR),
        );
        check(
            &format!("conv bias seed {seed}"),
            dot(&g.bias, &vb),
            directional_fd(&fb, &b, &vb, H_LINEAR),
        );
    }
}

pub fn transposed_conv3d_backward_matches_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
        let k = rng.random_range(1..4);
        let spec = ConvSpec {
            in_channels: ci,
            out_channels: co,
            kernel: [k; 3],
            stride: [rng.random_range(1..3); 3],
            padding: [0; 3],
        };
        let dims = random_dims(&mut rng, 1, 4);
        let x = randn(&mut rng, &[ci, dims[0], dims[1], dims[2]], 1.0);
        let w = randn(&mut rng, &[ci, co, k, k, k], 0.5);
        let b = randn(&mut rng, &[co], 0.5);
        let out = transposed_conv3d_forward(&x, &w, &b, &spec).unwrap();
        let r = randn(&mut rng, out.shape(), 1.0);
        let g = transposed_conv3d_backward(&x, &w, &r, &spec).unwrap();

        let (vx, vw, vb) = (
            along(&mut rng, &g.input),
            along(&mut rng, &g.weight),
            along(&mut rng, &g.bias),
        );
        let fx = |t: &Tensor| probe(&transposed_conv3d_forward(t, &w, &b, &spec).unwrap(), &r);
        let fw = |t: &Tensor| probe(&transposed_conv3d_forward(&x, t, &b, &spec).unwrap(), &r);
        let fb = |t: &Tensor| probe(&transposed_conv3d_forward(&x, &w, t, &spec).unwrap(), &r);
        check(
            &format!("tconv input seed {seed}"),
            dot(&g.input, &vx),
            directional_fd(&fx, &x, &vx, H_LINEAR),
        );
        check(
            &format!("tconv weight seed {seed}"),
            dot(&g.weight, &vw),
            directional_fd(&fw, &w, &vw, H_LINEAR),
        );
        check(
            &format!("tconv bias seed {seed}"),
            dot(&g.bias, &vb),
            directional_fd(&fb, &b, &vb, H_LINEAR),
        );
    }
}

pub fn instance_norm_backward_matches_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let c = rng.random_range(1..4);
        let dims = random_dims(&mut rng, 2, 5);
        let x = randn(&mut rng, &[c, dims[0], dims[1], dims[2]], 2.0);
        let gain = randn(&mut rng, &[c], 1.0);
        let shift = randn(&mut rng, &[c], 1.0);
        let (out, cache) = instance_norm_forward_cached(&x, &gain, &shift, NORM_EPS).unwrap();
        let r = randn(&mut rng, out.shape(), 1.0);
        let g = instance_norm_backward(&cache, &gain, &r).unwrap();

        let (vx, vg, vs) = (
            along(&mut rng, &g.input),
            along(&mut rng, &g.gain),
            along(&mut rng, &g.shift),
        );
        let fx = |t: &Tensor| {
            probe(
                &instance_norm_forward(t, &gain, &shift, NORM_EPS).unwrap(),
                &r,
            )
        };
        let fg = |t: &Tensor| probe(&instance_norm_forward(&x, t, &shift, NORM_EPS).unwrap(), &r);
        let fs = |t: &Tensor| probe(&instance_norm_forward(&x, &gain, t, NORM_EPS).unwrap(), &r);
        check(
            &format!("norm input seed {seed}"),
            dot(&g.input, &vx),
            directional_fd(&fx, &x, &vx, H_F32_OUTPUT),
        );
        check(
            &format!("norm gain seed {seed}"),
            dot(&g.gain, &vg),
            directional_fd(&fg, &gain, &vg, H_LINEAR),
        );
        check(
            &format!("norm shift seed {seed}"),
            dot(&g.shift, &vs),
            directional_fd(&fs, &shift, &vs, H_LINEAR),
        );
    }
}

pub fn leaky_relu_backward_matches_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let n = rng.random_range(4..64);
        // keep inputs away from the kink so the difference quotient is smooth
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let m = (rng.random_range(0.1f32..2.0) * 4096.0).round() / 4096.0;
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let x = Tensor::new(vec![1, 1, 1, n], data).unwrap();
        let slope = [0.01, 0.2][seed as usize % 2];
        let r = direction(&mut rng, x.shape());
        let g = leaky_relu_backward(&x, &r, slope).unwrap();
        let v = along(&mut rng, &g);
        let f = |t: &Tensor| probe(&leaky_relu_forward(t, slope), &r);
        check(
            &format!("leaky relu seed {seed}"),
            dot(&g, &v),
            directional_fd(&f, &x, &v, H_SMOOTH),
        );
    }
}

fn random_labels(rng: &mut ChaCha8Rng, dims: [usize; 3], c: usize) -> LabelMap {
    let n = dims.iter().product();
    LabelMap::new(
        dims,
        (0..n).map(|_| rng.random_range(0..c) as u16).collect(),
        [1.0; 3],
    )
    .unwrap()
}

fn random_distill(rng: &mut ChaCha8Rng) -> DistillConfig {
    DistillConfig {
        temperature: [0.5, 1.0, 2.0, 4.0][rng.random_range(0..4)],
        kd_weight: rng.random_range(0.1..2.0),
        dice_smooth: [1e-5, 1.0][rng.random_range(0..2)],
        dice_include_background: rng.random_bool(0.5),
    }
}

pub fn kd_loss_gradient_matches_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let c = rng.random_range(2..5);
        let dims = random_dims(&mut rng, 1, 4);
        let shape = [c, dims[0], dims[1], dims[2]];
        let s = randn(&mut rng, &shape, 2.0);
        let t = randn(&mut rng, &shape, 2.0);
        let cfg = random_distill(&mut rng);
        let (_, g) = kd_loss(&s, &t, &cfg).unwrap();
        let v = along(&mut rng, &g);
        let f = |z: &Tensor| kd_loss(z, &t, &cfg).unwrap().0;
        check(
            &format!("kd loss seed {seed}"),
            dot(&g, &v),
            directional_fd(&f, &s, &v, H_SMOOTH),
        );
    }
}

pub fn seg_loss_gradient_matches_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let c = rng.random_range(2..5);
        let dims = random_dims(&mut rng, 1, 4);
        let shape = [c, dims[0], dims[1], dims[2]];
        let z = randn(&mut rng, &shape, 2.0);
        let labels = random_labels(&mut rng, dims, c);
        let cfg = random_distill(&mut rng);
        let (_, g) = seg_loss(&z, &labels, &cfg).unwrap();
        let v = along(&mut rng, &g);
        let f = |t: &Tensor| seg_loss(t, &labels, &cfg).unwrap().0;
        check(
            &format!("seg loss seed {seed}"),
            dot(&g, &v),
            directional_fd(&f, &z, &v, H_SMOOTH),
        );

        let teacher = randn(&mut rng, &shape, 2.0);
        let total = total_loss(&z, Some(&teacher), &labels, &cfg).unwrap();
        let f = |t: &Tensor| total_loss(t, Some(&teacher), &labels, &cfg).unwrap().total;
        check(
            &format!("total loss seed {seed}"),
            dot(&total.grad_logits, &v),
            directional_fd(&f, &z, &v, H_SMOOTH),
        );
    }
}

fn tiny_plan(rng: &mut ChaCha8Rng) -> NetworkPlan {
    NetworkPlan {
        num_classes: rng.random_range(2..4),
        input_channels: 1,
        num_stages: 2,
        base_width: 2,
        max_width: 4,
        scale: [Scale::ONE, Scale::HALF][rng.random_range(0..2)],
        // a second conv per stage runs the same block code; it would also put a
        // norm right behind each shift, leaving those gradients near zero
        convs_per_stage: 1,
        patch_size: [4; 3],
    }
}

/// Channels-first f64 volume for the reference network.
#[derive(Clone)]
struct Vol {
    c: usize,
    d: [usize; 3],
    v: Vec<f64>,
}

impl Vol {
    fn at(&self, ch: usize, p: [usize; 3]) -> f64 {
        self.v[((ch * self.d[0] + p[0]) * self.d[1] + p[1]) * self.d[2] + p[2]]
    }
}

fn voxels(d: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    (0..d[0]).flat_map(move |z| (0..d[1]).flat_map(move |y| (0..d[2]).map(move |x| [z, y, x])))
}

/// Naive correlation: `out[o][p] = b[o] + sum w[o][i][k] * in[i][p * s + k - pad]`.
fn ref_conv(x: &Vol, w: &[f64], b: &[f64], spec: &ConvSpec) -> Vol {
    let k = spec.kernel;
    let d: [usize; 3] =
        std::array::from_fn(|a| (x.d[a] + 2 * spec.padding[a] - k[a]) / spec.stride[a] + 1);
    let mut v = Vec::new();
    for o in 0..spec.out_channels {
        for p in voxels(d) {
            let mut acc = b[o];
            for i in 0..spec.in_channels {
                for q in voxels(k) {
                    let src: [isize; 3] = std::array::from_fn(|a| {
                        (p[a] * spec.stride[a] + q[a]) as isize - spec.padding[a] as isize
                    });
                    if (0..3).all(|a| src[a] >= 0 && (src[a] as usize) < x.d[a]) {
                        let wi = ((o * spec.in_channels + i) * k[0] + q[0]) * k[1] * k[2]
                            + q[1] * k[2]
                            + q[2];
                        acc += w[wi] * x.at(i, src.map(|s| s as usize));
                    }
                }
            }
            v.push(acc);
        }
    }
    Vol {
        c: spec.out_channels,
        d,
        v,
    }
}

/// Naive scatter form of the unpadded transposed convolution.
fn ref_transposed(x: &Vol, w: &[f64], b: &[f64], spec: &ConvSpec) -> Vol {
    let k = spec.kernel;
    let d: [usize; 3] = std::array::from_fn(|a| (x.d[a] - 1) * spec.stride[a] + k[a]);
    let n = d.iter().product::<usize>();
    let mut v: Vec<f64> = (0..spec.out_channels)
        .flat_map(|o| std::iter::repeat_n(b[o], n))
        .collect();
    for i in 0..spec.in_channels {
        for p in voxels(x.d) {
            for o in 0..spec.out_channels {
                for q in voxels(k) {
                    let t: [usize; 3] = std::array::from_fn(|a| p[a] * spec.stride[a] + q[a]);
                    let wi = ((i * spec.out_channels + o) * k[0] + q[0]) * k[1] * k[2]
                        + q[1] * k[2]
                        + q[2];
                    v[((o * d[0] + t[0]) * d[1] + t[1]) * d[2] + t[2]] += w[wi] * x.at(i, p);
                }
            }
        }
    }
    Vol {
        c: spec.out_channels,
        d,
        v,
    }
}

/// Instance norm with biased variance, then leaky ReLU.
fn ref_norm_act(x: &Vol, gain: &[f64], shift: &[f64]) -> Vol {
    let n = x.v.len() / x.c;
    let mut v = Vec::with_capacity(x.v.len());
    for ch in 0..x.c {
        let s = &x.v[ch * n..(ch + 1) * n];
        let mean = s.iter().sum::<f64>() / n as f64;
        let var = s.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + NORM_EPS as f64).sqrt();
        v.extend(s.iter().map(|a| {
            let y = gain[ch] * (a - mean) * inv + shift[ch];
            if y > 0.0 {
                y
            } else {
                0.01 * y
            }
        }));
    }
    Vol { c: x.c, d: x.d, v }
}

type Params = Vec<(Vec<f64>, Vec<f64>)>;

fn params_f64(net: &Network) -> Params {
    let widen = |t: &Tensor| t.data().iter().map(|&a| a as f64).collect::<Vec<f64>>();
    net.layers()
        .iter()
        .map(|l| (widen(&l.weight), widen(&l.bias)))
        .collect()
}

/// f64 forward of a two-stage, one-conv-per-stage U-Net, written out by hand
/// from the layer list: enc0 -> enc1 (stride 2) -> up -> concat [up, skip]
/// -> dec0 -> 1x1x1 head.
fn reference_forward(net: &Network, p: &Params, x: &Tensor) -> Vol {
    let idx = |name: &str| {
        net.layers()
            .iter()
            .position(|l| l.desc.name == name)
            .unwrap_or_else(|| panic!("no layer {name}"))
    };
    let spec = |name: &str| match net.layers()[idx(name)].desc.kind {
        LayerKind::Conv(s) | LayerKind::TransposedConv(s) => s,
        _ => panic!("{name} is not a convolution"),
    };
    let conv = |name: &str, v: &Vol| {
        let i = idx(name);
        ref_conv(v, &p[i].0, &p[i].1, &spec(name))
    };
    let norm = |name: &str, v: &Vol| {
        let i = idx(name);
        ref_norm_act(v, &p[i].0, &p[i].1)
    };
    let input = Vol {
        c: x.shape()[0],
        d: [x.shape()[1], x.shape()[2], x.shape()[3]],
        v: x.data().iter().map(|&a| a as f64).collect(),
    };
    let e0 = norm("enc0.0.norm", &conv("enc0.0.conv", &input));
    let e1 = norm("enc1.0.norm", &conv("enc1.0.conv", &e0));
    let ui = idx("dec0.up");
    let mut up = ref_transposed(&e1, &p[ui].0, &p[ui].1, &spec("dec0.up"));
    up.v.extend_from_slice(&e0.v);
    up.c += e0.c;
    let d0 = norm("dec0.0.norm", &conv("dec0.0.conv", &up));
    conv("head", &d0)
}

/// Whole-network backward, layer by layer, through a random linear probe of
/// the logits, against central differences of a naive f64 reference network
/// carrying the same parameters.
///
/// Leaky ReLU kinks make the network only piecewise smooth, so norm gains and
/// shifts are drawn so that every normalized activation sits strictly on one
/// branch (|x_hat| <= sqrt(n - 1) for n voxels bounds the excursion), with the
/// branch chosen per channel so both sides of the activation are exercised.
/// Convolution biases feeding an instance norm have an exactly zero gradient
/// and are checked for that instead.
pub fn network_backward_matches_finite_differences_for_every_layer() {
    // f64 differences: truncation ~h^4, rounding ~1e-16 / h
    const H: f64 = 1.0 / 2048.0;
    const ZERO_GRAD: f64 = 1e-6;
    let mut checked = 0usize;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let plan = tiny_plan(&mut rng);
        let mut net = Network::build(&plan, seed).unwrap();
        for l in net.layers_mut().unwrap() {
            if let LayerKind::InstanceNorm { channels } = l.desc.kind {
                // 64 voxels: gain * sqrt(63) < 6 <= |shift| - 2
                let gain: Vec<f32> = (0..channels)
                    .map(|_| rng.random_range(128..192) as f32 / 256.0)
                    .collect();
                // the first channel stays on the positive branch so gradients do not vanish
                let shift: Vec<f32> = (0..channels)
                    .map(|ch| {
                        let sign = if ch == 0 || rng.random_bool(0.5) {
                            1.0
                        } else {
                            -1.0
                        };
                        sign * rng.random_range(2048..2304) as f32 / 256.0
                    })
                    .collect();
                l.weight = Tensor::new(vec![channels], gain).unwrap();
                l.bias = Tensor::new(vec![channels], shift).unwrap();
            }
        }
        let x = randn(&mut rng, &[1, 4, 4, 4], 1.0);
        let (logits, trace) = net.forward_train(&x).unwrap();
        let base = params_f64(&net);
        let reference = reference_forward(&net, &base, &x);
        let scale = reference.v.iter().fold(0f64, |m, a| m.max(a.abs()));
        for (a, b) in logits.data().iter().zip(&reference.v) {
            assert!(
                (*a as f64 - b).abs() <= 1e-5 * scale,
                "seed {seed}: forward {a} vs reference {b}"
            );
        }
        // a linear probe of the logits; the losses have their own checks above
        let r = randn(&mut rng, logits.shape(), 1.0);
        let rv: Vec<f64> = r.data().iter().map(|&a| a as f64).collect();
        let grads = net.backward(trace, &r).unwrap();

        for (li, layer) in net.layers().iter().enumerate() {
            let normalized_next = layer.desc.name.ends_with(".conv");
            for (is_weight, grad) in [(true, &grads.layers[li].0), (false, &grads.layers[li].1)] {
                let what = format!(
                    "seed {seed} layer {} {}",
                    layer.desc.name,
                    if is_weight { "weight" } else { "bias" }
                );
                if !is_weight && normalized_next {
                    let max = grad.data().iter().fold(0f32, |m, g| m.max(g.abs()));
                    assert!(
                        (max as f64) < ZERO_GRAD,
                        "{what}: bias before a norm has gradient {max:e}"
                    );
                    continue;
                }
                let v = along(&mut rng, grad);
                let f = |h: f64| {
                    let mut p = base.clone();
                    let t = if is_weight {
                        &mut p[li].0
                    } else {
                        &mut p[li].1
                    };
                    for (a, d) in t.iter_mut().zip(v.data()) {
                        *a += h * *d as f64;
                    }
                    reference_forward(&net, &p, &x)
                        .v
                        .iter()
                        .zip(&rv)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                };
                let fd = |h: f64| (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h);
                check(&what, dot(grad, &v), fd(H));
                checked += 1;
            }
        }
    }
    println!("network gradient check: {checked} parameter tensors over {INSTANCES} networks");
}
