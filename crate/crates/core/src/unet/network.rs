//! Instantiated networks: weights, forward pass, backward pass, SGD updates.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::plan::{LayerDesc, LayerKind, NetworkPlan, Topology, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::ops::{self, NormCache, NORM_EPS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub desc: LayerDesc,
    /// Convolution weight, or normalization gain.
    pub weight: Tensor,
    /// Convolution bias, or normalization shift.
    pub bias: Tensor,
}

/// A teacher or student instance of a [`NetworkPlan`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    plan: NetworkPlan,
    topology: Topology,
    layers: Vec<Layer>,
    seed: u64,
    frozen: bool,
    lineage: BTreeMap<String, String>,
}

/// Activations saved by [`Network::forward_train`] for [`Network::backward`].
#[derive(Debug)]
pub struct ForwardTrace {
    inputs: Vec<Option<Tensor>>,
    norms: Vec<Option<NormCache>>,
    pre_act: Vec<Option<Tensor>>,
}

impl ForwardTrace {
    fn new(n: usize) -> Self {
        ForwardTrace {
            inputs: vec![None; n],
            norms: vec![None; n],
            pre_act: vec![None; n],
        }
    }

    fn take<T>(slot: &mut [Option<T>], idx: usize) -> Result<T> {
        slot[idx]
            .take()
            .ok_or_else(|| Error::invalid(format!("trace has no saved state for layer {idx}")))
    }
}

/// Per-layer gradients, aligned with [`Network::layers`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        Tensor::zeros(l.weight.shape()),
                        Tensor::zeros(l.bias.shape()),
                    )
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients, alpha: f32) -> Result<()> {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.add_scaled(ow, alpha)?;
            b.add_scaled(ob, alpha)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.is_finite() && b.is_finite())
    }
}

/// Plain SGD with (heavy-ball) momentum: `v = mu * v + g; w -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f32,
    pub momentum: f32,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(learning_rate: f32, momentum: f32) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if net.frozen {
            return Err(Error::Frozen);
        }
        let velocity = self
            .velocity
            .get_or_insert_with(|| Gradients::zeros_like(net));
        for ((layer, (gw, gb)), (vw, vb)) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(velocity.layers.iter_mut())
        {
            for (param, grad, vel) in [(&mut layer.weight, gw, vw), (&mut layer.bias, gb, vb)] {
                vel.scale(self.momentum);
                vel.add_scaled(grad, 1.0)?;
                param.add_scaled(vel, -self.learning_rate)?;
            }
        }
        Ok(())
    }
}

impl Network {
    /// Builds a plan with He-normal convolution weights drawn from `seed`.
    pub fn build(plan: &NetworkPlan, seed: u64) -> Result<Self> {
        plan.validate()?;
        let topology = plan.topology();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = topology
            .layers
            .iter()
            .map(|desc| {
                let (wshape, bshape) = desc.param_shapes();
                let (weight, bias) = match desc.kind {
                    LayerKind::Conv(spec) | LayerKind::TransposedConv(spec) => {
                        let fan_in = (spec.in_channels * spec.kernel_volume()) as f32;
                        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
                            .expect("He standard deviation is finite");
                        let n: usize = wshape.iter().product();
                        let w = (0..n).map(|_| normal.sample(&mut rng)).collect();
                        (Tensor::new(wshape, w)?, Tensor::zeros(&bshape))
                    }
                    LayerKind::InstanceNorm { .. } => {
                        (Tensor::full(&wshape, 1.0), Tensor::zeros(&bshape))
                    }
                };
                Ok(Layer {
                    desc: desc.clone(),
                    weight,
                    bias,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network {
            plan: plan.clone(),
            topology,
            layers,
            seed,
            frozen: false,
            lineage: BTreeMap::new(),
        })
    }

    /// Reassembles a network from stored parameters (checkpoint loading).
    pub(crate) fn from_parts(
        plan: NetworkPlan,
        seed: u64,
        frozen: bool,
        lineage: BTreeMap<String, String>,
        params: Vec<(Tensor, Tensor)>,
    ) -> Result<Self> {
        plan.validate()?;
        let topology = plan.topology();
        if params.len() != topology.layers.len() {
            return Err(Error::invalid(format!(
                "plan has {} layers but {} parameter sets were supplied",
                topology.layers.len(),
                params.len()
            )));
        }
        let layers = topology
            .layers
            .iter()
            .zip(params)
            .map(|(desc, (weight, bias))| {
                let (ws, bs) = desc.param_shapes();
                if weight.shape() != ws.as_slice() || bias.shape() != bs.as_slice() {
                    return Err(Error::shape(format!(
                        "layer {} expects {ws:?}/{bs:?}, got {:?}/{:?}",
                        desc.name,
                        weight.shape(),
                        bias.shape()
                    )));
                }
                Ok(Layer {
                    desc: desc.clone(),
                    weight,
                    bias,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network {
            plan,
            topology,
            layers,
            seed,
            frozen,
            lineage,
        })
    }

    pub fn plan(&self) -> &NetworkPlan {
        &self.plan
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable parameter access; refused once the network is frozen.
    pub fn layers_mut(&mut self) -> Result<&mut [Layer]> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.layers)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Irreversibly marks the weights read-only.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Free-form provenance (training config, teacher hash, ...).
    pub fn lineage(&self) -> &BTreeMap<String, String> {
        &self.lineage
    }

    pub fn set_lineage(&mut self, key: impl Into<String>, value: impl Into<String>) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        self.lineage.insert(key.into(), value.into());
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let [c, d, h, w] = input.dims4()?;
        if c != self.plan.input_channels {
            return Err(Error::shape(format!(
                "input axis 0 (channels): plan expects {}, got {c}",
                self.plan.input_channels
            )));
        }
        self.plan.check_spatial([d, h, w])
    }

    /// Voxel-wise logits `[C, D, H, W]` for an `[input_channels, D, H, W]` input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        self.run(input.clone(), None)
    }

    /// Forward pass that keeps the activations needed by [`Network::backward`].
    pub fn forward_train(&self, input: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        self.check_input(input)?;
        let mut trace = ForwardTrace::new(self.layers.len());
        let logits = self.run(input.clone(), Some(&mut trace))?;
        Ok((logits, trace))
    }

    fn conv_spec(&self, idx: usize) -> ops::ConvSpec {
        match self.layers[idx].desc.kind {
            LayerKind::Conv(s) | LayerKind::TransposedConv(s) => s,
            LayerKind::InstanceNorm { .. } => unreachable!("layer {idx} is not a convolution"),
        }
    }

    fn block(&self, conv: usize, x: Tensor, trace: Option<&mut ForwardTrace>) -> Result<Tensor> {
        let spec = self.conv_spec(conv);
        let (cl, nl) = (&self.layers[conv], &self.layers[conv + 1]);
        let y = ops::conv3d_forward(&x, &cl.weight, &cl.bias, &spec)?;
        match trace {
            Some(trace) => {
                let (z, cache) =
                    ops::instance_norm_forward_cached(&y, &nl.weight, &nl.bias, NORM_EPS)?;
                let a = ops::leaky_relu_forward(&z, LEAKY_SLOPE);
                trace.inputs[conv] = Some(x);
                trace.norms[conv + 1] = Some(cache);
                trace.pre_act[conv + 1] = Some(z);
                Ok(a)
            }
            None => {
                drop(x);
                let mut z = ops::instance_norm_forward(&y, &nl.weight, &nl.bias, NORM_EPS)?;
                ops::leaky_relu_inplace(&mut z, LEAKY_SLOPE);
                Ok(z)
            }
        }
    }

    fn run(&self, input: Tensor, mut trace: Option<&mut ForwardTrace>) -> Result<Tensor> {
        let topo = &self.topology;
        let stages = self.plan.num_stages;
        let mut h = input;
        let mut skips = Vec::with_capacity(stages - 1);
        for s in 0..stages {
            for &conv in &topo.encoder[s] {
                h = self.block(conv, h, trace.as_deref_mut())?;
            }
            if s + 1 < stages {
                skips.push(Some(h.clone()));
            }
        }
        for s in (0..stages - 1).rev() {
            let up = topo.up[s];
            let layer = &self.layers[up];
            let upsampled = ops::transposed_conv3d_forward(
                &h,
                &layer.weight,
                &layer.bias,
                &self.conv_spec(up),
            )?;
            if let Some(t) = trace.as_deref_mut() {
                t.inputs[up] = Some(h);
            }
            let skip = skips[s].take().expect("each skip is consumed once");
            h = Tensor::concat_channels(&upsampled, &skip)?;
            for &conv in &topo.decoder[s] {
                h = self.block(conv, h, trace.as_deref_mut())?;
            }
        }
        let head = &self.layers[topo.head];
        let logits = ops::conv3d_forward(&h, &head.weight, &head.bias, &self.conv_spec(topo.head))?;
        if let Some(t) = trace {
            t.inputs[topo.head] = Some(h);
        }
        Ok(logits)
    }

    fn block_backward(
        &self,
        conv: usize,
        grad: Tensor,
        trace: &mut ForwardTrace,
        out: &mut [Option<(Tensor, Tensor)>],
    ) -> Result<Tensor> {
        let z = ForwardTrace::take(&mut trace.pre_act, conv + 1)?;
        let grad_z = ops::leaky_relu_backward(&z, &grad, LEAKY_SLOPE)?;
        let cache = ForwardTrace::take(&mut trace.norms, conv + 1)?;
        let ng = ops::instance_norm_backward(&cache, &self.layers[conv + 1].weight, &grad_z)?;
        out[conv + 1] = Some((ng.gain, ng.shift));
        let x = ForwardTrace::take(&mut trace.inputs, conv)?;
        let cg = ops::conv3d_backward(
            &x,
            &self.layers[conv].weight,
            &ng.input,
            &self.conv_spec(conv),
        )?;
        out[conv] = Some((cg.weight, cg.bias));
        Ok(cg.input)
    }

    /// Parameter gradients given `d loss / d logits`. Consumes the trace.
    pub fn backward(&self, mut trace: ForwardTrace, grad_logits: &Tensor) -> Result<Gradients> {
        let topo = &self.topology;
        let stages = self.plan.num_stages;
        let mut out: Vec<Option<(Tensor, Tensor)>> = vec![None; self.layers.len()];

        let head_in = ForwardTrace::take(&mut trace.inputs, topo.head)?;
        let hg = ops::conv3d_backward(
            &head_in,
            &self.layers[topo.head].weight,
            grad_logits,
            &self.conv_spec(topo.head),
        )?;
        out[topo.head] = Some((hg.weight, hg.bias));
        let mut g = hg.input;

        let mut skip_grads = vec![None; stages - 1];
        for s in 0..stages - 1 {
            for &conv in topo.decoder[s].iter().rev() {
                g = self.block_backward(conv, g, &mut trace, &mut out)?;
            }
            let (g_up, g_skip) = g.split_channels(topo.widths[s])?;
            skip_grads[s] = Some(g_skip);
            let up = topo.up[s];
            let x = ForwardTrace::take(&mut trace.inputs, up)?;
            let ug = ops::transposed_conv3d_backward(
                &x,
                &self.layers[up].weight,
                &g_up,
                &self.conv_spec(up),
            )?;
            out[up] = Some((ug.weight, ug.bias));
            g = ug.input;
        }

        for s in (0..stages).rev() {
            if let Some(skip) = skip_grads.get_mut(s).and_then(Option::take) {
                g.add_scaled(&skip, 1.0)?;
            }
            for &conv in topo.encoder[s].iter().rev() {
                g = self.block_backward(conv, g, &mut trace, &mut out)?;
            }
        }

        let layers = out
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.ok_or_else(|| Error::invalid(format!("no gradient produced for layer {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { layers })
    }
}
