//! Architecture plans for the channel-scaled encoder-decoder family.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::{ConvSpec, NORM_EPS};

/// Negative slope of every leaky ReLU in the family.
pub const LEAKY_SLOPE: f32 = 0.01;
/// Kernel edge of every encoder/decoder convolution.
pub const CONV_KERNEL: usize = 3;
/// Kernel edge (and stride) of the upsampling transposed convolutions.
pub const UP_KERNEL: usize = 2;
/// Narrowest layer a scaled plan may produce.
pub const MIN_WIDTH: usize = 2;

/// Channel-width scale factor, a rational in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Scale {
    num: u32,
    den: u32,
}

impl Scale {
    pub const ONE: Scale = Scale { num: 1, den: 1 };
    pub const HALF: Scale = Scale { num: 1, den: 2 };
    pub const QUARTER: Scale = Scale { num: 1, den: 4 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return Err(Error::invalid(format!(
                "scale {num}/{den} is not in (0, 1]"
            )));
        }
        let g = gcd(num, den);
        Ok(Scale {
            num: num / g,
            den: den / g,
        })
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `floor(width * self)`.
    pub fn apply(self, width: usize) -> usize {
        width * self.num as usize / self.den as usize
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    /// Accepts `"1/4"`, `"1"`, or a short decimal such as `"0.5"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::invalid(format!("cannot parse scale {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Scale::new(n, d);
        }
        if let Ok(n) = s.parse::<u32>() {
            return Scale::new(n, 1);
        }
        let (int, frac) = s.split_once('.').ok_or_else(bad)?;
        if frac.is_empty() || frac.len() > 6 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10u32.pow(frac.len() as u32);
        let int: u32 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| bad())?
        };
        let frac: u32 = frac.parse().map_err(|_| bad())?;
        Scale::new(int * den + frac, den)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkPlan {
    pub num_classes: usize,
    pub input_channels: usize,
    pub num_stages: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub scale: Scale,
    pub convs_per_stage: usize,
    pub patch_size: [usize; 3],
}

impl Default for NetworkPlan {
    /// Four stages of widths 16..128, two convolutions each, 64^3 patches.
    fn default() -> Self {
        NetworkPlan {
            num_classes: 3,
            input_channels: 1,
            num_stages: 4,
            base_width: 16,
            max_width: 128,
            scale: Scale::ONE,
            convs_per_stage: 2,
            patch_size: [64; 3],
        }
    }
}

impl NetworkPlan {
    pub fn with_scale(&self, scale: Scale) -> Self {
        NetworkPlan {
            scale,
            ..self.clone()
        }
    }

    pub fn with_patch(&self, patch_size: [usize; 3]) -> Self {
        NetworkPlan {
            patch_size,
            ..self.clone()
        }
    }

    /// Channel count of encoder (and mirrored decoder) stage `stage`.
    pub fn stage_width(&self, stage: usize) -> usize {
        let unscaled = (self.base_width << stage).min(self.max_width);
        self.scale.apply(unscaled).max(MIN_WIDTH)
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..self.num_stages).map(|s| self.stage_width(s)).collect()
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.num_stages - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("a plan needs at least 2 classes"));
        }
        if self.input_channels == 0 || self.base_width == 0 || self.max_width == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.num_stages < 2 || self.num_stages > 8 {
            return Err(Error::invalid(format!(
                "num_stages must be in 2..=8, got {}",
                self.num_stages
            )));
        }
        if self.convs_per_stage == 0 {
            return Err(Error::invalid("convs_per_stage must be positive"));
        }
        self.check_spatial(self.patch_size)
    }

    /// Checks that `size` can flow through every resolution level.
    pub fn check_spatial(&self, size: [usize; 3]) -> Result<()> {
        let div = self.divisor();
        let bottleneck: usize = size.iter().map(|&s| s / div).product();
        if size.iter().any(|&s| s == 0 || s % div != 0) || bottleneck < 2 {
            let mut minimal = size.map(|s| s.div_ceil(div).max(1) * div);
            if minimal.iter().map(|&s| s / div).product::<usize>() < 2 {
                minimal[2] = 2 * div;
            }
            return Err(Error::invalid(format!(
                "spatial size {size:?} must be a multiple of {div} per axis with at least \
                 two bottleneck voxels; minimal valid size is {minimal:?}"
            )));
        }
        Ok(())
    }

    /// Key/value form stored in checkpoints and run manifests.
    pub fn to_manifest(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let p = self.patch_size;
        m.insert("plan.num_classes".into(), self.num_classes.to_string());
        m.insert(
            "plan.input_channels".into(),
            self.input_channels.to_string(),
        );
        m.insert("plan.num_stages".into(), self.num_stages.to_string());
        m.insert("plan.base_width".into(), self.base_width.to_string());
        m.insert("plan.max_width".into(), self.max_width.to_string());
        m.insert("plan.scale".into(), self.scale.to_string());
        m.insert(
            "plan.convs_per_stage".into(),
            self.convs_per_stage.to_string(),
        );
        m.insert(
            "plan.patch_size".into(),
            format!("{}x{}x{}", p[0], p[1], p[2]),
        );
        m.insert("plan.kernel".into(), CONV_KERNEL.to_string());
        m.insert("plan.up_kernel".into(), UP_KERNEL.to_string());
        m.insert("plan.norm".into(), "instance".into());
        m.insert("plan.norm_eps".into(), format!("{NORM_EPS:e}"));
        m.insert("plan.activation".into(), "leaky_relu".into());
        m.insert("plan.leaky_slope".into(), LEAKY_SLOPE.to_string());
        m.insert("plan.padding".into(), "zero".into());
        m.insert("plan.skip".into(), "concat".into());
        m
    }

    pub fn from_manifest(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            m.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::invalid(format!("manifest is missing {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::invalid(format!("manifest field {k} is not an integer")))
        };
        for (k, expected) in [
            ("plan.kernel", CONV_KERNEL.to_string()),
            ("plan.up_kernel", UP_KERNEL.to_string()),
            ("plan.norm_eps", format!("{NORM_EPS:e}")),
            ("plan.leaky_slope", LEAKY_SLOPE.to_string()),
        ] {
            if let Some(v) = m.get(k) {
                if *v != expected {
                    return Err(Error::invalid(format!(
                        "{k}={v} is not supported (this build uses {expected})"
                    )));
                }
            }
        }
        let plan = NetworkPlan {
            num_classes: num("plan.num_classes")?,
            input_channels: num("plan.input_channels")?,
            num_stages: num("plan.num_stages")?,
            base_width: num("plan.base_width")?,
            max_width: num("plan.max_width")?,
            scale: get("plan.scale")?.parse()?,
            convs_per_stage: num("plan.convs_per_stage")?,
            patch_size: parse_triple(get("plan.patch_size")?)?,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn topology(&self) -> Topology {
        Topology::new(self)
    }
}

/// Parses `"64"` or `"64x64x32"` (also `,`-separated).
pub fn parse_triple(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(['x', ',']).map(str::trim).collect();
    let parse = |p: &str| {
        p.parse::<usize>()
            .map_err(|_| Error::invalid(format!("cannot parse size triple {s:?}")))
    };
    match parts.as_slice() {
        [one] => Ok([parse(one)?; 3]),
        [a, b, c] => Ok([parse(a)?, parse(b)?, parse(c)?]),
        _ => Err(Error::invalid(format!("cannot parse size triple {s:?}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv(ConvSpec),
    TransposedConv(ConvSpec),
    InstanceNorm { channels: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerDesc {
    /// Shapes of the (weight, bias) pair; gain/shift for normalization.
    pub fn param_shapes(&self) -> (Vec<usize>, Vec<usize>) {
        match self.kind {
            LayerKind::Conv(s) => (
                vec![
                    s.out_channels,
                    s.in_channels,
                    s.kernel[0],
                    s.kernel[1],
                    s.kernel[2],
                ],
                vec![s.out_channels],
            ),
            LayerKind::TransposedConv(s) => (
                vec![
                    s.in_channels,
                    s.out_channels,
                    s.kernel[0],
                    s.kernel[1],
                    s.kernel[2],
                ],
                vec![s.out_channels],
            ),
            LayerKind::InstanceNorm { channels } => (vec![channels], vec![channels]),
        }
    }

    pub fn param_count(&self) -> usize {
        let (w, b) = self.param_shapes();
        w.iter().product::<usize>() + b.iter().product::<usize>()
    }
}

/// Layer list of a plan plus the indices the forward pass walks.
///
/// Conv-norm-activation blocks are referenced by their convolution index; the
/// matching normalization layer is always the next index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub layers: Vec<LayerDesc>,
    pub encoder: Vec<Vec<usize>>,
    /// Upsampling layer feeding decoder level `s` (from level `s + 1`).
    pub up: Vec<usize>,
    pub decoder: Vec<Vec<usize>>,
    pub head: usize,
    pub widths: Vec<usize>,
}

impl Topology {
    fn new(plan: &NetworkPlan) -> Self {
        let widths = plan.widths();
        let stages = plan.num_stages;
        let mut layers = Vec::new();
        let push_block =
            |layers: &mut Vec<LayerDesc>, name: String, cin: usize, cout: usize, stride: usize| {
                let idx = layers.len();
                let spec = ConvSpec {
                    in_channels: cin,
                    out_channels: cout,
                    kernel: [CONV_KERNEL; 3],
                    stride: [stride; 3],
                    padding: [CONV_KERNEL / 2; 3],
                };
                layers.push(LayerDesc {
                    name: format!("{name}.conv"),
                    kind: LayerKind::Conv(spec),
                });
                layers.push(LayerDesc {
                    name: format!("{name}.norm"),
                    kind: LayerKind::InstanceNorm { channels: cout },
                });
                idx
            };

        let mut encoder = Vec::with_capacity(stages);
        for s in 0..stages {
            let mut blocks = Vec::new();
            for b in 0..plan.convs_per_stage {
                let cin = match (s, b) {
                    (0, 0) => plan.input_channels,
                    (_, 0) => widths[s - 1],
                    _ => widths[s],
                };
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(push_block(
                    &mut layers,
                    format!("enc{s}.{b}"),
                    cin,
                    widths[s],
                    stride,
                ));
            }
            encoder.push(blocks);
        }

        let mut up = vec![0; stages - 1];
        let mut decoder = vec![Vec::new(); stages - 1];
        for s in (0..stages - 1).rev() {
            up[s] = layers.len();
            layers.push(LayerDesc {
                name: format!("dec{s}.up"),
                kind: LayerKind::TransposedConv(ConvSpec {
                    in_channels: widths[s + 1],
                    out_channels: widths[s],
                    kernel: [UP_KERNEL; 3],
                    stride: [UP_KERNEL; 3],
                    padding: [0; 3],
                }),
            });
            for b in 0..plan.convs_per_stage {
                let cin = if b == 0 { 2 * widths[s] } else { widths[s] };
                decoder[s].push(push_block(
                    &mut layers,
                    format!("dec{s}.{b}"),
                    cin,
                    widths[s],
                    1,
                ));
            }
        }

        let head = layers.len();
        layers.push(LayerDesc {
            name: "head".into(),
            kind: LayerKind::Conv(ConvSpec::same(widths[0], plan.num_classes, 1)),
        });

        Topology {
            layers,
            encoder,
            up,
            decoder,
            head,
            widths,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerDesc::param_count).sum()
    }
}
