//! Procedural labelled volumes for desk-scale experiments.
//!
//! Every volume is drawn from its own ChaCha stream (`seed`, volume index),
//! so datasets are identical whether generated serially or in parallel.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::manifest::sha256_hex;
use crate::tensor::Tensor;
use crate::volume::{LabelMap, Volume};

/// Regeneration attempts before a volume is declared impossible.
pub const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    /// Class `k` is an ellipsoid nested strictly inside the one of class `k - 1`.
    NestedEllipsoids,
    /// Solid blobs, with the last class a 1-2 voxel shell around them.
    BlobsWithThinShells,
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeFamily::NestedEllipsoids => "nested-ellipsoids",
            ShapeFamily::BlobsWithThinShells => "blobs-with-thin-shells",
        })
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nested-ellipsoids" => Ok(ShapeFamily::NestedEllipsoids),
            "blobs-with-thin-shells" => Ok(ShapeFamily::BlobsWithThinShells),
            _ => Err(Error::invalid(format!("unknown shape family {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub volume_size: [usize; 3],
    pub num_classes: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub shape_family: ShapeFamily,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            volume_size: [64; 3],
            num_classes: 3,
            num_train: 8,
            num_val: 4,
            shape_family: ShapeFamily::NestedEllipsoids,
            noise_sigma: 0.35,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.volume_size.iter().any(|&d| d < 8) {
            return Err(Error::invalid(format!(
                "volume size {:?} is too small; every axis needs at least 8 voxels",
                self.volume_size
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        if self.num_train == 0 {
            return Err(Error::invalid("need at least one training volume"));
        }
        Ok(())
    }

    /// Mean intensity of each class before noise.
    pub fn intensity(&self, class: usize) -> f32 {
        if class == 0 {
            return 0.0;
        }
        let span = (self.num_classes.saturating_sub(2)).max(1) as f32;
        1.0 - 0.5 * (class - 1) as f32 / span
    }

    pub fn to_manifest(&self) -> Vec<(String, String)> {
        let [d, h, w] = self.volume_size;
        vec![
            ("data.volume_size".into(), format!("{d}x{h}x{w}")),
            ("data.num_classes".into(), self.num_classes.to_string()),
            ("data.num_train".into(), self.num_train.to_string()),
            ("data.num_val".into(), self.num_val.to_string()),
            ("data.shape_family".into(), self.shape_family.to_string()),
            ("data.noise_sigma".into(), self.noise_sigma.to_string()),
            ("data.seed".into(), self.seed.to_string()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Volume,
    pub labels: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    /// Fraction of voxels per class over all volumes.
    pub fn prevalence(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.num_classes];
        let mut total = 0;
        for s in self.train.iter().chain(&self.val) {
            for (c, n) in s.labels.histogram(self.num_classes).into_iter().enumerate() {
                counts[c] += n;
            }
            total += s.labels.len();
        }
        counts
            .iter()
            .map(|&c| c as f64 / total.max(1) as f64)
            .collect()
    }

    pub fn prevalence_report(&self) -> String {
        let parts: Vec<String> = self
            .prevalence()
            .iter()
            .enumerate()
            .map(|(c, p)| format!("class {c}: {:.2}%", 100.0 * p))
            .collect();
        format!(
            "{} train / {} val volumes; {}",
            self.train.len(),
            self.val.len(),
            parts.join(", ")
        )
    }

    /// Content hash over every image and label voxel, in order.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for s in self.train.iter().chain(&self.val) {
            for v in s.image.data().data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            for l in s.labels.labels() {
                bytes.extend_from_slice(&l.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Squared normalized radius of voxel centre `p`.
    fn rho2(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum()
    }
}

fn unit_ball(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if v.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
            return v;
        }
    }
}

fn outer_ellipsoid(rng: &mut ChaCha8Rng, dims: [usize; 3], lo: f64, hi: f64) -> Ellipsoid {
    let radii: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * rng.random_range(lo..hi));
    let center = std::array::from_fn(|a| {
        let mid = (dims[a] as f64 - 1.0) / 2.0;
        let slack = (mid - radii[a] - 1.0).max(0.0).min(0.1 * dims[a] as f64);
        mid + rng.random_range(-1.0..=1.0) * slack
    });
    Ellipsoid { center, radii }
}

fn voxel_centres(dims: [usize; 3]) -> impl Iterator<Item = [f64; 3]> {
    let [d, h, w] = dims;
    (0..d * h * w).map(move |i| [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64])
}

fn nested_labels(rng: &mut ChaCha8Rng, dims: [usize; 3], classes: usize) -> Vec<u16> {
    let mut shapes = vec![outer_ellipsoid(rng, dims, 0.22, 0.36)];
    for _ in 2..classes {
        let parent = *shapes.last().unwrap();
        let s = rng.random_range(0.45..0.65);
        // |delta / r_parent| <= (1 - s) / 2 keeps the child strictly inside.
        let u = unit_ball(rng);
        let reach = 0.9 * (1.0 - s) / 2.0;
        shapes.push(Ellipsoid {
            center: std::array::from_fn(|a| parent.center[a] + u[a] * reach * parent.radii[a]),
            radii: parent.radii.map(|r| r * s),
        });
    }
    voxel_centres(dims)
        .map(|p| shapes.iter().take_while(|e| e.rho2(p) <= 1.0).count() as u16)
        .collect()
}

fn blob_labels(rng: &mut ChaCha8Rng, dims: [usize; 3], classes: usize) -> Vec<u16> {
    let n_blobs = rng.random_range(2..=3);
    let shell_class = (classes - 1) as u16;
    let solid_classes = classes.saturating_sub(2).max(1);
    let blobs: Vec<(Ellipsoid, f64, u16)> = (0..n_blobs)
        .map(|b| {
            let e = outer_ellipsoid(rng, dims, 0.08, 0.18);
            let thickness = rng.random_range(1.0..2.0);
            (e, thickness, 1 + (b % solid_classes) as u16)
        })
        .collect();
    voxel_centres(dims)
        .map(|p| {
            let mut label = 0u16;
            for (e, t, class) in &blobs {
                let rho = e.rho2(p).sqrt();
                let rmin = e.radii.iter().cloned().fold(f64::INFINITY, f64::min);
                if classes > 2 && rho <= 1.0 {
                    return *class;
                }
                if rho <= 1.0 + t / rmin && (classes == 2 || rho > 1.0) {
                    label = shell_class;
                }
            }
            label
        })
        .collect()
}

/// Every voxel of class `k >= 2` has face neighbours of class `>= k - 1`.
pub fn is_strictly_nested(lm: &LabelMap) -> bool {
    let [d, h, w] = lm.dims();
    let l = lm.labels();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let k = l[lm.index(z, y, x)];
                if k < 2 {
                    continue;
                }
                if z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w {
                    return false;
                }
                let nbrs = [
                    lm.index(z - 1, y, x),
                    lm.index(z + 1, y, x),
                    lm.index(z, y - 1, x),
                    lm.index(z, y + 1, x),
                    lm.index(z, y, x - 1),
                    lm.index(z, y, x + 1),
                ];
                if nbrs.iter().any(|&n| l[n] + 1 < k) {
                    return false;
                }
            }
        }
    }
    true
}

fn generate_one(spec: &SyntheticTaskSpec, index: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let dims = spec.volume_size;
    for _ in 0..MAX_ATTEMPTS {
        let labels = match spec.shape_family {
            ShapeFamily::NestedEllipsoids => nested_labels(&mut rng, dims, spec.num_classes),
            ShapeFamily::BlobsWithThinShells => blob_labels(&mut rng, dims, spec.num_classes),
        };
        let lm = LabelMap::new(dims, labels, [1.0; 3])?;
        let complete = lm.histogram(spec.num_classes).iter().all(|&n| n > 0);
        let nested_ok =
            spec.shape_family != ShapeFamily::NestedEllipsoids || is_strictly_nested(&lm);
        if !complete || !nested_ok {
            continue;
        }
        let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
        let image: Vec<f32> = lm
            .labels()
            .iter()
            .map(|&l| {
                let base = spec.intensity(l as usize);
                if spec.noise_sigma > 0.0 {
                    base + noise.sample(&mut rng)
                } else {
                    base
                }
            })
            .collect();
        let [d, h, w] = dims;
        let image = Volume::new(Tensor::new(vec![1, d, h, w], image)?, [1.0; 3])?;
        return Ok(Sample { image, labels: lm });
    }
    Err(Error::Data(format!(
        "volume {index}: could not place all {} classes in {MAX_ATTEMPTS} attempts at size {dims:?}",
        spec.num_classes
    )))
}

pub fn generate_dataset(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    generate_dataset_with(spec, false)
}

/// `parallel` spreads volumes over the rayon pool; output is identical either way.
pub fn generate_dataset_with(spec: &SyntheticTaskSpec, parallel: bool) -> Result<Dataset> {
    spec.validate()?;
    let total = (spec.num_train + spec.num_val) as u64;
    let samples: Vec<Sample> = if parallel {
        (0..total)
            .into_par_iter()
            .map(|i| generate_one(spec, i))
            .collect::<Result<_>>()?
    } else {
        (0..total)
            .map(|i| generate_one(spec, i))
            .collect::<Result<_>>()?
    };
    let mut train = samples;
    let val = train.split_off(spec.num_train);
    Ok(Dataset {
        num_classes: spec.num_classes,
        train,
        val,
    })
}
