//! Dice, normalized surface Dice and HD95 on label maps.
//!
//! Surfaces are face-6 boundaries: foreground voxels with at least one
//! face neighbour that is background or outside the grid. Surface distances
//! are Euclidean in mm between voxel centres, taken from an exact
//! anisotropic distance transform of the opposite boundary.
//!
//! A metric that cannot be computed is `None` (reported as UNDEFINED):
//! Dice when the class is absent from both maps, NSD when both surfaces are
//! empty, HD95 when either surface is empty. Means skip undefined entries
//! and carry a count of what was skipped.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::volume::LabelMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Face6,
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("face-6")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceSpec {
    pub nsd_tolerance_mm: f64,
    pub connectivity: Connectivity,
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        SurfaceSpec {
            nsd_tolerance_mm: 1.0,
            connectivity: Connectivity::Face6,
        }
    }
}

impl SurfaceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.nsd_tolerance_mm > 0.0) || !self.nsd_tolerance_mm.is_finite() {
            return Err(Error::invalid(format!(
                "nsd tolerance must be positive, got {}",
                self.nsd_tolerance_mm
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub surface: SurfaceSpec,
    pub include_background: bool,
    /// Classes to score; inferred from the largest label present when absent.
    pub num_classes: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            surface: SurfaceSpec::default(),
            include_background: false,
            num_classes: None,
        }
    }
}

/// Nearest-opposite-surface distances in mm, one entry per boundary voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceDistances {
    /// From each boundary voxel of the prediction to the reference surface.
    pub pred_to_ref: Vec<f64>,
    /// From each boundary voxel of the reference to the predicted surface.
    pub ref_to_pred: Vec<f64>,
}

impl SurfaceDistances {
    pub fn pooled(&self) -> Vec<f64> {
        let mut all = self.pred_to_ref.clone();
        all.extend_from_slice(&self.ref_to_pred);
        all
    }
}

fn class_mask(lm: &LabelMap, class: u16) -> Vec<bool> {
    lm.labels().iter().map(|&l| l == class).collect()
}

/// Face-6 boundary of a binary mask.
pub fn boundary(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x];
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                out[i] = z == 0
                    || z + 1 == d
                    || y == 0
                    || y + 1 == h
                    || x == 0
                    || x + 1 == w
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
            }
        }
    }
    out
}

/// 1-D lower envelope of parabolas: `out[q] = min_p f[p] + ((q - p) * s)^2`.
fn edt_1d(f: &[f64], s2: f64, out: &mut [f64], v: &mut Vec<usize>, zs: &mut Vec<f64>) {
    v.clear();
    zs.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zs.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let pf = p as f64;
                    let cross =
                        ((fq + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
                    if cross <= *zs.last().unwrap() {
                        v.pop();
                        zs.pop();
                    } else {
                        v.push(q);
                        zs.push(cross);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && zs[k + 1] < qf {
            k += 1;
        }
        let dq = (qf - v[k] as f64) * (qf - v[k] as f64);
        *o = s2 * dq + f[v[k]];
    }
}

/// Squared mm distance from every voxel to the nearest `true` voxel.
pub fn squared_distance_transform(sites: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    let (mut v, mut zs) = (Vec::new(), Vec::new());
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let n = dims[axis];
        let s2 = spacing[axis] * spacing[axis];
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        for base in 0..d * h * w {
            // visit each line once, from its first voxel along `axis`
            let coord = (base / strides[axis]) % n;
            if coord != 0 {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = g[base + i * strides[axis]];
            }
            edt_1d(&line, s2, &mut out, &mut v, &mut zs);
            for (i, &o) in out.iter().enumerate() {
                g[base + i * strides[axis]] = o;
            }
        }
    }
    g
}

/// Surface distances for one class, or `None` when it is absent from either map.
pub fn surface_distances(
    pred: &LabelMap,
    reference: &LabelMap,
    class: u16,
) -> Result<Option<SurfaceDistances>> {
    pred.same_grid(reference)?;
    let dims = pred.dims();
    let spacing = pred.spacing();
    let bp = boundary(&class_mask(pred, class), dims);
    let br = boundary(&class_mask(reference, class), dims);
    if !bp.contains(&true) || !br.contains(&true) {
        return Ok(None);
    }
    let to_ref = squared_distance_transform(&br, dims, spacing);
    let to_pred = squared_distance_transform(&bp, dims, spacing);
    let collect = |mask: &[bool], dt: &[f64]| -> Vec<f64> {
        mask.iter()
            .zip(dt)
            .filter(|(&m, _)| m)
            .map(|(_, &d2)| d2.sqrt())
            .collect()
    };
    Ok(Some(SurfaceDistances {
        pred_to_ref: collect(&bp, &to_ref),
        ref_to_pred: collect(&br, &to_pred),
    }))
}

/// `2|P ∩ R| / (|P| + |R|)`; `None` when the class is in neither map.
pub fn dice(pred: &LabelMap, reference: &LabelMap, class: u16) -> Result<Option<f64>> {
    pred.same_grid(reference)?;
    let (mut inter, mut np, mut nr) = (0usize, 0usize, 0usize);
    for (&p, &r) in pred.labels().iter().zip(reference.labels()) {
        let (a, b) = (p == class, r == class);
        np += a as usize;
        nr += b as usize;
        inter += (a && b) as usize;
    }
    if np + nr == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * inter as f64 / (np + nr) as f64))
}

fn boundary_count(lm: &LabelMap, class: u16) -> usize {
    boundary(&class_mask(lm, class), lm.dims())
        .iter()
        .filter(|&&b| b)
        .count()
}

/// Fraction of boundary voxels of either surface within tolerance of the other.
pub fn nsd(
    pred: &LabelMap,
    reference: &LabelMap,
    class: u16,
    spec: &SurfaceSpec,
) -> Result<Option<f64>> {
    spec.validate()?;
    match surface_distances(pred, reference, class)? {
        Some(sd) => Ok(Some(nsd_from_distances(&sd, spec.nsd_tolerance_mm))),
        None => {
            // One surface is empty: nothing lies within tolerance of it.
            let total = boundary_count(pred, class) + boundary_count(reference, class);
            Ok(if total == 0 { None } else { Some(0.0) })
        }
    }
}

pub fn nsd_from_distances(sd: &SurfaceDistances, tol: f64) -> f64 {
    let within = sd
        .pred_to_ref
        .iter()
        .chain(&sd.ref_to_pred)
        .filter(|&&d| d <= tol)
        .count();
    within as f64 / (sd.pred_to_ref.len() + sd.ref_to_pred.len()) as f64
}

/// Percentile with linear interpolation between order statistics:
/// rank `r = q (n - 1)`, value `x[floor r] + frac(r) (x[floor r + 1] - x[floor r])`.
pub fn percentile_linear(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = rank - lo as f64;
    Some(v[lo] + frac * (v[hi] - v[lo]))
}

/// 95th percentile of the pooled surface distances.
pub fn hd95(pred: &LabelMap, reference: &LabelMap, class: u16) -> Result<Option<f64>> {
    Ok(surface_distances(pred, reference, class)?
        .and_then(|sd| percentile_linear(&sd.pooled(), 0.95)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: u16,
    pub dice: Option<f64>,
    pub nsd: Option<f64>,
    pub hd95: Option<f64>,
}

/// Mean over defined entries plus the number of undefined ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanMetric {
    pub value: Option<f64>,
    pub undefined: usize,
}

impl MeanMetric {
    fn over(values: impl Iterator<Item = Option<f64>>) -> Self {
        let (mut sum, mut n, mut undefined) = (0.0, 0usize, 0usize);
        for v in values {
            match v {
                Some(x) => {
                    sum += x;
                    n += 1;
                }
                None => undefined += 1,
            }
        }
        MeanMetric {
            value: (n > 0).then(|| sum / n as f64),
            undefined,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean_dice: MeanMetric,
    pub mean_nsd: MeanMetric,
    pub mean_hd95: MeanMetric,
    pub config: EvalConfig,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "UNDEFINED".to_string(), |x| format!("{x:.6}"))
}

impl MetricsReport {
    pub fn metadata(&self) -> Vec<(String, String)> {
        vec![
            (
                "nsd_tolerance_mm".into(),
                self.config.surface.nsd_tolerance_mm.to_string(),
            ),
            (
                "connectivity".into(),
                self.config.surface.connectivity.to_string(),
            ),
            (
                "background".into(),
                if self.config.include_background {
                    "included"
                } else {
                    "excluded"
                }
                .into(),
            ),
            ("hd95_percentile".into(), "linear".into()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.metadata() {
            let _ = writeln!(s, "# {k}: {v}");
        }
        let _ = writeln!(
            s,
            "{:<8} {:>12} {:>12} {:>12}",
            "class", "dice", "nsd", "hd95_mm"
        );
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<8} {:>12} {:>12} {:>12}",
                c.class,
                cell(c.dice),
                cell(c.nsd),
                cell(c.hd95)
            );
        }
        let _ = writeln!(
            s,
            "{:<8} {:>12} {:>12} {:>12}",
            "mean",
            cell(self.mean_dice.value),
            cell(self.mean_nsd.value),
            cell(self.mean_hd95.value)
        );
        let _ = writeln!(
            s,
            "{:<8} {:>12} {:>12} {:>12}",
            "undef", self.mean_dice.undefined, self.mean_nsd.undefined, self.mean_hd95.undefined
        );
        s
    }

    /// Tab-separated rows with `#` metadata lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.metadata() {
            let _ = writeln!(s, "#{k}={v}");
        }
        s.push_str("class\tdice\tnsd\thd95_mm\n");
        let full = |v: Option<f64>| v.map_or_else(|| "UNDEFINED".to_string(), |x| format!("{x:?}"));
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                c.class,
                full(c.dice),
                full(c.nsd),
                full(c.hd95)
            );
        }
        let _ = writeln!(
            s,
            "mean\t{}\t{}\t{}",
            full(self.mean_dice.value),
            full(self.mean_nsd.value),
            full(self.mean_hd95.value)
        );
        let _ = writeln!(
            s,
            "undefined\t{}\t{}\t{}",
            self.mean_dice.undefined, self.mean_nsd.undefined, self.mean_hd95.undefined
        );
        s
    }
}

pub fn evaluate_class(
    pred: &LabelMap,
    reference: &LabelMap,
    class: u16,
    spec: &SurfaceSpec,
) -> Result<ClassMetrics> {
    spec.validate()?;
    let dice = dice(pred, reference, class)?;
    let (nsd, hd95) = match surface_distances(pred, reference, class)? {
        Some(sd) => (
            Some(nsd_from_distances(&sd, spec.nsd_tolerance_mm)),
            percentile_linear(&sd.pooled(), 0.95),
        ),
        None => (if dice.is_some() { Some(0.0) } else { None }, None),
    };
    Ok(ClassMetrics {
        class,
        dice,
        nsd,
        hd95,
    })
}

pub fn evaluate(pred: &LabelMap, reference: &LabelMap, cfg: &EvalConfig) -> Result<MetricsReport> {
    pred.same_grid(reference)?;
    cfg.surface.validate()?;
    let num_classes = match cfg.num_classes {
        Some(c) => {
            pred.check_classes(c)?;
            reference.check_classes(c)?;
            c
        }
        None => pred.max_label().max(reference.max_label()) as usize + 1,
    };
    let first = if cfg.include_background { 0 } else { 1 };
    let per_class = (first..num_classes)
        .map(|c| evaluate_class(pred, reference, c as u16, &cfg.surface))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        mean_dice: MeanMetric::over(per_class.iter().map(|c| c.dice)),
        mean_nsd: MeanMetric::over(per_class.iter().map(|c| c.nsd)),
        mean_hd95: MeanMetric::over(per_class.iter().map(|c| c.hd95)),
        per_class,
        config: *cfg,
    })
}
