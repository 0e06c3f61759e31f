//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;
pub mod nifticheck;

use kdseg::metrics::{dice, hd95, nsd, SurfaceSpec};
use kdseg::volume::LabelMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random label map with blobby foreground: each voxel copies a random
/// earlier neighbour's label with probability `stick`, otherwise draws fresh.
pub fn random_labels<R: Rng>(
    rng: &mut R,
    dims: [usize; 3],
    classes: u16,
    stick: f64,
    spacing: [f64; 3],
) -> LabelMap {
    let [d, h, w] = dims;
    let mut labels = vec![0u16; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let prev = [
                    (z > 0).then(|| i - h * w),
                    (y > 0).then(|| i - w),
                    (x > 0).then(|| i - 1),
                ];
                let prev: Vec<usize> = prev.into_iter().flatten().collect();
                labels[i] = if !prev.is_empty() && rng.random_bool(stick) {
                    labels[prev[rng.random_range(0..prev.len())]]
                } else {
                    rng.random_range(0..classes)
                };
            }
        }
    }
    LabelMap::new(dims, labels, spacing).unwrap()
}

fn coords(dims: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                out.push([z, y, x]);
            }
        }
    }
    out
}

/// A prediction/reference pair of at most 8^3 voxels with anisotropic
/// spacing, plus an NSD tolerance.
pub fn random_case(seed: u64) -> (LabelMap, LabelMap, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [
        rng.random_range(1..=8),
        rng.random_range(1..=8),
        rng.random_range(1..=8),
    ];
    let spacing = [0.5, 1.0, 1.25, 2.0, 0.7];
    let sp = [
        spacing[rng.random_range(0..5)],
        spacing[rng.random_range(0..5)],
        spacing[rng.random_range(0..5)],
    ];
    let stick = rng.random_range(0.0..0.9);
    let p = random_labels(&mut rng, dims, 3, stick, sp);
    let r = random_labels(&mut rng, dims, 3, stick, sp);
    let tol = [0.5, 1.0, 1.5, 2.5][rng.random_range(0..4)];
    (p, r, tol)
}

/// Foreground voxels that touch the grid edge or a background face neighbour.
pub fn oracle_surface(lm: &LabelMap, class: u16) -> Vec<[usize; 3]> {
    let dims = lm.dims();
    let inside = |p: [isize; 3]| (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < dims[a]);
    let fg = |p: [isize; 3]| {
        inside(p) && lm.labels()[lm.index(p[0] as usize, p[1] as usize, p[2] as usize)] == class
    };
    coords(dims)
        .into_iter()
        .filter(|&[z, y, x]| {
            let p = [z as isize, y as isize, x as isize];
            fg(p)
                && [
                    [1, 0, 0],
                    [-1, 0, 0],
                    [0, 1, 0],
                    [0, -1, 0],
                    [0, 0, 1],
                    [0, 0, -1],
                ]
                .iter()
                .any(|o| !fg([p[0] + o[0], p[1] + o[1], p[2] + o[2]]))
        })
        .collect()
}

fn mm(a: [usize; 3], b: [usize; 3], s: [f64; 3]) -> f64 {
    (0..3)
        .map(|k| ((a[k] as f64 - b[k] as f64) * s[k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Every surface voxel of one side to its nearest surface voxel of the other, by exhaustion.
pub fn oracle_distances(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|&a| {
            to.iter()
                .map(|&b| mm(a, b, spacing))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

pub fn oracle_dice(p: &LabelMap, r: &LabelMap, class: u16) -> Option<f64> {
    let a = p.labels().iter().filter(|&&l| l == class).count();
    let b = r.labels().iter().filter(|&&l| l == class).count();
    let both = p
        .labels()
        .iter()
        .zip(r.labels())
        .filter(|(&x, &y)| x == class && y == class)
        .count();
    (a + b > 0).then(|| 2.0 * both as f64 / (a + b) as f64)
}

pub fn oracle_nsd(p: &LabelMap, r: &LabelMap, class: u16, tol: f64) -> Option<f64> {
    let (sp, sr) = (oracle_surface(p, class), oracle_surface(r, class));
    let total = sp.len() + sr.len();
    if total == 0 {
        return None;
    }
    let s = p.spacing();
    let within = oracle_distances(&sp, &sr, s)
        .into_iter()
        .chain(oracle_distances(&sr, &sp, s))
        .filter(|&d| d <= tol)
        .count();
    Some(within as f64 / total as f64)
}

/// 95th percentile of pooled distances, linear interpolation between order statistics.
pub fn oracle_hd95(p: &LabelMap, r: &LabelMap, class: u16) -> Option<f64> {
    let (sp, sr) = (oracle_surface(p, class), oracle_surface(r, class));
    if sp.is_empty() || sr.is_empty() {
        return None;
    }
    let s = p.spacing();
    let mut all = oracle_distances(&sp, &sr, s);
    all.extend(oracle_distances(&sr, &sp, s));
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (all.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(all.len() - 1);
    Some(all[i] + (pos - i as f64) * (all[j] - all[i]))
}

/// Compares one metric value against its oracle: identical definedness, and
/// values equal within `tol` (0 for exact).
pub fn agree(what: &str, got: Option<f64>, want: Option<f64>, tol: f64) -> Result<(), String> {
    match (got, want) {
        (None, None) => Ok(()),
        (Some(g), Some(w)) if (g - w).abs() <= tol => Ok(()),
        _ => Err(format!("{what}: got {got:?}, oracle {want:?}")),
    }
}

/// Tolerance on surface distances against the brute-force oracle, in mm.
pub const DIST_TOL_MM: f64 = 1e-9;

/// Dice and NSD must match the oracles exactly, HD95 within
/// [`DIST_TOL_MM`], for every class of `cases` random pairs. Returns the
/// number of (pair, class) comparisons.
pub fn check_metric_oracles(cases: u64) -> usize {
    let mut compared = 0;
    for seed in 0..cases {
        let (p, r, tol) = random_case(seed);
        let spec = SurfaceSpec {
            nsd_tolerance_mm: tol,
            ..Default::default()
        };
        for class in 0..3u16 {
            let what = format!("seed {seed} class {class}");
            agree(
                &format!("{what} dice"),
                dice(&p, &r, class).unwrap(),
                oracle_dice(&p, &r, class),
                0.0,
            )
            .unwrap();
            agree(
                &format!("{what} nsd"),
                nsd(&p, &r, class, &spec).unwrap(),
                oracle_nsd(&p, &r, class, tol),
                0.0,
            )
            .unwrap();
            agree(
                &format!("{what} hd95"),
                hd95(&p, &r, class).unwrap(),
                oracle_hd95(&p, &r, class),
                DIST_TOL_MM,
            )
            .unwrap();
            compared += 1;
        }
    }
    compared
}

/// A 4^3 cube against the same cube shifted by half its width has Dice 0.5;
/// two single voxels 2 columns apart at 1.5 mm spacing are 3 mm apart.
pub fn check_metric_fixtures() {
    let cube = |off: usize| {
        let mut lm = LabelMap::filled([8, 8, 8], 0, [1.0; 3]).unwrap();
        for z in 2..6 {
            for y in 2..6 {
                for x in off..off + 4 {
                    let i = lm.index(z, y, x);
                    lm.labels_mut()[i] = 1;
                }
            }
        }
        lm
    };
    assert_eq!(dice(&cube(1), &cube(3), 1).unwrap(), Some(0.5));

    let spacing = [1.0, 1.0, 1.5];
    let mut p = LabelMap::filled([3, 3, 5], 0, spacing).unwrap();
    let mut r = p.clone();
    let (i, j) = (p.index(1, 1, 1), r.index(1, 1, 3));
    p.labels_mut()[i] = 1;
    r.labels_mut()[j] = 1;
    assert_eq!(hd95(&p, &r, 1).unwrap(), Some(3.0));
    assert_eq!(dice(&p, &r, 1).unwrap(), Some(0.0));
    let spec = |t| SurfaceSpec {
        nsd_tolerance_mm: t,
        ..Default::default()
    };
    assert_eq!(nsd(&p, &r, 1, &spec(2.9)).unwrap(), Some(0.0));
    assert_eq!(nsd(&p, &r, 1, &spec(3.0)).unwrap(), Some(1.0));
}
