//! Teacher / Student / Student+KD rows over a set of width scales and seeds.
//!
//! Within a scale, the paired Student and Student+KD runs share the seed,
//! so they start from the same weights and see the same patches; the only
//! difference is the distillation term.

use std::fmt::Write as _;

use super::synth::Dataset;
use super::trainer::{train, Budget, TrainRunConfig};
use crate::error::{Error, Result};
use crate::infer::{predict, SlidingWindowConfig};
use crate::kd::DistillConfig;
use crate::metrics::{evaluate, EvalConfig};
use crate::unet::{capacity, checkpoint_hash, Network, Scale};

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonConfig {
    /// Student runs reuse everything but the plan scale, seed and distillation.
    pub student_template: TrainRunConfig,
    pub scales: Vec<Scale>,
    pub seeds: Vec<u64>,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub overlap: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    Teacher,
    Student,
    StudentKd,
}

impl RowKind {
    pub fn label(self) -> &'static str {
        match self {
            RowKind::Teacher => "Teacher",
            RowKind::Student => "Student",
            RowKind::StudentKd => "Student+KD",
        }
    }
}

/// Validation-set means for one trained network.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    pub dice: f64,
    pub nsd: f64,
    pub hd95: Option<f64>,
    pub budget: Budget,
    pub checkpoint_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub kind: RowKind,
    pub scale: Scale,
    pub params: u64,
    pub runs: Vec<RunMetrics>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

impl ComparisonRow {
    pub fn name(&self) -> String {
        match self.kind {
            RowKind::Teacher => "Teacher".into(),
            k => format!("{} x{}", k.label(), self.scale),
        }
    }

    pub fn dice(&self) -> (f64, f64) {
        mean_sd(&self.runs.iter().map(|r| r.dice).collect::<Vec<_>>())
    }

    pub fn nsd(&self) -> (f64, f64) {
        mean_sd(&self.runs.iter().map(|r| r.nsd).collect::<Vec<_>>())
    }

    pub fn hd95(&self) -> (f64, f64) {
        mean_sd(&self.runs.iter().filter_map(|r| r.hd95).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub teacher_sha256: String,
}

impl ComparisonTable {
    pub fn row(&self, kind: RowKind, scale: Scale) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.kind == kind && (kind == RowKind::Teacher || r.scale == scale))
    }

    /// Per-seed `Dice(Student+KD) - Dice(Student)` at `scale`, in seed order.
    pub fn kd_gaps(&self, scale: Scale) -> Option<Vec<f64>> {
        let s = self.row(RowKind::Student, scale)?;
        let k = self.row(RowKind::StudentKd, scale)?;
        Some(
            s.runs
                .iter()
                .zip(&k.runs)
                .map(|(a, b)| b.dice - a.dice)
                .collect(),
        )
    }

    /// Student rows whose mean Dice beats the teacher's (expected not to happen).
    pub fn ordering_violations(&self) -> Vec<String> {
        let Some(t) = self.row(RowKind::Teacher, Scale::ONE) else {
            return Vec::new();
        };
        let td = t.dice().0;
        self.rows
            .iter()
            .filter(|r| r.kind != RowKind::Teacher && r.dice().0 > td)
            .map(|r| {
                format!(
                    "{} mean Dice {:.4} exceeds teacher {:.4}",
                    r.name(),
                    r.dice().0,
                    td
                )
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18} {:>10} {:>17} {:>17} {:>17} {:>5}",
            "Model", "Params", "Dice", "NSD", "HD95 (mm)", "runs"
        );
        let pm = |(m, sd): (f64, f64)| format!("{m:.4} ± {sd:.4}");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<18} {:>10} {:>17} {:>17} {:>17} {:>5}",
                r.name(),
                r.params,
                pm(r.dice()),
                pm(r.nsd()),
                pm(r.hd95()),
                r.runs.len()
            );
        }
        for v in self.ordering_violations() {
            let _ = writeln!(s, "! ordering: {v}");
        }
        s
    }

    /// Tab-separated, one line per run.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "model\tkind\tscale\tparams\tseed\tdice\tnsd\thd95_mm\tstudent_forward\tstudent_backward\tteacher_forward\tcheckpoint_sha256\n",
        );
        for r in &self.rows {
            for run in &r.runs {
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}\t{}\t{}\t{:?}\t{:?}\t{}\t{}\t{}\t{}\t{}",
                    r.name(),
                    r.kind.label(),
                    r.scale,
                    r.params,
                    run.seed,
                    run.dice,
                    run.nsd,
                    run.hd95
                        .map_or_else(|| "UNDEFINED".into(), |h| format!("{h:?}")),
                    run.budget.student_forward,
                    run.budget.student_backward,
                    run.budget.teacher_forward,
                    run.checkpoint_sha256
                );
            }
        }
        s
    }
}

/// Validation means of Dice, NSD and HD95 over all val volumes.
pub fn score(
    net: &Network,
    data: &Dataset,
    eval: &EvalConfig,
    overlap: f64,
) -> Result<(f64, f64, Option<f64>)> {
    if data.val.is_empty() {
        return Err(Error::Data("comparison needs validation volumes".into()));
    }
    let mut window = SlidingWindowConfig::new(net.plan().patch_size);
    window.overlap = overlap;
    let (mut dice, mut nsd, mut hd) = (0.0, 0.0, Vec::new());
    for s in &data.val {
        let (pred, _) = predict(net, &s.image, &window)?;
        let r = evaluate(&pred, &s.labels, eval)?;
        dice += r.mean_dice.value.unwrap_or(0.0);
        nsd += r.mean_nsd.value.unwrap_or(0.0);
        if let Some(h) = r.mean_hd95.value {
            hd.push(h);
        }
    }
    let n = data.val.len() as f64;
    let hd95 = (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64);
    Ok((dice / n, nsd / n, hd95))
}

fn metrics_for(
    net: &Network,
    seed: u64,
    budget: Budget,
    data: &Dataset,
    cfg: &ComparisonConfig,
) -> Result<RunMetrics> {
    let (dice, nsd, hd95) = score(net, data, &cfg.eval, cfg.overlap)?;
    Ok(RunMetrics {
        seed,
        dice,
        nsd,
        hd95,
        budget,
        checkpoint_sha256: checkpoint_hash(net),
    })
}

/// Trains the teacher with `teacher_run`, freezes it, then runs the students.
pub fn run_comparison_suite(
    teacher_run: &TrainRunConfig,
    cfg: &ComparisonConfig,
    data: &Dataset,
) -> Result<ComparisonTable> {
    let out = train(teacher_run, data, None)?.into_result()?;
    let mut teacher = out.network;
    teacher.freeze();
    let row = metrics_for(&teacher, teacher_run.seed, out.budget, data, cfg)?;
    run_comparison_with_teacher(&teacher, row, cfg, data, &mut |_| {})
}

/// Student rows against an already trained, frozen teacher.
pub fn run_comparison_with_teacher(
    teacher: &Network,
    teacher_metrics: RunMetrics,
    cfg: &ComparisonConfig,
    data: &Dataset,
    progress: &mut dyn FnMut(&str),
) -> Result<ComparisonTable> {
    if !teacher.is_frozen() {
        return Err(Error::invalid("teacher must be frozen"));
    }
    if cfg.seeds.is_empty() || cfg.scales.is_empty() {
        return Err(Error::invalid("need at least one seed and one scale"));
    }
    let teacher_sha = checkpoint_hash(teacher);
    let mut rows = vec![ComparisonRow {
        kind: RowKind::Teacher,
        scale: Scale::ONE,
        params: capacity(teacher.plan())?.params,
        runs: vec![teacher_metrics],
    }];
    for &scale in &cfg.scales {
        let plan = cfg.student_template.plan.with_scale(scale);
        let params = capacity(&plan)?.params;
        let mut plain = ComparisonRow {
            kind: RowKind::Student,
            scale,
            params,
            runs: Vec::new(),
        };
        let mut kd = ComparisonRow {
            kind: RowKind::StudentKd,
            ..plain.clone()
        };
        for &seed in &cfg.seeds {
            let mut run = cfg.student_template.clone();
            run.plan = plan.clone();
            run.seed = seed;
            run.distill = None;
            run.teacher_checkpoint = None;
            let out = train(&run, data, None)?.into_result()?;
            plain
                .runs
                .push(metrics_for(&out.network, seed, out.budget, data, cfg)?);

            run.distill = Some(cfg.distill);
            run.teacher_checkpoint = Some(teacher_sha.clone());
            let out = train(&run, data, Some(teacher))?.into_result()?;
            kd.runs
                .push(metrics_for(&out.network, seed, out.budget, data, cfg)?);
            progress(&format!(
                "x{scale} seed {seed}: student dice {:.4}, student+kd dice {:.4}",
                plain.runs.last().unwrap().dice,
                kd.runs.last().unwrap().dice
            ));
        }
        rows.push(plain);
        rows.push(kd);
    }
    Ok(ComparisonTable {
        rows,
        teacher_sha256: teacher_sha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::synth::{generate_dataset, SyntheticTaskSpec};
    use crate::unet::NetworkPlan;

    #[test]
    fn table_structure_and_params() {
        let plan = NetworkPlan {
            num_classes: 3,
            input_channels: 1,
            num_stages: 2,
            base_width: 8,
            max_width: 16,
            scale: Scale::ONE,
            convs_per_stage: 1,
            patch_size: [8, 8, 8],
        };
        let data = generate_dataset(&SyntheticTaskSpec {
            volume_size: [12, 12, 12],
            num_train: 2,
            num_val: 1,
            seed: 2,
            ..SyntheticTaskSpec::default()
        })
        .unwrap();
        let mut run = TrainRunConfig::new(plan);
        run.epochs = 1;
        run.iterations_per_epoch = 1;
        run.val_every = 0;
        let cfg = ComparisonConfig {
            student_template: run.clone(),
            scales: vec![Scale::HALF, Scale::QUARTER],
            seeds: vec![1, 2],
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            overlap: 0.0,
        };
        let table = run_comparison_suite(&run, &cfg, &data).unwrap();
        assert_eq!(table.rows.len(), 1 + 2 * cfg.scales.len());
        for r in &table.rows {
            assert_eq!(
                r.params,
                capacity(&run.plan.with_scale(r.scale)).unwrap().params
            );
        }
        let plain = table.row(RowKind::Student, Scale::HALF).unwrap();
        let kd = table.row(RowKind::StudentKd, Scale::HALF).unwrap();
        for (a, b) in plain.runs.iter().zip(&kd.runs) {
            assert_eq!(a.budget.student_forward, b.budget.student_forward);
            assert_eq!(a.budget.student_backward, b.budget.student_backward);
            assert_eq!(a.budget.teacher_forward, 0);
            assert_eq!(b.budget.teacher_forward, b.budget.student_forward);
        }
        assert_eq!(table.kd_gaps(Scale::QUARTER).unwrap().len(), 2);
        assert!(table.to_text().contains("Student+KD x1/4"));
        assert_eq!(table.to_tsv().lines().count(), 1 + 1 + 2 * 2 * 2);
    }
}
