//! Patch-based SGD training, with or without a frozen teacher.
//!
//! Each iteration draws a batch of patches (a fixed fraction centred on a
//! random foreground voxel, the rest uniform), applies random axis flips,
//! and steps on the batch-mean gradient of [`total_loss`]. The teacher is
//! evaluated on exactly the same augmented patch. Random draws never depend
//! on whether a teacher is present, so paired runs see identical patches.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synth::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::infer::{predict, SlidingWindowConfig};
use crate::kd::{total_loss, DistillConfig};
use crate::manifest::Manifest;
use crate::metrics::{evaluate, EvalConfig};
use crate::tensor::Tensor;
use crate::unet::{checkpoint_hash, Gradients, Network, NetworkPlan, Sgd};

/// Epoch fraction after which the learning rate drops 10x.
pub const LR_DECAY_AT: f64 = 0.75;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub plan: NetworkPlan,
    /// Present exactly when a teacher is supplied.
    pub distill: Option<DistillConfig>,
    pub epochs: usize,
    pub batch_size: usize,
    pub iterations_per_epoch: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
    /// sha256 of the teacher checkpoint.
    pub teacher_checkpoint: Option<String>,
    /// Share of patches centred on a foreground voxel.
    pub foreground_fraction: f64,
    pub flip_augment: bool,
    /// Validate every `val_every` epochs (and always after the last); 0 = last only.
    pub val_every: usize,
    pub val_overlap: f64,
}

impl TrainRunConfig {
    pub fn new(plan: NetworkPlan) -> Self {
        TrainRunConfig {
            plan,
            distill: None,
            epochs: 10,
            batch_size: 2,
            iterations_per_epoch: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            teacher_checkpoint: None,
            foreground_fraction: 0.5,
            flip_augment: true,
            val_every: 1,
            val_overlap: 0.5,
        }
    }

    /// Loss settings; the segmentation part is shared by KD and non-KD runs.
    pub fn loss_config(&self) -> DistillConfig {
        self.distill.unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.iterations_per_epoch == 0 {
            return Err(Error::invalid(
                "epochs, batch size and iterations must be positive",
            ));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "need learning rate > 0 and momentum in [0, 1), got {} / {}",
                self.learning_rate, self.momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.foreground_fraction) {
            return Err(Error::invalid("foreground fraction must be in [0, 1]"));
        }
        if self.distill.is_some() != self.teacher_checkpoint.is_some() {
            return Err(Error::invalid(
                "a distillation config requires a teacher checkpoint and vice versa",
            ));
        }
        if let Some(d) = &self.distill {
            d.validate()?;
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f32 {
        let decay_epoch = (self.epochs as f64 * LR_DECAY_AT).floor() as usize;
        if epoch >= decay_epoch {
            self.learning_rate / 10.0
        } else {
            self.learning_rate
        }
    }

    pub fn to_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.extend(&self.plan.to_manifest());
        m.set("train.epochs", self.epochs)
            .set("train.batch_size", self.batch_size)
            .set("train.iterations_per_epoch", self.iterations_per_epoch)
            .set("train.learning_rate", self.learning_rate)
            .set("train.momentum", self.momentum)
            .set("train.seed", self.seed)
            .set("train.foreground_fraction", self.foreground_fraction)
            .set("train.flip_augment", self.flip_augment)
            .set("train.val_every", self.val_every)
            .set("train.val_overlap", self.val_overlap);
        let loss = self.loss_config();
        m.set("loss.dice_smooth", loss.dice_smooth)
            .set("loss.dice_include_background", loss.dice_include_background);
        if let (Some(d), Some(t)) = (&self.distill, &self.teacher_checkpoint) {
            m.set("distill.tau", d.temperature)
                .set("distill.lambda", d.kd_weight)
                .set("distill.teacher_sha256", t);
        }
        m
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let plan = NetworkPlan::from_manifest(m.entries())?;
        let loss = DistillConfig {
            dice_smooth: m.parse_value("loss.dice_smooth")?,
            dice_include_background: m.parse_value("loss.dice_include_background")?,
            ..DistillConfig::default()
        };
        let (distill, teacher_checkpoint) = match m.get("distill.teacher_sha256") {
            Some(t) => (
                Some(DistillConfig {
                    temperature: m.parse_value("distill.tau")?,
                    kd_weight: m.parse_value("distill.lambda")?,
                    ..loss
                }),
                Some(t.to_string()),
            ),
            None => (None, None),
        };
        let run = TrainRunConfig {
            plan,
            distill,
            epochs: m.parse_value("train.epochs")?,
            batch_size: m.parse_value("train.batch_size")?,
            iterations_per_epoch: m.parse_value("train.iterations_per_epoch")?,
            learning_rate: m.parse_value("train.learning_rate")?,
            momentum: m.parse_value("train.momentum")?,
            seed: m.parse_value("train.seed")?,
            teacher_checkpoint,
            foreground_fraction: m.parse_value("train.foreground_fraction")?,
            flip_augment: m.parse_value("train.flip_augment")?,
            val_every: m.parse_value("train.val_every")?,
            val_overlap: m.parse_value("train.val_overlap")?,
        };
        if run.distill.is_none() && run.loss_config() != loss {
            return Err(Error::invalid(
                "non-default segmentation loss settings need a distill config",
            ));
        }
        Ok(run)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub seg_loss: f64,
    pub kd_loss: f64,
    pub total: f64,
    pub val_dice: Option<f64>,
    pub wall_ms: u128,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch\tseg_loss\tkd_loss\ttotal\tval_dice\twall_ms";

    pub fn to_line(&self) -> String {
        let val = self
            .val_dice
            .map_or_else(|| "-".to_string(), |v| format!("{v:?}"));
        format!(
            "{}\t{:?}\t{:?}\t{:?}\t{}\t{}",
            self.epoch, self.seg_loss, self.kd_loss, self.total, val, self.wall_ms
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\n", EpochRecord::HEADER);
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    /// The log with the measured column blanked, for reproducibility checks.
    pub fn without_timing(&self) -> TrainLog {
        TrainLog {
            records: self
                .records
                .iter()
                .map(|r| EpochRecord {
                    wall_ms: 0,
                    ..r.clone()
                })
                .collect(),
        }
    }

    pub fn final_val_dice(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_dice)
    }
}

/// Patch evaluations consumed by a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Budget {
    pub student_forward: u64,
    pub student_backward: u64,
    /// Counted separately: only KD runs spend these.
    pub teacher_forward: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The final network, or the last finite one after divergence.
    pub network: Network,
    pub log: TrainLog,
    pub budget: Budget,
    /// 1-based epoch whose loss went non-finite.
    pub diverged_at: Option<usize>,
}

impl TrainOutcome {
    pub fn into_result(self) -> Result<TrainOutcome> {
        match self.diverged_at {
            Some(epoch) => Err(Error::NonFiniteLoss { epoch }),
            None => Ok(self),
        }
    }
}

struct CaseIndex {
    /// Foreground voxel indices per class (empty for background).
    by_class: Vec<Vec<usize>>,
}

fn index_cases(samples: &[Sample], classes: usize) -> Vec<CaseIndex> {
    samples
        .iter()
        .map(|s| {
            let mut by_class = vec![Vec::new(); classes];
            for (i, &l) in s.labels.labels().iter().enumerate() {
                if l > 0 {
                    by_class[l as usize].push(i);
                }
            }
            CaseIndex { by_class }
        })
        .collect()
}

fn sample_patch(
    rng: &mut ChaCha8Rng,
    data: &[Sample],
    index: &[CaseIndex],
    run: &TrainRunConfig,
) -> Result<(Tensor, crate::volume::LabelMap)> {
    let case = rng.random_range(0..data.len());
    let sample = &data[case];
    let dims = sample.labels.dims();
    let patch = run.plan.patch_size;
    let biased = rng.random_bool(run.foreground_fraction);
    let classes: Vec<&Vec<usize>> = index[case]
        .by_class
        .iter()
        .filter(|v| !v.is_empty())
        .collect();
    let origin: [usize; 3] = if biased && !classes.is_empty() {
        let voxels = classes[rng.random_range(0..classes.len())];
        let v = voxels[rng.random_range(0..voxels.len())];
        let [_, h, w] = dims;
        let centre = [v / (h * w), (v / w) % h, v % w];
        std::array::from_fn(|a| {
            centre[a]
                .saturating_sub(patch[a] / 2)
                .min(dims[a] - patch[a])
        })
    } else {
        std::array::from_fn(|a| rng.random_range(0..=dims[a] - patch[a]))
    };
    let flips: [bool; 3] = std::array::from_fn(|_| rng.random_bool(0.5));
    let mut image = sample.image.data().crop(origin, patch)?;
    let mut labels = sample.labels.crop(origin, patch)?;
    if run.flip_augment {
        for (axis, &f) in flips.iter().enumerate() {
            if f {
                image = image.flip_spatial(axis)?;
                labels = labels.flip(axis)?;
            }
        }
    }
    Ok((image, labels))
}

/// Mean over validation cases of the foreground mean Dice.
pub fn validation_dice(net: &Network, val: &[Sample], overlap: f64) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut window = SlidingWindowConfig::new(net.plan().patch_size);
    window.overlap = overlap;
    let eval = EvalConfig {
        num_classes: Some(net.plan().num_classes),
        ..EvalConfig::default()
    };
    let mut sum = 0.0;
    for s in val {
        let (pred, _) = predict(net, &s.image, &window)?;
        sum += evaluate(&pred, &s.labels, &eval)?
            .mean_dice
            .value
            .unwrap_or(0.0);
    }
    Ok(Some(sum / val.len() as f64))
}

fn check_teacher(run: &TrainRunConfig, teacher: Option<&Network>) -> Result<()> {
    match (teacher, &run.teacher_checkpoint) {
        (None, None) => Ok(()),
        (Some(t), Some(hash)) => {
            if !t.is_frozen() {
                return Err(Error::invalid("teacher must be frozen before distillation"));
            }
            let (tp, sp) = (t.plan(), &run.plan);
            if tp.num_classes != sp.num_classes || tp.input_channels != sp.input_channels {
                return Err(Error::invalid(format!(
                    "teacher has {} classes / {} input channels, student plan has {} / {}",
                    tp.num_classes, tp.input_channels, sp.num_classes, sp.input_channels
                )));
            }
            let actual = checkpoint_hash(t);
            if &actual != hash {
                return Err(Error::invalid(format!(
                    "teacher checkpoint hash {actual} does not match the configured {hash}"
                )));
            }
            Ok(())
        }
        (Some(_), None) => Err(Error::invalid(
            "a teacher was supplied but distillation is not configured",
        )),
        (None, Some(_)) => Err(Error::invalid(
            "distillation is configured but no teacher was supplied",
        )),
    }
}

pub fn train(
    run: &TrainRunConfig,
    data: &Dataset,
    teacher: Option<&Network>,
) -> Result<TrainOutcome> {
    train_with_callback(run, data, teacher, &mut |_, _| Ok(()))
}

/// `on_epoch` sees every finite epoch's record and network, in order.
pub fn train_with_callback(
    run: &TrainRunConfig,
    data: &Dataset,
    teacher: Option<&Network>,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Network) -> Result<()>,
) -> Result<TrainOutcome> {
    run.validate()?;
    check_teacher(run, teacher)?;
    if data.num_classes != run.plan.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, plan expects {}",
            data.num_classes, run.plan.num_classes
        )));
    }
    if run.plan.input_channels != 1 {
        return Err(Error::invalid("training data is single-channel"));
    }
    run.plan.check_spatial(run.plan.patch_size)?;
    for (i, s) in data.train.iter().enumerate() {
        let dims = s.labels.dims();
        if (0..3).any(|a| dims[a] < run.plan.patch_size[a]) {
            return Err(Error::Data(format!(
                "training volume {i} of size {dims:?} is smaller than the patch {:?}",
                run.plan.patch_size
            )));
        }
    }

    let mut net = Network::build(&run.plan, run.seed)?;
    let lineage = lineage(run, data);
    for (k, v) in lineage.entries() {
        net.set_lineage(k.clone(), v.clone())?;
    }
    let loss_cfg = run.loss_config();
    let index = index_cases(&data.train, run.plan.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    rng.set_stream(1);
    let mut sgd = Sgd::new(run.learning_rate, run.momentum);
    let mut budget = Budget::default();
    let mut log = TrainLog::default();
    let mut last_finite = net.clone();

    for epoch in 0..run.epochs {
        let start = Instant::now();
        sgd.learning_rate = run.learning_rate_at(epoch);
        let (mut seg_sum, mut kd_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut diverged = false;
        for _ in 0..run.iterations_per_epoch {
            let mut grads = Gradients::zeros_like(&net);
            let (mut seg, mut kd, mut total) = (0.0, 0.0, 0.0);
            for _ in 0..run.batch_size {
                let (image, labels) = sample_patch(&mut rng, &data.train, &index, run)?;
                let (logits, trace) = net.forward_train(&image)?;
                budget.student_forward += 1;
                let teacher_logits = match teacher {
                    Some(t) => {
                        budget.teacher_forward += 1;
                        Some(t.forward(&image)?)
                    }
                    None => None,
                };
                let loss = total_loss(&logits, teacher_logits.as_ref(), &labels, &loss_cfg)?;
                let g = net.backward(trace, &loss.grad_logits)?;
                budget.student_backward += 1;
                grads.accumulate(&g, 1.0 / run.batch_size as f32)?;
                seg += loss.seg_loss;
                kd += loss.kd_loss;
                total += loss.total;
            }
            let b = run.batch_size as f64;
            if !total.is_finite() || !grads.is_finite() {
                diverged = true;
                break;
            }
            sgd.step(&mut net, &grads)?;
            seg_sum += seg / b;
            kd_sum += kd / b;
            total_sum += total / b;
        }
        if diverged
            || !net
                .layers()
                .iter()
                .all(|l| l.weight.is_finite() && l.bias.is_finite())
        {
            return Ok(TrainOutcome {
                network: last_finite,
                log,
                budget,
                diverged_at: Some(epoch + 1),
            });
        }
        let last = epoch + 1 == run.epochs;
        let due = run.val_every > 0 && (epoch + 1) % run.val_every == 0;
        let val_dice = if last || due {
            validation_dice(&net, &data.val, run.val_overlap)?
        } else {
            None
        };
        let n = run.iterations_per_epoch as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            seg_loss: seg_sum / n,
            kd_loss: kd_sum / n,
            total: total_sum / n,
            val_dice,
            wall_ms: start.elapsed().as_millis(),
        };
        on_epoch(&record, &net)?;
        log.records.push(record);
        last_finite = net.clone();
    }
    Ok(TrainOutcome {
        network: net,
        log,
        budget,
        diverged_at: None,
    })
}

fn lineage(run: &TrainRunConfig, data: &Dataset) -> Manifest {
    let mut m = Manifest::new();
    let role = match &run.distill {
        Some(_) => "student+kd",
        None => "trained",
    };
    m.set("lineage.role", role)
        .set("lineage.data_sha256", data.fingerprint());
    let cfg: BTreeMap<String, String> = run
        .to_manifest()
        .entries()
        .iter()
        .filter(|(k, _)| !k.starts_with("plan."))
        .map(|(k, v)| (format!("lineage.{k}"), v.clone()))
        .collect();
    m.extend(&cfg);
    m
}
