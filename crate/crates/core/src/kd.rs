//! Distillation objective and the supervised segmentation loss.
//!
//! With temperature `tau`, `p_T = softmax(z_T / tau)` and `p_S = softmax(z_S / tau)`:
//!
//! ```text
//! L_KD    = tau^2 / |Omega| * sum_u sum_c p_T log(p_T / p_S)
//! L_total = L_seg + lambda * L_KD
//! ```
//!
//! `d L_KD / d z_S = tau * (p_S - p_T) / |Omega|`: one factor of `tau` from
//! the loss scale cancels against the `1 / tau` inside the softmax. The
//! teacher side is a constant.
//!
//! `L_seg` is soft Dice (mean over classes, on `tau = 1` probabilities) plus
//! the mean voxel cross-entropy.

use crate::error::{Error, Result};
use crate::ops::log_softmax_channels;
use crate::tensor::Tensor;
use crate::volume::LabelMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    pub temperature: f32,
    pub kd_weight: f32,
    /// Added to the Dice numerator and denominator.
    pub dice_smooth: f32,
    /// Average the Dice term over all classes, background included.
    pub dice_include_background: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 2.0,
            kd_weight: 1.0,
            dice_smooth: 1.0,
            dice_include_background: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.kd_weight >= 0.0) || !self.kd_weight.is_finite() {
            return Err(Error::invalid(format!(
                "kd weight must be non-negative, got {}",
                self.kd_weight
            )));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::invalid(format!(
                "dice smoothing must be positive, got {}",
                self.dice_smooth
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub seg_loss: f64,
    pub kd_loss: f64,
    pub total: f64,
    pub grad_logits: Tensor,
}

fn check_logits(z: &Tensor) -> Result<usize> {
    let [c, ..] = z.dims4()?;
    if c < 2 {
        return Err(Error::shape(format!("need at least 2 classes, got {c}")));
    }
    Ok(c)
}

/// Distillation loss and its gradient with respect to the student logits.
pub fn kd_loss(student: &Tensor, teacher: &Tensor, cfg: &DistillConfig) -> Result<(f64, Tensor)> {
    check_logits(student)?;
    if student.shape() != teacher.shape() {
        return Err(Error::shape(format!(
            "student logits {:?} and teacher logits {:?} differ",
            student.shape(),
            teacher.shape()
        )));
    }
    cfg.validate()?;
    let tau = cfg.temperature;
    let log_s = log_softmax_channels(student, tau)?;
    let log_t = log_softmax_channels(teacher, tau)?;
    let n = student.spatial_len() as f64;
    let tau = tau as f64;
    let mut kl = 0f64;
    let mut grad = Vec::with_capacity(log_s.len());
    for (&ls, &lt) in log_s.iter().zip(&log_t) {
        let pt = lt.exp();
        if pt > 0.0 {
            kl += pt * (lt - ls);
        }
        grad.push((tau * (ls.exp() - pt) / n) as f32);
    }
    Ok((
        tau * tau * kl / n,
        Tensor::new(student.shape().to_vec(), grad)?,
    ))
}

/// Soft Dice + cross-entropy against integer labels.
pub fn seg_loss(student: &Tensor, labels: &LabelMap, cfg: &DistillConfig) -> Result<(f64, Tensor)> {
    let c = check_logits(student)?;
    let [_, d, h, w] = student.dims4()?;
    if labels.dims() != [d, h, w] {
        return Err(Error::shape(format!(
            "labels {:?} do not match logits spatial shape {:?}",
            labels.dims(),
            [d, h, w]
        )));
    }
    labels.check_classes(c)?;
    if !(cfg.dice_smooth > 0.0) {
        return Err(Error::invalid("dice smoothing must be positive"));
    }
    let n = student.spatial_len();
    let nf = n as f64;
    let logp = log_softmax_channels(student, 1.0)?;
    let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let y = labels.labels();

    let ce = -(0..n).map(|v| logp[y[v] as usize * n + v]).sum::<f64>() / nf;

    let first = if cfg.dice_include_background { 0 } else { 1 };
    let classes = c - first;
    let eps = cfg.dice_smooth as f64;
    let mut dice_loss = 0f64;
    // d dice_loss / d p
    let mut gp = vec![0f64; c * n];
    for k in first..c {
        let pk = &p[k * n..(k + 1) * n];
        let mut inter = 0f64;
        let mut sum_p = 0f64;
        let mut sum_y = 0f64;
        for v in 0..n {
            sum_p += pk[v];
            if y[v] as usize == k {
                inter += pk[v];
                sum_y += 1.0;
            }
        }
        let denom = sum_p + sum_y + eps;
        let num = 2.0 * inter + eps;
        dice_loss += 1.0 - num / denom;
        for v in 0..n {
            let yk = if y[v] as usize == k { 1.0 } else { 0.0 };
            gp[k * n + v] = -(2.0 * yk * denom - num) / (denom * denom) / classes as f64;
        }
    }
    dice_loss /= classes as f64;

    let mut grad = vec![0f32; c * n];
    for v in 0..n {
        let dot: f64 = (0..c).map(|k| p[k * n + v] * gp[k * n + v]).sum();
        for k in 0..c {
            let pk = p[k * n + v];
            let onehot = if y[v] as usize == k { 1.0 } else { 0.0 };
            let g_dice = pk * (gp[k * n + v] - dot);
            let g_ce = (pk - onehot) / nf;
            grad[k * n + v] = (g_dice + g_ce) as f32;
        }
    }
    Ok((dice_loss + ce, Tensor::new(student.shape().to_vec(), grad)?))
}

/// `L_seg + lambda * L_KD`; without a teacher the KD term is absent (zero).
pub fn total_loss(
    student: &Tensor,
    teacher: Option<&Tensor>,
    labels: &LabelMap,
    cfg: &DistillConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let (seg, mut grad) = seg_loss(student, labels, cfg)?;
    let (kd, total) = match teacher {
        Some(t) => {
            let (kd, kd_grad) = kd_loss(student, t, cfg)?;
            // skipped at zero weight so the gradient is bit-identical to no KD
            if cfg.kd_weight != 0.0 {
                grad.add_scaled(&kd_grad, cfg.kd_weight)?;
            }
            (kd, seg + cfg.kd_weight as f64 * kd)
        }
        None => (0.0, seg),
    };
    Ok(LossBreakdown {
        seg_loss: seg,
        kd_loss: kd,
        total,
        grad_logits: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(c: usize, vals: &[f32]) -> Tensor {
        Tensor::new(vec![c, 1, 1, vals.len() / c], vals.to_vec()).unwrap()
    }

    #[test]
    fn identical_logits_give_zero_kd() {
        let z = logits(3, &[1.0, -2.0, 0.5, 3.0, 0.0, 0.25]);
        let (loss, grad) = kd_loss(&z, &z, &DistillConfig::default()).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.data().iter().all(|&g| g.abs() < 1e-9));
    }

    #[test]
    fn uniform_two_class_cross_entropy_is_ln2() {
        let z = Tensor::zeros(&[2, 2, 2, 2]);
        let labels = LabelMap::new([2, 2, 2], vec![0, 1, 0, 1, 1, 1, 0, 0], [1.0; 3]).unwrap();
        let cfg = DistillConfig::default();
        let (seg, _) = seg_loss(&z, &labels, &cfg).unwrap();
        // With both classes at 4/8 voxels and p = 1/2: Dice = (4 + 1) / (4 + 4 + 1).
        let dice_term = 1.0 - 5.0 / 9.0;
        assert!((seg - dice_term - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn saturated_logits_give_tiny_loss() {
        let labels = LabelMap::new([1, 2, 2], vec![0, 1, 2, 1], [1.0; 3]).unwrap();
        let mut z = Tensor::zeros(&[3, 1, 2, 2]);
        for (v, &l) in labels.labels().iter().enumerate() {
            z.data_mut()[l as usize * 4 + v] = 20.0;
        }
        let (seg, _) = seg_loss(&z, &labels, &DistillConfig::default()).unwrap();
        assert!(seg < 0.01, "{seg}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let z = Tensor::zeros(&[2, 1, 1, 2]);
        let labels = LabelMap::new([1, 1, 2], vec![0, 2], [1.0; 3]).unwrap();
        let err = seg_loss(&z, &labels, &DistillConfig::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("voxel 1"), "{err}");
        let cfg = DistillConfig {
            temperature: 0.0,
            ..DistillConfig::default()
        };
        assert!(kd_loss(&z, &z, &cfg).is_err());
        assert!(kd_loss(&z, &Tensor::zeros(&[2, 1, 2, 1]), &DistillConfig::default()).is_err());
    }

    #[test]
    fn zero_weight_total_is_seg_loss() {
        let s = logits(2, &[0.3, -1.0, 2.0, 0.1]);
        let t = logits(2, &[1.0, 1.0, -1.0, 0.0]);
        let labels = LabelMap::new([1, 1, 2], vec![1, 0], [1.0; 3]).unwrap();
        let cfg = DistillConfig {
            kd_weight: 0.0,
            ..DistillConfig::default()
        };
        let (seg, seg_grad) = seg_loss(&s, &labels, &cfg).unwrap();
        let b = total_loss(&s, Some(&t), &labels, &cfg).unwrap();
        assert_eq!(b.total, seg);
        assert_eq!(b.grad_logits, seg_grad);
    }
}
