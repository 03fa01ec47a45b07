//! Training objectives over pixel-resolution logits.
//!
//! Two families: the exclusive softmax cross-entropy baseline, and the
//! non-mutually-exclusive sigmoid losses (plain binary cross-entropy, its
//! focal variation, dice, and the weighted focal+dice combination) that score
//! every class independently. All sums run over valid pixels only; pixels
//! whose label equals the ignore index contribute to neither numerators,
//! denominators, nor the pixel-count normalizer.

use crate::error::{Error, Result};
use crate::graph::Tensor;
use crate::value::Value;

/// Which objective the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Softmax + cross-entropy (mutually exclusive classes).
    Exclusive,
    /// Sigmoid + plain binary cross-entropy per class.
    NelPlain,
    /// Sigmoid + weighted focal and dice combination.
    NelPlus,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "el" => Ok(LossMode::Exclusive),
            "nel-plain" => Ok(LossMode::NelPlain),
            "nel-plus" => Ok(LossMode::NelPlus),
            other => Err(Error::Config(format!("unknown loss mode `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossMode::Exclusive => "el",
            LossMode::NelPlain => "nel-plain",
            LossMode::NelPlus => "nel-plus",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Focal exponent.
    pub gamma: f64,
    /// Focal weight in the combined loss.
    pub alpha: f64,
    /// Dice weight in the combined loss.
    pub beta: f64,
    pub ignore_index: u8,
    /// Dice smoothing term, added to numerator and denominator.
    pub eps_dice: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::NelPlus,
            gamma: 2.0,
            alpha: 1.0,
            beta: 1.0,
            ignore_index: 255,
            eps_dice: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config(format!(
                "alpha and beta must be >= 0, got {} / {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// One-hot ground-truth planes restricted to the active classes, plus the
/// valid-pixel mask. Ignore pixels are all-zero across planes.
#[derive(Debug, Clone)]
pub struct TargetPlanes {
    /// `[classes, pixels]`, entries in {0, 1}.
    pub planes: Value,
    /// `[1, pixels]`, 1.0 where the label is valid.
    pub valid: Value,
    pub n_valid: usize,
}

/// Build target planes from a label map. Every label must be an active class
/// id or the ignore index.
pub fn build_targets(
    labels: &[u8],
    active_classes: &[usize],
    ignore_index: u8,
) -> Result<TargetPlanes> {
    let hw = labels.len();
    let c = active_classes.len();
    let mut row_of = vec![usize::MAX; 256];
    for (row, &cls) in active_classes.iter().enumerate() {
        row_of[cls] = row;
    }
    let mut planes = vec![0.0; c * hw];
    let mut valid = vec![0.0; hw];
    let mut n_valid = 0;
    for (i, &l) in labels.iter().enumerate() {
        if l == ignore_index {
            continue;
        }
        let row = row_of[l as usize];
        if row == usize::MAX {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                classes: c,
                ignore: ignore_index as usize,
            });
        }
        planes[row * hw + i] = 1.0;
        valid[i] = 1.0;
        n_valid += 1;
    }
    Ok(TargetPlanes {
        planes: Value::new(vec![c, hw], planes)?,
        valid: Value::new(vec![1, hw], valid)?,
        n_valid,
    })
}

fn check_valid(targets: &TargetPlanes) -> Result<()> {
    if targets.n_valid == 0 {
        return Err(Error::EmptyValidSet);
    }
    Ok(())
}

fn constant_like(t: &Tensor, v: &Value) -> Tensor {
    t.graph().constant(v.clone())
}

/// Mean over valid pixels of −log softmax(logits)[true class].
pub fn loss_el(logits: &Tensor, targets: &TargetPlanes) -> Result<Tensor> {
    check_valid(targets)?;
    let planes = constant_like(logits, &targets.planes);
    let picked = logits.softmax(0)?.log().mul(&planes)?;
    Ok(picked.sum_all().scale(-1.0 / targets.n_valid as f64))
}

/// Plain binary cross-entropy on per-class probabilities, averaged over valid
/// pixels and classes.
pub fn loss_bce(probs: &Tensor, targets: &TargetPlanes) -> Result<Tensor> {
    check_valid(targets)?;
    let c = targets.planes.shape()[0];
    let planes = constant_like(probs, &targets.planes);
    let valid = constant_like(probs, &targets.valid);
    let pos = planes.mul(&probs.log())?;
    let neg = planes
        .neg()
        .add_scalar(1.0)
        .mul(&probs.neg().add_scalar(1.0).log())?;
    let masked = pos.add(&neg)?.mul(&valid)?;
    Ok(masked
        .sum_all()
        .scale(-1.0 / (targets.n_valid as f64 * c as f64)))
}

/// Focal variation of binary cross-entropy: easy pixels are down-weighted by
/// `(1−y)^γ` on the positive term and `y^γ` on the negative term. `γ = 0`
/// reduces exactly to [`loss_bce`].
pub fn loss_focal(probs: &Tensor, targets: &TargetPlanes, gamma: f64) -> Result<Tensor> {
    check_valid(targets)?;
    let c = targets.planes.shape()[0];
    let planes = constant_like(probs, &targets.planes);
    let valid = constant_like(probs, &targets.valid);
    let one_minus = probs.neg().add_scalar(1.0);
    let pos = one_minus.powf(gamma).mul(&planes)?.mul(&probs.log())?;
    let neg = probs
        .powf(gamma)
        .mul(&planes.neg().add_scalar(1.0))?
        .mul(&one_minus.log())?;
    let masked = pos.add(&neg)?.mul(&valid)?;
    Ok(masked
        .sum_all()
        .scale(-1.0 / (targets.n_valid as f64 * c as f64)))
}

/// Dice loss `1 − (2Σyŷ + ε)/(Σy² + Σŷ² + ε)` per class over valid pixels,
/// averaged over classes. Always in [0, 1].
pub fn loss_dice(probs: &Tensor, targets: &TargetPlanes, eps: f64) -> Result<Tensor> {
    check_valid(targets)?;
    let planes = constant_like(probs, &targets.planes);
    let valid = constant_like(probs, &targets.valid);
    let masked = probs.mul(&valid)?;
    // ŷ is already zero on invalid pixels, so y⊙ŷ needs no extra mask.
    let num = probs.mul(&planes)?.sum_axis(1)?.scale(2.0).add_scalar(eps);
    let den = masked
        .mul(&masked)?
        .sum_axis(1)?
        .add(&planes.mul(&planes)?.sum_axis(1)?)?
        .add_scalar(eps);
    Ok(num.div(&den)?.neg().add_scalar(1.0).mean_all())
}

/// `α·focal(sigmoid(logits)) + β·dice(sigmoid(logits))`.
pub fn loss_combined(logits: &Tensor, targets: &TargetPlanes, cfg: &LossConfig) -> Result<Tensor> {
    let probs = logits.sigmoid();
    let focal = loss_focal(&probs, targets, cfg.gamma)?.scale(cfg.alpha);
    let dice = loss_dice(&probs, targets, cfg.eps_dice)?.scale(cfg.beta);
    focal.add(&dice)
}

/// Dispatch on the configured mode. `logits` are raw decoder scores.
pub fn loss_for_mode(logits: &Tensor, targets: &TargetPlanes, cfg: &LossConfig) -> Result<Tensor> {
    match cfg.mode {
        LossMode::Exclusive => loss_el(logits, targets),
        LossMode::NelPlain => loss_bce(&logits.sigmoid(), targets),
        LossMode::NelPlus => loss_combined(logits, targets, cfg),
    }
}
