//! Game and rotation losses, and the multi-task combination schedules.

use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::config::{DualTaskMode, ExperimentConfig};
use crate::error::{Error, Result};

/// Floor applied to the label probability inside the cross-entropy.
pub const ROTATION_EPS: f64 = 1e-12;

static ROTATION_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// How many times [`rotation_loss`] had to clamp a probability below
/// [`ROTATION_EPS`] since process start.
pub fn rotation_clamp_count() -> u64 {
    ROTATION_CLAMPS.load(Ordering::Relaxed)
}

/// `Σ_{k ≠ target} max(0, margin − s_target + s_k)` for one game.
pub fn hinge_game_loss(scores: &[f64], target_index: usize, margin: f64) -> Result<f64> {
    let target = *scores.get(target_index).ok_or_else(|| {
        Error::Domain(format!("target {target_index} outside {} candidates", scores.len()))
    })?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    Ok(scores
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != target_index)
        .map(|(_, &s)| (margin - target + s).max(0.0))
        .sum())
}

/// Mean over games of the per-game hinge loss.
///
/// `scores` is `[games, candidates]`; game `i` has target `targets[i]`. The
/// subgradient at the kink is 0.
pub fn hinge_loss(scores: &Tensor, targets: &[usize], margin: f64) -> Result<Tensor> {
    let (games, candidates) = scores.dims2()?;
    if targets.len() != games {
        return Err(Error::Shape(format!("{games} games but {} targets", targets.len())));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= candidates) {
        return Err(Error::Domain(format!("target {t} outside {candidates} candidates")));
    }
    let device = scores.device();
    let idx = Tensor::from_vec(targets.iter().map(|&t| t as u32).collect::<Vec<_>>(), (games, 1), device)?;
    let target_scores = scores.gather(&idx, 1)?;
    let margins = ((scores.broadcast_sub(&target_scores)? + margin)?).contiguous()?;
    let not_target: Vec<f32> = (0..games * candidates)
        .map(|i| (i % candidates != targets[i / candidates]) as u8 as f32)
        .collect();
    let not_target = Tensor::from_vec(not_target, (games, candidates), device)?.to_dtype(scores.dtype())?;
    let active = margins.gt(0.0)?.to_dtype(scores.dtype())?.mul(&not_target)?;
    let per_game = (margins * active)?.sum(D::Minus1)?;
    Ok(per_game.mean_all()?)
}

/// `−log p[label]`, with `p[label]` floored at [`ROTATION_EPS`].
pub fn rotation_loss(probabilities: &[f64], label: usize) -> Result<f64> {
    let p = *probabilities
        .get(label)
        .ok_or_else(|| Error::Domain(format!("rotation label {label} outside {} classes", probabilities.len())))?;
    let sum: f64 = probabilities.iter().sum();
    if probabilities.iter().any(|&q| !(0.0..=1.0).contains(&q)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Domain("rotation probabilities are not a distribution".into()));
    }
    if p < ROTATION_EPS {
        ROTATION_CLAMPS.fetch_add(1, Ordering::Relaxed);
        log::warn!("rotation probability {p:e} clamped to {ROTATION_EPS:e}");
    }
    Ok(-p.max(ROTATION_EPS).ln())
}

/// Mean cross-entropy of `[batch, 4]` logits against `labels`.
pub fn rotation_loss_from_logits(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let (batch, classes) = logits.dims2()?;
    if labels.len() != batch {
        return Err(Error::Shape(format!("{batch} predictions but {} labels", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Domain(format!("rotation label {l} outside {classes} classes")));
    }
    let idx = Tensor::from_vec(labels.iter().map(|&l| l as u32).collect::<Vec<_>>(), (batch, 1), logits.device())?;
    let log_p = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok(log_p.gather(&idx, 1)?.neg()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePhase {
    GameOnly,
    /// `w·rotation + game`, every step.
    Weighted,
    /// `w·rotation` alone (even steps of the alternating schedule).
    RotationOnly,
    /// `w·rotation + game` (odd steps of the alternating schedule).
    RotationAndGame,
}

/// Which loss terms are optimized at a given step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSchedule {
    pub mode: DualTaskMode,
    pub rotation_weight: f64,
    pub alternate: bool,
}

impl LossSchedule {
    pub fn new(mode: DualTaskMode) -> Self {
        match mode {
            DualTaskMode::None => LossSchedule {
                mode,
                rotation_weight: 0.0,
                alternate: false,
            },
            DualTaskMode::SenderPredicts => LossSchedule {
                mode,
                rotation_weight: 0.5,
                alternate: false,
            },
            DualTaskMode::ReceiverPredicts => LossSchedule {
                mode,
                rotation_weight: 5.0,
                alternate: true,
            },
        }
    }

    pub fn from_config(config: &ExperimentConfig) -> Self {
        LossSchedule {
            mode: config.dual_task.mode,
            rotation_weight: config.rotation_weight(),
            alternate: config.alternate(),
        }
    }

    /// `(game weight, rotation weight, phase)` for optimizer step `step`
    /// (counted from 0 at the start of training).
    pub fn weights(&self, step: u64) -> (f64, f64, SchedulePhase) {
        if !self.mode.is_dual() {
            return (1.0, 0.0, SchedulePhase::GameOnly);
        }
        if !self.alternate {
            return (1.0, self.rotation_weight, SchedulePhase::Weighted);
        }
        if step % 2 == 0 {
            (0.0, self.rotation_weight, SchedulePhase::RotationOnly)
        } else {
            (1.0, self.rotation_weight, SchedulePhase::RotationAndGame)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub game_loss: f64,
    pub rotation_loss: Option<f64>,
    pub combined: f64,
    pub schedule_phase: SchedulePhase,
}

fn check_terms(schedule: &LossSchedule, has_rotation: bool) -> Result<()> {
    match (schedule.mode.is_dual(), has_rotation) {
        (false, true) => Err(Error::Config("rotation loss supplied but dual_task.mode = none".into())),
        (true, false) => Err(Error::Config("dual-task schedule needs a rotation loss".into())),
        _ => Ok(()),
    }
}

pub fn combine_losses(game_loss: f64, rotation_loss: Option<f64>, schedule: &LossSchedule, step: u64) -> Result<LossBundle> {
    check_terms(schedule, rotation_loss.is_some())?;
    let (wg, wr, phase) = schedule.weights(step);
    let combined = match (phase, rotation_loss) {
        (SchedulePhase::GameOnly, _) => game_loss,
        (SchedulePhase::RotationOnly, Some(r)) => wr * r,
        (_, Some(r)) => wr * r + wg * game_loss,
        (_, None) => unreachable!("checked above"),
    };
    Ok(LossBundle {
        game_loss,
        rotation_loss,
        combined,
        schedule_phase: phase,
    })
}

/// Tensor version of [`combine_losses`] used for backpropagation.
pub fn combine_loss_tensors(game: &Tensor, rotation: Option<&Tensor>, schedule: &LossSchedule, step: u64) -> Result<Tensor> {
    check_terms(schedule, rotation.is_some())?;
    let (wg, wr, phase) = schedule.weights(step);
    Ok(match (phase, rotation) {
        (SchedulePhase::GameOnly, _) => game.clone(),
        (SchedulePhase::RotationOnly, Some(r)) => (r * wr)?,
        (_, Some(r)) => ((r * wr)? + (game * wg)?)?,
        (_, None) => unreachable!("checked above"),
    })
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
