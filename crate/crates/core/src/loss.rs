//! Dice and focal losses on abnormal-channel probability maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScoreMap;

/// Probabilities are clamped to `[FOCAL_CLAMP, 1 - FOCAL_CLAMP]` before
/// taking logarithms.
pub const FOCAL_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub dice_epsilon: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_epsilon: 1e-6,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dice_epsilon > 0.0) {
            return Err(Error::Config("dice_epsilon must be > 0".into()));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config("focal_gamma must be >= 0".into()));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return Err(Error::Config("focal_alpha must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

fn check_lengths(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty prediction".into()));
    }
    Ok(())
}

/// `1 - 2 Σ p g / (Σ p + Σ g + ε)`
pub fn dice_loss(pred: &[f64], gt: &[f64], epsilon: f64) -> Result<f64> {
    check_lengths(pred, gt)?;
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let denom = pred.iter().sum::<f64>() + gt.iter().sum::<f64>() + epsilon;
    Ok(1.0 - 2.0 * inter / denom)
}

/// Balanced focal cross-entropy, averaged over pixels:
/// `-[α (1-p)^γ g log p + (1-α) p^γ (1-g) log(1-p)]`.
pub fn focal_loss(pred: &[f64], gt: &[f64], alpha: f64, gamma: f64) -> Result<f64> {
    check_lengths(pred, gt)?;
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let p = p.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
            let mut l = 0.0;
            if g > 0.0 {
                l -= alpha * (1.0 - p).powf(gamma) * g * p.ln();
            }
            if g < 1.0 {
                l -= (1.0 - alpha) * p.powf(gamma) * (1.0 - g) * (1.0 - p).ln();
            }
            l
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Sum over layers of `focal + dice` against one ground-truth map.
pub fn total_loss(per_layer_maps: &[ScoreMap], gt_map: &[f64], config: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    for map in per_layer_maps {
        if map.values.len() != gt_map.len() {
            return Err(Error::Shape(format!(
                "score map {}x{} does not match ground truth of {} pixels",
                map.height,
                map.width,
                gt_map.len()
            )));
        }
        total += focal_loss(&map.values, gt_map, config.focal_alpha, config.focal_gamma)?;
        total += dice_loss(&map.values, gt_map, config.dice_epsilon)?;
    }
    Ok(total)
}
