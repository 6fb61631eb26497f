//! Binary change losses on the single-channel probability map: cross
//! entropy, focal, soft Dice and their weighted sums.
//!
//! Two implementations share one definition. The `f64` slice functions are
//! the reference (with analytic gradients); [`loss_from_logits`] is the
//! differentiable tensor version used in training. Probabilities are clamped
//! to `[1e-7, 1 - 1e-7]` before any logarithm. Dice works on the unclamped
//! probabilities since it takes no logarithm.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "focal")]
    Focal,
    #[serde(rename = "dice")]
    Dice,
    #[serde(rename = "focal+dice")]
    FocalDice,
    #[serde(rename = "ce+dice")]
    CeDice,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Ce,
        LossKind::Focal,
        LossKind::Dice,
        LossKind::FocalDice,
        LossKind::CeDice,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Focal => "focal",
            LossKind::Dice => "dice",
            LossKind::FocalDice => "focal+dice",
            LossKind::CeDice => "ce+dice",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config("loss.kind", format!("unknown loss `{s}`")))
    }
}

fn default_gamma() -> f64 {
    2.0
}
fn default_smooth() -> f64 {
    1.0
}
fn default_weights() -> (f64, f64) {
    (1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default = "default_gamma")]
    pub focal_gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal_alpha: Option<f64>,
    #[serde(default = "default_smooth")]
    pub dice_smooth: f64,
    /// Weights of the first and second term of a combined loss.
    #[serde(default = "default_weights")]
    pub combo_weights: (f64, f64),
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(LossKind::Ce)
    }
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            focal_gamma: default_gamma(),
            focal_alpha: None,
            dice_smooth: default_smooth(),
            combo_weights: default_weights(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.combo_weights;
        if !(a >= 0.0 && b >= 0.0) || (a == 0.0 && b == 0.0) {
            return Err(Error::config(
                "loss.combo_weights",
                "weights must be non-negative and not both zero",
            ));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::config("loss.dice_smooth", "must be positive"));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::config("loss.focal_gamma", "must be non-negative"));
        }
        if let Some(alpha) = self.focal_alpha {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::config("loss.focal_alpha", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

fn check(prob: &[f64], gt: &[u8]) -> Result<()> {
    if prob.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            prob.len(),
            gt.len()
        )));
    }
    if prob.is_empty() {
        return Err(Error::Shape("empty prediction".into()));
    }
    Ok(())
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Mean binary cross entropy.
pub fn ce_loss(prob: &[f64], gt: &[u8]) -> Result<f64> {
    check(prob, gt)?;
    let s: f64 = prob
        .iter()
        .zip(gt)
        .map(|(&p, &y)| {
            let p = clamp(p);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(s / prob.len() as f64)
}

pub fn ce_grad(prob: &[f64], gt: &[u8]) -> Result<Vec<f64>> {
    check(prob, gt)?;
    let n = prob.len() as f64;
    Ok(prob
        .iter()
        .zip(gt)
        .map(|(&p, &y)| {
            let p = clamp(p);
            if y == 1 {
                -1.0 / (p * n)
            } else {
                1.0 / ((1.0 - p) * n)
            }
        })
        .collect())
}

/// Soft Dice loss `1 - (2 Σpy + s) / (Σp + Σy + s)` over all pixels.
pub fn dice_loss(prob: &[f64], gt: &[u8], smooth: f64) -> Result<f64> {
    check(prob, gt)?;
    let (inter, total) = dice_sums(prob, gt);
    Ok(1.0 - (2.0 * inter + smooth) / (total + smooth))
}

fn dice_sums(prob: &[f64], gt: &[u8]) -> (f64, f64) {
    prob.iter().zip(gt).fold((0.0, 0.0), |(i, t), (&p, &y)| {
        let y = f64::from(y);
        (i + p * y, t + p + y)
    })
}

pub fn dice_grad(prob: &[f64], gt: &[u8], smooth: f64) -> Result<Vec<f64>> {
    check(prob, gt)?;
    let (inter, total) = dice_sums(prob, gt);
    let num = 2.0 * inter + smooth;
    let den = total + smooth;
    Ok(gt
        .iter()
        .map(|&y| -(2.0 * f64::from(y) * den - num) / (den * den))
        .collect())
}

fn focal_weight(y: u8, alpha: Option<f64>) -> f64 {
    match alpha {
        Some(a) if y == 1 => a,
        Some(a) => 1.0 - a,
        None => 1.0,
    }
}

/// Mean focal loss `-w_t (1 - p_t)^γ ln p_t`.
pub fn focal_loss(prob: &[f64], gt: &[u8], gamma: f64, alpha: Option<f64>) -> Result<f64> {
    check(prob, gt)?;
    let s: f64 = prob
        .iter()
        .zip(gt)
        .map(|(&p, &y)| {
            let p = clamp(p);
            let pt = if y == 1 { p } else { 1.0 - p };
            -focal_weight(y, alpha) * (1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum();
    Ok(s / prob.len() as f64)
}

pub fn focal_grad(prob: &[f64], gt: &[u8], gamma: f64, alpha: Option<f64>) -> Result<Vec<f64>> {
    check(prob, gt)?;
    let n = prob.len() as f64;
    Ok(prob
        .iter()
        .zip(gt)
        .map(|(&p, &y)| {
            let p = clamp(p);
            let (pt, sign) = if y == 1 { (p, 1.0) } else { (1.0 - p, -1.0) };
            let q = 1.0 - pt;
            let mut d = q.powf(gamma) / pt;
            if gamma != 0.0 {
                d -= gamma * q.powf(gamma - 1.0) * pt.ln();
            }
            -focal_weight(y, alpha) * d * sign / n
        })
        .collect())
}

/// Loss selected by `cfg`; combined kinds are `w_a · first + w_b · second`.
pub fn combined_loss(cfg: &LossConfig, prob: &[f64], gt: &[u8]) -> Result<f64> {
    cfg.validate()?;
    let (wa, wb) = cfg.combo_weights;
    let ce = || ce_loss(prob, gt);
    let dice = || dice_loss(prob, gt, cfg.dice_smooth);
    let focal = || focal_loss(prob, gt, cfg.focal_gamma, cfg.focal_alpha);
    match cfg.kind {
        LossKind::Ce => ce(),
        LossKind::Dice => dice(),
        LossKind::Focal => focal(),
        LossKind::FocalDice => Ok(wa * focal()? + wb * dice()?),
        LossKind::CeDice => Ok(wa * ce()? + wb * dice()?),
    }
}

pub fn combined_grad(cfg: &LossConfig, prob: &[f64], gt: &[u8]) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (wa, wb) = cfg.combo_weights;
    let ce = || ce_grad(prob, gt);
    let dice = || dice_grad(prob, gt, cfg.dice_smooth);
    let focal = || focal_grad(prob, gt, cfg.focal_gamma, cfg.focal_alpha);
    let mix = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| wa * x + wb * y).collect();
    Ok(match cfg.kind {
        LossKind::Ce => ce()?,
        LossKind::Dice => dice()?,
        LossKind::Focal => focal()?,
        LossKind::FocalDice => mix(focal()?, dice()?),
        LossKind::CeDice => mix(ce()?, dice()?),
    })
}

/// `softplus(x) = ln(1 + e^x)` without overflow.
fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((pos + tail)?)
}

/// Differentiable loss of a logit batch against a `{0,1}` target batch of
/// the same shape. Pixels of all images are pooled, matching the reference
/// functions applied to the flattened batch.
pub fn loss_from_logits(cfg: &LossConfig, logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    if logits.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "logits {:?} and target {:?} differ",
            logits.dims(),
            target.dims()
        )));
    }
    let z = logits.to_dtype(DType::F32)?.flatten_all()?;
    let y = target.to_dtype(DType::F32)?.flatten_all()?;
    let one_minus_y = y.affine(-1.0, 1.0)?;
    // clamping p to [eps, 1-eps] is clamping z to ±logit(1-eps)
    let zmax = ((1.0 - PROB_EPS) / PROB_EPS).ln();
    let zc = z.clamp(-zmax, zmax)?;
    let log_p = softplus(&zc.neg()?)?.neg()?;
    let log_1mp = softplus(&zc)?.neg()?;
    let ce = || -> Result<Tensor> {
        let l = ((&y * &log_p)? + (&one_minus_y * &log_1mp)?)?;
        Ok(l.mean_all()?.neg()?)
    };
    let focal = || -> Result<Tensor> {
        let log_pt = ((&y * &log_p)? + (&one_minus_y * &log_1mp)?)?;
        let pt = log_pt.exp()?;
        let g = cfg.focal_gamma;
        let modulating = if g == 0.0 {
            pt.ones_like()?
        } else {
            pt.affine(-1.0, 1.0)?.relu()?.powf(g)?
        };
        let mut l = (modulating * &log_pt)?;
        if let Some(a) = cfg.focal_alpha {
            let w = y.affine(2.0 * a - 1.0, 1.0 - a)?;
            l = (l * w)?;
        }
        Ok(l.mean_all()?.neg()?)
    };
    let dice = || -> Result<Tensor> {
        let p = candle_nn::ops::sigmoid(&z)?;
        let s = cfg.dice_smooth;
        let num = (&p * &y)?.sum_all()?.affine(2.0, s)?;
        let den = (p.sum_all()? + y.sum_all()?)?.affine(1.0, s)?;
        Ok((num / den)?.affine(-1.0, 1.0)?)
    };
    let (wa, wb) = cfg.combo_weights;
    Ok(match cfg.kind {
        LossKind::Ce => ce()?,
        LossKind::Focal => focal()?,
        LossKind::Dice => dice()?,
        LossKind::FocalDice => (focal()?.affine(wa, 0.0)? + dice()?.affine(wb, 0.0)?)?,
        LossKind::CeDice => (ce()?.affine(wa, 0.0)? + dice()?.affine(wb, 0.0)?)?,
    })
}
