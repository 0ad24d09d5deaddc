//! Segmentation losses, deep-supervision weighting and overlap metrics.
//!
//! Reductions are accumulated in `f64` whatever the field precision.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Field, Mask, Real};

pub const DICE_SMOOTH: f64 = 1e-5;
pub const BCE_EPS: f64 = 1e-7;
pub const HIT_THRESHOLD: f64 = 0.05;

/// Per-scale weights, finest scale first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambdas: Vec<f64>,
    pub normalize: bool,
}

impl LossWeights {
    pub fn new(lambdas: Vec<f64>, normalize: bool) -> Result<Self> {
        let w = LossWeights { lambdas, normalize };
        w.validate()?;
        Ok(w)
    }

    /// `[1, 1/2, 1/4, ...]` of length `n`, normalized.
    pub fn halving(n: usize) -> Self {
        LossWeights {
            lambdas: (0..n).map(|i| 0.5f64.powi(i as i32)).collect(),
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "loss weights must be finite and non-negative: {:?}",
                self.lambdas
            )));
        }
        if !self.lambdas.iter().any(|&l| l > 0.0) {
            return Err(Error::InvalidInput("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    /// The weights actually applied.
    pub fn effective(&self) -> Vec<f64> {
        if self.normalize {
            let sum: f64 = self.lambdas.iter().sum();
            self.lambdas.iter().map(|l| l / sum).collect()
        } else {
            self.lambdas.clone()
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(shape_err!("{a} predictions against {b} target voxels"));
    }
    Ok(())
}

struct DiceSums {
    inter: f64,
    sum_p: f64,
    sum_y: f64,
}

fn dice_sums(probs: &[f64], target: &Mask) -> DiceSums {
    let mut s = DiceSums {
        inter: 0.0,
        sum_p: 0.0,
        sum_y: 0.0,
    };
    for (&p, &y) in probs.iter().zip(&target.data) {
        let y = y as f64;
        s.inter += p * y;
        s.sum_p += p;
        s.sum_y += y;
    }
    s
}

/// `1 - (2 sum(p y) + smooth) / (sum(p) + sum(y) + smooth)`.
pub fn soft_dice_loss(probs: &[f64], target: &Mask, smooth: f64) -> Result<f64> {
    check_len(probs.len(), target.data.len())?;
    let s = dice_sums(probs, target);
    Ok(1.0 - (2.0 * s.inter + smooth) / (s.sum_p + s.sum_y + smooth))
}

/// Gradient of [`soft_dice_loss`] with respect to each probability.
pub fn soft_dice_grad(probs: &[f64], target: &Mask, smooth: f64) -> Result<Vec<f64>> {
    check_len(probs.len(), target.data.len())?;
    let s = dice_sums(probs, target);
    let den = s.sum_p + s.sum_y + smooth;
    let num = 2.0 * s.inter + smooth;
    Ok(target
        .data
        .iter()
        .map(|&y| -(2.0 * y as f64 * den - num) / (den * den))
        .collect())
}

/// Mean binary cross-entropy with probabilities clamped to `[eps, 1 - eps]`.
pub fn bce_loss(probs: &[f64], target: &Mask) -> Result<f64> {
    check_len(probs.len(), target.data.len())?;
    if probs.is_empty() {
        return Err(Error::InvalidInput("empty field".into()));
    }
    let sum: f64 = probs
        .iter()
        .zip(&target.data)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if y != 0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

/// Components of the per-scale segmentation loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SegLoss {
    pub dice: f64,
    pub bce: f64,
}

impl SegLoss {
    pub fn total(&self) -> f64 {
        self.dice + self.bce
    }
}

fn probs_of<T: Real>(logits: &[T]) -> Vec<f64> {
    logits.iter().map(|v| sigmoid(v.to_f64_lossy())).collect()
}

/// Dice + BCE on sigmoid probabilities of `logits`.
pub fn seg_loss<T: Real>(logits: &Field<T>, target: &Mask) -> Result<SegLoss> {
    check_dims(logits, target)?;
    let p = probs_of(&logits.data);
    Ok(SegLoss {
        dice: soft_dice_loss(&p, target, DICE_SMOOTH)?,
        bce: bce_loss(&p, target)?,
    })
}

fn check_dims<T: Real>(logits: &Field<T>, target: &Mask) -> Result<()> {
    if logits.channels != 1 || logits.dims != target.dims {
        return Err(shape_err!(
            "logits {}x{:?} against target {:?}",
            logits.channels,
            logits.dims,
            target.dims
        ));
    }
    Ok(())
}

/// [`seg_loss`] plus its gradient with respect to the logits.
pub fn seg_loss_with_grad<T: Real>(logits: &Field<T>, target: &Mask) -> Result<(SegLoss, Vec<f64>)> {
    check_dims(logits, target)?;
    let p = probs_of(&logits.data);
    let loss = SegLoss {
        dice: soft_dice_loss(&p, target, DICE_SMOOTH)?,
        bce: bce_loss(&p, target)?,
    };
    let gd = soft_dice_grad(&p, target, DICE_SMOOTH)?;
    let n = p.len() as f64;
    let grad = p
        .iter()
        .zip(&target.data)
        .zip(gd)
        .map(|((&pv, &y), gdv)| {
            let sig_prime = pv * (1.0 - pv);
            let bce_grad = if pv > BCE_EPS && pv < 1.0 - BCE_EPS {
                (pv - y as f64) / n
            } else {
                0.0
            };
            gdv * sig_prime + bce_grad
        })
        .collect();
    Ok((loss, grad))
}

/// Combines per-scale losses with the given weights.
pub fn combine_scales(per_scale: &[f64], weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    if per_scale.len() != weights.lambdas.len() {
        return Err(shape_err!(
            "{} scales against {} loss weights",
            per_scale.len(),
            weights.lambdas.len()
        ));
    }
    Ok(weights
        .effective()
        .iter()
        .zip(per_scale)
        .map(|(w, l)| w * l)
        .sum())
}

/// `sum_s lambda_s * L_seg(logits_s, target_s)`, finest scale first.
pub fn deep_supervision_loss<T: Real>(
    bundle: &[Field<T>],
    targets: &[Mask],
    weights: &LossWeights,
) -> Result<f64> {
    if bundle.len() != targets.len() {
        return Err(shape_err!("{} predictions against {} targets", bundle.len(), targets.len()));
    }
    let per: Vec<f64> = bundle
        .iter()
        .zip(targets)
        .map(|(l, t)| seg_loss(l, t).map(|s| s.total()))
        .collect::<Result<_>>()?;
    combine_scales(&per, weights)
}

#[derive(Clone, Debug)]
pub struct DeepSupervisionGrad<T> {
    pub total: f64,
    pub per_scale: Vec<SegLoss>,
    /// Gradient of `total` with respect to each scale's logits.
    pub grads: Vec<Field<T>>,
}

/// [`deep_supervision_loss`] plus logit gradients scaled by `grad_scale`.
/// Non-finite values are reported with the scale they came from.
pub fn deep_supervision_with_grad<T: Real>(
    bundle: &[Field<T>],
    targets: &[Mask],
    weights: &LossWeights,
    grad_scale: f64,
) -> Result<DeepSupervisionGrad<T>> {
    if bundle.len() != targets.len() || bundle.len() != weights.lambdas.len() {
        return Err(shape_err!(
            "{} predictions, {} targets, {} loss weights",
            bundle.len(),
            targets.len(),
            weights.lambdas.len()
        ));
    }
    weights.validate()?;
    let eff = weights.effective();
    let mut out = DeepSupervisionGrad {
        total: 0.0,
        per_scale: Vec::with_capacity(bundle.len()),
        grads: Vec::with_capacity(bundle.len()),
    };
    for (scale, ((logits, target), &w)) in bundle.iter().zip(targets).zip(&eff).enumerate() {
        if !logits.all_finite() {
            return Err(Error::NonFinite {
                what: "logits",
                scale: Some(scale),
            });
        }
        let (loss, g) = seg_loss_with_grad(logits, target)?;
        if !loss.total().is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                scale: Some(scale),
            });
        }
        let data: Vec<T> = g.iter().map(|&v| T::from_f64_lossy(v * w * grad_scale)).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "logit gradient",
                scale: Some(scale),
            });
        }
        out.total += w * loss.total();
        out.per_scale.push(loss);
        out.grads.push(Field {
            channels: 1,
            dims: logits.dims,
            data,
        });
    }
    Ok(out)
}

/// `2|P ∩ G| / (|P| + |G|)`; 1 when both are empty.
pub fn dice_metric(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.dims != gt.dims {
        return Err(shape_err!("prediction {:?} against truth {:?}", pred.dims, gt.dims));
    }
    let mut inter = 0usize;
    let mut sp = 0usize;
    let mut sg = 0usize;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = ((p != 0) as usize, (g != 0) as usize);
        inter += p & g;
        sp += p;
        sg += g;
    }
    if sp + sg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sp + sg) as f64)
}

/// Fraction of scores at or above `threshold`.
pub fn hit_rate(dices: &[f64], threshold: f64) -> Result<f64> {
    if dices.is_empty() {
        return Err(Error::InvalidInput("hit rate of an empty list".into()));
    }
    let hits = dices.iter().filter(|&&d| d >= threshold).count();
    Ok(hits as f64 / dices.len() as f64)
}
