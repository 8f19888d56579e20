//! Training objectives: gaze balance loss, Dice, binary cross-entropy and
//! their weighted sum. Every loss has a `*_grad` twin returning `dL/dŷ`.
//!
//! Reductions run left to right over pixels so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::backbone::{Prediction, PROB_EPS};
use crate::dataset::SegMask;
use crate::error::{Error, Result};
use crate::gaze::WeightMask;
use crate::scalar::Scalar;

pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_gaa: f64,
    pub lambda_gb: f64,
    pub lambda_dice: f64,
    pub lambda_ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_gaa: 1.0,
            lambda_gb: 1.0,
            lambda_dice: 1.0,
            lambda_ce: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_gaa, self.lambda_gb, self.lambda_dice, self.lambda_ce];
        if all.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        if all.iter().all(|&l| l == 0.0) {
            return Err(Error::NoActiveObjective);
        }
        Ok(())
    }
}

/// Individual objective values for one batch or epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_gaa: f64,
    pub l_gb: f64,
    pub l_dice: f64,
    pub l_ce: f64,
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a} vs {b} pixels")));
    }
    Ok(())
}

fn eps<T: Scalar>() -> (T, T) {
    (T::lit(PROB_EPS), T::one() - T::lit(PROB_EPS))
}

/// `(value, dL/dŷ)` of `−1/N Σ [y log(wŷ) + (1−y) log(1−wŷ)]`, with `wŷ`
/// clamped to `[ε, 1−ε]` (zero gradient where the clamp is active).
pub fn gaze_balance_grad_slices<T: Scalar>(probs: &[T], labels: &[u8], weights: &[T]) -> Result<(T, Vec<T>)> {
    check_len(probs.len(), labels.len(), "prediction vs label")?;
    check_len(probs.len(), weights.len(), "prediction vs weight mask")?;
    if weights.iter().any(|w| !(*w > T::zero() && *w <= T::one())) {
        return Err(Error::BadWeightMask);
    }
    let (lo, hi) = eps::<T>();
    let n = T::lit(probs.len() as f64);
    let mut sum = T::zero();
    let mut grad = Vec::with_capacity(probs.len());
    for ((&p, &y), &w) in probs.iter().zip(labels).zip(weights) {
        let p_c = p.max(lo).min(hi);
        let p_live = p == p_c;
        let raw = w * p_c;
        let q = raw.max(lo).min(hi);
        let live = p_live && q == raw;
        if y == 1 {
            sum -= q.ln();
            grad.push(if live { -w / q / n } else { T::zero() });
        } else {
            sum -= (T::one() - q).ln();
            grad.push(if live { w / (T::one() - q) / n } else { T::zero() });
        }
    }
    Ok((sum / n, grad))
}

pub fn gaze_balance_grad<T: Scalar>(pred: &Prediction<T>, pseudo: &SegMask, w: &WeightMask<T>) -> Result<(T, Vec<T>)> {
    if !pseudo.same_shape(pred.height(), pred.width()) || w.height() != pred.height() || w.width() != pred.width() {
        return Err(Error::ShapeMismatch("prediction, pseudo-label and weight mask differ".into()));
    }
    gaze_balance_grad_slices(pred.probs(), pseudo.pixels(), w.values())
}

pub fn gaze_balance_loss<T: Scalar>(pred: &Prediction<T>, pseudo: &SegMask, w: &WeightMask<T>) -> Result<T> {
    Ok(gaze_balance_grad(pred, pseudo, w)?.0)
}

/// Pixel-mean binary cross-entropy with ε-clamped probabilities.
pub fn cross_entropy_grad_slices<T: Scalar>(probs: &[T], labels: &[u8]) -> Result<(T, Vec<T>)> {
    check_len(probs.len(), labels.len(), "prediction vs label")?;
    let (lo, hi) = eps::<T>();
    let n = T::lit(probs.len() as f64);
    let mut sum = T::zero();
    let mut grad = Vec::with_capacity(probs.len());
    for (&p, &y) in probs.iter().zip(labels) {
        let q = p.max(lo).min(hi);
        let live = q == p;
        if y == 1 {
            sum -= q.ln();
            grad.push(if live { -T::one() / q / n } else { T::zero() });
        } else {
            sum -= (T::one() - q).ln();
            grad.push(if live { T::one() / (T::one() - q) / n } else { T::zero() });
        }
    }
    Ok((sum / n, grad))
}

pub fn cross_entropy_grad<T: Scalar>(pred: &Prediction<T>, target: &SegMask) -> Result<(T, Vec<T>)> {
    if !target.same_shape(pred.height(), pred.width()) {
        return Err(Error::ShapeMismatch("prediction vs mask".into()));
    }
    cross_entropy_grad_slices(pred.probs(), target.pixels())
}

pub fn cross_entropy_loss<T: Scalar>(pred: &Prediction<T>, target: &SegMask) -> Result<T> {
    Ok(cross_entropy_grad(pred, target)?.0)
}

/// Smoothed soft Dice loss `1 − (2Σŷy + s)/(Σŷ + Σy + s)`.
pub fn dice_grad_slices<T: Scalar>(probs: &[T], labels: &[u8]) -> Result<(T, Vec<T>)> {
    check_len(probs.len(), labels.len(), "prediction vs label")?;
    let s = T::lit(DICE_SMOOTH);
    let two = T::lit(2.0);
    let mut inter = T::zero();
    let mut sum_p = T::zero();
    let mut sum_y = T::zero();
    for (&p, &y) in probs.iter().zip(labels) {
        if y == 1 {
            inter += p;
            sum_y += T::one();
        }
        sum_p += p;
    }
    let num = two * inter + s;
    let den = sum_p + sum_y + s;
    let loss = T::one() - num / den;
    let den2 = den * den;
    let grad = labels
        .iter()
        .map(|&y| {
            let yv = if y == 1 { T::one() } else { T::zero() };
            -(two * yv * den - num) / den2
        })
        .collect();
    Ok((loss, grad))
}

pub fn dice_grad<T: Scalar>(pred: &Prediction<T>, target: &SegMask) -> Result<(T, Vec<T>)> {
    if !target.same_shape(pred.height(), pred.width()) {
        return Err(Error::ShapeMismatch("prediction vs mask".into()));
    }
    dice_grad_slices(pred.probs(), target.pixels())
}

pub fn dice_loss<T: Scalar>(pred: &Prediction<T>, target: &SegMask) -> Result<T> {
    Ok(dice_grad(pred, target)?.0)
}

/// `λ_gaa L_GAA + λ_gb L_GB + λ_dice L_DICE + λ_ce L_CE`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("L_GAA", c.l_gaa), ("L_GB", c.l_gb), ("L_DICE", c.l_dice), ("L_CE", c.l_ce)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(format!("{name} = {v}")));
        }
    }
    Ok(w.lambda_gaa * c.l_gaa + w.lambda_gb * c.l_gb + w.lambda_dice * c.l_dice + w.lambda_ce * c.l_ce)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(p: Vec<f64>) -> Prediction<f64> {
        let n = p.len();
        Prediction::from_probs(1, n, p).unwrap()
    }

    #[test]
    fn gb_scalar_cases() {
        let w = WeightMask::constant(1, 1, 0.5).unwrap();
        let y1 = SegMask::new(1, 1, vec![1]).unwrap();
        let y0 = SegMask::new(1, 1, vec![0]).unwrap();
        let p = pred(vec![0.8]);
        assert!((gaze_balance_loss(&p, &y1, &w).unwrap() - 0.916_290_731_874_155).abs() < 1e-6);
        assert!((gaze_balance_loss(&p, &y0, &w).unwrap() - 0.510_825_623_765_990_7).abs() < 1e-6);
    }

    #[test]
    fn gb_rejects_mismatch_and_bad_weights() {
        let p = pred(vec![0.5, 0.5]);
        let y = SegMask::new(1, 1, vec![1]).unwrap();
        let w = WeightMask::constant(1, 1, 1.0).unwrap();
        assert!(matches!(gaze_balance_loss(&p, &y, &w), Err(Error::ShapeMismatch(_))));
        assert!(matches!(
            gaze_balance_grad_slices(&[0.5f64], &[1], &[0.0]),
            Err(Error::BadWeightMask)
        ));
    }

    #[test]
    fn monotone_in_weight() {
        // y = 1: larger w, smaller loss; y = 0: larger w, larger loss
        let at = |y: u8, w: f64| gaze_balance_grad_slices(&[0.6f64], &[y], &[w]).unwrap().0;
        assert!(at(1, 0.9) < at(1, 0.5));
        assert!(at(0, 0.9) > at(0, 0.5));
    }

    #[test]
    fn dice_cases() {
        let ones = SegMask::new(4, 4, vec![1; 16]).unwrap();
        let zeros = SegMask::zeros(4, 4);
        let p1 = Prediction::from_probs(4, 4, vec![1.0f64; 16]).unwrap();
        // the clamp leaves ŷ at 1 − 1e-7, so the loss is ~1e-7 rather than 0
        assert!(dice_loss(&p1, &ones).unwrap().abs() < 1e-6);
        let p0 = Prediction::from_probs(4, 4, vec![0.0f64; 16]).unwrap();
        assert!((dice_loss(&p0, &ones).unwrap() - (1.0 - 1.0 / 17.0)).abs() < 1e-5);
        assert!(dice_loss(&p0, &zeros).unwrap().abs() < 1e-5);
        // unclamped slices give the exact values
        assert_eq!(dice_grad_slices(&[1.0f64; 16], ones.pixels()).unwrap().0, 0.0);
        assert_eq!(dice_grad_slices(&[0.0f64; 16], ones.pixels()).unwrap().0, 1.0 - 1.0 / 17.0);
        assert_eq!(dice_grad_slices(&[0.0f64; 16], zeros.pixels()).unwrap().0, 0.0);
    }

    #[test]
    fn ce_cases() {
        let y = SegMask::new(1, 4, vec![1, 0, 1, 0]).unwrap();
        let p = pred(vec![0.5; 4]);
        assert!((cross_entropy_loss(&p, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let y1 = SegMask::new(1, 1, vec![1]).unwrap();
        let sat = pred(vec![1.0]);
        let v = cross_entropy_loss(&sat, &y1).unwrap();
        assert!(v > 0.0 && v < 2e-7);
    }

    #[test]
    fn total_cases() {
        let c = LossComponents {
            l_gaa: 0.1,
            l_gb: 0.2,
            l_dice: 0.3,
            l_ce: 0.4,
        };
        let zero = LossWeights {
            lambda_gaa: 0.0,
            lambda_gb: 0.0,
            lambda_dice: 0.0,
            lambda_ce: 0.0,
        };
        assert_eq!(total_loss(&c, &zero).unwrap(), 0.0);
        assert!(matches!(zero.validate(), Err(Error::NoActiveObjective)));
        let ce_only = LossWeights { lambda_ce: 1.0, ..zero };
        assert_eq!(total_loss(&c, &ce_only).unwrap(), 0.4);
        let w = LossWeights {
            lambda_gaa: 0.5,
            lambda_gb: 2.0,
            lambda_dice: 1.0,
            lambda_ce: 1.0,
        };
        assert!((total_loss(&c, &w).unwrap() - 1.15).abs() < 1e-12);
        let bad = LossComponents { l_gb: f64::NAN, ..c };
        assert!(matches!(total_loss(&bad, &w), Err(Error::NonFiniteLoss(_))));
    }
}
