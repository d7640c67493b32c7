//! Classification and segmentation losses on anomaly-channel probabilities,
//! with their derivatives.

use serde::{Deserialize, Serialize};

/// Probability clamp used by the log-based losses.
pub const PROB_EPS: f64 = 1e-7;
/// Additive smoothing in the dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;
/// Focusing exponent of the focal loss.
pub const FOCAL_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub focal: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(bce: f64, dice: f64, focal: f64) -> Self {
        Self {
            bce,
            dice,
            focal,
            total: bce + dice + focal,
        }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Derivative factor of the clamp: zero where it saturates.
fn clamp_slope(p: f64) -> f64 {
    if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        1.0
    } else {
        0.0
    }
}

/// Binary cross-entropy of an anomaly probability against a 0/1 target.
pub fn bce_loss(p: f64, anomalous: bool) -> f64 {
    let p = clamp_prob(p);
    if anomalous {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn bce_grad(p: f64, anomalous: bool) -> f64 {
    let s = clamp_slope(p);
    let p = clamp_prob(p);
    s * if anomalous { -1.0 / p } else { 1.0 / (1.0 - p) }
}

/// `1 − (2 Σ p·t + s) / (Σ p + Σ t + s)`.
pub fn dice_loss(p: &[f64], target: &[bool]) -> f64 {
    let (inter, denom) = dice_terms(p, target);
    1.0 - inter / denom
}

fn dice_terms(p: &[f64], target: &[bool]) -> (f64, f64) {
    let mut inter = DICE_SMOOTH;
    let mut denom = DICE_SMOOTH;
    for (&pi, &t) in p.iter().zip(target) {
        if t {
            inter += 2.0 * pi;
            denom += pi + 1.0;
        } else {
            denom += pi;
        }
    }
    (inter, denom)
}

pub fn dice_grad(p: &[f64], target: &[bool]) -> Vec<f64> {
    let (inter, denom) = dice_terms(p, target);
    target
        .iter()
        .map(|&t| {
            let two_t = if t { 2.0 } else { 0.0 };
            (inter - two_t * denom) / (denom * denom)
        })
        .collect()
}

/// Mean over patches of `−(1 − p_t)^γ ln p_t`, no class weighting.
pub fn focal_loss_with_gamma(p: &[f64], target: &[bool], gamma: f64) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let sum: f64 = p
        .iter()
        .zip(target)
        .map(|(&pi, &t)| {
            let pi = clamp_prob(pi);
            let pt = if t { pi } else { 1.0 - pi };
            -(1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum();
    sum / p.len() as f64
}

pub fn focal_loss(p: &[f64], target: &[bool]) -> f64 {
    focal_loss_with_gamma(p, target, FOCAL_GAMMA)
}

pub fn focal_grad_with_gamma(p: &[f64], target: &[bool], gamma: f64) -> Vec<f64> {
    let n = p.len() as f64;
    p.iter()
        .zip(target)
        .map(|(&raw, &t)| {
            let s = clamp_slope(raw);
            let pi = clamp_prob(raw);
            let pt = if t { pi } else { 1.0 - pi };
            let q = 1.0 - pt;
            // d/dp_t of −q^γ ln p_t, with q = 1 − p_t
            let dpt = if gamma == 0.0 {
                -1.0 / pt
            } else {
                gamma * q.powf(gamma - 1.0) * pt.ln() - q.powf(gamma) / pt
            };
            let sign = if t { 1.0 } else { -1.0 };
            s * sign * dpt / n
        })
        .collect()
}

pub fn focal_grad(p: &[f64], target: &[bool]) -> Vec<f64> {
    focal_grad_with_gamma(p, target, FOCAL_GAMMA)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.5, true) - LN_2).abs() < 1e-15);
        assert!(bce_loss(1.0 - PROB_EPS, true) < 1.1e-7);
        assert!((bce_loss(PROB_EPS, true) - 16.118).abs() < 1e-3);
        assert!((bce_loss(0.0, true) - (-(PROB_EPS).ln())).abs() < 1e-12);
    }

    #[test]
    fn dice_values() {
        let t = [true, false, true, true];
        let p: Vec<f64> = t.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        assert_eq!(dice_loss(&p, &t), 0.0);
        let d = dice_loss(&[0.5; 4], &[true; 4]);
        assert!((d - 2.0 / 7.0).abs() < 1e-15);
        assert_eq!(dice_loss(&[0.0; 4], &[false; 4]), 0.0);
    }

    #[test]
    fn focal_values() {
        let near = focal_loss(&[1.0 - PROB_EPS, PROB_EPS], &[true, false]);
        assert!(near < 1e-20);
        let f = focal_loss(&[0.5], &[true]);
        assert!((f - 0.25 * LN_2).abs() < 1e-15);
        assert!((f - 0.173287).abs() < 1e-6);
    }

    #[test]
    fn focal_gamma_zero_is_mean_bce() {
        let p = [0.2, 0.7, 0.9, 0.4];
        let t = [true, false, true, false];
        let mean_bce = p.iter().zip(&t).map(|(&p, &t)| bce_loss(p, t)).sum::<f64>() / 4.0;
        assert!((focal_loss_with_gamma(&p, &t, 0.0) - mean_bce).abs() < 1e-15);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for &(p, y) in &[(0.3, true), (0.3, false), (0.85, true), (0.05, false)] {
            assert!((bce_grad(p, y) - fd(|x| bce_loss(x, y), p)).abs() < 1e-6);
        }
        let p = vec![0.2, 0.7, 0.45, 0.9, 0.1];
        let t = [true, false, true, true, false];
        for gamma in [0.0, 2.0] {
            let g = focal_grad_with_gamma(&p, &t, gamma);
            let gd = dice_grad(&p, &t);
            for i in 0..p.len() {
                let at = |x: f64| {
                    let mut q = p.clone();
                    q[i] = x;
                    q
                };
                let nf = fd(|x| focal_loss_with_gamma(&at(x), &t, gamma), p[i]);
                let nd = fd(|x| dice_loss(&at(x), &t), p[i]);
                assert!((g[i] - nf).abs() < 1e-7, "focal {i}: {} vs {nf}", g[i]);
                assert!((gd[i] - nd).abs() < 1e-7, "dice {i}: {} vs {nd}", gd[i]);
            }
        }
    }

    #[test]
    fn breakdown_total() {
        let l = LossBreakdown::new(0.1, 0.2, 0.3);
        assert!((l.total - 0.6).abs() < 1e-9);
    }
}
