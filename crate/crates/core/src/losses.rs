//! Per-exit losses and class reweighting.
//!
//! Every loss takes one row of raw logits and returns the scalar loss along
//! with its gradient with respect to those logits. Probabilities are always
//! formed with the max-subtracted softmax.

use crate::error::{Error, Result};

/// Per-class loss weights, mean-normalized so they average 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    w: Vec<f64>,
    beta: Option<f64>,
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self {
            w: vec![1.0; classes],
            beta: None,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn get(&self, class: usize) -> f64 {
        self.w[class]
    }

    pub fn beta(&self) -> Option<f64> {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Raw effective-number weight `(1 - beta) / (1 - beta^n)`.
pub fn effective_weight_raw(count: usize, beta: f64) -> f64 {
    if beta == 0.0 {
        return 1.0;
    }
    // 1 - beta^n without cancellation
    let denom = -(count as f64 * beta.ln()).exp_m1();
    (1.0 - beta) / denom
}

/// Effective-number class weights, mean-normalized to average 1.
pub fn effective_weights(counts: &[usize], beta: f64) -> Result<ClassWeights> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::config(format!(
            "beta must lie in [0, 1), got {beta}; the effective-number weight is undefined at 1"
        )));
    }
    if counts.is_empty() {
        return Err(Error::config("effective_weights needs at least one class"));
    }
    if let Some(j) = counts.iter().position(|&n| n == 0) {
        return Err(Error::config(format!("class {j} has no examples")));
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| effective_weight_raw(n, beta))
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(ClassWeights {
        w: raw.into_iter().map(|r| r / mean).collect(),
        beta: Some(beta),
    })
}

/// Per-class LDAM margins `delta_j = C / n_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginVector {
    delta: Vec<f64>,
    c_const: f64,
}

impl MarginVector {
    pub fn zeros(classes: usize) -> Self {
        Self {
            delta: vec![0.0; classes],
            c_const: 0.0,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.delta
    }

    pub fn get(&self, class: usize) -> f64 {
        self.delta[class]
    }

    pub fn c_const(&self) -> f64 {
        self.c_const
    }
}

/// Chooses `C` so the rarest class receives exactly `max_margin`.
pub fn ldam_margins(counts: &[usize], max_margin: f64) -> Result<MarginVector> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::config("ldam_margins needs positive class counts"));
    }
    if !(max_margin >= 0.0 && max_margin.is_finite()) {
        return Err(Error::config(format!("invalid max margin {max_margin}")));
    }
    let min = *counts.iter().min().unwrap();
    let c_const = max_margin * min as f64;
    Ok(MarginVector {
        delta: counts.iter().map(|&n| c_const / n as f64).collect(),
        c_const,
    })
}

/// Uniform weights before `switch_epoch`, the target weights from then on.
#[derive(Debug, Clone, PartialEq)]
pub struct DrwSchedule {
    pub switch_epoch: usize,
    pub target: ClassWeights,
}

impl DrwSchedule {
    pub fn new(switch_epoch: usize, target: ClassWeights) -> Self {
        Self {
            switch_epoch,
            target,
        }
    }

    /// A schedule that never reweights.
    pub fn disabled(classes: usize) -> Self {
        Self {
            switch_epoch: 0,
            target: ClassWeights::uniform(classes),
        }
    }
}

pub fn drw_weights(schedule: &DrwSchedule, epoch: usize) -> ClassWeights {
    if epoch < schedule.switch_epoch {
        ClassWeights::uniform(schedule.target.len())
    } else {
        schedule.target.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient with respect to the logits.
    pub grad: Vec<f64>,
}

fn check_target(logits: &[f64], y: usize) {
    assert!(
        y < logits.len(),
        "label {y} out of range for {} logits",
        logits.len()
    );
}

/// Softmax probabilities, `log p_y`, and `1 - p_y` summed from the other
/// classes so it stays accurate when `p_y` is close to 1.
fn softmax_terms(logits: &[f64], y: usize) -> (Vec<f64>, f64, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let log_py = (logits[y] - max) - sum.ln();
    let probs: Vec<f64> = exps.into_iter().map(|e| e / sum).collect();
    let rest = probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, p)| p)
        .sum();
    (probs, log_py, rest)
}

/// `-w_y log softmax(z)[y]`.
pub fn weighted_ce(logits: &[f64], y: usize, weights: &ClassWeights) -> LossOutput {
    check_target(logits, y);
    let w = weights.get(y);
    let (probs, log_py, _) = softmax_terms(logits, y);
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, &p)| w * (p - if j == y { 1.0 } else { 0.0 }))
        .collect();
    LossOutput {
        loss: -w * log_py,
        grad,
    }
}

/// `-w_y (1 - p_y)^gamma log p_y`.
pub fn focal(logits: &[f64], y: usize, weights: &ClassWeights, gamma: f64) -> LossOutput {
    check_target(logits, y);
    assert!(gamma >= 0.0, "focal gamma must be non-negative");
    let w = weights.get(y);
    let (probs, log_py, rest) = softmax_terms(logits, y);
    let modulator = rest.powf(gamma);
    // d/dp_y of the loss times p_y, folded into one factor on (p - onehot).
    let factor = if gamma == 0.0 {
        1.0
    } else if rest == 0.0 {
        0.0
    } else {
        modulator - gamma * rest.powf(gamma - 1.0) * probs[y] * log_py
    };
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, &p)| w * factor * (p - if j == y { 1.0 } else { 0.0 }))
        .collect();
    LossOutput {
        loss: -w * modulator * log_py,
        grad,
    }
}

/// Weighted cross-entropy on logits whose true-class entry is lowered by
/// the class margin.
pub fn ldam(logits: &[f64], y: usize, weights: &ClassWeights, margins: &MarginVector) -> LossOutput {
    check_target(logits, y);
    let mut shifted = logits.to_vec();
    shifted[y] -= margins.get(y);
    weighted_ce(&shifted, y, weights)
}

/// Loss applied at each exit.
#[derive(Debug, Clone, PartialEq)]
pub enum ExitLoss {
    CrossEntropy,
    Focal { gamma: f64 },
    Ldam { margins: MarginVector },
}

impl ExitLoss {
    pub fn eval(&self, logits: &[f64], y: usize, weights: &ClassWeights) -> LossOutput {
        match self {
            ExitLoss::CrossEntropy => weighted_ce(logits, y, weights),
            ExitLoss::Focal { gamma } => focal(logits, y, weights, *gamma),
            ExitLoss::Ldam { margins } => ldam(logits, y, weights, margins),
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            ExitLoss::CrossEntropy => "ce",
            ExitLoss::Focal { .. } => "focal",
            ExitLoss::Ldam { .. } => "ldam",
        }
    }
}
