//! Early-exit logic.
//!
//! During training an example leaves the network at the first exit that
//! classifies it correctly with true-class confidence above `t`; it pays the
//! loss of every exit up to and including that one. At inference the label
//! is unknown, so an example leaves at the first exit whose top confidence
//! exceeds `s`, and later blocks are never evaluated.

use crate::error::{Error, Result};
use crate::layers::softmax_row;
use crate::losses::{ClassWeights, ExitLoss};
use crate::network::MultiExitNetwork;
use crate::tensor::Tensor;

/// Training thresholds `t` and inference thresholds `s`, one per exit, in
/// softmax-confidence units.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitPolicy {
    train: Vec<f64>,
    infer: Vec<f64>,
}

impl ExitPolicy {
    pub fn new(train: Vec<f64>, infer: Vec<f64>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::config("exit policy needs at least one exit"));
        }
        if train.len() != infer.len() {
            return Err(Error::config(format!(
                "{} training thresholds but {} inference thresholds",
                train.len(),
                infer.len()
            )));
        }
        if let Some(bad) = train.iter().chain(&infer).find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::config(format!("threshold {bad} outside [0, 1]")));
        }
        Ok(Self { train, infer })
    }

    /// The same `t` and `s` at every exit.
    pub fn uniform(exits: usize, t: f64, s: f64) -> Result<Self> {
        Self::new(vec![t; exits], vec![s; exits])
    }

    pub fn exits(&self) -> usize {
        self.train.len()
    }

    pub fn train_threshold(&self, k: usize) -> f64 {
        self.train[k]
    }

    pub fn infer_threshold(&self, k: usize) -> f64 {
        self.infer[k]
    }

    pub fn with_infer(&self, s: f64) -> Result<Self> {
        Self::new(self.train.clone(), vec![s; self.exits()])
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = j;
        }
    }
    best
}

/// Correct and confident: `argmax(p) == y` and `p[y] > t`.
pub fn train_exit_criterion(probs: &[f64], y: usize, t: f64) -> bool {
    argmax(probs) == y && probs[y] > t
}

/// Confident, label-free: `max(p) > s`.
pub fn infer_exit_criterion(probs: &[f64], s: f64) -> bool {
    probs.iter().copied().fold(f64::NEG_INFINITY, f64::max) > s
}

/// Per-example record of where an example left the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitTrace {
    /// 1-based exit index.
    pub exit: usize,
    /// Confidence the criterion looked at, for every exit evaluated: the
    /// true-class probability in training, the top probability at inference.
    pub confidence: Vec<f64>,
    /// Loss at exits `1..=exit` (empty at inference).
    pub per_exit_loss: Vec<f64>,
    pub total_loss: f64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElfLossOutput {
    pub total_loss: f64,
    pub trace: ExitTrace,
    /// `mask[k]` is true iff exit `k + 1` contributes to the loss.
    pub mask: Vec<bool>,
    /// Gradient of the total loss with respect to each exit's logits; zero
    /// for masked exits.
    pub grads: Vec<Vec<f64>>,
}

/// Sums the exit loss over exits `1..=k_e`, where `k_e` is the first exit
/// whose training criterion fires, or the last exit if none does.
pub fn elf_loss(
    per_exit_logits: &[&[f64]],
    y: usize,
    loss: &ExitLoss,
    weights: &ClassWeights,
    policy: &ExitPolicy,
) -> Result<ElfLossOutput> {
    let k_total = per_exit_logits.len();
    if k_total == 0 {
        return Err(Error::config("elf_loss needs at least one exit"));
    }
    if k_total != policy.exits() {
        return Err(Error::config(format!(
            "{k_total} exits of logits but policy has {}",
            policy.exits()
        )));
    }
    let classes = per_exit_logits[0].len();
    let mut confidence = Vec::with_capacity(k_total);
    let mut per_exit_loss = Vec::with_capacity(k_total);
    let mut grads = Vec::with_capacity(k_total);
    let mut exit = k_total;
    for (k, logits) in per_exit_logits.iter().enumerate() {
        let probs = softmax_row(logits);
        confidence.push(probs[y]);
        let out = loss.eval(logits, y, weights);
        per_exit_loss.push(out.loss);
        grads.push(out.grad);
        if train_exit_criterion(&probs, y, policy.train_threshold(k)) {
            exit = k + 1;
            break;
        }
    }
    let total_loss = per_exit_loss.iter().sum();
    let mask = (0..k_total).map(|k| k < exit).collect();
    grads.resize(k_total, vec![0.0; classes]);
    Ok(ElfLossOutput {
        total_loss,
        trace: ExitTrace {
            exit,
            confidence,
            per_exit_loss,
            total_loss,
            flops: 0,
        },
        mask,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f64>,
    pub trace: ExitTrace,
}

/// Runs one example through the network, stopping at the first exit whose
/// inference criterion fires.
pub fn predict(x: &Tensor, net: &MultiExitNetwork, policy: &ExitPolicy) -> Result<Prediction> {
    if x.batch() != 1 {
        return Err(Error::Dimension {
            op: "predict",
            left: x.shape().to_vec(),
            right: vec![1],
        });
    }
    Ok(predict_batch(x, net, policy)?.pop().unwrap())
}

/// Batched inference with true early termination: examples that exit are
/// dropped from the batch before the next block is evaluated.
///
/// Reported FLOPs follow the cumulative exit table: the blocks up to the exit
/// plus the head that produced the prediction. Heads passed through on the
/// way are not charged.
pub fn predict_batch(
    x: &Tensor,
    net: &MultiExitNetwork,
    policy: &ExitPolicy,
) -> Result<Vec<Prediction>> {
    let k_total = net.exits();
    if policy.exits() != k_total {
        return Err(Error::config(format!(
            "policy has {} exits but the network has {k_total}",
            policy.exits()
        )));
    }
    let batch = x.batch();
    let mut results: Vec<Option<Prediction>> = vec![None; batch];
    let mut confidence: Vec<Vec<f64>> = vec![Vec::with_capacity(k_total); batch];
    let mut flops = vec![0u64; batch];
    let mut active: Vec<usize> = (0..batch).collect();
    let mut hidden = x.clone();
    let costs = net.flop_table();
    for (k, &last_block) in net.exit_blocks().iter().enumerate() {
        let first_block = if k == 0 { 0 } else { net.exit_blocks()[k - 1] + 1 };
        for b in first_block..=last_block {
            hidden = net.infer_block(b, &hidden)?;
            for &i in &active {
                flops[i] += costs.blocks[b];
            }
        }
        let logits = net.infer_head(k, &hidden)?;
        let c = logits.item_len();
        let mut keep = Vec::with_capacity(active.len());
        let mut still = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            let probs = softmax_row(&logits.data()[row * c..(row + 1) * c]);
            let top = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            confidence[i].push(top);
            if k + 1 == k_total || infer_exit_criterion(&probs, policy.infer_threshold(k)) {
                flops[i] += costs.heads[k];
                results[i] = Some(Prediction {
                    class: argmax(&probs),
                    probs,
                    trace: ExitTrace {
                        exit: k + 1,
                        confidence: std::mem::take(&mut confidence[i]),
                        per_exit_loss: Vec::new(),
                        total_loss: 0.0,
                        flops: flops[i],
                    },
                });
            } else {
                keep.push(row);
                still.push(i);
            }
        }
        if still.is_empty() {
            break;
        }
        if still.len() != active.len() {
            hidden = hidden.select(&keep);
        }
        active = still;
    }
    Ok(results.into_iter().map(|r| r.unwrap()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_criterion_examples() {
        assert!(train_exit_criterion(&[0.95, 0.05], 0, 0.9));
        assert!(!train_exit_criterion(&[0.95, 0.05], 1, 0.9));
        assert!(!train_exit_criterion(&[0.85, 0.15], 0, 0.9));
        assert!(!train_exit_criterion(&[0.9, 0.1], 0, 0.9));
    }

    #[test]
    fn infer_criterion_examples() {
        assert!(infer_exit_criterion(&[0.7, 0.3], 0.6));
        assert!(!infer_exit_criterion(&[0.7, 0.3], 0.7));
        assert!(infer_exit_criterion(&[0.5, 0.5], 0.0));
        assert!(!infer_exit_criterion(&[1.0, 0.0], 1.0));
    }

    #[test]
    fn policy_validation() {
        assert!(ExitPolicy::uniform(0, 0.9, 0.9).is_err());
        assert!(ExitPolicy::new(vec![0.9], vec![0.9, 0.9]).is_err());
        assert!(ExitPolicy::uniform(2, 1.2, 0.5).is_err());
        assert_eq!(ExitPolicy::uniform(3, 0.9, 0.5).unwrap().exits(), 3);
    }

    fn ce() -> (ExitLoss, ClassWeights) {
        (ExitLoss::CrossEntropy, ClassWeights::uniform(2))
    }

    #[test]
    fn elf_loss_immediate_exit() {
        let (loss, w) = ce();
        let p = ExitPolicy::uniform(3, 0.9, 0.9).unwrap();
        let z1 = [5.0, 0.0];
        let z = [0.0, 0.0];
        let out = elf_loss(&[&z1, &z, &z], 0, &loss, &w, &p).unwrap();
        assert_eq!(out.trace.exit, 1);
        assert_eq!(out.mask, vec![true, false, false]);
        assert_eq!(out.total_loss, loss.eval(&z1, 0, &w).loss);
        assert_eq!(out.grads[1], vec![0.0, 0.0]);
    }

    #[test]
    fn elf_loss_never_fires() {
        let (loss, w) = ce();
        let p = ExitPolicy::uniform(3, 0.9, 0.9).unwrap();
        let zs = [[0.1, 0.0], [0.3, 0.2], [-1.0, 1.0]];
        let refs: Vec<&[f64]> = zs.iter().map(|z| &z[..]).collect();
        let out = elf_loss(&refs, 0, &loss, &w, &p).unwrap();
        assert_eq!(out.trace.exit, 3);
        assert_eq!(out.mask, vec![true, true, true]);
        let expect: f64 = zs.iter().map(|z| loss.eval(z, 0, &w).loss).sum();
        assert_eq!(out.total_loss, expect);
        assert_eq!(out.trace.per_exit_loss.len(), 3);
    }

    #[test]
    fn elf_loss_fires_at_second_exit() {
        // Exit 1: p_y = 1 / (1 + e^-a) with loss 0.9 => a = ln(1 / (e^0.9 - 1)).
        // Exit 2: loss 0.1 => p_y = e^-0.1 = 0.905 > 0.9.
        let (loss, w) = ce();
        let p = ExitPolicy::uniform(3, 0.9, 0.9).unwrap();
        let a1 = -(0.9f64.exp() - 1.0).ln();
        let a2 = -(0.1f64.exp() - 1.0).ln();
        let z1 = [a1, 0.0];
        let z2 = [a2, 0.0];
        let z3 = [-3.0, 3.0];
        let out = elf_loss(&[&z1, &z2, &z3], 0, &loss, &w, &p).unwrap();
        assert_eq!(out.trace.exit, 2);
        assert!((out.trace.per_exit_loss[0] - 0.9).abs() < 1e-12);
        assert!((out.trace.per_exit_loss[1] - 0.1).abs() < 1e-12);
        assert!((out.total_loss - 1.0).abs() < 1e-12);
        assert_eq!(out.mask, vec![true, true, false]);
    }

    #[test]
    fn elf_loss_single_exit_is_plain_loss() {
        let w = ClassWeights::uniform(3);
        let loss = ExitLoss::Focal { gamma: 0.5 };
        let z = [0.2, 1.7, -0.4];
        for t in [0.0, 0.5, 1.0] {
            let p = ExitPolicy::uniform(1, t, 1.0).unwrap();
            let out = elf_loss(&[&z], 1, &loss, &w, &p).unwrap();
            let plain = loss.eval(&z, 1, &w);
            assert_eq!(out.total_loss, plain.loss);
            assert_eq!(out.grads[0], plain.grad);
        }
    }

    #[test]
    fn elf_loss_rejects_zero_exits() {
        let (loss, w) = ce();
        let p = ExitPolicy::uniform(1, 0.9, 0.9).unwrap();
        assert!(matches!(elf_loss(&[], 0, &loss, &w, &p), Err(Error::Config(_))));
    }
}
