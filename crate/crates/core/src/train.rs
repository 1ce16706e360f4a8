//! SGD with linear warmup and step decay, and the ELF training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LongTailedDataset;
use crate::error::{Error, Result};
use crate::exit::{argmax, elf_loss, ElfLossOutput, ExitPolicy};
use crate::losses::{drw_weights, ClassWeights, DrwSchedule, ExitLoss};
use crate::network::MultiExitNetwork;
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 2e-4;
pub const DEFAULT_WARMUP: usize = 5;
pub const DEFAULT_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `(epoch, factor)`: from `epoch` on, the rate is multiplied by `factor`.
    pub lr_decay: Vec<(usize, f64)>,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub loss: ExitLoss,
    pub drw: DrwSchedule,
    pub policy: ExitPolicy,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "warmup ({}) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.epochs
            )));
        }
        if let Some(&(e, _)) = self.lr_decay.iter().find(|(e, _)| *e >= self.epochs) {
            return Err(Error::config(format!(
                "lr decay at epoch {e} is past the last epoch {}",
                self.epochs - 1
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// `lr * (e + 1) / warmup` during warmup, then `lr` times every decay factor
/// whose epoch has been reached.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    if epoch < config.warmup_epochs {
        return config.lr * (epoch + 1) as f64 / config.warmup_epochs as f64;
    }
    config
        .lr_decay
        .iter()
        .filter(|(e, _)| epoch >= *e)
        .fold(config.lr, |lr, (_, f)| lr * f)
}

/// `v <- momentum * v + g + wd * w; w <- w - lr * v` for every parameter.
pub fn sgd_step(net: &mut MultiExitNetwork, lr: f64, momentum: f64, weight_decay: f64) {
    for p in net.params_mut() {
        update(
            p.weights.data_mut(),
            p.grad_weights.data(),
            p.vel_weights.data_mut(),
            lr,
            momentum,
            weight_decay,
        );
        update(
            p.bias.data_mut(),
            p.grad_bias.data(),
            p.vel_bias.data_mut(),
            lr,
            momentum,
            weight_decay,
        );
    }
}

fn update(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, wd: f64) {
    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + g + wd * *w;
        *w -= lr * *v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss of each exit over all examples, masked or not.
    pub mean_exit_loss: Vec<f64>,
    /// Mean total ELF loss per example.
    pub mean_elf_loss: f64,
    /// Examples whose training exit was `k + 1`.
    pub exit_histogram: Vec<usize>,
    /// Final-exit top-1 accuracy in percent, measured before each update.
    pub train_top1: f64,
}

/// Example order that depends only on content, so training is independent of
/// how the dataset happens to be stored.
fn canonical_order(ds: &LongTailedDataset) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| {
        ds.label(a).cmp(&ds.label(b)).then_with(|| {
            let fa = ds.features(a).iter().map(|v| v.to_bits());
            let fb = ds.features(b).iter().map(|v| v.to_bits());
            fa.cmp(fb)
        })
    });
    order
}

/// One training pass over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPass {
    /// Mean total ELF loss over the batch; the accumulated parameter
    /// gradients are the gradient of this value.
    pub loss: f64,
    pub outputs: Vec<ElfLossOutput>,
    /// Logits of every exit, `[batch, classes]` each.
    pub logits: Vec<Tensor>,
}

/// Zeroes the gradients, runs every exit forward, applies the ELF loss per
/// example and backpropagates the batch-mean loss restricted to each
/// example's exits `1..=k_e`.
pub fn forward_backward(
    net: &mut MultiExitNetwork,
    x: &Tensor,
    labels: &[usize],
    loss: &ExitLoss,
    weights: &ClassWeights,
    policy: &ExitPolicy,
) -> Result<BatchPass> {
    let logits = net.forward(x)?;
    let n = labels.len();
    if n != x.batch() {
        return Err(Error::Dimension {
            op: "forward_backward labels",
            left: x.shape().to_vec(),
            right: vec![n],
        });
    }
    let k_total = net.exits();
    let classes = net.classes();
    let scale = 1.0 / n as f64;
    let mut grads: Vec<Tensor> = (0..k_total).map(|_| Tensor::zeros(&[n, classes])).collect();
    let mut outputs = Vec::with_capacity(n);
    let mut deepest = 0;
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let rows: Vec<&[f64]> = logits.iter().map(|z| z.item(b)).collect();
        let out = elf_loss(&rows, y, loss, weights, policy)?;
        total += out.total_loss;
        deepest = deepest.max(out.trace.exit);
        for (k, g) in out.grads.iter().enumerate().take(out.trace.exit) {
            let dst = &mut grads[k].data_mut()[b * classes..(b + 1) * classes];
            for (d, v) in dst.iter_mut().zip(g) {
                *d = v * scale;
            }
        }
        outputs.push(out);
    }
    let exit_grads: Vec<Option<Tensor>> = grads
        .into_iter()
        .enumerate()
        .map(|(k, g)| (k < deepest).then_some(g))
        .collect();
    net.zero_grad();
    net.backward(&exit_grads)?;
    Ok(BatchPass {
        loss: total * scale,
        outputs,
        logits,
    })
}

/// Trains in place and returns one log entry per epoch.
///
/// Every batch runs all exits forward; each example's loss and gradient are
/// restricted to exits up to its training exit before backpropagation.
pub fn train(
    net: &mut MultiExitNetwork,
    data: &LongTailedDataset,
    config: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if data.classes() != net.classes() {
        return Err(Error::config(format!(
            "dataset has {} classes, network has {}",
            data.classes(),
            net.classes()
        )));
    }
    if config.policy.exits() != net.exits() {
        return Err(Error::config(format!(
            "policy has {} exits, network has {}",
            config.policy.exits(),
            net.exits()
        )));
    }
    if data.is_empty() {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    let k_total = net.exits();
    let mut order = canonical_order(data);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at(config, epoch);
        let weights = drw_weights(&config.drw, epoch);
        order.shuffle(&mut rng);
        let mut exit_loss_sum = vec![0.0; k_total];
        let mut elf_sum = 0.0;
        let mut histogram = vec![0usize; k_total];
        let mut correct = 0usize;
        for (batch_idx, items) in order.chunks(config.batch_size).enumerate() {
            let (x, labels) = data.batch(items);
            let pass = forward_backward(net, &x, &labels, &config.loss, &weights, &config.policy)?;
            for (b, (&y, out)) in labels.iter().zip(&pass.outputs).enumerate() {
                if !out.total_loss.is_finite() {
                    return Err(Error::Numerical {
                        epoch,
                        batch: batch_idx,
                        lr,
                        detail: format!("non-finite loss {} for label {y}", out.total_loss),
                    });
                }
                for (k, z) in pass.logits.iter().enumerate() {
                    exit_loss_sum[k] += match out.trace.per_exit_loss.get(k) {
                        Some(&l) => l,
                        None => config.loss.eval(z.item(b), y, &weights).loss,
                    };
                }
                elf_sum += out.total_loss;
                histogram[out.trace.exit - 1] += 1;
                if argmax(pass.logits[k_total - 1].item(b)) == y {
                    correct += 1;
                }
            }
            sgd_step(net, lr, config.momentum, config.weight_decay);
            if let Some(bad) = net.params().find(|p| !p.weights.is_finite() || !p.bias.is_finite()) {
                return Err(Error::Numerical {
                    epoch,
                    batch: batch_idx,
                    lr,
                    detail: format!("non-finite parameter of shape {:?}", bad.weights.shape()),
                });
            }
        }
        let total = data.len() as f64;
        logs.push(EpochLog {
            epoch,
            lr,
            mean_exit_loss: exit_loss_sum.iter().map(|s| s / total).collect(),
            mean_elf_loss: elf_sum / total,
            exit_histogram: histogram,
            train_top1: 100.0 * correct as f64 / total,
        });
    }
    net.clear_caches();
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussian;
    use crate::network::build_network;

    fn config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            lr: 0.1,
            lr_decay: vec![],
            warmup_epochs: 0,
            weight_decay: 0.0,
            momentum: 0.9,
            seed: 1,
            loss: ExitLoss::CrossEntropy,
            drw: DrwSchedule::disabled(2),
            policy: ExitPolicy::uniform(1, 0.9, 0.9).unwrap(),
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let mut c = config(200);
        c.warmup_epochs = 5;
        c.lr_decay = vec![(160, 0.01), (180, 0.01)];
        assert!((lr_at(&c, 0) - 0.02).abs() < 1e-15);
        assert!((lr_at(&c, 4) - 0.1).abs() < 1e-15);
        assert_eq!(lr_at(&c, 5), 0.1);
        assert_eq!(lr_at(&c, 159), 0.1);
        assert!((lr_at(&c, 160) - 0.001).abs() < 1e-15);
        assert!((lr_at(&c, 199) - 0.00001).abs() < 1e-17);
    }

    #[test]
    fn config_validation() {
        let mut c = config(5);
        c.warmup_epochs = 5;
        assert!(c.validate().is_err());
        let mut c = config(5);
        c.lr_decay = vec![(5, 0.1)];
        assert!(c.validate().is_err());
        assert!(config(5).validate().is_ok());
    }

    fn single_param_net() -> MultiExitNetwork {
        build_network(2, [1, 1, 1], 1, &[1], 0).unwrap()
    }

    #[test]
    fn sgd_plain_gradient_descent() {
        let mut net = single_param_net();
        for p in net.params_mut() {
            p.weights.fill(1.0);
            p.grad_weights.fill(0.5);
        }
        sgd_step(&mut net, 0.1, 0.0, 0.0);
        for p in net.params() {
            assert!(p.weights.data().iter().all(|&w| (w - 0.95).abs() < 1e-15));
        }
    }

    #[test]
    fn sgd_momentum_only() {
        let mut net = single_param_net();
        for p in net.params_mut() {
            p.weights.fill(1.0);
            p.vel_weights.fill(2.0);
        }
        sgd_step(&mut net, 0.1, 0.9, 0.0);
        for p in net.params() {
            // v = 0.9 * 2, w = 1 - 0.1 * 1.8
            assert!(p.vel_weights.data().iter().all(|&v| (v - 1.8).abs() < 1e-15));
            assert!(p.weights.data().iter().all(|&w| (w - 0.82).abs() < 1e-15));
        }
    }

    #[test]
    fn sgd_weight_decay_step() {
        let mut net = single_param_net();
        for p in net.params_mut() {
            p.weights.fill(1.0);
        }
        sgd_step(&mut net, 0.1, 0.9, 2e-4);
        for p in net.params() {
            assert!(p.weights.data().iter().all(|&w| w == 1.0 - 0.1 * 2e-4));
            assert!(p.weights.data().iter().all(|&w| (w - 0.99998).abs() < 1e-15));
        }
    }

    fn separable() -> LongTailedDataset {
        synth_gaussian(2, [1, 3, 3], 0.5, &[60, 20], 3).unwrap()
    }

    #[test]
    fn separable_data_is_learned() {
        let data = separable();
        let mut net = build_network(2, [1, 3, 3], 1, &[4], 7).unwrap();
        let mut c = config(20);
        c.lr = 0.05;
        let logs = train(&mut net, &data, &c).unwrap();
        let acc = crate::exit::predict_batch(
            &data.batch(&(0..data.len()).collect::<Vec<_>>()).0,
            &net,
            &c.policy,
        )
        .unwrap()
        .iter()
        .zip(data.labels())
        .filter(|(p, &y)| p.class == y)
        .count() as f64
            / data.len() as f64;
        assert!(acc >= 0.99, "accuracy {acc}, log {:?}", logs.last());
    }

    #[test]
    fn training_is_deterministic_and_order_invariant() {
        let data = separable();
        let mut c = config(3);
        c.policy = ExitPolicy::uniform(2, 0.9, 0.9).unwrap();
        c.drw = DrwSchedule::new(1, ClassWeights::uniform(2));
        let run = |d: &LongTailedDataset| {
            let mut net = build_network(2, [1, 3, 3], 2, &[3, 3], 5).unwrap();
            let logs = train(&mut net, d, &c).unwrap();
            (net, logs)
        };
        let (a, la) = run(&data);
        let (b, lb) = run(&data);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let reversed: Vec<usize> = (0..data.len()).rev().collect();
        let (r, _) = run(&data.subset(&reversed));
        assert_eq!(a, r);
    }

    #[test]
    fn class_mismatch_is_rejected() {
        let data = separable();
        let mut net = build_network(3, [1, 3, 3], 1, &[2], 0).unwrap();
        let mut c = config(1);
        c.drw = DrwSchedule::disabled(3);
        assert!(matches!(train(&mut net, &data, &c), Err(Error::Config(_))));
    }

    #[test]
    fn diverging_run_aborts_with_diagnostics() {
        let data = separable();
        let mut net = build_network(2, [1, 3, 3], 1, &[4], 7).unwrap();
        let mut c = config(3);
        c.lr = 1e200;
        match train(&mut net, &data, &c) {
            Err(Error::Numerical { epoch, lr, .. }) => {
                assert_eq!(epoch, 0);
                assert_eq!(lr, 1e200);
            }
            other => panic!("expected numerical abort, got {other:?}"),
        }
    }
}
