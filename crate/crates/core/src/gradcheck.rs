//! Central finite-difference checks of every analytic gradient.
//!
//! The numeric side only ever calls the non-caching evaluation paths
//! (`Layer::infer`, `ExitLoss::eval`, `MultiExitNetwork::infer_all`), so it
//! shares no code with the backward passes it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exit::{elf_loss, ExitPolicy};
use crate::layers::{softmax_row, Conv2d, Dense, Layer, LayerParams};
use crate::losses::{effective_weights, ldam_margins, ClassWeights, ExitLoss};
use crate::network::{build_network, MultiExitNetwork};
use crate::tensor::Tensor;
use crate::train::forward_backward;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub relative_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.relative_error < TOLERANCE
    }
}

/// `|a - n| / (|a| + |n|)` over whole vectors; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + STEP;
            let up = f(&probe);
            probe[i] = x[i] - STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, len)).unwrap()
}

/// Keeps values away from the relu kink so a step of `STEP` cannot cross it.
fn off_kink(t: &mut Tensor) {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
}

fn dot(a: &Tensor, b: &[f64]) -> f64 {
    a.data().iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks a layer through the scalar `sum(upstream * layer(x))` with respect
/// to its input and, if it has them, its weights and bias.
pub fn check_layer(name: &str, layer: &Layer, input: &Tensor, seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut analytic = layer.clone();
    let out = analytic.forward(input)?;
    let upstream = normal_vec(&mut rng, out.len());
    if let Some(p) = analytic.params_mut() {
        p.zero_grad();
    }
    let dx = analytic.backward(&Tensor::new(out.shape().to_vec(), upstream.clone())?)?;

    let eval = |l: &Layer, x: &Tensor| -> f64 { dot(&l.infer(x).unwrap(), &upstream) };
    let mut checks = Vec::new();
    let numeric_dx = numeric_gradient(input.data(), |v| {
        eval(layer, &Tensor::new(input.shape().to_vec(), v.to_vec()).unwrap())
    });
    checks.push(GradCheck {
        name: format!("{name} input"),
        relative_error: relative_error(dx.data(), &numeric_dx),
    });
    if let Some(p) = analytic.params() {
        let weights = layer.params().unwrap().weights.clone();
        let numeric_w = numeric_gradient(weights.data(), |v| {
            let mut l = layer.clone();
            l.params_mut().unwrap().weights.data_mut().copy_from_slice(v);
            eval(&l, input)
        });
        checks.push(GradCheck {
            name: format!("{name} weights"),
            relative_error: relative_error(p.grad_weights.data(), &numeric_w),
        });
        let bias = layer.params().unwrap().bias.clone();
        let numeric_b = numeric_gradient(bias.data(), |v| {
            let mut l = layer.clone();
            l.params_mut().unwrap().bias.data_mut().copy_from_slice(v);
            eval(&l, input)
        });
        checks.push(GradCheck {
            name: format!("{name} bias"),
            relative_error: relative_error(p.grad_bias.data(), &numeric_b),
        });
    }
    Ok(checks)
}

/// Checks a loss with respect to its logits.
pub fn check_loss(name: &str, loss: &ExitLoss, logits: &[f64], y: usize, weights: &ClassWeights) -> GradCheck {
    let analytic = loss.eval(logits, y, weights).grad;
    let numeric = numeric_gradient(logits, |z| loss.eval(z, y, weights).loss);
    GradCheck {
        name: name.to_string(),
        relative_error: relative_error(&analytic, &numeric),
    }
}

/// Batch-mean ELF loss from non-caching inference.
fn mean_elf_loss(
    net: &MultiExitNetwork,
    x: &Tensor,
    labels: &[usize],
    loss: &ExitLoss,
    weights: &ClassWeights,
    policy: &ExitPolicy,
) -> f64 {
    let logits = net.infer_all(x).unwrap();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(b, &y)| {
            let rows: Vec<&[f64]> = logits.iter().map(|z| z.item(b)).collect();
            elf_loss(&rows, y, loss, weights, policy).unwrap().total_loss
        })
        .sum();
    total / labels.len() as f64
}

/// Checks the gradient the training step accumulates for every parameter
/// tensor against finite differences of the batch-mean ELF loss.
pub fn check_network(
    net: &MultiExitNetwork,
    x: &Tensor,
    labels: &[usize],
    loss: &ExitLoss,
    weights: &ClassWeights,
    policy: &ExitPolicy,
) -> Result<Vec<GradCheck>> {
    let mut analytic = net.clone();
    forward_backward(&mut analytic, x, labels, loss, weights, policy)?;
    let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<(Vec<f64>, Vec<f64>)> = analytic
        .params()
        .map(|p| (p.grad_weights.data().to_vec(), p.grad_bias.data().to_vec()))
        .collect();
    let mut checks = Vec::new();
    for (i, name) in names.iter().enumerate() {
        for (part, analytic_grad) in [("weights", &grads[i].0), ("bias", &grads[i].1)] {
            let base = net.params().nth(i).unwrap();
            let start = if part == "weights" { base.weights.data() } else { base.bias.data() };
            let numeric = numeric_gradient(start, |v| {
                let mut probe = net.clone();
                let p = probe.params_mut().nth(i).unwrap();
                let t = if part == "weights" { &mut p.weights } else { &mut p.bias };
                t.data_mut().copy_from_slice(v);
                mean_elf_loss(&probe, x, labels, loss, weights, policy)
            });
            checks.push(GradCheck {
                name: format!("network {name}.{part}"),
                relative_error: relative_error(analytic_grad, &numeric),
            });
        }
    }
    Ok(checks)
}

fn dense(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Layer {
    Layer::Dense(Dense::new(LayerParams::new(normal(rng, &[m, n]), normal(rng, &[n]))))
}

fn conv(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Layer {
    let params = LayerParams::new(normal(rng, &[c_out, c_in, k, k]), normal(rng, &[c_out]));
    Layer::Conv(Conv2d::new(params, stride, pad))
}

/// Smallest distance from a relu kink that a finite-difference probe of the
/// micro network may come near.
const KINK_MARGIN: f64 = 1e-3;

/// A K=2, two-class network on 1x5x5 inputs with a training threshold that
/// sends half the batch out at exit 1, so both masked and unmasked paths are
/// exercised. Seeds are scanned in order until every relu input is at least
/// `KINK_MARGIN` from zero, since finite differences across a kink do not
/// estimate a derivative.
pub fn micro_network() -> Result<(MultiExitNetwork, Tensor, Vec<usize>, ExitPolicy)> {
    let labels = vec![0, 1, 0, 1, 1, 0];
    for seed in 0..1000u64 {
        let mut net = build_network(2, [1, 5, 5], 2, &[3, 4], seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Zero biases put pre-activations over all-zero receptive fields
        // exactly on the kink.
        for p in net.params_mut() {
            for b in p.bias.data_mut() {
                *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let x = normal(&mut rng, &[labels.len(), 1, 5, 5]);
        if net.relu_margin(&x)? < KINK_MARGIN {
            continue;
        }
        let logits = net.infer_all(&x)?;
        let mut conf: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(b, &y)| softmax_row(logits[0].item(b))[y])
            .collect();
        conf.sort_by(f64::total_cmp);
        let mid = conf.len() / 2;
        if conf[mid] - conf[mid - 1] < 1e-3 {
            continue;
        }
        let t = 0.5 * (conf[mid - 1] + conf[mid]);
        return Ok((net, x, labels, ExitPolicy::uniform(2, t, 1.0)?));
    }
    Err(Error::State("no micro network seed clears the relu kinks".into()))
}

/// Every layer, every loss and the end-to-end ELF loss.
pub fn standard_suite() -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checks = Vec::new();

    let x = normal(&mut rng, &[3, 7]);
    checks.extend(check_layer("dense", &dense(&mut rng, 7, 5), &x, 1)?);
    for (stride, pad, hw) in [(1, 0, 5), (1, 1, 5), (2, 1, 5), (2, 0, 7)] {
        let layer = conv(&mut rng, 2, 3, 3, stride, pad);
        let x = normal(&mut rng, &[2, 2, hw, hw]);
        let name = format!("conv2d stride {stride} pad {pad}");
        checks.extend(check_layer(&name, &layer, &x, 2)?);
    }
    let mut x = normal(&mut rng, &[2, 3, 4, 4]);
    off_kink(&mut x);
    checks.extend(check_layer("relu", &Layer::relu(), &x, 3)?);
    let x = normal(&mut rng, &[2, 3, 4, 4]);
    checks.extend(check_layer("avg_pool", &Layer::avg_pool(), &x, 4)?);

    let counts = [400, 120, 40, 12, 4];
    let weights = ClassWeights::uniform(5);
    let skewed = effective_weights(&counts, 0.999)?;
    let margins = ldam_margins(&counts, 0.5)?;
    let losses = [
        ("weighted_ce", ExitLoss::CrossEntropy),
        ("focal gamma 0", ExitLoss::Focal { gamma: 0.0 }),
        ("focal gamma 0.5", ExitLoss::Focal { gamma: 0.5 }),
        ("ldam", ExitLoss::Ldam { margins }),
    ];
    for (name, loss) in &losses {
        for (w_name, w) in [("uniform", &weights), ("effective", &skewed)] {
            for y in [0, 4] {
                let z = normal_vec(&mut rng, 5);
                checks.push(check_loss(&format!("{name} {w_name} y={y}"), loss, &z, y, w));
            }
        }
    }

    let (net, x, labels, policy) = micro_network()?;
    let two = effective_weights(&[50, 5], 0.99)?;
    let end_to_end = [
        ("weighted_ce", ExitLoss::CrossEntropy),
        ("focal gamma 0.5", ExitLoss::Focal { gamma: 0.5 }),
        ("ldam", ExitLoss::Ldam { margins: ldam_margins(&[50, 5], 0.5)? }),
    ];
    for (name, loss) in &end_to_end {
        for mut c in check_network(&net, &x, &labels, loss, &two, &policy)? {
            c.name = format!("elf {name} {}", c.name);
            checks.push(c);
        }
    }
    Ok(checks)
}
