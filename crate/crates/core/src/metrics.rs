//! FLOP accounting, accuracy-FLOP curves, split accuracy, per-exit loss
//! statistics and confidence histograms, plus their CSV forms.
//!
//! Everything here is read-only over the network and dataset. Evaluation can
//! be sharded over threads; shards are contiguous example ranges merged back
//! in order, and per-example results do not depend on batch composition, so
//! the output is identical for any thread count.

use std::io::Write;

use crate::data::{LongTailedDataset, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::exit::{argmax, elf_loss, predict_batch, ExitPolicy, Prediction};
use crate::layers::softmax_row;
use crate::losses::{ClassWeights, ExitLoss};
use crate::network::{FlopTable, MultiExitNetwork};

/// Examples per inference batch.
const EVAL_CHUNK: usize = 256;

/// Worker count from `ELF_THREADS`, defaulting to 1.
pub fn threads_from_env() -> usize {
    std::env::var("ELF_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs `f` over contiguous shards of `0..n` and concatenates the results in
/// shard order.
fn sharded<T, F>(n: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> Result<Vec<T>> + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return f(0..n);
    }
    let per = n.div_ceil(threads);
    let ranges: Vec<_> = (0..threads)
        .map(|t| (t * per).min(n)..((t + 1) * per).min(n))
        .collect();
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .into_iter()
            .map(|r| {
                let f = &f;
                scope.spawn(move || f(r))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

fn check_classes(net: &MultiExitNetwork, ds: &LongTailedDataset) -> Result<()> {
    if net.classes() != ds.classes() {
        return Err(Error::config(format!(
            "dataset has {} classes, network has {}",
            ds.classes(),
            net.classes()
        )));
    }
    Ok(())
}

/// Early-exit predictions for every example, in dataset order.
pub fn predict_dataset(
    net: &MultiExitNetwork,
    ds: &LongTailedDataset,
    policy: &ExitPolicy,
    threads: usize,
) -> Result<Vec<Prediction>> {
    check_classes(net, ds)?;
    sharded(ds.len(), threads, |range| {
        let items: Vec<usize> = range.collect();
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(EVAL_CHUNK) {
            let (x, _) = ds.batch(chunk);
            out.extend(predict_batch(&x, net, policy)?);
        }
        Ok(out)
    })
}

/// Logits of every exit for every example: `result[i][k]`.
fn all_exit_logits(
    net: &MultiExitNetwork,
    ds: &LongTailedDataset,
    threads: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    check_classes(net, ds)?;
    sharded(ds.len(), threads, |range| {
        let items: Vec<usize> = range.collect();
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(EVAL_CHUNK) {
            let (x, _) = ds.batch(chunk);
            let logits = net.infer_all(&x)?;
            for b in 0..chunk.len() {
                out.push(logits.iter().map(|z| z.item(b).to_vec()).collect());
            }
        }
        Ok(out)
    })
}

/// Argmax of the final exit for every example, with no early exiting.
pub fn final_exit_predictions(
    net: &MultiExitNetwork,
    ds: &LongTailedDataset,
    threads: usize,
) -> Result<Vec<usize>> {
    let logits = all_exit_logits(net, ds, threads)?;
    Ok(logits.iter().map(|z| argmax(z.last().unwrap())).collect())
}

pub fn flops_of(net: &MultiExitNetwork) -> FlopTable {
    net.flop_table().clone()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub per_exit_cumulative_flops: Vec<u64>,
    pub mean_flops_per_example: f64,
    pub baseline_flops: u64,
    /// Signed percentage: `100 * (mean / baseline - 1)`.
    pub relative_to_baseline: f64,
}

pub fn relative_flops(mean: f64, baseline: u64) -> f64 {
    100.0 * (mean / baseline as f64 - 1.0)
}

/// Mean cost of a set of predictions against the no-early-exit baseline of
/// the same network.
pub fn flops_report(net: &MultiExitNetwork, predictions: &[Prediction]) -> FlopsReport {
    let table = net.flop_table();
    let mean = mean_flops(predictions);
    FlopsReport {
        per_exit_cumulative_flops: table.cumulative.clone(),
        mean_flops_per_example: mean,
        baseline_flops: table.baseline(),
        relative_to_baseline: relative_flops(mean, table.baseline()),
    }
}

fn mean_flops(predictions: &[Prediction]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let total: u64 = predictions.iter().map(|p| p.trace.flops).sum();
    total as f64 / predictions.len() as f64
}

fn top1(predicted: impl Iterator<Item = (usize, usize)>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, y) in predicted {
        n += 1;
        hit += usize::from(p == y);
    }
    if n == 0 {
        0.0
    } else {
        100.0 * hit as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub s: f64,
    pub top1: f64,
    pub mean_flops: f64,
    pub exit_histogram: Vec<usize>,
}

/// One point per inference threshold, each evaluated with true early
/// termination and the same threshold at every exit.
pub fn accuracy_flop_curve(
    net: &MultiExitNetwork,
    ds: &LongTailedDataset,
    s_grid: &[f64],
    threads: usize,
) -> Result<Vec<CurvePoint>> {
    if s_grid.is_empty() {
        return Err(Error::config("threshold grid is empty"));
    }
    s_grid
        .iter()
        .map(|&s| {
            let policy = ExitPolicy::uniform(net.exits(), 1.0, s)?;
            let preds = predict_dataset(net, ds, &policy, threads)?;
            Ok(curve_point(s, &preds, ds.labels(), net.exits()))
        })
        .collect()
}

pub fn curve_point(s: f64, preds: &[Prediction], labels: &[usize], exits: usize) -> CurvePoint {
    let mut exit_histogram = vec![0; exits];
    for p in preds {
        exit_histogram[p.trace.exit - 1] += 1;
    }
    CurvePoint {
        s,
        top1: top1(preds.iter().map(|p| p.class).zip(labels.iter().copied())),
        mean_flops: mean_flops(preds),
        exit_histogram,
    }
}

/// Highest-accuracy point; the earliest wins ties.
pub fn best_point(curve: &[CurvePoint]) -> Option<&CurvePoint> {
    curve.iter().reduce(|best, p| if p.top1 > best.top1 { p } else { best })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitScore {
    pub split: Split,
    pub classes: usize,
    /// `None` when the split has no classes.
    pub top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAccuracy {
    pub splits: Vec<SplitScore>,
    pub all: f64,
}

impl SplitAccuracy {
    pub fn get(&self, split: Split) -> Option<f64> {
        self.splits.iter().find(|s| s.split == split).and_then(|s| s.top1)
    }
}

/// Top-1 over the examples of each split's classes, plus overall top-1.
pub fn split_accuracy(
    predicted: &[usize],
    labels: &[usize],
    split: &SplitAssignment,
) -> Result<SplitAccuracy> {
    if predicted.len() != labels.len() {
        return Err(Error::Dimension {
            op: "split_accuracy",
            left: vec![predicted.len()],
            right: vec![labels.len()],
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= split.tags.len()) {
        return Err(Error::Data(format!(
            "label {y} outside the {} classes of the split assignment",
            split.tags.len()
        )));
    }
    let pairs = || predicted.iter().copied().zip(labels.iter().copied());
    let splits = Split::ALL
        .iter()
        .map(|&s| {
            let classes = split.classes_in(s).len();
            let top1 = (classes > 0).then(|| top1(pairs().filter(|&(_, y)| split.tag(y) == s)));
            SplitScore {
                split: s,
                classes,
                top1,
            }
        })
        .collect();
    Ok(SplitAccuracy {
        splits,
        all: top1(pairs()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitGroup {
    /// 1-based exit index.
    pub exit: usize,
    pub count: usize,
    /// `None` for an empty group.
    pub mean_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossStats {
    pub groups: Vec<ExitGroup>,
    /// Means strictly increase across non-empty groups.
    pub increasing: bool,
}

/// Groups examples by their training exit and averages the total ELF loss in
/// each group.
pub fn per_exit_loss_stats(
    net: &MultiExitNetwork,
    ds: &LongTailedDataset,
    loss: &ExitLoss,
    weights: &ClassWeights,
    policy: &ExitPolicy,
    threads: usize,
) -> Result<LossStats> {
    let logits = all_exit_logits(net, ds, threads)?;
    let k_total = net.exits();
    let mut sums = vec![0.0; k_total];
    let mut counts = vec![0usize; k_total];
    for (z, &y) in logits.iter().zip(ds.labels()) {
        let rows: Vec<&[f64]> = z.iter().map(|r| r.as_slice()).collect();
        let out = elf_loss(&rows, y, loss, weights, policy)?;
        sums[out.trace.exit - 1] += out.total_loss;
        counts[out.trace.exit - 1] += 1;
    }
    let groups: Vec<ExitGroup> = (0..k_total)
        .map(|k| ExitGroup {
            exit: k + 1,
            count: counts[k],
            mean_loss: (counts[k] > 0).then(|| sums[k] / counts[k] as f64),
        })
        .collect();
    let means: Vec<f64> = groups.iter().filter_map(|g| g.mean_loss).collect();
    let increasing = means.windows(2).all(|w| w[0] < w[1]);
    Ok(LossStats { groups, increasing })
}

/// Proportion of examples from `class_subset` whose final-exit probability
/// of the true class falls in each of `bins` equal-width bins over [0, 1].
pub fn confidence_histogram(
    net: &MultiExitNetwork,
    ds: &LongTailedDataset,
    class_subset: &[usize],
    bins: usize,
    threads: usize,
) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::config("confidence histogram needs at least 2 bins"));
    }
    check_classes(net, ds)?;
    let items: Vec<usize> = (0..ds.len())
        .filter(|&i| class_subset.contains(&ds.label(i)))
        .collect();
    if items.is_empty() {
        return Err(Error::Data("no examples in the class subset".into()));
    }
    let subset = ds.subset(&items);
    let logits = all_exit_logits(net, &subset, threads)?;
    let mut hist = vec![0.0; bins];
    for (z, &y) in logits.iter().zip(subset.labels()) {
        let p = softmax_row(z.last().unwrap())[y];
        hist[confidence_bin(p, bins)] += 1.0;
    }
    let n = items.len() as f64;
    Ok(hist.into_iter().map(|c| c / n).collect())
}

/// `floor(p * bins)`, with p = 1 folded into the top bin.
pub fn confidence_bin(p: f64, bins: usize) -> usize {
    ((p * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Formats like C's `%g` with 6 significant digits.
pub fn fmt_g(x: f64) -> String {
    const PRECISION: i32 = 6;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    // The exponent after rounding to the target precision decides the style.
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if !(-4..PRECISION).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (PRECISION - 1 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_curve_csv<W: Write>(out: &mut W, curve: &[CurvePoint]) -> Result<()> {
    let exits = curve.first().map_or(0, |p| p.exit_histogram.len());
    let mut header = String::from("s,top1,mean_flops");
    for k in 1..=exits {
        header.push_str(&format!(",exit_{k}"));
    }
    writeln!(out, "{header}")?;
    for p in curve {
        write!(out, "{},{},{}", fmt_g(p.s), fmt_g(p.top1), fmt_g(p.mean_flops))?;
        for c in &p.exit_histogram {
            write!(out, ",{c}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Absent splits are written with an empty `top1` field.
pub fn write_splits_csv<W: Write>(out: &mut W, acc: &SplitAccuracy) -> Result<()> {
    writeln!(out, "split,classes,top1")?;
    for s in &acc.splits {
        let top1 = s.top1.map(fmt_g).unwrap_or_default();
        writeln!(out, "{},{},{}", s.split, s.classes, top1)?;
    }
    let total: usize = acc.splits.iter().map(|s| s.classes).sum();
    writeln!(out, "all,{total},{}", fmt_g(acc.all))?;
    Ok(())
}

pub fn write_property1_csv<W: Write>(out: &mut W, stats: &LossStats) -> Result<()> {
    writeln!(out, "exit,count,mean_loss")?;
    for g in &stats.groups {
        let mean = g.mean_loss.map(fmt_g).unwrap_or_default();
        writeln!(out, "{},{},{}", g.exit, g.count, mean)?;
    }
    Ok(())
}

pub fn write_histogram_csv<W: Write>(out: &mut W, subsets: &[(String, Vec<f64>)]) -> Result<()> {
    writeln!(out, "subset,bin_lo,bin_hi,proportion")?;
    for (name, hist) in subsets {
        let bins = hist.len() as f64;
        for (b, p) in hist.iter().enumerate() {
            writeln!(
                out,
                "{name},{},{},{}",
                fmt_g(b as f64 / bins),
                fmt_g((b + 1) as f64 / bins),
                fmt_g(*p)
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussian;
    use crate::network::build_network;

    fn net_and_data() -> (MultiExitNetwork, LongTailedDataset) {
        let net = build_network(3, [1, 5, 5], 3, &[4, 6, 8], 7).unwrap();
        let ds = synth_gaussian(3, [1, 5, 5], 1.0, &[20, 20, 20], 3).unwrap();
        (net, ds)
    }

    #[test]
    fn fmt_g_matches_printf() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (100.0, "100"),
            (0.1, "0.1"),
            (1.0 / 3.0, "0.333333"),
            (2.0 / 3.0, "0.666667"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (999999.5, "1e+06"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-2.5, "-2.5"),
            (33.333333333, "33.3333"),
            (1404704.0, "1.4047e+06"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_g(x), want, "{x}");
        }
    }

    #[test]
    fn layer_flop_counts() {
        use crate::layers::{conv_flops, dense_flops};
        assert_eq!(dense_flops(10, 5), 100);
        assert_eq!(conv_flops(3, 1, 4, 8, 8), 4608);
    }

    #[test]
    fn relative_flops_convention() {
        assert_eq!(relative_flops(100.0, 100), 0.0);
        assert_eq!(relative_flops(50.0, 100), -50.0);
    }

    #[test]
    fn split_accuracy_examples() {
        let split = SplitAssignment::from_counts(&[150, 50, 5]);
        let labels = [0, 0, 1, 1, 2, 2];
        let acc = split_accuracy(&labels, &labels, &split).unwrap();
        assert_eq!(acc.get(Split::Many), Some(100.0));
        assert_eq!(acc.get(Split::Medium), Some(100.0));
        assert_eq!(acc.get(Split::Few), Some(100.0));
        assert_eq!(acc.all, 100.0);

        let only_head = [0, 0, 0, 0, 0, 0];
        let acc = split_accuracy(&only_head, &labels, &split).unwrap();
        assert_eq!(acc.get(Split::Many), Some(100.0));
        assert_eq!(acc.get(Split::Medium), Some(0.0));
        assert_eq!(acc.get(Split::Few), Some(0.0));
        assert!((acc.all - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_split_is_absent() {
        let split = SplitAssignment::from_counts(&[500, 200]);
        let acc = split_accuracy(&[0, 1], &[0, 1], &split).unwrap();
        assert_eq!(acc.get(Split::Few), None);
        assert_eq!(acc.splits[2].classes, 0);
        let mut csv = Vec::new();
        write_splits_csv(&mut csv, &acc).unwrap();
        assert_eq!(
            String::from_utf8(csv).unwrap(),
            "split,classes,top1\nmany,2,100\nmedium,0,\nfew,0,\nall,2,100\n"
        );
    }

    #[test]
    fn all_is_count_weighted_mean_of_class_accuracy() {
        let split = SplitAssignment::from_counts(&[300, 50, 10, 10]);
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        let pred = [0, 1, 1, 1, 0, 2, 3, 0];
        let acc = split_accuracy(&pred, &labels, &split).unwrap();
        let per_class = [50.0, 100.0, 50.0, 50.0];
        assert!((acc.all - per_class.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn curve_extremes_and_monotone_flops() {
        let (net, ds) = net_and_data();
        let table = flops_of(&net);
        let curve = accuracy_flop_curve(&net, &ds, &[0.0, 0.4, 0.6, 0.8, 1.0], 1).unwrap();
        assert_eq!(curve[0].exit_histogram, vec![60, 0, 0]);
        assert_eq!(curve[0].mean_flops, table.cumulative[0] as f64);
        assert_eq!(curve[4].exit_histogram, vec![0, 0, 60]);
        assert_eq!(curve[4].mean_flops, table.baseline() as f64);
        for w in curve.windows(2) {
            assert!(w[0].mean_flops <= w[1].mean_flops);
        }
        for p in &curve {
            assert_eq!(p.exit_histogram.iter().sum::<usize>(), 60);
        }
        let plain = final_exit_predictions(&net, &ds, 1).unwrap();
        let full = predict_dataset(&net, &ds, &ExitPolicy::uniform(3, 1.0, 1.0).unwrap(), 1).unwrap();
        let logits = all_exit_logits(&net, &ds, 1).unwrap();
        for ((p, &c), z) in full.iter().zip(&plain).zip(&logits) {
            assert_eq!(p.class, c);
            assert_eq!(p.probs, softmax_row(&z[2]));
        }
        assert!(accuracy_flop_curve(&net, &ds, &[], 1).is_err());
    }

    #[test]
    fn predicted_flops_equal_cumulative_table() {
        let (net, ds) = net_and_data();
        let preds = predict_dataset(&net, &ds, &ExitPolicy::uniform(3, 1.0, 0.45).unwrap(), 1).unwrap();
        let table = flops_of(&net);
        for p in &preds {
            assert_eq!(p.trace.flops, table.cumulative[p.trace.exit - 1]);
        }
        let report = flops_report(&net, &preds);
        let baseline = report.baseline_flops as f64;
        let expect = 100.0 * (report.mean_flops_per_example / baseline - 1.0);
        assert_eq!(report.relative_to_baseline, expect);
    }

    #[test]
    fn sharding_does_not_change_results() {
        let (net, ds) = net_and_data();
        let policy = ExitPolicy::uniform(3, 1.0, 0.5).unwrap();
        let one = predict_dataset(&net, &ds, &policy, 1).unwrap();
        for threads in [2, 3, 7, 100] {
            assert_eq!(predict_dataset(&net, &ds, &policy, threads).unwrap(), one);
        }
    }

    #[test]
    fn loss_stats_degenerate_cases() {
        let (net, ds) = net_and_data();
        let w = ClassWeights::uniform(3);
        let never = ExitPolicy::uniform(3, 1.0, 1.0).unwrap();
        let stats = per_exit_loss_stats(&net, &ds, &ExitLoss::CrossEntropy, &w, &never, 1).unwrap();
        assert_eq!(stats.groups[2].count, 60);
        assert_eq!(stats.groups[0].mean_loss, None);
        assert!(stats.increasing);

        let single = build_network(3, [1, 5, 5], 1, &[4, 6, 8], 7).unwrap();
        let p = ExitPolicy::uniform(1, 0.9, 0.9).unwrap();
        let stats = per_exit_loss_stats(&single, &ds, &ExitLoss::CrossEntropy, &w, &p, 1).unwrap();
        assert_eq!(stats.groups.len(), 1);
        assert!(stats.increasing);
    }

    #[test]
    fn histogram_sums_to_one() {
        let (net, ds) = net_and_data();
        let h = confidence_histogram(&net, &ds, &[0, 2], 10, 1).unwrap();
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(confidence_histogram(&net, &ds, &[0], 1, 1).is_err());
    }

    #[test]
    fn histogram_of_uniform_output_lands_in_tenth_bin() {
        // Zero weights give zero logits at every exit.
        let (mut net, _) = net_and_data();
        for p in net.params_mut() {
            p.weights.fill(0.0);
        }
        let ds = synth_gaussian(3, [1, 5, 5], 1.0, &[5, 5, 5], 0).unwrap();
        let h = confidence_histogram(&net, &ds, &[0, 1, 2], 3, 1).unwrap();
        assert_eq!(h, vec![0.0, 1.0, 0.0]);
        assert_eq!(confidence_bin(0.1, 10), 1);
        assert_eq!(confidence_bin(1.0, 10), 9);
        assert_eq!(confidence_bin(0.0, 10), 0);
    }

    #[test]
    fn csv_schemas() {
        let curve = vec![CurvePoint {
            s: 0.5,
            top1: 2.0 / 3.0 * 100.0,
            mean_flops: 1234.5,
            exit_histogram: vec![3, 1],
        }];
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &curve).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "s,top1,mean_flops,exit_1,exit_2\n0.5,66.6667,1234.5,3,1\n"
        );
        let stats = LossStats {
            groups: vec![
                ExitGroup { exit: 1, count: 2, mean_loss: Some(0.25) },
                ExitGroup { exit: 2, count: 0, mean_loss: None },
            ],
            increasing: true,
        };
        let mut buf = Vec::new();
        write_property1_csv(&mut buf, &stats).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "exit,count,mean_loss\n1,2,0.25\n2,0,\n");
        let mut buf = Vec::new();
        write_histogram_csv(&mut buf, &[("few".into(), vec![0.25, 0.75])]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "subset,bin_lo,bin_hi,proportion\nfew,0,0.5,0.25\nfew,0.5,1,0.75\n"
        );
    }

    #[test]
    fn best_point_prefers_earliest_tie() {
        let point = |s: f64, top1: f64| CurvePoint {
            s,
            top1,
            mean_flops: 0.0,
            exit_histogram: vec![],
        };
        let curve = [point(0.5, 80.0), point(0.6, 90.0), point(0.7, 90.0)];
        assert_eq!(best_point(&curve).unwrap().s, 0.6);
    }
}
