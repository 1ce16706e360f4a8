use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use elf::data::{
    load_dataset, longtail_counts, make_longtail, save_dataset, split_classes, GaussianSource,
    LongTailedDataset, Split,
};
use elf::exit::ExitPolicy;
use elf::losses::{effective_weights, ldam_margins, ClassWeights, DrwSchedule, ExitLoss};
use elf::metrics::{
    accuracy_flop_curve, best_point, confidence_histogram, curve_point, flops_report, fmt_g,
    per_exit_loss_stats, predict_dataset, split_accuracy, threads_from_env, write_curve_csv,
    write_histogram_csv, write_property1_csv, write_splits_csv, CurvePoint, LossStats,
    SplitAccuracy,
};
use elf::network::{build_network, load_checkpoint, save_checkpoint, MultiExitNetwork};
use elf::train::{train as run_training, EpochLog, TrainConfig};
use serde_json::{json, Value};

use crate::args::{
    Auto, DecaySpec, DrwSpec, EvalArgs, GenDataArgs, GridSpec, LossArgs, LossKind, ReportArgs,
    SweepArgs, TrainArgs, WeightKind,
};
use crate::CliError;

pub const TRAIN_FILE: &str = "train.elfd";
pub const EVAL_FILE: &str = "eval.elfd";
pub const MODEL_FILE: &str = "model.elfc";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

/// Noise streams of the generator; train and eval never share samples.
const TRAIN_STREAM: u64 = 0;
const EVAL_STREAM: u64 = 1;

fn timestamp_line(no_timestamp: bool) -> Option<String> {
    (!no_timestamp).then(|| format!("# generated {}", chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ")))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

/// Writes a text output, prefixed by the timestamp line unless suppressed.
fn write_text<F>(path: &Path, no_timestamp: bool, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> elf::Result<()>,
{
    let mut out = create(path)?;
    if let Some(line) = timestamp_line(no_timestamp) {
        writeln!(out, "{line}").map_err(|e| CliError::io(path, e))?;
    }
    body(&mut out)?;
    out.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// Attaches the path to bare I/O errors from the core loaders.
fn with_path<T>(path: &Path, r: elf::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| match e {
        elf::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    })
}

pub fn read_dataset(path: &Path) -> Result<LongTailedDataset, CliError> {
    with_path(path, load_dataset(path))
}

pub fn read_model(path: &Path) -> Result<MultiExitNetwork, CliError> {
    with_path(path, load_checkpoint(path))
}

pub struct Generated {
    pub train: LongTailedDataset,
    pub eval: LongTailedDataset,
}

/// Balanced source of `n` per class, subsampled to the long-tailed training
/// set, plus an independently drawn balanced evaluation set.
pub fn generate(args: &GenDataArgs) -> Result<Generated, CliError> {
    if !(args.ratio >= 1.0 && args.ratio.is_finite()) {
        return Err(CliError::Usage(format!("--ratio must be >= 1, got {}", args.ratio)));
    }
    longtail_counts(args.n, args.classes, args.ratio)?;
    let source = GaussianSource::new(args.classes, args.dims.0, args.sigma, args.seed)?;
    let balanced = source.sample(&vec![args.n; args.classes], TRAIN_STREAM)?;
    let train = make_longtail(&balanced, args.ratio, args.seed)?;
    let eval = source.sample(&vec![args.eval_per_class; args.classes], EVAL_STREAM)?;
    Ok(Generated { train, eval })
}

pub fn gen_data(args: &GenDataArgs) -> Result<Generated, CliError> {
    let data = generate(args)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    for (name, ds) in [(TRAIN_FILE, &data.train), (EVAL_FILE, &data.eval)] {
        let path = args.out.join(name);
        with_path(&path, save_dataset(ds, &path))?;
        println!(
            "{}: {} examples, class counts {:?}",
            path.display(),
            ds.len(),
            ds.class_counts()
        );
    }
    println!("train imbalance ratio {}", fmt_g(data.train.imbalance_ratio()));
    Ok(data)
}

/// Training threshold: explicit, or 0.9 for ce/focal and 2/c for ldam.
pub fn train_threshold(args: &LossArgs, classes: usize) -> f64 {
    match args.train_threshold {
        Auto::Value(t) => t,
        Auto::Auto => match args.loss {
            LossKind::Ce | LossKind::Focal => 0.9,
            LossKind::Ldam => 2.0 / classes as f64,
        },
    }
}

pub fn exit_loss(args: &LossArgs, counts: &[usize]) -> Result<ExitLoss, CliError> {
    Ok(match args.loss {
        LossKind::Ce => ExitLoss::CrossEntropy,
        LossKind::Focal => {
            if !(args.gamma >= 0.0) {
                return Err(CliError::Usage(format!("--gamma must be >= 0, got {}", args.gamma)));
            }
            ExitLoss::Focal { gamma: args.gamma }
        }
        LossKind::Ldam => ExitLoss::Ldam {
            margins: ldam_margins(counts, args.max_margin)?,
        },
    })
}

fn auto_epoch(epochs: usize, fraction: f64) -> usize {
    (epochs as f64 * fraction).floor() as usize
}

/// Resolves every `auto` flag against the training set.
pub fn train_config(args: &TrainArgs, data: &LongTailedDataset) -> Result<TrainConfig, CliError> {
    let counts = data.class_counts();
    let classes = data.classes();
    let t = train_threshold(&args.loss, classes);
    let lr_decay = match &args.lr_decay {
        DecaySpec::Auto => vec![
            (auto_epoch(args.epochs, 0.8), 0.01),
            (auto_epoch(args.epochs, 0.9), 0.01),
        ],
        DecaySpec::Steps(steps) => steps.clone(),
    };
    let drw_epoch = match args.drw_epoch {
        DrwSpec::Auto => Some(auto_epoch(args.epochs, 0.8)),
        DrwSpec::Disabled => None,
        DrwSpec::Epoch(e) => Some(e),
    };
    let drw = match drw_epoch {
        Some(e) => DrwSchedule::new(e, effective_weights(&counts, args.loss.beta)?),
        None => DrwSchedule::disabled(classes),
    };
    Ok(TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        lr: args.lr,
        lr_decay,
        warmup_epochs: args.warmup,
        weight_decay: args.wd,
        momentum: args.momentum,
        seed: args.seed,
        loss: exit_loss(&args.loss, &counts)?,
        drw,
        policy: ExitPolicy::uniform(args.exits, t, t)?,
    })
}

pub struct Trained {
    pub net: MultiExitNetwork,
    pub config: TrainConfig,
    pub logs: Vec<EpochLog>,
}

/// Trains on an in-memory dataset without touching the filesystem.
pub fn train_on(args: &TrainArgs, data: &LongTailedDataset) -> Result<Trained, CliError> {
    let config = train_config(args, data)?;
    config.validate()?;
    let mut net = build_network(data.classes(), data.dims(), args.exits, &args.widths, args.seed)?;
    let logs = run_training(&mut net, data, &config)?;
    Ok(Trained { net, config, logs })
}

pub fn write_train_log<W: Write>(out: &mut W, logs: &[EpochLog]) -> elf::Result<()> {
    let exits = logs.first().map_or(0, |l| l.exit_histogram.len());
    let mut header = String::from("epoch,lr");
    for k in 1..=exits {
        header.push_str(&format!(",loss_exit_{k}"));
    }
    header.push_str(",elf_loss");
    for k in 1..=exits {
        header.push_str(&format!(",exit_{k}"));
    }
    header.push_str(",train_top1");
    writeln!(out, "{header}")?;
    for log in logs {
        write!(out, "{},{}", log.epoch, fmt_g(log.lr))?;
        for l in &log.mean_exit_loss {
            write!(out, ",{}", fmt_g(*l))?;
        }
        write!(out, ",{}", fmt_g(log.mean_elf_loss))?;
        for c in &log.exit_histogram {
            write!(out, ",{c}")?;
        }
        writeln!(out, ",{}", fmt_g(log.train_top1))?;
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<Trained, CliError> {
    let data = read_dataset(&args.data)?;
    let trained = train_on(args, &data)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let model = args.out.join(MODEL_FILE);
    with_path(&model, save_checkpoint(&trained.net, &model))?;
    write_text(&args.out.join(TRAIN_LOG_FILE), args.common.no_timestamp, |w| {
        write_train_log(w, &trained.logs)
    })?;
    if let Some(last) = trained.logs.last() {
        println!(
            "trained {} epochs: elf loss {}, exit histogram {:?}, train top1 {}",
            trained.logs.len(),
            fmt_g(last.mean_elf_loss),
            last.exit_histogram,
            fmt_g(last.train_top1)
        );
    }
    Ok(trained)
}

pub struct Evaluation {
    pub splits: SplitAccuracy,
    pub curve: CurvePoint,
    pub report: elf::metrics::FlopsReport,
    pub property1: LossStats,
    /// `(subset name, proportions)` on the training set.
    pub histograms: Vec<(String, Vec<f64>)>,
    pub predictions: Vec<elf::exit::Prediction>,
    pub infer_threshold: f64,
}

/// All evaluation metrics from in-memory data.
pub fn evaluate(
    args: &EvalArgs,
    net: &MultiExitNetwork,
    eval: &LongTailedDataset,
    train: &LongTailedDataset,
) -> Result<Evaluation, CliError> {
    for (name, ds) in [("evaluation", eval), ("training", train)] {
        if ds.classes() != net.classes() {
            return Err(CliError::Usage(format!(
                "{name} set has {} classes but the checkpoint has {}",
                ds.classes(),
                net.classes()
            )));
        }
    }
    let threads = threads_from_env();
    let counts = train.class_counts();
    let t = train_threshold(&args.loss, net.classes());
    let s = match args.infer_threshold {
        Auto::Auto => t,
        Auto::Value(s) => s,
    };
    let policy = ExitPolicy::uniform(net.exits(), t, s)?;
    let predictions = predict_dataset(net, eval, &policy, threads)?;
    let predicted: Vec<usize> = predictions.iter().map(|p| p.class).collect();
    let assignment = split_classes(train);
    let splits = split_accuracy(&predicted, eval.labels(), &assignment)?;
    let curve = curve_point(s, &predictions, eval.labels(), net.exits());
    let report = flops_report(net, &predictions);

    let weights = match args.class_weights {
        WeightKind::Uniform => ClassWeights::uniform(net.classes()),
        WeightKind::Effective => effective_weights(&counts, args.loss.beta)?,
    };
    let loss = exit_loss(&args.loss, &counts)?;
    let property1 = per_exit_loss_stats(net, train, &loss, &weights, &policy, threads)?;

    let mut histograms = Vec::new();
    for split in Split::ALL {
        let classes = assignment.classes_in(split);
        if !classes.is_empty() {
            let h = confidence_histogram(net, train, &classes, args.bins, threads)?;
            histograms.push((split.name().to_string(), h));
        }
    }
    let all: Vec<usize> = (0..net.classes()).collect();
    histograms.push(("all".into(), confidence_histogram(net, train, &all, args.bins, threads)?));
    Ok(Evaluation {
        splits,
        curve,
        report,
        property1,
        histograms,
        predictions,
        infer_threshold: s,
    })
}

pub fn summary_json(ev: &Evaluation, no_timestamp: bool) -> Value {
    let mut top1 = serde_json::Map::new();
    let mut classes = serde_json::Map::new();
    for s in &ev.splits.splits {
        top1.insert(s.split.name().into(), json!(s.top1));
        classes.insert(s.split.name().into(), json!(s.classes));
    }
    top1.insert("all".into(), json!(ev.splits.all));
    let groups: Vec<Value> = ev
        .property1
        .groups
        .iter()
        .map(|g| json!({"exit": g.exit, "count": g.count, "mean_loss": g.mean_loss}))
        .collect();
    let mut summary = json!({
        "top1": top1,
        "split_classes": classes,
        "infer_threshold": ev.infer_threshold,
        "exit_histogram": ev.curve.exit_histogram,
        "mean_flops": ev.report.mean_flops_per_example,
        "baseline_flops": ev.report.baseline_flops,
        "relative_flops": ev.report.relative_to_baseline,
        "per_exit_cumulative_flops": ev.report.per_exit_cumulative_flops,
        "property1": {"increasing": ev.property1.increasing, "groups": groups},
    });
    if let Some(line) = timestamp_line(no_timestamp) {
        summary["generated"] = json!(line.trim_start_matches("# generated "));
    }
    summary
}

pub fn eval(args: &EvalArgs) -> Result<Evaluation, CliError> {
    let net = read_model(&args.model)?;
    let eval_set = read_dataset(&args.data)?;
    let train_set = read_dataset(&args.train_data)?;
    let ev = evaluate(args, &net, &eval_set, &train_set)?;
    let no_ts = args.common.no_timestamp;
    let out = &args.out;
    write_text(&out.join("splits.csv"), no_ts, |w| write_splits_csv(w, &ev.splits))?;
    write_text(&out.join("property1.csv"), no_ts, |w| write_property1_csv(w, &ev.property1))?;
    write_text(&out.join("histogram.csv"), no_ts, |w| write_histogram_csv(w, &ev.histograms))?;
    write_text(&out.join("exits.csv"), no_ts, |w| {
        writeln!(w, "index,label,prediction,exit,flops")?;
        for (i, (p, y)) in ev.predictions.iter().zip(eval_set.labels()).enumerate() {
            writeln!(w, "{i},{y},{},{},{}", p.class, p.trace.exit, p.trace.flops)?;
        }
        Ok(())
    })?;
    let path = out.join("summary.json");
    let mut w = create(&path)?;
    let text = serde_json::to_string_pretty(&summary_json(&ev, no_ts)).expect("summary serializes");
    writeln!(w, "{text}").and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))?;
    println!(
        "top1 all {} many {} medium {} few {}; mean flops {} ({}% vs baseline)",
        fmt_g(ev.splits.all),
        split_text(ev.splits.get(Split::Many)),
        split_text(ev.splits.get(Split::Medium)),
        split_text(ev.splits.get(Split::Few)),
        fmt_g(ev.report.mean_flops_per_example),
        fmt_g(ev.report.relative_to_baseline)
    );
    Ok(ev)
}

fn split_text(v: Option<f64>) -> String {
    v.map(fmt_g).unwrap_or_else(|| "absent".into())
}

/// `0.5, 0.55, ..., 0.95` for ce/focal; `{1.5, ..., 1.75} / c` for ldam.
pub fn default_grid(loss: LossKind, classes: usize) -> Vec<f64> {
    match loss {
        LossKind::Ce | LossKind::Focal => (10..=19).map(|i| i as f64 * 0.05).collect(),
        LossKind::Ldam => (30..=35).map(|i| i as f64 * 0.05 / classes as f64).collect(),
    }
}

pub fn sweep(args: &SweepArgs) -> Result<Vec<CurvePoint>, CliError> {
    let net = read_model(&args.model)?;
    let data = read_dataset(&args.data)?;
    let grid = match &args.grid {
        GridSpec::Auto => default_grid(args.loss, net.classes()),
        GridSpec::Values(v) if v.is_empty() => {
            return Err(CliError::Usage("--grid is empty".into()));
        }
        GridSpec::Values(v) => v.clone(),
    };
    let curve = accuracy_flop_curve(&net, &data, &grid, threads_from_env())?;
    write_text(&args.out.join("curve.csv"), args.common.no_timestamp, |w| {
        write_curve_csv(w, &curve)
    })?;
    if let Some(best) = best_point(&curve) {
        println!(
            "best s {}: top1 {}, mean flops {}",
            fmt_g(best.s),
            fmt_g(best.top1),
            fmt_g(best.mean_flops)
        );
    }
    Ok(curve)
}

/// Markdown table with one row per summary.
pub fn report(args: &ReportArgs) -> Result<String, CliError> {
    let mut table = String::from(
        "| run | many | medium | few | all | FLOPs vs baseline |\n|---|---|---|---|---|---|\n",
    );
    for path in &args.summaries {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
        let cell = |key: &str| match v["top1"][key].as_f64() {
            Some(x) => format!("{x:.1}"),
            None => "-".into(),
        };
        let flops = v["relative_flops"]
            .as_f64()
            .ok_or_else(|| CliError::Format(format!("{}: missing relative_flops", path.display())))?;
        table.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:+.1}% |\n",
            run_name(path),
            cell("many"),
            cell("medium"),
            cell("few"),
            cell("all"),
            flops
        ));
    }
    if let Some(out) = &args.out {
        write_text(out, args.common.no_timestamp, |w| Ok(w.write_all(table.as_bytes())?))?;
    }
    print!("{table}");
    Ok(table)
}

/// Path of the directory holding the summary.
fn run_name(path: &Path) -> String {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => dir.display().to_string(),
        None => path.display().to_string(),
    }
}
