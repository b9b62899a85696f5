use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rehabgan::data::synthetic::{damped_sinusoids, write_repetitions, SyntheticConfig};
use rehabgan::data::{
    ensure_writable_dir, load_repetitions, prepare, unstack, write_sequence_csv, Class,
    LabeledDataset, PipelineConfig, Split, DEFAULT_PAD,
};
use rehabgan::models::{
    load_checkpoint, sample_noise, save_checkpoint, DataInfo, Model, ModelSpec,
};
use rehabgan::presets::Movement;
use rehabgan::rng::{stream, Stream};
use rehabgan::train::{
    fidelity_metrics, metric_c, train_runs, FidelityReport, RunSummary, TrainConfig, TrainingReport,
};

use crate::{
    usage, Command, EvaluateArgs, GenerateArgs, MovementArg, PreprocessArgs, ReportArgs, SynthArgs,
    TrainArgs,
};

pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const FIDELITY_FILE: &str = "fidelity.json";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(&a),
        Command::Preprocess(a) => preprocess(&a),
        Command::Train(a) => train(&a),
        Command::Generate(a) => generate(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Report(a) => report(&a),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(dir: &Path) -> Result<LabeledDataset> {
    LabeledDataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn synth(a: &SynthArgs) -> Result<()> {
    if a.per_class == 0 || a.len < 8 || a.signal_dims == 0 || a.columns < a.signal_dims {
        return Err(usage(
            "need at least one repetition per class, a length of 8 or more, and columns >= signal dims",
        ));
    }
    let cfg = SyntheticConfig {
        n_correct: a.per_class,
        n_incorrect: a.per_class,
        len: a.len,
        len_jitter: (a.len / 30).min(8),
        signal_dims: a.signal_dims,
        columns: a.columns,
        amplitude: 45.0,
        movement: "m01".into(),
    };
    ensure_writable_dir(&a.out, a.force)?;
    let reps = damped_sinusoids(&cfg, &mut stream(a.seed, Stream::Synthetic))?;
    let manifest = write_repetitions(&a.out, &reps)?;
    println!(
        "wrote {} repetitions, manifest {}",
        reps.len(),
        manifest.display()
    );
    Ok(())
}

fn pipeline_config(a: &PreprocessArgs) -> Result<PipelineConfig> {
    let movement = match a.movement {
        MovementArg::Movement1 => Some(Movement::Movement1),
        MovementArg::Movement2 => Some(Movement::Movement2),
        MovementArg::Custom => None,
    };
    match movement {
        Some(m) => {
            let custom = [
                ("--target-len", a.target_len.is_some()),
                ("--pad", a.pad.is_some()),
                ("--tau", a.tau.is_some()),
                ("--train-per-class", a.train_per_class.is_some()),
            ];
            if let Some((flag, _)) = custom.iter().find(|(_, set)| *set) {
                return Err(usage(format!("{flag} only applies with --movement custom")));
            }
            Ok(m.pipeline(a.dims)?)
        }
        None => {
            let tau = a
                .tau
                .ok_or_else(|| usage("--movement custom needs --tau"))?;
            let train = a
                .train_per_class
                .ok_or_else(|| usage("--movement custom needs --train-per-class"))?;
            Ok(PipelineConfig {
                target_len: a.target_len,
                dims: a.dims,
                pad: a.pad.unwrap_or(DEFAULT_PAD),
                tau,
                train_correct: train,
                train_incorrect: train,
            })
        }
    }
}

fn label_line(data: &LabeledDataset, class: Class) -> String {
    let labels: Vec<f64> = data
        .items
        .iter()
        .filter(|i| i.class == class)
        .map(|i| i.label)
        .collect();
    let min = labels.iter().copied().fold(f64::INFINITY, f64::min);
    let max = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    format!("{class:<9} labels: min {min:.3}  mean {mean:.3}  max {max:.3}")
}

fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let cfg = pipeline_config(a)?;
    ensure_writable_dir(&a.out, a.force)?;
    let reps = load_repetitions(&a.manifest, a.raw_columns)
        .with_context(|| format!("reading manifest {}", a.manifest.display()))?;
    let data = prepare(&reps, &cfg, &mut stream(a.seed, Stream::Split)).context("preprocessing")?;
    data.save(&a.out, true)?;
    let m = &data.meta;
    let count = |s, c| data.count(s, c);
    println!(
        "M={} D={} scale={:.4} tau={} dims {:?}",
        m.seq_len, m.dims, m.scale, m.tau, m.selected_dims
    );
    println!(
        "train {} ({} correct, {} incorrect), validation {} ({} correct, {} incorrect)",
        data.train().len(),
        count(Split::Train, Class::Correct),
        count(Split::Train, Class::Incorrect),
        data.validation().len(),
        count(Split::Validation, Class::Correct),
        count(Split::Validation, Class::Incorrect),
    );
    println!("{}", label_line(&data, Class::Correct));
    println!("{}", label_line(&data, Class::Incorrect));
    Ok(())
}

fn train_config(a: &TrainArgs, spec: &ModelSpec) -> Result<TrainConfig> {
    if a.runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    if spec.disc_only && a.g_lr.is_some() {
        return Err(usage(
            "--g-lr has no effect on a discriminator-only variant",
        ));
    }
    let base = TrainConfig::for_choice(a.variant);
    Ok(TrainConfig {
        epochs: a.epochs.unwrap_or(base.epochs),
        batch_size: a.batch,
        n_critic: a.n_critic,
        patience: Some(a.patience),
        eval_every: a.eval_every,
        seed: a.seed,
        g_opt: a.g_lr.map(|lr| spec.g_opt.with_lr(lr)),
        d_opt: a.d_lr.map(|lr| spec.d_opt.with_lr(lr)),
        time_limit: a.time_limit,
        ..base
    })
}

fn data_info(data: &LabeledDataset) -> DataInfo {
    DataInfo {
        scale: data.meta.scale,
        pad: data.meta.pad,
        selected_dims: data.meta.selected_dims.clone(),
    }
}

/// Output directory of run `k` out of `runs`.
pub fn run_dir(out: &Path, runs: usize, k: usize) -> PathBuf {
    if runs == 1 {
        out.to_path_buf()
    } else {
        out.join(format!("run-{k}"))
    }
}

fn train(a: &TrainArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let spec = ModelSpec::from_choice(a.variant, data.meta.seq_len, data.meta.dims);
    let cfg = train_config(a, &spec)?;
    ensure_writable_dir(&a.out, a.force)?;
    log::info!(
        "training {} on M={} D={} for {} epochs",
        a.variant,
        spec.seq_len,
        spec.dims,
        cfg.epochs
    );
    let (models, summary) = train_runs(&spec, &data, &cfg, a.runs).context("training")?;
    let info = data_info(&data);
    for (k, (model, report)) in models.iter().zip(&summary.reports).enumerate() {
        let dir = run_dir(&a.out, a.runs, k);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let epoch = report.best_epoch.unwrap_or(report.epochs_run);
        save_checkpoint(&dir.join(CHECKPOINT_FILE), model, epoch, Some(info.clone()))?;
        report.save_json(&dir.join(REPORT_FILE))?;
        report.write_trace_csv(&dir.join(TRACE_FILE))?;
        println!("{}", run_line(report));
    }
    write_json(&a.out.join(SUMMARY_FILE), &summary)?;
    match &summary.formatted {
        Some(c) => println!("{} C = {c}", summary.variant),
        None => println!(
            "{}: no C (critic outputs are not probabilities)",
            summary.variant
        ),
    }
    Ok(())
}

fn run_line(r: &TrainingReport) -> String {
    let mut line = format!(
        "run {}: {} epochs in {:.1}s",
        r.run, r.epochs_run, r.wall_time_s
    );
    if r.stopped_early {
        line += &format!(", stopped early (best epoch {})", r.best_epoch.unwrap_or(0));
    }
    if r.time_limited {
        line += ", time limit reached";
    }
    if let Some(c) = &r.formatted_c {
        line += &format!(", C {c}");
    }
    if let (Some(a), Some(b)) = (&r.fidelity_initial, &r.fidelity) {
        line += &format!(", mean gap {:.4} -> {:.4}", a.mean_gap, b.mean_gap);
    }
    line
}

fn check_compatible(model: &Model, data: &LabeledDataset) -> Result<()> {
    let (m, d) = (model.spec.seq_len, model.spec.dims);
    if (m, d) != (data.meta.seq_len, data.meta.dims) {
        return Err(usage(format!(
            "checkpoint expects {m}x{d} sequences, dataset has {}x{}",
            data.meta.seq_len, data.meta.dims
        )));
    }
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<()> {
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let (mut model, header) = load_checkpoint(&a.checkpoint)?;
    if model.generator.is_none() {
        return Err(usage(format!(
            "{} is a discriminator-only checkpoint and has no generator",
            model.spec.choice()
        )));
    }
    let data = load_dataset(&a.data)?;
    check_compatible(&model, &data)?;
    let info = header.data.unwrap_or_else(|| data_info(&data));
    ensure_writable_dir(&a.out, a.force)?;

    let z = sample_noise(&model.spec, a.count, &mut stream(a.seed, Stream::Sample))?;
    let x = model.generate(&z)?;
    let seqs = unstack(&x)?;
    for (k, s) in seqs.iter().enumerate() {
        let raw = s.trim(info.pad)?.map(|v| v * info.scale);
        write_sequence_csv(&a.out.join(format!("sample-{k:03}.csv")), &raw)?;
    }
    let mut reference = data.validation();
    if reference.is_empty() {
        reference = data.train();
    }
    let real = LabeledDataset::batch(&reference)?;
    let fid: FidelityReport = fidelity_metrics(&real, &x)?;
    write_json(&a.out.join(FIDELITY_FILE), &fid)?;
    println!(
        "wrote {} sequences of {}x{} to {}",
        seqs.len(),
        model.spec.seq_len - 2 * info.pad,
        model.spec.dims,
        a.out.display()
    );
    println!(
        "mean gap {:.4}, std gap {:.4}, smoothness ratio {}, mode collapse {}",
        fid.mean_gap,
        fid.std_gap,
        fid.smoothness_ratio
            .map_or("-".into(), |v| format!("{v:.3}")),
        fid.mode_collapse_score
            .map_or("-".into(), |v| format!("{v:.3}")),
    );
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let (mut model, _) = load_checkpoint(&a.checkpoint)?;
    if !model.spec.variant.probabilistic() {
        return Err(usage(format!(
            "{} critic outputs are not probabilities, so they cannot be scored against soft labels",
            model.spec.choice()
        )));
    }
    if a.out.exists() && !a.force {
        return Err(usage(format!(
            "{} exists; pass --force to overwrite",
            a.out.display()
        )));
    }
    let data = load_dataset(&a.data)?;
    check_compatible(&model, &data)?;
    let val = data.validation();
    if val.is_empty() {
        return Err(
            rehabgan::Error::InsufficientSamples("dataset has no validation split".into()).into(),
        );
    }
    let p = model.discriminate(&LabeledDataset::batch(&val)?)?;
    let labels = LabeledDataset::labels(&val);
    let c = metric_c(&p, &labels)?;
    let mut w =
        csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    w.write_record(["id", "class", "label", "predicted"])?;
    for (item, pred) in val.iter().zip(&p) {
        w.write_record([
            item.id.clone(),
            item.class.to_string(),
            item.label.to_string(),
            pred.to_string(),
        ])?;
    }
    w.flush()?;
    println!("C = {c} over {} validation sequences", val.len());
    Ok(())
}

/// One row of the `report` table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub source: String,
    pub variant: String,
    pub seq_len: usize,
    pub dims: usize,
    pub runs: usize,
    pub epochs: f64,
    pub c: Option<String>,
    pub gap_initial: Option<f64>,
    pub gap_final: Option<f64>,
    pub collapse: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn report_row(
    source: &str,
    variant: &str,
    reports: &[TrainingReport],
    c: Option<String>,
) -> Result<ReportRow> {
    let first = reports
        .first()
        .ok_or_else(|| usage(format!("{source}: no runs recorded")))?;
    let fid = |f: fn(&TrainingReport) -> Option<f64>| mean_of(reports.iter().filter_map(f));
    Ok(ReportRow {
        source: source.into(),
        variant: variant.into(),
        seq_len: first.seq_len,
        dims: first.dims,
        runs: reports.len(),
        epochs: mean_of(reports.iter().map(|r| r.epochs_run as f64)).unwrap_or(0.0),
        c,
        gap_initial: fid(|r| r.fidelity_initial.as_ref().map(|f| f.mean_gap)),
        gap_final: fid(|r| r.fidelity.as_ref().map(|f| f.mean_gap)),
        collapse: fid(|r| r.fidelity.as_ref().and_then(|f| f.mode_collapse_score)),
    })
}

pub fn read_report(path: &Path) -> Result<ReportRow> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let source = path.display().to_string();
    if value.get("reports").is_some() {
        let s: RunSummary =
            serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))?;
        report_row(&source, &s.variant, &s.reports, s.formatted.clone())
    } else {
        let r: TrainingReport =
            serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))?;
        let c = r.formatted_c.clone();
        report_row(&source, &r.variant, std::slice::from_ref(&r), c)
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

const HEADER: [&str; 9] = [
    "variant",
    "M",
    "D",
    "runs",
    "epochs",
    "C",
    "gap_initial",
    "gap_final",
    "collapse",
];

fn cells(r: &ReportRow) -> [String; 9] {
    [
        r.variant.clone(),
        r.seq_len.to_string(),
        r.dims.to_string(),
        r.runs.to_string(),
        format!("{:.0}", r.epochs),
        r.c.clone().unwrap_or_else(|| "-".into()),
        cell(r.gap_initial),
        cell(r.gap_final),
        cell(r.collapse),
    ]
}

fn report(a: &ReportArgs) -> Result<()> {
    let rows = a
        .reports
        .iter()
        .map(|p| read_report(p))
        .collect::<Result<Vec<_>>>()?;
    let table: Vec<[String; 9]> = rows.iter().map(cells).collect();
    let widths: Vec<usize> = (0..HEADER.len())
        .map(|j| {
            table
                .iter()
                .map(|r| r[j].chars().count())
                .chain([HEADER[j].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |fields: Vec<&str>| {
        fields
            .iter()
            .zip(&widths)
            .map(|(f, w)| format!("{f:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    println!("{}", line(HEADER.to_vec()));
    for r in &table {
        println!("{}", line(r.iter().map(String::as_str).collect()));
    }
    if let Some(path) = &a.csv {
        let mut w =
            csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(std::iter::once("source").chain(HEADER))?;
        for (row, c) in rows.iter().zip(&table) {
            w.write_record(
                std::iter::once(row.source.as_str()).chain(c.iter().map(String::as_str)),
            )?;
        }
        w.flush()?;
    }
    Ok(())
}
