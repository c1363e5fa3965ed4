use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;

use serde_json::json;

use formertime::config::{load_splits, synth_splits, DataConfig, RunConfig};
use formertime::data::{read_ts_file, SynthKind, SynthSpec, TimeSeriesDataset};
use formertime::encoder::PosMode;
use formertime::model::{count_macs, gradient_check, tiny_config, write_embeddings_csv, FormerTime, ModelConfig};
use formertime::training::{train_with, RepeatSummary, TrainConfig};

use crate::output::RunWriter;
use crate::{AblateArgs, Axis, CliError, DataArgs, ExportArgs, GradcheckArgs, MacsArgs, TrainArgs};

const SLICE_SCHEDULES: [[usize; 3]; 4] = [[16, 32, 64], [8, 16, 32], [4, 8, 16], [2, 4, 8]];

/// Model used when no config file is given: three stages of width 32 with
/// stage-1 window 8 for synthetic data, the width-64 window-2 layout for files.
fn default_model(synthetic: bool) -> ModelConfig {
    if synthetic {
        ModelConfig::three_stage(0, 0, 8, 8).with_width(32)
    } else {
        ModelConfig::three_stage(0, 0, 2, 2)
    }
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = || {
        CliError::Usage(format!(
            "--seeds expects a count or a comma-separated list, got {text:?}"
        ))
    };
    if text.contains(',') {
        text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
    } else {
        let n: u64 = text.trim().parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(bad());
        }
        Ok((0..n).collect())
    }
}

fn require_file(path: &Path, flag: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{flag} {} does not exist", path.display())))
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    require_file(path, "--config")?;
    Ok(RunConfig::load(path)?)
}

/// Resolves config file, data flags and overrides, then loads both splits.
fn resolve(args: &DataArgs) -> Result<(RunConfig, TimeSeriesDataset, TimeSeriesDataset), CliError> {
    let mut run = match &args.config {
        Some(p) => load_config(p)?,
        None => RunConfig {
            model: default_model(args.synth.is_some()),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        },
    };
    if let Some(kind) = &args.synth {
        let kind = SynthKind::parse(kind)?;
        let spec = match run.data.synth.take() {
            Some(s) if s.kind == kind => s,
            _ => SynthSpec::default_for(kind),
        };
        run.data = DataConfig {
            synth: Some(spec),
            test_n: run.data.test_n,
            ..DataConfig::default()
        };
    }
    if args.train_file.is_some() || args.test_file.is_some() {
        let train = args
            .train_file
            .clone()
            .ok_or_else(|| CliError::Usage("missing --train-file".into()))?;
        let test = args
            .test_file
            .clone()
            .ok_or_else(|| CliError::Usage("missing --test-file".into()))?;
        if args.synth.is_some() {
            return Err(CliError::Usage("--synth cannot be combined with data files".into()));
        }
        run.data = DataConfig {
            train_file: Some(train),
            test_file: Some(test),
            ..DataConfig::default()
        };
    }
    if let Some(s) = &args.seeds {
        run.train.seeds = parse_seeds(s)?;
    }
    run = run.with_overrides(&args.overrides)?;
    for (path, flag) in [
        (&run.data.train_file, "--train-file"),
        (&run.data.test_file, "--test-file"),
    ] {
        if let Some(p) = path {
            require_file(p, flag)?;
        }
    }
    let (train, test) = load_splits(&run.data)?;
    train.check_compatible(&test)?;
    run.model.infer_shape(train.channels(), train.num_classes());
    run.model.validate()?;
    run.train.validate()?;
    Ok((run, train, test))
}

fn train_seeds(
    run: &RunConfig,
    train: &TimeSeriesDataset,
    test: &TimeSeriesDataset,
    out: &Path,
    command: &str,
    save_checkpoint: bool,
) -> Result<RepeatSummary, CliError> {
    let mut writer = RunWriter::create(out, command, run)?;
    let mut reports = Vec::new();
    for &seed in &run.train.seeds {
        let mut failed = None;
        let (report, model) = train_with::<f32>(&run.model, train, test, &run.train, seed, |e| {
            if let Err(err) = writer.epoch(seed, e) {
                failed.get_or_insert(err);
            }
        })?;
        if let Some(err) = failed {
            return Err(err);
        }
        writer.run(&report)?;
        if save_checkpoint {
            model.save(File::create(out.join(format!("checkpoint-seed{seed}.ftck")))?)?;
        }
        eprintln!(
            "seed {seed}: best {:.4} (epoch {}), final {:.4}, {} epochs",
            report.best_accuracy,
            report.best_epoch,
            report.final_accuracy,
            report.history.len()
        );
        reports.push(report);
    }
    let summary = RepeatSummary::from_reports(&reports)?;
    writer.finish(&summary)?;
    Ok(summary)
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let (run, train, test) = resolve(&args.data)?;
    let summary = train_seeds(&run, &train, &test, &args.out, "train", args.save_checkpoint)?;
    println!(
        "mean {:.4} std {:.4} final {:.4} over {} seeds",
        summary.mean,
        summary.std,
        summary.mean_final,
        summary.seeds.len()
    );
    Ok(())
}

fn ablation_settings(
    axis: Axis,
    base: &ModelConfig,
    values: Option<&str>,
) -> Result<Vec<(String, ModelConfig)>, CliError> {
    let all: Vec<(String, ModelConfig)> = match axis {
        Axis::Pos => PosMode::ALL
            .iter()
            .map(|&m| {
                let mut c = base.clone();
                c.cpe.mode = m;
                (m.name().to_string(), c)
            })
            .collect(),
        Axis::Stages => (1..=4)
            .map(|k| Ok((k.to_string(), base.with_stage_count(k)?)))
            .collect::<Result<_, formertime::Error>>()?,
        Axis::Slice => SLICE_SCHEDULES
            .iter()
            .map(|s| {
                let label = s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("-");
                Ok((label, base.with_slice_schedule(s)?))
            })
            .collect::<Result<_, formertime::Error>>()?,
    };
    let Some(values) = values else {
        return Ok(all);
    };
    let wanted: Vec<&str> = values.split(',').map(str::trim).collect();
    for w in &wanted {
        if !all.iter().any(|(label, _)| label == w) {
            let known: Vec<&str> = all.iter().map(|(l, _)| l.as_str()).collect();
            return Err(CliError::Usage(format!(
                "unknown value {w:?} for this axis (known: {})",
                known.join(", ")
            )));
        }
    }
    Ok(all.into_iter().filter(|(l, _)| wanted.contains(&l.as_str())).collect())
}

pub fn ablate(args: &AblateArgs) -> Result<(), CliError> {
    let (run, train, test) = resolve(&args.data)?;
    let settings = ablation_settings(args.axis, &run.model, args.values.as_deref())?;
    fs::create_dir_all(&args.out)?;
    let axis = format!("{:?}", args.axis).to_lowercase();
    let mut rows = Vec::new();
    for (label, model) in &settings {
        let sub = RunConfig {
            model: model.clone(),
            ..run.clone()
        };
        let summary = train_seeds(&sub, &train, &test, &args.out.join(label), "ablate", false)?;
        let macs = count_macs(model, train.length(), train.channels())?.total();
        rows.push(json!({
            "axis": axis,
            "setting": label,
            "mean": summary.mean,
            "std": summary.std,
            "mean_final": summary.mean_final,
            "total_layers": model.total_layers(),
            "stages": model.stages.len(),
            "macs": macs,
        }));
    }
    let mut text = String::new();
    for r in &rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(args.out.join("ablation.jsonl"), text)?;

    println!(
        "{:<12} {:>8} {:>8} {:>8} {:>7} {:>10}",
        axis, "mean", "std", "final", "layers", "MMACs"
    );
    for r in &rows {
        println!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>7} {:>10.3}",
            r["setting"].as_str().unwrap_or_default(),
            r["mean"].as_f64().unwrap_or(f64::NAN),
            r["std"].as_f64().unwrap_or(f64::NAN),
            r["mean_final"].as_f64().unwrap_or(f64::NAN),
            r["total_layers"],
            r["macs"].as_u64().unwrap_or(0) as f64 / 1e6
        );
    }
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?.model,
        None => tiny_config(),
    };
    cfg.infer_shape(3, 3);
    let report = gradient_check(&cfg, args.length, args.batch, args.eps)?;
    println!(
        "{:<40} {:>8} {:>12} {:>12}",
        "parameter", "scalars", "max_rel", "max_abs"
    );
    for p in &report.params {
        println!(
            "{:<40} {:>8} {:>12.3e} {:>12.3e}",
            p.name, p.scalars, p.max_rel_error, p.max_abs_error
        );
    }
    let worst = report.max_rel_error();
    if report.passes(args.tolerance) {
        println!("pass: max relative error {worst:.3e} < {:e}", args.tolerance);
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: max relative error {worst:.3e} >= {:e}",
            args.tolerance
        )))
    }
}

pub fn macs(args: &MacsArgs) -> Result<(), CliError> {
    let mut run = match &args.config {
        Some(p) => load_config(p)?,
        None => RunConfig {
            model: ModelConfig::three_stage(0, 0, 2, 2),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        },
    };
    run = run.with_overrides(&args.overrides)?;
    let m = args.channels.unwrap_or(run.model.input_channels);
    if m == 0 {
        return Err(CliError::Usage(
            "the config leaves input_channels open; pass --channels".into(),
        ));
    }
    run.model.infer_shape(m, 2);
    let report = count_macs(&run.model, args.length, m)?;
    if args.json {
        println!(
            "{}",
            serde_json::to_string(&json!({"total": report.total(), "report": report}))?
        );
        return Ok(());
    }
    println!(
        "{:<7} {:>7} {:>12} {:>12} {:>14} {:>14} {:>14}",
        "stage", "length", "partition", "positional", "attention", "ffn", "total"
    );
    for (j, st) in report.stages.iter().enumerate() {
        println!(
            "{:<7} {:>7} {:>12} {:>12} {:>14} {:>14} {:>14}",
            j + 1,
            st.length,
            st.partition,
            st.positional,
            st.attention.total(),
            st.ffn,
            st.total()
        );
    }
    println!("classifier {}", report.classifier);
    println!("total {} ({:.3} M)", report.total(), report.millions());
    if args.compare_r {
        let mut r1 = run.model.clone();
        for st in &mut r1.stages {
            st.reduction = 1;
            st.passthrough = false;
        }
        let base = count_macs(&r1, args.length, m)?;
        println!(
            "{:<7} {:>3} {:>16} {:>16} {:>10}",
            "stage", "R", "score+context", "at R=1", "ratio"
        );
        for (j, (a, b)) in report.stages.iter().zip(&base.stages).enumerate() {
            let (sa, sb) = (a.attention.score_context(), b.attention.score_context());
            let ratio = if sb == 0 { f64::NAN } else { sa as f64 / sb as f64 };
            println!(
                "{:<7} {:>3} {:>16} {:>16} {:>10.6}",
                j + 1,
                run.model.stages[j].reduction,
                sa,
                sb,
                ratio
            );
        }
    }
    Ok(())
}

pub fn export_embeddings(args: &ExportArgs) -> Result<(), CliError> {
    let run = load_config(&args.config)?.with_overrides(&args.overrides)?;
    require_file(&args.checkpoint, "--checkpoint")?;
    let ds = match (&args.data, &args.synth) {
        (Some(p), None) => {
            require_file(p, "--data")?;
            read_ts_file(p)?
        }
        (None, Some(kind)) => {
            let kind = SynthKind::parse(kind)?;
            let spec = match &run.data.synth {
                Some(s) if s.kind == kind => s.clone(),
                _ => SynthSpec::default_for(kind),
            };
            synth_splits(&spec, run.data.test_n)?.1
        }
        _ => return Err(CliError::Usage("give exactly one of --data or --synth".into())),
    };
    let mut cfg = run.model.clone();
    cfg.infer_shape(ds.channels(), ds.num_classes());
    let mut model = FormerTime::<f32>::build(&cfg)?;
    model.load(BufReader::new(File::open(&args.checkpoint)?))?;

    let mut rows = Vec::with_capacity(ds.len());
    let order: Vec<usize> = (0..ds.len()).collect();
    for idx in order.chunks(64) {
        let (x, _) = ds.batch::<f32>(idx)?;
        let emb = model.embed(&x)?;
        let width = emb.shape()[1];
        rows.extend(
            emb.data()
                .chunks(width)
                .map(|r| r.iter().map(|&v| f64::from(v)).collect::<Vec<f64>>()),
        );
    }
    let labels: Vec<String> = ds.labels().iter().map(|&y| ds.class_names()[y].clone()).collect();
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_embeddings_csv(File::create(&args.out)?, &labels, &rows)?;
    println!(
        "wrote {} rows of width {} to {}",
        rows.len(),
        cfg.embedding_dim(),
        args.out.display()
    );
    Ok(())
}
