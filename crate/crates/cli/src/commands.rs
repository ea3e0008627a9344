use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use trackpulse::training::{self, SplitData};
use trackpulse::{
    ArchSpec, Dataset, GenerateSpec, MetricsReport, ModelCheckpoint, ScenarioKind, ScenarioMix, TrackModelConfig,
    TrainConfig,
};

use crate::args::{EvalArgs, GenerateArgs, PlotArgs, PredictArgs, SplitChoice, TrainArgs};
use crate::manifest::ManifestBuilder;
use crate::plot::{render_svg, RecordSeries};
use crate::CliError;

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn sim_config(args: &GenerateArgs) -> Result<TrackModelConfig, CliError> {
    let mut c = match &args.sim_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
        }
        None => TrackModelConfig::default(),
    };
    if let Some(v) = args.speed_kmh {
        c.speed = v / 3.6;
    }
    if let Some(v) = args.sleepers {
        c.n_core_sleepers = v;
    }
    if let Some(v) = args.buffer_sleepers {
        c.n_buffer_sleepers = v;
    }
    if let Some(v) = args.samples_per_span {
        c.samples_per_span = v;
    }
    if let Some(v) = args.elements_per_span {
        c.elements_per_span = v;
    }
    if let Some(v) = args.lead_in_spans {
        c.lead_in_spans = v;
    }
    if let Some(v) = args.substeps {
        c.substeps = v;
    }
    Ok(c)
}

pub fn generate(args: &GenerateArgs, threads: usize) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("generate", args, threads);
    let spec = GenerateSpec {
        n_records: args.n,
        mix: args.mix.map(ScenarioMix).unwrap_or_default(),
        noise_ratio: args.noise_ratio,
        seed: args.seed,
        config: sim_config(args)?,
    };
    spec.validate().map_err(CliError::usage_from)?;
    let dataset = trackpulse::datagen::generate(&spec)?;
    let bytes = dataset.to_bytes();
    write_file(&args.out, &bytes)?;
    let counts = dataset.kind_counts();
    println!(
        "wrote {} records ({} constant, {} reduce-one, {} reduce-three), {} bytes, to {}",
        dataset.len(),
        counts[0],
        counts[1],
        counts[2],
        bytes.len(),
        args.out.display()
    );
    manifest.seed("dataset", args.seed).output(&args.out);
    manifest.finish(&args.out)?;
    Ok(())
}

fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::read(path).map_err(CliError::from)
}

fn loss_log_path(args: &TrainArgs) -> PathBuf {
    args.log.clone().unwrap_or_else(|| {
        let mut name = args.out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".loss.csv");
        args.out.with_file_name(name)
    })
}

pub fn train(args: &TrainArgs, threads: usize) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("train", args, threads);
    let mut arch = ArchSpec::parse(&args.arch).map_err(CliError::usage_from)?;
    let dataset = read_dataset(&args.dataset)?;
    // Frames span one sleeper bay of the dataset.
    arch.frame_len = dataset.frame_len();
    arch.validate().map_err(|e| CliError::from(trackpulse::Error::Compatibility(e.to_string())))?;
    let data = training::split_dataset(&dataset, args.seed).map_err(CliError::usage_from)?;
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        adam: training::AdamConfig {
            lr: args.lr,
            ..Default::default()
        },
        seed: args.seed,
        patience: args.patience,
        fit_input_norm: true,
        threads,
    };
    config.validate().map_err(CliError::usage_from)?;
    let quiet = args.quiet;
    let (ck, outcome) = training::fit(&arch, &data, args.seed, &config, |e| {
        if !quiet {
            eprintln!("epoch {:>4}  train {:.6e}  val {:.6e}", e.epoch, e.train_loss, e.val_loss);
        }
    })?;
    write_file(&args.out, &ck.to_bytes()?)?;
    let log_path = loss_log_path(args);
    training::write_loss_log(&outcome.log, &log_path)?;
    println!(
        "{}: {} train / {} val / {} test records; best epoch {} (val loss {:.6e}); checkpoint {}",
        arch.name(),
        data.train.len(),
        data.val.len(),
        data.test.len(),
        outcome.best_epoch,
        outcome.best_val_loss,
        args.out.display()
    );
    manifest
        .seed("split", args.seed)
        .seed("model", args.seed)
        .input(&args.dataset)
        .output(&args.out)
        .output(&log_path);
    manifest.finish(&args.out)?;
    Ok(())
}

fn check_frame_len(arch: &ArchSpec, dataset: &Dataset) -> Result<(), CliError> {
    if dataset.frame_len() != arch.frame_len {
        return Err(trackpulse::Error::Compatibility(format!(
            "model expects frames of {} samples, dataset has {}",
            arch.frame_len,
            dataset.frame_len()
        ))
        .into());
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, CliError> {
    ModelCheckpoint::load(path).map_err(CliError::from)
}

fn eval_subset(dataset: &Dataset, choice: SplitChoice, seed: u64) -> Result<Dataset, CliError> {
    Ok(match choice {
        SplitChoice::All => dataset.clone(),
        SplitChoice::Test => {
            let SplitData { test, .. } = training::split_dataset(dataset, seed)?;
            test
        }
    })
}

pub fn eval(args: &EvalArgs, threads: usize) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("eval", args, threads);
    let ck = load_checkpoint(&args.checkpoint)?;
    let dataset = read_dataset(&args.dataset)?;
    check_frame_len(&ck.model.arch, &dataset)?;
    let seed = args.seed.unwrap_or(ck.split_seed);
    if seed != ck.split_seed {
        eprintln!(
            "warning: split seed {seed} differs from the training split seed {}; test records may overlap training",
            ck.split_seed
        );
    }
    let subset = eval_subset(&dataset, args.split, seed)?;
    let report: MetricsReport = if args.debug_perfect {
        let truth: Vec<Vec<[f64; 2]>> = subset.records.iter().map(|r| r.label_rows()).collect();
        training::metrics(&truth, &truth)?
    } else {
        training::evaluate(&ck.model, &ck.norm, &subset)?
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::io(e.to_string()))?;
    println!("{json}");
    manifest.seed("split", seed).input(&args.checkpoint).input(&args.dataset);
    if let Some(out) = &args.out {
        write_file(out, (json + "\n").as_bytes())?;
        manifest.output(out);
        manifest.finish(out)?;
    }
    Ok(())
}

fn select_records(dataset: &Dataset, indices: &[usize]) -> Result<(Vec<usize>, Dataset), CliError> {
    let idx: Vec<usize> = if indices.is_empty() {
        (0..dataset.len()).collect()
    } else {
        indices.to_vec()
    };
    if let Some(&bad) = idx.iter().find(|&&i| i >= dataset.len()) {
        return Err(trackpulse::Error::IndexOutOfRange {
            index: bad,
            count: dataset.len(),
        }
        .into());
    }
    let subset = dataset.select(&idx)?;
    Ok((idx, subset))
}

fn prediction_rows(ck: &ModelCheckpoint, dataset: &Dataset, indices: &[usize]) -> Result<Vec<RecordSeries>, CliError> {
    check_frame_len(&ck.model.arch, dataset)?;
    let (idx, subset) = select_records(dataset, indices)?;
    let pred = training::predict_dataset(&ck.model, &ck.norm, &subset)?;
    Ok(idx
        .into_iter()
        .zip(subset.records.iter().zip(pred))
        .map(|(record, (r, p))| RecordSeries {
            record,
            truth: r.label_rows(),
            pred: p,
        })
        .collect())
}

pub fn predictions_csv(series: &[RecordSeries]) -> String {
    let mut out = String::from("record,sleeper,kp_true,kp_pred,kb_true,kb_pred\n");
    for s in series {
        for (i, (t, p)) in s.truth.iter().zip(&s.pred).enumerate() {
            let _ = writeln!(out, "{},{},{},{},{},{}", s.record, i, t[0], p[0], t[1], p[1]);
        }
    }
    out
}

pub fn predict(args: &PredictArgs, threads: usize) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("predict", args, threads);
    let ck = load_checkpoint(&args.checkpoint)?;
    let dataset = read_dataset(&args.dataset)?;
    let csv = predictions_csv(&prediction_rows(&ck, &dataset, &args.record)?);
    match &args.out {
        Some(out) => {
            write_file(out, csv.as_bytes())?;
            manifest.input(&args.checkpoint).input(&args.dataset).output(out);
            manifest.finish(out)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn plot(args: &PlotArgs, threads: usize) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("plot", args, threads);
    let ck = load_checkpoint(&args.checkpoint)?;
    let dataset = read_dataset(&args.dataset)?;
    let series = prediction_rows(&ck, &dataset, &args.records)?;
    write_file(&args.out, render_svg(&series).as_bytes())?;
    let csv_path = args.out.with_extension("csv");
    write_file(&csv_path, predictions_csv(&series).as_bytes())?;
    for s in &series {
        let kind = dataset.records[s.record].kind;
        if kind != ScenarioKind::Constant {
            if let Some(d) = dataset.records[s.record].defect_start {
                println!("record {}: {:?} defect from sleeper {d}", s.record, kind);
            }
        }
    }
    println!("wrote {} and {}", args.out.display(), csv_path.display());
    manifest
        .input(&args.checkpoint)
        .input(&args.dataset)
        .output(&args.out)
        .output(&csv_path);
    manifest.finish(&args.out)?;
    Ok(())
}
