//! End-to-end operations behind the command-line tool: prepare, synth,
//! train, evaluate and predict.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{
    collect_cycles, extract_cycles, load_cycles, parse_annotation_file, parse_recording_filename, parse_split_file,
    read_wav, scan_dataset_dir, split_patients, write_synth_dataset, CycleAnnotation, DatasetManifest, RecordingMeta,
    Split, SplitMode, MANIFEST_FILE, SPLIT_FILE,
};
use crate::dsp::{Frontend, FrontendConfig};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{Model, Prediction};
use crate::plot::{confusion_heatmap, loss_curve};
use crate::train::{
    evaluate_features, extract_features, train_log_header, validation_carve_out, Checkpoint, EpochLog, FeatureSet,
    Normalization, Trainer, NORMALIZATION_FILE,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TIMING_FILE: &str = "train_timing.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const LOSS_CURVE_FILE: &str = "loss_curve.ppm";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Recordings live either directly in `dir` or in one of its subdirectories
/// (the public archive unpacks into a nested folder).
fn find_audio_dir(dir: &Path) -> Result<PathBuf> {
    if !scan_dataset_dir(dir)?.is_empty() {
        return Ok(dir.to_path_buf());
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        if !scan_dataset_dir(&sub)?.is_empty() {
            return Ok(sub);
        }
    }
    Err(Error::Validation(format!("{}: no annotated WAV recordings found", dir.display())))
}

fn find_split_file(data_dir: &Path, audio_dir: &Path, configured: &str) -> Result<PathBuf> {
    if !configured.is_empty() {
        let p = Path::new(configured);
        return Ok(if p.is_absolute() { p.to_path_buf() } else { data_dir.join(p) });
    }
    for dir in [data_dir, audio_dir] {
        let mut names: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                name == SPLIT_FILE || (name.contains("train_test") && name.ends_with(".txt"))
            })
            .collect();
        names.sort();
        if let Some(p) = names.into_iter().next() {
            return Ok(p);
        }
    }
    Err(Error::Validation(format!(
        "{}: no official split file (set split_file or use a ratio split)",
        data_dir.display()
    )))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub manifest: DatasetManifest,
    pub normalization: Normalization,
}

/// Dataset dir -> manifest, summary and normalization constants in `out`.
pub fn prepare(data_dir: &Path, cfg: &RunConfig, out: &Path) -> Result<Prepared> {
    let audio_dir = find_audio_dir(data_dir)?;
    let cycles = collect_cycles(&scan_dataset_dir(&audio_dir)?)?;
    let mode = match cfg.split_mode_kind()? {
        None => {
            let path = find_split_file(data_dir, &audio_dir, &cfg.split_file)?;
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            SplitMode::Official(parse_split_file(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?)
        }
        Some(r) => SplitMode::Ratio(r),
    };
    let manifest = split_patients(cycles, &mode, cfg.seed)?;
    create_dir(out)?;
    manifest.write(out)?;
    let frontend_cfg = cfg.frontend_config();
    let features = split_features(&manifest, Split::Train, &frontend_cfg, cfg.threads)?;
    let normalization = Normalization::measure(&features, &frontend_cfg)?;
    write_file(&out.join(NORMALIZATION_FILE), serde_json::to_string_pretty(&normalization)?)?;
    Ok(Prepared { manifest, normalization })
}

/// Writes a synthetic dataset into `out` and prepares it in place.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<Prepared> {
    let ds = write_synth_dataset(out, &cfg.synth_config())?;
    let mut cfg = cfg.clone();
    cfg.split = "official".into();
    cfg.split_file = ds.split_file.to_string_lossy().into_owned();
    prepare(out, &cfg, out)
}

pub fn load_prepared(work: &Path) -> Result<Prepared> {
    let manifest = DatasetManifest::read(&work.join(MANIFEST_FILE))?;
    let path = work.join(NORMALIZATION_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let normalization = serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    Ok(Prepared { manifest, normalization })
}

/// Raw (unnormalized) log-mel images of one split.
pub fn split_features(manifest: &DatasetManifest, split: Split, frontend: &FrontendConfig, threads: usize) -> Result<FeatureSet> {
    let cycles = load_cycles(manifest.split(split))?;
    if cycles.is_empty() {
        return Err(Error::Validation(format!("the {} split is empty", split.as_str())));
    }
    extract_features(&Frontend::new(frontend.clone())?, &cycles, threads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub epochs: Vec<EpochLog>,
}

/// Trains on the training split of a prepared work dir, writing the
/// checkpoint, CSV log, timings, loss curve and resolved config into `out`.
pub fn train(work: &Path, cfg: &RunConfig, out: &Path, mut progress: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let prepared = load_prepared(work)?;
    if prepared.normalization.frontend != cfg.frontend_config() {
        return Err(Error::Config(format!(
            "frontend settings differ from those {} was prepared with; rerun prepare",
            work.display()
        )));
    }
    create_dir(out)?;
    write_file(&out.join(RESOLVED_CONFIG_FILE), cfg.to_toml())?;
    let model_cfg = cfg.model_config(Some(&prepared.normalization));
    let model = Model::new(model_cfg, cfg.seed)?;
    let mut all = split_features(&prepared.manifest, Split::Train, &model.config.frontend, cfg.threads)?;
    model.config.backbone.normalize_input(&mut all.images);
    let (train_set, val_set) = validation_carve_out(&all, cfg.validation_fraction, cfg.seed);
    drop(all);
    let mut trainer = Trainer::new(model, cfg.train_config(), train_set.len())?;
    let mut log = train_log_header(val_set.is_some()) + "\n";
    let mut timing = String::from("epoch,wall_seconds\n");
    let mut epochs = Vec::new();
    for _ in 0..cfg.epochs {
        let mut e = trainer.train_epoch(&train_set)?;
        if let Some(v) = &val_set {
            e.validation = Some(evaluate_features(&trainer.model, v)?.0);
        }
        log += &(e.csv_row() + "\n");
        let _ = writeln!(timing, "{},{:.3}", e.epoch, e.wall_seconds);
        write_file(&out.join(TRAIN_LOG_FILE), &log)?;
        write_file(&out.join(TIMING_FILE), &timing)?;
        progress(&e);
        epochs.push(e);
    }
    let checkpoint = out.join(CHECKPOINT_FILE);
    Checkpoint::from_trainer(&trainer, Some(prepared.normalization)).save(&checkpoint)?;
    let losses: Vec<f64> = epochs.iter().map(|e| e.mean_loss).collect();
    loss_curve(&losses, 480, 320).write_ppm(&out.join(LOSS_CURVE_FILE))?;
    Ok(TrainOutcome { checkpoint, epochs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
}

/// Metrics of a checkpoint on one split of a prepared work dir.
pub fn evaluate(checkpoint: &Path, work: &Path, split: Split, threads: usize, heatmap: Option<&Path>) -> Result<Evaluation> {
    let model = Checkpoint::load(checkpoint)?.model()?;
    let manifest = DatasetManifest::read(&work.join(MANIFEST_FILE))?;
    let mut features = split_features(&manifest, split, &model.config.frontend, threads)?;
    model.config.backbone.normalize_input(&mut features.images);
    let (report, predictions) = evaluate_features(&model, &features)?;
    if let Some(path) = heatmap {
        confusion_heatmap(&report.confusion, 64).write_ppm(path)?;
    }
    Ok(Evaluation { report, predictions })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CyclePrediction {
    pub start_s: f64,
    pub end_s: f64,
    pub prediction: Prediction,
}

/// Per-cycle decisions for one recording. Without annotations the whole
/// recording is one cycle.
pub fn predict(checkpoint: &Path, audio: &Path, annotations: Option<&Path>) -> Result<Vec<CyclePrediction>> {
    let model = Checkpoint::load(checkpoint)?.model()?;
    let waveform = read_wav(audio)?;
    let spans = match annotations {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_annotation_file(&text)?
        }
        None => vec![CycleAnnotation::new(0.0, waveform.duration_s(), false, false)?],
    };
    let stem = audio.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let meta = parse_recording_filename(stem).unwrap_or(RecordingMeta {
        patient_id: 1,
        recording_index: "0".into(),
        chest_location: "unknown".into(),
        acquisition_mode: "mc".into(),
        device: "unknown".into(),
    });
    let cycles = extract_cycles(&waveform, &spans, &meta)?;
    let frontend = Frontend::new(model.config.frontend.clone())?;
    let mut features = extract_features(&frontend, &cycles, 1)?;
    model.config.backbone.normalize_input(&mut features.images);
    let preds = model.predict(&features.images)?;
    Ok(spans
        .iter()
        .zip(preds)
        .map(|(a, prediction)| CyclePrediction {
            start_s: a.start_s,
            end_s: a.end_s,
            prediction,
        })
        .collect())
}
