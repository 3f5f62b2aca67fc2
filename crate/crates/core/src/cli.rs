//! Subcommand implementations shared by the binary and the tests.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{Precision, RunConfig};
use crate::data::{generate_synth, load_dataset_root, scan_frames, Dataset, SynthSpec, VideoRecord};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, evaluate_video, select_best_checkpoint, ConfusionMatrix, MetricsReport};
use crate::model::ClipModel;
use crate::scalar::Scalar;
use crate::train::{import_weights, parse_manifest, Checkpoint, LogEntry, Trainer};

pub fn cmd_synth(spec: &SynthSpec, seed: u64, out: &Path) -> Result<()> {
    generate_synth(spec, seed, out)
}

/// Optional warm start for training.
#[derive(Clone, Debug, Default)]
pub struct InitFrom {
    pub checkpoint: Option<PathBuf>,
    /// `source -> target` name pairs; without it every tensor must match.
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub log: Vec<LogEntry>,
    pub checkpoints: Vec<PathBuf>,
    /// `(iteration, report)` per checkpoint when a validation set is configured.
    pub validation: Vec<(u64, MetricsReport)>,
    pub best: Option<u64>,
}

fn load_training_data(root: &Path) -> Result<Dataset> {
    let ds = load_dataset_root(root)?;
    for w in &ds.warnings {
        log::warn!("{w}");
    }
    Ok(ds)
}

fn train_typed<T: Scalar>(cfg: &RunConfig, data: &Dataset, out: &Path, init: &InitFrom) -> Result<TrainSummary> {
    let mut model = ClipModel::<T>::new(cfg.model.clone(), cfg.train.seed)?;
    if let Some(path) = &init.checkpoint {
        let source = Checkpoint::load(path)?;
        match &init.manifest {
            Some(m) => {
                let text = fs::read_to_string(m).map_err(|e| Error::Config(format!("{}: {e}", m.display())))?;
                let n = import_weights(&mut model, &source, &parse_manifest(&text)?)?;
                log::info!("imported {n} tensors from {}", path.display());
            }
            None => source.restore_into(&mut model)?,
        }
    }
    let mut trainer = Trainer::new(model, data, cfg.train.clone(), cfg.to_text())?;
    let outcome = trainer.run(out)?;
    let mut validation = Vec::new();
    if let Some(val) = &cfg.val_root {
        let val = load_training_data(val)?;
        for path in &outcome.checkpoints {
            let (model, ckpt) = load_model::<T>(path)?;
            let (report, _) = evaluate_dataset(&model, &val, cfg.deterministic)?;
            validation.push((ckpt.iteration, report));
        }
    }
    let best = select_best_checkpoint(&validation);
    Ok(TrainSummary {
        log: outcome.log,
        checkpoints: outcome.checkpoints,
        validation,
        best,
    })
}

/// Trains from `cfg` on the dataset at `data_root` (or `cfg.data_root`),
/// writing `train.log` and checkpoints to `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, init: &InitFrom) -> Result<TrainSummary> {
    cfg.validate()?;
    let root = cfg
        .data_root
        .as_deref()
        .ok_or_else(|| Error::Config("no training data: set data.root or pass --data".into()))?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let probe = out.join(".write_probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    let _ = fs::remove_file(&probe);
    let data = load_training_data(root)?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, &data, out, init),
        Precision::F64 => train_typed::<f64>(cfg, &data, out, init),
    }
}

/// Rebuilds the model stored in a checkpoint.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(ClipModel<T>, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ckpt.config_text)?;
    let mut model = ClipModel::new(cfg.model, cfg.train.seed)?;
    ckpt.restore_into(&mut model)?;
    Ok((model, ckpt))
}

fn checkpoint_config(path: &Path) -> Result<RunConfig> {
    RunConfig::parse(&Checkpoint::load(path)?.config_text)
}

fn eval_typed<T: Scalar>(checkpoint: &Path, data: &Dataset, sequential: bool) -> Result<MetricsReport> {
    let (model, _) = load_model::<T>(checkpoint)?;
    Ok(evaluate_dataset(&model, data, sequential)?.0)
}

/// Scores a checkpoint on a dataset root holding `frames/` and `annotations/`.
pub fn cmd_eval(checkpoint: &Path, data_root: &Path) -> Result<MetricsReport> {
    let cfg = checkpoint_config(checkpoint)?;
    let data = load_training_data(data_root)?;
    match cfg.precision {
        Precision::F32 => eval_typed::<f32>(checkpoint, &data, cfg.deterministic),
        Precision::F64 => eval_typed::<f64>(checkpoint, &data, cfg.deterministic),
    }
}

/// Scores several checkpoints and picks the best by `s`.
pub fn cmd_eval_many(checkpoints: &[PathBuf], data_root: &Path) -> Result<(Vec<(u64, MetricsReport)>, Option<u64>)> {
    let mut reports = Vec::new();
    for c in checkpoints {
        let iteration = Checkpoint::load(c)?.iteration;
        reports.push((iteration, cmd_eval(c, data_root)?));
    }
    let best = select_best_checkpoint(&reports);
    Ok((reports, best))
}

/// An unannotated video built from whatever images `dir` holds.
fn frames_only_video(id: &str, dir: &Path) -> Result<VideoRecord> {
    let images = scan_frames(dir)?;
    let len = images.keys().next_back().map_or(0, |&i| i + 1);
    Ok(VideoRecord {
        video_id: id.to_string(),
        frame_paths: (0..len).map(|i| dir.join(crate::data::frame_file_name(i))).collect(),
        labels: vec![-1; len],
        has_image: (0..len).map(|i| images.contains_key(&i)).collect(),
        valid: vec![false; len],
    })
}

fn predict_typed<T: Scalar>(checkpoint: &Path, videos: &[VideoRecord]) -> Result<String> {
    let (model, _) = load_model::<T>(checkpoint)?;
    let mut out = String::new();
    for v in videos {
        let p = evaluate_video(&model, v)?;
        for (i, (&c, &has)) in p.predicted.iter().zip(&v.has_image).enumerate() {
            let label = if has { c as i64 } else { -1 };
            let _ = writeln!(out, "{} {i} {label}", v.video_id);
        }
    }
    Ok(out)
}

/// Writes `<video_id> <frame_index> <predicted_class>` for every frame index
/// of every video directory under `frames_dir`; frames without an image get
/// `-1`. Returns the number of lines written.
pub fn cmd_predict(checkpoint: &Path, frames_dir: &Path, out: &Path) -> Result<usize> {
    let cfg = checkpoint_config(checkpoint)?;
    let mut ids = Vec::new();
    for entry in fs::read_dir(frames_dir).map_err(|e| Error::io(frames_dir, e))? {
        let path = entry.map_err(|e| Error::io(frames_dir, e))?.path();
        if path.is_dir() {
            if let Some(id) = path.file_name().and_then(|s| s.to_str()) {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    let videos: Vec<VideoRecord> = ids
        .iter()
        .map(|id| frames_only_video(id, &frames_dir.join(id)))
        .collect::<Result<_>>()?;
    let text = match cfg.precision {
        Precision::F32 => predict_typed::<f32>(checkpoint, &videos)?,
        Precision::F64 => predict_typed::<f64>(checkpoint, &videos)?,
    };
    fs::write(out, &text).map_err(|e| Error::io(out, e))?;
    Ok(text.lines().count())
}

/// Parses a predictions file into `video_id → frame_index → class`.
pub fn parse_predictions(text: &str) -> Result<BTreeMap<String, HashMap<usize, i64>>> {
    let mut out: BTreeMap<String, HashMap<usize, i64>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Data(format!("predictions line {}: expected `<video_id> <frame_index> <class>`", n + 1));
        let mut it = line.split_whitespace();
        let (Some(id), Some(idx), Some(cls), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad());
        };
        let idx: usize = idx.parse().map_err(|_| bad())?;
        let cls: i64 = cls.parse().map_err(|_| bad())?;
        if !(-1..crate::sequence::NUM_CLASSES as i64).contains(&cls) {
            return Err(Error::Data(format!("predictions line {}: class {cls} out of range", n + 1)));
        }
        out.entry(id.to_string()).or_default().insert(idx, cls);
    }
    Ok(out)
}

/// Scores a predictions file against an annotations directory. Frames with
/// a non-negative label are counted unless their prediction is `-1` (no
/// face image); a labeled frame missing from the file is an error.
pub fn cmd_metrics(predictions: &Path, annotations: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(predictions).map_err(|e| Error::io(predictions, e))?;
    let preds = parse_predictions(&text)?;
    let mut ids = Vec::new();
    for entry in fs::read_dir(annotations).map_err(|e| Error::io(annotations, e))? {
        let path = entry.map_err(|e| Error::io(annotations, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            ids.push(path);
        }
    }
    ids.sort();
    let mut cm = ConfusionMatrix::new();
    for path in ids {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let labels = crate::data::parse_annotations(&body).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let video_preds = preds.get(&id);
        for (i, &l) in labels.iter().enumerate() {
            if l < 0 {
                continue;
            }
            let p = video_preds
                .and_then(|m| m.get(&i))
                .ok_or_else(|| Error::Data(format!("no prediction for {id} frame {i}")))?;
            if *p >= 0 {
                cm.accumulate(l, *p, true)?;
            }
        }
    }
    MetricsReport::from_confusion(&cm)
}
