//! Frame-level evaluation: confusion matrix, accuracy, per-class and macro
//! F1, and the combined score `0.33·acc + 0.67·macro_f1`.

use std::fmt;

use rayon::prelude::*;

use crate::data::{eval_windows, load_clip, Dataset, VideoRecord, CLIP_LEN};
use crate::error::{Error, Result};
use crate::model::ClipModel;
use crate::scalar::Scalar;
use crate::sequence::{predict, CLASS_NAMES, NUM_CLASSES};

pub const ACC_WEIGHT: f64 = 0.33;
pub const F1_WEIGHT: f64 = 0.67;

/// `counts[i][j]`: frames of true class `i` predicted as `j`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Counts one frame when `mask` holds. Labels outside `0..7` are an error.
    pub fn accumulate(&mut self, truth: i64, predicted: i64, mask: bool) -> Result<()> {
        if !mask {
            return Ok(());
        }
        let range = 0..NUM_CLASSES as i64;
        if !range.contains(&truth) || !range.contains(&predicted) {
            return Err(Error::InvalidArgument(format!(
                "confusion matrix entry ({truth}, {predicted}) outside 0..{NUM_CLASSES}"
            )));
        }
        self.counts[truth as usize][predicted as usize] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    match cm.total() {
        0 => Err(Error::Data("accuracy over zero evaluated frames".into())),
        t => Ok(cm.correct() as f64 / t as f64),
    }
}

/// Per-class F1 from precision `diag/colsum` and recall `diag/rowsum`. A
/// class whose precision or recall is 0/0 scores 0.
pub fn f1_scores(cm: &ConfusionMatrix) -> [f64; NUM_CLASSES] {
    std::array::from_fn(|k| {
        let tp = cm.counts[k][k] as f64;
        let predicted: u64 = (0..NUM_CLASSES).map(|i| cm.counts[i][k]).sum();
        let actual: u64 = cm.counts[k].iter().sum();
        if predicted == 0 || actual == 0 {
            return 0.0;
        }
        let precision = tp / predicted as f64;
        let recall = tp / actual as f64;
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    })
}

/// Unweighted mean over all seven classes.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    f1_scores(cm).iter().sum::<f64>() / NUM_CLASSES as f64
}

pub fn final_metric(acc: f64, macro_f1: f64) -> f64 {
    ACC_WEIGHT * acc + F1_WEIGHT * macro_f1
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub acc: f64,
    pub f1_per_class: [f64; NUM_CLASSES],
    pub macro_f1: f64,
    pub s: f64,
    pub frames_evaluated: u64,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let acc = accuracy(cm)?;
        let f1_per_class = f1_scores(cm);
        let macro_f1 = f1_per_class.iter().sum::<f64>() / NUM_CLASSES as f64;
        Ok(Self {
            acc,
            f1_per_class,
            macro_f1,
            s: final_metric(acc, macro_f1),
            frames_evaluated: cm.total(),
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "acc = {:.4}", self.acc)?;
        writeln!(f, "macro_f1 = {:.4}", self.macro_f1)?;
        writeln!(f, "s = {:.4}", self.s)?;
        writeln!(f, "frames_evaluated = {}", self.frames_evaluated)?;
        for (name, v) in CLASS_NAMES.iter().zip(&self.f1_per_class) {
            writeln!(f, "f1.{name} = {v:.4}")?;
        }
        Ok(())
    }
}

/// Predicted class of every frame of one video. `counted` is false for
/// invalid frames; padding never appears.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoPredictions {
    pub video_id: String,
    pub predicted: Vec<usize>,
    pub counted: Vec<bool>,
}

impl VideoPredictions {
    pub fn accumulate_into(&self, video: &VideoRecord, cm: &mut ConfusionMatrix) -> Result<()> {
        for ((&p, &c), &l) in self.predicted.iter().zip(&self.counted).zip(&video.labels) {
            cm.accumulate(l, p as i64, c)?;
        }
        Ok(())
    }
}

/// Arranges the video into consecutive 8-frame clips, zero-pads the last
/// one and labels every real frame.
pub fn evaluate_video<T: Scalar>(model: &ClipModel<T>, video: &VideoRecord) -> Result<VideoPredictions> {
    let size = model.config().backbone.input_size;
    let mut predicted = Vec::with_capacity(video.len());
    for w in eval_windows(video.len()) {
        let clip = load_clip::<T>(video, w.start, size)?;
        let logits = model.infer(&clip.frames, CLIP_LEN)?;
        predicted.extend(predict(&logits)?.into_iter().take(w.real));
    }
    Ok(VideoPredictions {
        video_id: video.video_id.clone(),
        predicted,
        counted: video.valid.clone(),
    })
}

/// Evaluates every video, in parallel unless `sequential`. The reduction is
/// merged in video order so both modes agree exactly.
pub fn evaluate_dataset<T: Scalar>(
    model: &ClipModel<T>,
    dataset: &Dataset,
    sequential: bool,
) -> Result<(MetricsReport, Vec<VideoPredictions>)> {
    if dataset.videos.is_empty() {
        return Err(Error::Data("evaluation dataset has no videos".into()));
    }
    let preds: Vec<VideoPredictions> = if sequential {
        dataset
            .videos
            .iter()
            .map(|v| evaluate_video(model, v))
            .collect::<Result<_>>()?
    } else {
        dataset
            .videos
            .par_iter()
            .map(|v| evaluate_video(model, v))
            .collect::<Result<_>>()?
    };
    let mut cm = ConfusionMatrix::new();
    for (p, v) in preds.iter().zip(&dataset.videos) {
        p.accumulate_into(v, &mut cm)?;
    }
    Ok((MetricsReport::from_confusion(&cm)?, preds))
}

/// Highest `s`; ties go to the lowest iteration.
pub fn select_best_checkpoint(reports: &[(u64, MetricsReport)]) -> Option<u64> {
    reports
        .iter()
        .min_by(|(ia, a), (ib, b)| b.s.total_cmp(&a.s).then(ia.cmp(ib)))
        .map(|(i, _)| *i)
}
