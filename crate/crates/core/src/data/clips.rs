use rand::Rng;

use super::{load_frame, Dataset, VideoRecord, CLIP_LEN};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Clip<T> {
    pub video_id: String,
    pub start_index: usize,
    /// `[8,3,S,S]`; zero at padded positions.
    pub frames: Tensor<T>,
    /// `-1` at padded positions.
    pub labels: Vec<i64>,
    /// False for padded or invalid frames.
    pub mask: Vec<bool>,
}

/// A clip position before any image is decoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClipWindow {
    /// Index into [`Dataset::videos`].
    pub video: usize,
    pub start: usize,
}

/// Builds the clip starting at `start`. Frames with an image are decoded
/// even when unlabeled; positions past the end of the video are padding.
pub fn load_clip<T: Scalar>(video: &VideoRecord, start: usize, size: usize) -> Result<Clip<T>> {
    let plane = 3 * size * size;
    let mut data = vec![T::zero(); CLIP_LEN * plane];
    let mut labels = vec![-1; CLIP_LEN];
    let mut mask = vec![false; CLIP_LEN];
    for k in 0..CLIP_LEN {
        let i = start + k;
        if i >= video.len() {
            break;
        }
        labels[k] = video.labels[i];
        mask[k] = video.valid[i];
        if video.has_image[i] {
            let f = load_frame::<T>(&video.frame_paths[i], size)?;
            data[k * plane..(k + 1) * plane].copy_from_slice(f.data());
        }
    }
    Ok(Clip {
        video_id: video.video_id.clone(),
        start_index: start,
        frames: Tensor::new(&[CLIP_LEN, 3, size, size], data)?,
        labels,
        mask,
    })
}

/// Uniform over videos that own at least one all-valid window, then uniform
/// over that video's windows.
#[derive(Clone, Debug)]
pub struct ClipSampler {
    eligible: Vec<(usize, Vec<usize>)>,
}

impl ClipSampler {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let eligible: Vec<(usize, Vec<usize>)> = dataset
            .videos
            .iter()
            .enumerate()
            .map(|(i, v)| (i, v.valid_windows()))
            .filter(|(_, w)| !w.is_empty())
            .collect();
        if eligible.is_empty() {
            return Err(Error::Data(format!(
                "no video has {CLIP_LEN} consecutive valid frames"
            )));
        }
        Ok(Self { eligible })
    }

    /// Indices of the videos that can be sampled.
    pub fn eligible_videos(&self) -> Vec<usize> {
        self.eligible.iter().map(|(i, _)| *i).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ClipWindow {
        let (video, starts) = &self.eligible[rng.random_range(0..self.eligible.len())];
        ClipWindow {
            video: *video,
            start: starts[rng.random_range(0..starts.len())],
        }
    }
}

/// Draws one training clip. Prefer reusing a [`ClipSampler`] in loops.
pub fn sample_training_clip<T: Scalar, R: Rng + ?Sized>(
    dataset: &Dataset,
    rng: &mut R,
    size: usize,
) -> Result<Clip<T>> {
    let w = ClipSampler::new(dataset)?.sample(rng);
    load_clip(&dataset.videos[w.video], w.start, size)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalWindow {
    pub start: usize,
    /// Positions that hold a real frame; the rest are padding.
    pub real: usize,
}

/// Non-overlapping windows covering `0..len`; the last may be partial.
pub fn eval_windows(len: usize) -> Vec<EvalWindow> {
    (0..len.div_ceil(CLIP_LEN))
        .map(|k| {
            let start = k * CLIP_LEN;
            EvalWindow {
                start,
                real: CLIP_LEN.min(len - start),
            }
        })
        .collect()
}

pub fn make_eval_clips<T: Scalar>(video: &VideoRecord, size: usize) -> Result<Vec<Clip<T>>> {
    eval_windows(video.len())
        .into_iter()
        .map(|w| load_clip(video, w.start, size))
        .collect()
}
