//! Class-conditional synthetic corpus in the on-disk dataset layout.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{frame_file_name, ANNOTATION_HEADER, CLIP_LEN};
use crate::error::{Error, Result};
use crate::sequence::NUM_CLASSES;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    /// Varies colours and stripe periods of the class patterns.
    pub class_pattern_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_videos: 4,
            frames_per_video: 64,
            image_size: 32,
            class_pattern_seed: 0,
        }
    }
}

const MAX_RUN: usize = 2 * CLIP_LEN;
const NOISE: i32 = 12;

const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [200, 200, 200],
    [220, 40, 40],
    [60, 170, 60],
    [120, 60, 190],
    [240, 200, 30],
    [40, 90, 220],
    [240, 120, 20],
];

/// Foreground weight in `[0,1]` of class `class` at pixel `(x, y)`.
fn pattern(class: usize, x: usize, y: usize, size: usize, period: usize) -> f64 {
    let half = period / 2;
    let c = size as f64 / 2.0 - 0.5;
    let on = match class {
        0 => (y / half) % 2 == 0,
        1 => (x / half) % 2 == 0,
        2 => (x / half + y / half) % 2 == 0,
        3 => {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            dx * dx + dy * dy <= (size as f64 * 0.3).powi(2)
        }
        4 => ((x + y) / half) % 2 == 0,
        5 => {
            let b = size / 6 + 1;
            x < b || y < b || x >= size - b || y >= size - b
        }
        _ => {
            let w = size / 8 + 1;
            x.abs_diff(size / 2) < w || y.abs_diff(size / 2) < w
        }
    };
    if on {
        1.0
    } else {
        0.0
    }
}

/// The noise-free image of class `class`.
pub fn render_class_pattern(class: usize, size: usize, pattern_seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(pattern_seed.wrapping_mul(31).wrapping_add(class as u64));
    let period = ((size / 8).max(2) + rng.random_range(0..2usize)) * 2;
    let jitter: [i32; 3] = [rng.random_range(-20..=20), rng.random_range(-20..=20), rng.random_range(-20..=20)];
    let fg: [f64; 3] = std::array::from_fn(|c| (PALETTE[class][c] as i32 + jitter[c]).clamp(0, 255) as f64);
    let bg = [30.0, 30.0, 30.0];
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let a = pattern(class, x as usize, y as usize, size, period);
        Rgb(std::array::from_fn(|c| (a * fg[c] + (1.0 - a) * bg[c]).round() as u8))
    })
}

fn noisy(clean: &RgbImage, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut img = clean.clone();
    for px in img.pixels_mut() {
        for v in px.0.iter_mut() {
            *v = (*v as i32 + rng.random_range(-NOISE..=NOISE)).clamp(0, 255) as u8;
        }
    }
    img
}

/// Run lengths in `CLIP_LEN..=MAX_RUN` summing to `frames`.
fn run_lengths(frames: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut remaining = frames;
    while remaining > 0 {
        let len = if remaining <= MAX_RUN {
            remaining
        } else {
            rng.random_range(CLIP_LEN..=MAX_RUN).min(remaining - CLIP_LEN)
        };
        runs.push(len);
        remaining -= len;
    }
    runs
}

/// Writes `frames/` and `annotations/` under `root`. Labels come in runs of
/// at least eight frames that cycle through shuffled orderings of all
/// seven classes, so every class appears.
pub fn generate_synth(spec: &SynthSpec, seed: u64, root: &Path) -> Result<()> {
    if spec.num_videos == 0 || spec.frames_per_video < CLIP_LEN || spec.image_size < 8 {
        return Err(Error::InvalidArgument(format!(
            "synth needs ≥1 video, ≥{CLIP_LEN} frames per video and image size ≥8; got {spec:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let runs: Vec<Vec<usize>> = (0..spec.num_videos)
        .map(|_| run_lengths(spec.frames_per_video, &mut rng))
        .collect();
    let total_runs: usize = runs.iter().map(Vec::len).sum();
    if total_runs < NUM_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "synth corpus has only {total_runs} label runs; at least {NUM_CLASSES} are needed to cover every class"
        )));
    }

    let templates: Vec<RgbImage> = (0..NUM_CLASSES)
        .map(|k| render_class_pattern(k, spec.image_size, spec.class_pattern_seed))
        .collect();
    let mut order: Vec<usize> = Vec::new();
    let ann_dir = root.join("annotations");
    fs::create_dir_all(&ann_dir).map_err(|e| Error::io(&ann_dir, e))?;
    for (v, video_runs) in runs.iter().enumerate() {
        let id = format!("synth_{v:03}");
        let dir = root.join("frames").join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut text = format!("{ANNOTATION_HEADER}\n");
        let mut index = 0;
        for &len in video_runs {
            if order.is_empty() {
                order = (0..NUM_CLASSES).collect();
                order.shuffle(&mut rng);
            }
            let class = order.pop().unwrap();
            for _ in 0..len {
                let path = dir.join(frame_file_name(index));
                noisy(&templates[class], &mut rng)
                    .save(&path)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                text.push_str(&format!("{class}\n"));
                index += 1;
            }
        }
        let ann = ann_dir.join(format!("{id}.txt"));
        fs::write(&ann, text).map_err(|e| Error::io(&ann, e))?;
    }
    Ok(())
}
