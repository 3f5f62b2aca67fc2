//! Clip training: batch assembly, SGD with momentum, logging, checkpoints.

mod checkpoint;
mod optim;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{config_digest, Checkpoint, NamedTensor, RngState, FORMAT_VERSION, MAGIC};
pub use optim::Sgd;

use crate::data::{load_clip, Clip, ClipSampler, Dataset, CLIP_LEN};
use crate::error::{Error, Result};
use crate::layers::loss::softmax_cross_entropy;
use crate::layers::param::{Parameterized, Slot};
use crate::model::ClipModel;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub clips_per_batch: usize,
    pub checkpoint_every: usize,
    pub max_iterations: usize,
    pub seed: u64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            momentum: 0.9,
            clips_per_batch: 4,
            checkpoint_every: 1000,
            max_iterations: 5000,
            seed: 0,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("train.learning_rate must be finite and ≥ 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad(format!("train.grad_clip must be finite and ≥ 0, got {}", self.grad_clip));
        }
        for (key, v) in [
            ("train.clips_per_batch", self.clips_per_batch),
            ("train.checkpoint_every", self.checkpoint_every),
            ("train.max_iterations", self.max_iterations),
        ] {
            if v == 0 {
                return bad(format!("{key} must be positive"));
            }
        }
        Ok(())
    }
}

/// Iterations after which a checkpoint is written.
pub fn checkpoint_schedule(cfg: &TrainConfig) -> Vec<usize> {
    let mut s: Vec<usize> = (1..=cfg.max_iterations / cfg.checkpoint_every)
        .map(|k| k * cfg.checkpoint_every)
        .collect();
    if s.last() != Some(&cfg.max_iterations) {
        s.push(cfg.max_iterations);
    }
    s
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("ckpt_{iteration:08}.clp")
}

/// Concatenates clips into `([B·8,3,S,S], labels, mask)`.
pub fn assemble_batch<T: Scalar>(batch: &[Clip<T>]) -> Result<(Tensor<T>, Vec<i64>, Vec<bool>)> {
    let frames: Vec<Tensor<T>> = batch.iter().map(|c| c.frames.clone()).collect();
    let labels = batch.iter().flat_map(|c| c.labels.iter().copied()).collect();
    let mask = batch.iter().flat_map(|c| c.mask.iter().copied()).collect();
    Ok((Tensor::concat_outer(&frames)?, labels, mask))
}

/// Masked cross-entropy of the model on `batch` with gradients accumulated
/// into the model (after zeroing). Parameters are not changed.
pub fn loss_and_gradients<T: Scalar>(model: &mut ClipModel<T>, batch: &[Clip<T>]) -> Result<T> {
    let (frames, labels, mask) = assemble_batch(batch)?;
    model.zero_grad();
    let (logits, cache) = model.forward_train(&frames, CLIP_LEN)?;
    let (loss, g) = softmax_cross_entropy(&logits, &labels, &mask)?;
    if !loss.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|c| c.video_id.as_str()).collect();
        return Err(Error::NonFinite(format!("loss {loss} on clips from {}", ids.join(","))));
    }
    model.backward(&cache, &g)?;
    Ok(loss)
}

/// One optimization step; returns the pre-update loss.
pub fn train_step<T: Scalar>(
    model: &mut ClipModel<T>,
    batch: &[Clip<T>],
    opt: &mut Sgd<T>,
    cfg: &TrainConfig,
) -> Result<T> {
    let loss = loss_and_gradients(model, batch)?;
    opt.step(model, cfg.learning_rate, cfg.momentum, cfg.grad_clip)?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub time_ms: f64,
}

impl LogEntry {
    /// Parses `iter=<n> loss=<val> time_ms=<val>`.
    pub fn parse(line: &str) -> Option<Self> {
        let mut it = line.split_whitespace();
        let mut field = |key: &str| it.next()?.strip_prefix(key)?.strip_prefix('=').map(str::to_string);
        Some(Self {
            iteration: field("iter")?.parse().ok()?,
            loss: field("loss")?.parse().ok()?,
            time_ms: field("time_ms")?.parse().ok()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogEntry>,
    pub checkpoints: Vec<PathBuf>,
}

/// Trainer state: owns the model, optimizer and sampling RNG.
pub struct Trainer<'d, T> {
    pub model: ClipModel<T>,
    pub opt: Sgd<T>,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    dataset: &'d Dataset,
    sampler: ClipSampler,
    cfg: TrainConfig,
    config_text: String,
}

impl<'d, T: Scalar> Trainer<'d, T> {
    /// `config_text` is stored in every checkpoint.
    pub fn new(model: ClipModel<T>, dataset: &'d Dataset, cfg: TrainConfig, config_text: String) -> Result<Self> {
        cfg.validate()?;
        let sampler = ClipSampler::new(dataset)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            opt: Sgd::new(),
            rng,
            iteration: 0,
            dataset,
            sampler,
            cfg,
            config_text,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn sample_batch(&mut self) -> Result<Vec<Clip<T>>> {
        let size = self.model.config().backbone.input_size;
        (0..self.cfg.clips_per_batch)
            .map(|_| {
                let w = self.sampler.sample(&mut self.rng);
                load_clip(&self.dataset.videos[w.video], w.start, size)
            })
            .collect()
    }

    /// Samples a batch and takes one step; returns the pre-update loss.
    pub fn step(&mut self) -> Result<T> {
        let batch = self.sample_batch()?;
        let loss = train_step(&mut self.model, &batch, &mut self.opt, &self.cfg).map_err(|e| match e {
            Error::NonFinite(_) => e.context(format!("iteration {}", self.iteration)),
            other => other,
        })?;
        self.iteration += 1;
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.model,
            &self.opt.velocity,
            &self.rng,
            self.iteration as u64,
            &self.config_text,
        )
    }

    /// Runs until `max_iterations`, appending to `<dir>/train.log` and writing
    /// checkpoints on schedule.
    pub fn run(&mut self, dir: &Path) -> Result<TrainOutcome> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join("train.log");
        let mut log_file = File::options()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut outcome = TrainOutcome {
            log: Vec::new(),
            checkpoints: Vec::new(),
        };
        while self.iteration < self.cfg.max_iterations {
            let k = self.iteration;
            let t0 = Instant::now();
            let loss = self.step()?;
            let time_ms = t0.elapsed().as_secs_f64() * 1e3;
            writeln!(log_file, "iter={k} loss={loss} time_ms={time_ms:.3}").map_err(|e| Error::io(&log_path, e))?;
            log::debug!("iter={k} loss={loss}");
            outcome.log.push(LogEntry {
                iteration: k,
                loss: loss.as_f64(),
                time_ms,
            });
            let done = self.iteration;
            if done % self.cfg.checkpoint_every == 0 || done == self.cfg.max_iterations {
                let path = dir.join(checkpoint_name(done));
                self.checkpoint().save(&path)?;
                log::info!("iteration {done}: loss {loss}, wrote {}", path.display());
                outcome.checkpoints.push(path);
            }
        }
        Ok(outcome)
    }
}

/// Trains `model` on `dataset` per `cfg`, writing checkpoints to `dir`.
pub fn train_loop<T: Scalar>(
    dataset: &Dataset,
    model: ClipModel<T>,
    cfg: &TrainConfig,
    dir: &Path,
    config_text: &str,
) -> Result<(ClipModel<T>, TrainOutcome)> {
    let mut trainer = Trainer::new(model, dataset, cfg.clone(), config_text.to_string())?;
    let outcome = trainer.run(dir)?;
    Ok((trainer.model, outcome))
}

/// Parses a weight-import manifest: one `source -> target` pair per line;
/// blank lines and `#` comments are ignored.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (src, dst) = line
            .split_once("->")
            .ok_or_else(|| Error::Config(format!("manifest line {}: expected `source -> target`", n + 1)))?;
        let (src, dst) = (src.trim(), dst.trim());
        if src.is_empty() || dst.is_empty() {
            return Err(Error::Config(format!("manifest line {}: empty name", n + 1)));
        }
        out.push((src.to_string(), dst.to_string()));
    }
    Ok(out)
}

/// Copies tensors named in `manifest` from `source` into `model`. Returns the
/// number of tensors copied.
pub fn import_weights<T: Scalar>(
    model: &mut dyn Parameterized<T>,
    source: &Checkpoint,
    manifest: &[(String, String)],
) -> Result<usize> {
    let mut pending: std::collections::BTreeMap<&str, &NamedTensor> = std::collections::BTreeMap::new();
    for (src, dst) in manifest {
        let e = source
            .params
            .iter()
            .find(|e| &e.name == src)
            .ok_or_else(|| Error::Data(format!("import: source has no tensor {src}")))?;
        pending.insert(dst.as_str(), e);
    }
    let mut copied = 0;
    let mut failure = None;
    model.visit_mut("", &mut |name, slot| {
        let Some(e) = pending.remove(name.as_str()) else { return };
        let target = match slot {
            Slot::Param(p) => &mut p.value,
            Slot::Buffer(b) => b,
        };
        if e.shape != target.shape() {
            failure.get_or_insert(Error::shape("import_weights", &e.shape, target.shape()));
            return;
        }
        match e.to_tensor() {
            Ok(t) => {
                *target = t;
                copied += 1;
            }
            Err(err) => {
                failure.get_or_insert(err);
            }
        }
    });
    if let Some(err) = failure {
        return Err(err);
    }
    if let Some(missing) = pending.keys().next() {
        return Err(Error::Data(format!("import: model has no tensor {missing}")));
    }
    Ok(copied)
}
