//! The end-to-end clip classifier: per-frame backbone features, a BLSTM over
//! each clip, and per-timestep logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneCache, BackboneConfig};
use crate::error::{Error, Result};
use crate::layers::batchnorm::BnMode;
use crate::layers::param::{join, Parameterized, Slot, SlotRef};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::sequence::{SequenceCache, SequenceConfig, SequenceModel, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub hidden_size: usize,
    pub head_hidden: usize,
    /// Train only the sequence part; the backbone stays in eval mode.
    pub freeze_backbone: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            hidden_size: 128,
            head_hidden: 64,
            freeze_backbone: false,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig::tiny(),
            hidden_size: 16,
            head_hidden: 16,
            freeze_backbone: false,
        }
    }

    pub fn sequence_config(&self) -> SequenceConfig {
        SequenceConfig {
            input_dim: self.backbone.feature_dim(),
            hidden_size: self.hidden_size,
            head_hidden: self.head_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.sequence_config().validate()
    }
}

#[derive(Clone, Debug)]
pub struct ClipModel<T> {
    config: ModelConfig,
    pub backbone: Backbone<T>,
    pub sequence: SequenceModel<T>,
}

#[derive(Clone, Debug)]
pub struct ModelCache<T> {
    clip_len: usize,
    backbone: Option<BackboneCache<T>>,
    clips: Vec<SequenceCache<T>>,
}

impl<T: Scalar> ClipModel<T> {
    /// Deterministic in `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::with_rng(config.backbone.clone(), &mut rng)?;
        let sequence = SequenceModel::new(config.sequence_config(), &mut rng)?;
        Ok(Self {
            config,
            backbone,
            sequence,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn split(frames: &Tensor<T>, clip_len: usize) -> Result<usize> {
        let n = frames.shape().first().copied().unwrap_or(0);
        if clip_len == 0 || n == 0 || n % clip_len != 0 {
            return Err(Error::InvalidArgument(format!(
                "{n} frames do not form whole clips of length {clip_len}"
            )));
        }
        Ok(n / clip_len)
    }

    /// Training forward. `frames: [B·L,3,S,S]` holds `B` clips of `L` frames
    /// back to back; returns logits `[B·L,7]` in the same order. Batch norm
    /// normalizes over all `B·L` frames.
    pub fn forward_train(&mut self, frames: &Tensor<T>, clip_len: usize) -> Result<(Tensor<T>, ModelCache<T>)> {
        let clips = Self::split(frames, clip_len)?;
        let (features, backbone) = if self.config.freeze_backbone {
            (self.backbone.extract_features(frames)?, None)
        } else {
            self.backbone.set_mode(BnMode::Train);
            let (f, c) = self.backbone.forward(frames)?;
            (f, Some(c))
        };
        let mut logits = Vec::with_capacity(clips);
        let mut caches = Vec::with_capacity(clips);
        for b in 0..clips {
            let (l, c) = self.sequence.forward(&features.slice_outer(b * clip_len, clip_len)?)?;
            logits.push(l);
            caches.push(c);
        }
        Ok((
            Tensor::concat_outer(&logits)?,
            ModelCache {
                clip_len,
                backbone,
                clips: caches,
            },
        ))
    }

    /// Accumulates gradients of every trainable parameter given the
    /// cotangent of the logits from [`Self::forward_train`]. Returns the
    /// cotangent of the frames, or `None` when the backbone is frozen.
    pub fn backward(&mut self, cache: &ModelCache<T>, g_logits: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        let l = cache.clip_len;
        g_logits.expect_shape("model_backward", &[cache.clips.len() * l, NUM_CLASSES])?;
        let mut g_features = Vec::with_capacity(cache.clips.len());
        for (b, c) in cache.clips.iter().enumerate() {
            g_features.push(self.sequence.backward(c, &g_logits.slice_outer(b * l, l)?)?);
        }
        match &cache.backbone {
            Some(bc) => Ok(Some(self.backbone.backward(bc, &Tensor::concat_outer(&g_features)?)?)),
            None => Ok(None),
        }
    }

    /// Eval-mode logits `[B·L,7]`; pure.
    pub fn infer(&self, frames: &Tensor<T>, clip_len: usize) -> Result<Tensor<T>> {
        let clips = Self::split(frames, clip_len)?;
        let features = self.backbone.extract_features(frames)?;
        let mut logits = Vec::with_capacity(clips);
        for b in 0..clips {
            logits.push(self.sequence.forward(&features.slice_outer(b * clip_len, clip_len)?)?.0);
        }
        Tensor::concat_outer(&logits)
    }
}

impl<T: Scalar> Parameterized<T> for ClipModel<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.sequence.visit_mut(prefix, f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, SlotRef<'_, T>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.sequence.visit(prefix, f);
    }
}
