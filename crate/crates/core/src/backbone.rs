//! Bottleneck residual network with attention in every block.
//!
//! Stem: 7×7/2 conv + BN + ReLU + 3×3/2 max pool. Four stages of bottleneck
//! blocks follow with stride pattern `[1, 2, 2, 2]`; the per-frame feature is
//! the global average pool of the last stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{Cbam, CbamCache, CbamParams, DEFAULT_REDUCTION, DEFAULT_SPATIAL_KERNEL};
use crate::error::{Error, Result};
use crate::layers::batchnorm::{BatchNorm2d, BnCache, BnMode, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
use crate::layers::conv::Conv2d;
use crate::layers::param::{join, Parameterized, Slot, SlotRef};
use crate::layers::pool::{global_pool, global_pool_backward, pool2d, pool2d_backward, PoolKind, PoolWindow};
use crate::numerics::ops::{elementwise_backward, relu, Elementwise};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Channel multiplier of the last 1×1 convolution in a bottleneck block.
pub const EXPANSION: usize = 4;

/// Stage block counts of the 101-layer network.
pub const RESNET101_STAGES: [usize; 4] = [3, 4, 23, 3];

const STEM_POOL: PoolWindow = PoolWindow {
    kh: 3,
    kw: 3,
    stride: 2,
    padding: 1,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CbamConfig {
    pub enabled: bool,
    pub reduction: usize,
    pub kernel_size: usize,
}

impl Default for CbamConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            reduction: DEFAULT_REDUCTION,
            kernel_size: DEFAULT_SPATIAL_KERNEL,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stage_blocks: [usize; 4],
    pub base_width: usize,
    pub input_channels: usize,
    pub input_size: usize,
    pub cbam: CbamConfig,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for BackboneConfig {
    /// Full-scale 101-layer configuration on 256×256 frames.
    fn default() -> Self {
        Self {
            stage_blocks: RESNET101_STAGES,
            base_width: 64,
            input_channels: 3,
            input_size: 256,
            cbam: CbamConfig::default(),
            bn_eps: DEFAULT_BN_EPS,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }
}

impl BackboneConfig {
    /// Stages `[1,1,1,1]`, width 4, 32×32 input.
    pub fn tiny() -> Self {
        Self {
            stage_blocks: [1, 1, 1, 1],
            base_width: 4,
            input_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_blocks.contains(&0) {
            return Err(Error::Config(format!(
                "every stage needs at least one block, got {:?}",
                self.stage_blocks
            )));
        }
        if self.base_width == 0 || self.input_channels == 0 {
            return Err(Error::Config("base_width and input_channels must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::Config("bn_eps must be > 0 and bn_momentum in (0,1)".into()));
        }
        if self.cbam.enabled {
            if self.cbam.kernel_size % 2 == 0 {
                return Err(Error::Config(format!(
                    "cbam kernel_size {} must be odd",
                    self.cbam.kernel_size
                )));
            }
            for stage in 0..4 {
                let c = self.stage_width(stage) * EXPANSION;
                if self.cbam.reduction == 0 || c % self.cbam.reduction != 0 {
                    return Err(Error::Config(format!(
                        "cbam reduction {} does not divide {} channels of stage {}",
                        self.cbam.reduction,
                        c,
                        stage + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Bottleneck width of `stage` (0-based).
    pub fn stage_width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_width(3) * EXPANSION
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_blocks.iter().sum()
    }

    /// Weighted layers in the conventional accounting: three convolutions
    /// per block, the stem convolution and the final classifier layer.
    pub fn layer_count(&self) -> usize {
        3 * self.total_blocks() + 2
    }
}

/// Residual unit: 1×1 → 3×3 (strided) → 1×1 with BN, attention on the
/// residual branch, then `relu(branch + shortcut)`.
#[derive(Clone, Debug)]
pub struct BottleneckBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub conv3: Conv2d<T>,
    pub bn3: BatchNorm2d<T>,
    pub cbam: Option<Cbam<T>>,
    pub shortcut: Option<(Conv2d<T>, BatchNorm2d<T>)>,
}

/// Forward intermediates of one block.
#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    x: Tensor<T>,
    c1: BnCache<T>,
    r1: Tensor<T>,
    c2: BnCache<T>,
    r2: Tensor<T>,
    c3: BnCache<T>,
    branch: Tensor<T>,
    attention: Option<CbamCache<T>>,
    shortcut: Option<BnCache<T>>,
    sum: Tensor<T>,
}

fn relu_backward<T: Scalar>(activated: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    // relu(y) > 0 exactly where y > 0, so the output stands in for the input.
    Ok(elementwise_backward(Elementwise::Relu, activated, None, activated, g)?.0)
}

impl<T: Scalar> BottleneckBlock<T> {
    pub fn new(
        cin: usize,
        width: usize,
        stride: usize,
        cfg: &BackboneConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let cout = width * EXPANSION;
        let bn = |c| BatchNorm2d::new(c, cfg.bn_eps, cfg.bn_momentum);
        let conv1 = Conv2d::new(cin, width, 1, 1, 0, false, rng);
        let conv2 = Conv2d::new(width, width, 3, stride, 1, false, rng);
        let conv3 = Conv2d::new(width, cout, 1, 1, 0, false, rng);
        let mut bn3 = bn(cout);
        bn3.gamma.value.fill(T::zero());
        let cbam = if cfg.cbam.enabled {
            Some(Cbam::from_params(CbamParams::random(
                cout,
                cfg.cbam.reduction,
                cfg.cbam.kernel_size,
                rng,
            )?))
        } else {
            None
        };
        let shortcut = (stride != 1 || cin != cout).then(|| (Conv2d::new(cin, cout, 1, stride, 0, false, rng), bn(cout)));
        Ok(Self {
            conv1,
            bn1: bn(width),
            conv2,
            bn2: bn(width),
            conv3,
            bn3,
            cbam,
            shortcut,
        })
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        for bn in [&mut self.bn1, &mut self.bn2, &mut self.bn3] {
            bn.mode = mode;
        }
        if let Some((_, bn)) = self.shortcut.as_mut() {
            bn.mode = mode;
        }
    }

    /// Forward honoring each batch-norm's mode; caches for [`Self::backward`].
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let a1 = self.conv1.forward(x)?;
        let (y1, c1) = self.bn1.forward(&a1)?;
        let r1 = relu(&y1);
        let a2 = self.conv2.forward(&r1)?;
        let (y2, c2) = self.bn2.forward(&a2)?;
        let r2 = relu(&y2);
        let a3 = self.conv3.forward(&r2)?;
        let (branch, c3) = self.bn3.forward(&a3)?;
        let attention = match &self.cbam {
            Some(att) => Some(att.forward(&branch)?),
            None => None,
        };
        let (short, shortcut) = match self.shortcut.as_mut() {
            Some((conv, bn)) => {
                let (s, c) = bn.forward(&conv.forward(x)?)?;
                (s, Some(c))
            }
            None => (x.clone(), None),
        };
        let mut sum = attention.as_ref().map_or_else(|| branch.clone(), |a| a.output().clone());
        sum.add_assign(&short)
            .map_err(|_| Error::shape("bottleneck", sum.shape(), short.shape()))?;
        let out = relu(&sum);
        Ok((
            out,
            BlockCache {
                x: x.clone(),
                c1,
                r1,
                c2,
                r2,
                c3,
                branch,
                attention,
                shortcut,
                sum,
            },
        ))
    }

    /// Running-statistics forward without mutation.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let r1 = relu(&self.bn1.forward_eval(&self.conv1.forward(x)?)?);
        let r2 = relu(&self.bn2.forward_eval(&self.conv2.forward(&r1)?)?);
        let branch = self.bn3.forward_eval(&self.conv3.forward(&r2)?)?;
        let mut sum = match &self.cbam {
            Some(att) => att.forward(&branch)?.output().clone(),
            None => branch,
        };
        let short = match &self.shortcut {
            Some((conv, bn)) => bn.forward_eval(&conv.forward(x)?)?,
            None => x.clone(),
        };
        sum.add_assign(&short)
            .map_err(|_| Error::shape("bottleneck", sum.shape(), short.shape()))?;
        Ok(relu(&sum))
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let g_sum = elementwise_backward(Elementwise::Relu, &cache.sum, None, &cache.sum, gy)?.0;
        let g_branch = match (self.cbam.as_mut(), cache.attention.as_ref()) {
            (Some(att), Some(ac)) => att.backward(&cache.branch, ac, &g_sum)?,
            _ => g_sum.clone(),
        };
        let g_a3 = self.bn3.backward(&cache.c3, &g_branch)?;
        let g_r2 = self.conv3.backward(&cache.r2, &g_a3)?;
        let g_a2 = self.bn2.backward(&cache.c2, &relu_backward(&cache.r2, &g_r2)?)?;
        let g_r1 = self.conv2.backward(&cache.r1, &g_a2)?;
        let g_a1 = self.bn1.backward(&cache.c1, &relu_backward(&cache.r1, &g_r1)?)?;
        let mut gx = self.conv1.backward(&cache.x, &g_a1)?;
        match (self.shortcut.as_mut(), cache.shortcut.as_ref()) {
            (Some((conv, bn)), Some(bc)) => {
                let g = bn.backward(bc, &g_sum)?;
                gx.add_assign(&conv.backward(&cache.x, &g)?)?;
            }
            _ => gx.add_assign(&g_sum)?,
        }
        Ok(gx)
    }
}

impl<T: Scalar> Parameterized<T> for BottleneckBlock<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
        self.bn3.visit_mut(&join(prefix, "bn3"), f);
        if let Some(att) = self.cbam.as_mut() {
            att.visit_mut(&join(prefix, "cbam"), f);
        }
        if let Some((conv, bn)) = self.shortcut.as_mut() {
            conv.visit_mut(&join(prefix, "downsample.0"), f);
            bn.visit_mut(&join(prefix, "downsample.1"), f);
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, SlotRef<'_, T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        self.bn3.visit(&join(prefix, "bn3"), f);
        if let Some(att) = self.cbam.as_ref() {
            att.visit(&join(prefix, "cbam"), f);
        }
        if let Some((conv, bn)) = self.shortcut.as_ref() {
            conv.visit(&join(prefix, "downsample.0"), f);
            bn.visit(&join(prefix, "downsample.1"), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone<T> {
    config: BackboneConfig,
    pub stem_conv: Conv2d<T>,
    pub stem_bn: BatchNorm2d<T>,
    /// `(name, block)` in execution order, e.g. `("layer3.0", ..)`.
    pub blocks: Vec<(String, BottleneckBlock<T>)>,
}

#[derive(Clone, Debug)]
pub struct BackboneCache<T> {
    x: Tensor<T>,
    stem_bn: BnCache<T>,
    stem_act: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    last: Tensor<T>,
}

impl<T: Scalar> Backbone<T> {
    /// Deterministic in `(config, seed)`.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let stem_conv = Conv2d::new(config.input_channels, config.base_width, 7, 2, 3, false, rng);
        let stem_bn = BatchNorm2d::new(config.base_width, config.bn_eps, config.bn_momentum);
        let mut blocks = Vec::with_capacity(config.total_blocks());
        let mut cin = config.base_width;
        for (stage, &count) in config.stage_blocks.iter().enumerate() {
            let width = config.stage_width(stage);
            for i in 0..count {
                let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                let block = BottleneckBlock::new(cin, width, stride, &config, rng)?;
                blocks.push((format!("layer{}.{}", stage + 1, i), block));
                cin = width * EXPANSION;
            }
        }
        Ok(Self {
            config,
            stem_conv,
            stem_bn,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.stem_bn.mode = mode;
        for (_, b) in &mut self.blocks {
            b.set_mode(mode);
        }
    }

    fn check_input(&self, frames: &Tensor<T>) -> Result<usize> {
        let (n, c, h, w) = frames.dims4("extract_features")?;
        let s = self.config.input_size;
        if c != self.config.input_channels || h != s || w != s {
            return Err(Error::shape(
                "extract_features",
                frames.shape(),
                &[n, self.config.input_channels, s, s],
            ));
        }
        Ok(n)
    }

    /// `frames: [N,C,S,S]` → `[N,D]`, honoring batch-norm modes.
    pub fn forward(&mut self, frames: &Tensor<T>) -> Result<(Tensor<T>, BackboneCache<T>)> {
        let n = self.check_input(frames)?;
        let (y, stem_bn) = self.stem_bn.forward(&self.stem_conv.forward(frames)?)?;
        let stem_act = relu(&y);
        let mut h = pool2d(&stem_act, PoolKind::Max, STEM_POOL)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (_, block) in &mut self.blocks {
            let (out, cache) = block.forward(&h)?;
            caches.push(cache);
            h = out;
        }
        let features = global_pool(&h, PoolKind::Avg)?.reshape(&[n, self.feature_dim()])?;
        Ok((
            features,
            BackboneCache {
                x: frames.clone(),
                stem_bn,
                stem_act,
                blocks: caches,
                last: h,
            },
        ))
    }

    /// Eval-mode features; pure.
    pub fn extract_features(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_input(frames)?;
        let y = self.stem_bn.forward_eval(&self.stem_conv.forward(frames)?)?;
        let mut h = pool2d(&relu(&y), PoolKind::Max, STEM_POOL)?;
        for (_, block) in &self.blocks {
            h = block.forward_eval(&h)?;
        }
        global_pool(&h, PoolKind::Avg)?.reshape(&[n, self.feature_dim()])
    }

    /// Accumulates parameter gradients; returns the cotangent of the frames.
    pub fn backward(&mut self, cache: &BackboneCache<T>, g_features: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = cache.last.dims4("backbone_backward")?;
        g_features.expect_shape("backbone_backward", &[n, c])?;
        let g4 = g_features.clone().reshape(&[n, c, 1, 1])?;
        let mut g = global_pool_backward(&cache.last, PoolKind::Avg, &g4)?;
        debug_assert_eq!(g.shape(), &[n, c, h, w]);
        for ((_, block), bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = block.backward(bc, &g)?;
        }
        let g = pool2d_backward(&cache.stem_act, PoolKind::Max, STEM_POOL, &g)?;
        let g = relu_backward(&cache.stem_act, &g)?;
        let g = self.stem_bn.backward(&cache.stem_bn, &g)?;
        self.stem_conv.backward(&cache.x, &g)
    }
}

impl<T: Scalar> Parameterized<T> for Backbone<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        self.stem_conv.visit_mut(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit_mut(&join(prefix, "stem.bn"), f);
        for (name, block) in &mut self.blocks {
            block.visit_mut(&join(prefix, name), f);
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, SlotRef<'_, T>)) {
        self.stem_conv.visit(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit(&join(prefix, "stem.bn"), f);
        for (name, block) in &self.blocks {
            block.visit(&join(prefix, name), f);
        }
    }
}
