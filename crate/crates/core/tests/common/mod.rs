#![allow(dead_code)]

pub mod criteria;
pub mod grads;
pub mod oracles;

use std::path::Path;

use clipnet::backbone::BottleneckBlock;
use clipnet::data::{SynthSpec, VideoRecord};
use clipnet::layers::{Parameterized, Slot};
use clipnet::model::ClipModel;
use clipnet::numerics::Differentiable;
use clipnet::sequence::SequenceModel;
use clipnet::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Synthetic video record with no files behind it; only the label and
/// validity vectors matter to the sampler and the eval arrangement.
pub fn fake_video(id: &str, valid: &[bool]) -> VideoRecord {
    VideoRecord {
        video_id: id.to_string(),
        frame_paths: (0..valid.len()).map(|i| format!("{id}/{i:06}.png").into()).collect(),
        labels: valid.iter().map(|&v| if v { 0 } else { -1 }).collect(),
        has_image: vec![true; valid.len()],
        valid: valid.to_vec(),
    }
}

pub fn write_synth(root: &Path, videos: usize, frames: usize, seed: u64) {
    let spec = SynthSpec {
        num_videos: videos,
        frames_per_video: frames,
        image_size: 32,
        class_pattern_seed: 0,
    };
    clipnet::cli::cmd_synth(&spec, seed, root).unwrap();
}

/// A parameterized network viewed as a single map from its input to its output.
pub trait Net: Parameterized<f64> + Clone {
    type Cache;
    fn fwd(&mut self, x: &Tensor<f64>) -> Result<(Tensor<f64>, Self::Cache)>;
    fn bwd(&mut self, cache: &Self::Cache, g: &Tensor<f64>) -> Result<Tensor<f64>>;
}

impl Net for BottleneckBlock<f64> {
    type Cache = clipnet::backbone::BlockCache<f64>;
    fn fwd(&mut self, x: &Tensor<f64>) -> Result<(Tensor<f64>, Self::Cache)> {
        self.forward(x)
    }
    fn bwd(&mut self, cache: &Self::Cache, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.backward(cache, g)
    }
}

impl Net for SequenceModel<f64> {
    type Cache = clipnet::sequence::SequenceCache<f64>;
    fn fwd(&mut self, x: &Tensor<f64>) -> Result<(Tensor<f64>, Self::Cache)> {
        self.forward(x)
    }
    fn bwd(&mut self, cache: &Self::Cache, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.backward(cache, g)
    }
}

impl Net for ClipModel<f64> {
    type Cache = clipnet::model::ModelCache<f64>;
    fn fwd(&mut self, x: &Tensor<f64>) -> Result<(Tensor<f64>, Self::Cache)> {
        self.forward_train(x, clipnet::data::CLIP_LEN)
    }
    fn bwd(&mut self, cache: &Self::Cache, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.backward(cache, g)?.expect("backbone is trainable"))
    }
}

pub fn param_values<N: Parameterized<f64>>(net: &N) -> Vec<Tensor<f64>> {
    let mut out = Vec::new();
    net.visit("", &mut |_, slot| {
        if let clipnet::layers::SlotRef::Param(p) = slot {
            out.push(p.value.clone());
        }
    });
    out
}

fn load_params<N: Parameterized<f64>>(net: &mut N, values: &[Tensor<f64>]) {
    let mut it = values.iter();
    net.visit_mut("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            p.value = it.next().expect("one value per parameter").clone();
        }
    });
}

/// Every parameter redrawn from N(0, 1/fan_in); batch-norm gammas around 1.
pub fn randomize_params<N: Parameterized<f64>>(net: &mut N, rng: &mut ChaCha8Rng) {
    net.visit_mut("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            let shape = p.value.shape().to_vec();
            let fan = if shape.len() >= 2 { p.value.len() / shape[0] } else { 4 };
            let mut t = Tensor::randn(&shape, 1.0 / (fan as f64).sqrt(), rng);
            if name.ends_with("gamma") {
                t = t.map(|v| 1.0 + 0.5 * v);
            }
            p.value = t;
        }
    });
}

/// Inputs `[x, params in visit order]`; every call works on a fresh clone.
pub struct NetOp<N> {
    pub net: N,
    pub name: String,
}

impl<N: Net> NetOp<N> {
    pub fn inputs(&self, x: Tensor<f64>) -> Vec<Tensor<f64>> {
        std::iter::once(x).chain(param_values(&self.net)).collect()
    }

    fn loaded(&self, inputs: &[Tensor<f64>]) -> N {
        let mut net = self.net.clone();
        load_params(&mut net, &inputs[1..]);
        net
    }
}

impl<N: Net> Differentiable<f64> for NetOp<N> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(self.loaded(inputs).fwd(&inputs[0])?.0)
    }

    fn backward(&self, inputs: &[Tensor<f64>], _: &Tensor<f64>, cot: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let mut net = self.loaded(inputs);
        net.zero_grad();
        let (_, cache) = net.fwd(&inputs[0])?;
        let gx = net.bwd(&cache, cot)?;
        let mut out = vec![gx];
        net.visit("", &mut |_, slot| {
            if let clipnet::layers::SlotRef::Param(p) = slot {
                out.push(p.grad.clone());
            }
        });
        Ok(out)
    }
}
