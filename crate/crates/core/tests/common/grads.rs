//! Randomized gradient-check cases for every differentiable op and the
//! composed blocks.

use clipnet::attention::{CbamOp, ChannelAttentionOp, SpatialAttentionOp};
use clipnet::backbone::{BackboneConfig, BottleneckBlock, CbamConfig};
use clipnet::layers::{
    BatchNormEvalOp, BatchNormTrainOp, BnMode, ChannelPoolOp, Conv2dOp, DenseOp, GlobalPoolOp, LstmCellOp, Pool2dOp,
    PoolKind, PoolWindow, SoftmaxCrossEntropyOp,
};
use clipnet::model::{ClipModel, ModelConfig};
use clipnet::numerics::{backward_linearity_error, grad_check_with, Differentiable, Elementwise, ElementwiseOp, GradCheckOptions};
use clipnet::sequence::{SequenceConfig, SequenceModel, NUM_CLASSES};
use clipnet::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{randn, randomize_params, rng, NetOp};

pub const SEEDS: u64 = 20;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const LINEARITY_TOLERANCE: f64 = 1e-10;

pub const OP_CASES: &[&str] = &[
    "add",
    "add_channel_broadcast",
    "add_spatial_broadcast",
    "mul",
    "mul_channel_broadcast",
    "mul_spatial_broadcast",
    "relu",
    "sigmoid",
    "tanh",
    "conv2d",
    "batch_norm_train",
    "batch_norm_eval",
    "max_pool",
    "avg_pool",
    "global_max_pool",
    "global_avg_pool",
    "channel_max_pool",
    "channel_avg_pool",
    "dense",
    "softmax_cross_entropy",
    "lstm_cell",
    "channel_attention",
    "spatial_attention",
    "cbam",
];

pub const COMPOSED_CASES: &[&str] = &["bottleneck_cbam", "blstm_head", "full_model"];

pub struct Case {
    pub op: Box<dyn Differentiable<f64>>,
    pub inputs: Vec<Tensor<f64>>,
    /// Elements checked per input; `None` checks all.
    pub sample: Option<usize>,
}

impl Case {
    fn full(op: impl Differentiable<f64> + 'static, inputs: Vec<Tensor<f64>>) -> Self {
        Self {
            op: Box::new(op),
            inputs,
            sample: None,
        }
    }
}

fn nchw(r: &mut ChaCha8Rng) -> [usize; 4] {
    [r.random_range(1..=2), r.random_range(1..=3), r.random_range(2..=5), r.random_range(2..=5)]
}

fn elementwise(kind: Elementwise, broadcast: Option<usize>, r: &mut ChaCha8Rng) -> Case {
    let s = nchw(r);
    let x = randn(&s, r);
    let mut inputs = vec![x];
    if kind.is_binary() {
        let mut t = s;
        match broadcast {
            Some(1) => (t[2], t[3]) = (1, 1),
            Some(_) => t[1] = 1,
            None => {}
        }
        inputs.push(randn(&t, r));
    }
    Case::full(ElementwiseOp(kind), inputs)
}

fn cbam_inputs(r: &mut ChaCha8Rng) -> (usize, Vec<Tensor<f64>>) {
    let c = [2, 4, 6][r.random_range(0..3)];
    let reduction = [1, 2][r.random_range(0..2)];
    let k = [1, 3, 5][r.random_range(0..3)];
    let f = randn(&[r.random_range(1..=2), c, r.random_range(2..=5), r.random_range(2..=5)], r);
    let hid = c / reduction;
    let inputs = vec![
        f,
        randn(&[hid, c], r),
        randn(&[c, hid], r),
        randn(&[1, 2, k, k], r),
        randn(&[1], r),
    ];
    (reduction, inputs)
}

fn pool_case(kind: PoolKind, r: &mut ChaCha8Rng) -> Case {
    let k = r.random_range(2..=3);
    let padding = if k == 3 { r.random_range(0..=1) } else { 0 };
    let window = PoolWindow {
        kh: k,
        kw: k,
        stride: r.random_range(1..=2),
        padding,
    };
    let s = [r.random_range(1..=2), r.random_range(1..=3), r.random_range(k..=k + 3), r.random_range(k..=k + 3)];
    Case::full(Pool2dOp { kind, window }, vec![randn(&s, r)])
}

fn bottleneck(r: &mut ChaCha8Rng) -> Case {
    let cfg = BackboneConfig {
        cbam: CbamConfig {
            enabled: true,
            reduction: 2,
            kernel_size: 3,
        },
        ..BackboneConfig::tiny()
    };
    let cin = [4, 8][r.random_range(0..2)];
    let stride = r.random_range(1..=2);
    let mut block = BottleneckBlock::<f64>::new(cin, 2, stride, &cfg, r).unwrap();
    block.set_mode(BnMode::Train);
    randomize_params(&mut block, r);
    let x = randn(&[2, cin, 5, 5], r);
    let op = NetOp {
        net: block,
        name: "bottleneck_cbam".into(),
    };
    let inputs = op.inputs(x);
    Case {
        op: Box::new(op),
        inputs,
        sample: None,
    }
}

fn blstm_head(r: &mut ChaCha8Rng) -> Case {
    let cfg = SequenceConfig {
        input_dim: r.random_range(2..=6),
        hidden_size: r.random_range(2..=5),
        head_hidden: r.random_range(2..=6),
    };
    let mut net = SequenceModel::<f64>::new(cfg.clone(), r).unwrap();
    randomize_params(&mut net, r);
    let x = randn(&[r.random_range(1..=8), cfg.input_dim], r);
    let op = NetOp {
        net,
        name: "blstm_head".into(),
    };
    let inputs = op.inputs(x);
    Case {
        op: Box::new(op),
        inputs,
        sample: None,
    }
}

fn full_model(seed: u64, r: &mut ChaCha8Rng) -> Case {
    let cfg = ModelConfig {
        hidden_size: 8,
        head_hidden: 8,
        ..ModelConfig::tiny()
    };
    let mut model = ClipModel::<f64>::new(cfg, seed).unwrap();
    randomize_params(&mut model, r);
    let x = randn(&[clipnet::data::CLIP_LEN, 3, 32, 32], r);
    let op = NetOp {
        net: model,
        name: "full_model".into(),
    };
    let inputs = op.inputs(x);
    Case {
        op: Box::new(op),
        inputs,
        sample: Some(3),
    }
}

pub fn case(name: &str, seed: u64) -> Case {
    let r = &mut rng(seed.wrapping_mul(0x9e37_79b9).wrapping_add(name.len() as u64));
    use Elementwise::*;
    match name {
        "add" => elementwise(Add, None, r),
        "add_channel_broadcast" => elementwise(Add, Some(1), r),
        "add_spatial_broadcast" => elementwise(Add, Some(2), r),
        "mul" => elementwise(Mul, None, r),
        "mul_channel_broadcast" => elementwise(Mul, Some(1), r),
        "mul_spatial_broadcast" => elementwise(Mul, Some(2), r),
        "relu" => elementwise(Relu, None, r),
        "sigmoid" => elementwise(Sigmoid, None, r),
        "tanh" => elementwise(Tanh, None, r),
        "conv2d" => {
            let k = [1, 2, 3][r.random_range(0..3)];
            let padding = r.random_range(0..k);
            let stride = r.random_range(1..=2);
            let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=3));
            let x = randn(&[r.random_range(1..=2), cin, r.random_range(k..=k + 3), r.random_range(k..=k + 3)], r);
            let mut inputs = vec![x, randn(&[cout, cin, k, k], r)];
            if r.random_bool(0.5) {
                inputs.push(randn(&[cout], r));
            }
            Case::full(Conv2dOp { stride, padding }, inputs)
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let mut s = nchw(r);
            s[0] = 2;
            let c = s[1];
            let inputs = vec![randn(&s, r), randn(&[c], r), randn(&[c], r)];
            if name == "batch_norm_train" {
                Case::full(BatchNormTrainOp { eps: 1e-5 }, inputs)
            } else {
                let op = BatchNormEvalOp {
                    running_mean: randn(&[c], r),
                    running_var: Tensor::from_fn(&[c], |_| r.random_range(0.5..1.5)),
                    eps: 1e-5,
                };
                Case::full(op, inputs)
            }
        }
        "max_pool" => pool_case(PoolKind::Max, r),
        "avg_pool" => pool_case(PoolKind::Avg, r),
        "global_max_pool" => Case::full(GlobalPoolOp(PoolKind::Max), vec![randn(&nchw(r), r)]),
        "global_avg_pool" => Case::full(GlobalPoolOp(PoolKind::Avg), vec![randn(&nchw(r), r)]),
        "channel_max_pool" => Case::full(ChannelPoolOp(PoolKind::Max), vec![randn(&nchw(r), r)]),
        "channel_avg_pool" => Case::full(ChannelPoolOp(PoolKind::Avg), vec![randn(&nchw(r), r)]),
        "dense" => {
            let (n, d, k) = (r.random_range(1..=4), r.random_range(1..=5), r.random_range(1..=4));
            let mut inputs = vec![randn(&[n, d], r), randn(&[k, d], r)];
            if r.random_bool(0.5) {
                inputs.push(randn(&[k], r));
            }
            Case::full(DenseOp, inputs)
        }
        "softmax_cross_entropy" => {
            let m = r.random_range(1..=6);
            let labels: Vec<i64> = (0..m).map(|_| r.random_range(0..NUM_CLASSES as i64)).collect();
            let mut mask: Vec<bool> = (0..m).map(|_| r.random_bool(0.7)).collect();
            mask[r.random_range(0..m)] = true;
            let logits = randn(&[m, NUM_CLASSES], r).scale(2.0);
            Case::full(SoftmaxCrossEntropyOp { labels, mask }, vec![logits])
        }
        "lstm_cell" => {
            let (d, h) = (r.random_range(1..=5), r.random_range(1..=4));
            let inputs = vec![
                randn(&[d], r),
                randn(&[h], r),
                randn(&[h], r),
                randn(&[4 * h, d], r),
                randn(&[4 * h, h], r),
                randn(&[4 * h], r),
            ];
            Case::full(LstmCellOp, inputs)
        }
        "channel_attention" => {
            let (reduction, inputs) = cbam_inputs(r);
            Case::full(ChannelAttentionOp { reduction }, inputs)
        }
        "spatial_attention" => {
            let (reduction, inputs) = cbam_inputs(r);
            Case::full(SpatialAttentionOp { reduction }, inputs)
        }
        "cbam" => {
            let (reduction, inputs) = cbam_inputs(r);
            Case::full(CbamOp { reduction }, inputs)
        }
        "bottleneck_cbam" => bottleneck(r),
        "blstm_head" => blstm_head(r),
        "full_model" => full_model(seed, r),
        other => panic!("no gradient case {other:?}"),
    }
}

pub fn tolerance(name: &str) -> f64 {
    if name == "full_model" {
        MODEL_TOLERANCE
    } else {
        OP_TOLERANCE
    }
}

/// Max relative finite-difference error of one case.
pub fn grad_error(name: &str, seed: u64) -> f64 {
    let c = case(name, seed);
    let opts = GradCheckOptions {
        eps: 1e-6,
        cotangent_seed: seed,
        max_elements_per_input: c.sample,
        sample_seed: seed,
    };
    grad_check_with(c.op.as_ref(), &c.inputs, &opts)
        .unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"))
        .max_relative_error
}

/// `backward(a g1 + b g2)` against `a backward(g1) + b backward(g2)`.
pub fn linearity_error(name: &str, seed: u64) -> f64 {
    let c = case(name, seed);
    let out = c.op.forward(&c.inputs).unwrap();
    let r = &mut rng(seed ^ 0x11ea);
    let g1 = randn(out.shape(), r);
    let g2 = randn(out.shape(), r);
    let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
    backward_linearity_error(c.op.as_ref(), &c.inputs, &g1, &g2, a, b).unwrap()
}

/// Worst error over `SEEDS` seeds.
pub fn worst_over_seeds(name: &str, f: fn(&str, u64) -> f64) -> f64 {
    (0..SEEDS).map(|s| f(name, s)).fold(0.0, f64::max)
}
