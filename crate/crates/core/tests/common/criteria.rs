//! The seven acceptance checks, each returning a verdict with a summary.

use std::fmt;
use std::path::Path;

use clipnet::attention::{cbam, cbam_forward, channel_attention, spatial_attention, CbamParams};
use clipnet::cli::{cmd_eval, cmd_train, load_model, InitFrom};
use clipnet::config::RunConfig;
use clipnet::data::{eval_windows, load_dataset_root, ClipSampler, Dataset, CLIP_LEN};
use clipnet::layers::{
    channel_pool, conv2d, dense, global_pool, lstm_cell, pool2d, LstmCellParams, PoolKind, PoolWindow,
};
use clipnet::metrics::{accuracy, f1_scores, final_metric, ConfusionMatrix, MetricsReport};
use clipnet::model::ClipModel;
use clipnet::sequence::{blstm_forward, NUM_CLASSES};
use clipnet::train::{Checkpoint, LogEntry, Trainer};
use clipnet::Tensor;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::grads::{self, COMPOSED_CASES, LINEARITY_TOLERANCE, OP_CASES, SEEDS};
use super::oracles::{self, max_diff, CellWeights};
use super::{fake_video, randn, rng, write_synth};

pub struct Verdict {
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: String) -> Self {
        Self { passed, detail }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", if self.passed { "PASS" } else { "FAIL" }, self.detail)
    }
}

pub const GOLDEN_TOLERANCE: f64 = 5e-4;
pub const GOLDEN_ROWS: [(f64, f64, f64); 2] = [(0.640, 0.333, 0.434), (0.647, 0.281, 0.402)];

pub fn golden_metrics() -> Verdict {
    let devs: Vec<f64> = GOLDEN_ROWS.iter().map(|&(a, f, s)| (final_metric(a, f) - s).abs()).collect();
    let worst = devs.iter().copied().fold(0.0, f64::max);
    Verdict::new(worst <= GOLDEN_TOLERANCE, format!("max |s - s_table| = {worst:.2e}"))
}

pub fn gradient_suite() -> Verdict {
    let mut failures = Vec::new();
    let mut worst_op: f64 = 0.0;
    let mut worst_model: f64 = 0.0;
    let mut worst_lin: f64 = 0.0;
    for name in OP_CASES.iter().chain(COMPOSED_CASES) {
        let err = grads::worst_over_seeds(name, grads::grad_error);
        let lin = grads::worst_over_seeds(name, grads::linearity_error);
        if *name == "full_model" {
            worst_model = worst_model.max(err);
        } else {
            worst_op = worst_op.max(err);
        }
        worst_lin = worst_lin.max(lin);
        if err > grads::tolerance(name) || lin > LINEARITY_TOLERANCE {
            failures.push(format!("{name}: grad {err:.2e}, linearity {lin:.2e}"));
        }
    }
    let cases = OP_CASES.len() + COMPOSED_CASES.len();
    let mut detail = format!(
        "{cases} cases x {SEEDS} seeds; ops {worst_op:.2e}, full model {worst_model:.2e}, linearity {worst_lin:.2e}"
    );
    if !failures.is_empty() {
        detail = format!("{detail}; {}", failures.join("; "));
    }
    Verdict::new(failures.is_empty(), detail)
}

pub const ORACLE_TOLERANCE: f64 = 1e-10;
pub const ORACLE_INSTANCES: u64 = 20;

/// Worst deviation from the brute-force references, per family.
pub fn oracle_deviations() -> Vec<(&'static str, f64)> {
    let mut worst = vec![
        ("conv2d", 0.0),
        ("pool2d", 0.0),
        ("global_pool", 0.0),
        ("channel_pool", 0.0),
        ("dense", 0.0),
        ("lstm_cell", 0.0),
        ("blstm", 0.0),
        ("channel_attention", 0.0),
        ("spatial_attention", 0.0),
        ("cbam", 0.0),
        ("confusion_metrics", 0.0),
    ];
    let mut note = |name: &str, d: f64| {
        let slot = worst.iter_mut().find(|(n, _)| *n == name).unwrap();
        slot.1 = f64::max(slot.1, d);
    };
    for seed in 0..ORACLE_INSTANCES {
        let r = &mut rng(1000 + seed);

        let k = r.random_range(1..=3);
        let (stride, pad) = (r.random_range(1..=2), r.random_range(0..k));
        let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=4));
        let x = randn(&[r.random_range(1..=2), cin, r.random_range(k..=k + 4), r.random_range(k..=k + 4)], r);
        let w = randn(&[cout, cin, k, k], r);
        let b = randn(&[cout], r);
        let bias = r.random_bool(0.5).then_some(&b);
        note("conv2d", max_diff(&conv2d(&x, &w, bias, stride, pad).unwrap(), &oracles::conv2d(&x, &w, bias, stride, pad)));

        let kind = if r.random_bool(0.5) { PoolKind::Max } else { PoolKind::Avg };
        let pk = r.random_range(1..=3);
        let ppad = r.random_range(0..=pk / 2);
        let pstride = r.random_range(1..=2);
        let x = randn(&[r.random_range(1..=2), r.random_range(1..=3), r.random_range(pk..=pk + 4), r.random_range(pk..=pk + 4)], r);
        let win = PoolWindow {
            kh: pk,
            kw: pk,
            stride: pstride,
            padding: ppad,
        };
        note("pool2d", max_diff(&pool2d(&x, kind, win).unwrap(), &oracles::pool2d(&x, kind, pk, pstride, ppad)));
        note("global_pool", max_diff(&global_pool(&x, kind).unwrap(), &oracles::global_pool(&x, kind)));
        note("channel_pool", max_diff(&channel_pool(&x, kind).unwrap(), &oracles::channel_pool(&x, kind)));

        let (n, d, o) = (r.random_range(1..=5), r.random_range(1..=6), r.random_range(1..=5));
        let (x, w, b) = (randn(&[n, d], r), randn(&[o, d], r), randn(&[o], r));
        let bias = r.random_bool(0.5).then_some(&b);
        note("dense", max_diff(&dense(&x, &w, bias).unwrap(), &oracles::dense(&x, &w, bias)));

        let (d, h) = (r.random_range(1..=5), r.random_range(1..=4));
        let p = LstmCellParams {
            w: randn(&[4 * h, d], r),
            u: randn(&[4 * h, h], r),
            b: randn(&[4 * h], r),
        };
        let (x, hp, cp) = (randn(&[d], r), randn(&[h], r), randn(&[h], r));
        let (ht, ct) = lstm_cell(&x, &hp, &cp, &p).unwrap();
        let (ho, co) = oracles::lstm_cell(x.data(), hp.data(), cp.data(), p.w.data(), p.u.data(), p.b.data());
        note("lstm_cell", max_diff(&ht, &Tensor::new(&[h], ho).unwrap()).max(max_diff(&ct, &Tensor::new(&[h], co).unwrap())));

        let bp = LstmCellParams {
            w: randn(&[4 * h, d], r),
            u: randn(&[4 * h, h], r),
            b: randn(&[4 * h], r),
        };
        let seq = randn(&[CLIP_LEN, d], r);
        let (out, _) = blstm_forward(&seq, &p, &bp).unwrap();
        let rows: Vec<Vec<f64>> = seq.data().chunks(d).map(<[f64]>::to_vec).collect();
        let cw = |q: &LstmCellParams<f64>| (q.w.data().to_vec(), q.u.data().to_vec(), q.b.data().to_vec());
        let (fw, fu, fb) = cw(&p);
        let (bw, bu, bb) = cw(&bp);
        let expect = oracles::blstm(
            &rows,
            h,
            &CellWeights { w: &fw, u: &fu, b: &fb },
            &CellWeights { w: &bw, u: &bu, b: &bb },
        );
        note("blstm", max_diff(&out, &Tensor::new(&[CLIP_LEN, 2 * h], expect.concat()).unwrap()));

        let c = [1, 2, 4, 8][r.random_range(0..4)];
        let reduction = [1, 2, 4].into_iter().filter(|q| c % q == 0).nth(r.random_range(0..2)).unwrap_or(1);
        let ks = [1, 3, 5, 7][r.random_range(0..4)];
        let mut cp = CbamParams::<f64>::random(c, reduction, ks, r).unwrap();
        cp.spatial_bias = randn(&[1], r);
        let f = randn(&[r.random_range(1..=2), c, r.random_range(1..=6), r.random_range(1..=6)], r);
        note("channel_attention", max_diff(&channel_attention(&f, &cp).unwrap(), &oracles::channel_attention(&f, &cp.w0, &cp.w1)));
        let bias = cp.spatial_bias.data()[0];
        note("spatial_attention", max_diff(&spatial_attention(&f, &cp).unwrap(), &oracles::spatial_attention(&f, &cp.spatial_kernel, bias)));
        note("cbam", max_diff(&cbam(&f, &cp).unwrap(), &oracles::cbam(&f, &cp.w0, &cp.w1, &cp.spatial_kernel, bias)));

        let len = r.random_range(1..=300);
        let truth: Vec<usize> = (0..len).map(|_| r.random_range(0..NUM_CLASSES)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if r.random_bool(0.4) { t } else { r.random_range(0..NUM_CLASSES) })
            .collect();
        let mut cm = ConfusionMatrix::new();
        for (&t, &p) in truth.iter().zip(&pred) {
            cm.accumulate(t as i64, p as i64, true).unwrap();
        }
        let (acc, f1) = oracles::metrics(&truth, &pred, NUM_CLASSES);
        let dev = f1_scores(&cm)
            .iter()
            .zip(&f1)
            .map(|(a, b)| (a - b).abs())
            .fold((accuracy(&cm).unwrap() - acc).abs(), f64::max);
        note("confusion_metrics", dev);
    }
    worst
}

pub fn oracle_equivalence() -> Verdict {
    let devs = oracle_deviations();
    let failed: Vec<String> = devs
        .iter()
        .filter(|(_, d)| *d > ORACLE_TOLERANCE)
        .map(|(n, d)| format!("{n} {d:.2e}"))
        .collect();
    let worst = devs.iter().map(|(_, d)| *d).fold(0.0, f64::max);
    let mut detail = format!("{} families x {ORACLE_INSTANCES} instances, worst {worst:.2e}", devs.len());
    if !failed.is_empty() {
        detail = format!("{detail}; {}", failed.join(", "));
    }
    Verdict::new(failed.is_empty(), detail)
}

pub const OVERFIT_ITERATIONS: usize = 2000;
pub const OVERFIT_LEARNING_RATE: f64 = 0.01;
pub const OVERFIT_THRESHOLD: f64 = 0.95;

pub struct OverfitRun {
    pub report: MetricsReport,
    pub log: Vec<LogEntry>,
}

/// Tiny config on 4 synthetic videos of 64 frames at 32×32, then `cmd_eval`
/// on the same corpus.
pub fn overfit_run(root: &Path) -> OverfitRun {
    let data = root.join("data");
    write_synth(&data, 4, 64, 7);
    let mut cfg = RunConfig::tiny();
    cfg.train.learning_rate = OVERFIT_LEARNING_RATE;
    cfg.train.max_iterations = OVERFIT_ITERATIONS;
    cfg.train.checkpoint_every = OVERFIT_ITERATIONS;
    cfg.data_root = Some(data.clone());
    let summary = cmd_train(&cfg, &root.join("run"), &InitFrom::default()).unwrap();
    let ckpt = summary.checkpoints.last().expect("final checkpoint");
    OverfitRun {
        report: cmd_eval(ckpt, &data).unwrap(),
        log: summary.log,
    }
}

pub fn overfit() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let run = overfit_run(dir.path());
    let r = &run.report;
    Verdict::new(
        r.acc >= OVERFIT_THRESHOLD && r.s >= OVERFIT_THRESHOLD,
        format!(
            "{} iterations at lr {OVERFIT_LEARNING_RATE}: train acc {:.4}, s {:.4} over {} frames",
            run.log.len(),
            r.acc,
            r.s,
            r.frames_evaluated
        ),
    )
}

pub const CHI_DRAWS: usize = 10_000;
pub const CHI_ALPHA: f64 = 0.01;

/// Upper-tail p-value of Pearson's statistic against equal expected counts.
pub fn chi_square_p(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

/// Violations of the eval arrangement and sampler contracts over lengths
/// `1..=100` with random validity patterns.
pub fn protocol_violations() -> Vec<String> {
    let mut bad = Vec::new();
    let r = &mut rng(77);
    for len in 1..=100usize {
        let windows = eval_windows(len);
        if windows.len() != len.div_ceil(CLIP_LEN) {
            bad.push(format!("L={len}: {} clips", windows.len()));
        }
        let mut covered = vec![0u32; len];
        let valid: Vec<bool> = (0..len).map(|_| r.random_bool(0.8)).collect();
        let mut counted = 0;
        for w in &windows {
            for (pos, frame) in (w.start..w.start + CLIP_LEN).enumerate() {
                if pos < w.real {
                    covered[frame] += 1;
                    counted += usize::from(valid[frame]);
                } else if frame < len {
                    bad.push(format!("L={len}: real frame {frame} marked as padding"));
                }
            }
        }
        if covered.iter().any(|&c| c != 1) {
            bad.push(format!("L={len}: coverage {covered:?}"));
        }
        let expected = valid.iter().filter(|&&v| v).count();
        if counted != expected {
            bad.push(format!("L={len}: {counted} counted frames, {expected} valid"));
        }
        let video = fake_video("v", &valid);
        let ds = Dataset {
            videos: vec![video.clone()],
            ..Default::default()
        };
        if let Ok(s) = ClipSampler::new(&ds) {
            for _ in 0..50 {
                let w = s.sample(r);
                if !video.valid[w.start..w.start + CLIP_LEN].iter().all(|&v| v) {
                    bad.push(format!("L={len}: sampled invalid window at {}", w.start));
                }
            }
        } else if !video.valid_windows().is_empty() {
            bad.push(format!("L={len}: eligible video rejected"));
        }
    }
    bad
}

/// `(p over videos, p over start indices)`.
pub fn sampler_uniformity() -> (f64, f64) {
    let ds = Dataset {
        videos: vec![
            fake_video("a", &[true; 12]),
            fake_video("b", &[true; 5]),
            fake_video("c", &[true; 40]),
        ],
        ..Default::default()
    };
    let sampler = ClipSampler::new(&ds).unwrap();
    let r = &mut rng(2024);
    let mut per_video = [0u64; 2];
    for _ in 0..CHI_DRAWS {
        per_video[usize::from(sampler.sample(r).video == 2)] += 1;
    }
    let single = Dataset {
        videos: vec![fake_video("a", &[true; 12])],
        ..Default::default()
    };
    let sampler = ClipSampler::new(&single).unwrap();
    let mut per_start = [0u64; 5];
    for _ in 0..CHI_DRAWS {
        per_start[sampler.sample(r).start] += 1;
    }
    (chi_square_p(&per_video), chi_square_p(&per_start))
}

pub fn protocol() -> Verdict {
    let bad = protocol_violations();
    let (pv, ps) = sampler_uniformity();
    let passed = bad.is_empty() && pv > CHI_ALPHA && ps > CHI_ALPHA;
    let mut detail = format!("lengths 1..=100 checked; chi-square p: videos {pv:.3}, starts {ps:.3}");
    if let Some(first) = bad.first() {
        detail = format!("{detail}; {} violations, first: {first}", bad.len());
    }
    Verdict::new(passed, detail)
}

pub struct PersistenceReport {
    pub replay_identical: bool,
    pub bytes_identical: bool,
    pub forward_identical: bool,
}

/// Six steps from a fixed seed; returns the loss bit patterns.
fn replay<'d>(ds: &'d Dataset, cfg: &RunConfig) -> (Vec<u32>, Trainer<'d, f32>) {
    let model = ClipModel::<f32>::new(cfg.model.clone(), 5).unwrap();
    let mut t = Trainer::new(model, ds, cfg.train.clone(), cfg.to_text()).unwrap();
    let losses = (0..6).map(|_| t.step().unwrap().to_bits()).collect();
    (losses, t)
}

pub fn persistence_run(root: &Path) -> PersistenceReport {
    let data = root.join("data");
    write_synth(&data, 3, 48, 3);
    let ds = load_dataset_root(&data).unwrap();
    let mut cfg = RunConfig::tiny();
    cfg.train.learning_rate = 0.01;
    let (first, trainer) = replay(&ds, &cfg);
    let (second, _) = replay(&ds, &cfg);

    let (p1, p2) = (root.join("a.clp"), root.join("b.clp"));
    trainer.checkpoint().save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    let bytes_identical = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap()
        && loaded.to_bytes() == trainer.checkpoint().to_bytes();

    let (reloaded, _) = load_model::<f32>(&p1).unwrap();
    let frames = Tensor::<f32>::randn(&[2 * CLIP_LEN, 3, 32, 32], 1.0, &mut rng(9));
    let before = trainer.model.infer(&frames, CLIP_LEN).unwrap();
    let after = reloaded.infer(&frames, CLIP_LEN).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    PersistenceReport {
        replay_identical: first == second,
        bytes_identical,
        forward_identical: bits(&before) == bits(&after),
    }
}

pub fn persistence() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let r = persistence_run(dir.path());
    Verdict::new(
        r.replay_identical && r.bytes_identical && r.forward_identical,
        format!(
            "loss replay {}, checkpoint bytes {}, forward after reload {}",
            r.replay_identical, r.bytes_identical, r.forward_identical
        ),
    )
}

pub struct AttentionReport {
    pub shapes_checked: usize,
    pub shape_failures: usize,
    pub zero_param_exact: bool,
    /// Smallest distance of any mask element from 0 or 1 was positive.
    pub masks_open: bool,
}

pub fn attention_run() -> AttentionReport {
    let r = &mut rng(31);
    let mut report = AttentionReport {
        shapes_checked: 0,
        shape_failures: 0,
        zero_param_exact: true,
        masks_open: true,
    };
    for &c in &[1usize, 2, 4, 8, 16] {
        for &reduction in &[1usize, 2, 4, 16] {
            if c % reduction != 0 {
                continue;
            }
            for &k in &[1usize, 3, 7] {
                for &(h, w) in &[(1usize, 1usize), (3, 5), (8, 8)] {
                    let n = r.random_range(1..=3);
                    let f = randn(&[n, c, h, w], r);
                    let p = CbamParams::<f64>::random(c, reduction, k, r).unwrap();
                    report.shapes_checked += 1;
                    if cbam(&f, &p).unwrap().shape() != f.shape() {
                        report.shape_failures += 1;
                    }

                    let zero = CbamParams::<f64>::zeros(c, reduction, k).unwrap();
                    let out = cbam(&f, &zero).unwrap();
                    report.zero_param_exact &= out.data().iter().zip(f.data()).all(|(y, x)| *y == 0.25 * x);
                    let f32_in = f.cast::<f32>();
                    let out32 = cbam(&f32_in, &CbamParams::<f32>::zeros(c, reduction, k).unwrap()).unwrap();
                    report.zero_param_exact &= out32.data().iter().zip(f32_in.data()).all(|(y, x)| *y == 0.25 * x);

                    for scale in [1e-6, 1.0, 1e3, 1e12] {
                        let big = f.scale(scale);
                        let cache = cbam_forward(&big, &p).unwrap();
                        let open = |t: &Tensor<f64>| t.data().iter().all(|&m| m > 0.0 && m < 1.0);
                        report.masks_open &= open(cache.channel_mask()) && open(cache.spatial_mask());
                        let big32 = big.cast::<f32>();
                        let p32 = CbamParams {
                            reduction,
                            w0: p.w0.cast(),
                            w1: p.w1.cast(),
                            spatial_kernel: p.spatial_kernel.cast(),
                            spatial_bias: p.spatial_bias.cast(),
                        };
                        let cache32 = cbam_forward(&big32, &p32).unwrap();
                        let open32 = |t: &Tensor<f32>| t.data().iter().all(|&m| m > 0.0 && m < 1.0);
                        report.masks_open &= open32(cache32.channel_mask()) && open32(cache32.spatial_mask());
                    }
                }
            }
        }
    }
    report
}

pub fn attention_invariants() -> Verdict {
    let r = attention_run();
    Verdict::new(
        r.shape_failures == 0 && r.zero_param_exact && r.masks_open,
        format!(
            "{} shapes ({} mismatches), zero params give exactly 0.25F: {}, masks inside (0,1): {}",
            r.shapes_checked, r.shape_failures, r.zero_param_exact, r.masks_open
        ),
    )
}
