//! Brute-force reference implementations on plain `f64` slices.

use clipnet::layers::PoolKind;
use clipnet::Tensor;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn idx4(s: &[usize], n: usize, c: usize, h: usize, w: usize) -> usize {
    ((n * s[1] + c) * s[2] + h) * s[3] + w
}

pub fn conv2d(x: &Tensor<f64>, k: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let (xs, ks) = (x.shape(), k.shape());
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let os = [n, cout, oh, ow];
    let mut out = vec![0.0; n * cout * oh * ow];
    for s in 0..n {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let z = (j * stride + v) as isize - pad as isize;
                                if y < 0 || z < 0 || y >= h as isize || z >= w as isize {
                                    continue;
                                }
                                acc += x.data()[idx4(xs, s, c, y as usize, z as usize)]
                                    * k.data()[idx4(ks, o, c, u, v)];
                            }
                        }
                    }
                    out[idx4(&os, s, o, i, j)] = acc;
                }
            }
        }
    }
    Tensor::new(&os, out).unwrap()
}

/// Max ignores out-of-range cells; average divides by the full window area.
pub fn pool2d(x: &Tensor<f64>, kind: PoolKind, k: usize, stride: usize, pad: usize) -> Tensor<f64> {
    let xs = x.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let os = [n, c, oh, ow];
    let mut out = vec![0.0; n * c * oh * ow];
    for s in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut vals = Vec::new();
                    for u in 0..k {
                        for v in 0..k {
                            let y = (i * stride + u) as isize - pad as isize;
                            let z = (j * stride + v) as isize - pad as isize;
                            if y >= 0 && z >= 0 && y < h as isize && z < w as isize {
                                vals.push(x.data()[idx4(xs, s, ch, y as usize, z as usize)]);
                            }
                        }
                    }
                    out[idx4(&os, s, ch, i, j)] = match kind {
                        PoolKind::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        PoolKind::Avg => vals.iter().sum::<f64>() / (k * k) as f64,
                    };
                }
            }
        }
    }
    Tensor::new(&os, out).unwrap()
}

/// `[N,C,1,1]`
pub fn global_pool(x: &Tensor<f64>, kind: PoolKind) -> Tensor<f64> {
    let xs = x.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let mut out = Vec::new();
    for s in 0..n {
        for ch in 0..c {
            let cells: Vec<f64> = (0..h * w).map(|p| x.data()[idx4(xs, s, ch, p / w, p % w)]).collect();
            out.push(match kind {
                PoolKind::Max => cells.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                PoolKind::Avg => cells.iter().sum::<f64>() / cells.len() as f64,
            });
        }
    }
    Tensor::new(&[n, c, 1, 1], out).unwrap()
}

/// `[N,1,H,W]`
pub fn channel_pool(x: &Tensor<f64>, kind: PoolKind) -> Tensor<f64> {
    let xs = x.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let mut out = Vec::new();
    for s in 0..n {
        for i in 0..h {
            for j in 0..w {
                let cells: Vec<f64> = (0..c).map(|ch| x.data()[idx4(xs, s, ch, i, j)]).collect();
                out.push(match kind {
                    PoolKind::Max => cells.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    PoolKind::Avg => cells.iter().sum::<f64>() / c as f64,
                });
            }
        }
    }
    Tensor::new(&[n, 1, h, w], out).unwrap()
}

/// `y[i][o] = b[o] + sum_d x[i][d] w[o][d]`
pub fn dense(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[0];
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for o in 0..k {
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for j in 0..d {
                acc += x.data()[i * d + j] * w.data()[o * d + j];
            }
            out[i * k + o] = acc;
        }
    }
    Tensor::new(&[n, k], out).unwrap()
}

/// One step with gate rows stacked `i, f, g, o`; returns `(h, c)`.
pub fn lstm_cell(x: &[f64], h: &[f64], c: &[f64], w: &[f64], u: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (d, hd) = (x.len(), h.len());
    let pre = |row: usize| -> f64 {
        let mut acc = b[row];
        for j in 0..d {
            acc += w[row * d + j] * x[j];
        }
        for j in 0..hd {
            acc += u[row * hd + j] * h[j];
        }
        acc
    };
    let mut h_new = vec![0.0; hd];
    let mut c_new = vec![0.0; hd];
    for k in 0..hd {
        let i = sigmoid(pre(k));
        let f = sigmoid(pre(hd + k));
        let g = pre(2 * hd + k).tanh();
        let o = sigmoid(pre(3 * hd + k));
        c_new[k] = f * c[k] + i * g;
        h_new[k] = o * c_new[k].tanh();
    }
    (h_new, c_new)
}

pub struct CellWeights<'a> {
    pub w: &'a [f64],
    pub u: &'a [f64],
    pub b: &'a [f64],
}

/// Row `t` is `[h_fwd(t), h_bwd(t)]`, both chains from zero state.
pub fn blstm(seq: &[Vec<f64>], hidden: usize, fwd: &CellWeights, bwd: &CellWeights) -> Vec<Vec<f64>> {
    let t_len = seq.len();
    let run = |p: &CellWeights, order: Vec<usize>| -> Vec<Vec<f64>> {
        let (mut h, mut c) = (vec![0.0; hidden], vec![0.0; hidden]);
        let mut states = vec![Vec::new(); t_len];
        for t in order {
            let (hn, cn) = lstm_cell(&seq[t], &h, &c, p.w, p.u, p.b);
            states[t] = hn.clone();
            h = hn;
            c = cn;
        }
        states
    };
    let f = run(fwd, (0..t_len).collect());
    let b = run(bwd, (0..t_len).rev().collect());
    (0..t_len).map(|t| [f[t].clone(), b[t].clone()].concat()).collect()
}

/// `sigmoid(W1 relu(W0 avg) + W1 relu(W0 max))` per sample and channel.
pub fn channel_attention(f: &Tensor<f64>, w0: &Tensor<f64>, w1: &Tensor<f64>) -> Tensor<f64> {
    let fs = f.shape();
    let (n, c) = (fs[0], fs[1]);
    let hid = w0.shape()[0];
    let avg = global_pool(f, PoolKind::Avg);
    let max = global_pool(f, PoolKind::Max);
    let mlp = |v: &[f64]| -> Vec<f64> {
        let r: Vec<f64> = (0..hid)
            .map(|j| (0..c).map(|k| w0.data()[j * c + k] * v[k]).sum::<f64>().max(0.0))
            .collect();
        (0..c).map(|k| (0..hid).map(|j| w1.data()[k * hid + j] * r[j]).sum()).collect()
    };
    let mut out = Vec::new();
    for s in 0..n {
        let a = mlp(&avg.data()[s * c..(s + 1) * c]);
        let m = mlp(&max.data()[s * c..(s + 1) * c]);
        out.extend(a.iter().zip(&m).map(|(x, y)| sigmoid(x + y)));
    }
    Tensor::new(&[n, c, 1, 1], out).unwrap()
}

/// `sigmoid(conv_k([avg_c F; max_c F]) + b)` with same padding.
pub fn spatial_attention(f: &Tensor<f64>, kernel: &Tensor<f64>, bias: f64) -> Tensor<f64> {
    let fs = f.shape();
    let (n, h, w) = (fs[0], fs[2], fs[3]);
    let k = kernel.shape()[2];
    let pad = (k - 1) / 2;
    let avg = channel_pool(f, PoolKind::Avg);
    let max = channel_pool(f, PoolKind::Max);
    let mut out = Vec::new();
    for s in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias;
                for (m, map) in [&avg, &max].into_iter().enumerate() {
                    for u in 0..k {
                        for v in 0..k {
                            let y = (i + u) as isize - pad as isize;
                            let z = (j + v) as isize - pad as isize;
                            if y < 0 || z < 0 || y >= h as isize || z >= w as isize {
                                continue;
                            }
                            acc += map.data()[(s * h + y as usize) * w + z as usize]
                                * kernel.data()[(m * k + u) * k + v];
                        }
                    }
                }
                out.push(sigmoid(acc));
            }
        }
    }
    Tensor::new(&[n, 1, h, w], out).unwrap()
}

/// `F' = Mc F`, then `F' Ms(F')`.
pub fn cbam(f: &Tensor<f64>, w0: &Tensor<f64>, w1: &Tensor<f64>, kernel: &Tensor<f64>, bias: f64) -> Tensor<f64> {
    let fs = f.shape();
    let mc = channel_attention(f, w0, w1);
    let scaled = Tensor::from_fn(fs, |i| {
        let plane = fs[2] * fs[3];
        f.data()[i] * mc.data()[i / plane]
    });
    let ms = spatial_attention(&scaled, kernel, bias);
    Tensor::from_fn(fs, |i| {
        let plane = fs[2] * fs[3];
        let s = i / (fs[1] * plane);
        scaled.data()[i] * ms.data()[s * plane + i % plane]
    })
}

/// Accuracy and per-class F1 as `2TP / (2TP + FP + FN)`, 0 when undefined.
pub fn metrics(truth: &[usize], pred: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let correct = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    let acc = correct as f64 / truth.len() as f64;
    let f1 = (0..classes)
        .map(|k| {
            let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == k && p == k).count();
            let fp = truth.iter().zip(pred).filter(|&(&t, &p)| t != k && p == k).count();
            let fneg = truth.iter().zip(pred).filter(|&(&t, &p)| t == k && p != k).count();
            let den = 2 * tp + fp + fneg;
            if den == 0 {
                0.0
            } else {
                2.0 * tp as f64 / den as f64
            }
        })
        .collect();
    (acc, f1)
}

pub fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
