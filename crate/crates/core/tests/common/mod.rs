//! Independent reference implementations used by the integration and
//! acceptance tests. Everything here is written as plain loops in f64 with
//! no code shared with the library beyond the tensor container.

#![allow(dead_code)]

pub mod cases;

use mixfacenet::blocks::{Activation, BatchNorm, Conv, MixConv, MixConvBlock, ShufflePlacement, SqueezeExcite, SHUFFLE_GROUPS};
use mixfacenet::network::{similarity, Metric, Network};
use mixfacenet::params::{ParamId, ParamStore};
use mixfacenet::{Shape, Tensor};

/// Counts the arithmetic a naive executor performs: every scalar multiply,
/// every scalar add and every activation-function evaluation.
#[derive(Default, Debug, Clone, Copy)]
pub struct OpCounter {
    /// Convolution kernel taps (one multiply-accumulate each).
    pub macs: u64,
    pub muls: u64,
    pub adds: u64,
    pub activations: u64,
}

impl OpCounter {
    pub fn mul(&mut self, a: f64, b: f64) -> f64 {
        self.muls += 1;
        a * b
    }

    pub fn add(&mut self, a: f64, b: f64) -> f64 {
        self.adds += 1;
        a + b
    }

    pub fn act(&mut self, f: impl Fn(f64) -> f64, x: f64) -> f64 {
        self.activations += 1;
        f(x)
    }

    pub fn total(&self) -> u64 {
        self.muls + self.adds + self.activations
    }
}

pub fn to64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Zero-pads every plane by `p` on all four sides.
pub fn pad(x: &[f64], s: Shape, p: usize) -> (Vec<f64>, usize, usize) {
    let (hp, wp) = (s.h + 2 * p, s.w + 2 * p);
    let mut out = vec![0.0; s.n * s.c * hp * wp];
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x_ in 0..s.w {
                    out[((n * s.c + c) * hp + y + p) * wp + x_ + p] = x[((n * s.c + c) * s.h + y) * s.w + x_];
                }
            }
        }
    }
    (out, hp, wp)
}

/// Direct convolution over an explicitly zero-padded input. Every kernel
/// tap of every output element is one multiply and one add.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    ops: &mut OpCounter,
    x: &[f64],
    xs: Shape,
    w: &[f64],
    ws: Shape,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> (Vec<f64>, Shape) {
    let (xp, hp, wp) = pad(x, xs, padding);
    let (k_h, k_w) = (ws.h, ws.w);
    let oh = (hp - k_h) / stride + 1;
    let ow = (wp - k_w) / stride + 1;
    let cin_g = xs.c / groups;
    let cout_g = ws.n / groups;
    let os = Shape::new(xs.n, ws.n, oh, ow);
    let mut out = vec![0.0; os.numel()];
    for n in 0..xs.n {
        for oc in 0..ws.n {
            let g = oc / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for icg in 0..cin_g {
                        let ic = g * cin_g + icg;
                        for ky in 0..k_h {
                            for kx in 0..k_w {
                                let xv = xp[((n * xs.c + ic) * hp + oy * stride + ky) * wp + ox * stride + kx];
                                let wv = w[((oc * cin_g + icg) * k_h + ky) * k_w + kx];
                                ops.macs += 1;
                                let prod = ops.mul(xv, wv);
                                acc = ops.add(acc, prod);
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc = ops.add(acc, b[oc]);
                    }
                    out[((n * ws.n + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, os)
}

/// Inference batch norm folded into `x * a + b` per channel.
pub fn naive_bn_infer(
    ops: &mut OpCounter,
    x: &[f64],
    s: Shape,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let a: Vec<f64> = (0..s.c).map(|c| gamma[c] / (var[c] + eps).sqrt()).collect();
    let b: Vec<f64> = (0..s.c).map(|c| beta[c] - mean[c] * a[c]).collect();
    let plane = s.h * s.w;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = (i / plane) % s.c;
            let m = ops.mul(v, a[c]);
            ops.add(m, b[c])
        })
        .collect()
}

/// Train-mode batch norm with biased batch variance.
pub fn naive_bn_train(x: &[f64], s: Shape, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let plane = s.h * s.w;
    let count = (s.n * plane) as f64;
    let mut out = vec![0.0; x.len()];
    for c in 0..s.c {
        let idx = |n: usize, i: usize| (n * s.c + c) * plane + i;
        let mut mean = 0.0;
        for n in 0..s.n {
            for i in 0..plane {
                mean += x[idx(n, i)];
            }
        }
        mean /= count;
        let mut var = 0.0;
        for n in 0..s.n {
            for i in 0..plane {
                var += (x[idx(n, i)] - mean).powi(2);
            }
        }
        var /= count;
        for n in 0..s.n {
            for i in 0..plane {
                out[idx(n, i)] = gamma[c] * (x[idx(n, i)] - mean) / (var + eps).sqrt() + beta[c];
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn naive_prelu(ops: &mut OpCounter, x: &[f64], s: Shape, alpha: &[f64]) -> Vec<f64> {
    let plane = s.h * s.w;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let a = alpha[(i / plane) % s.c];
            ops.act(|v| if v >= 0.0 { v } else { a * v }, v)
        })
        .collect()
}

pub fn naive_map(ops: &mut OpCounter, x: &[f64], f: fn(f64) -> f64) -> Vec<f64> {
    x.iter().map(|&v| ops.act(f, v)).collect()
}

pub fn naive_gap(x: &[f64], s: Shape) -> Vec<f64> {
    let plane = s.h * s.w;
    x.chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect()
}

/// Channel shuffle by explicit reshape `(g, c/g)` -> transpose -> flatten.
pub fn naive_shuffle(x: &[f64], s: Shape, g: usize) -> Vec<f64> {
    let per = s.c / g;
    let plane = s.h * s.w;
    let mut out = vec![0.0; x.len()];
    for n in 0..s.n {
        for gi in 0..g {
            for pi in 0..per {
                let src = gi * per + pi;
                let dst = pi * g + gi;
                for i in 0..plane {
                    out[(n * s.c + dst) * plane + i] = x[(n * s.c + src) * plane + i];
                }
            }
        }
    }
    out
}

/// Channel split of MixConv: equal parts, remainder to the first group.
pub fn naive_split(c: usize, groups: usize) -> Vec<usize> {
    let mut v = vec![c / groups; groups];
    v[0] += c % groups;
    v
}

/// MixConv: each channel group convolved depthwise with its own kernel
/// (padding `(k - 1) / 2`), outputs concatenated in group order.
pub fn naive_mixconv(
    ops: &mut OpCounter,
    x: &[f64],
    s: Shape,
    kernels: &[(usize, Vec<f64>)],
    stride: usize,
) -> (Vec<f64>, Shape) {
    let split = naive_split(s.c, kernels.len());
    let plane = s.h * s.w;
    let mut outs = Vec::new();
    let mut start = 0;
    let mut os = s;
    for ((k, w), &cg) in kernels.iter().zip(&split) {
        let mut part = Vec::with_capacity(s.n * cg * plane);
        for n in 0..s.n {
            part.extend_from_slice(&x[(n * s.c + start) * plane..(n * s.c + start + cg) * plane]);
        }
        let ps = Shape::new(s.n, cg, s.h, s.w);
        let (y, ys) = naive_conv(ops, &part, ps, w, Shape::new(cg, 1, *k, *k), None, stride, (k - 1) / 2, cg);
        os = Shape::new(s.n, s.c, ys.h, ys.w);
        outs.push((y, cg));
        start += cg;
    }
    let op = os.h * os.w;
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        for (y, cg) in &outs {
            out.extend_from_slice(&y[n * cg * op..(n + 1) * cg * op]);
        }
    }
    (out, os)
}

/// Squeeze-and-excitation with a swish (or PReLU) bottleneck.
pub fn naive_se(
    x: &[f64],
    s: Shape,
    rw: &[f64],
    rb: &[f64],
    ew: &[f64],
    eb: &[f64],
    alpha: Option<&[f64]>,
) -> Vec<f64> {
    let r = rb.len();
    let pooled = naive_gap(x, s);
    let plane = s.h * s.w;
    let mut out = vec![0.0; x.len()];
    for n in 0..s.n {
        let p = &pooled[n * s.c..(n + 1) * s.c];
        let z: Vec<f64> = (0..r)
            .map(|j| {
                let v = rb[j] + (0..s.c).map(|c| rw[j * s.c + c] * p[c]).sum::<f64>();
                match alpha {
                    Some(a) => {
                        if v >= 0.0 {
                            v
                        } else {
                            a[j] * v
                        }
                    }
                    None => swish(v),
                }
            })
            .collect();
        for c in 0..s.c {
            let gate = sigmoid(eb[c] + (0..r).map(|j| ew[c * r + j] * z[j]).sum::<f64>());
            for i in 0..plane {
                out[(n * s.c + c) * plane + i] = x[(n * s.c + c) * plane + i] * gate;
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// TAR@FAR by trying every realized score (and +inf) as threshold and
/// keeping the smallest one whose impostor acceptance rate fits.
pub fn sweep_tar_at_far(genuine: &[f64], impostor: &[f64], far: f64) -> (f64, f64) {
    let mut cands: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    cands.push(f64::INFINITY);
    let mut best: Option<f64> = None;
    for &t in &cands {
        let fa = impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64;
        if fa <= far && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    }
    let t = best.unwrap();
    let tar = genuine.iter().filter(|&&s| s >= t).count() as f64 / genuine.len() as f64;
    (tar, t)
}

/// k-fold accuracy where every fold tries every candidate threshold
/// (`-inf`, midpoints of unique training scores, `+inf`) by direct counting;
/// the first best threshold in ascending order wins.
pub fn brute_kfold(labels: &[bool], scores: &[f64], folds: &[usize], k: usize) -> (f64, f64, Vec<f64>) {
    let mut accs = Vec::new();
    for f in 0..k {
        let train: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] != f).collect();
        let test: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] == f).collect();
        let mut u: Vec<f64> = train.iter().map(|&i| scores[i]).collect();
        u.sort_by(|a, b| a.partial_cmp(b).unwrap());
        u.dedup();
        let mut cands = vec![f64::NEG_INFINITY];
        for w in u.windows(2) {
            cands.push(w[0] + (w[1] - w[0]) / 2.0);
        }
        cands.push(f64::INFINITY);
        let acc_on = |idx: &[usize], t: f64| {
            idx.iter().filter(|&&i| (scores[i] >= t) == labels[i]).count() as f64 / idx.len() as f64
        };
        let mut best_t = f64::NEG_INFINITY;
        let mut best_a = -1.0;
        for &t in &cands {
            let a = acc_on(&train, t);
            if a > best_a {
                best_a = a;
                best_t = t;
            }
        }
        accs.push(acc_on(&test, best_t));
    }
    let mean = accs.iter().sum::<f64>() / k as f64;
    let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / k as f64).sqrt();
    (mean, std, accs)
}

/// Rank-1 by scanning every gallery entry for each probe.
pub fn brute_rank1(
    probe_ids: &[usize],
    probes: &[Vec<f32>],
    gallery_ids: &[usize],
    gallery: &[Vec<f32>],
    metric: Metric,
    exclude: Option<&[usize]>,
) -> f64 {
    let mut hits = 0;
    for (i, p) in probes.iter().enumerate() {
        let scores: Vec<f64> = gallery.iter().map(|g| similarity(p, g, metric).unwrap()).collect();
        let mut best = usize::MAX;
        for j in 0..gallery.len() {
            if exclude.is_some_and(|e| e[i] == j) {
                continue;
            }
            if best == usize::MAX || scores[j] > scores[best] {
                best = j;
            }
        }
        if gallery_ids[best] == probe_ids[i] {
            hits += 1;
        }
    }
    hits as f64 / probes.len() as f64
}

fn p64(store: &ParamStore<f32>, id: ParamId) -> Vec<f64> {
    to64(store.get(id))
}

pub fn replay_conv(ops: &mut OpCounter, store: &ParamStore<f32>, conv: &Conv, x: &[f64], s: Shape) -> (Vec<f64>, Shape) {
    let w = store.get(conv.weight);
    let bias = conv.bias.map(|b| p64(store, b));
    naive_conv(
        ops,
        x,
        s,
        &to64(w),
        w.shape(),
        bias.as_deref(),
        conv.params.stride,
        conv.params.padding,
        conv.params.groups,
    )
}

pub fn replay_bn(ops: &mut OpCounter, store: &ParamStore<f32>, bn: &BatchNorm, x: &[f64], s: Shape) -> Vec<f64> {
    naive_bn_infer(
        ops,
        x,
        s,
        &p64(store, bn.gamma),
        &p64(store, bn.beta),
        &p64(store, bn.running_mean),
        &p64(store, bn.running_var),
        bn.eps,
    )
}

pub fn replay_act(ops: &mut OpCounter, store: &ParamStore<f32>, act: &Activation, x: &[f64], s: Shape) -> Vec<f64> {
    match act {
        Activation::Swish => naive_map(ops, x, swish),
        Activation::Prelu { alpha, .. } => naive_prelu(ops, x, s, &p64(store, *alpha)),
    }
}

pub fn replay_mixconv(ops: &mut OpCounter, store: &ParamStore<f32>, mc: &MixConv, x: &[f64], s: Shape) -> (Vec<f64>, Shape) {
    let kernels: Vec<(usize, Vec<f64>)> = mc
        .spec
        .kernel_sizes
        .iter()
        .zip(&mc.kernels)
        .map(|(&k, &id)| (k, p64(store, id)))
        .collect();
    naive_mixconv(ops, x, s, &kernels, mc.spec.stride)
}

/// Pooling and the final channel scaling are free under the cost
/// convention, so they run uncounted.
pub fn replay_se(ops: &mut OpCounter, store: &ParamStore<f32>, se: &SqueezeExcite, x: &[f64], s: Shape) -> Vec<f64> {
    let pooled = naive_gap(x, s);
    let ps = Shape::new(s.n, s.c, 1, 1);
    let (z, zs) = replay_conv(ops, store, &se.reduce, &pooled, ps);
    let z = replay_act(ops, store, &se.act, &z, zs);
    let (g, _) = replay_conv(ops, store, &se.expand, &z, zs);
    let gate: Vec<f64> = g.iter().map(|&v| ops.act(sigmoid, v)).collect();
    let plane = s.h * s.w;
    x.iter().enumerate().map(|(i, &v)| v * gate[i / plane]).collect()
}

pub fn replay_block(ops: &mut OpCounter, store: &ParamStore<f32>, b: &MixConvBlock, x: &[f64], s: Shape) -> (Vec<f64>, Shape) {
    let shuffle_at = |h: Vec<f64>, hs: Shape, at: ShufflePlacement| {
        if b.spec.shuffle && b.spec.shuffle_placement == at {
            naive_shuffle(&h, hs, SHUFFLE_GROUPS)
        } else {
            h
        }
    };
    let (mut h, mut hs) = (x.to_vec(), s);
    if let Some((conv, bn, act)) = &b.expand {
        let (y, ys) = replay_conv(ops, store, conv, &h, hs);
        let y = replay_bn(ops, store, bn, &y, ys);
        h = replay_act(ops, store, act, &y, ys);
        hs = ys;
    }
    let (y, ys) = replay_mixconv(ops, store, &b.mixconv, &h, hs);
    let y = shuffle_at(y, ys, ShufflePlacement::AfterMixConv);
    let y = replay_bn(ops, store, &b.dw_bn, &y, ys);
    let mut h = replay_act(ops, store, &b.dw_act, &y, ys);
    if let Some(se) = &b.se {
        h = replay_se(ops, store, se, &h, ys);
    }
    let (y, os) = replay_conv(ops, store, &b.project, &h, ys);
    let mut y = replay_bn(ops, store, &b.project_bn, &y, os);
    if b.spec.residual {
        // residual additions are free under the cost convention
        y.iter_mut().zip(x).for_each(|(a, &b)| *a += b);
    }
    (shuffle_at(y, os, ShufflePlacement::AfterBlock), os)
}

/// Inference forward pass of a whole network as naive loops.
pub fn replay_network(ops: &mut OpCounter, net: &Network, x: &[f64], s: Shape) -> Vec<f64> {
    let store = net.params();
    let head = &net.head;
    let (h, hs) = replay_conv(ops, store, &head.conv, x, s);
    let h = replay_bn(ops, store, &head.bn, &h, hs);
    let h = replay_act(ops, store, &head.act, &h, hs);
    let (mut h, mut hs) = replay_block(ops, store, &head.block, &h, hs);
    for b in &net.blocks {
        (h, hs) = replay_block(ops, store, b, &h, hs);
    }
    let e = &net.embedding;
    let (h, hs) = replay_conv(ops, store, &e.expand, &h, hs);
    let h = replay_bn(ops, store, &e.expand_bn, &h, hs);
    let h = replay_act(ops, store, &e.expand_act, &h, hs);
    let (h, hs) = replay_conv(ops, store, &e.gdc, &h, hs);
    let h = replay_bn(ops, store, &e.gdc_bn, &h, hs);
    let (h, hs) = replay_conv(ops, store, &e.project, &h, hs);
    replay_bn(ops, store, &e.project_bn, &h, hs)
}
