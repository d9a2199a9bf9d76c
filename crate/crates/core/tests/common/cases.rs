//! Randomized cases comparing the engine against the naive references.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mixfacenet::blocks::{ActKind, Activation, BatchNorm, Conv, MixConv, MixConvSpec, SeWeights};
use mixfacenet::complexity::{account_activation, CostReport, Costed};
use mixfacenet::ops::activation::{prelu, sigmoid, swish};
use mixfacenet::ops::shape::channel_shuffle;
use mixfacenet::ops::{batch_norm, conv2d, global_avg_pool, BnMode, BnParams, ConvParams};
use mixfacenet::params::{Initializer, ParamStore};
use mixfacenet::{Shape, Tensor};

use super::*;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, s: Shape, lo: f32, hi: f32) -> Tensor<f32> {
    Tensor::from_fn(s, |_| rng.gen_range(lo..hi))
}

pub fn vector(rng: &mut ChaCha8Rng, c: usize, lo: f32, hi: f32) -> Tensor<f32> {
    Tensor::vector((0..c).map(|_| rng.gen_range(lo..hi)).collect())
}

fn divisors(c: usize) -> Vec<usize> {
    (1..=c).filter(|g| c % g == 0).collect()
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, v: &[T]) -> T {
    v[rng.gen_range(0..v.len())]
}

pub const OP_KINDS: [&str; 10] = [
    "conv2d", "batch_norm_infer", "batch_norm_train", "prelu", "swish", "sigmoid", "gap", "mixconv", "shuffle", "se",
];

/// Runs one randomized case of `OP_KINDS[kind]` and returns a description
/// and the largest absolute deviation from the reference.
pub fn op_case(kind: usize, seed: u64) -> (String, f64) {
    let mut r = rng(seed);
    let n = r.gen_range(1..=3);
    let h = r.gen_range(1..=7);
    let w = r.gen_range(1..=7);
    let mut ops = OpCounter::default();
    match OP_KINDS[kind] {
        "conv2d" => {
            let g = r.gen_range(1..=3);
            let cin = g * r.gen_range(1..=3);
            let cout = g * r.gen_range(1..=3);
            let k = pick(&mut r, &[1, 3, 5]);
            let stride = r.gen_range(1..=2);
            let pad = r.gen_range(0..=k / 2);
            let (h, w) = (h.max(k), w.max(k));
            let xs = Shape::new(n, cin, h, w);
            let x = uniform(&mut r, xs, -1.0, 1.0);
            let wt = uniform(&mut r, Shape::new(cout, cin / g, k, k), -1.0, 1.0);
            let b = vector(&mut r, cout, -1.0, 1.0);
            let bias = r.gen_bool(0.5);
            let y = conv2d(&x, &wt, bias.then_some(&b), ConvParams::new(k, stride, pad, g)).unwrap();
            let (o, _) = naive_conv(&mut ops, &to64(&x), xs, &to64(&wt), wt.shape(), bias.then(|| to64(&b)).as_deref(), stride, pad, g);
            (format!("conv2d {xs} k{k} s{stride} p{pad} g{g} bias={bias}"), max_abs_diff(&to64(&y), &o))
        }
        "batch_norm_infer" | "batch_norm_train" => {
            let c = r.gen_range(1..=5);
            let xs = Shape::new(n, c, h, w);
            let x = uniform(&mut r, xs, -2.0, 2.0);
            let gamma = vector(&mut r, c, 0.5, 1.5);
            let beta = vector(&mut r, c, -1.0, 1.0);
            let mean = vector(&mut r, c, -0.5, 0.5);
            let var = vector(&mut r, c, 0.5, 2.0);
            let p = BnParams {
                gamma: &gamma,
                beta: &beta,
                running_mean: &mean,
                running_var: &var,
                eps: 1e-5,
            };
            let train = OP_KINDS[kind] == "batch_norm_train";
            if train && xs.n * h * w < 2 {
                return (format!("batch_norm_train {xs} (single value, skipped)"), 0.0);
            }
            let mode = if train { BnMode::Train } else { BnMode::Infer };
            let (y, _) = batch_norm(&x, &p, mode).unwrap();
            let o = if train {
                naive_bn_train(&to64(&x), xs, &to64(&gamma), &to64(&beta), 1e-5)
            } else {
                naive_bn_infer(&mut ops, &to64(&x), xs, &to64(&gamma), &to64(&beta), &to64(&mean), &to64(&var), 1e-5)
            };
            (format!("{} {xs}", OP_KINDS[kind]), max_abs_diff(&to64(&y), &o))
        }
        "prelu" => {
            let c = r.gen_range(1..=5);
            let xs = Shape::new(n, c, h, w);
            let x = uniform(&mut r, xs, -3.0, 3.0);
            let a = vector(&mut r, c, -0.5, 0.5);
            let y = prelu(&x, &a).unwrap();
            let o = naive_prelu(&mut ops, &to64(&x), xs, &to64(&a));
            (format!("prelu {xs}"), max_abs_diff(&to64(&y), &o))
        }
        "swish" | "sigmoid" => {
            let xs = Shape::new(n, r.gen_range(1..=5), h, w);
            let x = uniform(&mut r, xs, -8.0, 8.0);
            let (y, f): (_, fn(f64) -> f64) = if OP_KINDS[kind] == "swish" {
                (swish(&x), super::swish)
            } else {
                (sigmoid(&x), super::sigmoid)
            };
            let o = naive_map(&mut ops, &to64(&x), f);
            (format!("{} {xs}", OP_KINDS[kind]), max_abs_diff(&to64(&y), &o))
        }
        "gap" => {
            let xs = Shape::new(n, r.gen_range(1..=5), h, w);
            let x = uniform(&mut r, xs, -1.0, 1.0);
            let y = global_avg_pool(&x).unwrap();
            (format!("gap {xs}"), max_abs_diff(&to64(&y), &naive_gap(&to64(&x), xs)))
        }
        "mixconv" => {
            let groups = r.gen_range(1..=4);
            let c = r.gen_range(groups..=groups + 6);
            let ks: Vec<usize> = (0..groups).map(|i| 3 + 2 * i).collect();
            let stride = r.gen_range(1..=2);
            let xs = Shape::new(n, c, h + 2, w + 2);
            let x = uniform(&mut r, xs, -1.0, 1.0);
            let spec = MixConvSpec::new(ks.clone(), stride, c).unwrap();
            let kernels: Vec<Tensor<f32>> = ks
                .iter()
                .zip(&spec.channel_split)
                .map(|(&k, &cg)| uniform(&mut r, Shape::new(cg, 1, k, k), -1.0, 1.0))
                .collect();
            let y = mixfacenet::blocks::mixconv(&x, &kernels, &spec).unwrap();
            let kw: Vec<(usize, Vec<f64>)> = ks.iter().zip(&kernels).map(|(&k, t)| (k, to64(t))).collect();
            let (o, _) = naive_mixconv(&mut ops, &to64(&x), xs, &kw, stride);
            (format!("mixconv {xs} k{ks:?} s{stride}"), max_abs_diff(&to64(&y), &o))
        }
        "shuffle" => {
            let g = r.gen_range(1..=4);
            let xs = Shape::new(n, g * r.gen_range(1..=4), h, w);
            let x = uniform(&mut r, xs, -1.0, 1.0);
            let y = channel_shuffle(&x, g).unwrap();
            (format!("shuffle {xs} g{g}"), max_abs_diff(&to64(&y), &naive_shuffle(&to64(&x), xs, g)))
        }
        "se" => {
            let c = r.gen_range(2..=8);
            let red = r.gen_range(1..=c);
            let xs = Shape::new(n, c, h, w);
            let x = uniform(&mut r, xs, -1.0, 1.0);
            let rw = uniform(&mut r, Shape::new(red, c, 1, 1), -1.0, 1.0);
            let rb = vector(&mut r, red, -0.5, 0.5);
            let ew = uniform(&mut r, Shape::new(c, red, 1, 1), -1.0, 1.0);
            let eb = vector(&mut r, c, -0.5, 0.5);
            let alpha = vector(&mut r, red, 0.0, 0.5);
            let use_prelu = r.gen_bool(0.5);
            let y = mixfacenet::blocks::se_block(
                &x,
                &SeWeights {
                    reduce_weight: &rw,
                    reduce_bias: &rb,
                    expand_weight: &ew,
                    expand_bias: &eb,
                    prelu_alpha: use_prelu.then_some(&alpha),
                },
            )
            .unwrap();
            let a64 = to64(&alpha);
            let o = naive_se(&to64(&x), xs, &to64(&rw), &to64(&rb), &to64(&ew), &to64(&eb), use_prelu.then_some(&a64[..]));
            (format!("se {xs} r{red} prelu={use_prelu}"), max_abs_diff(&to64(&y), &o))
        }
        _ => unreachable!(),
    }
}

/// One randomized layer: its cost row totals next to what the naive
/// executor actually performed on a batch of one.
pub struct CounterCase {
    pub label: String,
    pub reported_flops: u64,
    pub reported_macs: u64,
    pub counted_ops: u64,
    pub counted_macs: u64,
    /// Largest deviation of the engine output from the counted executor.
    pub output_diff: f64,
}

impl CounterCase {
    pub fn exact(&self) -> bool {
        self.reported_flops == self.counted_ops && self.reported_macs == self.counted_macs
    }
}

/// Builds a random conv, batch norm, activation or mixconv layer in a fresh
/// store, costs it and runs the counted executor on the same input.
pub fn counter_case(seed: u64, batch: usize) -> CounterCase {
    let mut r = rng(seed);
    let mut store = ParamStore::<f32>::new();
    let mut init = Initializer::new(seed);
    let h = r.gen_range(3..=9);
    let w = r.gen_range(3..=9);
    let mut report = CostReport::default();
    let mut ops = OpCounter::default();
    let kind = seed % 5;
    let (label, engine, counted) = match kind {
        0 => {
            let g = r.gen_range(1..=3);
            let (cin, cout) = (g * r.gen_range(1..=3), g * r.gen_range(1..=4));
            let k = pick(&mut r, &[1, 3, 5]);
            let p = ConvParams::new(k, r.gen_range(1..=2), r.gen_range(0..=k / 2), g);
            let bias = r.gen_bool(0.5);
            let conv = Conv::new(&mut store, &mut init, "conv", cin, cout, p, bias).unwrap();
            if let Some(b) = conv.bias {
                *store.get_mut(b) = vector(&mut r, cout, -1.0, 1.0);
            }
            let xs = Shape::new(batch, cin, h, w);
            let x = uniform(&mut r, xs, -1.0, 1.0);
            conv.account(&store, xs, &mut report).unwrap();
            let y = conv2d(&x, store.get(conv.weight), conv.bias.map(|b| store.get(b)), p).unwrap();
            let (o, _) = replay_conv(&mut ops, &store, &conv, &to64(&x), xs);
            (format!("conv {cin}->{cout} k{} s{} p{} g{g} bias={bias} at {h}x{w}", k, p.stride, p.padding), to64(&y), o)
        }
        1 => {
            let c = r.gen_range(1..=6);
            let bn = BatchNorm::new(&mut store, "bn", c).unwrap();
            for (id, lo, hi) in [(bn.gamma, 0.5, 1.5), (bn.beta, -1.0, 1.0), (bn.running_mean, -0.5, 0.5), (bn.running_var, 0.5, 2.0)] {
                *store.get_mut(id) = vector(&mut r, c, lo, hi);
            }
            let xs = Shape::new(batch, c, h, w);
            let x = uniform(&mut r, xs, -1.0, 1.0);
            bn.account(&store, xs, &mut report).unwrap();
            let p = BnParams {
                gamma: store.get(bn.gamma),
                beta: store.get(bn.beta),
                running_mean: store.get(bn.running_mean),
                running_var: store.get(bn.running_var),
                eps: bn.eps as f32,
            };
            let (y, _) = batch_norm(&x, &p, BnMode::Infer).unwrap();
            let o = replay_bn(&mut ops, &store, &bn, &to64(&x), xs);
            (format!("batch_norm c{c} at {h}x{w}"), to64(&y), o)
        }
        2 | 3 => {
            let c = r.gen_range(1..=6);
            let kind = if kind == 2 { ActKind::Swish } else { ActKind::Prelu };
            let act = Activation::new(&mut store, "act", kind, c).unwrap();
            let xs = Shape::new(batch, c, h, w);
            let x = uniform(&mut r, xs, -3.0, 3.0);
            account_activation(&act, "act", &store, xs, &mut report);
            let y = match &act {
                Activation::Swish => swish(&x),
                Activation::Prelu { alpha, .. } => prelu(&x, store.get(*alpha)).unwrap(),
            };
            let o = replay_act(&mut ops, &store, &act, &to64(&x), xs);
            (format!("{} c{c} at {h}x{w}", kind.as_str()), to64(&y), o)
        }
        _ => {
            let groups = r.gen_range(1..=3);
            let c = r.gen_range(groups..=groups + 8);
            let ks: Vec<usize> = (0..groups).map(|i| 3 + 2 * i).collect();
            let spec = MixConvSpec::new(ks.clone(), r.gen_range(1..=2), c).unwrap();
            let mc = MixConv::new(&mut store, &mut init, "mixconv", spec).unwrap();
            let xs = Shape::new(batch, c, h, w);
            let x = uniform(&mut r, xs, -1.0, 1.0);
            mc.account(&store, xs, &mut report).unwrap();
            let kernels: Vec<Tensor<f32>> = mc.kernels.iter().map(|&id| store.get(id).clone()).collect();
            let y = mixfacenet::blocks::mixconv(&x, &kernels, &mc.spec).unwrap();
            let (o, _) = replay_mixconv(&mut ops, &store, &mc, &to64(&x), xs);
            (format!("mixconv c{c} k{ks:?} s{} at {h}x{w}", mc.spec.stride), to64(&y), o)
        }
    };
    CounterCase {
        label,
        reported_flops: report.total_flops(),
        reported_macs: report.total_macs(),
        counted_ops: ops.total(),
        counted_macs: ops.macs,
        output_diff: max_abs_diff(&engine, &counted),
    }
}

/// Channel shuffle with `g` groups is a bijection on channels and shuffling
/// with `c / g` groups undoes it. Checked on channel labels directly.
pub fn shuffle_algebra(c: usize, g: usize) -> bool {
    let x = Tensor::<f32>::from_fn(Shape::new(1, c, 1, 2), |i| i as f32);
    let y = channel_shuffle(&x, g).unwrap();
    let mut seen: Vec<f32> = y.data().to_vec();
    seen.sort_by(f32::total_cmp);
    let bijection = seen == x.data();
    let back = channel_shuffle(&y, c / g).unwrap();
    bijection && back.data() == x.data()
}

pub fn shuffle_divisors(c: usize) -> Vec<usize> {
    divisors(c)
}
