//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::Rng;

use common::cases::{self, counter_case, op_case, shuffle_algebra, shuffle_divisors, OP_KINDS};
use common::{brute_kfold, brute_rank1, sweep_tar_at_far};
use mixfacenet::checkpoint::Checkpoint;
use mixfacenet::complexity::{count_flops, count_params};
use mixfacenet::config::NetworkConfig;
use mixfacenet::eval::{rank1_identification, sequential_folds, tar_at_far, verification_accuracy_kfold, ScoreSet};
use mixfacenet::gradcheck;
use mixfacenet::network::{Metric, Network};
use mixfacenet::parallel::set_threads;
use mixfacenet::train::{train_toy, ToyConfig};
use mixfacenet::Tensor;

/// Published totals: (preset, parameters, FLOPs at 112x112).
const BUDGETS: [(&str, f64, f64); 3] = [
    ("mixfacenet-s", 3.07e6, 451.7e6),
    ("mixfacenet-xs", 1.04e6, 161.9e6),
    ("mixfacenet-m", 3.95e6, 626.1e6),
];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn run(id: u32, title: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let o = f();
    let took = t.elapsed();
    let in_time = took <= budget;
    let pass = o.pass && in_time;
    println!(
        "criterion {id:>2}: {} {title}: {} [{:.2}s / {:.0}s budget{}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64(),
        budget.as_secs_f64(),
        if in_time { "" } else { ", over budget" }
    );
    pass
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b
}

fn build(name: &str) -> Network {
    Network::build(NetworkConfig::preset(name).unwrap(), 0).unwrap()
}

fn params_budget() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, target, _) in BUDGETS {
        let p = count_params(&build(name));
        let twin = count_params(&build(&format!("shuffle{name}")));
        let e = rel(p as f64, target);
        ok &= e <= 0.01 && p == twin;
        parts.push(format!("{name} {p} ({:+.2}%, twin {})", 100.0 * (p as f64 - target) / target, if p == twin { "same" } else { "DIFFERS" }));
    }
    outcome(ok, parts.join("; "))
}

fn flops_budget() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, _, target) in BUDGETS {
        let f = count_flops(&build(name), (112, 112)).unwrap();
        ok &= rel(f as f64, target) <= 0.02;
        parts.push(format!("{name} {:.1}M ({:+.2}%)", f as f64 / 1e6, 100.0 * (f as f64 - target) / target));
    }
    outcome(ok, parts.join("; "))
}

fn counter_ground_truth() -> Outcome {
    let layers = 40;
    let mut bad = Vec::new();
    for seed in 0..layers {
        let c = counter_case(seed, 1);
        if !c.exact() || c.output_diff > 1e-5 {
            bad.push(format!("{} ({} vs {})", c.label, c.reported_flops, c.counted_ops));
        }
    }
    // and once over a whole network, executed end to end as naive loops
    let net = build("nano");
    let s = net.input_shape(1);
    let x = cases::uniform(&mut cases::rng(1), s, -1.0, 1.0);
    let mut ops = common::OpCounter::default();
    let replay = common::replay_network(&mut ops, &net, &common::to64(&x), s);
    let flops = count_flops(&net, (s.h, s.w)).unwrap();
    let diff = common::max_abs_diff(&common::to64(&net.forward(&x).unwrap()), &replay);
    let net_ok = ops.total() == flops && diff <= 1e-4;
    outcome(
        bad.is_empty() && net_ok,
        format!(
            "{} of {layers} random layers exact; nano network counted {} vs reported {flops} (output diff {diff:.1e}){}",
            layers - bad.len() as u64,
            ops.total(),
            if bad.is_empty() { String::new() } else { format!("; mismatches: {}", bad.join(", ")) }
        ),
    )
}

fn op_oracles() -> Outcome {
    let per_kind = 12;
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    for kind in 0..OP_KINDS.len() {
        for i in 0..per_kind {
            let (label, d) = op_case(kind, 1000 * kind as u64 + i);
            count += 1;
            if d > worst.0 || worst.1.is_empty() {
                worst = (d, label);
            }
        }
    }
    outcome(worst.0 <= 1e-5, format!("{count} cases over {} ops, worst {:.2e} ({})", OP_KINDS.len(), worst.0, worst.1))
}

fn gradient_suite() -> Outcome {
    let report = gradcheck::run(0).unwrap();
    let failed: Vec<String> = report.checks.iter().filter(|c| !c.passed()).map(|c| c.to_string()).collect();
    outcome(
        failed.is_empty(),
        format!(
            "{} checks, worst f64 {:.2e} (tol {:.0e}), worst f32 {:.2e} (tol {:.0e}){}",
            report.checks.len(),
            report.worst("f64"),
            gradcheck::F64_TOLERANCE,
            report.worst("f32"),
            gradcheck::F32_TOLERANCE,
            if failed.is_empty() { String::new() } else { format!("; {}", failed.join("; ")) }
        ),
    )
}

fn shuffle_identities() -> Outcome {
    let mut pairs = 0;
    let mut bad = Vec::new();
    for c in 2..=64 {
        for g in shuffle_divisors(c) {
            pairs += 1;
            if !shuffle_algebra(c, g) {
                bad.push(format!("c={c} g={g}"));
            }
        }
    }
    outcome(bad.is_empty(), format!("{pairs} (c, g) pairs checked{}", if bad.is_empty() { String::new() } else { format!("; failing {}", bad.join(", ")) }))
}

fn toy_training() -> Outcome {
    let cfg = ToyConfig {
        stop_at: Some(0.95),
        ..ToyConfig::default()
    };
    let a = train_toy(&cfg).unwrap();
    let b = train_toy(&cfg).unwrap();
    let steps = a.curve.len();
    let same_curve = a.curve == b.curve;
    let same_weights = a
        .net
        .params()
        .entries()
        .iter()
        .zip(b.net.params().entries())
        .all(|(x, y)| x.tensor.data() == y.tensor.data());
    let ok = a.final_accuracy >= 0.95 && steps <= cfg.steps && same_curve && same_weights;
    outcome(
        ok,
        format!(
            "accuracy {:.4} after {steps} of {} steps; repeat run identical: {}",
            a.final_accuracy,
            cfg.steps,
            same_curve && same_weights
        ),
    )
}

fn metric_oracles() -> Outcome {
    let sets = 60;
    let mut bad = Vec::new();
    for seed in 0..sets {
        let mut r = cases::rng(50_000 + seed);
        // coarse grids force ties, which is where threshold rules differ
        let levels = r.gen_range(3..40) as f64;
        let ng = r.gen_range(1..30);
        let ni = r.gen_range(1..60);
        let genuine: Vec<f64> = (0..ng).map(|_| (r.gen_range(0.2..1.0) * levels).round() / levels).collect();
        let impostor: Vec<f64> = (0..ni).map(|_| (r.gen_range(0.0..0.8) * levels).round() / levels).collect();
        let set = ScoreSet::new(genuine.clone(), impostor.clone()).unwrap();
        for far in [1e-4, 1e-2, 0.1, 0.3, 0.5] {
            let got = tar_at_far(&set, far).unwrap();
            let (tar, t) = sweep_tar_at_far(&genuine, &impostor, far);
            if got.tar != tar || got.threshold != t {
                bad.push(format!("tar set {seed} far {far}"));
            }
        }
        let mut labels: Vec<bool> = genuine.iter().map(|_| true).chain(impostor.iter().map(|_| false)).collect();
        let mut scores: Vec<f64> = genuine.iter().chain(&impostor).copied().collect();
        // interleave so folds see both classes
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.sort_by_key(|&i| (i * 7919) % labels.len().max(1));
        labels = order.iter().map(|&i| labels[i]).collect();
        scores = order.iter().map(|&i| scores[i]).collect();
        let k = r.gen_range(2..=labels.len().min(10));
        let folds = sequential_folds(labels.len(), k);
        let got = verification_accuracy_kfold(&labels, &scores, &folds, k).unwrap();
        let (mean, std, accs) = brute_kfold(&labels, &scores, &folds, k);
        let got_accs: Vec<f64> = got.folds.iter().map(|f| f.accuracy).collect();
        if got_accs != accs || (got.mean - mean).abs() > 1e-12 || (got.std - std).abs() > 1e-12 {
            bad.push(format!("kfold set {seed}"));
        }
    }
    let mut rank_cases = 0;
    for seed in 0..20 {
        let mut r = cases::rng(70_000 + seed);
        let d = r.gen_range(2..6);
        let ids = r.gen_range(2..6);
        let gallery_ids: Vec<usize> = (0..r.gen_range(ids..12)).map(|i| i % ids).collect();
        let vec = |r: &mut rand_chacha::ChaCha8Rng| (0..d).map(|_| (r.gen_range(-2..=2)) as f32).collect::<Vec<f32>>();
        let gallery: Vec<Vec<f32>> = gallery_ids.iter().map(|_| vec(&mut r)).collect();
        let probe_ids: Vec<usize> = (0..r.gen_range(1..10)).map(|_| r.gen_range(0..ids)).collect();
        let probes: Vec<Vec<f32>> = probe_ids.iter().map(|_| vec(&mut r)).collect();
        for metric in [Metric::Euclidean, Metric::Cosine, Metric::EuclideanNormalized] {
            rank_cases += 1;
            let got = rank1_identification(&probe_ids, &probes, &gallery_ids, &gallery, metric, None).unwrap();
            if got != brute_rank1(&probe_ids, &probes, &gallery_ids, &gallery, metric, None) {
                bad.push(format!("rank1 case {seed} {}", metric.as_str()));
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!("{sets} score sets (tar at 5 FARs, k-fold), {rank_cases} rank-1 cases{}", if bad.is_empty() { String::new() } else { format!("; mismatches: {}", bad.join(", ")) }),
    )
}

fn round_trip_and_threads() -> Outcome {
    let net = Network::build(NetworkConfig::preset("nano").unwrap(), 5).unwrap();
    let x = cases::uniform(&mut cases::rng(9), net.input_shape(3), -1.0, 1.0);
    let before = net.forward(&x).unwrap();
    let mut bytes = Vec::new();
    Checkpoint::from_network(&net).write(&mut bytes).unwrap();
    let ckpt = Checkpoint::read(&bytes[..]).unwrap();
    let mut loaded = Network::build(ckpt.config().unwrap(), 77).unwrap();
    loaded.load_weights(&ckpt).unwrap();
    let after = loaded.forward(&x).unwrap();
    let round_trip = before.data() == after.data();

    let big = build("mixfacenet-s");
    let xb = cases::uniform(&mut cases::rng(10), big.input_shape(2), -1.0, 1.0);
    let mut outs: HashMap<usize, Tensor<f32>> = HashMap::new();
    for t in [1, 4] {
        set_threads(t);
        outs.insert(t, big.forward(&xb).unwrap());
    }
    set_threads(0);
    let threads_equal = outs[&1].data() == outs[&4].data();
    outcome(
        round_trip && threads_equal,
        format!("save/load/forward bitwise equal: {round_trip}; mixfacenet-s embeddings with 1 vs 4 threads bitwise equal: {threads_equal}"),
    )
}

fn main() {
    let s = Duration::from_secs;
    let results = [
        run(1, "parameter budgets", s(3), params_budget),
        run(2, "FLOPs budgets", s(3), flops_budget),
        run(3, "FLOPs counter vs instrumented execution", s(10), counter_ground_truth),
        run(4, "primitive-op oracles", s(30), op_oracles),
        run(5, "gradient suite", s(60), gradient_suite),
        run(6, "shuffle algebra", s(5), shuffle_identities),
        run(7, "toy training", s(300), toy_training),
        run(8, "metric oracles", s(10), metric_oracles),
        run(9, "round trip and thread determinism", s(10), round_trip_and_threads),
    ];
    println!(
        "criterion 10: NOTE benchmark accuracies (LFW, AgeDB, MegaFace, IJB) need large-scale training on licensed data and are not reproduced; criteria 1-9 stand in for them"
    );
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
