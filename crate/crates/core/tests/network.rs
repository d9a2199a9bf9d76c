mod common;

use proptest::prelude::*;
use rand::Rng;

use common::cases::{rng, uniform};
use common::{max_abs_diff, replay_network, to64, OpCounter};
use mixfacenet::blocks::ShufflePlacement;
use mixfacenet::checkpoint::Checkpoint;
use mixfacenet::complexity::{count_flops, count_macs, describe};
use mixfacenet::config::NetworkConfig;
use mixfacenet::network::{compare, Metric, Network};
use mixfacenet::params::ParamKind;
use mixfacenet::{Error, Shape, Tensor};

fn nano(seed: u64) -> Network {
    Network::build(NetworkConfig::preset("nano").unwrap(), seed).unwrap()
}

/// Moves every batch-norm statistic and PReLU slope away from its
/// initial value so inference exercises all of them.
fn perturb(net: &mut Network, seed: u64) {
    let mut r = rng(seed);
    let store = net.params_mut();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (lo, hi) = match store.entry(id).kind {
            ParamKind::BnRunningMean | ParamKind::BnBeta => (-0.3, 0.3),
            ParamKind::BnRunningVar | ParamKind::BnGamma => (0.5, 1.5),
            ParamKind::PreluAlpha => (0.0, 0.5),
            _ => continue,
        };
        for v in store.get_mut(id).data_mut() {
            *v = r.gen_range(lo..hi);
        }
    }
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let d = t.shape().c;
    t.data().chunks(d).map(<[f32]>::to_vec).collect()
}

#[test]
fn nano_matches_naive_replay_for_every_variant() {
    for (name, placement) in [
        ("nano", ShufflePlacement::AfterBlock),
        ("shufflenano", ShufflePlacement::AfterBlock),
        ("shufflenano", ShufflePlacement::AfterMixConv),
    ] {
        let mut cfg = NetworkConfig::preset(name).unwrap();
        cfg.shuffle_placement = placement;
        let mut net = Network::build(cfg, 4).unwrap();
        perturb(&mut net, 5);
        let s = net.input_shape(2);
        let x = uniform(&mut rng(6), s, -1.0, 1.0);
        let mut ops = OpCounter::default();
        let want = replay_network(&mut ops, &net, &to64(&x), s);
        let got = to64(&net.forward(&x).unwrap());
        let d = max_abs_diff(&got, &want);
        assert!(d < 1e-4, "{name} {placement:?}: {d}");
        let per_sample = count_flops(&net, (s.h, s.w)).unwrap();
        assert_eq!(ops.total(), 2 * per_sample, "{name}: counted ops are linear in batch size");
        assert_eq!(ops.macs, 2 * count_macs(&net, (s.h, s.w)).unwrap());
    }
}

#[test]
fn batch_permutation_permutes_embeddings() {
    let mut net = nano(1);
    perturb(&mut net, 2);
    let x = uniform(&mut rng(3), net.input_shape(4), -1.0, 1.0);
    let perm = [2, 0, 3, 1];
    let plane = x.numel() / 4;
    let mut xp = Vec::with_capacity(x.numel());
    for &i in &perm {
        xp.extend_from_slice(&x.data()[i * plane..(i + 1) * plane]);
    }
    let xp = Tensor::from_vec(x.shape(), xp).unwrap();
    let a = rows(&net.forward(&x).unwrap());
    let b = rows(&net.forward(&xp).unwrap());
    for (j, &i) in perm.iter().enumerate() {
        assert_eq!(a[i], b[j]);
    }
}

#[test]
fn duplicate_rows_embed_identically() {
    let net = nano(2);
    let one = uniform(&mut rng(4), net.input_shape(1), -1.0, 1.0);
    let two = Tensor::from_vec(net.input_shape(2), [one.data(), one.data()].concat()).unwrap();
    let out = rows(&net.forward(&two).unwrap());
    assert_eq!(out[0], out[1]);
    assert_eq!(out[0], rows(&net.forward(&one).unwrap())[0]);
}

#[test]
fn wrong_input_shape_is_rejected() {
    let net = nano(0);
    let x = Tensor::<f32>::zeros(Shape::new(1, 3, 32, 32));
    assert!(matches!(net.forward(&x), Err(Error::Shape(_))));
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nano.mfnw");
    let mut net = nano(8);
    perturb(&mut net, 9);
    net.save_checkpoint(&path).unwrap();
    let back = Network::load_checkpoint(&path).unwrap();
    let x = uniform(&mut rng(10), net.input_shape(2), -1.0, 1.0);
    assert_eq!(net.forward(&x).unwrap().data(), back.forward(&x).unwrap().data());
    let bytes = std::fs::read(&path).unwrap();
    let mut again = Vec::new();
    Checkpoint::read(&bytes[..]).unwrap().write(&mut again).unwrap();
    assert_eq!(bytes, again);
}

#[test]
fn shuffle_twin_weights_load_but_embed_differently() {
    let twin = Network::build(NetworkConfig::preset("shufflenano").unwrap(), 3).unwrap();
    let mut plain = nano(99);
    plain.load_weights(&Checkpoint::from_network(&twin)).unwrap();
    let x = uniform(&mut rng(11), plain.input_shape(1), -1.0, 1.0);
    let a = plain.forward(&x).unwrap();
    let b = twin.forward(&x).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-3);
}

#[test]
fn mismatched_checkpoint_names_everything() {
    let small = nano(0);
    let mut big = Network::build(NetworkConfig::preset("mixfacenet-xs").unwrap(), 0).unwrap();
    let before = big.params().entries()[0].tensor.clone();
    match big.load_weights(&Checkpoint::from_network(&small)) {
        Err(Error::CheckpointMismatch { missing, extra, reshaped }) => {
            assert!(!missing.is_empty() || !extra.is_empty() || !reshaped.is_empty());
        }
        other => panic!("expected a mismatch, got {other:?}"),
    }
    assert_eq!(big.params().entries()[0].tensor.data(), before.data());
}

#[test]
fn describe_rows_account_for_every_parameter() {
    for name in ["nano", "mixfacenet-s", "shufflemixfacenet-m"] {
        let net = Network::build(NetworkConfig::preset(name).unwrap(), 0).unwrap();
        let report = describe(&net, None).unwrap();
        assert_eq!(report.total_params(), net.params().trainable_count() as u64, "{name}");
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), report.rows.len() + 2);
        assert!(csv.starts_with("layer,kind,out_shape,macs,params,flops\n"));
    }
}

#[test]
fn flops_scale_with_input_area() {
    let net = Network::build(NetworkConfig::preset("mixfacenet-s").unwrap(), 0).unwrap();
    // the global depthwise kernel fixes the final map, so only 112x112 fits
    assert!(count_flops(&net, (112, 112)).is_ok());
    assert!(count_flops(&net, (96, 96)).is_err());
    let mut cfg = NetworkConfig::preset("mixfacenet-s").unwrap();
    cfg.input_size = (224, 224);
    let big = Network::build(cfg, 0).unwrap();
    let (a, b) = (count_macs(&net, (112, 112)).unwrap(), count_macs(&big, (224, 224)).unwrap());
    assert!(b > 3 * a, "{a} {b}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn normalized_distance_is_chordal_cosine(a in prop::collection::vec(-5.0f32..5.0, 8), b in prop::collection::vec(-5.0f32..5.0, 8)) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let d = compare(&a, &b, Metric::EuclideanNormalized).unwrap();
        let c = compare(&a, &b, Metric::Cosine).unwrap();
        prop_assert!((d * d - (2.0 - 2.0 * c)).abs() < 1e-9);
    }

    /// Ranking a gallery by normalized euclidean distance and by cosine
    /// similarity gives the same order.
    #[test]
    fn normalized_euclidean_and_cosine_rank_alike(seed in any::<u64>()) {
        let mut r = rng(seed);
        let q: Vec<f32> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let gallery: Vec<Vec<f32>> = (0..10).map(|_| (0..6).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let mut by_dist: Vec<usize> = (0..10).collect();
        let mut by_cos = by_dist.clone();
        by_dist.sort_by(|&i, &j| compare(&q, &gallery[i], Metric::EuclideanNormalized).unwrap().total_cmp(&compare(&q, &gallery[j], Metric::EuclideanNormalized).unwrap()));
        by_cos.sort_by(|&i, &j| compare(&q, &gallery[j], Metric::Cosine).unwrap().total_cmp(&compare(&q, &gallery[i], Metric::Cosine).unwrap()));
        prop_assert_eq!(by_dist, by_cos);
    }
}
