//! Independent reference computations checked against the library.

use proxyvid_core::probe::{kmeans, nmi, probe, HashingBagOfWords, ProbeConfig, TextCorpus};
use proxyvid_core::synth::{generate, SynthSpec};
use proxyvid_core::vision::{EncoderMode, ProxyViT, ProxyViTConfig};
use proxyvid_core::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_vit(mode: EncoderMode, t_max: usize, seed: u64) -> (ProxyViT, ParamStore) {
    let cfg = ProxyViTConfig {
        image_size: 4,
        patch_size: 2,
        channels: 2,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        t_max,
        n_proxies: 3,
        embed_dim: 5,
        mode,
    };
    let mut store = ParamStore::new();
    let vit = ProxyViT::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (vit, store)
}

#[test]
fn patch_embedding_matches_loop() {
    let (vit, store) = small_vit(EncoderMode::Vip, 5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let video = random_tensor(&mut rng, &[3, 4, 8]);
    let got = vit.embed_patches(&store, &video).unwrap();

    let w = store.get(store.find("vision.patch_projection.weight").unwrap());
    let b = store.get(store.find("vision.patch_projection.bias").unwrap());
    let ps = store.get(store.find("vision.pos_spatial").unwrap());
    let pt = store.get(store.find("vision.pos_temporal").unwrap());
    for t in 0..3 {
        for n in 0..4 {
            for j in 0..8 {
                let mut want = b.data()[j] + ps.get2(n, j) + pt.get2(t, j);
                for i in 0..8 {
                    want += video.data()[(t * 4 + n) * 8 + i] * w.get2(i, j);
                }
                assert!((got.get2(t * 4 + n, j) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn image_equals_single_frame_video_with_substituted_temporal_row() {
    // t_max = 6 puts the middle at 2.5, halfway between rows 2 and 3.
    let (vit, store) = small_vit(EncoderMode::Vip, 6, 3);
    let frame = random_tensor(&mut ChaCha8Rng::seed_from_u64(4), &[4, 8]);
    let image = vit.encode_image(&store, &frame).unwrap();

    let mut swapped = store.clone();
    let id = swapped.find("vision.pos_temporal").unwrap();
    let table = swapped.get_mut(id);
    let mid: Vec<f64> = (0..8).map(|j| 0.5 * (table.get2(2, j) + table.get2(3, j))).collect();
    table.row_mut(0).copy_from_slice(&mid);
    let video = frame.clone().reshape(vec![1, 4, 8]).unwrap();
    let as_video = vit.encode_video(&swapped, &video).unwrap();
    assert!(image.max_abs_diff(&as_video) < 1e-12);
}

#[test]
fn single_frame_vip_equals_full_attention() {
    let (vip, store) = small_vit(EncoderMode::Vip, 4, 5);
    let (full, full_store) = small_vit(EncoderMode::FullAttention, 4, 5);
    assert_eq!(store, full_store);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let v = random_tensor(&mut rng, &[1, 4, 8]);
        let a = vip.encode_video(&store, &v).unwrap();
        let b = full.encode_video(&store, &v).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
    let v = random_tensor(&mut rng, &[3, 4, 8]);
    assert!(vip.encode_video(&store, &v).unwrap().max_abs_diff(&full.encode_video(&store, &v).unwrap()) > 1e-9);
}

#[test]
fn mean_pool_ignores_frame_order_but_vip_does_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let v = random_tensor(&mut rng, &[3, 4, 8]);
    let mut reversed = Vec::new();
    for t in (0..3).rev() {
        reversed.extend_from_slice(&v.data()[t * 32..(t + 1) * 32]);
    }
    let reversed = Tensor::new(vec![3, 4, 8], reversed).unwrap();

    let (mp, mp_store) = small_vit(EncoderMode::MeanPool, 4, 8);
    let a = mp.encode_video(&mp_store, &v).unwrap();
    let b = mp.encode_video(&mp_store, &reversed).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);

    let (vip, vip_store) = small_vit(EncoderMode::Vip, 4, 8);
    let a = vip.encode_video(&vip_store, &v).unwrap();
    let b = vip.encode_video(&vip_store, &reversed).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-9);
}

#[test]
fn mean_pool_is_the_renormalised_mean_of_frame_embeddings() {
    let (mp, store) = small_vit(EncoderMode::MeanPool, 4, 9);
    let v = random_tensor(&mut ChaCha8Rng::seed_from_u64(10), &[3, 4, 8]);
    let got = mp.encode_video(&store, &v).unwrap();
    let mut sum = vec![0.0; 5];
    for t in 0..3 {
        let frame = Tensor::new(vec![1, 4, 8], v.data()[t * 32..(t + 1) * 32].to_vec()).unwrap();
        let e = mp.encode_video(&store, &frame).unwrap();
        sum.iter_mut().zip(e.data()).for_each(|(s, x)| *s += x);
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (g, s) in got.data().iter().zip(&sum) {
        assert!((g - s / norm).abs() < 1e-12);
    }
}

#[test]
fn kmeans_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let pts: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << 6) - 1 {
            let mut inertia = 0.0;
            for side in [0, 1] {
                let members: Vec<&Vec<f64>> = (0..6).filter(|&i| (mask >> i) & 1 == side).map(|i| &pts[i]).collect();
                let c: Vec<f64> = (0..2).map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64).collect();
                inertia += members.iter().map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sum::<f64>();
            }
            best = best.min(inertia);
        }
        let got = kmeans(&Tensor::from_rows(&pts).unwrap(), 2, 8, rng.random()).unwrap();
        assert!((got.inertia - best).abs() < 1e-9, "{} vs {best}", got.inertia);
    }
}

#[test]
fn kmeans_recovers_separated_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for i in 0..60 {
        let c = if i % 2 == 0 { -10.0 } else { 10.0 };
        rows.push(vec![c + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        truth.push(i % 2);
    }
    let r = kmeans(&Tensor::from_rows(&rows).unwrap(), 2, 4, 0).unwrap();
    assert_eq!(nmi(&r.labels, &truth).unwrap(), 1.0);
}

#[test]
fn nmi_of_independent_labels_is_small() {
    let mut total = 0.0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<usize> = (0..1000).map(|_| rng.random_range(0..2)).collect();
        let b: Vec<usize> = (0..1000).map(|_| rng.random_range(0..2)).collect();
        total += nmi(&a, &b).unwrap();
    }
    assert!(total / 10.0 < 0.05);
}

fn corpus(name: &str, prefix: &str, n: usize, seed: u64) -> TextCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texts = (0..n)
        .map(|_| (0..6).map(|_| format!("{prefix}{}", rng.random_range(0..30))).collect::<Vec<_>>().join(" "))
        .collect();
    TextCorpus::new(name, texts).unwrap()
}

#[test]
fn probe_is_symmetric_and_separates_disjoint_vocabularies() {
    let cfg = ProbeConfig { sample_size: 200, repeats: 4, seed: 3, ..ProbeConfig::default() };
    let a = corpus("a", "x", 300, 1);
    let b = corpus("b", "y", 300, 2);
    let ab = probe(&a, &b, &cfg, &HashingBagOfWords::default()).unwrap();
    let ba = probe(&b, &a, &cfg, &HashingBagOfWords::default()).unwrap();
    assert_eq!(ab.per_repeat, ba.per_repeat);
    assert!(ab.mean_nmi > 0.9);
    assert!(!ab.sampled_with_replacement);

    let same = probe(&a, &TextCorpus::new("a2", a.texts.clone()).unwrap(), &cfg, &HashingBagOfWords::default()).unwrap();
    assert!(same.mean_nmi < 0.1);
}

#[test]
fn probe_flags_sampling_with_replacement() {
    let cfg = ProbeConfig { sample_size: 50, repeats: 2, ..ProbeConfig::default() };
    let r = probe(&corpus("a", "x", 20, 1), &corpus("b", "y", 80, 2), &cfg, &HashingBagOfWords::default()).unwrap();
    assert!(r.sampled_with_replacement);
    let json = serde_json::to_value(&r).unwrap();
    for key in ["corpus_a", "corpus_b", "mean_nmi", "std_nmi", "repeats", "sample_size", "provider"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[test]
fn noisier_subtitles_are_further_from_captions() {
    let cfg = ProbeConfig { sample_size: 500, repeats: 5, seed: 1, ..ProbeConfig::default() };
    let gap = |noise: f64| {
        let spec = SynthSpec { n_pairs: 640, subtitle_noise: noise, ..SynthSpec::default() };
        let ds = generate(&spec).unwrap();
        let subs = ds.subtitle_corpus("subtitles").unwrap();
        let caps = ds.caption_corpus("captions").unwrap();
        probe(&subs, &caps, &cfg, &HashingBagOfWords::default()).unwrap().mean_nmi
    };
    let (clean, noisy) = (gap(0.0), gap(0.8));
    assert!(noisy > clean, "noisy {noisy} vs clean {clean}");
}

#[test]
fn synthetic_class_balance() {
    let spec = SynthSpec { n_pairs: 500, n_classes: 7, ..SynthSpec::default() };
    let ds = generate(&spec).unwrap();
    let mut counts = vec![0usize; 7];
    ds.records.iter().for_each(|r| counts[r.class] += 1);
    let expect = 500.0 / 7.0;
    assert!(counts.iter().all(|&c| (c as f64 - expect).abs() <= 0.2 * expect), "{counts:?}");
}
