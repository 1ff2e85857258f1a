mod common;

use std::collections::BTreeSet;

use candle_core::{DType, Tensor};
use proptest::prelude::*;
use refsketch::curation::{
    cull_improper, extract_cluster_features, identify_styles, kmeans, list_images, load_4skst, matched_accuracy,
    CullConfig, KMeansConfig, UnpairedSampler,
};
use refsketch::imaging::Raster;
use refsketch::losses::CellPoolExtractor;
use refsketch::synth::write_eval_set;
use refsketch::Error;

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn points() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 3..30)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Lloyd converged: each label is a nearest centroid, each centroid the
    // mean of its members, and the reported inertia matches.
    #[test]
    fn kmeans_is_a_fixed_point(x in points(), k in 1usize..4, seed in any::<u64>()) {
        let k = k.min(x.len());
        let a = kmeans(&x, KMeansConfig::new(k, seed)).unwrap();
        prop_assert_eq!(a.k(), k);
        let mut inertia = 0.0;
        for (p, &l) in x.iter().zip(&a.labels) {
            let own = sq(p, &a.centroids[l]);
            inertia += own;
            prop_assert!(a.centroids.iter().all(|c| own <= sq(p, c) + 1e-9));
        }
        prop_assert!((inertia - a.inertia).abs() < 1e-9 * (1.0 + inertia));
        for c in 0..k {
            let m = a.members(c);
            prop_assert!(!m.is_empty());
            for d in 0..2 {
                let mean = m.iter().map(|&i| x[i][d]).sum::<f64>() / m.len() as f64;
                prop_assert!((mean - a.centroids[c][d]).abs() < 1e-9);
            }
        }
        prop_assert!(a.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn culling_only_shrinks(x in points(), keep in prop::collection::vec(0usize..3, 1..3), seed in any::<u64>()) {
        let images: Vec<Tensor> = x.iter().map(|_| Tensor::zeros((1, 4, 4), DType::F32, &candle_core::Device::Cpu).unwrap()).collect();
        let config = CullConfig { k: 3, rounds: 2, seed };
        match cull_improper(&images, &x, &config, &[keep.clone(), keep], None) {
            Ok(out) => {
                prop_assert!(out.kept.len() <= x.len());
                prop_assert!(out.kept.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(out.kept.iter().all(|&i| i < x.len()));
                prop_assert!(out.pending.is_none());
            }
            Err(e) => prop_assert!(matches!(e, Error::AllCulled)),
        }
    }

    #[test]
    fn sampler_covers_each_color_once(colors in 1usize..40, sketches in 1usize..10, batch in 1usize..6, seed in any::<u64>(), epoch in 0usize..20) {
        let s = UnpairedSampler::new(colors, sketches, batch, seed).unwrap();
        let batches = s.epoch(epoch);
        prop_assert_eq!(batches.len(), s.batches_per_epoch());
        let seen: Vec<usize> = batches.iter().flatten().map(|p| p.0).collect();
        prop_assert_eq!(seen.iter().copied().collect::<BTreeSet<_>>().len(), colors);
        prop_assert_eq!(seen.len(), colors);
        prop_assert!(batches.iter().flatten().all(|p| p.1 < sketches));
        prop_assert_eq!(batches, UnpairedSampler::new(colors, sketches, batch, seed).unwrap().epoch(epoch));
    }
}

#[test]
fn kmeans_input_errors() {
    assert!(matches!(kmeans(&[], KMeansConfig::new(1, 0)), Err(Error::EmptyInput)));
    let x = vec![vec![0.0], vec![1.0]];
    assert!(matches!(kmeans(&x, KMeansConfig::new(3, 0)), Err(Error::InvalidClusterCount { k: 3, n: 2 })));
    assert!(matches!(kmeans(&x, KMeansConfig::new(0, 0)), Err(Error::InvalidClusterCount { .. })));
}

#[test]
fn separated_blobs_are_recovered() {
    let mut rng = common::rng(9);
    let noise = common::values(&common::randn(&mut rng, &[80, 3], DType::F64).unwrap());
    let x: Vec<Vec<f64>> = (0..80).map(|i| (0..3).map(|d| noise[i * 3 + d] * 0.1 + if d == i % 4 % 3 { 5.0 * (i % 4) as f64 } else { 0.0 }).collect()).collect();
    let truth: Vec<usize> = (0..80).map(|i| i % 4).collect();
    let a = identify_styles(&x, 4, 0).unwrap();
    assert_eq!(matched_accuracy(&a.labels, &truth, 4), 1.0);
}

#[test]
fn pending_round_stops_for_review() {
    let x: Vec<Vec<f64>> = (0..12).map(|i| vec![(i / 4) as f64 * 10.0]).collect();
    let images: Vec<Tensor> = (0..12).map(|_| Tensor::zeros((1, 4, 4), DType::F32, &candle_core::Device::Cpu).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let config = CullConfig { k: 3, rounds: 2, seed: 0 };
    let out = cull_improper(&images, &x, &config, &[], Some(dir.path())).unwrap();
    assert_eq!(out.kept.len(), 12);
    assert!(out.rounds.is_empty() && out.pending.is_some());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 3);
    let drop_first = out.pending.unwrap().labels[0];
    let keep: Vec<usize> = (0..3).filter(|&l| l != drop_first).collect();
    let out = cull_improper(&images, &x, &config, &[keep], None).unwrap();
    assert_eq!(out.kept, (4..12).collect::<Vec<_>>());
    assert!(matches!(cull_improper(&images, &x, &config, &[vec![]], None), Err(Error::AllCulled)));
}

#[test]
fn eval_set_layout() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(list_images(&dir.path().join("nope")), Err(Error::MissingFile(_))));
    assert!(matches!(list_images(dir.path()), Err(Error::EmptyDirectory(_))));
    write_eval_set(dir.path(), 16).unwrap();
    let pairs = load_4skst(dir.path()).unwrap();
    assert_eq!(pairs.len(), 25);
    assert!(pairs.iter().enumerate().all(|(i, p)| p.index == i && p.sketches.len() == 4));
    let feats = extract_cluster_features(
        &pairs.iter().map(|p| p.sketches[0].tensor().clone()).collect::<Vec<_>>(),
        &CellPoolExtractor { cell: 4 },
    )
    .unwrap();
    assert!(feats.iter().all(|f| f.len() == 16));

    std::fs::remove_file(dir.path().join("style3").join("07.png")).unwrap();
    match load_4skst(dir.path()) {
        Err(Error::IncompleteDataset { missing }) => assert_eq!(missing, vec![dir.path().join("style3").join("07.png")]),
        other => panic!("expected IncompleteDataset, got {other:?}"),
    }
}
