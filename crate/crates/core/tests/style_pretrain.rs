mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;

use candle_core::{DType, Device};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refsketch::networks::{StyleEncoder, STYLE_DIM};
use refsketch::style_pretrain::{
    embed_all, export_embeddings, load_style_encoder, read_embeddings, sample_triplet, save_style_encoder, triplet_loss,
    CorpusEntry, StyleCorpus,
};
use refsketch::synth::{builtin_style, render_sketch, write_style_corpus, Shape};
use refsketch::Error;

fn entry(shape: usize, style: usize) -> CorpusEntry {
    CorpusEntry { path: PathBuf::from(format!("{shape}_{style}.png")), shape_id: shape.to_string(), style_id: style.to_string() }
}

proptest! {
    #[test]
    fn triplet_loss_is_a_hinge(a in prop::collection::vec(-2.0f32..2.0, 8), p in prop::collection::vec(-2.0f32..2.0, 8),
                               n in prop::collection::vec(-2.0f32..2.0, 8), margin in 0.0f64..3.0) {
        let l = triplet_loss(&a, &p, &n, margin);
        let d = |x: &[f32]| a.iter().zip(x).map(|(u, v)| ((u - v) as f64).powi(2)).sum::<f64>();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, d(&n) >= d(&p) + margin);
    }

    // Random corpora where some shapes miss styles: every draw keeps the
    // style/shape constraints.
    #[test]
    fn sampled_triplets_respect_labels(seed in any::<u64>(), shapes in 2usize..8, styles in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for sh in 0..shapes {
            for st in 0..styles {
                if st < 2 || rand::Rng::random_bool(&mut rng, 0.6) {
                    entries.push(entry(sh, st));
                }
            }
        }
        let corpus = StyleCorpus::new(entries).unwrap();
        let e = corpus.entries();
        for _ in 0..10_000 / 20 {
            let t = sample_triplet(&corpus, &mut rng, 100).unwrap();
            prop_assert_eq!(&e[t.anchor].style_id, &e[t.positive].style_id);
            prop_assert_eq!(&e[t.anchor].shape_id, &e[t.negative].shape_id);
            prop_assert_ne!(&e[t.anchor].style_id, &e[t.negative].style_id);
        }
    }
}

#[test]
fn twenty_thousand_draws_on_one_corpus() {
    let entries: Vec<_> = (0..6).flat_map(|sh| (0..3).map(move |st| entry(sh, st))).collect();
    let corpus = StyleCorpus::new(entries).unwrap();
    let e = corpus.entries();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut distinct_positive = 0;
    for _ in 0..20_000 {
        let t = sample_triplet(&corpus, &mut rng, 10).unwrap();
        assert_eq!(e[t.anchor].style_id, e[t.positive].style_id);
        assert_eq!(e[t.anchor].shape_id, e[t.negative].shape_id);
        assert_ne!(e[t.anchor].style_id, e[t.negative].style_id);
        distinct_positive += usize::from(t.positive != t.anchor);
    }
    assert_eq!(distinct_positive, 20_000);
}

#[test]
fn corpora_without_negatives_are_rejected() {
    let single_style = vec![entry(0, 0), entry(1, 0)];
    assert!(matches!(StyleCorpus::new(single_style), Err(Error::InsufficientCorpus(_))));
}

#[test]
fn manifest_and_weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_style_corpus(dir.path(), 0..3, 24).unwrap();
    let corpus = StyleCorpus::load_manifest(&manifest).unwrap();
    assert_eq!(corpus.len(), 12);
    assert!(corpus.entries().iter().all(|e| e.path.exists()));
    let styles: BTreeSet<_> = corpus.entries().iter().map(|e| e.style_id.clone()).collect();
    assert_eq!(styles.len(), 4);

    let enc = StyleEncoder::new(2, DType::F32, &Device::Cpu, 11).unwrap().freeze();
    let path = dir.path().join("enc.safetensors");
    save_style_encoder(&enc, &path).unwrap();
    let back = load_style_encoder(&path).unwrap();
    assert!(back.is_frozen() && back.base_channels() == 2);
    assert!(back.store().matches(&enc.store().snapshot().unwrap()).unwrap());
}

#[test]
fn embeddings_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let enc = StyleEncoder::new(2, DType::F32, &Device::Cpu, 5).unwrap().freeze();
    let a = render_sketch(&Shape::new(1), &builtin_style(0), 32).unwrap();
    let b = render_sketch(&Shape::new(2), &builtin_style(3), 32).unwrap();
    let items = vec![
        ("a.png".to_string(), "0".to_string(), a.clone()),
        ("a.png".to_string(), "0".to_string(), a),
        ("b.png".to_string(), String::new(), b),
    ];
    let rows = embed_all(&enc, &items, None).unwrap();
    assert_eq!(rows[0], rows[1]);
    let out = dir.path().join("emb.csv");
    export_embeddings(&rows, &out).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().all(|l| l.split(',').count() == 2 + STYLE_DIM));
    assert_eq!(read_embeddings(&out).unwrap(), rows);
}
