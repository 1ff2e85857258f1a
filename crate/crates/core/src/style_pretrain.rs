//! Triplet pretraining of the style encoder and embedding export.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, Raster, SketchImage};
use crate::networks::{StyleEmbedding, StyleEncoder};
use crate::optim::{linear_decay_lr, Adam, AdamConfig};
use crate::tensorfile;

pub const DEFAULT_MARGIN: f64 = 1.0;
const ENCODER_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub path: PathBuf,
    pub shape_id: String,
    pub style_id: String,
}

/// Sketches labelled by shape and style.
#[derive(Debug, Clone)]
pub struct StyleCorpus {
    entries: Vec<CorpusEntry>,
    by_style: BTreeMap<String, Vec<usize>>,
    by_shape: BTreeMap<String, Vec<usize>>,
}

impl StyleCorpus {
    /// Validates that at least two styles exist and that every shape is
    /// drawn in at least two styles.
    pub fn new(entries: Vec<CorpusEntry>) -> Result<Self> {
        let mut by_style: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_shape: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            by_style.entry(e.style_id.clone()).or_default().push(i);
            by_shape.entry(e.shape_id.clone()).or_default().push(i);
        }
        if by_style.len() < 2 {
            return Err(Error::InsufficientCorpus(format!("{} distinct style(s); need at least 2", by_style.len())));
        }
        for (shape, idx) in &by_shape {
            let styles: BTreeSet<&str> = idx.iter().map(|&i| entries[i].style_id.as_str()).collect();
            if styles.len() < 2 {
                return Err(Error::InsufficientCorpus(format!("shape `{shape}` appears in only one style")));
            }
        }
        Ok(Self { entries, by_style, by_shape })
    }

    /// Reads a `path,shape_id,style_id` CSV; relative paths resolve against
    /// the manifest's directory.
    pub fn load_manifest(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut rdr = csv::Reader::from_path(path)?;
        let mut entries = Vec::new();
        for rec in rdr.deserialize() {
            let mut e: CorpusEntry = rec?;
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            entries.push(e);
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads every sketch, resized to `size`×`size`.
    pub fn load_images(&self, size: usize) -> Result<Vec<SketchImage>> {
        self.entries.iter().map(|e| imaging::resize(&imaging::load_sketch(&e.path)?, size, size)).collect()
    }
}

/// Corpus indices of anchor, positive and negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Positive and negative for a fixed anchor, or `None` when the anchor's
/// shape has no other style.
fn complete_triplet(corpus: &StyleCorpus, anchor: usize, rng: &mut impl Rng) -> Option<Triplet> {
    let a = &corpus.entries[anchor];
    let same_style = &corpus.by_style[&a.style_id];
    let distinct: Vec<usize> = same_style.iter().copied().filter(|&i| i != anchor).collect();
    let positive = if distinct.is_empty() { anchor } else { distinct[rng.random_range(0..distinct.len())] };
    let negatives: Vec<usize> = corpus.by_shape[&a.shape_id]
        .iter()
        .copied()
        .filter(|&i| corpus.entries[i].style_id != a.style_id)
        .collect();
    if negatives.is_empty() {
        return None;
    }
    let negative = negatives[rng.random_range(0..negatives.len())];
    Some(Triplet { anchor, positive, negative })
}

/// Uniform anchor; positive shares its style (a different image when one
/// exists); negative shares its shape but not its style. Anchors without a
/// valid negative are redrawn up to `max_attempts` times.
pub fn sample_triplet(corpus: &StyleCorpus, rng: &mut impl Rng, max_attempts: usize) -> Result<Triplet> {
    for _ in 0..max_attempts.max(1) {
        let anchor = rng.random_range(0..corpus.len());
        if let Some(t) = complete_triplet(corpus, anchor, rng) {
            return Ok(t);
        }
    }
    Err(Error::InsufficientCorpus(format!("no valid triplet after {max_attempts} attempts")))
}

fn sq_dist(x: &[f32], y: &[f32]) -> f64 {
    x.iter().zip(y).map(|(a, b)| ((*a as f64) - (*b as f64)).powi(2)).sum()
}

/// max(‖a−p‖² − ‖a−n‖² + margin, 0).
pub fn triplet_loss(a: &[f32], p: &[f32], n: &[f32], margin: f64) -> f64 {
    (sq_dist(a, p) - sq_dist(a, n) + margin).max(0.0)
}

/// Batch mean of the triplet hinge over `(b, d)` embedding tensors.
pub fn triplet_loss_tensor(a: &Tensor, p: &Tensor, n: &Tensor, margin: f64) -> Result<Tensor> {
    let dp = (a - p)?.sqr()?.sum(1)?;
    let dn = (a - n)?.sqr()?.sum(1)?;
    Ok(((dp - dn)? + margin)?.relu()?.mean_all()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub margin: f64,
    pub base_channels: usize,
    /// Sketches are resized to this square size.
    pub resolution: usize,
    pub seed: u64,
    /// Anchor redraws before giving up on a corpus.
    pub max_attempts: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 4,
            lr: 2e-4,
            margin: DEFAULT_MARGIN,
            base_channels: 64,
            resolution: 256,
            seed: 0,
            max_attempts: 100,
        }
    }
}

#[derive(Debug)]
pub struct Pretrained {
    pub encoder: StyleEncoder,
    /// Mean triplet loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Triplet training. Each epoch visits every corpus entry once as an anchor
/// (in a seeded random order), in batches of `config.batch`. Anchor,
/// positive and negative batches go through the encoder as one
/// concatenated batch, so one set of weights embeds all three.
///
/// A non-finite loss restores the last finite weights, writes them to
/// `fallback` when given, and returns [`Error::DivergenceDetected`].
pub fn pretrain_style_encoder(
    corpus: &StyleCorpus,
    images: &[SketchImage],
    config: &PretrainConfig,
    fallback: Option<&Path>,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Pretrained> {
    if images.len() != corpus.len() {
        return Err(Error::ShapeMismatch(format!("{} images for {} corpus entries", images.len(), corpus.len())));
    }
    let dev = Device::Cpu;
    let encoder = StyleEncoder::new(config.base_channels, DType::F32, &dev, config.seed)?;
    let mut opt = Adam::new(
        encoder.store().params().map(|(k, v)| (k.to_string(), v)),
        AdamConfig { lr: config.lr, ..Default::default() },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7121_97e7);
    let tensors: Vec<Tensor> = images.iter().map(|i| i.tensor().clone()).collect();
    let mut last_good = encoder.store().snapshot()?;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..config.epochs {
        opt.set_lr(linear_decay_lr(config.lr, epoch, config.epochs)?);
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch.max(1)) {
            let mut trips = Vec::with_capacity(chunk.len());
            for &anchor in chunk {
                trips.push(match complete_triplet(corpus, anchor, &mut rng) {
                    Some(t) => t,
                    None => sample_triplet(corpus, &mut rng, config.max_attempts)?,
                });
            }
            let pick = |f: fn(&Triplet) -> usize| -> Result<Vec<Tensor>> {
                Ok(trips.iter().map(|t| tensors[f(t)].clone()).collect())
            };
            let mut all = pick(|t| t.anchor)?;
            all.extend(pick(|t| t.positive)?);
            all.extend(pick(|t| t.negative)?);
            let emb = encoder.forward(&Tensor::stack(&all, 0)?, true)?;
            let b = trips.len();
            let loss = triplet_loss_tensor(&emb.narrow(0, 0, b)?, &emb.narrow(0, b, b)?, &emb.narrow(0, 2 * b, b)?, config.margin)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                encoder.store().restore(&last_good)?;
                if let Some(path) = fallback {
                    save_style_encoder(&encoder, path)?;
                }
                return Err(Error::DivergenceDetected { epoch });
            }
            opt.step(&loss.backward()?)?;
            last_good = encoder.store().snapshot()?;
            sum += value * b as f64;
            count += b;
        }
        let mean = sum / count.max(1) as f64;
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }
    Ok(Pretrained { encoder: encoder.freeze(), epoch_losses })
}

pub fn save_style_encoder(encoder: &StyleEncoder, path: &Path) -> Result<()> {
    let meta = HashMap::from([
        ("kind".to_string(), "style-encoder".to_string()),
        ("format_version".to_string(), ENCODER_FORMAT.to_string()),
        ("base_channels".to_string(), encoder.base_channels().to_string()),
    ]);
    tensorfile::save(path, &encoder.store().snapshot()?, meta)
}

/// Loads saved encoder weights and returns the encoder frozen.
pub fn load_style_encoder(path: &Path) -> Result<StyleEncoder> {
    let (tensors, meta) = tensorfile::load(path, &Device::Cpu)?;
    let version: u32 = tensorfile::meta_parse(&meta, "format_version")?;
    if version != ENCODER_FORMAT {
        return Err(Error::CheckpointVersionMismatch { found: version, expected: ENCODER_FORMAT });
    }
    let base: usize = tensorfile::meta_parse(&meta, "base_channels")?;
    let enc = StyleEncoder::new(base, DType::F32, &Device::Cpu, 0)?;
    enc.store().restore(&tensors)?;
    Ok(enc.freeze())
}

/// One embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub path: String,
    pub style: String,
    pub embedding: StyleEmbedding,
}

/// Embeds each sketch (resized to `resolution` when given).
pub fn embed_all(
    encoder: &StyleEncoder,
    sketches: &[(String, String, SketchImage)],
    resolution: Option<usize>,
) -> Result<Vec<EmbeddingRow>> {
    sketches
        .iter()
        .map(|(path, style, img)| {
            let img = match resolution {
                Some(r) => imaging::resize(img, r, r)?,
                None => img.clone(),
            };
            Ok(EmbeddingRow { path: path.clone(), style: style.clone(), embedding: encoder.embed(&img)? })
        })
        .collect()
}

/// CSV with header `path,style,e0..e127`; floats in `{:.8e}` (9 significant
/// digits, enough to round-trip f32).
pub fn export_embeddings(rows: &[EmbeddingRow], out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(out)?;
    let mut header = vec!["path".to_string(), "style".to_string()];
    header.extend((0..crate::networks::STYLE_DIM).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.path.clone(), r.style.clone()];
        rec.extend(r.embedding.as_slice().iter().map(|v| format!("{v:.8e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let values = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f32>().map_err(|e| Error::Checkpoint(format!("embedding value `{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(EmbeddingRow {
            path: rec[0].to_string(),
            style: rec[1].to_string(),
            embedding: StyleEmbedding::new(values)?,
        });
    }
    Ok(out)
}
