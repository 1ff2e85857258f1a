//! Corpus curation by feature clustering, unpaired batch sampling, and the
//! paired evaluation-set loader.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{self, ColorImage, SketchImage};
use crate::losses::FeatureExtractor;
use crate::ops;

pub const CULL_K: usize = 10;
pub const CULL_ROUNDS: usize = 3;
pub const STYLE_K: usize = 4;
pub const EVAL_SHAPES: usize = 25;
pub const EVAL_STYLES: usize = 4;

/// Flattened last tap of `backbone` for each `(c, h, w)` image, resized to
/// the backbone's input size when it declares one.
pub fn extract_cluster_features(images: &[Tensor], backbone: &dyn FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let mut x = img.unsqueeze(0)?;
        if let Some((h, w)) = backbone.input_size() {
            if x.dims()[2..] != [h, w] {
                x = ops::resize_bilinear(&x, h, w)?;
            }
        }
        let taps = backbone.extract(&x)?;
        let last = taps
            .last()
            .ok_or_else(|| Error::ExtractorShapeMismatch(format!("{} returned no taps", backbone.name())))?;
        let v = last.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        if let Some(prev) = out.first().map(|p: &Vec<f64>| p.len()) {
            if prev != v.len() {
                return Err(Error::ExtractorShapeMismatch(format!("feature length {} vs {prev}", v.len())));
            }
        }
        out.push(v);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Independent k-means++ restarts; the lowest final inertia wins.
    pub n_init: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self { k, max_iter: 300, n_init: 10, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn members(&self, label: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == label).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_seed(x: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![x[rng.random_range(0..x.len())].clone()];
    let mut d2: Vec<f64> = x.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = x.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..x.len())
        };
        centroids.push(x[next].clone());
        for (i, p) in x.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn means(x: &[Vec<f64>], labels: &[usize], k: usize, previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = x[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in x.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(j, (s, c))| if c == 0 { previous[j].clone() } else { s.into_iter().map(|v| v / c as f64).collect() })
        .collect()
}

/// Assigns every point to its nearest centroid; empty clusters take the
/// point farthest from its own centroid. Returns labels and inertia.
fn assign(x: &[Vec<f64>], centroids: &mut [Vec<f64>]) -> (Vec<usize>, f64) {
    let k = centroids.len();
    let mut labels = Vec::with_capacity(x.len());
    let mut dists = Vec::with_capacity(x.len());
    for p in x {
        let (j, d) = nearest(p, centroids);
        labels.push(j);
        dists.push(d);
    }
    for j in 0..k {
        if labels.contains(&j) {
            continue;
        }
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let far = (0..x.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]));
        if let Some(i) = far {
            centroids[j] = x[i].clone();
            labels[i] = j;
            dists[i] = 0.0;
        }
    }
    (labels, dists.iter().sum())
}

fn lloyd(x: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut impl Rng) -> ClusterAssignment {
    let mut centroids = plus_plus_seed(x, k, rng);
    let mut history = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for _ in 0..max_iter.max(1) {
        let (next, inertia) = assign(x, &mut centroids);
        history.push(inertia);
        let converged = next == labels;
        labels = next;
        centroids = means(x, &labels, k, &centroids);
        if converged {
            break;
        }
    }
    let inertia = x.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum();
    ClusterAssignment { labels, centroids, inertia, history }
}

/// Lloyd iterations from k-means++ seeding, repeated `n_init` times.
pub fn kmeans(x: &[Vec<f64>], config: KMeansConfig) -> Result<ClusterAssignment> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    if config.k == 0 || config.k > x.len() {
        return Err(Error::InvalidClusterCount { k: config.k, n: x.len() });
    }
    let dim = x[0].len();
    if x.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::ShapeMismatch("feature vectors must be finite and equally long".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<ClusterAssignment> = None;
    for _ in 0..config.n_init.max(1) {
        let run = lloyd(x, config.k, config.max_iter, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Fraction of items whose cluster maps to their true label under the best
/// one-to-one relabelling (exhaustive over permutations; `k` ≤ 8).
pub fn matched_accuracy(labels: &[usize], truth: &[usize], k: usize) -> f64 {
    let mut confusion = vec![vec![0usize; k]; k];
    for (&l, &t) in labels.iter().zip(truth) {
        confusion[l % k][t % k] += 1;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        best = best.max((0..k).map(|i| confusion[i][p[i]]).sum());
    });
    best as f64 / labels.len().max(1) as f64
}

fn permute(p: &mut Vec<usize>, start: usize, f: &mut impl FnMut(&[usize])) {
    if start == p.len() {
        f(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permute(p, start + 1, f);
        p.swap(start, i);
    }
}

fn to_rgb_planar(img: &Tensor) -> Result<Tensor> {
    Ok(match img.dims()[0] {
        1 => Tensor::cat(&[img, img, img], 0)?,
        _ => img.clone(),
    })
}

/// One PNG grid per cluster, `{prefix}_cluster{label}.png`, up to 64
/// thumbnails of `thumb`×`thumb` each. Returns the written paths.
pub fn write_contact_sheets(
    images: &[Tensor],
    labels: &[usize],
    k: usize,
    dir: &Path,
    prefix: &str,
    thumb: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let cols = 8;
    let mut written = Vec::new();
    for c in 0..k {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).take(64).collect();
        let rows = members.len().div_ceil(cols).max(1);
        let mut sheet = image::RgbImage::from_pixel((cols * thumb) as u32, (rows * thumb) as u32, image::Rgb([255, 255, 255]));
        for (n, &i) in members.iter().enumerate() {
            let t = ops::resize_bilinear(&to_rgb_planar(&images[i].to_dtype(DType::F32)?)?.unsqueeze(0)?, thumb, thumb)?;
            let v = t.clamp(-1f32, 1f32)?.flatten_all()?.to_vec1::<f32>()?;
            let small = imaging::rgb_image(&v, thumb, thumb);
            image::imageops::replace(&mut sheet, &small, ((n % cols) * thumb) as i64, ((n / cols) * thumb) as i64);
        }
        let path = dir.join(format!("{prefix}_cluster{c}.png"));
        sheet.save(&path).map_err(|e| Error::Write { path: path.clone(), reason: e.to_string() })?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CullConfig {
    pub k: usize,
    pub rounds: usize,
    pub seed: u64,
}

impl Default for CullConfig {
    fn default() -> Self {
        Self { k: CULL_K, rounds: CULL_ROUNDS, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct CullOutcome {
    /// Indices into the input that survived every completed round.
    pub kept: Vec<usize>,
    /// Clustering of each completed round, over that round's survivors.
    pub rounds: Vec<ClusterAssignment>,
    /// Clustering awaiting a keep decision when fewer keep lists than
    /// rounds were supplied.
    pub pending: Option<ClusterAssignment>,
}

/// Repeated clustering where a reviewer decides, per round, which cluster
/// labels survive. `keep[r]` lists the labels kept after round `r`; rounds
/// without a keep list stop the process and return the pending clustering
/// for review. Contact sheets go to `sheets` when given.
pub fn cull_improper(
    images: &[Tensor],
    features: &[Vec<f64>],
    config: &CullConfig,
    keep: &[Vec<usize>],
    sheets: Option<&Path>,
) -> Result<CullOutcome> {
    if images.len() != features.len() {
        return Err(Error::ShapeMismatch(format!("{} images, {} feature vectors", images.len(), features.len())));
    }
    let mut kept: Vec<usize> = (0..images.len()).collect();
    let mut rounds = Vec::new();
    for r in 0..config.rounds {
        let feats: Vec<Vec<f64>> = kept.iter().map(|&i| features[i].clone()).collect();
        let k = config.k.min(feats.len());
        let assignment = kmeans(&feats, KMeansConfig::new(k, config.seed.wrapping_add(r as u64)))?;
        if let Some(dir) = sheets {
            let imgs: Vec<Tensor> = kept.iter().map(|&i| images[i].clone()).collect();
            write_contact_sheets(&imgs, &assignment.labels, k, dir, &format!("round{}", r + 1), 64)?;
        }
        let Some(labels) = keep.get(r) else {
            return Ok(CullOutcome { kept, rounds, pending: Some(assignment) });
        };
        let survivors: Vec<usize> = kept
            .iter()
            .zip(&assignment.labels)
            .filter(|(_, l)| labels.contains(l))
            .map(|(&i, _)| i)
            .collect();
        if survivors.is_empty() {
            return Err(Error::AllCulled);
        }
        kept = survivors;
        rounds.push(assignment);
    }
    Ok(CullOutcome { kept, rounds, pending: None })
}

/// Clusters sketch features into `k` drawing styles.
pub fn identify_styles(features: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterAssignment> {
    kmeans(features, KMeansConfig::new(k, seed))
}

/// Sorted PNG/JPEG files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::EmptyDirectory(dir.to_path_buf()));
    }
    Ok(out)
}

/// Pairs every color image once per epoch with a uniformly drawn reference.
#[derive(Debug, Clone)]
pub struct UnpairedSampler {
    colors: usize,
    sketches: usize,
    batch: usize,
    seed: u64,
}

impl UnpairedSampler {
    pub fn new(colors: usize, sketches: usize, batch: usize, seed: u64) -> Result<Self> {
        if colors == 0 || sketches == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(Self { colors, sketches, batch: batch.max(1), seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.colors.div_ceil(self.batch)
    }

    /// `(color index, reference index)` batches of `epoch`; depends only on
    /// the seed and the epoch number.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<(usize, usize)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..self.colors).collect();
        order.shuffle(&mut rng);
        order
            .chunks(self.batch)
            .map(|c| c.iter().map(|&i| (i, rng.random_range(0..self.sketches))).collect())
            .collect()
    }
}

/// One color image with its ground-truth sketch in every style.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub index: usize,
    pub color: ColorImage,
    /// Styles 1..=4 at positions 0..4.
    pub sketches: Vec<SketchImage>,
}

/// Loads `root/color/NN.png` and `root/style{1..4}/NN.png` for NN in 00..24.
pub fn load_4skst(root: &Path) -> Result<Vec<EvalPair>> {
    let mut missing = Vec::new();
    let color = |i: usize| root.join("color").join(format!("{i:02}.png"));
    let sketch = |s: usize, i: usize| root.join(format!("style{s}")).join(format!("{i:02}.png"));
    for i in 0..EVAL_SHAPES {
        if !color(i).exists() {
            missing.push(color(i));
        }
        for s in 1..=EVAL_STYLES {
            if !sketch(s, i).exists() {
                missing.push(sketch(s, i));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteDataset { missing });
    }
    (0..EVAL_SHAPES)
        .map(|i| {
            let index = color(i)
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse().ok())
                .unwrap_or(i);
            Ok(EvalPair {
                index,
                color: imaging::load_color(color(i))?,
                sketches: (1..=EVAL_STYLES).map(|s| imaging::load_sketch(sketch(s, i))).collect::<Result<_>>()?,
            })
        })
        .collect()
}
