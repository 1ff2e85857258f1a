//! Image-similarity metrics and the two evaluation protocols over the
//! 25-shape, 4-style paired set.

use std::path::Path;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::curation::{extract_cluster_features, EvalPair, EVAL_SHAPES, EVAL_STYLES};
use crate::error::{Error, Result};
use crate::extractors::Lpips;
use crate::imaging::{self, GrayContent, Raster, SketchImage};
use crate::losses::FeatureExtractor;
use crate::networks::SketchGenerator;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const EVAL_RESOLUTION: usize = 512;
/// Eigenvalues of the covariance product below `-NEG_EIG_TOL` are reported.
const NEG_EIG_TOL: f64 = 1e-6;

/// 10·log10(255² / MSE) on the 8-bit scale; [`PSNR_CAP`] when MSE is 0.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let to_bytes = |t: &Tensor| -> Result<Tensor> { Ok(((t.to_dtype(DType::F64)? + 1.0)? * 127.5)?) };
    let mse = (to_bytes(a)? - to_bytes(b)?)?.sqr()?.mean_all()?.to_scalar::<f64>()?;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

fn mean_cov(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.len();
    if n < 2 {
        return Err(Error::DegenerateCovariance(n));
    }
    let d = x[0].len();
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mu = DVector::from_iterator(d, (0..d).map(|j| m.column(j).mean()));
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
/// tr((Σa Σb)^½) is computed as tr((√Σa Σb √Σa)^½), which is symmetric.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = mean_cov(a)?;
    let (mu_b, cov_b) = mean_cov(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::ShapeMismatch(format!("feature dims {} vs {}", mu_a.len(), mu_b.len())));
    }
    let d = mu_a.len();
    if a.len().min(b.len()) <= d {
        log::warn!("FID on {} / {} samples of dimension {d} is strongly biased", a.len(), b.len());
    }
    let s = sym_sqrt(&cov_a);
    let inner = &s * &cov_b * &s;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner).eigenvalues;
    let scale = eig.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if let Some(neg) = eig.iter().find(|v| **v < -NEG_EIG_TOL * scale) {
        log::warn!("covariance product has eigenvalue {neg:.3e}; clamped to 0");
    }
    let tr_sqrt: f64 = eig.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = (&mu_a - &mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Which style is requested for which content; lets test models look up
/// ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub shape: usize,
    /// 0-based style position.
    pub style: usize,
}

/// Anything that can draw content in a reference's style.
pub trait SketchModel {
    fn sketch(&self, content: &GrayContent, reference: &SketchImage, query: Query) -> Result<SketchImage>;
}

impl SketchModel for SketchGenerator {
    fn sketch(&self, content: &GrayContent, reference: &SketchImage, _query: Query) -> Result<SketchImage> {
        self.generate(content, reference)
    }
}

/// Networks used to score outputs.
pub struct EvalBackbones {
    pub lpips: Lpips,
    /// FID features are the flattened last tap of this extractor.
    pub fid: Box<dyn FeatureExtractor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub lpips: f64,
    pub fid: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleMetrics {
    /// 1-based style id.
    pub style: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub resolution: usize,
    pub n_pairs: usize,
    pub per_style: Vec<StyleMetrics>,
    pub aggregate: Metrics,
}

/// Reference index used for shape `i`: the next shape, wrapping.
pub fn reference_shape(i: usize) -> usize {
    (i + 1) % EVAL_SHAPES
}

struct Scored {
    style: usize,
    psnr: f64,
    lpips: f64,
    out: SketchImage,
    target: SketchImage,
}

fn score(outputs: Vec<(usize, SketchImage, SketchImage)>, backbones: &EvalBackbones, resolution: usize) -> Result<MetricReport> {
    let mut scored = Vec::with_capacity(outputs.len());
    for (style, out, target) in outputs {
        let (o, t) = (out.batched(DType::F32)?, target.batched(DType::F32)?);
        let psnr = psnr(&o, &t)?;
        let lpips = backbones.lpips.distance(&o, &t)?[0];
        scored.push(Scored { style, psnr, lpips, out, target });
    }
    let summarize = |items: &[&Scored]| -> Result<Metrics> {
        let n = items.len();
        let outs: Vec<Tensor> = items.iter().map(|s| s.out.tensor().clone()).collect();
        let tgts: Vec<Tensor> = items.iter().map(|s| s.target.tensor().clone()).collect();
        let fid = fid(
            &extract_cluster_features(&outs, backbones.fid.as_ref())?,
            &extract_cluster_features(&tgts, backbones.fid.as_ref())?,
        )?;
        Ok(Metrics {
            psnr: items.iter().map(|s| s.psnr).sum::<f64>() / n as f64,
            lpips: items.iter().map(|s| s.lpips).sum::<f64>() / n as f64,
            fid,
            n,
        })
    };
    let mut per_style = Vec::new();
    for style in 0..EVAL_STYLES {
        let items: Vec<&Scored> = scored.iter().filter(|s| s.style == style).collect();
        if !items.is_empty() {
            per_style.push(StyleMetrics { style: style + 1, metrics: summarize(&items)? });
        }
    }
    let all: Vec<&Scored> = scored.iter().collect();
    Ok(MetricReport { resolution, n_pairs: all.len(), per_style, aggregate: summarize(&all)? })
}

fn prepared(pairs: &[EvalPair], resolution: usize) -> Result<Vec<(GrayContent, Vec<SketchImage>)>> {
    if pairs.len() != EVAL_SHAPES || pairs.iter().any(|p| p.sketches.len() != EVAL_STYLES) {
        return Err(Error::IncompleteDataset { missing: vec![] });
    }
    pairs
        .iter()
        .map(|p| {
            let content = imaging::resize(&imaging::to_gray(&p.color)?, resolution, resolution)?;
            let sketches = p.sketches.iter().map(|s| imaging::resize(s, resolution, resolution)).collect::<Result<_>>()?;
            Ok((content, sketches))
        })
        .collect()
}

/// Same style, unseen shape: shape `i` is drawn with style `s` taken from
/// shape `i + 1`, and compared to its own ground truth in style `s`.
pub fn evaluate_extraction(model: &dyn SketchModel, pairs: &[EvalPair], backbones: &EvalBackbones) -> Result<MetricReport> {
    evaluate_extraction_at(model, pairs, backbones, EVAL_RESOLUTION)
}

/// [`evaluate_extraction`] at a non-standard square resolution, for quick
/// runs. Reports carry the resolution they were scored at.
pub fn evaluate_extraction_at(
    model: &dyn SketchModel,
    pairs: &[EvalPair],
    backbones: &EvalBackbones,
    resolution: usize,
) -> Result<MetricReport> {
    let data = prepared(pairs, resolution)?;
    let first = first_pass(model, &data)?;
    let outputs = first
        .into_iter()
        .map(|(i, s, out)| (s, out, data[i].1[s].clone()))
        .collect();
    score(outputs, backbones, resolution)
}

fn first_pass(model: &dyn SketchModel, data: &[(GrayContent, Vec<SketchImage>)]) -> Result<Vec<(usize, usize, SketchImage)>> {
    let mut out = Vec::with_capacity(EVAL_SHAPES * EVAL_STYLES);
    for (i, (content, _)) in data.iter().enumerate() {
        for s in 0..EVAL_STYLES {
            let reference = &data[reference_shape(i)].1[s];
            out.push((i, s, model.sketch(content, reference, Query { shape: i, style: s })?));
        }
    }
    Ok(out)
}

/// What the second pass is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CyclicTarget {
    #[default]
    FirstOutput,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclicReport {
    pub against: CyclicTarget,
    pub first_pass: MetricReport,
    pub cyclic: MetricReport,
}

/// O₁ = G(C, R) as in [`evaluate_extraction`], then O₂ = G(C, O₁); the
/// cyclic block scores O₂ against O₁ or against ground truth.
pub fn cyclic_evaluate(
    model: &dyn SketchModel,
    pairs: &[EvalPair],
    backbones: &EvalBackbones,
    against: CyclicTarget,
) -> Result<CyclicReport> {
    cyclic_evaluate_at(model, pairs, backbones, against, EVAL_RESOLUTION)
}

pub fn cyclic_evaluate_at(
    model: &dyn SketchModel,
    pairs: &[EvalPair],
    backbones: &EvalBackbones,
    against: CyclicTarget,
    resolution: usize,
) -> Result<CyclicReport> {
    let data = prepared(pairs, resolution)?;
    let first = first_pass(model, &data)?;
    let mut first_scored = Vec::with_capacity(first.len());
    let mut cyclic = Vec::with_capacity(first.len());
    for (i, s, o1) in first {
        let o2 = model.sketch(&data[i].0, &o1, Query { shape: i, style: s })?;
        let target = match against {
            CyclicTarget::FirstOutput => o1.clone(),
            CyclicTarget::GroundTruth => data[i].1[s].clone(),
        };
        cyclic.push((s, o2, target));
        first_scored.push((s, o1, data[i].1[s].clone()));
    }
    Ok(CyclicReport {
        against,
        first_pass: score(first_scored, backbones, resolution)?,
        cyclic: score(cyclic, backbones, resolution)?,
    })
}

/// Writes `report` as pretty JSON.
pub fn write_json<T: Serialize>(report: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// One CSV row per (block, style) plus an `all` row per block.
pub fn write_csv(blocks: &[(&str, &MetricReport)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["block", "style", "n", "psnr", "lpips", "fid"])?;
    for (name, r) in blocks {
        let rows = r
            .per_style
            .iter()
            .map(|s| (s.style.to_string(), s.metrics))
            .chain(std::iter::once(("all".to_string(), r.aggregate)));
        for (style, m) in rows {
            w.write_record([
                name.to_string(),
                style,
                m.n.to_string(),
                format!("{:.6}", m.psnr),
                format!("{:.6}", m.lpips),
                format!("{:.6}", m.fid),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
