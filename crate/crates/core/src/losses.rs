//! Generator and discriminator objectives and the epoch-dependent weights
//! that combine them.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{PatchDiscriminator, StyleEncoder};
use crate::ops::{self, mean_abs_diff};

/// Style and line weight at epoch 0.
pub const STYLE_LINE_START: f64 = 5.0;
/// Style and line weight at the final epoch.
pub const STYLE_LINE_END: f64 = 0.5;
pub const LAMBDA_CYC: f64 = 10.0;
pub const LAMBDA_ADV: f64 = 1.0;

/// A fixed network that maps a `(b, c, h, w)` batch to a list of feature maps
/// at declared tap points.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    fn taps(&self) -> Vec<String>;

    /// Channel count the extractor expects, if it is fixed.
    fn input_channels(&self) -> Option<usize> {
        None
    }

    /// Spatial size the extractor expects, if it is fixed.
    fn input_size(&self) -> Option<(usize, usize)> {
        None
    }

    fn extract(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Returns its input as the only tap.
#[derive(Debug, Clone, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn name(&self) -> &str {
        "identity"
    }

    fn taps(&self) -> Vec<String> {
        vec!["input".into()]
    }

    fn extract(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }
}

/// Mean over non-overlapping `cell`×`cell` windows.
#[derive(Debug, Clone)]
pub struct CellPoolExtractor {
    pub cell: usize,
}

impl FeatureExtractor for CellPoolExtractor {
    fn name(&self) -> &str {
        "cell-pool"
    }

    fn taps(&self) -> Vec<String> {
        vec![format!("avg{0}x{0}", self.cell)]
    }

    fn extract(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.avg_pool2d(self.cell)?])
    }
}

/// Luminance gradient magnitude; a parameter-free stand-in for an edge
/// detector. Maps any channel count to one channel in [0, 1].
#[derive(Debug, Clone, Default)]
pub struct GradientEdgeExtractor;

impl FeatureExtractor for GradientEdgeExtractor {
    fn name(&self) -> &str {
        "gradient-edges"
    }

    fn taps(&self) -> Vec<String> {
        vec!["edges".into()]
    }

    fn extract(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let g = x.mean_keepdim(1)?;
        let (_, _, h, w) = g.dims4()?;
        let dx = (g.narrow(3, 1, w - 1)? - g.narrow(3, 0, w - 1)?)?.pad_with_zeros(3, 0, 1)?;
        let dy = (g.narrow(2, 1, h - 1)? - g.narrow(2, 0, h - 1)?)?.pad_with_zeros(2, 0, 1)?;
        let mag = ((dx.sqr()? + dy.sqr()?)? + 1e-6)?.sqrt()?;
        Ok(vec![(mag * 0.5)?.clamp(0.0, 1.0)?])
    }
}

/// Per-epoch weights of the four generator terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub style: f64,
    pub line: f64,
    pub cyc: f64,
    pub adv: f64,
}

/// Style/line weight ramps linearly from 5 to 0.5 over the run; cycle and
/// adversarial weights stay at 10 and 1.
pub fn loss_weights(epoch: usize, total_epochs: usize) -> Result<LossWeights> {
    if total_epochs == 0 || epoch > total_epochs {
        return Err(Error::OutOfRangeEpoch { epoch, total: total_epochs });
    }
    let ramp = STYLE_LINE_START - (STYLE_LINE_START - STYLE_LINE_END) * epoch as f64 / total_epochs as f64;
    Ok(LossWeights { style: ramp, line: ramp, cyc: LAMBDA_CYC, adv: LAMBDA_ADV })
}

/// Unweighted values of the generator terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub style: f64,
    pub line: f64,
    pub cyc: f64,
    pub adv: f64,
}

pub fn total_generator_loss(terms: &LossTerms, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("style", terms.style), ("line", terms.line), ("cyc", terms.cyc), ("adv", terms.adv)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteTerm(name));
        }
    }
    Ok(w.style * terms.style + w.line * terms.line + w.cyc * terms.cyc + w.adv * terms.adv)
}

/// Every term of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub style: f64,
    pub line: f64,
    pub cyc: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub total_g: f64,
}

/// Mean absolute difference between the style embeddings of `output` and
/// `reference`, both `(b, 1, h, w)`. Gradients reach `output` only through
/// the encoder's forward pass; its weights are never updated here.
pub fn style_loss(output: &Tensor, reference: &Tensor, encoder: &StyleEncoder) -> Result<Tensor> {
    if !encoder.is_frozen() {
        return Err(Error::EncoderNotFrozen);
    }
    let dt = encoder.store().dtype();
    let eo = encoder.forward(&output.to_dtype(dt)?, false)?;
    let er = encoder.forward(&reference.to_dtype(dt)?, false)?;
    mean_abs_diff(&eo, &er)
}

/// L1 between style embeddings given directly.
pub fn embedding_l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    mean_abs_diff(a, b)
}

fn edge_features(img: &Tensor, hed: &dyn FeatureExtractor, vgg: &dyn FeatureExtractor) -> Result<Vec<Tensor>> {
    let edges = hed.extract(img)?;
    let [edges] = edges.as_slice() else {
        return Err(Error::ExtractorShapeMismatch(format!("{} must return one edge map", hed.name())));
    };
    let edges = match (vgg.input_channels(), edges.dims4()?.1) {
        (Some(3), 1) => Tensor::cat(&[edges, edges, edges], 1)?,
        _ => edges.clone(),
    };
    vgg.extract(&edges)
}

/// Σ over perceptual taps of mean |φ(edges(color)) − φ(edges(recon))|.
pub fn line_loss(
    color: &Tensor,
    reconstructed: &Tensor,
    hed: &dyn FeatureExtractor,
    vgg: &dyn FeatureExtractor,
) -> Result<Tensor> {
    if color.dims() != reconstructed.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", color.dims(), reconstructed.dims())));
    }
    let target = edge_features(&color.detach(), hed, vgg)?;
    let ours = edge_features(reconstructed, hed, vgg)?;
    if target.len() != ours.len() || target.is_empty() {
        return Err(Error::ExtractorShapeMismatch(format!("{} vs {} taps", target.len(), ours.len())));
    }
    let mut total: Option<Tensor> = None;
    for (a, b) in target.iter().zip(&ours) {
        if a.dims() != b.dims() {
            return Err(Error::ExtractorShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        let term = mean_abs_diff(&a.detach(), b)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one tap"))
}

pub fn cycle_loss(color: &Tensor, reconstructed: &Tensor) -> Result<Tensor> {
    mean_abs_diff(color, reconstructed)
}

/// Generator form of the adversarial objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialMode {
    /// Minimise −log D(O).
    #[default]
    NonSaturating,
    /// Minimise log(1 − D(O)), the literal minimax form.
    Saturating,
}

/// −mean log σ(real) − mean log(1 − σ(fake)).
pub fn discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = ops::softplus(&real_logits.neg()?)?.mean_all()?;
    let fake = ops::softplus(fake_logits)?.mean_all()?;
    Ok((real + fake)?)
}

pub fn generator_adversarial_loss(fake_logits: &Tensor, mode: AdversarialMode) -> Result<Tensor> {
    Ok(match mode {
        AdversarialMode::NonSaturating => ops::softplus(&fake_logits.neg()?)?.mean_all()?,
        AdversarialMode::Saturating => ops::softplus(fake_logits)?.mean_all()?.neg()?,
    })
}

/// `(d_loss, g_loss)`; the fake batch is detached for the discriminator term.
pub fn adversarial_losses(
    d: &PatchDiscriminator,
    real: &Tensor,
    fake: &Tensor,
    mode: AdversarialMode,
) -> Result<(Tensor, Tensor)> {
    let real_logits = d.forward(real)?;
    let fake_detached = d.forward(&fake.detach())?;
    let d_loss = discriminator_loss(&real_logits, &fake_detached)?;
    let g_loss = generator_adversarial_loss(&d.forward(fake)?, mode)?;
    Ok((d_loss, g_loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn weight_schedule_examples() -> Result<()> {
        assert_eq!(loss_weights(0, 100)?, LossWeights { style: 5.0, line: 5.0, cyc: 10.0, adv: 1.0 });
        assert_eq!(loss_weights(100, 100)?.style, 0.5);
        assert_eq!(loss_weights(50, 100)?.line, 2.75);
        assert!(matches!(loss_weights(101, 100), Err(Error::OutOfRangeEpoch { .. })));
        assert!(loss_weights(0, 0).is_err());
        Ok(())
    }

    #[test]
    fn weighted_total_examples() -> Result<()> {
        let ones = LossTerms { style: 1.0, line: 1.0, cyc: 1.0, adv: 1.0 };
        assert_eq!(total_generator_loss(&LossTerms::default(), &loss_weights(3, 10)?)?, 0.0);
        assert_eq!(total_generator_loss(&ones, &loss_weights(0, 100)?)?, 21.0);
        assert_eq!(total_generator_loss(&ones, &loss_weights(100, 100)?)?, 12.0);
        let bad = LossTerms { cyc: f64::NAN, ..ones };
        assert!(matches!(total_generator_loss(&bad, &loss_weights(0, 1)?), Err(Error::NonFiniteTerm("cyc"))));
        Ok(())
    }

    #[test]
    fn adversarial_at_zero_logits() -> Result<()> {
        let z = Tensor::zeros((2, 1, 3, 3), DType::F64, &Device::Cpu)?;
        let d = ops::scalar(&discriminator_loss(&z, &z)?)?;
        let g = ops::scalar(&generator_adversarial_loss(&z, AdversarialMode::NonSaturating)?)?;
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g - 2f64.ln()).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn adversarial_limits_and_monotonicity() -> Result<()> {
        let dev = Device::Cpu;
        let real = Tensor::full(60.0f64, (1, 1, 2, 2), &dev)?;
        let fake = Tensor::full(-60.0f64, (1, 1, 2, 2), &dev)?;
        assert!(ops::scalar(&discriminator_loss(&real, &fake)?)? < 1e-20);
        let mut prev = f64::INFINITY;
        for l in [-5.0, -1.0, 0.0, 0.5, 3.0] {
            let g = ops::scalar(&generator_adversarial_loss(&Tensor::full(l, (1, 1, 2, 2), &dev)?, AdversarialMode::NonSaturating)?)?;
            assert!(g < prev);
            prev = g;
        }
        Ok(())
    }

    #[test]
    fn line_loss_stub_example() -> Result<()> {
        let dev = Device::Cpu;
        let a = Tensor::new(&[1.0f64, 1.0], &dev)?.reshape((1, 1, 1, 2))?;
        let b = Tensor::new(&[0.0f64, 1.0], &dev)?.reshape((1, 1, 1, 2))?;
        let l = ops::scalar(&line_loss(&a, &b, &IdentityExtractor, &IdentityExtractor)?)?;
        assert!((l - 0.5).abs() < 1e-12);
        assert_eq!(ops::scalar(&line_loss(&a, &a, &IdentityExtractor, &IdentityExtractor)?)?, 0.0);
        Ok(())
    }

    #[test]
    fn cycle_loss_examples() -> Result<()> {
        let dev = Device::Cpu;
        let p = Tensor::ones((1, 3, 4, 4), DType::F64, &dev)?;
        let m = p.neg()?;
        assert_eq!(ops::scalar(&cycle_loss(&p, &p)?)?, 0.0);
        assert_eq!(ops::scalar(&cycle_loss(&p, &m)?)?, 2.0);
        let half = Tensor::cat(&[&p.narrow(2, 0, 2)?, &(p.narrow(2, 2, 2)? * 0.0)?], 2)?;
        assert_eq!(ops::scalar(&cycle_loss(&p, &half)?)?, 0.5);
        assert!(cycle_loss(&p, &p.narrow(2, 0, 2)?).is_err());
        Ok(())
    }

    #[test]
    fn embedding_l1_example() -> Result<()> {
        let dev = Device::Cpu;
        let a = Tensor::full(0.5f64, (1, 128), &dev)?;
        let b = Tensor::full(0.25f64, (1, 128), &dev)?;
        assert_eq!(ops::scalar(&embedding_l1(&a, &b)?)?, 0.25);
        assert_eq!(ops::scalar(&embedding_l1(&b, &a)?)?, 0.25);
        Ok(())
    }

    #[test]
    fn style_loss_rejects_trainable_encoder() -> Result<()> {
        let dev = Device::Cpu;
        let f = StyleEncoder::new(4, DType::F32, &dev, 0)?;
        let x = Tensor::zeros((1, 1, 16, 16), DType::F32, &dev)?;
        assert!(matches!(style_loss(&x, &x, &f), Err(Error::EncoderNotFrozen)));
        let f = f.freeze();
        assert_eq!(ops::scalar(&style_loss(&x, &x, &f)?)?, 0.0);
        Ok(())
    }
}
