//! The four trainable networks: sketch generator, color generator, patch
//! discriminator, and the contrastive style encoder.
//!
//! Channel widths scale with `base_channels` (64 gives the published
//! layout: 64/128/256/512). Every generator block preserves H×W.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::{adain, attended_fusion, fuse_with_gates, ChannelAttention, SpatialAttention, DEFAULT_REDUCTION};
use crate::error::{Error, Result};
use crate::imaging::{GrayContent, Raster, SketchImage, ColorImage};
use crate::layers::{expect_channels, Activation, ConvBlock, Linear, NormKind, Stack};
use crate::ops::Padding;
use crate::params::{init_rng, Init, ParamStore};

pub const STYLE_DIM: usize = 128;

/// Smallest sketch side accepted by the style encoder.
pub const STYLE_MIN_SIDE: usize = 8;

const LEAK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub reduction: usize,
    /// Spatial/channel attention and the attended-feature concatenation into
    /// every resblock. Off reproduces the "without attention" ablation.
    pub attention: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { base_channels: 64, reduction: DEFAULT_REDUCTION, attention: true }
    }
}

fn encoder(init: &mut Init<'_>, w: usize) -> Result<Stack> {
    let spec = [(1, w, 7), (w, 2 * w, 3), (2 * w, 4 * w, 3), (4 * w, 8 * w, 3)];
    let blocks = spec
        .iter()
        .enumerate()
        .map(|(i, &(cin, cout, k))| ConvBlock::same(&mut init.pp(&i.to_string()), cin, cout, k, NormKind::Batch, Activation::Relu))
        .collect::<Result<_>>()?;
    Ok(Stack { blocks })
}

fn decoder(init: &mut Init<'_>, w: usize, out: usize) -> Result<Stack> {
    let blocks = vec![
        ConvBlock::same(&mut init.pp("0"), 8 * w, 4 * w, 4, NormKind::Batch, Activation::Relu)?,
        ConvBlock::same(&mut init.pp("1"), 4 * w, 2 * w, 7, NormKind::Batch, Activation::Relu)?,
        ConvBlock::same(&mut init.pp("2"), 2 * w, w, 7, NormKind::None, Activation::None)?,
        ConvBlock::same(&mut init.pp("3"), w, out, 7, NormKind::None, Activation::Tanh)?,
    ];
    Ok(Stack { blocks })
}

fn check_single_channel_pair(content: &Tensor, reference: &Tensor) -> Result<()> {
    expect_channels(content, 1, "content")?;
    expect_channels(reference, 1, "reference")?;
    let (bc, _, hc, wc) = content.dims4()?;
    let (br, _, hr, wr) = reference.dims4()?;
    if (hc, wc) != (hr, wr) || bc != br {
        return Err(Error::ResolutionMismatch(format!(
            "content {bc}x{hc}x{wc} vs reference {br}x{hr}x{wr}"
        )));
    }
    Ok(())
}

/// G_s: (gray content, reference sketch) -> sketch.
#[derive(Debug, Clone)]
pub struct SketchGenerator {
    config: GeneratorConfig,
    store: ParamStore,
    enc_content: Stack,
    enc_reference: Stack,
    spatial: Option<SpatialAttention>,
    channel: Option<ChannelAttention>,
    res: Vec<ConvBlock>,
    dec: Stack,
}

impl SketchGenerator {
    pub fn new(config: GeneratorConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        let w = config.base_channels;
        let top = 8 * w;
        let mut store = ParamStore::new(dtype, device.clone());
        let mut rng = init_rng(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let enc_content = encoder(&mut init.pp("enc_c"), w)?;
        let enc_reference = encoder(&mut init.pp("enc_r"), w)?;
        let (spatial, channel) = if config.attention {
            (
                Some(SpatialAttention::new(&mut init.pp("spatial"))?),
                Some(ChannelAttention::new(&mut init.pp("channel"), top, config.reduction)?),
            )
        } else {
            (None, None)
        };
        let res_in = if config.attention { 2 * top } else { top };
        let res = (0..4)
            .map(|i| ConvBlock::same(&mut init.pp("res").pp(&i.to_string()), res_in, top, 3, NormKind::Batch, Activation::Relu))
            .collect::<Result<_>>()?;
        let dec = decoder(&mut init.pp("dec"), w, 1)?;
        Ok(Self { config, store, enc_content, enc_reference, spatial, channel, res, dec })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Batched forward: `content` and `reference` are `(b, 1, h, w)`. With
    /// `train == false` no gradient reaches the parameters or flows through
    /// the attention gates.
    pub fn forward(&self, content: &Tensor, reference: &Tensor, train: bool) -> Result<Tensor> {
        check_single_channel_pair(content, reference)?;
        let f_c = self.enc_content.forward(content, train)?;
        let f_r = self.enc_reference.forward(reference, train)?;
        let mut prev = adain(&f_c, &f_r)?;
        let attended = match (&self.spatial, &self.channel) {
            (Some(sp), Some(ch)) if train => Some(attended_fusion(&f_c, &f_r, sp, ch)?),
            (Some(sp), Some(ch)) => {
                let gates = (sp.forward(&f_c)?.detach(), ch.forward(&f_r)?.detach());
                Some(fuse_with_gates(&f_c, &f_r, &gates.0, &gates.1)?)
            }
            _ => None,
        };
        for block in &self.res {
            let input = match &attended {
                Some(a) => Tensor::cat(&[&prev, a], 1)?,
                None => prev.clone(),
            };
            prev = (block.forward(&input, train)? + &prev)?;
        }
        self.dec.forward(&prev, train)
    }

    /// Inference on a single pair.
    pub fn generate(&self, content: &GrayContent, reference: &SketchImage) -> Result<SketchImage> {
        let dt = self.store.dtype();
        let out = self.forward(&content.batched(dt)?, &reference.batched(dt)?, false)?;
        SketchImage::from_output(&out)
    }

    /// (cin, cout) per layer, in order, for architecture audits.
    pub fn layer_channels(&self) -> Vec<(&'static str, Vec<(usize, usize)>)> {
        vec![
            ("enc_c", self.enc_content.channels()),
            ("enc_r", self.enc_reference.channels()),
            ("res", self.res.iter().map(ConvBlock::channels).collect()),
            ("dec", self.dec.channels()),
        ]
    }

    pub fn channel_attention(&self) -> Option<&ChannelAttention> {
        self.channel.as_ref()
    }
}

/// G_c: sketch -> color reconstruction.
#[derive(Debug, Clone)]
pub struct ColorGenerator {
    config: GeneratorConfig,
    store: ParamStore,
    enc: Stack,
    res: Vec<ConvBlock>,
    dec: Stack,
}

impl ColorGenerator {
    pub fn new(config: GeneratorConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        let w = config.base_channels;
        let mut store = ParamStore::new(dtype, device.clone());
        let mut rng = init_rng(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let enc = encoder(&mut init.pp("enc"), w)?;
        let res = (0..4)
            .map(|i| ConvBlock::same(&mut init.pp("res").pp(&i.to_string()), 8 * w, 8 * w, 3, NormKind::Batch, Activation::Relu))
            .collect::<Result<_>>()?;
        let dec = decoder(&mut init.pp("dec"), w, 3)?;
        Ok(Self { config, store, enc, res, dec })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `(b, 1, h, w)` -> `(b, 3, h, w)`
    pub fn forward(&self, sketch: &Tensor, train: bool) -> Result<Tensor> {
        expect_channels(sketch, 1, "color generator")?;
        let mut x = self.enc.forward(sketch, train)?;
        for block in &self.res {
            x = (block.forward(&x, train)? + &x)?;
        }
        self.dec.forward(&x, train)
    }

    pub fn reconstruct(&self, sketch: &SketchImage) -> Result<ColorImage> {
        let out = self.forward(&sketch.batched(self.store.dtype())?, false)?;
        ColorImage::from_output(&out)
    }

    pub fn layer_channels(&self) -> Vec<(&'static str, Vec<(usize, usize)>)> {
        vec![
            ("enc", self.enc.channels()),
            ("res", self.res.iter().map(ConvBlock::channels).collect()),
            ("dec", self.dec.channels()),
        ]
    }
}

/// Receptive field of a conv stack given `(kernel, stride)` per layer.
pub fn receptive_field(layers: &[(usize, usize)]) -> usize {
    let mut field = 1;
    let mut jump = 1;
    for &(k, s) in layers {
        field += (k - 1) * jump;
        jump *= s;
    }
    field
}

/// 70×70 PatchGAN: C64-C128-C256-C512 then a one-channel logit head.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    store: ParamStore,
    blocks: Vec<ConvBlock>,
}

impl PatchDiscriminator {
    pub const MIN_SIDE: usize = 32;

    pub fn new(base_channels: usize, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        let w = base_channels;
        let mut store = ParamStore::new(dtype, device.clone());
        let mut rng = init_rng(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let lrelu = Activation::LeakyRelu(LEAK);
        let p1 = Padding::uniform(1);
        let spec = [
            (1, w, 2, NormKind::None, lrelu),
            (w, 2 * w, 2, NormKind::Instance, lrelu),
            (2 * w, 4 * w, 2, NormKind::Instance, lrelu),
            (4 * w, 8 * w, 1, NormKind::Instance, lrelu),
            (8 * w, 1, 1, NormKind::None, Activation::None),
        ];
        let blocks = spec
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, s, norm, act))| ConvBlock::new(&mut init.pp(&i.to_string()), cin, cout, 4, s, p1, norm, act))
            .collect::<Result<_>>()?;
        Ok(Self { store, blocks })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `(b, 1, h, w)` -> logit grid `(b, 1, gh, gw)`.
    pub fn forward(&self, sketch: &Tensor) -> Result<Tensor> {
        expect_channels(sketch, 1, "discriminator")?;
        let (_, _, h, w) = sketch.dims4()?;
        if h < Self::MIN_SIDE || w < Self::MIN_SIDE {
            return Err(Error::ResolutionMismatch(format!(
                "discriminator needs at least {0}x{0}, got {h}x{w}",
                Self::MIN_SIDE
            )));
        }
        let mut x = sketch.clone();
        for b in &self.blocks {
            x = b.forward(&x, true)?;
        }
        Ok(x)
    }

    pub fn discriminate(&self, sketch: &SketchImage) -> Result<Tensor> {
        Ok(self.forward(&sketch.batched(self.store.dtype())?)?.squeeze(0)?.squeeze(0)?)
    }

    pub fn kernels_and_strides(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().map(|b| (b.conv.kernel(), b.conv.stride())).collect()
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.kernels_and_strides())
    }

    pub fn layer_channels(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().map(ConvBlock::channels).collect()
    }
}

/// 128-d style embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleEmbedding(Vec<f32>);

impl StyleEmbedding {
    pub fn new(v: Vec<f32>) -> Result<Self> {
        if v.len() != STYLE_DIM || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::ShapeMismatch(format!("style embedding needs {STYLE_DIM} finite values")));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Contrastive style encoder f / C_w. The same weights embed anchor,
/// positive and negative.
#[derive(Debug, Clone)]
pub struct StyleEncoder {
    base_channels: usize,
    store: ParamStore,
    convs: Stack,
    head: Linear,
    frozen: bool,
}

impl StyleEncoder {
    pub fn new(base_channels: usize, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        let w = base_channels;
        let mut store = ParamStore::new(dtype, device.clone());
        let mut rng = init_rng(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let bn = NormKind::Batch;
        let relu = Activation::Relu;
        let convs = Stack {
            blocks: vec![
                ConvBlock::new(&mut init.pp("l1"), 1, w, 7, 1, Padding::uniform(3), bn, relu)?,
                ConvBlock::new(&mut init.pp("l2"), w, 2 * w, 4, 2, Padding::uniform(1), bn, relu)?,
                ConvBlock::new(&mut init.pp("l3"), 2 * w, 4 * w, 4, 2, Padding::uniform(1), bn, relu)?,
            ],
        };
        let head = Linear::new(&mut init.pp("l4"), 4 * w, STYLE_DIM)?;
        Ok(Self { base_channels, store, convs, head, frozen: false })
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Marks the encoder as a fixed loss network: inference-mode
    /// normalisation, and accepted by the style loss.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// `(b, 1, h, w)` -> `(b, 128)`.
    pub fn forward(&self, sketches: &Tensor, train: bool) -> Result<Tensor> {
        expect_channels(sketches, 1, "style encoder")?;
        let (_, _, h, w) = sketches.dims4()?;
        if h < STYLE_MIN_SIDE || w < STYLE_MIN_SIDE {
            return Err(Error::TooSmall { height: h, width: w, min: STYLE_MIN_SIDE });
        }
        let x = self.convs.forward(sketches, train && !self.frozen)?;
        let pooled = x.mean((2, 3))?;
        self.head.forward(&pooled)
    }

    pub fn embed(&self, sketch: &SketchImage) -> Result<StyleEmbedding> {
        let e = self.forward(&sketch.batched(self.store.dtype())?, false)?;
        StyleEmbedding::new(e.squeeze(0)?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
    }

    pub fn layer_channels(&self) -> Vec<(usize, usize)> {
        let mut v = self.convs.channels();
        v.push((self.head.in_dim(), self.head.out_dim()));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchgan_receptive_field_recurrence() {
        assert_eq!(receptive_field(&[(4, 2), (4, 2), (4, 2), (4, 1), (4, 1)]), 70);
        assert_eq!(receptive_field(&[(3, 1)]), 3);
        assert_eq!(receptive_field(&[]), 1);
    }

    #[test]
    fn published_channel_layout() -> Result<()> {
        let dev = Device::Cpu;
        let g = SketchGenerator::new(GeneratorConfig::default(), DType::F32, &dev, 0)?;
        let layers = g.layer_channels();
        let enc = vec![(1, 64), (64, 128), (128, 256), (256, 512)];
        assert_eq!(layers[0].1, enc);
        assert_eq!(layers[1].1, enc);
        assert_eq!(layers[2].1, vec![(1024, 512); 4]);
        assert_eq!(layers[3].1, vec![(512, 256), (256, 128), (128, 64), (64, 1)]);
        assert_eq!(g.channel_attention().unwrap().hidden_width(), 32);

        let c = ColorGenerator::new(GeneratorConfig::default(), DType::F32, &dev, 0)?;
        let layers = c.layer_channels();
        assert_eq!(layers[0].1, enc);
        assert_eq!(layers[1].1, vec![(512, 512); 4]);
        assert_eq!(layers[2].1, vec![(512, 256), (256, 128), (128, 64), (64, 3)]);

        let f = StyleEncoder::new(64, DType::F32, &dev, 0)?;
        assert_eq!(f.layer_channels(), vec![(1, 64), (64, 128), (128, 256), (256, 128)]);

        let d = PatchDiscriminator::new(64, DType::F32, &dev, 0)?;
        assert_eq!(d.layer_channels(), vec![(1, 64), (64, 128), (128, 256), (256, 512), (512, 1)]);
        assert_eq!(d.receptive_field(), 70);
        Ok(())
    }

    #[test]
    fn ablation_without_attention_runs() -> Result<()> {
        let cfg = GeneratorConfig { base_channels: 2, reduction: 16, attention: false };
        let g = SketchGenerator::new(cfg, DType::F32, &Device::Cpu, 1)?;
        assert!(g.channel_attention().is_none());
        assert_eq!(g.layer_channels()[2].1, vec![(16, 16); 4]);
        let x = Tensor::zeros((1, 1, 16, 16), DType::F32, &Device::Cpu)?;
        assert_eq!(g.forward(&x, &x, false)?.dims(), &[1, 1, 16, 16]);
        Ok(())
    }

    #[test]
    fn mismatched_inputs_are_rejected() -> Result<()> {
        let cfg = GeneratorConfig { base_channels: 2, reduction: 16, attention: true };
        let g = SketchGenerator::new(cfg, DType::F32, &Device::Cpu, 1)?;
        let a = Tensor::zeros((1, 1, 16, 16), DType::F32, &Device::Cpu)?;
        let b = Tensor::zeros((1, 1, 32, 16), DType::F32, &Device::Cpu)?;
        assert!(matches!(g.forward(&a, &b, false), Err(Error::ResolutionMismatch(_))));
        let f = StyleEncoder::new(4, DType::F32, &Device::Cpu, 0)?;
        let tiny = Tensor::zeros((1, 1, 4, 4), DType::F32, &Device::Cpu)?;
        assert!(matches!(f.forward(&tiny, false), Err(Error::TooSmall { .. })));
        Ok(())
    }
}
