//! Shape/style fusion: spatial attention on content features, channel
//! attention on reference features, and adaptive instance normalisation.
//!
//! Feature maps are batched `(b, c, h, w)` tensors. Attention maps keep a
//! singleton axis where they broadcast: spatial maps are `(b, 1, h, w)`,
//! channel maps `(b, c, 1, 1)`.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Linear};
use crate::ops::{self, Padding};
use crate::params::Init;

/// Variance floor added inside the square root of both the content and the
/// style statistics.
pub const ADAIN_EPS: f64 = 1e-5;

pub const DEFAULT_REDUCTION: usize = 16;

/// σ(conv3×3([avg_c(x); max_c(x)])): one gate per spatial position.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(init: &mut Init<'_>) -> Result<Self> {
        let conv = Conv2d::new(&mut init.pp("conv"), 2, 1, 3, 1, Padding::uniform(1), true)?;
        Ok(Self { conv })
    }

    pub fn logits(&self, fm: &Tensor) -> Result<Tensor> {
        if fm.rank() != 4 {
            return Err(Error::ShapeMismatch(format!("spatial attention expects (b,c,h,w), got {:?}", fm.dims())));
        }
        let avg = fm.mean_keepdim(1)?;
        let max = fm.max_keepdim(1)?;
        let pooled = Tensor::cat(&[&avg, &max], 1)?;
        self.conv.forward(&pooled)
    }

    pub fn forward(&self, fm: &Tensor) -> Result<Tensor> {
        ops::sigmoid(&self.logits(fm)?)
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenActivation {
    Relu,
    Identity,
}

/// σ(MLP(avg_hw(x)) + MLP(max_hw(x))) with a shared C → C/r → C MLP.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    channels: usize,
    reduction: usize,
    w0: Linear,
    w1: Linear,
    hidden: HiddenActivation,
}

impl ChannelAttention {
    pub fn new(init: &mut Init<'_>, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 || channels < reduction {
            return Err(Error::ReductionMismatch { channels, ratio: reduction });
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            reduction,
            w0: Linear::new(&mut init.pp("w0"), channels, hidden)?,
            w1: Linear::new(&mut init.pp("w1"), hidden, channels)?,
            hidden: HiddenActivation::Relu,
        })
    }

    pub fn with_hidden_activation(mut self, act: HiddenActivation) -> Self {
        self.hidden = act;
        self
    }

    pub fn hidden_width(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn layers(&self) -> (&Linear, &Linear) {
        (&self.w0, &self.w1)
    }

    fn mlp(&self, v: &Tensor) -> Result<Tensor> {
        let h = self.w0.forward(v)?;
        let h = match self.hidden {
            HiddenActivation::Relu => h.relu()?,
            HiddenActivation::Identity => h,
        };
        self.w1.forward(&h)
    }

    pub fn logits(&self, fm: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = fm.dims4()?;
        if c != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "channel attention built for {} channels, got {c}",
                self.channels
            )));
        }
        let flat = fm.reshape((b, c, h * w))?;
        let avg = flat.mean(D::Minus1)?;
        let max = flat.max(D::Minus1)?;
        let sum = (self.mlp(&avg)? + self.mlp(&max)?)?;
        Ok(sum.reshape((b, c, 1, 1))?)
    }

    pub fn forward(&self, fm: &Tensor) -> Result<Tensor> {
        ops::sigmoid(&self.logits(fm)?)
    }
}

/// Re-scales each content channel to the style channel's spatial mean and
/// standard deviation. Spatial sizes of the two inputs may differ.
pub fn adain(content: &Tensor, style: &Tensor) -> Result<Tensor> {
    let (bc, cc, _, _) = content.dims4()?;
    let (bs, cs, _, _) = style.dims4()?;
    if cc != cs {
        return Err(Error::ChannelMismatch { content: cc, style: cs });
    }
    if bc != bs {
        return Err(Error::ShapeMismatch(format!("batch {bc} vs {bs}")));
    }
    let (mu_c, var_c) = ops::spatial_moments(content)?;
    let (mu_s, var_s) = ops::spatial_moments(style)?;
    let sd_c = (var_c + ADAIN_EPS)?.sqrt()?;
    let sd_s = (var_s + ADAIN_EPS)?.sqrt()?;
    let normalized = content.broadcast_sub(&mu_c)?.broadcast_div(&sd_c)?;
    Ok(normalized.broadcast_mul(&sd_s)?.broadcast_add(&mu_s)?)
}

/// `adain(content ⊙ spatial_gate, style ⊙ channel_gate)` for precomputed gates.
pub fn fuse_with_gates(content: &Tensor, style: &Tensor, spatial_gate: &Tensor, channel_gate: &Tensor) -> Result<Tensor> {
    let gated_content = content.broadcast_mul(spatial_gate)?;
    let gated_style = style.broadcast_mul(channel_gate)?;
    adain(&gated_content, &gated_style)
}

/// Spatial attention routed to the content branch, channel attention to the
/// style branch, then AdaIN of the two gated maps.
pub fn attended_fusion(
    content: &Tensor,
    style: &Tensor,
    spatial: &SpatialAttention,
    channel: &ChannelAttention,
) -> Result<Tensor> {
    let sp = spatial.forward(content)?;
    let ch = channel.forward(style)?;
    fuse_with_gates(content, style, &sp, &ch)
}
