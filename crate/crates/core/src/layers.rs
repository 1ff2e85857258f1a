//! Parameterised building blocks.

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::ops::{self, Padding};
use crate::params::{Init, INIT_STD};

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    pad: Padding,
}

impl Conv2d {
    pub fn new(
        init: &mut Init<'_>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: Padding,
        bias: bool,
    ) -> Result<Self> {
        let weight = init.gaussian("weight", &[cout, cin, kernel, kernel], INIT_STD)?;
        let bias = if bias { Some(init.constant("bias", &[cout], 0.0)?) } else { None };
        Ok(Self { weight, bias, stride, pad })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, self.weight.as_tensor(), self.bias.as_ref().map(|b| b.as_tensor()), self.stride, self.pad)
    }

    /// Same output with the weights cut from the autograd graph, so an
    /// input that needs no gradient keeps no intermediate buffers alive.
    pub fn forward_detached(&self, x: &Tensor) -> Result<Tensor> {
        let bias = self.bias.as_ref().map(|b| b.as_tensor().detach());
        ops::conv2d(x, &self.weight.as_tensor().detach(), bias.as_ref(), self.stride, self.pad)
    }

    /// (cout, cin, kh, kw)
    pub fn weight_shape(&self) -> (usize, usize, usize, usize) {
        self.weight.dims4().expect("conv weight is 4-d")
    }

    pub fn kernel(&self) -> usize {
        self.weight_shape().2
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            weight: init.gaussian("weight", &[dout, din], INIT_STD)?,
            bias: init.constant("bias", &[dout], 0.0)?,
        })
    }

    /// (b, din) -> (b, dout)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }
}

/// Batch normalisation over (N, H, W) with running statistics for inference.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(init: &mut Init<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant("weight", &[channels], 1.0)?,
            beta: init.constant("bias", &[channels], 0.0)?,
            running_mean: init.buffer("running_mean", &[channels], 0.0)?,
            running_var: init.buffer("running_var", &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { (var.detach() * (n / (n - 1.0)))? } else { var.detach() };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
        } else {
            (
                self.running_mean.as_tensor().detach().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().detach().reshape((1, c, 1, 1))?,
            )
        };
        let norm = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let affine = |v: &Var| if train { v.as_tensor().clone() } else { v.as_tensor().detach() };
        let g = affine(&self.gamma).reshape((1, c, 1, 1))?;
        let bta = affine(&self.beta).reshape((1, c, 1, 1))?;
        Ok(norm.broadcast_mul(&g)?.broadcast_add(&bta)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Self::None => Ok(x.clone()),
            Self::Relu => Ok(x.relu()?),
            Self::LeakyRelu(s) => ops::leaky_relu(x, *s),
            Self::Tanh => Ok(x.tanh()?),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Norm {
    None,
    Batch(BatchNorm2d),
    Instance,
}

/// Convolution, optional normalisation, activation.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: Norm,
    pub act: Activation,
}

/// Normalisation choice when building a [`ConvBlock`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    None,
    Batch,
    Instance,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init<'_>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: Padding,
        norm: NormKind,
        act: Activation,
    ) -> Result<Self> {
        let conv = Conv2d::new(&mut init.pp("conv"), cin, cout, kernel, stride, pad, true)?;
        let norm = match norm {
            NormKind::None => Norm::None,
            NormKind::Batch => Norm::Batch(BatchNorm2d::new(&mut init.pp("norm"), cout)?),
            NormKind::Instance => Norm::Instance,
        };
        Ok(Self { conv, norm, act })
    }

    /// Stride-1 block whose padding preserves H×W.
    pub fn same(init: &mut Init<'_>, cin: usize, cout: usize, kernel: usize, norm: NormKind, act: Activation) -> Result<Self> {
        Self::new(init, cin, cout, kernel, 1, Padding::same(kernel), norm, act)
    }

    /// Inference (`train == false`) uses batch statistics from the running
    /// buffers and builds no graph through the weights.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = if train { self.conv.forward(x)? } else { self.conv.forward_detached(x)? };
        let y = match &self.norm {
            Norm::None => y,
            Norm::Batch(bn) => bn.forward(&y, train)?,
            Norm::Instance => ops::instance_norm(&y, 1e-5)?,
        };
        self.act.apply(&y)
    }

    pub fn channels(&self) -> (usize, usize) {
        let (cout, cin, _, _) = self.conv.weight_shape();
        (cin, cout)
    }
}

/// A chain of blocks applied in order.
#[derive(Debug, Clone)]
pub struct Stack {
    pub blocks: Vec<ConvBlock>,
}

impl Stack {
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward(&y, train)?;
        }
        Ok(y)
    }

    pub fn channels(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().map(ConvBlock::channels).collect()
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].channels().0
    }
}

pub(crate) fn expect_channels(x: &Tensor, expected: usize, what: &str) -> Result<()> {
    let c = x.dims4()?.1;
    if c != expected {
        return Err(Error::ShapeMismatch(format!("{what} expects {expected} channels, got {c}")));
    }
    Ok(())
}
