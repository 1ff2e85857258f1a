//! Pretrained backbones behind [`FeatureExtractor`]: VGG16 feature taps, the
//! HED edge detector, and the LPIPS distance. Weights are read from
//! safetensors archives whose names follow the torchvision / reference
//! PyTorch module layouts, so converted checkpoints load without renaming.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;
use crate::ops::{self, Padding};

/// Tap names understood by [`Vgg16`].
pub const VGG_TAPS: [&str; 7] = ["relu1_2", "relu2_2", "relu3_3", "relu4_3", "relu5_3", "pool5", "gap5"];

/// Perceptual-loss taps used by default for the line loss.
pub const DEFAULT_LINE_TAPS: [&str; 4] = ["relu1_2", "relu2_2", "relu3_3", "relu4_3"];

const VGG_CONVS: [(usize, usize, usize); 13] = [
    (0, 3, 64),
    (2, 64, 64),
    (5, 64, 128),
    (7, 128, 128),
    (10, 128, 256),
    (12, 256, 256),
    (14, 256, 256),
    (17, 256, 512),
    (19, 512, 512),
    (21, 512, 512),
    (24, 512, 512),
    (26, 512, 512),
    (28, 512, 512),
];

/// Indices into `VGG_CONVS` after which a block ends (ReLU tap, then pool).
const BLOCK_ENDS: [usize; 5] = [1, 3, 6, 9, 12];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
const LPIPS_SHIFT: [f64; 3] = [-0.030, -0.088, -0.188];
const LPIPS_SCALE: [f64; 3] = [0.458, 0.448, 0.450];

/// How [-1, 1] inputs are normalised before the first conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VggInput {
    /// Map to [0, 1], then ImageNet mean/std.
    ImageNet,
    /// The shift/scale layer of the LPIPS reference network.
    Lpips,
}

#[derive(Debug, Clone)]
struct ConvParams {
    weight: Tensor,
    bias: Tensor,
}

fn take_conv(map: &mut HashMap<String, Tensor>, prefix: &str, cin: usize, cout: usize, k: usize) -> Result<ConvParams> {
    let mut get = |suffix: &str| {
        let name = format!("{prefix}.{suffix}");
        map.remove(&name).ok_or(Error::MissingParameter(name))
    };
    let weight = get("weight")?.to_dtype(DType::F32)?;
    let bias = get("bias")?.to_dtype(DType::F32)?;
    if weight.dims() != [cout, cin, k, k] || bias.dims() != [cout] {
        return Err(Error::ExtractorShapeMismatch(format!("{prefix}: weight {:?}", weight.dims())));
    }
    Ok(ConvParams { weight, bias })
}

fn conv_relu(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let k = p.weight.dims()[2];
    Ok(ops::conv2d(x, &p.weight, Some(&p.bias), 1, Padding::uniform(k / 2))?.relu()?)
}

fn channel_affine(x: &Tensor, shift: [f64; 3], scale: [f64; 3]) -> Result<Tensor> {
    let dev = x.device();
    let s = Tensor::new(&shift, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
    let c = Tensor::new(&scale, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
    Ok(x.broadcast_sub(&s)?.broadcast_div(&c)?)
}

fn replicate_gray(x: &Tensor) -> Result<Tensor> {
    Ok(match x.dims4()?.1 {
        1 => Tensor::cat(&[x, x, x], 1)?,
        3 => x.clone(),
        c => return Err(Error::ExtractorShapeMismatch(format!("expected 1 or 3 channels, got {c}"))),
    })
}

/// VGG16 convolutional trunk (torchvision `features.N` naming).
#[derive(Debug, Clone)]
pub struct Vgg16 {
    convs: Vec<ConvParams>,
    taps: Vec<String>,
    input: VggInput,
    input_size: Option<(usize, usize)>,
}

impl Vgg16 {
    pub fn load(path: &Path, taps: &[&str], input: VggInput) -> Result<Self> {
        if !path.exists() {
            return Err(Error::ExtractorUnavailable(format!(
                "VGG16 weights not found at {}; use a stub extractor for weight-free runs",
                path.display()
            )));
        }
        let map = candle_core::safetensors::load(path, &Device::Cpu)?;
        Self::from_tensors(map, taps, input)
    }

    pub fn from_tensors(mut map: HashMap<String, Tensor>, taps: &[&str], input: VggInput) -> Result<Self> {
        for t in taps {
            if !VGG_TAPS.contains(t) {
                return Err(Error::Config(format!("unknown VGG tap `{t}`; known: {}", VGG_TAPS.join(", "))));
            }
        }
        let convs = VGG_CONVS
            .iter()
            .map(|&(i, cin, cout)| take_conv(&mut map, &format!("features.{i}"), cin, cout, 3))
            .collect::<Result<_>>()?;
        Ok(Self { convs, taps: taps.iter().map(|s| s.to_string()).collect(), input, input_size: None })
    }

    /// Resize every input to this size first (224×224 for the
    /// fully-connected-compatible pool5 grid).
    pub fn with_input_size(mut self, height: usize, width: usize) -> Self {
        self.input_size = Some((height, width));
        self
    }
}

impl FeatureExtractor for Vgg16 {
    fn name(&self) -> &str {
        "vgg16"
    }

    fn taps(&self) -> Vec<String> {
        self.taps.clone()
    }

    fn input_channels(&self) -> Option<usize> {
        Some(3)
    }

    fn input_size(&self) -> Option<(usize, usize)> {
        self.input_size
    }

    fn extract(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = replicate_gray(&x.to_dtype(DType::F32)?)?;
        if let Some((h, w)) = self.input_size {
            if x.dims()[2..] != [h, w] {
                x = ops::resize_bilinear(&x, h, w)?;
            }
        }
        x = match self.input {
            VggInput::ImageNet => {
                let unit = ((x + 1.0)? * 0.5)?;
                channel_affine(&unit, IMAGENET_MEAN, IMAGENET_STD)?
            }
            VggInput::Lpips => channel_affine(&x, LPIPS_SHIFT, LPIPS_SCALE)?,
        };
        let mut found: HashMap<&str, Tensor> = HashMap::new();
        let mut block = 0;
        for (i, p) in self.convs.iter().enumerate() {
            x = conv_relu(&x, p)?;
            if BLOCK_ENDS[block] == i {
                let tap = ["relu1_2", "relu2_2", "relu3_3", "relu4_3", "relu5_3"][block];
                found.insert(tap, x.clone());
                x = x.max_pool2d(2)?;
                block += 1;
                if block == 5 {
                    found.insert("gap5", x.mean_keepdim((2, 3))?);
                    found.insert("pool5", x.clone());
                    break;
                }
                if self.taps.iter().all(|t| found.contains_key(t.as_str())) {
                    break;
                }
            }
        }
        self.taps
            .iter()
            .map(|t| found.remove(t.as_str()).ok_or_else(|| Error::ExtractorShapeMismatch(format!("tap {t} not reached"))))
            .collect()
    }
}

const HED_MEAN_BGR: [f64; 3] = [104.00698793, 116.66876762, 122.67891434];

/// Holistically-nested edge detector. Produces one edge-probability map in
/// [0, 1] at the input resolution.
#[derive(Debug, Clone)]
pub struct Hed {
    stages: Vec<Vec<ConvParams>>,
    scores: Vec<ConvParams>,
    combine: ConvParams,
}

impl Hed {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::ExtractorUnavailable(format!(
                "HED weights not found at {}; use a stub extractor for weight-free runs",
                path.display()
            )));
        }
        Self::from_tensors(candle_core::safetensors::load(path, &Device::Cpu)?)
    }

    pub fn from_tensors(mut map: HashMap<String, Tensor>) -> Result<Self> {
        let layout: [(&str, &[usize], usize, usize); 5] = [
            ("netVggOne", &[0, 2], 3, 64),
            ("netVggTwo", &[1, 3], 64, 128),
            ("netVggThr", &[1, 3, 5], 128, 256),
            ("netVggFou", &[1, 3, 5], 256, 512),
            ("netVggFiv", &[1, 3, 5], 512, 512),
        ];
        let mut stages = Vec::new();
        for (name, idx, cin, cout) in layout {
            let mut convs = Vec::new();
            for (j, i) in idx.iter().enumerate() {
                let c_in = if j == 0 { cin } else { cout };
                convs.push(take_conv(&mut map, &format!("{name}.{i}"), c_in, cout, 3)?);
            }
            stages.push(convs);
        }
        let scores = ["One", "Two", "Thr", "Fou", "Fiv"]
            .iter()
            .zip([64, 128, 256, 512, 512])
            .map(|(n, c)| take_conv(&mut map, &format!("netScore{n}"), c, 1, 1))
            .collect::<Result<_>>()?;
        let combine = take_conv(&mut map, "netCombine.0", 5, 1, 1)?;
        Ok(Self { stages, scores, combine })
    }
}

impl FeatureExtractor for Hed {
    fn name(&self) -> &str {
        "hed"
    }

    fn taps(&self) -> Vec<String> {
        vec!["edges".into()]
    }

    fn input_channels(&self) -> Option<usize> {
        Some(3)
    }

    fn extract(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let dtype = x.dtype();
        let x = replicate_gray(&x.to_dtype(DType::F32)?)?;
        let (_, _, h, w) = x.dims4()?;
        // [-1, 1] RGB -> 0..255 BGR minus the Caffe channel means
        let bgr = Tensor::cat(&[x.narrow(1, 2, 1)?, x.narrow(1, 1, 1)?, x.narrow(1, 0, 1)?], 1)?;
        let scaled = ((bgr + 1.0)? * 127.5)?;
        let mut y = channel_affine(&scaled, HED_MEAN_BGR, [1.0; 3])?;
        let mut sides = Vec::new();
        for (s, convs) in self.stages.iter().enumerate() {
            if s > 0 {
                y = y.max_pool2d(2)?;
            }
            for p in convs {
                y = conv_relu(&y, p)?;
            }
            let sc = &self.scores[s];
            let side = ops::conv2d(&y, &sc.weight, Some(&sc.bias), 1, Padding::uniform(0))?;
            sides.push(ops::resize_bilinear(&side, h, w)?);
        }
        let cat = Tensor::cat(&sides, 1)?;
        let logit = ops::conv2d(&cat, &self.combine.weight, Some(&self.combine.bias), 1, Padding::uniform(0))?;
        Ok(vec![ops::sigmoid(&logit)?.to_dtype(dtype)?])
    }
}

/// Learned perceptual distance: unit-normalise each tap along channels,
/// square the difference, weight channels, average spatially, sum taps.
pub struct Lpips {
    backbone: Box<dyn FeatureExtractor>,
    /// Per-tap channel weights; `None` means all ones.
    weights: Option<Vec<Vec<f32>>>,
}

impl Lpips {
    pub fn new(backbone: Box<dyn FeatureExtractor>, weights: Option<Vec<Vec<f32>>>) -> Self {
        Self { backbone, weights }
    }

    /// VGG variant: trunk weights plus `lin{k}.model.1.weight` calibration
    /// tensors of shape (1, c, 1, 1).
    pub fn load_vgg(vgg_path: &Path, lin_path: &Path) -> Result<Self> {
        let vgg = Vgg16::load(vgg_path, &["relu1_2", "relu2_2", "relu3_3", "relu4_3", "relu5_3"], VggInput::Lpips)?;
        if !lin_path.exists() {
            return Err(Error::ExtractorUnavailable(format!("LPIPS weights not found at {}", lin_path.display())));
        }
        let map = candle_core::safetensors::load(lin_path, &Device::Cpu)?;
        let mut weights = Vec::new();
        for k in 0..5 {
            let name = format!("lin{k}.model.1.weight");
            let t = map.get(&name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
            weights.push(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
        }
        Ok(Self::new(Box::new(vgg), Some(weights)))
    }

    /// Identity backbone with unit weights; the score reduces to the mean
    /// squared distance between channel-normalised inputs.
    pub fn stub() -> Self {
        Self::new(Box::new(crate::losses::IdentityExtractor), None)
    }

    /// Per-item distances between two `(b, c, h, w)` batches in [-1, 1].
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
        if a.dims() != b.dims() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        let fa = self.backbone.extract(&a.to_dtype(DType::F64)?)?;
        let fb = self.backbone.extract(&b.to_dtype(DType::F64)?)?;
        let n = a.dims()[0];
        let mut total = Tensor::zeros(n, DType::F64, a.device())?;
        for (k, (x, y)) in fa.iter().zip(&fb).enumerate() {
            let (x, y) = (unit_normalise(&x.to_dtype(DType::F64)?)?, unit_normalise(&y.to_dtype(DType::F64)?)?);
            let mut d = (x - y)?.sqr()?;
            if let Some(w) = &self.weights {
                let c = d.dims()[1];
                let wk = w.get(k).filter(|w| w.len() == c).ok_or_else(|| {
                    Error::ExtractorShapeMismatch(format!("LPIPS tap {k} has {c} channels"))
                })?;
                let wt = Tensor::new(wk.as_slice(), a.device())?.to_dtype(DType::F64)?.reshape((1, c, 1, 1))?;
                d = d.broadcast_mul(&wt)?;
            }
            total = (total + d.sum(1)?.mean((1, 2))?)?;
        }
        Ok(total.to_vec1::<f64>()?)
    }
}

fn unit_normalise(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
    Ok(x.broadcast_div(&norm)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_vgg() -> Result<HashMap<String, Tensor>> {
        let mut map = HashMap::new();
        for &(i, cin, cout) in &VGG_CONVS {
            map.insert(format!("features.{i}.weight"), Tensor::ones((cout, cin, 3, 3), DType::F32, &Device::Cpu)?);
            map.insert(format!("features.{i}.bias"), Tensor::zeros(cout, DType::F32, &Device::Cpu)?);
        }
        Ok(map)
    }

    #[test]
    fn vgg_tap_shapes() -> Result<()> {
        let vgg = Vgg16::from_tensors(fake_vgg()?, &["relu1_2", "relu3_3", "pool5", "gap5"], VggInput::ImageNet)?;
        let x = Tensor::zeros((1, 1, 32, 32), DType::F32, &Device::Cpu)?;
        let f = vgg.extract(&x)?;
        assert_eq!(f[0].dims(), [1, 64, 32, 32]);
        assert_eq!(f[1].dims(), [1, 256, 8, 8]);
        assert_eq!(f[2].dims(), [1, 512, 1, 1]);
        assert_eq!(f[3].dims(), [1, 512, 1, 1]);
        Ok(())
    }

    #[test]
    fn missing_layer_is_reported() -> Result<()> {
        let mut map = fake_vgg()?;
        map.remove("features.28.bias");
        assert!(matches!(Vgg16::from_tensors(map, &["relu1_2"], VggInput::ImageNet), Err(Error::MissingParameter(_))));
        assert!(matches!(
            Vgg16::load(Path::new("/nonexistent/vgg.safetensors"), &["relu1_2"], VggInput::ImageNet),
            Err(Error::ExtractorUnavailable(_))
        ));
        Ok(())
    }

    #[test]
    fn hed_output_is_one_channel_probability() -> Result<()> {
        let dev = Device::Cpu;
        let mut map = HashMap::new();
        let mut add = |name: String, cin: usize, cout: usize, k: usize| -> Result<()> {
            map.insert(format!("{name}.weight"), (Tensor::ones((cout, cin, k, k), DType::F32, &dev)? * 1e-3)?);
            map.insert(format!("{name}.bias"), Tensor::zeros(cout, DType::F32, &dev)?);
            Ok(())
        };
        add("netVggOne.0".into(), 3, 64, 3)?;
        add("netVggOne.2".into(), 64, 64, 3)?;
        add("netVggTwo.1".into(), 64, 128, 3)?;
        add("netVggTwo.3".into(), 128, 128, 3)?;
        for (n, cin, cout) in [("Thr", 128, 256), ("Fou", 256, 512), ("Fiv", 512, 512)] {
            add(format!("netVgg{n}.1"), cin, cout, 3)?;
            add(format!("netVgg{n}.3"), cout, cout, 3)?;
            add(format!("netVgg{n}.5"), cout, cout, 3)?;
        }
        for (n, c) in [("One", 64), ("Two", 128), ("Thr", 256), ("Fou", 512), ("Fiv", 512)] {
            add(format!("netScore{n}"), c, 1, 1)?;
        }
        add("netCombine.0".into(), 5, 1, 1)?;
        let hed = Hed::from_tensors(map)?;
        let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &dev)?;
        let e = &hed.extract(&x)?[0];
        assert_eq!(e.dims(), [2, 1, 32, 32]);
        let v = e.flatten_all()?.to_vec1::<f32>()?;
        assert!(v.iter().all(|p| *p > 0.0 && *p < 1.0));
        Ok(())
    }

    #[test]
    fn lpips_stub_orthogonal_units() -> Result<()> {
        let dev = Device::Cpu;
        let a = Tensor::new(&[1.0f64, 0.0], &dev)?.reshape((1, 2, 1, 1))?.repeat((1, 1, 4, 4))?;
        let b = Tensor::new(&[0.0f64, 1.0], &dev)?.reshape((1, 2, 1, 1))?.repeat((1, 1, 4, 4))?;
        let lp = Lpips::stub();
        assert!((lp.distance(&a, &b)?[0] - 2.0).abs() < 1e-9);
        assert_eq!(lp.distance(&a, &a)?[0], 0.0);
        Ok(())
    }
}
