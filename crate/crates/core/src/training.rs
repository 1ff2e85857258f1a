//! Adversarial training loop, checkpoints and single-image inference.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::curation::{self, UnpairedSampler};
use crate::error::{Error, Result};
use crate::extractors::{Hed, Vgg16, VggInput, DEFAULT_LINE_TAPS};
use crate::imaging::{self, ColorImage, SketchImage};
use crate::losses::{
    self, AdversarialMode, FeatureExtractor, GradientEdgeExtractor, IdentityExtractor, LossBreakdown, LossTerms,
    LossWeights,
};
use crate::networks::{ColorGenerator, GeneratorConfig, PatchDiscriminator, SketchGenerator, StyleEncoder};
use crate::optim::{linear_decay_lr, Adam, AdamConfig};
use crate::tensorfile;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: Option<f64>,
    /// Square training resolution; a multiple of 16.
    pub resolution: usize,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub discriminator_channels: usize,
    pub no_attention: bool,
    pub no_style: bool,
    pub no_line: bool,
    pub no_cyc: bool,
    /// Use the literal log(1 − D(O)) generator term.
    pub saturating: bool,
    pub hed_weights: Option<PathBuf>,
    pub vgg_weights: Option<PathBuf>,
    pub line_taps: Vec<String>,
    pub style_encoder: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 4,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            clip_norm: None,
            resolution: 512,
            seed: 0,
            generator: GeneratorConfig::default(),
            discriminator_channels: 64,
            no_attention: false,
            no_style: false,
            no_line: false,
            no_cyc: false,
            saturating: false,
            hed_weights: None,
            vgg_weights: None,
            line_taps: DEFAULT_LINE_TAPS.iter().map(|s| s.to_string()).collect(),
            style_encoder: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.resolution % 16 != 0 || self.resolution < PatchDiscriminator::MIN_SIDE {
            return bad(format!(
                "resolution must be a multiple of 16 and at least {}, got {}",
                PatchDiscriminator::MIN_SIDE,
                self.resolution
            ));
        }
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig { attention: self.generator.attention && !self.no_attention, ..self.generator }
    }

    pub fn adversarial_mode(&self) -> AdversarialMode {
        if self.saturating {
            AdversarialMode::Saturating
        } else {
            AdversarialMode::NonSaturating
        }
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        linear_decay_lr(self.lr, epoch, self.epochs)
    }
}

/// Learning rate of the generator/discriminator run: `2e-4` for the first
/// half of `total` epochs, then linear decay to 0.
pub fn lr_schedule(epoch: usize, total: usize) -> Result<f64> {
    linear_decay_lr(2e-4, epoch, total)
}

/// The three trained networks.
#[derive(Debug, Clone)]
pub struct Models {
    pub gs: SketchGenerator,
    pub gc: ColorGenerator,
    pub d: PatchDiscriminator,
}

impl Models {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let dev = Device::Cpu;
        let g = config.generator_config();
        Ok(Self {
            gs: SketchGenerator::new(g, DType::F32, &dev, config.seed)?,
            gc: ColorGenerator::new(g, DType::F32, &dev, config.seed.wrapping_add(1))?,
            d: PatchDiscriminator::new(config.discriminator_channels, DType::F32, &dev, config.seed.wrapping_add(2))?,
        })
    }

    /// Every parameter and buffer, prefixed `gs.`, `gc.` and `d.`.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        out.extend(tensorfile::with_prefix(self.gs.store().snapshot()?, "gs"));
        out.extend(tensorfile::with_prefix(self.gc.store().snapshot()?, "gc"));
        out.extend(tensorfile::with_prefix(self.d.store().snapshot()?, "d"));
        Ok(out)
    }

    fn restore(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.gs.store().restore(&tensorfile::strip_prefix(tensors, "gs"))?;
        self.gc.store().restore(&tensorfile::strip_prefix(tensors, "gc"))?;
        self.d.store().restore(&tensorfile::strip_prefix(tensors, "d"))
    }
}

/// Fixed networks the generator losses read through.
pub struct LossNetworks {
    pub style: Option<StyleEncoder>,
    pub hed: Box<dyn FeatureExtractor>,
    pub vgg: Box<dyn FeatureExtractor>,
}

impl LossNetworks {
    /// Loads extractor weights named in `config`. Missing HED/VGG paths fall
    /// back to parameter-free stand-ins (gradient edges, identity taps) with
    /// a warning; a missing style encoder is an error unless the style term
    /// is disabled.
    pub fn from_config(config: &TrainConfig) -> Result<Self> {
        let hed: Box<dyn FeatureExtractor> = match &config.hed_weights {
            Some(p) => Box::new(Hed::load(p)?),
            None => {
                log::warn!("no HED weights configured; line loss uses gradient-magnitude edges");
                Box::new(GradientEdgeExtractor)
            }
        };
        let vgg: Box<dyn FeatureExtractor> = match &config.vgg_weights {
            Some(p) => {
                let taps: Vec<&str> = config.line_taps.iter().map(String::as_str).collect();
                Box::new(Vgg16::load(p, &taps, VggInput::ImageNet)?)
            }
            None => {
                log::warn!("no VGG weights configured; line loss compares edge maps directly");
                Box::new(IdentityExtractor)
            }
        };
        let style = match (&config.style_encoder, config.no_style) {
            (_, true) => None,
            (Some(p), false) => Some(crate::style_pretrain::load_style_encoder(p)?),
            (None, false) => {
                return Err(Error::Config("a pretrained style encoder is required unless no_style is set".into()))
            }
        };
        Ok(Self { style, hed, vgg })
    }
}

/// Color and sketch corpora held in memory at the training resolution.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub colors: Vec<ColorImage>,
    pub sketches: Vec<SketchImage>,
}

impl TrainData {
    pub fn load(color_dir: &Path, sketch_dir: &Path, resolution: usize) -> Result<Self> {
        let colors = curation::list_images(color_dir)?
            .iter()
            .map(|p| imaging::resize(&imaging::load_color(p)?, resolution, resolution))
            .collect::<Result<_>>()?;
        let sketches = curation::list_images(sketch_dir)?
            .iter()
            .map(|p| imaging::resize(&imaging::load_sketch(p)?, resolution, resolution))
            .collect::<Result<_>>()?;
        Ok(Self { colors, sketches })
    }

    /// `(b, 3, h, w)` colors and `(b, 1, h, w)` references for index pairs.
    pub fn batch(&self, pairs: &[(usize, usize)]) -> Result<(Tensor, Tensor)> {
        let c: Vec<ColorImage> = pairs.iter().map(|&(i, _)| self.colors[i].clone()).collect();
        let r: Vec<SketchImage> = pairs.iter().map(|&(_, j)| self.sketches[j].clone()).collect();
        Ok((imaging::stack(&c, DType::F32)?, imaging::stack(&r, DType::F32)?))
    }
}

/// Training state: networks, both optimizers, and position in the run.
pub struct Trainer {
    config: TrainConfig,
    models: Models,
    opt_g: Adam,
    opt_d: Adam,
    losses: LossNetworks,
    /// Completed epochs.
    epoch: usize,
    /// Completed steps.
    step: usize,
}

fn check_finite(v: f64, step: usize, batch: &[usize]) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { step, batch: batch.to_vec() })
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, losses: LossNetworks) -> Result<Self> {
        config.validate()?;
        if !config.no_style && losses.style.is_none() {
            return Err(Error::Config("style term enabled but no style encoder supplied".into()));
        }
        if let Some(enc) = &losses.style {
            if !enc.is_frozen() {
                return Err(Error::EncoderNotFrozen);
            }
        }
        let models = Models::new(&config)?;
        let adam = AdamConfig {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            clip_norm: config.clip_norm,
            ..Default::default()
        };
        let opt_g = Adam::over_stores(&[("gs", models.gs.store()), ("gc", models.gc.store())], adam)?;
        let opt_d = Adam::over_stores(&[("d", models.d.store())], adam)?;
        Ok(Self { config, models, opt_g, opt_d, losses, epoch: 0, step: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    pub fn loss_networks(&self) -> &LossNetworks {
        &self.losses
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt_g.set_lr(lr);
        self.opt_d.set_lr(lr);
    }

    /// O = G_s(gray(C), R) and R_o = G_c(O).
    pub fn forward(&self, colors: &Tensor, refs: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.models.gs.forward(&imaging::gray_batch(colors)?, refs, true)?;
        let recon = self.models.gc.forward(&out, true)?;
        Ok((out, recon))
    }

    /// Updates D only, on real references and the detached generator output.
    pub fn discriminator_step(&mut self, refs: &Tensor, fake: &Tensor, batch_ids: &[usize]) -> Result<f64> {
        let d = &self.models.d;
        let loss = losses::discriminator_loss(&d.forward(refs)?, &d.forward(&fake.detach())?)?;
        let v = check_finite(loss.to_scalar::<f32>()? as f64, self.step, batch_ids)?;
        self.opt_d.step(&loss.backward()?)?;
        Ok(v)
    }

    /// Updates G_s and G_c only, on the weighted generator objective.
    pub fn generator_step(
        &mut self,
        colors: &Tensor,
        refs: &Tensor,
        out: &Tensor,
        recon: &Tensor,
        weights: &LossWeights,
        batch_ids: &[usize],
    ) -> Result<(LossTerms, f64)> {
        let c = &self.config;
        let zero = || Tensor::zeros((), DType::F32, &Device::Cpu);
        let style = match &self.losses.style {
            Some(enc) if !c.no_style => losses::style_loss(out, refs, enc)?,
            _ => zero()?,
        };
        let line = if c.no_line {
            zero()?
        } else {
            losses::line_loss(colors, recon, self.losses.hed.as_ref(), self.losses.vgg.as_ref())?
        };
        let cyc = if c.no_cyc { zero()? } else { losses::cycle_loss(colors, recon)? };
        let adv = losses::generator_adversarial_loss(&self.models.d.forward(out)?, c.adversarial_mode())?;
        let total = ((((&style * weights.style)? + (&line * weights.line)?)? + (&cyc * weights.cyc)?)? + (&adv * weights.adv)?)?;
        let val = |t: &Tensor| -> Result<f64> { Ok(t.to_scalar::<f32>()? as f64) };
        let terms = LossTerms { style: val(&style)?, line: val(&line)?, cyc: val(&cyc)?, adv: val(&adv)? };
        let total_v = losses::total_generator_loss(&terms, weights)
            .map_err(|_| Error::NonFiniteLoss { step: self.step, batch: batch_ids.to_vec() })?;
        check_finite(val(&total)?, self.step, batch_ids)?;
        self.opt_g.step(&total.backward()?)?;
        Ok((terms, total_v))
    }

    /// Generate, reconstruct, one D update, one G update.
    pub fn train_step(
        &mut self,
        colors: &Tensor,
        refs: &Tensor,
        weights: &LossWeights,
        batch_ids: &[usize],
    ) -> Result<LossBreakdown> {
        let (out, recon) = self.forward(colors, refs)?;
        let adv_d = self.discriminator_step(refs, &out, batch_ids)?;
        let (terms, total_g) = self.generator_step(colors, refs, &out, &recon, weights, batch_ids)?;
        self.step += 1;
        Ok(LossBreakdown { style: terms.style, line: terms.line, cyc: terms.cyc, adv_g: terms.adv, adv_d, total_g })
    }

    /// Runs the next epoch: per-epoch loss weights and learning rate, then
    /// one step per sampler batch. `on_step` sees every breakdown.
    pub fn run_epoch(
        &mut self,
        data: &TrainData,
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<()> {
        let epoch = self.epoch;
        let weights = losses::loss_weights(epoch, self.config.epochs)?;
        let lr = self.config.lr_at(epoch)?;
        self.set_lr(lr);
        let sampler = UnpairedSampler::new(data.colors.len(), data.sketches.len(), self.config.batch, self.config.seed)?;
        for pairs in sampler.epoch(epoch) {
            let (colors, refs) = data.batch(&pairs)?;
            let ids: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let losses = self.train_step(&colors, &refs, &weights, &ids)?;
            on_step(&StepRecord { epoch, step: self.step, lr, weights, losses })?;
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors = self.models.snapshot()?;
        tensors.extend(tensorfile::with_prefix(self.opt_g.state(), "opt_g"));
        tensors.extend(tensorfile::with_prefix(self.opt_d.state(), "opt_d"));
        let rng = serde_json::json!({ "seed": self.config.seed, "next_epoch_stream": self.epoch as u64 + 1 });
        let meta = HashMap::from([
            ("format_version".to_string(), CHECKPOINT_FORMAT.to_string()),
            ("epoch".to_string(), self.epoch.to_string()),
            ("step".to_string(), self.step.to_string()),
            ("opt_g_steps".to_string(), self.opt_g.steps_taken().to_string()),
            ("opt_d_steps".to_string(), self.opt_d.steps_taken().to_string()),
            ("rng".to_string(), rng.to_string()),
            ("config".to_string(), serde_json::to_string(&self.config)?),
        ]);
        tensorfile::save(path, &tensors, meta)
    }

    /// Rebuilds a trainer positioned after the checkpoint's last epoch.
    pub fn resume(path: &Path, losses: LossNetworks) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let mut t = Self::new(ckpt.config.clone(), losses)?;
        t.models.restore(&ckpt.tensors)?;
        let meta = &ckpt.metadata;
        t.opt_g.load_state(&tensorfile::strip_prefix(&ckpt.tensors, "opt_g"), tensorfile::meta_parse(meta, "opt_g_steps")?)?;
        t.opt_d.load_state(&tensorfile::strip_prefix(&ckpt.tensors, "opt_d"), tensorfile::meta_parse(meta, "opt_d_steps")?)?;
        t.epoch = ckpt.epoch;
        t.step = tensorfile::meta_parse(meta, "step")?;
        Ok(t)
    }
}

/// One row of the step log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub losses: LossBreakdown,
}

pub const STEP_LOG_HEADER: [&str; 11] =
    ["epoch", "step", "lr", "lambda_style", "lambda_line", "style", "line", "cyc", "adv_g", "adv_d", "total_g"];

impl StepRecord {
    pub fn csv_row(&self) -> Vec<String> {
        let l = &self.losses;
        let mut row = vec![self.epoch.to_string(), self.step.to_string()];
        row.extend(
            [self.lr, self.weights.style, self.weights.line, l.style, l.line, l.cyc, l.adv_g, l.adv_d, l.total_g]
                .iter()
                .map(|v| format!("{v:.8e}")),
        );
        row
    }
}

/// Full run: resumes from `trainer`'s position, writes `epoch_{k}.ckpt`
/// after each epoch `k` (1-based) and appends every step to `train_log.csv`
/// in `out_dir`.
pub fn train(trainer: &mut Trainer, data: &TrainData, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.csv");
    let fresh = !log_path.exists() || trainer.epoch() == 0;
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)?;
    let mut log = csv::Writer::from_writer(file);
    if fresh {
        log.write_record(STEP_LOG_HEADER)?;
    }
    let mut last = None;
    while trainer.epoch() < trainer.config().epochs {
        trainer.run_epoch(data, |r| {
            log.write_record(r.csv_row())?;
            Ok(())
        })?;
        log.flush()?;
        let path = out_dir.join(format!("epoch_{}.ckpt", trainer.epoch()));
        trainer.save_checkpoint(&path)?;
        log::info!("epoch {}/{} -> {}", trainer.epoch(), trainer.config().epochs, path.display());
        last = Some(path);
    }
    last.ok_or_else(|| Error::Config("nothing to train: checkpoint already at the final epoch".into()))
}

/// A loaded checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: HashMap<String, String>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, metadata) = tensorfile::load(path, &Device::Cpu)?;
        let version: u32 = tensorfile::meta_parse(&metadata, "format_version")?;
        if version != CHECKPOINT_FORMAT {
            return Err(Error::CheckpointVersionMismatch { found: version, expected: CHECKPOINT_FORMAT });
        }
        let config: TrainConfig = serde_json::from_str(tensorfile::meta_get(&metadata, "config")?)?;
        let epoch = tensorfile::meta_parse(&metadata, "epoch")?;
        Ok(Self { config, epoch, tensors, metadata })
    }

    pub fn models(&self) -> Result<Models> {
        let m = Models::new(&self.config)?;
        m.restore(&self.tensors)?;
        Ok(m)
    }
}

/// Loads a checkpoint and draws `content` in the style of `reference` at
/// the checkpoint's resolution. Single-channel content files are used
/// directly, which turns the call into sketch-to-sketch style transfer.
pub fn extract(checkpoint: &Path, content: &Path, reference: &Path, out: &Path) -> Result<SketchImage> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let models = ckpt.models()?;
    let r = ckpt.config.resolution;
    let content = imaging::resize(&imaging::load_content(content)?, r, r)?;
    let reference = imaging::resize(&imaging::load_sketch(reference)?, r, r)?;
    let sketch = models.gs.generate(&content, &reference)?;
    imaging::save_image(&sketch, out)?;
    Ok(sketch)
}
