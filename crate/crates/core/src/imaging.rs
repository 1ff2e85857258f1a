//! Raster I/O and the tensor conventions every other module assumes.
//!
//! Pixels live in [-1, 1]: an 8-bit value `p` maps to `2p/255 - 1`. Sketches
//! are dark-on-white, so +1 is the blank page and -1 is the darkest stroke. Images are
//! stored unbatched as `(c, h, w)` f32 tensors.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::ops;

pub const MIN_SIDE: usize = 16;

pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// A validated image tensor with a fixed channel count.
pub trait Raster: Sized + Clone {
    const CHANNELS: usize;
    const MIN_SIDE: usize;

    fn tensor(&self) -> &Tensor;

    /// Wraps a `(c, h, w)` tensor after checking channel count, size and range.
    fn from_tensor(t: Tensor) -> Result<Self>;

    fn height(&self) -> usize {
        self.tensor().dims()[1]
    }

    fn width(&self) -> usize {
        self.tensor().dims()[2]
    }

    /// `(1, c, h, w)` in the requested dtype.
    fn batched(&self, dtype: DType) -> Result<Tensor> {
        Ok(self.tensor().to_dtype(dtype)?.unsqueeze(0)?)
    }

    fn values(&self) -> Result<Vec<f32>> {
        Ok(self.tensor().flatten_all()?.to_vec1::<f32>()?)
    }
}

fn validate(t: &Tensor, channels: usize, min_side: usize) -> Result<Tensor> {
    let dims = t.dims();
    if dims.len() != 3 || dims[0] != channels {
        return Err(Error::InvalidImage(format!("expected ({channels}, h, w), got {dims:?}")));
    }
    if dims[1] < min_side || dims[2] < min_side {
        return Err(Error::InvalidImage(format!("{}x{} is below the minimum side {min_side}", dims[1], dims[2])));
    }
    let t = t.to_dtype(DType::F32)?;
    let v = t.flatten_all()?.to_vec1::<f32>()?;
    if let Some(bad) = v.iter().find(|x| !x.is_finite() || **x < -1.0 || **x > 1.0) {
        return Err(Error::InvalidImage(format!("value {bad} outside [-1, 1]")));
    }
    Ok(t)
}

macro_rules! raster {
    ($(#[$m:meta])* $name:ident, $channels:expr, $min:expr) => {
        $(#[$m])*
        #[derive(Debug, Clone)]
        pub struct $name(Tensor);

        impl Raster for $name {
            const CHANNELS: usize = $channels;
            const MIN_SIDE: usize = $min;

            fn tensor(&self) -> &Tensor {
                &self.0
            }

            fn from_tensor(t: Tensor) -> Result<Self> {
                Ok(Self(validate(&t, $channels, $min)?))
            }
        }

        impl $name {
            /// Builds from row-major `(c, h, w)` values.
            pub fn from_values(values: Vec<f32>, height: usize, width: usize) -> Result<Self> {
                let t = Tensor::from_vec(values, ($channels, height, width), &Device::Cpu)?;
                Self::from_tensor(t)
            }

            /// Builds from a network output, clamping into [-1, 1].
            pub fn from_output(t: &Tensor) -> Result<Self> {
                let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
                Self::from_tensor(t.to_dtype(DType::F32)?.clamp(-1f32, 1f32)?)
            }

            pub fn constant(value: f32, height: usize, width: usize) -> Result<Self> {
                Self::from_values(vec![value; $channels * height * width], height, width)
            }
        }
    };
}

raster!(
    /// Three-channel color input.
    ColorImage, 3, MIN_SIDE
);
raster!(
    /// Single-channel line drawing (reference, output, or ground truth).
    SketchImage, 1, 1
);
raster!(
    /// Luminance of a color image; what the content encoder sees.
    GrayContent, 1, 1
);

impl GrayContent {
    /// Replicates the single channel into a color image.
    pub fn to_color(&self) -> Result<ColorImage> {
        ColorImage::from_tensor(Tensor::cat(&[&self.0, &self.0, &self.0], 0)?)
    }

    pub fn from_sketch(s: &SketchImage) -> Self {
        Self(s.tensor().clone())
    }
}

impl SketchImage {
    pub fn to_content(&self) -> GrayContent {
        GrayContent(self.0.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageMode {
    Color,
    Sketch,
}

#[derive(Debug, Clone)]
pub enum LoadedImage {
    Color(ColorImage),
    Sketch(SketchImage),
}

pub fn byte_to_unit(p: u8) -> f32 {
    2.0 * p as f32 / 255.0 - 1.0
}

/// Inverse of [`byte_to_unit`], rounding half up.
pub fn unit_to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn decode(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::ZeroSizeImage(path.to_path_buf()));
    }
    Ok(img)
}

fn color_from_dynamic(img: &DynamicImage) -> Result<ColorImage> {
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut v = vec![0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            v[(c * h + y as usize) * w + x as usize] = byte_to_unit(px[c]);
        }
    }
    ColorImage::from_values(v, h, w)
}

fn luma_values(img: &DynamicImage) -> (Vec<f32>, usize, usize) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let v = match img {
        DynamicImage::ImageLuma8(g) => g.pixels().map(|p| byte_to_unit(p[0])).collect(),
        _ => {
            let rgb = img.to_rgb8();
            rgb.pixels()
                .map(|p| (0..3).map(|c| LUMA[c] * byte_to_unit(p[c])).sum::<f32>().clamp(-1.0, 1.0))
                .collect()
        }
    };
    (v, h, w)
}

pub fn load_color(path: impl AsRef<Path>) -> Result<ColorImage> {
    color_from_dynamic(&decode(path.as_ref())?)
}

pub fn load_sketch(path: impl AsRef<Path>) -> Result<SketchImage> {
    let (v, h, w) = luma_values(&decode(path.as_ref())?);
    SketchImage::from_values(v, h, w)
}

/// Content input for the generator: grayscale files are used as-is, color
/// files go through [`to_gray`].
pub fn load_content(path: impl AsRef<Path>) -> Result<GrayContent> {
    let img = decode(path.as_ref())?;
    if img.color().channel_count() <= 2 {
        let (v, h, w) = luma_values(&img);
        GrayContent::from_values(v, h, w)
    } else {
        to_gray(&color_from_dynamic(&img)?)
    }
}

pub fn load_image(path: impl AsRef<Path>, mode: ImageMode) -> Result<LoadedImage> {
    Ok(match mode {
        ImageMode::Color => LoadedImage::Color(load_color(path)?),
        ImageMode::Sketch => LoadedImage::Sketch(load_sketch(path)?),
    })
}

/// Decodes an in-memory PNG/JPEG.
pub fn decode_color(bytes: &[u8]) -> Result<ColorImage> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::Decode { path: "<memory>".into(), reason: e.to_string() })?;
    color_from_dynamic(&img)
}

pub fn decode_sketch(bytes: &[u8]) -> Result<SketchImage> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::Decode { path: "<memory>".into(), reason: e.to_string() })?;
    let (v, h, w) = luma_values(&img);
    SketchImage::from_values(v, h, w)
}

/// 0.299R + 0.587G + 0.114B evaluated directly in [-1, 1] space.
pub fn to_gray(c: &ColorImage) -> Result<GrayContent> {
    let w = Tensor::new(&LUMA, c.tensor().device())?.reshape((3, 1, 1))?;
    let g = c.tensor().broadcast_mul(&w)?.sum_keepdim(0)?.clamp(-1f32, 1f32)?;
    GrayContent::from_tensor(g)
}

/// Batched luminance of `(b, 3, h, w)` tensors, differentiable.
pub fn gray_batch(colors: &Tensor) -> Result<Tensor> {
    let w = Tensor::new(&LUMA, colors.device())?.to_dtype(colors.dtype())?.reshape((1, 3, 1, 1))?;
    Ok(colors.broadcast_mul(&w)?.sum_keepdim(1)?)
}

/// Bilinear resampling, clamped back into [-1, 1].
pub fn resize<R: Raster>(img: &R, height: usize, width: usize) -> Result<R> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::InvalidTarget { height, width });
    }
    if (img.height(), img.width()) == (height, width) {
        return Ok(img.clone());
    }
    let t = ops::resize_bilinear(&img.tensor().unsqueeze(0)?, height, width)?.squeeze(0)?;
    R::from_tensor(t.clamp(-1f32, 1f32)?)
}

/// Writes an 8-bit PNG: grayscale for one channel, RGB for three.
pub fn save_image<R: Raster>(img: &R, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (img.height(), img.width());
    let v = img.values()?;
    let werr = |e: image::ImageError| Error::Write { path: path.to_path_buf(), reason: e.to_string() };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Write { path: path.to_path_buf(), reason: e.to_string() })?;
    }
    match R::CHANNELS {
        1 => {
            let bytes: Vec<u8> = v.iter().map(|x| unit_to_byte(*x)).collect();
            GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer size").save(path).map_err(werr)
        }
        3 => rgb_image(&v, h, w).save(path).map_err(werr),
        c => Err(Error::InvalidImage(format!("cannot save {c}-channel image"))),
    }
}

pub(crate) fn rgb_image(planar: &[f32], h: usize, w: usize) -> RgbImage {
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| unit_to_byte(planar[(c * h + y) * w + x]));
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out
}

/// Stacks unbatched rasters into `(b, c, h, w)`.
pub fn stack<R: Raster>(images: &[R], dtype: DType) -> Result<Tensor> {
    let ts: Vec<Tensor> = images.iter().map(|i| i.tensor().to_dtype(dtype)).collect::<candle_core::Result<_>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}
