//! Reference-based sketch extraction.
//!
//! Given a color image and a reference sketch, [`networks::SketchGenerator`]
//! draws the color image's content in the reference's line style. Training
//! uses unpaired color and sketch corpora: a frozen contrastive style encoder
//! supplies the style signal, an edge/perceptual line loss and a color
//! reconstruction cycle keep the shape, and a patch discriminator keeps the
//! output in the sketch domain.

pub mod attention;
pub mod curation;
pub mod error;
pub mod evaluation;
pub mod extractors;
pub mod imaging;
pub mod layers;
pub mod losses;
pub mod networks;
pub mod ops;
pub mod optim;
pub mod params;
pub mod style_pretrain;
pub mod synth;
pub mod training;
pub mod tensorfile;

pub use error::{Error, Result};
