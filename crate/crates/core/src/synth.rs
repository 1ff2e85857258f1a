//! Procedural line drawings and color images for weight-free corpora.
//!
//! A *shape* is a seeded set of strokes (a polygon, an ellipse and a free
//! polyline); a *style* decides how those strokes are inked. The same shape
//! rendered in different styles gives the (shape, style) factorisation the
//! triplet sampler needs.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imaging::{save_image, ColorImage, Raster, SketchImage};

/// Number of built-in drawing styles.
pub const NUM_STYLES: usize = 4;

/// Ink parameters of one drawing style.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineStyle {
    /// Stroke half-width as a fraction of the image side.
    pub half_width: f32,
    /// Stroke value in [-1, 1] (the blank page is +1).
    pub ink: f32,
    /// Draw every stroke twice with a small offset.
    pub doubled: bool,
}

/// Styles 0..4: fine dark, bold dark, light, doubled mid-gray.
pub fn builtin_style(style: usize) -> LineStyle {
    match style % NUM_STYLES {
        0 => LineStyle { half_width: 0.006, ink: -1.0, doubled: false },
        1 => LineStyle { half_width: 0.022, ink: -1.0, doubled: false },
        2 => LineStyle { half_width: 0.010, ink: -0.2, doubled: false },
        _ => LineStyle { half_width: 0.006, ink: -0.5, doubled: true },
    }
}

type Pt = (f32, f32);

/// Geometry of one shape in unit coordinates.
#[derive(Debug, Clone)]
pub struct Shape {
    polygon: Vec<Pt>,
    ellipse: (Pt, f32, f32),
    polyline: Vec<Pt>,
}

impl Shape {
    pub fn new(shape_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1_ab1e ^ shape_id.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let sides = rng.random_range(3..=6);
        let c: Pt = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
        let r = rng.random_range(0.15..0.28);
        let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let polygon = (0..sides)
            .map(|i| {
                let a = phase + std::f32::consts::TAU * i as f32 / sides as f32;
                let rr = r * rng.random_range(0.8..1.2);
                (c.0 + rr * a.cos(), c.1 + rr * a.sin())
            })
            .collect();
        let ellipse = (
            (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
            rng.random_range(0.08..0.2),
            rng.random_range(0.08..0.2),
        );
        let mut p: Pt = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
        let mut polyline = vec![p];
        for _ in 0..4 {
            p = (
                (p.0 + rng.random_range(-0.25..0.25)).clamp(0.05, 0.95),
                (p.1 + rng.random_range(-0.25..0.25)).clamp(0.05, 0.95),
            );
            polyline.push(p);
        }
        Self { polygon, ellipse, polyline }
    }

    fn segments(&self) -> Vec<(Pt, Pt)> {
        let mut segs = Vec::new();
        let n = self.polygon.len();
        for i in 0..n {
            segs.push((self.polygon[i], self.polygon[(i + 1) % n]));
        }
        let ((cx, cy), rx, ry) = self.ellipse;
        let pts: Vec<Pt> = (0..32)
            .map(|i| {
                let a = std::f32::consts::TAU * i as f32 / 32.0;
                (cx + rx * a.cos(), cy + ry * a.sin())
            })
            .collect();
        for i in 0..pts.len() {
            segs.push((pts[i], pts[(i + 1) % pts.len()]));
        }
        for w in self.polyline.windows(2) {
            segs.push((w[0], w[1]));
        }
        segs
    }

    fn in_polygon(&self, p: Pt) -> bool {
        let mut inside = false;
        let n = self.polygon.len();
        for i in 0..n {
            let (a, b) = (self.polygon[i], self.polygon[(i + n - 1) % n]);
            if (a.1 > p.1) != (b.1 > p.1) && p.0 < (b.0 - a.0) * (p.1 - a.1) / (b.1 - a.1) + a.0 {
                inside = !inside;
            }
        }
        inside
    }

    fn in_ellipse(&self, p: Pt) -> bool {
        let ((cx, cy), rx, ry) = self.ellipse;
        ((p.0 - cx) / rx).powi(2) + ((p.1 - cy) / ry).powi(2) <= 1.0
    }
}

fn seg_dist(p: Pt, a: Pt, b: Pt) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Inks `shape` in `style` on a white `size`×`size` canvas.
pub fn render_sketch(shape: &Shape, style: &LineStyle, size: usize) -> Result<SketchImage> {
    let mut segs = shape.segments();
    if style.doubled {
        let off = 2.5 / size as f32;
        let shifted: Vec<_> = segs.iter().map(|&(a, b)| ((a.0 + off, a.1 - off), (b.0 + off, b.1 + off * 0.5))).collect();
        segs.extend(shifted);
    }
    // half-width never drops below half a pixel so thin styles stay visible
    let hw = style.half_width.max(0.5 / size as f32) * size as f32;
    let mut v = vec![1.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let p = ((x as f32 + 0.5) / size as f32, (y as f32 + 0.5) / size as f32);
            let d = segs.iter().map(|&(a, b)| seg_dist(p, a, b)).fold(f32::INFINITY, f32::min) * size as f32;
            let cover = (hw + 0.5 - d).clamp(0.0, 1.0);
            v[y * size + x] = 1.0 + cover * (style.ink - 1.0);
        }
    }
    SketchImage::from_values(v, size, size)
}

/// Flat-shaded color rendering of `shape`: tinted background, filled
/// polygon and ellipse, dark outline.
pub fn render_color(shape: &Shape, shape_id: u64, size: usize) -> Result<ColorImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0_10e5 ^ shape_id);
    let mut pick = |lo: f32, hi: f32| [0; 3].map(|_| rng.random_range(lo..hi));
    let bg = pick(0.5, 0.95);
    let poly = pick(-0.9, 0.6);
    let ell = pick(-0.9, 0.6);
    let outline = builtin_style(0);
    let lines = render_sketch(shape, &outline, size)?.values()?;
    let mut v = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let p = ((x as f32 + 0.5) / size as f32, (y as f32 + 0.5) / size as f32);
            let fill = if shape.in_ellipse(p) {
                ell
            } else if shape.in_polygon(p) {
                poly
            } else {
                bg
            };
            let line = lines[y * size + x];
            let t = (1.0 - line) / 2.0;
            for c in 0..3 {
                v[(c * size + y) * size + x] = fill[c] * (1.0 - t) + -1.0 * t;
            }
        }
    }
    ColorImage::from_values(v, size, size)
}

/// A uniformly colored square image.
pub fn render_solid(rgb: [f32; 3], size: usize) -> Result<ColorImage> {
    let mut v = Vec::with_capacity(3 * size * size);
    for c in rgb {
        v.extend(std::iter::repeat_n(c, size * size));
    }
    ColorImage::from_values(v, size, size)
}

/// Writes `shapes × NUM_STYLES` sketches under `dir/style{s}/{shape}.png` and
/// a `manifest.csv` with columns `path,shape_id,style_id` (paths relative to
/// `dir`). Returns the manifest path.
pub fn write_style_corpus(dir: &Path, shapes: std::ops::Range<u64>, size: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(["path", "shape_id", "style_id"])?;
    for id in shapes {
        let shape = Shape::new(id);
        for s in 0..NUM_STYLES {
            let rel = format!("style{}/{id:03}.png", s + 1);
            save_image(&render_sketch(&shape, &builtin_style(s), size)?, dir.join(&rel))?;
            w.write_record([rel, id.to_string(), (s + 1).to_string()])?;
        }
    }
    w.flush()?;
    Ok(manifest)
}

/// Writes an evaluation set in the 25-shape, 4-style layout:
/// `root/color/NN.png` and `root/styleS/NN.png`.
pub fn write_eval_set(root: &Path, size: usize) -> Result<()> {
    for i in 0..25u64 {
        let shape = Shape::new(1000 + i);
        save_image(&render_color(&shape, 1000 + i, size)?, root.join(format!("color/{i:02}.png")))?;
        for s in 0..NUM_STYLES {
            let sk = render_sketch(&shape, &builtin_style(s), size)?;
            save_image(&sk, root.join(format!("style{}/{i:02}.png", s + 1)))?;
        }
    }
    Ok(())
}

/// Writes `n` color images to `color_dir` and `n` sketches (cycling styles)
/// to `sketch_dir`, using disjoint shapes for the two domains.
pub fn write_unpaired(color_dir: &Path, sketch_dir: &Path, n: usize, size: usize) -> Result<()> {
    for i in 0..n as u64 {
        let id = 2000 + i;
        save_image(&render_color(&Shape::new(id), id, size)?, color_dir.join(format!("{i:04}.png")))?;
        let sid = 3000 + i;
        let sk = render_sketch(&Shape::new(sid), &builtin_style(i as usize), size)?;
        save_image(&sk, sketch_dir.join(format!("{i:04}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn styles_share_geometry_and_differ_in_ink() -> Result<()> {
        let shape = Shape::new(7);
        let fine = render_sketch(&shape, &builtin_style(0), 64)?.values()?;
        let light = render_sketch(&shape, &builtin_style(2), 64)?.values()?;
        let min_fine = fine.iter().cloned().fold(1.0, f32::min);
        let min_light = light.iter().cloned().fold(1.0, f32::min);
        assert!(min_fine < -0.5 && min_light >= -0.2 - 1e-6 && min_light < 0.9);
        assert!(fine.iter().filter(|v| **v > 0.999).count() > 64 * 64 / 2);
        Ok(())
    }

    #[test]
    fn rendering_is_deterministic() -> Result<()> {
        let a = render_color(&Shape::new(3), 3, 32)?.values()?;
        let b = render_color(&Shape::new(3), 3, 32)?.values()?;
        assert_eq!(a, b);
        assert_ne!(a, render_color(&Shape::new(4), 4, 32)?.values()?);
        Ok(())
    }

    #[test]
    fn solid_is_constant() -> Result<()> {
        let s = render_solid([0.2, -0.4, 0.9], 16)?;
        assert_eq!(s.height(), 16);
        assert!(s.values()?[..256].iter().all(|v| *v == 0.2));
        Ok(())
    }
}
