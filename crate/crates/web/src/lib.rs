//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Images cross the boundary as RGBA bytes, row-major, ready for `ImageData`.

use candle_core::{DType, Tensor};
use refsketch::attention::adain;
use refsketch::imaging::{unit_to_byte, ColorImage, Raster, SketchImage};
use refsketch::losses::loss_weights;
use refsketch::synth::{builtin_style, render_color, render_sketch, Shape, NUM_STYLES};
use refsketch::training::lr_schedule;
use wasm_bindgen::prelude::*;

const MAX_SIDE: usize = 512;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn check_size(size: usize) -> Result<(), JsValue> {
    if !(16..=MAX_SIDE).contains(&size) {
        return Err(js_err(format!("size {size} outside 16..={MAX_SIDE}")));
    }
    Ok(())
}

fn rgba<R: Raster>(img: &R) -> Result<Vec<u8>, JsValue> {
    let (h, w) = (img.height(), img.width());
    let v = img.values().map_err(js_err)?;
    let plane = h * w;
    let mut out = Vec::with_capacity(plane * 4);
    for i in 0..plane {
        let px = if R::CHANNELS == 1 { [v[i]; 3] } else { [v[i], v[plane + i], v[2 * plane + i]] };
        out.extend(px.map(unit_to_byte));
        out.push(255);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn style_count() -> usize {
    NUM_STYLES
}

/// Line drawing of synthetic shape `shape_id` in built-in style `style`.
#[wasm_bindgen]
pub fn render_style(shape_id: u32, style: usize, size: usize) -> Result<Vec<u8>, JsValue> {
    check_size(size)?;
    let s = render_sketch(&Shape::new(shape_id as u64), &builtin_style(style), size).map_err(js_err)?;
    rgba(&s)
}

/// Color rendering of the same shape, the content side of a training pair.
#[wasm_bindgen]
pub fn render_content(shape_id: u32, size: usize) -> Result<Vec<u8>, JsValue> {
    check_size(size)?;
    rgba(&render_color(&Shape::new(shape_id as u64), shape_id as u64, size).map_err(js_err)?)
}

/// Shifts every channel of the color shape to the per-channel mean and
/// spread of the style drawing.
#[wasm_bindgen]
pub fn retone(shape_id: u32, style_shape: u32, style: usize, size: usize) -> Result<Vec<u8>, JsValue> {
    check_size(size)?;
    let content = render_color(&Shape::new(shape_id as u64), shape_id as u64, size).map_err(js_err)?;
    let sketch = render_sketch(&Shape::new(style_shape as u64), &builtin_style(style), size).map_err(js_err)?;
    let c = content.batched(DType::F32).map_err(js_err)?;
    let s: Tensor = sketch.batched(DType::F32).and_then(|t| Ok(t.repeat((1, 3, 1, 1))?)).map_err(js_err)?;
    let fused = adain(&c, &s).map_err(js_err)?;
    rgba(&ColorImage::from_output(&fused).map_err(js_err)?)
}

/// Same as [`retone`] but keeps a single gray channel, which is how the
/// generator sees its content.
#[wasm_bindgen]
pub fn retone_gray(shape_id: u32, style_shape: u32, style: usize, size: usize) -> Result<Vec<u8>, JsValue> {
    check_size(size)?;
    let content = render_color(&Shape::new(shape_id as u64), shape_id as u64, size).map_err(js_err)?;
    let gray = refsketch::imaging::to_gray(&content).map_err(js_err)?;
    let sketch = render_sketch(&Shape::new(style_shape as u64), &builtin_style(style), size).map_err(js_err)?;
    let fused = adain(&gray.batched(DType::F32).map_err(js_err)?, &sketch.batched(DType::F32).map_err(js_err)?)
        .map_err(js_err)?;
    rgba(&SketchImage::from_output(&fused).map_err(js_err)?)
}

/// Per-epoch `[style/line weight, cycle weight, adversarial weight, lr]`,
/// flattened, for a run of `total_epochs`.
#[wasm_bindgen]
pub fn schedule(total_epochs: usize) -> Result<Vec<f64>, JsValue> {
    if total_epochs == 0 || total_epochs > 10_000 {
        return Err(js_err("total_epochs must be in 1..=10000"));
    }
    let mut out = Vec::with_capacity(total_epochs * 4);
    for e in 0..total_epochs {
        let w = loss_weights(e, total_epochs).map_err(js_err)?;
        out.extend([w.style, w.cyc, w.adv, lr_schedule(e, total_epochs).map_err(js_err)?]);
    }
    Ok(out)
}
