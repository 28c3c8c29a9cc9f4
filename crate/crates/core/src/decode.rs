//! Reading the predicted label back out of a reconstruction.
//!
//! The label strip is cropped from the reconstructed canvas, darkened, and
//! matched cell by cell against the font's glyphs.

use crate::canvas::{compose, crop_label_strip, patchify, unpatchify, CanvasLayout, Image};
use crate::error::{Error, Result};
use crate::glyphfont::{scale_brightness, GlyphFont, TextStrip};
use crate::mae::Reconstructor;
use crate::scalar::Scalar;

/// Brightness factor applied to predicted strips before decoding.
pub const DEFAULT_BRIGHTNESS: f64 = 0.7;

/// Below this dynamic range a strip is treated as empty paper.
const MIN_CONTRAST: f64 = 1e-6;

/// Decoded text plus the evidence behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub raw_strip: TextStrip<T>,
    pub decoded: String,
    /// Winning glyph and its mean squared difference, one entry per cell.
    pub per_cell_scores: Vec<(char, f64)>,
}

/// Converts a text strip into a string.
pub trait StripReader<T: Scalar> {
    fn read(&self, strip: &TextStrip<T>) -> Result<Prediction<T>>;
}

/// Nearest-glyph template matcher over a known monospace font.
#[derive(Debug, Clone, Copy)]
pub struct TemplateOcr<'f> {
    pub font: &'f GlyphFont,
}

impl<T: Scalar> StripReader<T> for TemplateOcr<'_> {
    fn read(&self, strip: &TextStrip<T>) -> Result<Prediction<T>> {
        decode_strip(strip, self.font)
    }
}

/// Stretches the strip's intensity range onto `[0, 1]`; a flat strip becomes blank paper.
pub fn normalize_contrast<T: Scalar>(strip: &TextStrip<T>) -> Vec<f64> {
    let px: Vec<f64> = strip.pixels.iter().map(|p| p.as_f64()).collect();
    let lo = px.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range >= MIN_CONTRAST) {
        return vec![1.0; px.len()];
    }
    px.iter().map(|&p| (p - lo) / range).collect()
}

/// Template OCR: each cell takes the glyph with the smallest mean squared
/// difference (ties go to the lower codepoint); trailing blanks are dropped.
pub fn decode_strip<T: Scalar>(strip: &TextStrip<T>, font: &GlyphFont) -> Result<Prediction<T>> {
    let (cw, ch) = (font.cell_width(), font.cell_height());
    if strip.height != ch || strip.width == 0 || strip.width % cw != 0 || strip.pixels.len() != ch * strip.width {
        return Err(Error::BadStripShape { height: strip.height, width: strip.width, cell_height: ch, cell_width: cw });
    }
    let mut glyphs: Vec<(char, Vec<f64>)> = font
        .alphabet()
        .iter()
        .map(|&c| (c, font.glyph_bytes(c).expect("alphabet glyph").iter().map(|&b| b as f64 / 255.0).collect()))
        .collect();
    glyphs.sort_by_key(|(c, _)| *c);

    let norm = normalize_contrast(strip);
    let n_cells = strip.width / cw;
    let cell_px = (cw * ch) as f64;
    let mut scores = Vec::with_capacity(n_cells);
    for cell in 0..n_cells {
        let mut best = (' ', f64::INFINITY);
        for (c, g) in &glyphs {
            let mut acc = 0.0;
            for y in 0..ch {
                let row = &norm[y * strip.width + cell * cw..y * strip.width + (cell + 1) * cw];
                for (a, b) in row.iter().zip(&g[y * cw..(y + 1) * cw]) {
                    acc += (a - b) * (a - b);
                }
            }
            let mse = acc / cell_px;
            if mse < best.1 {
                best = (*c, mse);
            }
        }
        scores.push(best);
    }
    let text: String = scores.iter().map(|(c, _)| *c).collect();
    Ok(Prediction { raw_strip: strip.clone(), decoded: text.trim_end_matches(' ').to_string(), per_cell_scores: scores })
}

/// Inference pipeline settings.
#[derive(Debug, Clone, Copy)]
pub struct InferOptions {
    pub brightness: f64,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self { brightness: DEFAULT_BRIGHTNESS }
    }
}

/// Strips cut from the reconstructions of `images`, before brightness correction.
pub fn predict_strips<T: Scalar, M: Reconstructor<T> + ?Sized>(
    model: &M,
    images: &[&Image<T>],
    layout: &CanvasLayout,
    font: &GlyphFont,
) -> Result<Vec<TextStrip<T>>> {
    let mut inputs = Vec::with_capacity(images.len());
    let mut masked = Vec::new();
    for img in images {
        let s = compose(img, "", layout, font)?;
        masked = s.masked_patch_ids;
        inputs.push(patchify(&s.canvas, layout)?);
    }
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    model
        .reconstruct_batch(&inputs, &masked)?
        .iter()
        .map(|rec| crop_label_strip(&unpatchify(rec, layout)?, layout, font))
        .collect()
}

/// Classifies a batch of images: reconstruct the label rows, crop, darken, read.
pub fn infer_batch<T: Scalar, M: Reconstructor<T> + ?Sized>(
    model: &M,
    images: &[&Image<T>],
    layout: &CanvasLayout,
    font: &GlyphFont,
    opts: InferOptions,
) -> Result<Vec<Prediction<T>>> {
    predict_strips(model, images, layout, font)?
        .iter()
        .map(|strip| {
            let dark = scale_brightness(strip, opts.brightness)?;
            let mut p = decode_strip(&dark, font)?;
            p.raw_strip = strip.clone();
            Ok(p)
        })
        .collect()
}

/// Classifies one image.
pub fn infer<T: Scalar, M: Reconstructor<T> + ?Sized>(
    model: &M,
    image: &Image<T>,
    layout: &CanvasLayout,
    font: &GlyphFont,
    opts: InferOptions,
) -> Result<Prediction<T>> {
    Ok(infer_batch(model, &[image], layout, font, opts)?.remove(0))
}
