//! Multimodal canvas: the input image and its rendered label share one
//! square picture that is cut into a row-major grid of patches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyphfont::{render_text, Bitmap, GlyphFont, TextStrip};
use crate::nn::Tensor;
use crate::scalar::{clamp01, Scalar};

/// Pixel coordinate, `x` to the right and `y` down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Point {
    pub x: usize,
    pub y: usize,
}

/// Interleaved `height x width x channels` image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<T>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::BadImage(format!(
                "{height}x{width}x{channels} image with {} values",
                pixels.len()
            )));
        }
        Ok(Self { height, width, channels, pixels })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self { height, width, channels, pixels: vec![value; height * width * channels] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: self.pixels.iter().map(|p| U::of(p.as_f64())).collect(),
        }
    }
}

/// Planar `channels x side x side` canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas<T> {
    pub channels: usize,
    pub side: usize,
    pub pixels: Vec<T>,
}

impl<T: Scalar> Canvas<T> {
    pub fn blank(channels: usize, side: usize) -> Self {
        Self { channels, side, pixels: vec![T::zero(); channels * side * side] }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.side + y) * self.side + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.pixels[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.idx(c, y, x);
        self.pixels[i] = v;
    }
}

/// Geometry of the canvas: where the image and label go and how it is patched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanvasLayout {
    pub canvas_side: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub image_origin: Point,
    pub label_origin: Point,
    pub label_cells: usize,
    /// Height of the label strip; must equal the font cell height.
    pub label_height: usize,
    pub channels: usize,
}

impl CanvasLayout {
    /// 368-pixel canvas, 224-pixel image slot, 10-cell label in patch rows 19 and 20.
    pub fn full() -> Self {
        Self {
            canvas_side: 368,
            patch_size: 16,
            image_size: 224,
            image_origin: Point { x: 72, y: 16 },
            label_origin: Point { x: 16, y: 304 },
            label_cells: 10,
            label_height: 32,
            channels: 1,
        }
    }

    /// 128-pixel canvas (8x8 patches), 80-pixel image slot, 6-cell label in patch rows 6 and 7.
    pub fn desk() -> Self {
        Self {
            canvas_side: 128,
            patch_size: 16,
            image_size: 80,
            image_origin: Point { x: 24, y: 8 },
            label_origin: Point { x: 16, y: 96 },
            label_cells: 6,
            label_height: 32,
            channels: 1,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.canvas_side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Width of the label strip for a font with the given cell width.
    pub fn label_width(&self, cell_width: usize) -> usize {
        self.label_cells * cell_width
    }

    /// Checks the layout invariants against a font.
    pub fn validate(&self, font: &GlyphFont) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidLayout(m));
        let ps = self.patch_size;
        if ps == 0 || self.canvas_side == 0 || self.canvas_side % ps != 0 {
            return bad(format!("canvas side {} not a positive multiple of patch size {ps}", self.canvas_side));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("unsupported channel count {}", self.channels));
        }
        if self.label_height != font.cell_height() {
            return bad(format!("label height {} != font cell height {}", self.label_height, font.cell_height()));
        }
        if self.label_height % ps != 0 {
            return bad(format!("label height {} not a multiple of patch size {ps}", self.label_height));
        }
        if self.label_origin.x % ps != 0 || self.label_origin.y % ps != 0 {
            return bad(format!("label origin {:?} is not patch-aligned", self.label_origin));
        }
        if self.label_cells == 0 {
            return bad("label needs at least one cell".into());
        }
        let lw = self.label_width(font.cell_width());
        let label = Rect { x: self.label_origin.x, y: self.label_origin.y, w: lw, h: self.label_height };
        let image = Rect { x: self.image_origin.x, y: self.image_origin.y, w: self.image_size, h: self.image_size };
        if !label.inside(self.canvas_side) {
            return bad(format!("label strip {label:?} leaves the canvas"));
        }
        if self.image_size == 0 || !image.inside(self.canvas_side) {
            return bad(format!("image slot {image:?} leaves the canvas"));
        }
        if label.overlaps(&image) {
            return bad("image slot overlaps the label strip".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl Rect {
    fn inside(&self, side: usize) -> bool {
        self.x + self.w <= side && self.y + self.h <= side
    }

    fn overlaps(&self, o: &Rect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }
}

/// A composed training/inference example.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedSample<T> {
    pub canvas: Canvas<T>,
    pub masked_patch_ids: Vec<usize>,
    pub target: Canvas<T>,
    pub label: String,
}

/// Every patch index in every grid row touched by the label strip.
pub fn label_row_patches(layout: &CanvasLayout) -> Vec<usize> {
    let ps = layout.patch_size;
    let g = layout.grid_side();
    if ps == 0 || layout.label_height == 0 {
        return Vec::new();
    }
    let first = layout.label_origin.y / ps;
    let last = ((layout.label_origin.y + layout.label_height - 1) / ps).min(g.saturating_sub(1));
    (first..=last).flat_map(|r| (0..g).map(move |c| r * g + c)).collect()
}

/// Corner-aligned bilinear resize to `size x size`.
pub fn resize_bilinear<T: Scalar>(image: &Image<T>, size: usize) -> Result<Image<T>> {
    if image.height == 0 || image.width == 0 || image.channels == 0 || image.pixels.is_empty() {
        return Err(Error::BadImage("empty image".into()));
    }
    let ratio = |src: usize| if size > 1 { (src - 1) as f64 / (size - 1) as f64 } else { 0.0 };
    let (ry, rx) = (ratio(image.height), ratio(image.width));
    let c = image.channels;
    let mut out = Vec::with_capacity(size * size * c);
    for y in 0..size {
        let fy = y as f64 * ry;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let wy = T::of(fy - y0 as f64);
        for x in 0..size {
            let fx = x as f64 * rx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            let wx = T::of(fx - x0 as f64);
            for ch in 0..c {
                let top = image.get(y0, x0, ch) * (T::one() - wx) + image.get(y0, x1, ch) * wx;
                let bot = image.get(y1, x0, ch) * (T::one() - wx) + image.get(y1, x1, ch) * wx;
                out.push(top * (T::one() - wy) + bot * wy);
            }
        }
    }
    Image::new(size, size, c, out)
}

fn channel_value<T: Scalar>(image: &Image<T>, y: usize, x: usize, c: usize, want: usize) -> Result<T> {
    match (image.channels, want) {
        (a, b) if a == b => Ok(image.get(y, x, c)),
        (1, _) => Ok(image.get(y, x, 0)),
        (3, 1) => Ok((image.get(y, x, 0) + image.get(y, x, 1) + image.get(y, x, 2)) / T::of(3.0)),
        (a, b) => Err(Error::BadImage(format!("cannot map {a} channels onto {b}"))),
    }
}

/// Places the resized image and the rendered label on a blank canvas.
pub fn compose<T: Scalar>(
    image: &Image<T>,
    label: &str,
    layout: &CanvasLayout,
    font: &GlyphFont,
) -> Result<ComposedSample<T>> {
    layout.validate(font)?;
    let strip: TextStrip<T> = render_text(label, font, layout.label_cells)?;
    let resized = resize_bilinear(image, layout.image_size)?;
    let mut canvas = Canvas::blank(layout.channels, layout.canvas_side);
    let Point { x: ox, y: oy } = layout.image_origin;
    for c in 0..layout.channels {
        for y in 0..layout.image_size {
            for x in 0..layout.image_size {
                let v = channel_value(&resized, y, x, c, layout.channels)?;
                canvas.set(c, oy + y, ox + x, clamp01(v));
            }
        }
    }
    paste_strip(&mut canvas, &strip, layout.label_origin);
    Ok(ComposedSample {
        target: canvas.clone(),
        canvas,
        masked_patch_ids: label_row_patches(layout),
        label: label.to_string(),
    })
}

/// Writes `strip` at `origin` on every channel.
pub fn paste_strip<T: Scalar>(canvas: &mut Canvas<T>, strip: &Bitmap<T>, origin: Point) {
    for c in 0..canvas.channels {
        for y in 0..strip.height {
            for x in 0..strip.width {
                canvas.set(c, origin.y + y, origin.x + x, strip.get(y, x));
            }
        }
    }
}

fn check_canvas<T>(canvas: &Canvas<T>, layout: &CanvasLayout) -> Result<()> {
    if canvas.side != layout.canvas_side
        || canvas.channels != layout.channels
        || canvas.pixels.len() != canvas.channels * canvas.side * canvas.side
    {
        return Err(Error::DimensionMismatch(format!(
            "canvas {}x{}x{} vs layout {}x{}x{}",
            canvas.channels, canvas.side, canvas.side, layout.channels, layout.canvas_side, layout.canvas_side
        )));
    }
    if layout.patch_size == 0 || layout.canvas_side % layout.patch_size != 0 {
        return Err(Error::DimensionMismatch("canvas not divisible into patches".into()));
    }
    Ok(())
}

/// Cuts the canvas into `[g*g, patch*patch*channels]`; patch `i` is grid cell
/// `(i / g, i % g)` and each patch vector is ordered row, column, channel.
pub fn patchify<T: Scalar>(canvas: &Canvas<T>, layout: &CanvasLayout) -> Result<Tensor<T>> {
    check_canvas(canvas, layout)?;
    let (g, ps, ch) = (layout.grid_side(), layout.patch_size, layout.channels);
    let mut data = Vec::with_capacity(canvas.pixels.len());
    for gr in 0..g {
        for gc in 0..g {
            for py in 0..ps {
                for px in 0..ps {
                    for c in 0..ch {
                        data.push(canvas.get(c, gr * ps + py, gc * ps + px));
                    }
                }
            }
        }
    }
    Tensor::new(&[g * g, layout.patch_dim()], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, layout: &CanvasLayout) -> Result<Canvas<T>> {
    let (g, ps, ch) = (layout.grid_side(), layout.patch_size, layout.channels);
    if patches.shape() != [g * g, layout.patch_dim()] {
        return Err(Error::DimensionMismatch(format!(
            "patch sequence {:?}, layout expects [{}, {}]",
            patches.shape(),
            g * g,
            layout.patch_dim()
        )));
    }
    let mut canvas = Canvas::blank(ch, layout.canvas_side);
    let mut it = patches.data().iter();
    for gr in 0..g {
        for gc in 0..g {
            for py in 0..ps {
                for px in 0..ps {
                    for c in 0..ch {
                        canvas.set(c, gr * ps + py, gc * ps + px, *it.next().unwrap());
                    }
                }
            }
        }
    }
    Ok(canvas)
}

/// Lays every patch of one channel side by side: a `patch x (g*g*patch)` strip.
pub fn patch_row_strip<T: Scalar>(canvas: &Canvas<T>, layout: &CanvasLayout, channel: usize) -> Result<Bitmap<T>> {
    check_canvas(canvas, layout)?;
    let (g, ps) = (layout.grid_side(), layout.patch_size);
    let width = g * g * ps;
    let mut strip = Bitmap::filled(ps, width, T::zero());
    for i in 0..g * g {
        let (gr, gc) = (i / g, i % g);
        for py in 0..ps {
            for px in 0..ps {
                strip.pixels[py * width + i * ps + px] = canvas.get(channel, gr * ps + py, gc * ps + px);
            }
        }
    }
    Ok(strip)
}

/// The `cell_height x (label_cells * cell_width)` label rectangle, averaged over channels.
pub fn crop_label_strip<T: Scalar>(canvas: &Canvas<T>, layout: &CanvasLayout, font: &GlyphFont) -> Result<TextStrip<T>> {
    check_canvas(canvas, layout)?;
    let (h, w) = (font.cell_height(), layout.label_width(font.cell_width()));
    let Point { x: ox, y: oy } = layout.label_origin;
    if ox + w > canvas.side || oy + h > canvas.side {
        return Err(Error::InvalidLayout("label strip leaves the canvas".into()));
    }
    let inv_c = T::of(1.0 / canvas.channels as f64);
    let mut strip = Bitmap::filled(h, w, T::zero());
    for y in 0..h {
        for x in 0..w {
            let s: T = (0..canvas.channels).map(|c| canvas.get(c, oy + y, ox + x)).sum();
            strip.pixels[y * w + x] = s * inv_c;
        }
    }
    Ok(strip)
}

/// Copy of the canvas with every masked patch set to zero.
pub fn masked_canvas<T: Scalar>(canvas: &Canvas<T>, layout: &CanvasLayout, masked: &[usize]) -> Canvas<T> {
    let (g, ps) = (layout.grid_side(), layout.patch_size);
    let mut out = canvas.clone();
    for &i in masked {
        let (gr, gc) = (i / g, i % g);
        for c in 0..out.channels {
            for y in 0..ps {
                for x in 0..ps {
                    out.set(c, gr * ps + y, gc * ps + x, T::zero());
                }
            }
        }
    }
    out
}
