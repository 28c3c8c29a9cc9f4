//! Monospace bitmap font used both to paint labels and to read them back.
//!
//! # Asset format
//!
//! The font is stored as a small little-endian binary file:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"OCGF"`                         |
//! | 4      | 2    | cell width `u16`                        |
//! | 6      | 2    | cell height `u16`                       |
//! | 8      | 2    | glyph count `u16`                       |
//! | 10     | ...  | glyph records                           |
//!
//! Each glyph record is a `u32` Unicode codepoint followed by
//! `cell_width * cell_height` intensity bytes in row-major order. A byte `b`
//! is the intensity `b / 255`; paper is 255 and ink is 0. Record order
//! defines the alphabet order.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::scalar::{clamp01, Scalar};

const MAGIC: &[u8; 4] = b"OCGF";
const BUILTIN: &[u8] = include_bytes!("../assets/mono16x32.glyphs");

/// Default number of label cells (a 32x160 strip with the built-in font).
pub const DEFAULT_CELLS: usize = 10;

/// Row-major single-channel intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct Bitmap<T> {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<T>,
}

/// A rendered (or predicted) line of monospace text, `n_cells` glyph cells wide.
pub type TextStrip<T> = Bitmap<T>;

impl<T: Scalar> Bitmap<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, pixels: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, pixels: Vec<T>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width} bitmap needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.pixels[y * self.width + x]
    }

    /// Copy of the `width`-column band starting at `x0`.
    pub fn columns(&self, x0: usize, width: usize) -> Bitmap<T> {
        let mut pixels = Vec::with_capacity(self.height * width);
        for y in 0..self.height {
            let row = &self.pixels[y * self.width..(y + 1) * self.width];
            pixels.extend_from_slice(&row[x0..x0 + width]);
        }
        Bitmap { height: self.height, width, pixels }
    }

    pub fn cast<U: Scalar>(&self) -> Bitmap<U> {
        Bitmap {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|p| U::of(p.as_f64())).collect(),
        }
    }
}

/// Fixed-cell bitmap alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphFont {
    cell_width: usize,
    cell_height: usize,
    alphabet: Vec<char>,
    glyphs: Vec<Vec<u8>>,
    index: HashMap<char, usize>,
}

impl GlyphFont {
    /// Builds a font from `(character, row-major bytes)` records.
    pub fn new(cell_width: usize, cell_height: usize, glyphs: Vec<(char, Vec<u8>)>) -> Result<Self> {
        if cell_width == 0 || cell_height == 0 {
            return Err(Error::BadFont("zero cell dimension".into()));
        }
        let mut alphabet = Vec::with_capacity(glyphs.len());
        let mut bitmaps = Vec::with_capacity(glyphs.len());
        let mut index = HashMap::new();
        for (ch, bitmap) in glyphs {
            if bitmap.len() != cell_width * cell_height {
                return Err(Error::BadFont(format!(
                    "glyph {ch:?} has {} bytes, expected {}",
                    bitmap.len(),
                    cell_width * cell_height
                )));
            }
            if index.insert(ch, alphabet.len()).is_some() {
                return Err(Error::BadFont(format!("duplicate glyph {ch:?}")));
            }
            alphabet.push(ch);
            bitmaps.push(bitmap);
        }
        match index.get(&' ') {
            Some(&i) if bitmaps[i].iter().all(|&b| b == 255) => {}
            Some(_) => return Err(Error::BadFont("space glyph must be all background".into())),
            None => return Err(Error::BadFont("font has no space glyph".into())),
        }
        Ok(Self { cell_width, cell_height, alphabet, glyphs: bitmaps, index })
    }

    /// The 16x32 font compiled into the library.
    pub fn builtin() -> &'static GlyphFont {
        static FONT: OnceLock<GlyphFont> = OnceLock::new();
        FONT.get_or_init(|| GlyphFont::from_bytes(BUILTIN).expect("built-in font asset is valid"))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(Error::BadFont("missing OCGF header".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
        let (cw, ch, count) = (u16_at(4), u16_at(6), u16_at(8));
        let record = 4 + cw * ch;
        if bytes.len() != 10 + count * record {
            return Err(Error::BadFont(format!(
                "expected {} bytes for {count} glyphs, found {}",
                10 + count * record,
                bytes.len()
            )));
        }
        let mut glyphs = Vec::with_capacity(count);
        for g in 0..count {
            let at = 10 + g * record;
            let cp = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            let c = char::from_u32(cp).ok_or_else(|| Error::BadFont(format!("invalid codepoint {cp:#x}")))?;
            glyphs.push((c, bytes[at + 4..at + record].to_vec()));
        }
        Self::new(cw, ch, glyphs)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + self.glyphs.len() * (4 + self.cell_width * self.cell_height));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.cell_width as u16).to_le_bytes());
        out.extend_from_slice(&(self.cell_height as u16).to_le_bytes());
        out.extend_from_slice(&(self.glyphs.len() as u16).to_le_bytes());
        for (c, g) in self.alphabet.iter().zip(&self.glyphs) {
            out.extend_from_slice(&(*c as u32).to_le_bytes());
            out.extend_from_slice(g);
        }
        out
    }

    pub fn cell_width(&self) -> usize {
        self.cell_width
    }

    pub fn cell_height(&self) -> usize {
        self.cell_height
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn contains(&self, ch: char) -> bool {
        self.index.contains_key(&ch)
    }

    /// Raw 0..=255 intensities of a glyph.
    pub fn glyph_bytes(&self, ch: char) -> Result<&[u8]> {
        self.index.get(&ch).map(|&i| self.glyphs[i].as_slice()).ok_or(Error::UnknownGlyph(ch))
    }

    /// The stored bitmap for `ch`, intensities in `[0, 1]`.
    pub fn glyph_for<T: Scalar>(&self, ch: char) -> Result<Bitmap<T>> {
        let bytes = self.glyph_bytes(ch)?;
        Ok(Bitmap {
            height: self.cell_height,
            width: self.cell_width,
            pixels: bytes.iter().map(|&b| byte_to_unit(b)).collect(),
        })
    }

    /// Checks that every character of `label` has a glyph and fits `n_cells`.
    pub fn check_renderable(&self, label: &str, n_cells: usize) -> Result<()> {
        let mut len = 0;
        for c in label.chars() {
            if !self.contains(c) {
                return Err(Error::UnknownGlyph(c));
            }
            len += 1;
        }
        if len > n_cells {
            return Err(Error::LabelTooLong { label: label.to_string(), len, max: n_cells });
        }
        Ok(())
    }
}

pub(crate) fn byte_to_unit<T: Scalar>(b: u8) -> T {
    T::of(b as f64 / 255.0)
}

/// Paints `label` left-aligned into an `n_cells`-wide strip; unused cells are blank.
pub fn render_text<T: Scalar>(label: &str, font: &GlyphFont, n_cells: usize) -> Result<TextStrip<T>> {
    font.check_renderable(label, n_cells)?;
    let (cw, ch) = (font.cell_width, font.cell_height);
    let width = n_cells * cw;
    let mut strip = Bitmap::filled(ch, width, T::one());
    for (cell, c) in label.chars().enumerate() {
        let glyph = font.glyph_bytes(c)?;
        for y in 0..ch {
            let dst = &mut strip.pixels[y * width + cell * cw..y * width + (cell + 1) * cw];
            for (d, &b) in dst.iter_mut().zip(&glyph[y * cw..(y + 1) * cw]) {
                *d = byte_to_unit(b);
            }
        }
    }
    Ok(strip)
}

/// Multiplies every pixel by `factor` and clamps to `[0, 1]`.
pub fn scale_brightness<T: Scalar>(strip: &TextStrip<T>, factor: f64) -> Result<TextStrip<T>> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::InvalidFactor(factor));
    }
    let f = T::of(factor);
    Ok(Bitmap {
        height: strip.height,
        width: strip.width,
        pixels: strip.pixels.iter().map(|&p| clamp01(p * f)).collect(),
    })
}
