//! Binary PGM (`P5`) and PPM (`P6`) images with 8-bit samples.

use std::path::Path;

use crate::canvas::{Canvas, Image};
use crate::error::{Error, Result};
use crate::scalar::{clamp01, Scalar};

fn to_byte<T: Scalar>(v: T) -> u8 {
    (clamp01(v).as_f64() * 255.0).round() as u8
}

/// Encodes a 1- or 3-channel image.
pub fn encode<T: Scalar>(image: &Image<T>) -> Result<Vec<u8>> {
    let magic = match image.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::BadImage(format!("PNM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|&p| to_byte(p)));
    Ok(out)
}

/// Converts a planar canvas to an interleaved image.
pub fn canvas_image<T: Scalar>(canvas: &Canvas<T>) -> Image<T> {
    let (c, s) = (canvas.channels, canvas.side);
    let mut pixels = Vec::with_capacity(c * s * s);
    for y in 0..s {
        for x in 0..s {
            for ch in 0..c {
                pixels.push(canvas.get(ch, y, x));
            }
        }
    }
    Image { height: s, width: s, channels: c, pixels }
}

pub fn write<T: Scalar>(path: impl AsRef<Path>, image: &Image<T>) -> Result<()> {
    std::fs::write(path, encode(image)?)?;
    Ok(())
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::BadImage("malformed PNM header".into()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Image<T>> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::BadImage("not a binary PGM/PPM file".into())),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number()?;
    let height = h.number()?;
    let maxval = h.number()?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::BadImage(format!("unsupported maxval {maxval}")));
    }
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err(Error::BadImage("malformed PNM header".into()));
    }
    let body = &bytes[h.pos + 1..];
    let n = width * height * channels;
    if body.len() < n {
        return Err(Error::TruncatedFile(format!("PNM body has {} of {n} samples", body.len())));
    }
    let scale = maxval as f64;
    Image::new(height, width, channels, body[..n].iter().map(|&b| T::of(b as f64 / scale)).collect())
}

pub fn read<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    decode(&std::fs::read(path)?)
}
