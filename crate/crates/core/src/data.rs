//! Datasets: MNIST IDX files, a synthetic shapes generator, PGM/PPM
//! directories, vocabularies and seeded splits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canvas::Image;
use crate::error::{Error, Result};
use crate::glyphfont::GlyphFont;
use crate::metrics::normalize_label;
use crate::pnm;
use crate::scalar::Scalar;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_WORDS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

pub const SHAPE_CLASSES: [&str; 4] = ["square", "circle", "triangle", "cross"];

pub const CIFAR10_CLASSES: [&str; 10] =
    ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"];

pub const CIFAR100_CLASSES: [&str; 100] = [
    "apple", "aquarium_fish", "baby", "bear", "beaver", "bed", "bee", "beetle", "bicycle", "bottle", "bowl", "boy",
    "bridge", "bus", "butterfly", "camel", "can", "castle", "caterpillar", "cattle", "chair", "chimpanzee", "clock",
    "cloud", "cockroach", "couch", "crab", "crocodile", "cup", "dinosaur", "dolphin", "elephant", "flatfish", "forest",
    "fox", "girl", "hamster", "house", "kangaroo", "keyboard", "lamp", "lawn_mower", "leopard", "lion", "lizard",
    "lobster", "man", "maple_tree", "motorcycle", "mountain", "mouse", "mushroom", "oak_tree", "orange", "orchid",
    "otter", "palm_tree", "pear", "pickup_truck", "pine_tree", "plain", "plate", "poppy", "porcupine", "possum",
    "rabbit", "raccoon", "ray", "road", "rocket", "rose", "sea", "seal", "shark", "shrew", "skunk", "skyscraper",
    "snail", "snake", "spider", "squirrel", "streetcar", "sunflower", "sweet_pepper", "table", "tank", "telephone",
    "television", "tiger", "tractor", "train", "trout", "tulip", "turtle", "wardrobe", "whale", "willow_tree", "wolf",
    "woman", "worm",
];

/// An image and its label text.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage<T> {
    pub image: Image<T>,
    pub label: String,
}

/// How MNIST digit labels are written on the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DigitStyle {
    /// "zero" through "nine".
    #[default]
    Words,
    /// "0" through "9".
    Digits,
}

impl DigitStyle {
    pub fn label(self, digit: u8) -> Result<String> {
        if digit > 9 {
            return Err(Error::Dataset(format!("digit label {digit} outside 0..=9")));
        }
        Ok(match self {
            DigitStyle::Words => MNIST_WORDS[digit as usize].to_string(),
            DigitStyle::Digits => digit.to_string(),
        })
    }

    pub fn digit(self, label: &str) -> Option<u8> {
        match self {
            DigitStyle::Words => MNIST_WORDS.iter().position(|w| *w == label).map(|d| d as u8),
            DigitStyle::Digits => label.parse().ok().filter(|d| *d <= 9),
        }
    }
}

/// Decoded IDX image file: `count` images of `rows x cols` unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| Error::TruncatedFile(format!("{what} header ends at byte {}", bytes.len())))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC, "image file")?;
    let count = be_u32(bytes, 4, "image file")? as usize;
    let rows = be_u32(bytes, 8, "image file")? as usize;
    let cols = be_u32(bytes, 12, "image file")? as usize;
    let n = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < n {
        return Err(Error::TruncatedFile(format!("image file holds {} of {n} pixels", body.len())));
    }
    Ok(IdxImages { count, rows, cols, pixels: body[..n].to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC, "label file")?;
    let count = be_u32(bytes, 4, "label file")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::TruncatedFile(format!("label file holds {} of {count} labels", body.len())));
    }
    Ok(body[..count].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Pairs decoded IDX images and labels into grayscale samples.
pub fn idx_samples<T: Scalar>(images: &IdxImages, labels: &[u8], style: DigitStyle) -> Result<Vec<LabeledImage<T>>> {
    if images.count != labels.len() {
        return Err(Error::CountMismatch { images: images.count, labels: labels.len() });
    }
    let px = images.rows * images.cols;
    labels
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let pixels = images.pixels[i * px..(i + 1) * px].iter().map(|&b| T::of(b as f64 / 255.0)).collect();
            Ok(LabeledImage { image: Image::new(images.rows, images.cols, 1, pixels)?, label: style.label(d)? })
        })
        .collect()
}

/// Inverse of [`idx_samples`]: grayscale samples back to IDX structures.
pub fn samples_to_idx<T: Scalar>(samples: &[LabeledImage<T>], style: DigitStyle) -> Result<(IdxImages, Vec<u8>)> {
    let (rows, cols) = samples.first().map_or((0, 0), |s| (s.image.height, s.image.width));
    let mut pixels = Vec::with_capacity(samples.len() * rows * cols);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        if (s.image.height, s.image.width, s.image.channels) != (rows, cols, 1) {
            return Err(Error::Dataset("IDX samples must share one grayscale size".into()));
        }
        pixels.extend(s.image.pixels.iter().map(|p| (p.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8));
        labels.push(style.digit(&s.label).ok_or_else(|| Error::Dataset(format!("{:?} is not a digit label", s.label)))?);
    }
    Ok((IdxImages { count: samples.len(), rows, cols, pixels }, labels))
}

/// Reads an MNIST-style image/label file pair.
pub fn load_idx<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    style: DigitStyle,
) -> Result<Vec<LabeledImage<T>>> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    idx_samples(&images, &labels, style)
}

/// Writes samples as an MNIST-style image/label file pair.
pub fn write_idx<T: Scalar>(
    samples: &[LabeledImage<T>],
    style: DigitStyle,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (images, labels) = samples_to_idx(samples, style)?;
    std::fs::write(images_path, encode_idx_images(&images))?;
    std::fs::write(labels_path, encode_idx_labels(&labels))?;
    Ok(())
}

/// Largest extent of a shape relative to the image side.
const SHAPE_SCALE: (f64, f64) = (0.5, 0.9);
const NOISE_AMPLITUDE: f64 = 0.1;

fn inside(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    match class {
        0 => dx.abs() <= r && dy.abs() <= r,
        1 => dx * dx + dy * dy <= r * r,
        2 => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
        _ => (dx.abs() <= r && dy.abs() <= r / 3.0) || (dy.abs() <= r && dx.abs() <= r / 3.0),
    }
}

/// Seeded single-channel images of one filled shape each; sample `i` has class `i mod 4`.
pub fn gen_shapes<T: Scalar>(n: usize, seed: u64, side: usize) -> Vec<LabeledImage<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let class = i % SHAPE_CLASSES.len();
            let size = rng.gen_range(SHAPE_SCALE.0..SHAPE_SCALE.1) * side as f64;
            let r = size / 2.0;
            let cx = rng.gen_range(r..=(side as f64 - r).max(r));
            let cy = rng.gen_range(r..=(side as f64 - r).max(r));
            let ink = rng.gen_range(0.8..1.0);
            let pixels = (0..side * side)
                .map(|p| {
                    let (x, y) = ((p % side) as f64 + 0.5, (p / side) as f64 + 0.5);
                    let v = if inside(class, x - cx, y - cy, r) { ink } else { 0.0 };
                    T::of((v + rng.gen_range(0.0..NOISE_AMPLITUDE)).min(1.0))
                })
                .collect();
            LabeledImage { image: Image { height: side, width: side, channels: 1, pixels }, label: SHAPE_CLASSES[class].to_string() }
        })
        .collect()
}

/// Loads every image named in a `filename<TAB>label` sidecar, relative to `dir`.
pub fn load_pnm_dir<T: Scalar>(dir: impl AsRef<Path>, labels_file: impl AsRef<Path>) -> Result<Vec<LabeledImage<T>>> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(labels_file)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (file, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::Dataset(format!("sidecar line {} has no tab", lineno + 1)))?;
        out.push(LabeledImage { image: pnm::read(dir.join(file))?, label: label.to_string() });
    }
    Ok(out)
}

/// Distinct label strings, as rendered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    labels: Vec<String>,
    max_len: usize,
}

impl Vocabulary {
    /// Normalizes and deduplicates `labels`; each must render within `label_cells`.
    pub fn new<S: AsRef<str>>(labels: &[S], font: &GlyphFont, label_cells: usize) -> Result<Self> {
        let mut set: Vec<String> = labels.iter().map(|l| normalize_label(l.as_ref())).collect();
        set.sort();
        set.dedup();
        for l in &set {
            if l.is_empty() {
                return Err(Error::EmptyLabel);
            }
            font.check_renderable(l, label_cells)?;
        }
        let max_len = set.iter().map(|l| l.chars().count()).max().unwrap_or(0);
        Ok(Self { labels: set, max_len })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.binary_search(&normalize_label(label)).is_ok()
    }
}

/// Normalized label cut to its first `cells` characters.
pub fn fit_label(label: &str, cells: usize) -> String {
    normalize_label(label).chars().take(cells).collect()
}

/// Fits every label to `label_cells` and returns the resulting vocabulary.
/// Fails if two different labels collapse onto the same text.
pub fn fit_vocabulary<S: AsRef<str>>(labels: &[S], font: &GlyphFont, label_cells: usize) -> Result<Vocabulary> {
    let mut origin: BTreeMap<String, String> = BTreeMap::new();
    for label in labels {
        let full = normalize_label(label.as_ref());
        let cut = fit_label(&full, label_cells);
        match origin.get(&cut) {
            Some(prev) if *prev != full => {
                return Err(Error::Dataset(format!("labels {prev:?} and {full:?} both shorten to {cut:?}")));
            }
            Some(_) => {}
            None => {
                origin.insert(cut, full);
            }
        }
    }
    let labels: Vec<&String> = origin.keys().collect();
    Vocabulary::new(&labels, font, label_cells)
}

/// Rewrites every label to its normalized, `label_cells`-long form and returns the vocabulary.
/// Fails if two different labels collapse onto the same text.
pub fn fit_labels<T>(samples: &mut [LabeledImage<T>], font: &GlyphFont, label_cells: usize) -> Result<Vocabulary> {
    let labels: Vec<&str> = samples.iter().map(|s| s.label.as_str()).collect();
    let vocab = fit_vocabulary(&labels, font, label_cells)?;
    for s in samples.iter_mut() {
        s.label = fit_label(&s.label, label_cells);
    }
    Ok(vocab)
}

/// Seeded shuffle, then the first `round(fraction * n)` items go to training.
pub fn split<D>(mut items: Vec<D>, fraction: f64, seed: u64) -> Result<(Vec<D>, Vec<D>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fraction * items.len() as f64).round() as usize;
    let val = items.split_off(n_train.min(items.len()));
    Ok((items, val))
}
