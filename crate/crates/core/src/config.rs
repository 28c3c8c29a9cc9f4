//! Run configuration, readable from TOML or JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::canvas::CanvasLayout;
use crate::data::DigitStyle;
use crate::decode::DEFAULT_BRIGHTNESS;
use crate::error::{Error, Result};
use crate::glyphfont::GlyphFont;
use crate::mae::ModelConfig;
use crate::nn::LossScope;
use crate::optim::AdamWConfig;

/// Peak and floor learning rates; warmup defaults to 5% of the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub max_lr: f64,
    pub min_lr: f64,
    #[serde(default)]
    pub warmup_steps: Option<usize>,
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    /// Generated shapes; train and test come from different seeds.
    Shapes { n_train: usize, n_test: usize, side: usize, seed: u64 },
    /// MNIST-style IDX file pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        digit_style: DigitStyle,
        /// Keep only the first `limit` samples of each split.
        #[serde(default)]
        limit: Option<usize>,
    },
    /// PGM/PPM files listed in a `filename<TAB>label` sidecar, split by `train_fraction`.
    Pnm { dir: PathBuf, labels: PathBuf, train_fraction: f64, split_seed: u64 },
}

/// Floating-point width used for training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::InvalidConfig(format!("unknown precision {other:?}; expected f32 or f64"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub layout: CanvasLayout,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default = "default_brightness")]
    pub brightness: f64,
    #[serde(default)]
    pub loss_scope: LossScope,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Training steps between loss rows in the metrics log.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Evaluate on the test split after every epoch.
    #[serde(default = "default_true")]
    pub eval_each_epoch: bool,
    /// Stop once an end-of-epoch evaluation reaches this full-word accuracy.
    #[serde(default)]
    pub target_fw: Option<f64>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_brightness() -> f64 {
    DEFAULT_BRIGHTNESS
}

fn default_clip() -> f64 {
    1.0
}

fn default_log_every() -> usize {
    1
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    /// Small canvas, ~1M-parameter model, 4-class synthetic shapes.
    pub fn desk() -> Self {
        let layout = CanvasLayout::desk();
        Self {
            model: ModelConfig::desk(&layout),
            layout,
            schedule: ScheduleConfig { max_lr: 1e-3, min_lr: 1e-5, warmup_steps: None },
            optimizer: AdamWConfig { weight_decay: 0.1, ..AdamWConfig::default() },
            batch_size: 8,
            epochs: 100,
            seed: 0,
            dataset: DatasetSpec::Shapes { n_train: 400, n_test: 100, side: 80, seed: 0 },
            brightness: DEFAULT_BRIGHTNESS,
            loss_scope: LossScope::Masked,
            clip_norm: 1.0,
            log_every: 5,
            eval_each_epoch: true,
            target_fw: None,
            precision: Precision::F32,
            output_dir: None,
        }
    }

    /// 368-pixel canvas and ViT-Base-sized model.
    pub fn full() -> Self {
        let layout = CanvasLayout::full();
        Self {
            model: ModelConfig::base(&layout),
            layout,
            schedule: ScheduleConfig { max_lr: 5e-6, min_lr: 5e-7, warmup_steps: None },
            optimizer: AdamWConfig::default(),
            batch_size: 16,
            epochs: 10,
            dataset: DatasetSpec::Shapes { n_train: 400, n_test: 100, side: 224, seed: 0 },
            log_every: 20,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::InvalidConfig(format!("unknown preset {other:?}; expected desk or full"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads `.json` files as JSON and everything else as TOML.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Sets how many label cells the layout reserves.
    pub fn set_label_cells(&mut self, cells: usize) {
        self.layout.label_cells = cells;
    }

    /// Checks internal consistency; vocabulary checks happen when data is loaded.
    pub fn validate(&self, font: &GlyphFont) -> Result<()> {
        self.layout.validate(font)?;
        self.model.validate()?;
        self.model.check_layout(&self.layout)?;
        let s = &self.schedule;
        if !(s.min_lr > 0.0 && s.min_lr <= s.max_lr && s.max_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("need 0 < min_lr <= max_lr, got {} and {}", s.min_lr, s.max_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("log_every must be positive".into()));
        }
        if !(self.brightness > 0.0 && self.brightness.is_finite()) {
            return Err(Error::InvalidFactor(self.brightness));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::InvalidConfig(format!("clip_norm must be non-negative, got {}", self.clip_norm)));
        }
        if let DatasetSpec::Pnm { train_fraction, .. } = self.dataset {
            if !(train_fraction > 0.0 && train_fraction < 1.0) {
                return Err(Error::InvalidConfig(format!("train_fraction must lie in (0, 1), got {train_fraction}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        let font = GlyphFont::builtin();
        RunConfig::desk().validate(font).unwrap();
        RunConfig::full().validate(font).unwrap();
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn toml_and_json_agree() {
        let c = RunConfig::desk();
        let from_toml = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        let from_json = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(from_toml, c);
        assert_eq!(from_json, c);
    }

    #[test]
    fn seq_len_mismatch_is_config_error() {
        let mut c = RunConfig::desk();
        c.model = ModelConfig::desk(&CanvasLayout::full());
        assert!(matches!(c.validate(GlyphFont::builtin()), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn defaults_fill_in() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk().to_json().unwrap()).unwrap();
        let obj = v.as_object_mut().unwrap();
        for k in ["brightness", "loss_scope", "clip_norm", "optimizer", "log_every", "eval_each_epoch", "precision"] {
            obj.remove(k);
        }
        let c = RunConfig::from_json(&v.to_string()).unwrap();
        assert_eq!(c.brightness, 0.7);
        assert_eq!(c.loss_scope, LossScope::Masked);
        assert_eq!(c.optimizer, AdamWConfig::default());
        assert_eq!(c.precision, Precision::F32);
    }

    #[test]
    fn precision_is_lowercase_in_toml() {
        let mut c = RunConfig::desk();
        c.precision = Precision::F64;
        let text = c.to_toml().unwrap();
        assert!(text.contains("precision = \"f64\""));
        assert_eq!(RunConfig::from_toml(&text).unwrap().precision, Precision::F64);
    }
}
