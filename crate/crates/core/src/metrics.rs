//! Accuracy over decoded labels, and the label-capacity arithmetic that
//! motivates pixel labels over one-hot outputs.

use std::io::Write;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How much of the label must match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccuracyMode {
    /// Full word.
    Fw,
    /// First two characters (first one for one-character labels).
    Ftc,
    /// First character.
    Fc,
}

/// Lowercase, trim, and turn inner whitespace runs into underscores.
pub fn normalize_label(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join("_").to_lowercase()
}

/// Whether `predicted` matches `label` under `mode`, after normalizing both.
pub fn matches(predicted: &str, label: &str, mode: AccuracyMode) -> Result<bool> {
    let label: Vec<char> = normalize_label(label).chars().collect();
    if label.is_empty() {
        return Err(Error::EmptyLabel);
    }
    let pred: Vec<char> = normalize_label(predicted).chars().collect();
    if pred.is_empty() {
        return Ok(false);
    }
    let k = match mode {
        AccuracyMode::Fw => return Ok(pred == label),
        AccuracyMode::Ftc => label.len().min(2),
        AccuracyMode::Fc => 1,
    };
    Ok(pred.len() >= k && pred[..k] == label[..k])
}

/// Fraction of `(predicted, label)` pairs that match; 0 for no pairs.
pub fn accuracy<P: AsRef<str>, L: AsRef<str>>(pairs: &[(P, L)], mode: AccuracyMode) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (p, l) in pairs {
        hits += matches(p.as_ref(), l.as_ref(), mode)? as usize;
    }
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub predicted: String,
    pub label: String,
    pub fw: bool,
    pub ftc: bool,
    pub fc: bool,
}

/// Per-sample results and aggregate accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<ScoredPair>,
    pub n: usize,
    pub fw: f64,
    pub ftc: f64,
    pub fc: f64,
}

impl EvalReport {
    pub fn from_pairs<P: AsRef<str>, L: AsRef<str>>(pairs: &[(P, L)]) -> Result<Self> {
        let mut scored = Vec::with_capacity(pairs.len());
        for (p, l) in pairs {
            let (p, l) = (p.as_ref(), l.as_ref());
            scored.push(ScoredPair {
                predicted: p.to_string(),
                label: l.to_string(),
                fw: matches(p, l, AccuracyMode::Fw)?,
                ftc: matches(p, l, AccuracyMode::Ftc)?,
                fc: matches(p, l, AccuracyMode::Fc)?,
            });
        }
        let n = scored.len();
        let frac = |f: fn(&ScoredPair) -> bool| {
            if n == 0 {
                0.0
            } else {
                scored.iter().filter(|s| f(s)).count() as f64 / n as f64
            }
        };
        let (fw, ftc, fc) = (frac(|s| s.fw), frac(|s| s.ftc), frac(|s| s.fc));
        Ok(Self { pairs: scored, n, fw, ftc, fc })
    }

    /// One row per sample plus a trailing `#summary` row carrying `n` and the fractions.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["predicted", "label", "fw", "ftc", "fc"])?;
        let b = |x: bool| if x { "1" } else { "0" };
        for p in &self.pairs {
            out.write_record([p.predicted.as_str(), p.label.as_str(), b(p.fw), b(p.ftc), b(p.fc)])?;
        }
        out.write_record([
            "#summary".to_string(),
            self.n.to_string(),
            format!("{:.6}", self.fw),
            format!("{:.6}", self.ftc),
            format!("{:.6}", self.fc),
        ])?;
        out.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Distinct labels expressible with `n_patches` symbols from an `alphabet_size` alphabet.
pub fn capacity(n_patches: u32, alphabet_size: u64) -> BigUint {
    BigUint::from(alphabet_size).pow(n_patches)
}

/// Output pixels spent on a label of `n_patches` square patches.
pub fn label_pixels(n_patches: u64, patch_size: u64) -> u128 {
    n_patches as u128 * patch_size as u128 * patch_size as u128
}

/// Weights in a dense `features -> classes` one-hot output layer.
pub fn one_hot_params(features: u64, classes: u64) -> u128 {
    features as u128 * classes as u128
}
