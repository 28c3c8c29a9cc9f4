//! `onecad` command-line interface.
//!
//! Errors are printed as one line, `error[E_CODE]: message`, and exit with:
//!
//! | code | meaning |
//! |---|---|
//! | 2 | bad command-line usage |
//! | 3 | invalid or inconsistent configuration |
//! | 4 | unreadable or malformed dataset |
//! | 5 | file-system error |
//! | 6 | bad checkpoint or font file |
//! | 7 | label cannot be rendered |
//! | 8 | any other failure |

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use onecad::canvas::{compose, masked_canvas, Canvas, Image};
use onecad::checkpoint::Checkpoint;
use onecad::config::{Precision, RunConfig};
use onecad::data::{fit_vocabulary, gen_shapes, SHAPE_CLASSES};
use onecad::decode::{infer, InferOptions};
use onecad::glyphfont::GlyphFont;
use onecad::mae::{param_shapes, MaeModel};
use onecad::metrics::{capacity, label_pixels, one_hot_params};
use onecad::train::{evaluate, run_training, Datasets};
use onecad::{pnm, Error, Result, Scalar};
use serde_json::json;

#[derive(Parser)]
#[command(name = "onecad", version, about = "Image classification by reconstructing rendered label text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML or JSON run configuration; defaults to the chosen preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration used when no file is given.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Brightness factor applied to predicted label strips.
    #[arg(long)]
    brightness: Option<f64>,
    /// Number of character cells reserved for the label.
    #[arg(long)]
    label_cells: Option<usize>,
    /// Floating-point width, f32 or f64.
    #[arg(long)]
    precision: Option<Precision>,
    /// Output directory.
    #[arg(long, env = "ONECAD_OUT", default_value = "onecad-out")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::preset(&self.preset)?,
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(b) = self.brightness {
            c.brightness = b;
        }
        if let Some(n) = self.label_cells {
            c.set_label_cells(n);
        }
        if let Some(p) = self.precision {
            c.precision = p;
        }
        c.output_dir = Some(self.out.clone());
        c.validate(GlyphFont::builtin())?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes config.toml, metrics.csv, eval.csv and checkpoints/.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on the test split of the configured dataset.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Predict the label of one PGM/PPM image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = onecad::decode::DEFAULT_BRIGHTNESS)]
        brightness: f64,
        /// Floating-point width, f32 or f64.
        #[arg(long, default_value = "f32")]
        precision: Precision,
    },
    /// Write composed.pgm, masked.pgm and target.pgm for one image and label.
    ComposePreview {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        label: String,
    },
    /// Label capacity against one-hot output cost.
    Capacity {
        #[arg(long, default_value_t = 10)]
        n_patches: u32,
        #[arg(long, default_value_t = 26)]
        alphabet_size: u64,
        #[arg(long, default_value_t = 16)]
        patch_size: u64,
        #[arg(long, default_value_t = 4096)]
        features: u64,
        #[arg(long, default_value_t = 10_000_000)]
        classes: u64,
    },
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Print the parameter count and shapes of the pipeline built for a vocabulary.
    Inspect {
        #[command(flatten)]
        run: RunArgs,
        /// Use this many generated distinct labels.
        #[arg(long, conflicts_with = "vocab_file")]
        vocab_size: Option<usize>,
        /// One label per line.
        #[arg(long)]
        vocab_file: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Generate synthetic shapes as PGM files plus a `labels.tsv` sidecar.
    Gen {
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 80)]
        side: usize,
        #[arg(long, env = "ONECAD_OUT", default_value = "onecad-out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    let font = GlyphFont::builtin();
    match command {
        Command::Train { run, epochs, max_lr, batch_size, resume } => {
            let mut config = run.config()?;
            if let Some(e) = epochs {
                config.epochs = e;
            }
            if let Some(lr) = max_lr {
                config.schedule.max_lr = lr;
            }
            if let Some(b) = batch_size {
                config.batch_size = b;
            }
            config.validate(font)?;
            match config.precision {
                Precision::F32 => train::<f32>(config, &run.out, resume, font)?,
                Precision::F64 => train::<f64>(config, &run.out, resume, font)?,
            }
        }
        Command::Eval { run, checkpoint } => {
            let config = run.config()?;
            match config.precision {
                Precision::F32 => eval::<f32>(&config, &checkpoint, &run.out, font)?,
                Precision::F64 => eval::<f64>(&config, &checkpoint, &run.out, font)?,
            }
        }
        Command::Infer { checkpoint, image, brightness, precision } => match precision {
            Precision::F32 => infer_one::<f32>(&checkpoint, &image, brightness, font)?,
            Precision::F64 => infer_one::<f64>(&checkpoint, &image, brightness, font)?,
        },
        Command::ComposePreview { run, image, label } => {
            let config = run.config()?;
            let img: Image<f32> = pnm::read(&image)?;
            let s = compose(&img, &label, &config.layout, font)?;
            let masked = masked_canvas(&s.canvas, &config.layout, &s.masked_patch_ids);
            let target = only_patches(&s.target, &config.layout, &s.masked_patch_ids);
            std::fs::create_dir_all(&run.out)?;
            let ext = if config.layout.channels == 1 { "pgm" } else { "ppm" };
            for (name, canvas) in [("composed", &s.canvas), ("masked", &masked), ("target", &target)] {
                let path = run.out.join(format!("{name}.{ext}"));
                pnm::write(&path, &pnm::canvas_image(canvas))?;
                println!("{}", path.display());
            }
        }
        Command::Capacity { n_patches, alphabet_size, patch_size, features, classes } => {
            let cap = capacity(n_patches, alphabet_size);
            let oh = one_hot_params(features, classes);
            println!("capacity\t{cap}");
            println!("label_pixels\t{}", label_pixels(n_patches as u64, patch_size));
            println!("one_hot_params\t{oh}\t{:.3e}", oh as f64);
        }
        Command::Dataset { command: DatasetCommand::Gen { n, seed, side, out } } => {
            if n == 0 || side == 0 {
                return Err(Error::InvalidConfig("dataset gen needs --n >= 1 and --side >= 1".into()));
            }
            std::fs::create_dir_all(&out)?;
            let mut sidecar = String::new();
            for (i, s) in gen_shapes::<f32>(n, seed, side).iter().enumerate() {
                let name = format!("{i:05}.pgm");
                pnm::write(out.join(&name), &s.image)?;
                sidecar.push_str(&format!("{name}\t{}\n", s.label));
            }
            std::fs::write(out.join("labels.tsv"), sidecar)?;
            println!("wrote {n} images ({}) to {}", SHAPE_CLASSES.join(", "), out.display());
        }
        Command::Inspect { run, vocab_size, vocab_file } => {
            let config = run.config()?;
            let cells = config.layout.label_cells;
            let labels = match (vocab_size, vocab_file) {
                (Some(n), _) => generated_labels(n, cells, font)?,
                (None, Some(path)) => read_labels(&path)?,
                (None, None) => return Err(Error::InvalidConfig("inspect needs --vocab-size or --vocab-file".into())),
            };
            let vocab = fit_vocabulary(&labels, font, cells)?;
            let model = MaeModel::<f32>::new(config.model.clone(), config.seed)?;
            let shapes: Vec<_> = model.params().iter().map(|p| json!([p.name, p.value.shape()])).collect();
            debug_assert_eq!(shapes.len(), param_shapes(&config.model).len());
            println!(
                "{}",
                json!({
                    "vocab_size": vocab.len(),
                    "max_label_len": vocab.max_len(),
                    "param_count": model.param_count(),
                    "shapes": shapes,
                })
            );
        }
    }
    Ok(())
}

fn train<T: Scalar>(config: RunConfig, out: &Path, resume: bool, font: &GlyphFont) -> Result<()> {
    let data = Datasets::<T>::load(&config.dataset, font, config.layout.label_cells)?;
    std::fs::create_dir_all(out)?;
    let (_, summary) = run_training(config, &data, font, Some(out), resume)?;
    let eval = summary.last_eval.as_ref().map(|r| json!({"fw": r.fw, "ftc": r.ftc, "fc": r.fc}));
    println!(
        "{}",
        json!({
            "epochs_run": summary.epochs_run,
            "global_step": summary.global_step,
            "first_loss": summary.first_loss,
            "last_loss": summary.last_loss,
            "eval": eval,
            "checkpoint": summary.final_checkpoint,
        })
    );
    Ok(())
}

fn eval<T: Scalar>(config: &RunConfig, checkpoint: &Path, out: &Path, font: &GlyphFont) -> Result<()> {
    let ckpt = Checkpoint::<T>::load(checkpoint)?;
    let layout = ckpt.header.layout.clone();
    let data = Datasets::<T>::load(&config.dataset, font, layout.label_cells)?;
    let report = evaluate(&ckpt.model, &data.test, &layout, font, config.brightness, config.batch_size)?;
    std::fs::create_dir_all(out)?;
    report.write_csv(std::fs::File::create(out.join("eval.csv"))?)?;
    println!("{}", json!({"n": report.n, "fw": report.fw, "ftc": report.ftc, "fc": report.fc}));
    Ok(())
}

fn infer_one<T: Scalar>(checkpoint: &Path, image: &Path, brightness: f64, font: &GlyphFont) -> Result<()> {
    let ckpt = Checkpoint::<T>::load(checkpoint)?;
    let img: Image<T> = pnm::read(image)?;
    let p = infer(&ckpt.model, &img, &ckpt.header.layout, font, InferOptions { brightness })?;
    let cells: Vec<_> = p.per_cell_scores.iter().map(|(c, s)| json!({"glyph": c.to_string(), "mse": s})).collect();
    println!("{}", json!({"label": p.decoded, "cells": cells}));
    Ok(())
}

/// A canvas that keeps only the pixels of `patches`, zero elsewhere.
fn only_patches(canvas: &Canvas<f32>, layout: &onecad::canvas::CanvasLayout, patches: &[usize]) -> Canvas<f32> {
    let keep: Vec<usize> = (0..layout.num_patches()).filter(|p| !patches.contains(p)).collect();
    masked_canvas(canvas, layout, &keep)
}

/// `n` distinct labels over the font's letters, shortest first.
fn generated_labels(n: usize, cells: usize, font: &GlyphFont) -> Result<Vec<String>> {
    let letters: Vec<char> = font.alphabet().iter().copied().filter(|c| c.is_ascii_lowercase()).collect();
    let base = letters.len();
    let mut out = Vec::with_capacity(n);
    let mut len = 1;
    while out.len() < n {
        if len > cells {
            return Err(Error::InvalidConfig(format!("cannot form {n} distinct labels in {cells} cells")));
        }
        let total = (base as u128).saturating_pow(len as u32);
        let mut i = 0u128;
        while i < total && out.len() < n {
            let mut k = i;
            let word: String = (0..len)
                .map(|_| {
                    let c = letters[(k % base as u128) as usize];
                    k /= base as u128;
                    c
                })
                .collect();
            out.push(word);
            i += 1;
        }
        len += 1;
    }
    Ok(out)
}

fn read_labels(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned).collect())
}
