//! Training and evaluation loops end to end on small synthetic runs.

use onecad::canvas::{compose, patchify, unpatchify, CanvasLayout, Image};
use onecad::checkpoint::Checkpoint;
use onecad::config::{DatasetSpec, RunConfig};
use onecad::data::{fit_label, gen_shapes, LabeledImage, SHAPE_CLASSES};
use onecad::glyphfont::GlyphFont;
use onecad::mae::{ModelConfig, Reconstructor};
use onecad::nn::Tensor;
use onecad::train::{evaluate, run_training, Datasets, RunPaths, METRICS_HEADER};
use onecad::{Error, Result};

fn font() -> &'static GlyphFont {
    GlyphFont::builtin()
}

fn smoke_config(epochs: usize) -> RunConfig {
    RunConfig {
        epochs,
        log_every: 1,
        dataset: DatasetSpec::Shapes { n_train: 32, n_test: 8, side: 80, seed: 3 },
        ..RunConfig::desk()
    }
}

fn smoke_data(config: &RunConfig) -> Datasets<f32> {
    Datasets::load(&config.dataset, font(), config.layout.label_cells).unwrap()
}

fn data_rows(path: &std::path::Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    lines.map(str::to_owned).collect()
}

#[test]
fn one_epoch_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(1);
    let data = smoke_data(&config);
    let (_, summary) = run_training(config, &data, font(), Some(dir.path()), false).unwrap();
    let paths = RunPaths::new(dir.path());
    assert!(paths.checkpoint(1).exists());
    assert_eq!(paths.latest_checkpoint().unwrap(), Some(paths.checkpoint(1)));
    assert!(paths.config().exists());
    assert!(paths.eval().exists());
    let rows = data_rows(&paths.metrics());
    assert!(rows.len() >= 2, "{rows:?}");
    let losses: Vec<f64> = rows.iter().filter_map(|r| r.split(',').nth(2)?.parse().ok()).collect();
    assert!(losses.last() < losses.first(), "{losses:?}");
    assert!(summary.last_loss < summary.first_loss);
    assert_eq!(summary.global_step, 4);
}

#[test]
fn zero_epochs_writes_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(0);
    let data = smoke_data(&config);
    let (trainer, summary) = run_training(config.clone(), &data, font(), Some(dir.path()), false).unwrap();
    let paths = RunPaths::new(dir.path());
    assert!(data_rows(&paths.metrics()).is_empty());
    let ckpt = Checkpoint::<f32>::load(paths.checkpoint(0)).unwrap();
    assert_eq!(summary.final_checkpoint, Some(paths.checkpoint(0)));
    assert_eq!(ckpt.header.global_step, 0);
    let fresh = onecad::mae::MaeModel::<f32>::new(config.model, config.seed).unwrap();
    for (a, b) in ckpt.model.params().iter().zip(fresh.params().iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    assert_eq!(trainer.global_step, 0);
}

#[test]
fn seq_len_mismatch_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = smoke_config(1);
    config.model = ModelConfig::desk(&CanvasLayout::full());
    let data = smoke_data(&smoke_config(1));
    let err = run_training(config, &data, font(), Some(dir.path()), false).unwrap_err();
    assert!(matches!(err, Error::ConfigMismatch(_)), "{err}");
    assert!(!RunPaths::new(dir.path()).metrics().exists());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let config = RunConfig { batch_size: 8, ..smoke_config(2) };
    let data = smoke_data(&config);
    let straight = tempfile::tempdir().unwrap();
    run_training(config.clone(), &data, font(), Some(straight.path()), false).unwrap();

    let split = tempfile::tempdir().unwrap();
    let mut trainer = onecad::train::Trainer::<f32>::new(config.clone(), data.train.len(), font()).unwrap();
    trainer.run_epoch(&data.train, font(), |_, _, _| Ok(())).unwrap();
    let paths = RunPaths::new(split.path());
    std::fs::create_dir_all(paths.checkpoints()).unwrap();
    trainer.checkpoint().save(paths.checkpoint(1)).unwrap();
    std::fs::write(paths.latest(), "epoch-0001.ocad\n").unwrap();
    run_training(config, &data, font(), Some(split.path()), true).unwrap();

    let a = std::fs::read(RunPaths::new(straight.path()).checkpoint(2)).unwrap();
    let b = std::fs::read(paths.checkpoint(2)).unwrap();
    assert!(a == b, "resumed checkpoint differs");
}

/// Paints `label` into every canvas; scored on samples that all carry that label.
struct Oracle {
    label: String,
    layout: CanvasLayout,
}

impl Reconstructor<f32> for Oracle {
    fn reconstruct_batch(&self, patches: &[Tensor<f32>], _masked: &[usize]) -> Result<Vec<Tensor<f32>>> {
        patches
            .iter()
            .map(|p| {
                let canvas = unpatchify(p, &self.layout)?;
                let img = Image::new(canvas.side, canvas.side, 1, canvas.pixels)?;
                let composed = compose(&img, &self.label, &self.layout, font())?;
                patchify(&composed.canvas, &self.layout)
            })
            .collect()
    }
}

struct Noise;

impl Reconstructor<f32> for Noise {
    fn reconstruct_batch(&self, patches: &[Tensor<f32>], _masked: &[usize]) -> Result<Vec<Tensor<f32>>> {
        Ok(patches.iter().map(|p| Tensor::from_fn(p.shape(), |i| (i * 7919 % 104729) as f32 / 104729.0)).collect())
    }
}

#[test]
fn oracle_model_scores_perfectly() {
    let layout = CanvasLayout::desk();
    for class in SHAPE_CLASSES {
        let label = fit_label(class, layout.label_cells);
        let samples: Vec<_> = gen_shapes::<f32>(40, 9, 80)
            .into_iter()
            .map(|s| LabeledImage { label: fit_label(&s.label, layout.label_cells), ..s })
            .filter(|s| s.label == label)
            .collect();
        let oracle = Oracle { label, layout: layout.clone() };
        let r = evaluate(&oracle, &samples, &layout, font(), 0.7, 16).unwrap();
        assert_eq!((r.n, r.fw, r.ftc, r.fc), (10, 1.0, 1.0, 1.0));
    }
}

#[test]
fn noise_model_report_is_well_formed_and_deterministic() {
    let layout = CanvasLayout::desk();
    let samples = gen_shapes::<f32>(40, 9, 80);
    let r = evaluate(&Noise, &samples, &layout, font(), 0.7, 16).unwrap();
    assert_eq!(r.n, 40);
    assert!(r.fw <= r.ftc && r.ftc <= r.fc);
    let again = evaluate(&Noise, &samples, &layout, font(), 0.7, 16).unwrap();
    assert_eq!(r, again);
}

#[test]
fn eval_is_deterministic_for_a_trained_model() {
    let config = smoke_config(1);
    let data = smoke_data(&config);
    let (trainer, _) = run_training(config.clone(), &data, font(), None, false).unwrap();
    let a = evaluate(&trainer.model, &data.test, &config.layout, font(), 0.7, 4).unwrap();
    let b = evaluate(&trainer.model, &data.test, &config.layout, font(), 0.7, 4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn f64_training_runs() {
    let config = RunConfig { precision: onecad::config::Precision::F64, ..smoke_config(1) };
    let data = Datasets::<f64>::load(&config.dataset, font(), config.layout.label_cells).unwrap();
    let (_, summary) = run_training(config, &data, font(), None, false).unwrap();
    assert!(summary.last_loss < summary.first_loss);
}
