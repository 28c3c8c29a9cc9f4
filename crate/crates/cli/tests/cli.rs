//! The `onecad` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn onecad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_onecad")).args(args).env_remove("ONECAD_OUT").output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Asserts a single-line `error[E_...]: ...` message and the given exit code.
fn assert_error(o: &Output, code: i32, prefix: &str) {
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(code), "stderr: {err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{prefix}]: ")), "{err}");
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut onecad::config::RunConfig)) -> String {
    let mut c = onecad::config::RunConfig::desk();
    c.dataset = onecad::config::DatasetSpec::Shapes { n_train: 32, n_test: 8, side: 80, seed: 1 };
    c.log_every = 1;
    edit(&mut c);
    let path = dir.join("run.toml");
    std::fs::write(&path, c.to_toml().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn capacity_prints_the_headline_numbers() {
    let out = stdout(&onecad(&["capacity"]));
    assert_eq!(out, "capacity\t141167095653376\nlabel_pixels\t2560\none_hot_params\t40960000000\t4.096e10\n");
    let out = stdout(&onecad(&["capacity", "--n-patches", "20"]));
    assert!(out.contains("label_pixels\t5120\n"));
    assert!(out.starts_with("capacity\t19928148895209409152340197376\n"));
    let out = stdout(&onecad(&["capacity", "--n-patches", "1", "--alphabet-size", "1", "--features", "1", "--classes", "1"]));
    assert!(out.starts_with("capacity\t1\n"));
}

#[test]
fn train_smoke_then_eval_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |_| {});
    let out = dir.path().join("run");
    let o = onecad(&["train", "--config", &cfg, "--epochs", "1", "--out", out.to_str().unwrap()]);
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(summary["last_loss"].as_f64() < summary["first_loss"].as_f64());
    let ckpt = out.join("checkpoints/epoch-0001.ocad");
    assert!(ckpt.exists());
    assert_eq!(std::fs::read_to_string(out.join("checkpoints/latest")).unwrap().trim(), "epoch-0001.ocad");
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,epoch,loss,lr,fw,ftc,fc\n"));
    assert!(metrics.lines().count() >= 3, "{metrics}");
    let echoed = onecad::config::RunConfig::load(out.join("config.toml")).unwrap();
    assert_eq!(echoed.epochs, 1);

    let eval_dir = dir.path().join("eval");
    let o = onecad(&["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["n"], 8);
    let again = onecad(&["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()]);
    assert_eq!(stdout(&again), stdout(&o));
    assert!(std::fs::read_to_string(eval_dir.join("eval.csv")).unwrap().contains("#summary"));

    let data = dir.path().join("data");
    stdout(&onecad(&["dataset", "gen", "--n", "2", "--out", data.to_str().unwrap()]));
    let o = onecad(&["infer", "--checkpoint", ckpt.to_str().unwrap(), "--image", data.join("00000.pgm").to_str().unwrap()]);
    let pred: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(pred["cells"].as_array().unwrap().len(), 6);
}

#[test]
fn zero_epochs_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |c| c.epochs = 2);
    let out = dir.path().join("run");
    let o = onecad(&["train", "--config", &cfg, "--epochs", "0", "--out", out.to_str().unwrap()]);
    stdout(&o);
    assert!(out.join("checkpoints/epoch-0000.ocad").exists());
    assert_eq!(std::fs::read_to_string(out.join("metrics.csv")).unwrap(), "step,epoch,loss,lr,fw,ftc,fc\n");
    let o = onecad(&["train", "--config", &cfg, "--resume", "--out", out.to_str().unwrap()]);
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["epochs_run"], 2);
    assert!(out.join("checkpoints/epoch-0002.ocad").exists());
}

#[test]
fn config_errors_exit_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |c| c.model.seq_len = 529);
    let out = dir.path().join("run");
    let o = onecad(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_error(&o, 3, "E_CONFIG_MISMATCH");
    assert!(!out.join("metrics.csv").exists());

    assert_error(&onecad(&["train", "--preset", "huge"]), 3, "E_INVALID_CONFIG");
    let o = onecad(&["inspect", "--vocab-size", "10", "--label-cells", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn io_and_data_errors_are_single_lines() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ocad");
    let o = onecad(&["infer", "--checkpoint", missing.to_str().unwrap(), "--image", "x.pgm"]);
    assert_error(&o, 5, "E_IO");

    let bad = dir.path().join("bad.ocad");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = onecad(&["infer", "--checkpoint", bad.to_str().unwrap(), "--image", "x.pgm"]);
    assert_error(&o, 6, "E_CHECKPOINT");

    let vocab = dir.path().join("vocab.txt");
    std::fs::write(&vocab, "triangles\ntriangle\n").unwrap();
    let o = onecad(&["inspect", "--vocab-file", vocab.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_error(&o, 4, "E_DATASET");

    assert_eq!(onecad(&["train", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn compose_preview_writes_three_canvas_sized_images() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    stdout(&onecad(&["dataset", "gen", "--n", "1", "--out", data.to_str().unwrap()]));
    let out = dir.path().join("preview");
    let o = onecad(&["compose-preview", "--image", data.join("00000.pgm").to_str().unwrap(), "--label", "circle", "--out", out.to_str().unwrap()]);
    assert_eq!(stdout(&o).lines().count(), 3);
    let layout = onecad::canvas::CanvasLayout::desk();
    let masked_ids = onecad::canvas::label_row_patches(&layout);
    let mut images = Vec::new();
    for name in ["composed", "masked", "target"] {
        let img: onecad::Image32 = onecad::pnm::read(out.join(format!("{name}.pgm"))).unwrap();
        assert_eq!((img.height, img.width), (128, 128));
        images.push(img);
    }
    let in_masked = |y: usize, x: usize| masked_ids.contains(&((y / 16) * 8 + x / 16));
    for y in 0..128 {
        for x in 0..128 {
            let (c, m, t) = (images[0].get(y, x, 0), images[1].get(y, x, 0), images[2].get(y, x, 0));
            if in_masked(y, x) {
                assert_eq!((m, t), (0.0, c));
            } else {
                assert_eq!((m, t), (c, 0.0));
            }
        }
    }
    assert!(images[2].pixels.iter().any(|&p| p > 0.5), "label ink missing from target");
}

#[test]
fn dataset_gen_writes_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    stdout(&onecad(&["dataset", "gen", "--n", "5", "--seed", "3", "--side", "20", "--out", dir.path().to_str().unwrap()]));
    let sidecar = std::fs::read_to_string(dir.path().join("labels.tsv")).unwrap();
    let labels: Vec<&str> = sidecar.lines().map(|l| l.split('\t').nth(1).unwrap()).collect();
    assert_eq!(labels, ["square", "circle", "triangle", "cross", "square"]);
    let img: onecad::Image32 = onecad::pnm::read(dir.path().join("00004.pgm")).unwrap();
    assert_eq!((img.height, img.width), (20, 20));
}

#[test]
fn f64_precision_trains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |_| {});
    let out = dir.path().join("run");
    let o = onecad(&["train", "--config", &cfg, "--epochs", "1", "--precision", "f64", "--out", out.to_str().unwrap()]);
    stdout(&o);
    let echoed = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echoed.contains("precision = \"f64\""));
}
