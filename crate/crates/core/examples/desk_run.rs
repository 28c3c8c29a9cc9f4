//! Trains the desk configuration in memory and prints per-epoch timing,
//! loss and test accuracy.
//!
//! `cargo run --release -p onecad --example desk_run -- [seed] [epochs] [max_lr] [batch]`
//!
//! Environment overrides: `ENC_DIM`, `DEC_DIM`, `DEC_DEPTH`, `POS=learned`, `LOSS=full`,
//! `WD`, `MIN_LR`, and `SUBSET=n` to train and score on the first `n` training samples.

use std::time::Instant;

use onecad::config::RunConfig;
use onecad::glyphfont::GlyphFont;
use onecad::train::{evaluate, Datasets, Trainer};

fn main() -> onecad::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let mut config = RunConfig::desk();
    config.seed = arg(0, 0.0) as u64;
    config.epochs = arg(1, config.epochs as f64) as usize;
    config.schedule.max_lr = arg(2, config.schedule.max_lr);
    config.batch_size = arg(3, config.batch_size as f64) as usize;
    let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<f64>().ok());
    if let Some(d) = env("DEC_DIM") {
        config.model.decoder_dim = d as usize;
    }
    if let Some(d) = env("DEC_DEPTH") {
        config.model.decoder_depth = d as usize;
    }
    if let Some(d) = env("ENC_DIM") {
        config.model.encoder_dim = d as usize;
    }
    if std::env::var("POS").is_ok_and(|v| v == "learned") {
        config.model.pos_embedding = onecad::mae::PosEmbedding::Learned;
    }
    if std::env::var("LOSS").is_ok_and(|v| v == "full") {
        config.loss_scope = onecad::nn::LossScope::Full;
    }
    if let Some(w) = env("WD") {
        config.optimizer.weight_decay = w;
    }
    if let Some(w) = env("MIN_LR") {
        config.schedule.min_lr = w;
    }
    let font = GlyphFont::builtin();
    let mut data = Datasets::<f32>::load(&config.dataset, font, config.layout.label_cells)?;
    if let Some(n) = env("SUBSET") {
        data.train.truncate(n as usize);
        data.test = data.train.clone();
    }
    let mut trainer = Trainer::new(config, data.train.len(), font)?;
    eprintln!("params {}", trainer.model.param_count());
    let start = Instant::now();
    while trainer.epoch < trainer.config.epochs {
        let stats = trainer.run_epoch(&data.train, font, |_, _, _| Ok(()))?;
        let mean = stats.iter().map(|s| s.loss).sum::<f64>() / stats.len() as f64;
        let c = &trainer.config;
        let r = evaluate(&trainer.model, &data.test, &c.layout, font, c.brightness, c.batch_size)?;
        println!(
            "epoch {:3} step {:5} t {:7.1}s loss {:.5} lr {:.2e} test fw {:.3} ftc {:.3} fc {:.3}",
            trainer.epoch,
            trainer.global_step,
            start.elapsed().as_secs_f64(),
            mean,
            stats.last().map_or(0.0, |s| s.lr),
            r.fw,
            r.ftc,
            r.fc
        );
    }
    let c = &trainer.config;
    let r = evaluate(&trainer.model, &data.test, &c.layout, font, c.brightness, c.batch_size)?;
    for p in r.pairs.iter().filter(|p| !p.fw) {
        println!("miss: predicted {:?} for {:?}", p.predicted, p.label);
    }
    Ok(())
}
