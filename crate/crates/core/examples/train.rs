//! Generates a small synthetic corpus, pretrains the text encoder, trains
//! the contrastive model for a few epochs and prints the loss curve.
//!
//! Usage: `cargo run --example train -- [n_apps] [epochs] [pretrain_steps]`

use crvl::manifest::Dataset;
use crvl::model::ModelConfig;
use crvl::synth::{gen_dataset, DataSpec};
use crvl::trainer::{pretrain_text, FitOptions, PairSource, PretrainConfig, TrainConfig, Trainer};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> crvl::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let n_apps = arg(1, 256);
    let epochs = arg(2, 3);
    let steps = arg(3, 200);
    let dir = std::env::temp_dir().join(format!("crvl-train-example-{n_apps}"));
    let spec = DataSpec {
        n_apps,
        ..DataSpec::default()
    };
    gen_dataset(&spec, &dir)?;
    let data = Dataset::open(&dir)?;

    let model_cfg = ModelConfig::default();
    let pre = PretrainConfig {
        steps,
        ..PretrainConfig::default()
    };
    let (text, report) = pretrain_text(&model_cfg, &data.records, &pre)?;
    println!(
        "text pretraining: loss {:.3} -> {:.3} in {:.1}s",
        report.first_loss.unwrap_or(f64::NAN),
        report.last_loss.unwrap_or(f64::NAN),
        report.seconds
    );

    let cfg = TrainConfig {
        epochs,
        warmup_epochs: 1.min(epochs.saturating_sub(1)),
        ..TrainConfig::default()
    };
    let src = PairSource::load(&data)?;
    let mut trainer = Trainer::new(&model_cfg, &cfg, Some(&text))?;
    let fit = trainer.fit(&src, &FitOptions::default())?;
    for (epoch, loss) in &fit.epoch_losses {
        println!("epoch {epoch}: mean loss {loss:.5}");
    }
    println!(
        "{} pairs, {} steps in {:.1}s ({:.3}s/step)",
        src.len(),
        fit.steps,
        fit.seconds,
        fit.seconds / fit.steps.max(1) as f64
    );
    Ok(())
}
