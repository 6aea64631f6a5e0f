//! One end-to-end run on a fresh train/test split, printing held-out
//! accuracy, subset accuracies and stage timings as JSON.
//!
//! Usage: `cargo run --example experiment -- [n_train] [n_test] [epochs] [pretrain_steps] [seed]`

use crvl::experiment::{run_experiment, ExperimentConfig};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> crvl::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let base = ExperimentConfig::default();
    let mut cfg = base.with_seed(arg(5, 42) as u64);
    cfg.data.n_apps = arg(1, 400);
    cfg.n_test = arg(2, 100);
    cfg.train.epochs = arg(3, 6);
    cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(cfg.train.epochs / 3);
    cfg.pretrain.steps = arg(4, 500);
    let dir = std::env::temp_dir().join(format!(
        "crvl-experiment-{}-{}-{}",
        cfg.data.n_apps, cfg.n_test, cfg.data.seed
    ));
    let report = run_experiment(&cfg, &dir)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
