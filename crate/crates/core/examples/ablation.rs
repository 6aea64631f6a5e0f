//! Trains the full model and its ablations (no style encoder, no cross
//! attention, symmetric cross-entropy instead of the sigmoid loss) on a
//! reduced corpus over several seeds and prints the subset accuracies.
//!
//! Usage: `cargo run --example ablation -- [n_train] [n_test] [epochs] [pretrain_steps] [seeds...]`

use crvl::experiment::{mean_over_seeds, run_ablation, ExperimentConfig, Variant};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> crvl::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (n_train, n_test, epochs, steps) = (arg(1, 600), arg(2, 200), arg(3, 10), arg(4, 500));
    let mut seeds: Vec<u64> = std::env::args().skip(5).filter_map(|s| s.parse().ok()).collect();
    if seeds.is_empty() {
        seeds = vec![41, 42, 43];
    }
    let mut cfg = ExperimentConfig::default();
    cfg.data.n_apps = n_train;
    cfg.n_test = n_test;
    cfg.train.epochs = epochs;
    cfg.train.warmup_epochs = 10.min(epochs / 3);
    cfg.pretrain.steps = steps;
    let dir = std::env::temp_dir().join(format!("crvl-ablation-{n_train}-{n_test}"));
    let runs = run_ablation(&cfg, &seeds, &Variant::ALL, &dir)?;

    println!("{:<20} {:>8} {:>8} {:>8}", "variant", "all", "style", "fusion");
    for v in Variant::ALL {
        let all = mean_over_seeds(&runs, v, |r| Some(r.accuracy));
        let style = mean_over_seeds(&runs, v, |r| r.style_critical.accuracy);
        let fusion = mean_over_seeds(&runs, v, |r| r.fusion_critical.accuracy);
        let f = |x: Option<f64>| x.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
        println!("{:<20} {:>8} {:>8} {:>8}", format!("{v:?}"), f(all), f(style), f(fusion));
    }
    Ok(())
}
