//! Ranks the words each image patch attends to in the first fusion layer
//! of a freshly initialised model and writes heatmaps for the top words of
//! a patch region.
//!
//! Usage: `cargo run --example attention_viz -- [app_index]`

use candle_core::DType;
use crvl::head::inference_tokens;
use crvl::manifest::Dataset;
use crvl::model::{AttentionSide, Model, ModelConfig};
use crvl::nn::ParamStore;
use crvl::synth::{gen_dataset, DataSpec};
use crvl::viz::{export_heatmap, region_top_tokens, top_tokens_per_patch, AttentionMap, PatchRegion, StopList};

fn main() -> crvl::Result<()> {
    let index: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let dir = std::env::temp_dir().join("crvl-viz-example");
    gen_dataset(&DataSpec { n_apps: 8, ..DataSpec::default() }, &dir)?;
    let data = Dataset::open(&dir)?;
    let rec = &data.records[index.min(data.records.len() - 1)];

    let cfg = ModelConfig::default();
    let mut store = ParamStore::new(DType::F32);
    let model = Model::new(&cfg, &mut store, 42)?;
    let icon = data.load_image(&rec.icon)?;
    let tokens = inference_tokens(rec)?;
    let attn = AttentionMap::from_tensor(&model.extract_attention(&icon, &tokens, 0, AttentionSide::ImageToText)?)?;

    let stop = StopList::standard();
    println!("{}: {}", rec.app_id, rec.description);
    for (p, ranked) in top_tokens_per_patch(&attn, &tokens, &stop, 3, 0)?.iter().enumerate().take(4) {
        let words: Vec<String> = ranked.iter().map(|t| format!("{} {:.3}", t.token, t.weight)).collect();
        println!("patch {p}: {}", words.join(", "));
    }

    let grid = cfg.image_size / cfg.patch;
    let region = PatchRegion::new([27, 28, 35, 36], grid)?;
    let out = dir.join("heatmaps");
    std::fs::create_dir_all(&out).map_err(|e| crvl::Error::io(&out, e))?;
    for t in region_top_tokens(&attn, &region, &tokens, &stop, 5, 0)? {
        let path = out.join(format!("{}_{}.ppm", t.position, t.token));
        export_heatmap(&icon, &attn, t.position, 0, cfg.patch, &path)?;
        println!("region word {:<12} {:.4} -> {}", t.token, t.weight, path.display());
    }
    Ok(())
}
