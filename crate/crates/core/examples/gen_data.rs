//! Generates a small synthetic corpus and prints a few records.
//!
//! Usage: `cargo run --example gen_data -- [n_apps] [out_dir]`

use crvl::manifest::{Dataset, Tag};
use crvl::synth::{gen_dataset, DataSpec};

fn main() -> crvl::Result<()> {
    let n_apps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let dir = std::env::args()
        .nth(2)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("crvl-gen-data-example"));
    let spec = DataSpec {
        n_apps,
        ..DataSpec::default()
    };
    gen_dataset(&spec, &dir)?;
    let data = Dataset::open(&dir)?;
    let mut per_class = [0usize; 5];
    for r in &data.records {
        per_class[r.declared.ordinal()] += 1;
    }
    println!("{} apps in {}", data.records.len(), dir.display());
    println!("per declared rating: {per_class:?}");
    for r in data.records.iter().take(3) {
        let tags: Vec<&str> = [(Tag::StyleCritical, "style"), (Tag::FusionCritical, "fusion")]
            .into_iter()
            .filter(|(t, _)| r.has_tag(*t))
            .map(|(_, s)| s)
            .collect();
        println!("{} {} images={} tags={:?}", r.app_id, r.declared.as_str(), r.image_paths().count(), tags);
        println!("  {}", r.description);
    }
    Ok(())
}
