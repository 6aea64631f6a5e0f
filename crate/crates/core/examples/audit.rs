//! Flags declared ratings against model votes, prints the summary and the
//! review queues, and tabulates removal rates by download bucket.

use crvl::audit::{audit_report, deletion_rates, metrics, DEFAULT_BUCKET_EDGES};
use crvl::head::{majority_vote, PredictionRecord};
use crvl::manifest::Dataset;
use crvl::rng::derive_rng;
use crvl::synth::{gen_dataset, DataSpec};
use crvl::ContentRating;
use rand::Rng;

fn main() -> crvl::Result<()> {
    let dir = std::env::temp_dir().join("crvl-audit-example");
    gen_dataset(&DataSpec { n_apps: 300, ..DataSpec::default() }, &dir)?;
    let data = Dataset::open(&dir)?;

    // Stand-in votes: the declared rating, shifted now and then.
    let mut rng = derive_rng(5, &[]);
    let preds: Vec<PredictionRecord> = data
        .records
        .iter()
        .map(|r| {
            let votes: Vec<ContentRating> = (0..r.image_paths().count())
                .map(|_| {
                    let shift = [-2, -1, 0, 0, 0, 0, 1, 2][rng.random_range(0..8)];
                    ContentRating::from_clamped(r.declared.ordinal() as i32 + shift)
                })
                .collect();
            PredictionRecord {
                app_id: r.app_id.clone(),
                declared: r.declared,
                majority: majority_vote(&votes).expect("every app has an icon"),
                votes,
            }
        })
        .collect();

    let report = audit_report(&preds, 2);
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    println!("malpractice queue (severity >= 2): {}", report.malpractice_queue.len());
    for row in report.malpractice_queue.iter().take(3) {
        println!("  {} declared {} voted {}", row.app_id, row.declared.as_str(), row.majority.as_str());
    }
    println!("disguise queue (severity >= 2): {}", report.disguise_queue.len());
    let m = metrics(&report.confusion)?;
    println!("accuracy {:.3}, macro F1 {:.3}", m.accuracy, m.macro_avg.f1);
    print!("{}", deletion_rates(&preds, &data.records, &DEFAULT_BUCKET_EDGES)?.to_csv());
    Ok(())
}
