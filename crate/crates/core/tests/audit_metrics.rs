//! Flag taxonomy, audit report and classification metrics.

use crvl::audit::{audit_report, confusion, deletion_rates, flag, metrics, ConfusionMatrix, FlagKind};
use crvl::head::PredictionRecord;
use crvl::{rating_distance, ContentRating};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALL: [ContentRating; 5] = ContentRating::ALL;

fn record(i: usize, declared: ContentRating, majority: ContentRating) -> PredictionRecord {
    PredictionRecord {
        app_id: format!("app-{i}"),
        declared,
        votes: vec![majority],
        majority,
    }
}

fn random_records(n: usize, seed: u64) -> Vec<PredictionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| record(i, ALL[rng.random_range(0..5)], ALL[rng.random_range(0..5)]))
        .collect()
}

#[test]
fn flag_invariants_on_ten_thousand_pairs() {
    let preds = random_records(10_000, 77);
    let report = audit_report(&preds, 1);
    let s = &report.summary;
    assert_eq!(s.correct + s.malpractice + s.disguise, preds.len());
    assert_eq!(s.total, preds.len());

    let cm = confusion(&preds);
    let upper: u64 = (0..5).flat_map(|i| (i + 1..5).map(move |j| (i, j))).map(|(i, j)| cm.counts[i][j]).sum();
    let lower: u64 = (0..5).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| cm.counts[i][j]).sum();
    assert_eq!(s.malpractice as u64, upper);
    assert_eq!(s.disguise as u64, lower);
    assert_eq!(s.correct as u64, cm.trace());

    for (p, row) in preds.iter().zip(&report.rows) {
        let (d, m) = (p.declared.ordinal(), p.majority.ordinal());
        let expect = match m.cmp(&d) {
            std::cmp::Ordering::Greater => FlagKind::PotentialMalpractice,
            std::cmp::Ordering::Less => FlagKind::PotentialDisguise,
            std::cmp::Ordering::Equal => FlagKind::Correct,
        };
        assert_eq!(row.flag, expect);
        assert_eq!(row.severity as usize, d.abs_diff(m));
        if p.declared == ContentRating::G {
            assert_ne!(row.flag, FlagKind::PotentialDisguise);
        }
        if p.declared == ContentRating::R18 {
            assert_ne!(row.flag, FlagKind::PotentialMalpractice);
        }
    }
}

#[test]
fn flag_examples() {
    use ContentRating::*;
    let f = flag(M, G);
    assert_eq!((f.kind, f.severity), (FlagKind::PotentialMalpractice, 2));
    let f = flag(G, G);
    assert_eq!((f.kind, f.severity), (FlagKind::Correct, 0));
    let f = flag(G, R18);
    assert_eq!((f.kind, f.severity), (FlagKind::PotentialDisguise, 4));
    for a in ALL {
        for b in ALL {
            assert_eq!(rating_distance(a, b), -rating_distance(b, a));
            assert!(rating_distance(a, b).abs() <= 4);
        }
    }
}

#[test]
fn queues_hold_only_severe_flags_sorted_by_severity() {
    let preds = random_records(2_000, 5);
    for min in 1..=4 {
        let report = audit_report(&preds, min);
        for (queue, kind) in [
            (&report.malpractice_queue, FlagKind::PotentialMalpractice),
            (&report.disguise_queue, FlagKind::PotentialDisguise),
        ] {
            assert!(queue.iter().all(|r| r.flag == kind && r.severity >= min));
            assert!(queue.windows(2).all(|w| w[0].severity >= w[1].severity));
            let expected = report.rows.iter().filter(|r| r.flag == kind && r.severity >= min).count();
            assert_eq!(queue.len(), expected);
        }
    }
}

#[test]
fn two_class_fixture() {
    let mut cm = ConfusionMatrix::default();
    cm.counts[0][0] = 2;
    cm.counts[0][1] = 1;
    cm.counts[1][0] = 1;
    cm.counts[1][1] = 2;
    let m = metrics(&cm).unwrap();
    assert!((m.accuracy - 2.0 / 3.0).abs() <= 1e-12);
    for v in [m.macro_avg.precision, m.macro_avg.recall, m.macro_avg.f1] {
        assert!((v - 2.0 / 3.0).abs() <= 1e-12, "{v}");
    }
    for v in [m.weighted_avg.precision, m.weighted_avg.recall, m.weighted_avg.f1] {
        assert!((v - 2.0 / 3.0).abs() <= 1e-12, "{v}");
    }
}

#[test]
fn diagonal_matrix_scores_one_and_empty_matrix_is_an_error() {
    let mut cm = ConfusionMatrix::default();
    for (i, n) in [3, 1, 4, 1, 5].into_iter().enumerate() {
        cm.counts[i][i] = n;
    }
    let m = metrics(&cm).unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert_eq!((m.macro_avg.f1, m.weighted_avg.f1), (1.0, 1.0));
    assert!(metrics(&ConfusionMatrix::default()).is_err());
}

/// Precision, recall and F1 from the textbook formulas.
fn reference(cm: &ConfusionMatrix) -> (f64, f64, f64, f64) {
    let total = cm.total() as f64;
    let mut macro_f1 = 0.0;
    let mut weighted_f1 = 0.0;
    let mut weighted_recall = 0.0;
    let mut classes = 0.0;
    for c in 0..5 {
        let support: u64 = cm.counts[c].iter().sum();
        if support == 0 {
            continue;
        }
        let predicted: u64 = (0..5).map(|r| cm.counts[r][c]).sum();
        let tp = cm.counts[c][c] as f64;
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = tp / support as f64;
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        classes += 1.0;
        macro_f1 += f1;
        weighted_f1 += f1 * support as f64 / total;
        weighted_recall += r * support as f64 / total;
    }
    (cm.trace() as f64 / total, macro_f1 / classes, weighted_f1, weighted_recall)
}

#[test]
fn random_matrices_match_the_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..100 {
        let mut cm = ConfusionMatrix::default();
        for row in cm.counts.iter_mut() {
            for c in row.iter_mut() {
                *c = if rng.random_bool(0.2) { 0 } else { rng.random_range(0..50) };
            }
        }
        if cm.total() == 0 {
            cm.counts[0][0] = 1;
        }
        let m = metrics(&cm).unwrap();
        assert_eq!(m.accuracy, cm.trace() as f64 / cm.total() as f64);
        let (acc, macro_f1, weighted_f1, weighted_recall) = reference(&cm);
        assert_eq!(m.accuracy, acc);
        assert!((m.macro_avg.f1 - macro_f1).abs() <= 1e-12);
        assert!((m.weighted_avg.f1 - weighted_f1).abs() <= 1e-12);
        assert!((m.weighted_avg.recall - weighted_recall).abs() <= 1e-12);
        if (0..5).all(|c| cm.counts[c].iter().sum::<u64>() > 0) {
            assert!((m.weighted_avg.recall - m.accuracy).abs() <= 1e-12);
        }
    }
}

#[test]
fn confusion_counts_every_record() {
    for seed in 0..20 {
        let preds = random_records(seed as usize * 37, seed);
        let cm = confusion(&preds);
        assert_eq!(cm.total(), preds.len() as u64);
    }
    let preds: Vec<_> = (0..3).map(|i| record(i, ContentRating::G, ContentRating::G)).collect();
    let cm = confusion(&preds);
    assert_eq!(cm.counts[0][0], 3);
    assert_eq!(cm.total(), 3);
}

#[test]
fn deletion_rates_count_removed_apps_per_flag() {
    let dir = tempfile::tempdir().unwrap();
    let spec = crvl::synth::DataSpec {
        n_apps: 120,
        ..Default::default()
    };
    let records = crvl::synth::gen_dataset(&spec, dir.path()).unwrap();
    let preds = random_records(records.len(), 3)
        .into_iter()
        .zip(&records)
        .map(|(p, r)| record(0, r.declared, p.majority).with_id(&r.app_id))
        .collect::<Vec<_>>();
    let edges = [100, 10_000];
    let table = deletion_rates(&preds, &records, &edges).unwrap();
    let csv = table.to_csv();
    assert!(csv.lines().count() > 1);
    for kind in FlagKind::ALL {
        let mut apps = 0;
        for bucket in 0..=edges.len() {
            let cell = table.cell(kind, bucket);
            assert!(cell.removed <= cell.apps);
            apps += cell.apps;
        }
        let flagged = preds
            .iter()
            .zip(&records)
            .filter(|(p, r)| r.snapshots.len() >= 2 && flag(p.majority, p.declared).kind == kind)
            .count();
        assert_eq!(apps, flagged);
    }
    let counted: usize = table.cells.iter().map(|c| c.apps).sum();
    assert_eq!(counted + table.skipped + table.unmatched, preds.len());
}

trait WithId {
    fn with_id(self, id: &str) -> Self;
}

impl WithId for PredictionRecord {
    fn with_id(mut self, id: &str) -> Self {
        self.app_id = id.to_string();
        self
    }
}
