//! Evaluation and audit of predicted ratings against declared ones:
//! confusion matrix, precision/recall/F1, malpractice and disguise flags,
//! review queues, and removal rates by download bucket.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::PredictionRecord;
use crate::manifest::AppRecord;
use crate::rating::{rating_distance, ContentRating};

const K: usize = ContentRating::COUNT;

/// Counts indexed `[declared][predicted]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; K]; K],
}

impl ConfusionMatrix {
    pub fn add(&mut self, declared: ContentRating, predicted: ContentRating) {
        self.counts[declared.ordinal()][predicted.ordinal()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..K).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion(preds: &[PredictionRecord]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for p in preds {
        cm.add(p.declared, p.majority);
    }
    cm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub rating: ContentRating,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted mean over classes with support.
    pub macro_avg: Averages,
    /// Support-weighted mean.
    pub weighted_avg: Averages,
}

/// Precision of a never-predicted class is 0; classes without support are
/// left out of both averages.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Invalid("no samples".into()));
    }
    let mut per_class = Vec::with_capacity(K);
    for (c, rating) in ContentRating::ALL.into_iter().enumerate() {
        let tp = cm.counts[c][c] as f64;
        let support: u64 = cm.counts[c].iter().sum();
        let predicted: u64 = (0..K).map(|r| cm.counts[r][c]).sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            rating,
            precision,
            recall,
            f1,
            support,
        });
    }
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let n = present.len() as f64;
    let macro_avg = Averages {
        precision: present.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: present.iter().map(|m| m.recall).sum::<f64>() / n,
        f1: present.iter().map(|m| m.f1).sum::<f64>() / n,
    };
    let w = |f: fn(&ClassMetrics) -> f64| present.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64;
    let weighted_avg = Averages {
        precision: w(|m| m.precision),
        recall: w(|m| m.recall),
        f1: w(|m| m.f1),
    };
    Ok(Metrics {
        accuracy: cm.trace() as f64 / total as f64,
        per_class,
        macro_avg,
        weighted_avg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FlagKind {
    Correct,
    PotentialMalpractice,
    PotentialDisguise,
}

impl FlagKind {
    pub const ALL: [FlagKind; 3] = [FlagKind::Correct, FlagKind::PotentialMalpractice, FlagKind::PotentialDisguise];

    pub fn as_str(self) -> &'static str {
        match self {
            FlagKind::Correct => "correct",
            FlagKind::PotentialMalpractice => "malpractice",
            FlagKind::PotentialDisguise => "disguise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFlag {
    pub kind: FlagKind,
    pub severity: u8,
}

/// Predicted above declared is a potential malpractice, below a potential
/// disguise; the severity is the distance on the scale.
pub fn flag(pred: ContentRating, declared: ContentRating) -> AuditFlag {
    let d = rating_distance(pred, declared);
    let kind = match d.signum() {
        1 => FlagKind::PotentialMalpractice,
        -1 => FlagKind::PotentialDisguise,
        _ => FlagKind::Correct,
    };
    AuditFlag {
        kind,
        severity: d.unsigned_abs() as u8,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRow {
    pub app_id: String,
    pub declared: ContentRating,
    pub majority: ContentRating,
    pub flag: FlagKind,
    pub severity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub total: usize,
    pub correct: usize,
    pub malpractice: usize,
    pub disguise: usize,
    pub correct_pct: f64,
    pub malpractice_pct: f64,
    pub disguise_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub min_severity: u8,
    pub summary: AuditSummary,
    pub rows: Vec<AuditRow>,
    /// Malpractices with severity at least `min_severity`, most severe first.
    pub malpractice_queue: Vec<AuditRow>,
    /// Disguises with severity at least `min_severity`, most severe first.
    pub disguise_queue: Vec<AuditRow>,
    pub confusion: ConfusionMatrix,
    /// Absent when there are no predictions.
    pub metrics: Option<Metrics>,
}

fn pct(n: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * n as f64 / total as f64
    }
}

pub fn audit_report(preds: &[PredictionRecord], min_severity: u8) -> AuditReport {
    let rows: Vec<AuditRow> = preds
        .iter()
        .map(|p| {
            let f = flag(p.majority, p.declared);
            AuditRow {
                app_id: p.app_id.clone(),
                declared: p.declared,
                majority: p.majority,
                flag: f.kind,
                severity: f.severity,
            }
        })
        .collect();
    let count = |k: FlagKind| rows.iter().filter(|r| r.flag == k).count();
    let (correct, malpractice, disguise) = (
        count(FlagKind::Correct),
        count(FlagKind::PotentialMalpractice),
        count(FlagKind::PotentialDisguise),
    );
    let queue = |k: FlagKind| {
        let mut q: Vec<AuditRow> = rows
            .iter()
            .filter(|r| r.flag == k && r.severity >= min_severity)
            .cloned()
            .collect();
        q.sort_by(|a, b| b.severity.cmp(&a.severity).then_with(|| a.app_id.cmp(&b.app_id)));
        q
    };
    let cm = confusion(preds);
    AuditReport {
        min_severity,
        summary: AuditSummary {
            total: rows.len(),
            correct,
            malpractice,
            disguise,
            correct_pct: pct(correct, rows.len()),
            malpractice_pct: pct(malpractice, rows.len()),
            disguise_pct: pct(disguise, rows.len()),
        },
        malpractice_queue: queue(FlagKind::PotentialMalpractice),
        disguise_queue: queue(FlagKind::PotentialDisguise),
        rows,
        metrics: metrics(&cm).ok(),
        confusion: cm,
    }
}

/// Left-closed download buckets `[0,100) [100,10k) [10k,100k) [100k,1M) [1M,inf)`.
pub const DEFAULT_BUCKET_EDGES: [u64; 4] = [100, 10_000, 100_000, 1_000_000];

/// Index of the bucket holding `downloads` for the given interior edges.
pub fn bucket_of(downloads: u64, edges: &[u64]) -> usize {
    edges.iter().take_while(|&&e| downloads >= e).count()
}

pub fn bucket_label(i: usize, edges: &[u64]) -> String {
    let lo = if i == 0 { 0 } else { edges[i - 1] };
    match edges.get(i) {
        Some(hi) => format!("[{lo},{hi})"),
        None => format!("[{lo},inf)"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletionCell {
    pub flag: FlagKind,
    pub bucket: String,
    pub lo: u64,
    /// Exclusive upper edge; absent for the open top bucket.
    pub hi: Option<u64>,
    pub apps: usize,
    pub removed: usize,
    /// Percentage removed; absent for empty cells.
    pub rate_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletionTable {
    pub edges: Vec<u64>,
    pub cells: Vec<DeletionCell>,
    /// Apps left out for having fewer than two snapshots.
    pub skipped: usize,
    /// Predictions with no matching app record.
    pub unmatched: usize,
}

impl DeletionTable {
    pub fn cell(&self, flag: FlagKind, bucket: usize) -> &DeletionCell {
        &self.cells[FlagKind::ALL.iter().position(|&f| f == flag).expect("known flag") * (self.edges.len() + 1) + bucket]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("flag,downloads_from,downloads_below,apps,removed,rate_pct\n");
        for c in &self.cells {
            let rate = c.rate_pct.map(|r| format!("{r:.4}")).unwrap_or_default();
            let hi = c.hi.map(|h| h.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{},{}\n", c.flag.as_str(), c.lo, hi, c.apps, c.removed, rate));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Removal rate per flag kind and download bucket. An app counts as removed
/// when its last snapshot is not alive.
pub fn deletion_rates(preds: &[PredictionRecord], apps: &[AppRecord], edges: &[u64]) -> Result<DeletionTable> {
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid(format!("bucket edges {edges:?} are not strictly increasing")));
    }
    let index: std::collections::HashMap<&str, &AppRecord> = apps.iter().map(|a| (a.app_id.as_str(), a)).collect();
    let n_buckets = edges.len() + 1;
    let mut apps_n = vec![0usize; FlagKind::ALL.len() * n_buckets];
    let mut removed = vec![0usize; FlagKind::ALL.len() * n_buckets];
    let (mut skipped, mut unmatched) = (0, 0);
    for p in preds {
        let Some(app) = index.get(p.app_id.as_str()) else {
            unmatched += 1;
            continue;
        };
        if app.snapshots.len() < 2 {
            skipped += 1;
            continue;
        }
        let last = app.snapshots.iter().max_by_key(|s| s.ts).expect("two snapshots");
        let kind = flag(p.majority, p.declared).kind;
        let k = FlagKind::ALL.iter().position(|&f| f == kind).expect("known flag");
        let cell = k * n_buckets + bucket_of(app.downloads, edges);
        apps_n[cell] += 1;
        removed[cell] += usize::from(!last.alive);
    }
    if skipped > 0 {
        log::warn!("{skipped} apps with fewer than two snapshots skipped");
    }
    let mut cells = Vec::with_capacity(apps_n.len());
    for (k, &kind) in FlagKind::ALL.iter().enumerate() {
        for b in 0..n_buckets {
            let i = k * n_buckets + b;
            cells.push(DeletionCell {
                flag: kind,
                bucket: bucket_label(b, edges),
                lo: if b == 0 { 0 } else { edges[b - 1] },
                hi: edges.get(b).copied(),
                apps: apps_n[i],
                removed: removed[i],
                rate_pct: (apps_n[i] > 0).then(|| 100.0 * removed[i] as f64 / apps_n[i] as f64),
            });
        }
    }
    Ok(DeletionTable {
        edges: edges.to_vec(),
        cells,
        skipped,
        unmatched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Snapshot;
    use ContentRating::*;

    fn pred(id: &str, declared: ContentRating, majority: ContentRating) -> PredictionRecord {
        PredictionRecord {
            app_id: id.into(),
            declared,
            votes: vec![majority],
            majority,
        }
    }

    #[test]
    fn flag_examples() {
        assert_eq!(flag(M, G), AuditFlag { kind: FlagKind::PotentialMalpractice, severity: 2 });
        assert_eq!(flag(G, R18), AuditFlag { kind: FlagKind::PotentialDisguise, severity: 4 });
        assert_eq!(flag(PG, PG), AuditFlag { kind: FlagKind::Correct, severity: 0 });
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion(&[]).total(), 0);
        let cm = confusion(&[pred("a", G, G), pred("b", G, G), pred("c", G, G)]);
        assert_eq!(cm.counts[0][0], 3);
        assert_eq!(cm.total(), 3);
        assert!(metrics(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn diagonal_matrix_is_perfect() {
        let mut cm = ConfusionMatrix::default();
        for (i, n) in [3, 0, 5, 1, 2].into_iter().enumerate() {
            cm.counts[i][i] = n;
        }
        let m = metrics(&cm).unwrap();
        assert_eq!(m.accuracy, 1.0);
        for a in [m.macro_avg, m.weighted_avg] {
            assert_eq!((a.precision, a.recall, a.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn never_predicted_class_has_zero_precision() {
        let mut cm = ConfusionMatrix::default();
        cm.counts[0][0] = 2;
        cm.counts[1][0] = 2;
        let m = metrics(&cm).unwrap();
        assert_eq!(m.per_class[1].precision, 0.0);
        assert_eq!(m.per_class[1].f1, 0.0);
        assert_eq!(m.per_class[0].precision, 0.5);
        assert_eq!(m.macro_avg.recall, 0.5);
    }

    #[test]
    fn report_queues_are_filtered_and_ordered() {
        let preds = [
            pred("b", G, R18),
            pred("a", G, MA15),
            pred("c", PG, M),
            pred("d", R18, G),
            pred("e", MA15, PG),
            pred("f", M, M),
            pred("g", G, M),
        ];
        let r = audit_report(&preds, 2);
        let ids = |q: &[AuditRow]| q.iter().map(|r| r.app_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&r.malpractice_queue), ["b", "a", "g"]);
        assert_eq!(ids(&r.disguise_queue), ["d", "e"]);
        assert_eq!(r.summary.malpractice + r.summary.disguise + r.summary.correct, 7);
        let all_ok = audit_report(&[pred("x", M, M)], 2);
        assert!(all_ok.malpractice_queue.is_empty() && all_ok.disguise_queue.is_empty());
        assert_eq!(all_ok.summary.correct_pct, 100.0);
    }

    fn app(id: &str, downloads: u64, alive: &[bool]) -> AppRecord {
        AppRecord {
            app_id: id.into(),
            declared: G,
            icon: String::new(),
            screenshots: vec![],
            description: String::new(),
            downloads,
            snapshots: alive
                .iter()
                .enumerate()
                .map(|(i, &alive)| Snapshot { ts: i as i64 * 100, alive })
                .collect(),
            latent: None,
            tags: Default::default(),
        }
    }

    #[test]
    fn deletion_rates_by_bucket() {
        assert_eq!(bucket_of(99, &DEFAULT_BUCKET_EDGES), 0);
        assert_eq!(bucket_of(100, &DEFAULT_BUCKET_EDGES), 1);
        assert_eq!(bucket_of(5_000_000, &DEFAULT_BUCKET_EDGES), 4);
        let apps = vec![
            app("a", 500, &[true, false]),
            app("b", 600, &[true, true]),
            app("c", 700, &[true, false]),
            app("d", 800, &[true, true, true]),
            app("e", 50, &[true]),
        ];
        let preds: Vec<_> = ["a", "b", "c", "d", "e"].iter().map(|id| pred(id, G, M)).collect();
        let t = deletion_rates(&preds, &apps, &DEFAULT_BUCKET_EDGES).unwrap();
        let cell = t.cell(FlagKind::PotentialMalpractice, 1);
        assert_eq!((cell.apps, cell.removed, cell.rate_pct), (4, 2, Some(50.0)));
        assert_eq!(t.skipped, 1);
        assert_eq!(t.cell(FlagKind::Correct, 1).rate_pct, None);
        let csv = t.to_csv();
        assert!(csv.lines().any(|l| l == "malpractice,100,10000,4,2,50.0000"), "{csv}");
        assert!(csv.lines().any(|l| l == "disguise,1000000,,0,0,"), "{csv}");
        assert_eq!(csv.lines().count(), 1 + 3 * 5);
    }
}
