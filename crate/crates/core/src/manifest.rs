//! JSON Lines dataset manifest.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::rating::ContentRating;
use crate::synth::LatentFactors;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub ts: i64,
    pub alive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    StyleCritical,
    FusionCritical,
}

/// One app: declared rating, creatives, description and market history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppRecord {
    pub app_id: String,
    pub declared: ContentRating,
    pub icon: String,
    #[serde(default)]
    pub screenshots: Vec<String>,
    pub description: String,
    pub downloads: u64,
    #[serde(default)]
    pub snapshots: Vec<Snapshot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<LatentFactors>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub tags: BTreeSet<Tag>,
}

impl AppRecord {
    /// Icon first, then screenshots in manifest order.
    pub fn image_paths(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.icon.as_str()).chain(self.screenshots.iter().map(String::as_str))
    }

    pub fn has_tag(&self, tag: Tag) -> bool {
        self.tags.contains(&tag)
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<AppRecord>> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AppRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: line_no,
            msg: e.to_string(),
        })?;
        if !seen.insert(rec.app_id.clone()) {
            return Err(Error::Manifest {
                line: line_no,
                msg: format!("duplicate app_id {:?}", rec.app_id),
            });
        }
        if rec.snapshots.windows(2).any(|w| w[0].ts > w[1].ts) {
            return Err(Error::Manifest {
                line: line_no,
                msg: "snapshots are not sorted by timestamp".into(),
            });
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn read_manifest(path: &Path) -> Result<Vec<AppRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn write_manifest(path: &Path, records: &[AppRecord]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A manifest together with the directory its relative image paths resolve against.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<AppRecord>,
}

impl Dataset {
    /// Opens `<dir>/manifest.jsonl`, or `dir` itself when it names a file.
    pub fn open(dir: &Path) -> Result<Self> {
        let (root, manifest) = if dir.is_file() {
            (
                dir.parent().map(Path::to_path_buf).unwrap_or_default(),
                dir.to_path_buf(),
            )
        } else {
            (dir.to_path_buf(), dir.join(MANIFEST_FILE))
        };
        Ok(Self {
            records: read_manifest(&manifest)?,
            root,
        })
    }

    pub fn load_image(&self, rel: &str) -> Result<ImageBuffer> {
        ImageBuffer::read_ppm(&self.root.join(rel))
    }

    pub fn load_images(&self, rec: &AppRecord) -> Result<Vec<ImageBuffer>> {
        rec.image_paths().map(|p| self.load_image(p)).collect()
    }

    pub fn find(&self, app_id: &str) -> Option<&AppRecord> {
        self.records.iter().find(|r| r.app_id == app_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"app_id":"a1","declared":"MA15+","icon":"images/a1_0.ppm","screenshots":[],"description":"Fun for adults.","downloads":120,"snapshots":[{"ts":0,"alive":true},{"ts":10,"alive":false}]}"#;

    #[test]
    fn empty_manifest_is_empty() {
        assert!(parse_manifest("").unwrap().is_empty());
    }

    #[test]
    fn parses_single_record() {
        let recs = parse_manifest(LINE).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].declared.ordinal(), 3);
        assert!(recs[0].latent.is_none());
    }

    #[test]
    fn errors_name_the_line() {
        let text = format!("{LINE}\n{{not json");
        match parse_manifest(&text) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let bad_rating = LINE.replace("MA15+", "PEGI18");
        let err = parse_manifest(&bad_rating).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("PEGI18"), "{err}");
    }

    #[test]
    fn rejects_duplicates_and_unsorted_snapshots() {
        let dup = format!("{LINE}\n{LINE}");
        assert!(matches!(parse_manifest(&dup), Err(Error::Manifest { line: 2, .. })));
        let unsorted = LINE.replace(r#""ts":10"#, r#""ts":-5"#);
        assert!(parse_manifest(&unsorted).is_err());
    }
}
