//! CSV dataset manifest: `path,score,type,level,source_id`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};

pub const HEADER: [&str; 5] = ["path", "score", "type", "level", "source_id"];

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct Record {
    /// Image path, relative to the manifest directory unless absolute.
    pub path: String,
    pub score: f64,
    #[serde(rename = "type")]
    pub kind: String,
    pub level: usize,
    pub source_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory that relative record paths resolve against.
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>) -> Result<Self> {
        let m = Self {
            root: root.into(),
            records,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Sorted distinct source ids.
    pub fn source_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.records.iter().map(|r| r.source_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.score).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.path.as_str()) {
                return Err(Error::format("manifest", format!("duplicate path {}", r.path)));
            }
            if !r.score.is_finite() {
                return Err(Error::format("manifest", format!("non-finite score for {}", r.path)));
            }
        }
        Ok(())
    }

    /// Keep only records whose source id satisfies `keep`.
    pub fn filter_sources(&self, keep: impl Fn(usize) -> bool) -> Self {
        Self {
            root: self.root.clone(),
            records: self.records.iter().filter(|r| keep(r.source_id)).cloned().collect(),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if header != HEADER {
            return Err(Error::format(
                "manifest",
                format!("{}: expected header {}, found {}", path.display(), HEADER.join(","), header.join(",")),
            ));
        }
        let records = rdr.deserialize().collect::<std::result::Result<Vec<Record>, _>>()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(root, records)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(HEADER)?;
        for r in &self.records {
            w.write_record([
                r.path.clone(),
                format!("{:.10}", r.score),
                r.kind.clone(),
                r.level.to_string(),
                r.source_id.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
