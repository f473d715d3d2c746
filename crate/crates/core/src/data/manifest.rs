use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown split {s:?}; expected train, val or test")))
    }
}

/// One manifest line. `path` is relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub path: String,
    pub label: u8,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, root: PathBuf) -> Result<Self> {
        let mut ids = HashSet::new();
        for r in &rows {
            if r.label > 1 {
                return Err(Error::Data(format!(
                    "label {} of {:?} is not in {{0, 1}}",
                    r.label, r.id
                )));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate manifest id {:?}", r.id)));
            }
        }
        Ok(Self { rows, root })
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        let p = Path::new(&row.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Positive and negative counts of a split.
    pub fn counts(&self, split: Split) -> (usize, usize) {
        let pos = self.split(split).filter(|r| r.label == 1).count();
        (pos, self.split(split).count() - pos)
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.split(split).map(|r| r.id.clone()).collect()
    }
}

/// Parse a manifest and check that every referenced file exists.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "path", "label", "split"] {
        return Err(Error::Data(format!(
            "{}: manifest header must be id,path,label,split, found {:?}",
            path.display(),
            headers
        )));
    }
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = Manifest::new(rows, root)?;
    for r in &m.rows {
        let p = m.resolve(r);
        if !p.is_file() {
            return Err(Error::Data(format!(
                "manifest entry {:?} points to missing file {}",
                r.id,
                p.display()
            )));
        }
    }
    Ok(m)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    if rows.is_empty() {
        std::fs::write(path, "id,path,label,split\n").map_err(|e| Error::io(path, e))?;
        return Ok(());
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
