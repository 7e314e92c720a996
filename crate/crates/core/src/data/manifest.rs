//! Line-delimited JSON item catalogue. Blank lines and lines starting with
//! `#` are ignored.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ManifestError, Result};
use crate::retrieval::{QueryAttributes, View};

/// Overrides the directory relative feature paths are resolved against.
pub const DATA_ROOT_ENV: &str = "GRNET_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Gallery,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
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
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub role: Role,
    pub identity: String,
    pub path: PathBuf,
    #[serde(default)]
    pub view: View,
    #[serde(default)]
    pub occluded: bool,
    #[serde(default)]
    pub cropped: bool,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl ManifestRecord {
    pub fn attributes(&self) -> QueryAttributes {
        QueryAttributes {
            view: self.view,
            occluded: self.occluded,
            cropped: self.cropped,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

pub fn parse_records(text: &str) -> Result<Vec<ManifestRecord>, ManifestError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| ManifestError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn to_jsonl(records: &[ManifestRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialise"));
        out.push('\n');
    }
    out
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>, root: impl Into<PathBuf>) -> Self {
        Manifest {
            records,
            root: root.into(),
        }
    }

    /// Reads `path`; the root is `$GRNET_DATA_ROOT` when set, else the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = parse_records(&text)?;
        let root = match std::env::var_os(DATA_ROOT_ENV) {
            Some(r) if !r.is_empty() => PathBuf::from(r),
            _ => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        Ok(Manifest { records, root })
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.root.join(&record.path)
        }
    }

    /// Checks id uniqueness, optionally file presence, and that every
    /// identity of the training split has a query and a gallery record.
    pub fn validate(&self, check_files: bool) -> Result<(), ManifestError> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(ManifestError::DuplicateId(r.id.clone()));
            }
        }
        if check_files {
            for r in &self.records {
                let p = self.resolve(r);
                if !p.is_file() {
                    return Err(ManifestError::DanglingPath {
                        id: r.id.clone(),
                        path: p,
                    });
                }
            }
        }
        let mut roles: BTreeMap<&str, (bool, bool)> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.split == Split::Train) {
            let e = roles.entry(r.identity.as_str()).or_default();
            match r.role {
                Role::Query => e.0 = true,
                Role::Gallery => e.1 = true,
            }
        }
        for (identity, (q, g)) in roles {
            if !(q && g) {
                return Err(ManifestError::IncompleteIdentity {
                    identity: identity.to_string(),
                    split: Split::Train.to_string(),
                    missing: if q { "gallery" } else { "query" },
                });
            }
        }
        Ok(())
    }
}
