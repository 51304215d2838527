//! Append-only on-disk store for call records, trace rounds and reports.
//!
//! Layout: one subdirectory per record kind, two-character digest prefix
//! fan-out, one JSON file per record. Files are written to a temp name and
//! renamed into place, so a record is either fully present or absent.
//! Records are immutable: re-putting an identical payload is a no-op and
//! re-putting a different payload under the same key is an integrity error.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};
use thiserror::Error;

use crate::error::{Classify, ErrorClass};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record {key} already exists with a different payload")]
    Conflict { key: String },
    #[error("record {key} is corrupt: {detail}")]
    Corrupt { key: String, detail: String },
}

impl Classify for StoreError {
    fn class(&self) -> ErrorClass {
        match self {
            StoreError::Io { .. } => ErrorClass::Other,
            StoreError::Conflict { .. } | StoreError::Corrupt { .. } => ErrorClass::Integrity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Call,
    TraceRound,
    Report,
}

impl RecordKind {
    fn dir(self) -> &'static str {
        match self {
            RecordKind::Call => "calls",
            RecordKind::TraceRound => "trace_rounds",
            RecordKind::Report => "reports",
        }
    }

    pub const ALL: [RecordKind; 3] = [RecordKind::Call, RecordKind::TraceRound, RecordKind::Report];
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredRecord {
    pub kind: RecordKind,
    pub key: String,
    pub config_hash: String,
    pub written_at_ms: u64,
    pub payload: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreManifest {
    config_hash: String,
    created_at_ms: u64,
}

/// Handle on a store directory. Cheap to clone; writers to distinct keys
/// may run concurrently.
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
    config_hash: String,
}

impl RunStore {
    /// Opens (creating if needed) a store rooted at `root`. The manifest is
    /// written on first open and left untouched afterwards.
    pub fn open(root: impl Into<PathBuf>, config_hash: impl Into<String>) -> Result<Self, StoreError> {
        let root = root.into();
        let config_hash = config_hash.into();
        for kind in RecordKind::ALL {
            let dir = root.join(kind.dir());
            std::fs::create_dir_all(&dir).map_err(|source| StoreError::Io {
                path: dir.clone(),
                source,
            })?;
        }
        let manifest_path = root.join("manifest.json");
        if !manifest_path.exists() {
            let manifest = StoreManifest {
                config_hash: config_hash.clone(),
                created_at_ms: now_ms(),
            };
            write_atomic(
                &manifest_path,
                serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes(),
            )?;
        }
        Ok(Self { root, config_hash })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn record_path(&self, kind: RecordKind, key: &str) -> PathBuf {
        let prefix = if key.len() >= 2 { &key[..2] } else { "xx" };
        self.root.join(kind.dir()).join(prefix).join(format!("{key}.json"))
    }

    /// Stores a payload under `key`. Identical re-puts are no-ops;
    /// conflicting re-puts fail without touching the existing record.
    pub fn put(
        &self,
        kind: RecordKind,
        key: &str,
        payload: &serde_json::Value,
    ) -> Result<String, StoreError> {
        let path = self.record_path(kind, key);
        if path.exists() {
            let existing = self.read_record(&path, key)?;
            let same = serde_json::to_string(&existing.payload).expect("payload serializes")
                == serde_json::to_string(payload).expect("payload serializes");
            return if same {
                Ok(key.to_string())
            } else {
                Err(StoreError::Conflict { key: key.to_string() })
            };
        }
        let record = StoredRecord {
            kind,
            key: key.to_string(),
            config_hash: self.config_hash.clone(),
            written_at_ms: now_ms(),
            payload: payload.clone(),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| StoreError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        let body = serde_json::to_string(&record).expect("record serializes");
        write_atomic(&path, body.as_bytes())?;
        Ok(key.to_string())
    }

    pub fn get(&self, kind: RecordKind, key: &str) -> Result<Option<StoredRecord>, StoreError> {
        let path = self.record_path(kind, key);
        if !path.exists() {
            return Ok(None);
        }
        self.read_record(&path, key).map(Some)
    }

    fn read_record(&self, path: &Path, key: &str) -> Result<StoredRecord, StoreError> {
        let raw = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&raw).map_err(|e| StoreError::Corrupt {
            key: key.to_string(),
            detail: e.to_string(),
        })
    }

    /// Iterates all records of a kind in ascending key order. Corrupt
    /// records are yielded as errors carrying their key; iteration
    /// continues past them.
    pub fn scan(&self, kind: RecordKind) -> Result<ScanIter, StoreError> {
        let dir = self.root.join(kind.dir());
        let mut files: Vec<(String, PathBuf)> = Vec::new();
        for prefix_entry in read_dir_sorted(&dir)? {
            if !prefix_entry.is_dir() {
                continue;
            }
            for file in read_dir_sorted(&prefix_entry)? {
                if file.extension().map(|e| e == "json").unwrap_or(false) {
                    let key = file
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    files.push((key, file));
                }
            }
        }
        files.sort();
        Ok(ScanIter {
            store: self.clone(),
            files,
            next: 0,
        })
    }

    /// Record count per kind, for report summaries.
    pub fn count(&self, kind: RecordKind) -> Result<usize, StoreError> {
        Ok(self.scan(kind)?.count())
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut entries = Vec::new();
    let rd = std::fs::read_dir(dir).map_err(|source| StoreError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for entry in rd {
        let entry = entry.map_err(|source| StoreError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        entries.push(entry.path());
    }
    entries.sort();
    Ok(entries)
}

pub struct ScanIter {
    store: RunStore,
    files: Vec<(String, PathBuf)>,
    next: usize,
}

impl Iterator for ScanIter {
    type Item = Result<StoredRecord, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        let (key, path) = self.files.get(self.next)?.clone();
        self.next += 1;
        Some(self.store.read_record(&path, &key))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let io = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    {
        use std::io::Write;
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Derives a stable sub-seed from the run seed and a label path, so every
/// (item, condition) pair gets its own reproducible randomness.
pub fn derive_seed(run_seed: u64, parts: &[&str]) -> u64 {
    let mut all: Vec<&str> = vec!["seed"];
    let seed_str = run_seed.to_string();
    all.push(&seed_str);
    all.extend_from_slice(parts);
    let d = digest(&all);
    u64::from_str_radix(&d[..16], 16).unwrap_or(run_seed)
}

/// Hex SHA-256 digest of the given parts joined with unit separators, used
/// as record keys everywhere.
pub fn digest(parts: &[&str]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update([0x1f]);
        }
        hasher.update(part.as_bytes());
    }
    hex::encode(hasher.finalize())
}
