//! Append-only probe result store.
//!
//! `records.jsonl` holds one [`ProbeRecord`] per line and is the source of
//! truth. `index.tsv` maps `backend<TAB>image_id` to the byte offset of the
//! record's line. A record is appended (and synced) before its index entry,
//! so after a crash the index may lag the log but never leads it; opening the
//! store re-indexes any unindexed tail and drops a torn final line.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

use super::ProbeRecord;
use crate::fsutil::LockFile;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const INDEX_FILE: &str = "index.tsv";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("store {path} is locked by another writer")]
    Locked { path: PathBuf },
    #[error("corrupt record at byte {offset} of {path}: {message}")]
    Corrupt { path: PathBuf, offset: u64, message: String },
    #[error("store opened read-only")]
    ReadOnly,
}

type Key = (String, String);

struct Writer {
    records: File,
    index: File,
    end: u64,
    sync: bool,
}

struct Inner {
    records: Vec<ProbeRecord>,
    by_key: HashMap<Key, usize>,
    writer: Option<Writer>,
}

pub struct ProbeStore {
    dir: PathBuf,
    inner: Mutex<Inner>,
    _lock: Option<LockFile>,
}

/// What [`ProbeStore::open`] had to repair.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Recovery {
    /// Bytes of a torn final line that were truncated.
    pub truncated_bytes: u64,
    /// Records present in the log but missing from the index.
    pub reindexed: usize,
    /// Later lines whose key was already present (first one wins).
    pub duplicates: usize,
}

impl ProbeStore {
    /// Opens (creating if needed) a writable store and takes its lock.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        Ok(Self::open_with(dir, true)?.0)
    }

    /// Like [`open`](Self::open), also reporting recovery work.
    pub fn open_with(dir: &Path, sync: bool) -> Result<(Self, Recovery), StoreError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| StoreError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let lock_path = dir.join(LOCK_FILE);
        let lock = LockFile::acquire(&lock_path).map_err(|e| {
            if e.kind() == io::ErrorKind::WouldBlock {
                StoreError::Locked {
                    path: dir.to_path_buf(),
                }
            } else {
                StoreError::Io {
                    path: lock_path.clone(),
                    source: e,
                }
            }
        })?;
        let rec_path = dir.join(RECORDS_FILE);
        let idx_path = dir.join(INDEX_FILE);
        let mut recovery = Recovery::default();

        let mut records_file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&rec_path)
            .map_err(io(&rec_path))?;
        let (records, offsets, valid_len, duplicates) = scan(&mut records_file, &rec_path)?;
        recovery.duplicates = duplicates;
        let file_len = records_file.metadata().map_err(io(&rec_path))?.len();
        if valid_len < file_len {
            log::warn!("truncating {} torn bytes at end of {}", file_len - valid_len, rec_path.display());
            records_file.set_len(valid_len).map_err(io(&rec_path))?;
            recovery.truncated_bytes = file_len - valid_len;
        }

        let indexed = read_index(&idx_path)?;
        let mut index_file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&idx_path)
            .map_err(io(&idx_path))?;
        let mut by_key = HashMap::new();
        for (i, rec) in records.iter().enumerate() {
            let key = (rec.backend.clone(), rec.image_id.clone());
            by_key.insert(key.clone(), i);
            if indexed.get(&key) != Some(&offsets[i]) {
                writeln!(index_file, "{}\t{}\t{}", key.0, key.1, offsets[i]).map_err(io(&idx_path))?;
                recovery.reindexed += 1;
            }
        }
        if recovery.reindexed > 0 {
            index_file.sync_data().map_err(io(&idx_path))?;
        }
        let store = ProbeStore {
            dir: dir.to_path_buf(),
            inner: Mutex::new(Inner {
                records,
                by_key,
                writer: Some(Writer {
                    records: records_file,
                    index: index_file,
                    end: valid_len,
                    sync,
                }),
            }),
            _lock: Some(lock),
        };
        Ok((store, recovery))
    }

    /// Opens an existing store for reading without taking the writer lock.
    /// A torn final line is ignored rather than truncated.
    pub fn open_read_only(dir: &Path) -> Result<Self, StoreError> {
        let rec_path = dir.join(RECORDS_FILE);
        let mut f = File::open(&rec_path).map_err(|source| StoreError::Io {
            path: rec_path.clone(),
            source,
        })?;
        let (records, _, _, _) = scan(&mut f, &rec_path)?;
        let by_key = records
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.backend.clone(), r.image_id.clone()), i))
            .collect();
        Ok(ProbeStore {
            dir: dir.to_path_buf(),
            inner: Mutex::new(Inner {
                records,
                by_key,
                writer: None,
            }),
            _lock: None,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn get(&self, backend: &str, image_id: &str) -> Option<ProbeRecord> {
        let inner = self.inner.lock().expect("store lock");
        inner
            .by_key
            .get(&(backend.to_string(), image_id.to_string()))
            .map(|&i| inner.records[i].clone())
    }

    /// Appends `rec` unless its key is already stored (then this is a no-op).
    /// The line is flushed, and synced when the store was opened with `sync`,
    /// before the index entry is written.
    pub fn append(&self, rec: &ProbeRecord) -> Result<(), StoreError> {
        let mut inner = self.inner.lock().expect("store lock");
        let key = (rec.backend.clone(), rec.image_id.clone());
        if inner.by_key.contains_key(&key) {
            return Ok(());
        }
        let mut stored = rec.clone();
        stored.from_cache = false;
        let mut line = serde_json::to_string(&stored).expect("record serializes");
        line.push('\n');
        let rec_path = self.dir.join(RECORDS_FILE);
        let idx_path = self.dir.join(INDEX_FILE);
        let w = inner.writer.as_mut().ok_or(StoreError::ReadOnly)?;
        let offset = w.end;
        let io = |path: &PathBuf| {
            let path = path.clone();
            move |source| StoreError::Io { path, source }
        };
        w.records.write_all(line.as_bytes()).map_err(io(&rec_path))?;
        w.records.flush().map_err(io(&rec_path))?;
        if w.sync {
            w.records.sync_data().map_err(io(&rec_path))?;
        }
        w.end += line.len() as u64;
        writeln!(w.index, "{}\t{}\t{}", key.0, key.1, offset).map_err(io(&idx_path))?;
        let n = inner.records.len();
        inner.records.push(stored);
        inner.by_key.insert(key, n);
        Ok(())
    }

    /// All records in append order.
    pub fn records(&self) -> Vec<ProbeRecord> {
        self.inner.lock().expect("store lock").records.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("store lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// SHA-256 of the record log, for run metadata.
    pub fn digest(&self) -> Result<String, StoreError> {
        let path = self.dir.join(RECORDS_FILE);
        let _guard = self.inner.lock().expect("store lock");
        crate::fsutil::sha256_file(&path).map_err(|source| StoreError::Io { path, source })
    }
}

/// Parses complete lines. Returns records (first occurrence per key), their
/// byte offsets, the length of the valid prefix and the duplicate count.
/// Only the final line may be torn; a malformed line elsewhere is corruption.
fn scan(f: &mut File, path: &Path) -> Result<(Vec<ProbeRecord>, Vec<u64>, u64, usize), StoreError> {
    let io = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    f.seek(SeekFrom::Start(0)).map_err(io)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(io)?;
    let mut records = Vec::new();
    let mut offsets = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut duplicates = 0;
    let mut pos = 0usize;
    while pos < bytes.len() {
        let Some(nl) = bytes[pos..].iter().position(|b| *b == b'\n') else {
            break;
        };
        let line = &bytes[pos..pos + nl];
        match serde_json::from_slice::<ProbeRecord>(line) {
            Ok(rec) => {
                if seen.insert((rec.backend.clone(), rec.image_id.clone())) {
                    records.push(rec);
                    offsets.push(pos as u64);
                } else {
                    duplicates += 1;
                }
            }
            Err(e) if pos + nl + 1 == bytes.len() => {
                log::warn!("ignoring unparsable final line of {}: {e}", path.display());
                break;
            }
            Err(e) => {
                return Err(StoreError::Corrupt {
                    path: path.to_path_buf(),
                    offset: pos as u64,
                    message: e.to_string(),
                })
            }
        }
        pos += nl + 1;
    }
    Ok((records, offsets, pos as u64, duplicates))
}

fn read_index(path: &Path) -> Result<HashMap<Key, u64>, StoreError> {
    let mut out = HashMap::new();
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
        Err(source) => {
            return Err(StoreError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut parts = line.split('\t');
        if let (Some(b), Some(d), Some(o)) = (parts.next(), parts.next(), parts.next()) {
            if let Ok(o) = o.parse() {
                out.entry((b.to_string(), d.to_string())).or_insert(o);
            }
        }
    }
    Ok(out)
}
