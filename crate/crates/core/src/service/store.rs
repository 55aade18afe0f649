//! Embedded transactional persistence for the registry, job tickets and
//! labeling candidates, plus append-only line files for results.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use redb::{Database, ReadableTable, TableDefinition};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::RECORD_VERSION;
use crate::error::{Error, ErrorCode, Result};

pub const MODELS: &str = "models";
pub const TICKETS: &str = "tickets";
pub const CANDIDATES: &str = "candidates";

fn table(name: &str) -> TableDefinition<'_, &'static str, &'static [u8]> {
    TableDefinition::new(name)
}

fn store_err(e: impl std::fmt::Display) -> Error {
    Error::new(ErrorCode::StoreError, e.to_string())
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    v: u32,
    record: T,
}

pub struct Store {
    db: Database,
}

impl Store {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display(), e))?;
        }
        let db = Database::create(path).map_err(store_err)?;
        let txn = db.begin_write().map_err(store_err)?;
        for name in [MODELS, TICKETS, CANDIDATES] {
            txn.open_table(table(name)).map_err(store_err)?;
        }
        txn.commit().map_err(store_err)?;
        Ok(Store { db })
    }

    pub fn put<T: Serialize>(&self, tbl: &str, key: &str, value: &T) -> Result<()> {
        let bytes = serde_json::to_vec(&Envelope {
            v: RECORD_VERSION,
            record: value,
        })
        .map_err(store_err)?;
        let txn = self.db.begin_write().map_err(store_err)?;
        {
            let mut t = txn.open_table(table(tbl)).map_err(store_err)?;
            t.insert(key, bytes.as_slice()).map_err(store_err)?;
        }
        txn.commit().map_err(store_err)
    }

    /// Writes `value` only if `key` is absent; returns whether it wrote.
    pub fn insert_new<T: Serialize>(&self, tbl: &str, key: &str, value: &T) -> Result<bool> {
        let bytes = serde_json::to_vec(&Envelope {
            v: RECORD_VERSION,
            record: value,
        })
        .map_err(store_err)?;
        let txn = self.db.begin_write().map_err(store_err)?;
        let wrote = {
            let mut t = txn.open_table(table(tbl)).map_err(store_err)?;
            if t.get(key).map_err(store_err)?.is_some() {
                false
            } else {
                t.insert(key, bytes.as_slice()).map_err(store_err)?;
                true
            }
        };
        txn.commit().map_err(store_err)?;
        Ok(wrote)
    }

    pub fn get<T: DeserializeOwned>(&self, tbl: &str, key: &str) -> Result<Option<T>> {
        let txn = self.db.begin_read().map_err(store_err)?;
        let t = txn.open_table(table(tbl)).map_err(store_err)?;
        match t.get(key).map_err(store_err)? {
            None => Ok(None),
            Some(v) => decode(v.value()).map(Some),
        }
    }

    pub fn all<T: DeserializeOwned>(&self, tbl: &str) -> Result<Vec<(String, T)>> {
        let txn = self.db.begin_read().map_err(store_err)?;
        let t = txn.open_table(table(tbl)).map_err(store_err)?;
        let mut out = Vec::new();
        for row in t.iter().map_err(store_err)? {
            let (k, v) = row.map_err(store_err)?;
            out.push((k.value().to_string(), decode(v.value())?));
        }
        Ok(out)
    }
}

fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let env: Envelope<T> = serde_json::from_slice(bytes).map_err(store_err)?;
    if env.v != RECORD_VERSION {
        return Err(store_err(format!("record version {} is not supported", env.v)));
    }
    Ok(env.record)
}

/// Append-only file of one JSON record per line.
pub struct LineLog {
    path: PathBuf,
    lock: Mutex<()>,
}

impl LineLog {
    pub fn new(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display(), e))?;
        }
        Ok(LineLog {
            path: path.to_path_buf(),
            lock: Mutex::new(()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<T: Serialize>(&self, record: &T) -> Result<()> {
        let mut line = serde_json::to_vec(record).map_err(|e| Error::io(self.path.display(), e))?;
        line.push(b'\n');
        let _g = self.lock.lock().expect("log lock");
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(self.path.display(), e))?;
        f.write_all(&line).map_err(|e| Error::io(self.path.display(), e))?;
        f.flush().map_err(|e| Error::io(self.path.display(), e))
    }

    pub fn read_all<T: DeserializeOwned>(&self) -> Result<Vec<T>> {
        let _g = self.lock.lock().expect("log lock");
        let f = match std::fs::File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(self.path.display(), e)),
        };
        let mut out = Vec::new();
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(self.path.display(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| Error::io(format!("{}:{}", self.path.display(), i + 1), e))?);
        }
        Ok(out)
    }

    /// Replaces the file contents atomically.
    pub fn rewrite<T: Serialize>(&self, records: &[T]) -> Result<()> {
        let _g = self.lock.lock().expect("log lock");
        let tmp = self.path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(tmp.display(), e))?;
            for r in records {
                let mut line = serde_json::to_vec(r).map_err(|e| Error::io(tmp.display(), e))?;
                line.push(b'\n');
                f.write_all(&line).map_err(|e| Error::io(tmp.display(), e))?;
            }
        }
        std::fs::rename(&tmp, &self.path).map_err(|e| Error::io(self.path.display(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_insert_new() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(&dir.path().join("db.redb")).unwrap();
        s.put(MODELS, "a", &vec![1, 2]).unwrap();
        assert_eq!(s.get::<Vec<i32>>(MODELS, "a").unwrap(), Some(vec![1, 2]));
        assert!(!s.insert_new(MODELS, "a", &vec![3]).unwrap());
        assert!(s.insert_new(MODELS, "b", &vec![3]).unwrap());
        assert_eq!(s.all::<Vec<i32>>(MODELS).unwrap().len(), 2);
        drop(s);
        let s = Store::open(&dir.path().join("db.redb")).unwrap();
        assert_eq!(s.get::<Vec<i32>>(MODELS, "b").unwrap(), Some(vec![3]));
    }

    #[test]
    fn line_log_appends_and_rewrites() {
        let dir = tempfile::tempdir().unwrap();
        let log = LineLog::new(&dir.path().join("x/out.jsonl")).unwrap();
        assert!(log.read_all::<u32>().unwrap().is_empty());
        log.append(&1u32).unwrap();
        log.append(&2u32).unwrap();
        assert_eq!(log.read_all::<u32>().unwrap(), vec![1, 2]);
        log.rewrite(&[5u32]).unwrap();
        assert_eq!(log.read_all::<u32>().unwrap(), vec![5]);
    }
}
