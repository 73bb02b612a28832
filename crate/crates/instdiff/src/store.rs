//! Durable session store and content-addressed image files.
//!
//! `sessions.db` holds the JSON of every session followed by a
//! little-endian crc32 of that JSON; it is rewritten atomically after each
//! change. Images live in `images/<sha256>.png`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use instdiff_core::layout::LayoutSpec;
use instdiff_core::sampler::SampleOptions;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionDiff {
    pub instance: usize,
    pub caption: String,
    pub mean_abs_diff: f64,
}

/// Mean absolute byte difference against the previous revision, inside
/// each instance region of the new layout and on the remaining pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffStats {
    pub overall: f64,
    pub outside_regions: f64,
    pub regions: Vec<RegionDiff>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Revision {
    pub revision: usize,
    pub layout: LayoutSpec,
    pub image: String,
    pub created_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diff: Option<DiffStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    /// Fixed at creation; every revision reuses it.
    pub seed: u64,
    pub sampler: SampleOptions,
    pub history: Vec<Revision>,
}

#[derive(Serialize, Deserialize)]
struct StoreFile {
    version: u32,
    sessions: Vec<Session>,
}

pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub struct SessionStore {
    dir: PathBuf,
    /// Per-session locks serialise revision appends.
    locks: Mutex<BTreeMap<String, Arc<tokio::sync::Mutex<()>>>>,
    /// Committed state, persisted as a whole.
    sessions: Mutex<BTreeMap<String, Session>>,
    write: Mutex<()>,
}

impl SessionStore {
    /// Opens or creates the store under `dir`. A store whose checksum does
    /// not match is an error, never silently reset.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(dir.join("images"))?;
        let started = Instant::now();
        let path = dir.join("sessions.db");
        let mut sessions = BTreeMap::new();
        if path.exists() {
            let buf = std::fs::read(&path)?;
            if buf.len() < 4 {
                return Err(Error::Store(format!("{} is truncated", path.display())));
            }
            let (body, tail) = buf.split_at(buf.len() - 4);
            if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
                return Err(Error::Store(format!("{} checksum mismatch", path.display())));
            }
            let file: StoreFile =
                serde_json::from_slice(body).map_err(|e| Error::Store(format!("{}: {e}", path.display())))?;
            for s in file.sessions {
                sessions.insert(s.id.clone(), s);
            }
        }
        tracing::info!(
            "loaded {} sessions from {} in {:.1} ms",
            sessions.len(),
            dir.display(),
            started.elapsed().as_secs_f64() * 1e3
        );
        Ok(Self {
            dir,
            locks: Mutex::new(BTreeMap::new()),
            sessions: Mutex::new(sessions),
            write: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &str) -> Option<Session> {
        self.sessions.lock().unwrap().get(id).cloned()
    }

    pub fn lock_for(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.locks.lock().unwrap().entry(id.to_string()).or_default().clone()
    }

    /// Inserts or replaces `s` and persists the store.
    pub fn commit(&self, s: Session) -> Result<()> {
        self.sessions.lock().unwrap().insert(s.id.clone(), s);
        self.persist()
    }

    fn persist(&self) -> Result<()> {
        let _w = self.write.lock().unwrap();
        let file = StoreFile {
            version: 1,
            sessions: self.sessions.lock().unwrap().values().cloned().collect(),
        };
        let mut bytes = serde_json::to_vec(&file).expect("sessions serialize");
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        write_atomic(&self.dir.join("sessions.db"), &bytes)
    }

    pub fn image_path(&self, hash: &str) -> Option<PathBuf> {
        let ok = hash.len() == 64 && hash.bytes().all(|b| b.is_ascii_hexdigit());
        ok.then(|| self.dir.join("images").join(format!("{hash}.png")))
    }

    /// Stores PNG bytes under their sha256 and returns the hash.
    pub fn put_image(&self, png: &[u8]) -> Result<String> {
        let hash = sha256_hex(png);
        let path = self.image_path(&hash).expect("valid hash");
        if !path.exists() {
            write_atomic(&path, png)?;
        }
        Ok(hash)
    }

    pub fn read_image(&self, hash: &str) -> Option<Vec<u8>> {
        std::fs::read(self.image_path(hash)?).ok()
    }
}
