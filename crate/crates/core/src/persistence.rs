//! Durable per-user snapshots and the evicted-segment archive.
//!
//! Layout under a data directory:
//!
//! ```text
//! <data_dir>/<user_id>/memory.json    latest snapshot, replaced atomically
//! <data_dir>/<user_id>/archive.jsonl  evicted segments, one per line
//! ```
//!
//! Snapshots are written to a temporary file in the same directory, synced,
//! and renamed over the old one, so a reader sees either the previous or the
//! new complete file.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::memory::{is_valid_user_id, UserMemory};
use crate::model::{IdGenerator, PersonaStore, Segment, Timestamp};
use crate::mtm::MidTermMemory;
use crate::stm::ShortTermMemory;

pub const SNAPSHOT_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[1];

pub const SNAPSHOT_FILE: &str = "memory.json";
pub const ARCHIVE_FILE: &str = "archive.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub version: u32,
    pub user_id: String,
    pub ids: IdGenerator,
    pub stm: ShortTermMemory,
    pub mtm: MidTermMemory,
    pub persona: PersonaStore,
    pub saved_at: Timestamp,
}

impl MemorySnapshot {
    pub fn capture(memory: &UserMemory, saved_at: Timestamp) -> Self {
        Self {
            version: SNAPSHOT_VERSION,
            user_id: memory.user_id.clone(),
            ids: memory.ids.clone(),
            stm: memory.stm.clone(),
            mtm: memory.mtm.clone(),
            persona: memory.persona.clone(),
            saved_at,
        }
    }

    pub fn into_memory(self) -> UserMemory {
        UserMemory {
            user_id: self.user_id,
            ids: self.ids,
            stm: self.stm,
            mtm: self.mtm,
            persona: self.persona,
        }
    }

    /// Canonical byte form: pretty JSON in declaration order plus a trailing newline.
    pub fn to_canonical_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("snapshot serializes");
        bytes.push(b'\n');
        bytes
    }
}

fn user_dir(data_dir: &Path, user_id: &str) -> Result<PathBuf> {
    if !is_valid_user_id(user_id) {
        return Err(Error::InvalidArgument(format!("invalid user id `{user_id}`")));
    }
    Ok(data_dir.join(user_id))
}

pub fn snapshot_path(data_dir: &Path, user_id: &str) -> Result<PathBuf> {
    Ok(user_dir(data_dir, user_id)?.join(SNAPSHOT_FILE))
}

pub fn archive_path(data_dir: &Path, user_id: &str) -> Result<PathBuf> {
    Ok(user_dir(data_dir, user_id)?.join(ARCHIVE_FILE))
}

/// Atomically write `snapshot` to `<data_dir>/<user_id>/memory.json`.
pub fn save(snapshot: &MemorySnapshot, data_dir: &Path) -> Result<PathBuf> {
    let dir = user_dir(data_dir, &snapshot.user_id)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let target = dir.join(SNAPSHOT_FILE);

    let mut tmp = tempfile::Builder::new()
        .prefix(".memory.json.")
        .suffix(".tmp")
        .tempfile_in(&dir)
        .map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(&snapshot.to_canonical_json()).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(&target).map_err(|e| Error::io(&target, e.error))?;
    // Make the rename itself durable.
    if let Ok(d) = fs::File::open(&dir) {
        let _ = d.sync_all();
    }
    Ok(target)
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

fn parse_error(path: &Path, e: &serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Read and validate a snapshot file.
///
/// Pass `config` to additionally check embedding dimensions and trait-schema
/// closure against the running configuration.
pub fn load_with(path: &Path, config: Option<&Config>) -> Result<MemorySnapshot> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::NotFound(format!("snapshot {}", path.display())))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let probe: VersionProbe = serde_json::from_slice(&bytes).map_err(|e| parse_error(path, &e))?;
    if !SUPPORTED_VERSIONS.contains(&probe.version) {
        return Err(Error::UnsupportedVersion { found: probe.version, supported: SUPPORTED_VERSIONS });
    }
    let snapshot: MemorySnapshot =
        serde_json::from_slice(&bytes).map_err(|e| parse_error(path, &e))?;
    let user = snapshot.user_id.clone();
    let memory = snapshot.clone().into_memory();
    memory.check_invariants(config)?;
    if let Some(dir_name) = path.parent().and_then(Path::file_name) {
        if dir_name.to_str() != Some(user.as_str()) {
            tracing::warn!(path = %path.display(), user = %user, "snapshot user id differs from its directory");
        }
    }
    Ok(snapshot)
}

pub fn load(path: &Path) -> Result<MemorySnapshot> {
    load_with(path, None)
}

/// Append `segment` as one JSON line to the user's archive.
pub fn archive_segment(segment: &Segment, data_dir: &Path, user_id: &str) -> Result<PathBuf> {
    if segment.pages.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "segment {} has no pages and cannot be archived",
            segment.id
        )));
    }
    let dir = user_dir(data_dir, user_id)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(ARCHIVE_FILE);
    let mut line = serde_json::to_vec(segment).expect("segment serializes");
    line.push(b'\n');
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    file.write_all(&line).map_err(|e| Error::io(&path, e))?;
    file.sync_data().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// All archived segments, oldest first. A missing archive reads as empty.
pub fn read_archive(data_dir: &Path, user_id: &str) -> Result<Vec<Segment>> {
    let path = archive_path(data_dir, user_id)?;
    let file = match fs::File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(&path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let seg = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.clone(),
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        out.push(seg);
    }
    Ok(out)
}

/// Remove everything stored for `user_id`. Returns whether anything existed.
pub fn wipe(data_dir: &Path, user_id: &str) -> Result<bool> {
    let dir = user_dir(data_dir, user_id)?;
    match fs::remove_dir_all(&dir) {
        Ok(()) => Ok(true),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(&dir, e)),
    }
}
