//! On-disk layout: one JSON file per episode plus `manifest.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Episode, EpisodeKind};
use crate::error::{Error, Result};
use crate::fault::ErrorKind;
use crate::sim::{EnvMode, TaskId};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct EpisodeFile {
    schema_version: u32,
    #[serde(flatten)]
    episode: Episode,
}

#[derive(Serialize)]
struct EpisodeFileRef<'a> {
    schema_version: u32,
    #[serde(flatten)]
    episode: &'a Episode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub episode_id: String,
    pub task_id: TaskId,
    pub env_mode: EnvMode,
    pub kind: EpisodeKind,
    pub error_type: Option<ErrorKind>,
    pub frames: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub count: usize,
    pub episodes: Vec<ManifestEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            count: 0,
            episodes: Vec::new(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_name(episode_id: &str) -> String {
    format!("{episode_id}.json")
}

pub fn encode_episode(episode: &Episode) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec(&EpisodeFileRef {
        schema_version: SCHEMA_VERSION,
        episode,
    })
    .map_err(|e| Error::Integrity(format!("serializing {}: {e}", episode.episode_id)))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn parse_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    }
}

pub fn decode_episode(path: &Path, bytes: &[u8]) -> Result<Episode> {
    // Check the version before the full decode so a future schema reports a
    // version error rather than a field error.
    let head: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| parse_error(path, e))?;
    let found = head.get("schema_version").and_then(|v| v.as_u64());
    match found {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: v as u32,
                expected: SCHEMA_VERSION,
            })
        }
        None => return Err(Error::validation("schema_version", format!("missing in {}", path.display()))),
    }
    let file: EpisodeFile = serde_json::from_value(head).map_err(|e| parse_error(path, e))?;
    file.episode.validate()?;
    Ok(file.episode)
}

/// Decodes a schema-versioned JSON document such as a model checkpoint.
pub fn decode_versioned<T: serde::de::DeserializeOwned>(path: &Path, bytes: &[u8], expected: u32) -> Result<T> {
    let head: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| parse_error(path, e))?;
    match head.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == expected as u64 => serde_json::from_value(head).map_err(|e| parse_error(path, e)),
        Some(v) => Err(Error::Version {
            path: path.to_path_buf(),
            found: v as u32,
            expected,
        }),
        None => Err(Error::validation("schema_version", format!("missing in {}", path.display()))),
    }
}

pub fn read_episode(path: impl AsRef<Path>) -> Result<Episode> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_episode(path, &bytes)
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::storage(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::storage(&tmp, e))?;
    f.sync_all().map_err(|e| Error::storage(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::storage(path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    if !path.exists() {
        return Ok(Manifest::default());
    }
    let bytes = fs::read(&path).map_err(|e| Error::storage(&path, e))?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| parse_error(&path, e))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::Version {
            path,
            found: m.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(m)
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(m).map_err(|e| Error::Integrity(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(&dir.join(MANIFEST), &bytes)
}

fn put_episode(dir: &Path, episode: &Episode, manifest: &mut Manifest) -> Result<PathBuf> {
    episode.validate()?;
    let bytes = encode_episode(episode)?;
    let name = file_name(&episode.episode_id);
    let path = dir.join(&name);
    write_atomic(&path, &bytes)?;
    let entry = ManifestEntry {
        file: name,
        episode_id: episode.episode_id.clone(),
        task_id: episode.task_id,
        env_mode: episode.env_mode,
        kind: episode.kind,
        error_type: episode.error_type,
        frames: episode.frames.len(),
        sha256: sha256_hex(&bytes),
    };
    match manifest.episodes.iter_mut().find(|e| e.episode_id == entry.episode_id) {
        Some(slot) => *slot = entry,
        None => manifest.episodes.push(entry),
    }
    manifest.count = manifest.episodes.len();
    Ok(path)
}

/// Writes one episode and updates the manifest.
pub fn write_episode(episode: &Episode, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut manifest = read_manifest(dir)?;
    let path = put_episode(dir, episode, &mut manifest)?;
    write_manifest(dir, &manifest)?;
    Ok(path)
}

/// Writes a batch of episodes with a single manifest update. Creates `dir`
/// if needed.
pub fn write_episodes(episodes: &[Episode], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    let mut manifest = read_manifest(dir)?;
    let mut paths = Vec::with_capacity(episodes.len());
    for ep in episodes {
        paths.push(put_episode(dir, ep, &mut manifest)?);
    }
    write_manifest(dir, &manifest)?;
    Ok(paths)
}

/// Reads every manifest-listed episode, verifying checksums, in manifest order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<Episode>> {
    let dir = dir.as_ref();
    if !dir.join(MANIFEST).exists() {
        return Err(Error::storage(
            dir.join(MANIFEST),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no manifest"),
        ));
    }
    let manifest = read_manifest(dir)?;
    manifest
        .episodes
        .iter()
        .map(|entry| {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::storage(&path, e))?;
            if sha256_hex(&bytes) != entry.sha256 {
                return Err(Error::Integrity(format!("checksum mismatch for {}", entry.file)));
            }
            decode_episode(&path, &bytes)
        })
        .collect()
}
