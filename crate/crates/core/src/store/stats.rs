use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::io::{read_dataset, read_manifest, MANIFEST};
use super::{Episode, EpisodeKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StatsReport {
    pub total: usize,
    pub by_kind: BTreeMap<String, usize>,
    pub by_task: BTreeMap<String, usize>,
    pub by_env_mode: BTreeMap<String, usize>,
    /// Counts per tested error type; an episode may list several.
    pub by_error: BTreeMap<String, usize>,
    /// Set when per-error counts add up to more than the recovery count.
    pub error_counts_exceed_recoveries: bool,
}

impl StatsReport {
    pub fn kind(&self, k: EpisodeKind) -> usize {
        self.by_kind.get(k.as_str()).copied().unwrap_or(0)
    }

    pub fn from_episodes<'a>(episodes: impl IntoIterator<Item = &'a Episode>) -> Self {
        let mut r = StatsReport::default();
        for k in EpisodeKind::ALL {
            r.by_kind.insert(k.as_str().to_string(), 0);
        }
        for ep in episodes {
            r.total += 1;
            *r.by_kind.entry(ep.kind.as_str().to_string()).or_default() += 1;
            *r.by_task.entry(ep.task_id.to_string()).or_default() += 1;
            *r.by_env_mode.entry(ep.env_mode.to_string()).or_default() += 1;
            for e in tested_errors(ep) {
                *r.by_error.entry(e).or_default() += 1;
            }
        }
        let error_sum: usize = r.by_error.values().sum();
        r.error_counts_exceed_recoveries = error_sum > r.kind(EpisodeKind::FailureRecovery);
        r
    }

    /// Plain-text table, one row per category.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:>8}", "category", "episodes");
        let _ = writeln!(s, "{:<28} {:>8}", "total", self.total);
        let sections: [(&str, &BTreeMap<String, usize>); 4] = [
            ("kind", &self.by_kind),
            ("task", &self.by_task),
            ("env", &self.by_env_mode),
            ("error", &self.by_error),
        ];
        for (name, m) in sections {
            for (k, v) in m {
                let _ = writeln!(s, "{:<28} {:>8}", format!("{name}/{k}"), v);
            }
        }
        if self.error_counts_exceed_recoveries {
            let _ = writeln!(
                s,
                "note: per-error counts exceed recovery episodes (episodes may cover several error types)"
            );
        }
        s
    }
}

fn tested_errors(ep: &Episode) -> Vec<String> {
    if let Some(list) = ep.provenance.get("tested_errors").and_then(|v| v.as_array()) {
        let set: BTreeSet<String> = list.iter().filter_map(|v| v.as_str().map(String::from)).collect();
        return set.into_iter().collect();
    }
    ep.error_type.map(|e| vec![e.to_string()]).unwrap_or_default()
}

/// Statistics for a dataset directory, after checking the manifest against
/// the episode files present.
pub fn dataset_stats(dir: impl AsRef<Path>) -> Result<StatsReport> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::storage(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    if !dir.join(MANIFEST).exists() {
        let stray = episode_files(dir)?;
        if !stray.is_empty() {
            return Err(Error::Integrity(format!("{} episode files but no manifest", stray.len())));
        }
        return Ok(StatsReport::from_episodes(&[]));
    }
    let manifest = read_manifest(dir)?;
    if manifest.count != manifest.episodes.len() {
        return Err(Error::Integrity(format!(
            "manifest count {} disagrees with {} entries",
            manifest.count,
            manifest.episodes.len()
        )));
    }
    let listed: BTreeSet<String> = manifest.episodes.iter().map(|e| e.file.clone()).collect();
    let on_disk = episode_files(dir)?;
    if listed != on_disk {
        let missing: Vec<_> = listed.difference(&on_disk).collect();
        let extra: Vec<_> = on_disk.difference(&listed).collect();
        return Err(Error::Integrity(format!(
            "manifest/file mismatch: missing {missing:?}, unlisted {extra:?}"
        )));
    }
    let episodes = read_dataset(dir)?;
    for (ep, entry) in episodes.iter().zip(&manifest.episodes) {
        if ep.kind != entry.kind || ep.episode_id != entry.episode_id {
            return Err(Error::Integrity(format!("manifest entry for {} is stale", entry.file)));
        }
    }
    Ok(StatsReport::from_episodes(&episodes))
}

fn episode_files(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::storage(dir, e))? {
        let entry = entry.map_err(|e| Error::storage(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".json") && name != MANIFEST {
            out.insert(name);
        }
    }
    Ok(out)
}
