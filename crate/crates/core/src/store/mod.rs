//! Episode data model, storage, history windows and trajectory slicing.

mod episode;
mod history;
mod io;
mod stats;

pub use episode::{
    Episode, EpisodeKind, Frame, Outcome, PhaseTag, PROV_HISTORY_RESET_AT, PROV_KIND, RESET_RECOVERY,
};
pub use history::{build_history, feature_dim, HistoryMode, HistoryWindow, RollingHistory};
pub use io::{
    decode_episode, decode_versioned, encode_episode, read_dataset, read_episode, read_manifest, write_episode, write_atomic, write_episodes,
    Manifest, ManifestEntry, MANIFEST, SCHEMA_VERSION,
};
pub use stats::{dataset_stats, StatsReport};

use serde_json::Value;

use crate::error::{Error, Result};

/// Keeps only the corrective suffix of a failure-recovery episode, starting
/// at `t_rec`, and marks it so history never reaches before the slice start.
pub fn recovery_slice(episode: &Episode) -> Result<Episode> {
    let t_rec = match (episode.kind, episode.t_rec) {
        (EpisodeKind::FailureRecovery, Some(t)) => t,
        _ => {
            return Err(Error::Precondition(format!(
                "{} is not a failure-recovery episode with t_rec",
                episode.episode_id
            )))
        }
    };
    let mut out = episode.clone();
    out.episode_id = format!("{}-reset", episode.episode_id);
    out.frames = episode.frames[t_rec..]
        .iter()
        .enumerate()
        .map(|(i, f)| Frame { t: i, ..f.clone() })
        .collect();
    out.t_rec = Some(0);
    out.provenance.insert(PROV_KIND.into(), Value::from(RESET_RECOVERY));
    out.provenance.insert(PROV_HISTORY_RESET_AT.into(), Value::from(0u64));
    out.provenance.insert("source_episode".into(), Value::from(episode.episode_id.clone()));
    out.provenance.insert("source_t_rec".into(), Value::from(t_rec as u64));
    Ok(out)
}
