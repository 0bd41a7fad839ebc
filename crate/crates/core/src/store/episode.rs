use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fault::ErrorKind;
use crate::sim::{BimanualAction, EnvMode, Observation, TaskId, OBS_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhaseTag {
    Nominal,
    Error,
    Recovery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EpisodeKind {
    NominalSuccess,
    FailureRecovery,
    PureFailure,
}

impl EpisodeKind {
    pub const ALL: [EpisodeKind; 3] = [
        EpisodeKind::NominalSuccess,
        EpisodeKind::FailureRecovery,
        EpisodeKind::PureFailure,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EpisodeKind::NominalSuccess => "NominalSuccess",
            EpisodeKind::FailureRecovery => "FailureRecovery",
            EpisodeKind::PureFailure => "PureFailure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: usize,
    pub obs: Observation,
    pub action: BimanualAction,
    pub phase: PhaseTag,
    pub v: Option<f64>,
}

/// Provenance key marking a history-reset slice.
pub const PROV_KIND: &str = "kind";
pub const RESET_RECOVERY: &str = "ResetRecovery";
pub const PROV_HISTORY_RESET_AT: &str = "history_reset_at";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub task_id: TaskId,
    pub instruction_id: u32,
    pub env_mode: EnvMode,
    pub seed: u64,
    pub error_type: Option<ErrorKind>,
    pub t_rec: Option<usize>,
    pub outcome: Outcome,
    pub kind: EpisodeKind,
    pub frames: Vec<Frame>,
    pub provenance: BTreeMap<String, Value>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Index of the last frame.
    pub fn last_index(&self) -> usize {
        self.frames.len().saturating_sub(1)
    }

    /// Frame index before which history must never reach, if any.
    pub fn history_reset_at(&self) -> Option<usize> {
        self.provenance
            .get(PROV_HISTORY_RESET_AT)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
    }

    pub fn is_reset_slice(&self) -> bool {
        self.provenance.get(PROV_KIND).and_then(Value::as_str) == Some(RESET_RECOVERY)
    }

    pub fn is_labeled(&self) -> bool {
        self.frames.iter().all(|f| f.v.is_some())
    }

    pub fn phases(&self) -> impl Iterator<Item = PhaseTag> + '_ {
        self.frames.iter().map(|f| f.phase)
    }

    pub fn has_phase(&self, tag: PhaseTag) -> bool {
        self.phases().any(|p| p == tag)
    }

    /// Checks the structural invariants every stored episode must satisfy.
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::validation("frames", "episode has no frames"));
        }
        if self.instruction_id != self.task_id.instruction_id() {
            return Err(Error::validation(
                "instruction_id",
                format!("{} does not match task {}", self.instruction_id, self.task_id),
            ));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.t != i {
                return Err(Error::validation(format!("frames[{i}].t"), format!("expected {i}, got {}", f.t)));
            }
            if f.obs.dim() != OBS_DIM {
                return Err(Error::validation(
                    format!("frames[{i}].obs"),
                    format!("expected {OBS_DIM} values, got {}", f.obs.dim()),
                ));
            }
            if let Some(v) = f.v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::validation(format!("frames[{i}].v"), format!("{v} outside [0, 1]")));
                }
            }
            if !f.action.is_finite() || f.obs.to_vec().iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!("frames[{i}]"), "non-finite value"));
            }
        }
        match (self.kind, self.t_rec) {
            (EpisodeKind::FailureRecovery, None) => {
                return Err(Error::validation("t_rec", "FailureRecovery episode without t_rec"))
            }
            (EpisodeKind::NominalSuccess | EpisodeKind::PureFailure, Some(_)) => {
                return Err(Error::validation("t_rec", format!("t_rec present on {} episode", self.kind.as_str())))
            }
            _ => {}
        }
        if self.kind == EpisodeKind::NominalSuccess {
            if self.outcome != Outcome::Success {
                return Err(Error::validation("outcome", "NominalSuccess episode must succeed"));
            }
            if self.phases().any(|p| p != PhaseTag::Nominal) {
                return Err(Error::validation("frames.phase", "NominalSuccess episode has non-nominal frames"));
            }
        }
        if let Some(t_rec) = self.t_rec {
            let first = self.frames.iter().position(|f| f.phase == PhaseTag::Recovery);
            if first != Some(t_rec) {
                return Err(Error::validation(
                    "t_rec",
                    format!("t_rec={t_rec} but first Recovery frame is {first:?}"),
                ));
            }
        }
        check_grammar(self)
    }
}

/// Tags must read `Nominal* Error* (Recovery+ Nominal*)?`, with the recovery
/// part present exactly when the episode is a failure-recovery episode.
fn check_grammar(ep: &Episode) -> Result<()> {
    let mut stage = 0u8;
    for (i, p) in ep.phases().enumerate() {
        let next = match (stage, p) {
            (0, PhaseTag::Nominal) => 0,
            (0 | 1, PhaseTag::Error) => 1,
            (0..=2, PhaseTag::Recovery) => 2,
            (2 | 3, PhaseTag::Nominal) => 3,
            _ => {
                return Err(Error::validation(
                    format!("frames[{i}].phase"),
                    format!("{p:?} breaks the Nominal/Error/Recovery ordering"),
                ))
            }
        };
        stage = next;
    }
    let has_recovery = stage >= 2;
    if has_recovery != (ep.kind == EpisodeKind::FailureRecovery) {
        return Err(Error::validation(
            "frames.phase",
            format!("{} episode {} Recovery frames", ep.kind.as_str(), if has_recovery { "has" } else { "lacks" }),
        ));
    }
    Ok(())
}
