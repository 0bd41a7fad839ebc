use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::Episode;
use crate::error::{Error, Result};
use crate::sim::{Observation, OBS_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistoryMode {
    /// Reach back freely within the episode.
    Raw,
    /// Never reach back past a history-reset marker.
    Reset,
}

/// Fixed-capacity window of past observations, oldest first, with padding
/// after the valid entries.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    pub entries: Vec<Observation>,
    pub valid_count: usize,
}

impl HistoryWindow {
    pub fn empty(w: usize) -> Self {
        Self {
            entries: vec![Observation::padding(); w],
            valid_count: 0,
        }
    }

    fn from_valid<'a>(w: usize, valid: impl Iterator<Item = &'a Observation>) -> Self {
        let mut entries: Vec<Observation> = valid.cloned().collect();
        let valid_count = entries.len();
        debug_assert!(valid_count <= w);
        entries.resize(w, Observation::padding());
        Self { entries, valid_count }
    }

    pub fn capacity(&self) -> usize {
        self.entries.len()
    }

    pub fn valid(&self) -> &[Observation] {
        &self.entries[..self.valid_count]
    }

    /// Flat model input: `W * OBS_DIM` values followed by a `W`-long
    /// validity mask.
    pub fn write_features(&self, out: &mut [f64]) {
        let w = self.capacity();
        for (i, o) in self.entries.iter().enumerate() {
            o.write_into(&mut out[i * OBS_DIM..(i + 1) * OBS_DIM]);
        }
        for i in 0..w {
            out[w * OBS_DIM + i] = if i < self.valid_count { 1.0 } else { 0.0 };
        }
    }
}

pub fn feature_dim(w: usize) -> usize {
    w * (OBS_DIM + 1)
}

/// History preceding frame `t` of `episode`.
pub fn build_history(episode: &Episode, t: usize, w: usize, mode: HistoryMode) -> Result<HistoryWindow> {
    if t >= episode.frames.len() {
        return Err(Error::Input(format!(
            "history index {t} out of range for {} frames",
            episode.frames.len()
        )));
    }
    let mut start = t.saturating_sub(w);
    if mode == HistoryMode::Reset {
        if let Some(m) = episode.history_reset_at() {
            if m <= t {
                start = start.max(m);
            }
        }
    }
    Ok(HistoryWindow::from_valid(w, episode.frames[start..t].iter().map(|f| &f.obs)))
}

/// Rolling buffer used during closed-loop rollouts.
#[derive(Debug, Clone)]
pub struct RollingHistory {
    w: usize,
    buf: VecDeque<Observation>,
}

impl RollingHistory {
    pub fn new(w: usize) -> Self {
        Self {
            w,
            buf: VecDeque::with_capacity(w + 1),
        }
    }

    pub fn push(&mut self, obs: Observation) {
        if self.w == 0 {
            return;
        }
        if self.buf.len() == self.w {
            self.buf.pop_front();
        }
        self.buf.push_back(obs);
    }

    pub fn clear(&mut self) {
        self.buf.clear();
    }

    pub fn window(&self) -> HistoryWindow {
        HistoryWindow::from_valid(self.w, self.buf.iter())
    }
}
