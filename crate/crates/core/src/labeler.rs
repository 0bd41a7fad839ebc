//! Hindsight value labels for mixed-quality datasets.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::store::{read_dataset, write_episodes, Episode, EpisodeKind, PhaseTag};
use crate::value::{ReferenceCluster, ValueModel};

/// Which pre-takeover frames of a recovery episode receive value 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrefixConvention {
    /// Only Error-tagged frames.
    #[default]
    ErrorOnly,
    /// Every frame before `t_rec`.
    AllPrefix,
}

impl PrefixConvention {
    pub fn as_str(&self) -> &'static str {
        match self {
            PrefixConvention::ErrorOnly => "error-only",
            PrefixConvention::AllPrefix => "all-prefix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    pub alpha: f64,
    pub clamp: [f64; 2],
    pub prefix: PrefixConvention,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            alpha: 3.0,
            clamp: [0.0, 1.0],
            prefix: PrefixConvention::ErrorOnly,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("labeler.alpha must be positive, got {}", self.alpha)));
        }
        let [lo, hi] = self.clamp;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("labeler.clamp must satisfy 0 <= lo <= hi <= 1, got {:?}", self.clamp)));
        }
        Ok(())
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.clamp[0], self.clamp[1])
    }
}

/// Source of trajectory-level progress estimates for failed episodes.
pub trait ProgressEstimator: Sync {
    fn estimate(&self, episode: &Episode) -> Result<f64>;
}

/// A trained value model paired with its reference cluster.
pub struct ValueFn<'a> {
    pub model: &'a ValueModel,
    pub cluster: &'a ReferenceCluster,
}

impl ProgressEstimator for ValueFn<'_> {
    fn estimate(&self, episode: &Episode) -> Result<f64> {
        self.model.estimate_progress(self.cluster, episode)
    }
}

/// Fixed estimate for every episode.
pub struct ConstantValue(pub f64);

impl ProgressEstimator for ConstantValue {
    fn estimate(&self, _: &Episode) -> Result<f64> {
        Ok(self.0)
    }
}

fn expect_kind(ep: &Episode, kind: EpisodeKind) -> Result<()> {
    if ep.kind != kind {
        return Err(Error::Precondition(format!(
            "{} is {}, expected {}",
            ep.episode_id,
            ep.kind.as_str(),
            kind.as_str()
        )));
    }
    Ok(())
}

pub fn label_success(episode: &Episode) -> Result<Episode> {
    expect_kind(episode, EpisodeKind::NominalSuccess)?;
    let mut out = episode.clone();
    out.frames.iter_mut().for_each(|f| f.v = Some(1.0));
    Ok(out)
}

pub fn label_recovery(episode: &Episode, cfg: &LabelConfig) -> Result<Episode> {
    expect_kind(episode, EpisodeKind::FailureRecovery)?;
    let t_rec = episode
        .t_rec
        .ok_or_else(|| Error::validation("t_rec", format!("{} has no t_rec", episode.episode_id)))?;
    if !episode.is_reset_slice() && !episode.has_phase(PhaseTag::Error) {
        return Err(Error::validation(
            "frames.phase",
            format!("{} is a failure-recovery episode without Error frames", episode.episode_id),
        ));
    }
    let mut out = episode.clone();
    for f in &mut out.frames {
        let zero = f.t < t_rec
            && match cfg.prefix {
                PrefixConvention::ErrorOnly => f.phase == PhaseTag::Error,
                PrefixConvention::AllPrefix => true,
            };
        f.v = Some(if zero { 0.0 } else { 1.0 });
    }
    out.provenance
        .insert("label_prefix_convention".into(), Value::from(cfg.prefix.as_str()));
    Ok(out)
}

/// `v_t = V (1 - t/T)^alpha` with `T` the last frame index.
pub fn decay_value(v: f64, t: usize, big_t: usize, alpha: f64) -> f64 {
    v * (1.0 - t as f64 / big_t as f64).powf(alpha)
}

pub fn label_failure(episode: &Episode, v: f64, cfg: &LabelConfig) -> Result<Episode> {
    expect_kind(episode, EpisodeKind::PureFailure)?;
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Input(format!("trajectory value {v} outside [0, 1]")));
    }
    let big_t = episode.last_index();
    if big_t == 0 {
        return Err(Error::Input(format!(
            "{} has a single frame; decay needs at least two",
            episode.episode_id
        )));
    }
    let mut out = episode.clone();
    for f in &mut out.frames {
        f.v = Some(decay_value(v, f.t, big_t, cfg.alpha));
    }
    out.provenance.insert("trajectory_value".into(), Value::from(v));
    out.provenance.insert("alpha".into(), Value::from(cfg.alpha));
    Ok(out)
}

pub fn label_episode(episode: &Episode, estimator: &dyn ProgressEstimator, cfg: &LabelConfig) -> Result<Episode> {
    match episode.kind {
        EpisodeKind::NominalSuccess => label_success(episode),
        EpisodeKind::FailureRecovery => label_recovery(episode, cfg),
        EpisodeKind::PureFailure => {
            let v = cfg.clamp(estimator.estimate(episode)?);
            label_failure(episode, v, cfg)
        }
    }
}

pub fn label_episodes(episodes: &[Episode], estimator: &dyn ProgressEstimator, cfg: &LabelConfig) -> Result<Vec<Episode>> {
    cfg.validate()?;
    episodes.par_iter().map(|ep| label_episode(ep, estimator, cfg)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub episodes: usize,
    pub frames: usize,
    pub by_kind: BTreeMap<String, usize>,
    pub mean_v: f64,
    /// Frame counts in ten equal-width bins over `[0, 1]`.
    pub histogram: [usize; 10],
    /// Trajectory values assigned to failed episodes.
    pub failure_values: Vec<f64>,
}

impl LabelSummary {
    pub fn from_episodes(episodes: &[Episode]) -> Self {
        let mut s = Self {
            episodes: episodes.len(),
            frames: 0,
            by_kind: BTreeMap::new(),
            mean_v: 0.0,
            histogram: [0; 10],
            failure_values: Vec::new(),
        };
        let mut sum = 0.0;
        for ep in episodes {
            *s.by_kind.entry(ep.kind.as_str().to_string()).or_default() += 1;
            if let Some(v) = ep.provenance.get("trajectory_value").and_then(Value::as_f64) {
                s.failure_values.push(v);
            }
            for v in ep.frames.iter().filter_map(|f| f.v) {
                s.frames += 1;
                sum += v;
                s.histogram[((v * 10.0) as usize).min(9)] += 1;
            }
        }
        if s.frames > 0 {
            s.mean_v = sum / s.frames as f64;
        }
        s
    }
}

/// Labels every episode under `input` and writes the labeled copies to
/// `output`.
pub fn label_dataset(
    input: impl AsRef<Path>,
    output: impl AsRef<Path>,
    estimator: &dyn ProgressEstimator,
    cfg: &LabelConfig,
) -> Result<LabelSummary> {
    let episodes = read_dataset(input)?;
    let labeled = label_episodes(&episodes, estimator, cfg)?;
    write_episodes(&labeled, output)?;
    Ok(LabelSummary::from_episodes(&labeled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{BimanualAction, EnvMode, Observation, TaskId};
    use crate::store::{Frame, Outcome};
    use proptest::prelude::*;

    fn episode(kind: EpisodeKind, tags: &[(PhaseTag, usize)]) -> Episode {
        let mut frames = Vec::new();
        for &(tag, n) in tags {
            for _ in 0..n {
                frames.push(Frame {
                    t: frames.len(),
                    obs: Observation::padding(),
                    action: BimanualAction::from_slice(&[0.0; 8]).unwrap(),
                    phase: tag,
                    v: None,
                });
            }
        }
        let t_rec = frames.iter().position(|f| f.phase == PhaseTag::Recovery);
        Episode {
            episode_id: "x".into(),
            task_id: TaskId::PickPlace,
            instruction_id: 0,
            env_mode: EnvMode::Clean,
            seed: 0,
            error_type: None,
            t_rec: if kind == EpisodeKind::FailureRecovery { t_rec } else { None },
            outcome: if kind == EpisodeKind::PureFailure { Outcome::Failure } else { Outcome::Success },
            kind,
            frames,
            provenance: BTreeMap::new(),
        }
    }

    fn values(ep: &Episode) -> Vec<f64> {
        ep.frames.iter().map(|f| f.v.unwrap()).collect()
    }

    #[test]
    fn success_is_all_ones() {
        let ep = label_success(&episode(EpisodeKind::NominalSuccess, &[(PhaseTag::Nominal, 80)])).unwrap();
        assert_eq!(values(&ep), vec![1.0; 80]);
        let one = label_success(&episode(EpisodeKind::NominalSuccess, &[(PhaseTag::Nominal, 1)])).unwrap();
        assert_eq!(values(&one), vec![1.0]);
        assert!(label_success(&episode(EpisodeKind::PureFailure, &[(PhaseTag::Nominal, 3)])).is_err());
    }

    #[test]
    fn recovery_zeros_only_error_frames() {
        let ep = episode(
            EpisodeKind::FailureRecovery,
            &[(PhaseTag::Nominal, 10), (PhaseTag::Error, 10), (PhaseTag::Recovery, 20)],
        );
        let got = values(&label_recovery(&ep, &LabelConfig::default()).unwrap());
        let mut want = vec![1.0; 10];
        want.extend([0.0; 10]);
        want.extend([1.0; 20]);
        assert_eq!(got, want);

        let all = LabelConfig {
            prefix: PrefixConvention::AllPrefix,
            ..LabelConfig::default()
        };
        let got = values(&label_recovery(&ep, &all).unwrap());
        assert_eq!(got.iter().filter(|&&v| v == 0.0).count(), 20);
    }

    #[test]
    fn recovery_from_zero_is_all_ones_and_missing_error_is_rejected() {
        let mut ep = episode(EpisodeKind::FailureRecovery, &[(PhaseTag::Recovery, 5)]);
        assert!(matches!(
            label_recovery(&ep, &LabelConfig::default()),
            Err(Error::Validation { .. })
        ));
        ep.provenance.insert(crate::store::PROV_KIND.into(), crate::store::RESET_RECOVERY.into());
        assert_eq!(values(&label_recovery(&ep, &LabelConfig::default()).unwrap()), vec![1.0; 5]);
        let mut no_trec = ep.clone();
        no_trec.t_rec = None;
        assert!(label_recovery(&no_trec, &LabelConfig::default()).is_err());
    }

    #[test]
    fn failure_decay_matches_hand_values() {
        let ep = episode(EpisodeKind::PureFailure, &[(PhaseTag::Nominal, 3), (PhaseTag::Error, 8)]);
        let v = values(&label_failure(&ep, 0.8, &LabelConfig::default()).unwrap());
        assert!((v[5] - 0.1).abs() < 1e-12);
        assert_eq!(v[0], 0.8);
        assert_eq!(v[10], 0.0);
        let single = episode(EpisodeKind::PureFailure, &[(PhaseTag::Error, 1)]);
        assert!(label_failure(&single, 0.5, &LabelConfig::default()).is_err());
        assert!(label_failure(&ep, 1.5, &LabelConfig::default()).is_err());
    }

    #[test]
    fn estimates_are_clamped_before_decay() {
        let ep = episode(EpisodeKind::PureFailure, &[(PhaseTag::Error, 4)]);
        let cfg = LabelConfig::default();
        let neg = label_episode(&ep, &ConstantValue(-0.4), &cfg).unwrap();
        assert_eq!(values(&neg), vec![0.0; 4]);
        let high = label_episode(&ep, &ConstantValue(1.7), &cfg).unwrap();
        assert_eq!(values(&high)[0], 1.0);
    }

    #[test]
    fn bad_alpha_is_rejected() {
        let cfg = LabelConfig {
            alpha: 0.0,
            ..LabelConfig::default()
        };
        assert!(matches!(label_episodes(&[], &ConstantValue(0.5), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn summary_counts_frames_and_bins() {
        let eps = vec![
            label_success(&episode(EpisodeKind::NominalSuccess, &[(PhaseTag::Nominal, 4)])).unwrap(),
            label_failure(&episode(EpisodeKind::PureFailure, &[(PhaseTag::Error, 3)]), 0.5, &LabelConfig::default())
                .unwrap(),
        ];
        let s = LabelSummary::from_episodes(&eps);
        assert_eq!(s.frames, 7);
        assert_eq!(s.histogram[9], 4);
        assert_eq!(s.histogram[0], 2);
        assert_eq!(s.histogram[5], 1);
        assert_eq!(s.failure_values, vec![0.5]);
    }

    proptest! {
        #[test]
        fn decay_is_monotone_and_alpha_ordered(v in 0.0f64..=1.0, big_t in 2usize..200, frac in 0.01f64..0.99) {
            let t = ((big_t as f64 * frac) as usize).clamp(1, big_t - 1);
            let cfg = LabelConfig::default();
            let ep = episode(EpisodeKind::PureFailure, &[(PhaseTag::Error, big_t + 1)]);
            let got = values(&label_failure(&ep, v, &cfg).unwrap());
            for w in got.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            let oracle = v * (1.0 - t as f64 / big_t as f64).powf(3.0);
            prop_assert!((got[t] - oracle).abs() < 1e-9);
            let a1 = decay_value(v, t, big_t, 1.0);
            let a3 = decay_value(v, t, big_t, 3.0);
            let a10 = decay_value(v, t, big_t, 10.0);
            prop_assert!(a1 >= a3 && a3 >= a10);
            if v > 0.0 {
                prop_assert!(a1 > a3 && a3 > a10);
            }
        }
    }
}
