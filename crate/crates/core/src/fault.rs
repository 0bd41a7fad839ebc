//! Interception-based error injection and paired failure/recovery episodes.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::planner::{PlanExecutor, PlanPhase, Planner, Waypoint};
use crate::sim::{Arm, BimanualAction, EnvMode, Sim, TaskId, WorldState, GRIP_CLOSED, GRIP_OPEN};
use crate::store::{Episode, EpisodeKind, Frame, Outcome, PhaseTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorKind {
    /// Gripper closes early during approach.
    E1,
    /// Gripper opens during lift.
    E2,
    /// Translational offset on grasp targets.
    E3,
    /// Rotational mismatch plus lateral offset on grasp targets.
    E4,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 4] = [ErrorKind::E1, ErrorKind::E2, ErrorKind::E3, ErrorKind::E4];

    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorKind::E1 => "E1",
            ErrorKind::E2 => "E2",
            ErrorKind::E3 => "E3",
            ErrorKind::E4 => "E4",
        }
    }

    pub fn long_name(&self) -> &'static str {
        match self {
            ErrorKind::E1 => "E1_PrematureClose",
            ErrorKind::E2 => "E2_GraspSlip",
            ErrorKind::E3 => "E3_PositionOffset",
            ErrorKind::E4 => "E4_OrientationMismatch",
        }
    }

    fn salt(&self) -> u64 {
        match self {
            ErrorKind::E1 => 0x51,
            ErrorKind::E2 => 0x52,
            ErrorKind::E3 => 0x53,
            ErrorKind::E4 => 0x54,
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ErrorKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s) || k.long_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown error type `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultConfig {
    /// E1: steps the gripper is held closed.
    pub n_hold: usize,
    /// E2: steps the gripper is held open.
    pub slip_window: usize,
    /// E3: per-axis offset bound (m).
    pub d: f64,
    /// E3/E4: steps the grasp-target perturbation stays active.
    pub grasp_window: usize,
    /// E4: maximum heading error (rad); draws use `[dtheta_max/2, dtheta_max]`.
    pub dtheta_max: f64,
    /// E4: lateral offset bound (m).
    pub lat_max: f64,
    /// E1 fires once the approaching gripper is this close to the object (m).
    pub approach_trigger_dist: f64,
}

impl Default for FaultConfig {
    fn default() -> Self {
        Self {
            n_hold: 20,
            slip_window: 30,
            d: 0.05,
            grasp_window: 25,
            dtheta_max: PI / 3.0,
            lat_max: 0.02,
            approach_trigger_dist: 0.1,
        }
    }
}

impl FaultConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_hold == 0 || self.slip_window == 0 || self.grasp_window == 0 {
            return Err(Error::Config("errors: windows must be non-empty".into()));
        }
        if !(self.d > 0.0 && self.dtheta_max > 0.0 && self.lat_max >= 0.0) {
            return Err(Error::Config("errors: d and dtheta_max must be positive".into()));
        }
        Ok(())
    }

    pub fn window_len(&self, kind: ErrorKind) -> usize {
        match kind {
            ErrorKind::E1 => self.n_hold,
            ErrorKind::E2 => self.slip_window,
            ErrorKind::E3 | ErrorKind::E4 => self.grasp_window,
        }
    }
}

/// Per-episode random draws, made once at resolution time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Perturbation {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
    pub lateral: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSchedule {
    pub kind: ErrorKind,
    pub arm: Arm,
    pub object: usize,
    pub rng_seed: u64,
    /// Half-open `[start, end)`.
    pub window: Option<(usize, usize)>,
    pub perturbation: Option<Perturbation>,
}

impl InjectionSchedule {
    pub fn new(kind: ErrorKind, arm: Arm, object: usize, rng_seed: u64) -> Self {
        Self {
            kind,
            arm,
            object,
            rng_seed,
            window: None,
            perturbation: None,
        }
    }

    /// Schedule aimed at a task's first (critical) primitive.
    pub fn for_task(kind: ErrorKind, task: TaskId, episode_seed: u64) -> Self {
        let p = task.spec().designated();
        Self::new(kind, p.arm, p.object, derive_seed(episode_seed, kind))
    }

    pub fn is_resolved(&self) -> bool {
        self.window.is_some()
    }

    /// Fixes the active window at `t_start` and draws the perturbation.
    pub fn resolve(&mut self, t_start: usize, cfg: &FaultConfig) -> Result<()> {
        if self.is_resolved() {
            return Err(Error::Sequencing("injection schedule resolved twice".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        let p = match self.kind {
            ErrorKind::E1 | ErrorKind::E2 => Perturbation::default(),
            ErrorKind::E3 => Perturbation {
                dx: rng.random_range(-cfg.d..=cfg.d),
                dy: rng.random_range(-cfg.d..=cfg.d),
                ..Perturbation::default()
            },
            ErrorKind::E4 => {
                let mag = rng.random_range(cfg.dtheta_max / 2.0..=cfg.dtheta_max);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let lateral = if cfg.lat_max > 0.0 {
                    rng.random_range(-cfg.lat_max..=cfg.lat_max)
                } else {
                    0.0
                };
                Perturbation {
                    dtheta: sign * mag,
                    lateral,
                    ..Perturbation::default()
                }
            }
        };
        self.window = Some((t_start, t_start + cfg.window_len(self.kind)));
        self.perturbation = Some(p);
        Ok(())
    }

    pub fn in_window(&self, t: usize) -> bool {
        self.window.is_some_and(|(s, e)| t >= s && t < e)
    }

    pub fn started(&self, t: usize) -> bool {
        self.window.is_some_and(|(s, _)| t >= s)
    }

    pub fn ended(&self, t: usize) -> bool {
        self.window.is_some_and(|(_, e)| t >= e)
    }

    /// Whether the trigger condition holds for an expert step executing
    /// waypoint `wp` at `state`. Only the task's first primitive is targeted.
    pub fn should_trigger(&self, wp: Option<&Waypoint>, state: &WorldState, cfg: &FaultConfig) -> bool {
        if self.is_resolved() {
            return false;
        }
        let Some(wp) = wp.filter(|w| w.primitive == 0 && w.arm == self.arm) else {
            return false;
        };
        match (self.kind, Some(wp.phase)) {
            (ErrorKind::E1, Some(PlanPhase::Approach)) => state
                .objects
                .get(self.object)
                .is_some_and(|o| o.pose.dist(state.arm_pose(self.arm)) <= cfg.approach_trigger_dist),
            (ErrorKind::E2, Some(PlanPhase::Lift)) => true,
            (ErrorKind::E3 | ErrorKind::E4, Some(PlanPhase::Grasp)) => true,
            _ => false,
        }
    }
}

pub fn derive_seed(seed: u64, kind: ErrorKind) -> u64 {
    // splitmix64 finalizer over the salted seed
    let mut z = seed ^ kind.salt().wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Applies the scheduled override to `action` at step `t`.
///
/// `phase` is the expert phase that produced the action; target overrides
/// (E3/E4) only touch grasp-phase targets. `None` applies them to every
/// in-window action.
pub fn inject(
    action: &BimanualAction,
    t: usize,
    schedule: &InjectionSchedule,
    phase: Option<PlanPhase>,
) -> Result<BimanualAction> {
    let (Some(_), Some(p)) = (schedule.window, schedule.perturbation) else {
        return Err(Error::Sequencing("inject called before the schedule was resolved".into()));
    };
    if !schedule.in_window(t) {
        return Ok(*action);
    }
    let mut out = *action;
    let targets_grasp = phase.is_none_or(|ph| ph.is_grasp());
    let cmd = out.arm_mut(schedule.arm);
    match schedule.kind {
        ErrorKind::E1 => cmd.grip = GRIP_CLOSED,
        ErrorKind::E2 => cmd.grip = GRIP_OPEN,
        ErrorKind::E3 if targets_grasp => cmd.target = cmd.target.translated(p.dx, p.dy),
        // Approach runs along +y, so the lateral axis is x.
        ErrorKind::E4 if targets_grasp => {
            cmd.target = cmd.target.translated(p.lateral, 0.0).with_theta(cmd.target.theta + p.dtheta)
        }
        _ => {}
    }
    Ok(out)
}

/// Physical signature of an injected failure: the critical object lies loose
/// on the table short of its place target, i.e. it was never grasped (E1,
/// E3, E4) or slipped out (E2).
pub fn verify_adverse(state: &WorldState, kind: ErrorKind, task: TaskId, goal_radius: f64) -> bool {
    let _ = kind;
    let spec = task.spec();
    let p = spec.designated();
    state.objects.get(p.object).is_some_and(|o| o.held_by.is_none()) && !spec.primitive_done(0, state, goal_radius)
}

/// Longest successful nominal duration.
pub fn compute_t_max(durations: &[usize]) -> Result<usize> {
    durations
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::InsufficientData("no successful nominal episodes".into()))
}

/// Success duration (last frame index) of each successful episode.
pub fn success_durations(episodes: &[Episode]) -> Vec<usize> {
    episodes
        .iter()
        .filter(|e| e.outcome == Outcome::Success)
        .map(|e| e.last_index())
        .collect()
}

pub fn detect_failure(t: usize, t_max: usize) -> bool {
    t > t_max
}

/// Steps taken while the expert drives the world through an injection.
#[derive(Debug, Clone)]
pub struct Projection {
    pub steps: Vec<(WorldState, BimanualAction, PhaseTag)>,
    pub state: WorldState,
    pub schedule: InjectionSchedule,
    pub verified: bool,
}

impl Projection {
    pub fn triggered(&self) -> bool {
        self.schedule.is_resolved()
    }
}

#[derive(Debug, Clone)]
pub enum RunOutcome {
    Recorded(Episode),
    Skipped(String),
}

impl RunOutcome {
    pub fn episode(self) -> Option<Episode> {
        match self {
            RunOutcome::Recorded(e) => Some(e),
            RunOutcome::Skipped(_) => None,
        }
    }
}

/// Runs the expert with and without interception.
#[derive(Debug, Clone)]
pub struct Interceptor {
    pub sim: Sim,
    pub planner: Planner,
    pub faults: FaultConfig,
    /// Step budget for the corrective segment; the plan step cap if unset.
    pub t_max: Option<usize>,
}

fn frame(sim: &Sim, t: usize, state: &WorldState, action: BimanualAction, phase: PhaseTag) -> Frame {
    Frame {
        t,
        obs: sim.observe(state),
        action,
        phase,
        v: None,
    }
}

impl Interceptor {
    pub fn new(sim: Sim, planner: Planner, faults: FaultConfig) -> Self {
        Self {
            sim,
            planner,
            faults,
            t_max: None,
        }
    }

    fn budget(&self) -> usize {
        self.t_max.unwrap_or(self.planner.cfg.max_steps)
    }

    fn episode(&self, id: String, task: TaskId, mode: EnvMode, seed: u64) -> Episode {
        Episode {
            episode_id: id,
            task_id: task,
            instruction_id: task.instruction_id(),
            env_mode: mode,
            seed,
            error_type: None,
            t_rec: None,
            outcome: Outcome::Failure,
            kind: EpisodeKind::PureFailure,
            frames: Vec::new(),
            provenance: BTreeMap::new(),
        }
    }

    /// Plain expert demonstration; skipped if the expert fails.
    pub fn run_nominal(&self, task: TaskId, mode: EnvMode, seed: u64) -> Result<RunOutcome> {
        let st = self.sim.reset(task, mode, seed);
        let plan = match self.planner.plan_nominal(task, &st) {
            Ok(p) => p,
            Err(Error::Planning(msg)) => return Ok(RunOutcome::Skipped(msg)),
            Err(e) => return Err(e),
        };
        let run = crate::planner::execute(&self.sim, &self.planner, plan, &st, self.planner.cfg.max_steps)?;
        if !run.success {
            return Ok(RunOutcome::Skipped("expert did not reach the goal".into()));
        }
        let mut ep = self.episode(format!("{task}-{mode}-nominal-s{seed}"), task, mode, seed);
        for (t, (s, a)) in run.states.iter().zip(&run.actions).enumerate() {
            ep.frames.push(frame(&self.sim, t, s, *a, PhaseTag::Nominal));
        }
        let last = run.states.last().expect("initial state recorded");
        ep.frames.push(frame(&self.sim, run.actions.len(), last, BimanualAction::hold(last), PhaseTag::Nominal));
        ep.outcome = Outcome::Success;
        ep.kind = EpisodeKind::NominalSuccess;
        ep.provenance.insert("source".into(), Value::from("expert"));
        Ok(RunOutcome::Recorded(ep))
    }

    /// Lets the expert drive from `state` (at absolute step `t0`) while the
    /// schedule triggers and runs, stopping once the injected failure has
    /// played out or `cap` steps elapse.
    pub fn project_error(
        &self,
        exec: &mut PlanExecutor,
        mut schedule: InjectionSchedule,
        state: &WorldState,
        t0: usize,
        cap: usize,
    ) -> Result<Projection> {
        let task = exec.plan().task;
        let mut st = state.clone();
        let mut steps = Vec::new();
        for t in t0..t0 + cap {
            let (action, phase) = match exec.next_action(&st) {
                Ok(a) => (a, exec.phase()),
                Err(Error::PlanExhausted) if schedule.is_resolved() => (BimanualAction::hold(&st), None),
                Err(Error::PlanExhausted) => break,
                Err(e) => return Err(e),
            };
            if schedule.should_trigger(exec.current(), &st, &self.faults) {
                schedule.resolve(t, &self.faults)?;
            }
            let (action, tag) = if schedule.is_resolved() {
                let a = inject(&action, t, &schedule, phase)?;
                (a, if schedule.started(t) { PhaseTag::Error } else { PhaseTag::Nominal })
            } else {
                (action, PhaseTag::Nominal)
            };
            let next = self.sim.step(&st, &action)?;
            steps.push((st, action, tag));
            st = next;
            let past_grasp = !exec
                .current()
                .is_some_and(|w| w.primitive == 0 && matches!(w.phase, PlanPhase::Approach | PlanPhase::Grasp));
            if schedule.ended(t + 1) && (schedule.kind == ErrorKind::E2 || past_grasp) {
                break;
            }
        }
        let verified = schedule.ended(t0 + steps.len())
            && verify_adverse(&st, schedule.kind, task, self.sim.cfg.goal_radius);
        Ok(Projection {
            steps,
            state: st,
            schedule,
            verified,
        })
    }

    /// The full interception sequence: nominal execution, override at the
    /// critical phase, adverse-state check, then scripted recovery.
    pub fn run_interception(&self, task: TaskId, mode: EnvMode, kind: ErrorKind, seed: u64) -> Result<RunOutcome> {
        let st = self.sim.reset(task, mode, seed);
        let plan = match self.planner.plan_nominal(task, &st) {
            Ok(p) => p,
            Err(Error::Planning(msg)) => return Ok(RunOutcome::Skipped(msg)),
            Err(e) => return Err(e),
        };
        let mut exec = PlanExecutor::new(plan, &self.planner);
        let schedule = InjectionSchedule::for_task(kind, task, seed);
        let proj = self.project_error(&mut exec, schedule, &st, 0, self.planner.cfg.max_steps)?;
        if !proj.triggered() {
            return Ok(RunOutcome::Skipped("critical phase never reached".into()));
        }
        if !proj.verified {
            return Ok(RunOutcome::Skipped("adverse state not verified".into()));
        }

        let mut ep = self.episode(format!("{task}-{mode}-{kind}-s{seed}"), task, mode, seed);
        ep.error_type = Some(kind);
        ep.provenance.insert("source".into(), Value::from("interception"));
        ep.provenance.insert(
            "schedule".into(),
            serde_json::to_value(&proj.schedule).map_err(|e| Error::Integrity(e.to_string()))?,
        );
        ep.provenance.insert(
            "fault_params".into(),
            serde_json::to_value(&self.faults).map_err(|e| Error::Integrity(e.to_string()))?,
        );
        ep.provenance.insert("t_max".into(), Value::from(self.budget() as u64));
        for (t, (s, a, tag)) in proj.steps.iter().enumerate() {
            ep.frames.push(frame(&self.sim, t, s, *a, *tag));
        }
        let recovery = self.recover(task, &proj.state, ep.frames.len())?;
        self.finish(ep, recovery)
    }

    /// Runs the recovery planner from an adverse state starting at frame
    /// index `t_rec`.
    pub fn recover(&self, task: TaskId, adverse: &WorldState, t_rec: usize) -> Result<Recovery> {
        let plan = match self.planner.plan_recovery(task, adverse) {
            Ok(p) => p,
            Err(Error::Unrecoverable(msg)) | Err(Error::Planning(msg)) => {
                return Ok(Recovery {
                    frames: Vec::new(),
                    state: adverse.clone(),
                    t_rec,
                    success: false,
                    reason: Some(msg),
                })
            }
            Err(e) => return Err(e),
        };
        let mut exec = PlanExecutor::new(plan, &self.planner);
        let mut st = adverse.clone();
        let mut frames = Vec::new();
        let budget = self.budget();
        let mut timed_out = false;
        loop {
            if self.sim.success_check(task, &st) && exec.is_exhausted() {
                break;
            }
            let a = match exec.next_action(&st) {
                Ok(a) => a,
                Err(Error::PlanExhausted) => break,
                Err(e) => return Err(e),
            };
            if detect_failure(frames.len() + 1, budget) {
                timed_out = true;
                break;
            }
            let tag = if exec.phase().is_some_and(|p| p.is_recovery()) {
                PhaseTag::Recovery
            } else {
                PhaseTag::Nominal
            };
            frames.push(frame(&self.sim, t_rec + frames.len(), &st, a, tag));
            st = self.sim.step(&st, &a)?;
        }
        let success = !timed_out && self.sim.success_check(task, &st);
        Ok(Recovery {
            frames,
            state: st,
            t_rec,
            success,
            reason: (!success).then(|| if timed_out { "recovery timed out" } else { "recovery plan failed" }.into()),
        })
    }

    /// Appends a recovery segment and the terminal frame to `ep`, tagging it
    /// as failure-recovery or pure failure.
    pub fn finish(&self, mut ep: Episode, rec: Recovery) -> Result<RunOutcome> {
        let task = ep.task_id;
        ep.frames.extend(rec.frames);
        let terminal = frame(&self.sim, ep.frames.len(), &rec.state, BimanualAction::hold(&rec.state), PhaseTag::Nominal);
        ep.frames.push(terminal);
        if rec.success && self.sim.success_check(task, &rec.state) {
            let first_rec = ep.frames.iter().position(|f| f.phase == PhaseTag::Recovery);
            if first_rec != Some(rec.t_rec) {
                return Err(Error::Sequencing(format!("recovery segment of {} has no Recovery frame at t_rec", ep.episode_id)));
            }
            ep.outcome = Outcome::Success;
            ep.kind = EpisodeKind::FailureRecovery;
            ep.t_rec = Some(rec.t_rec);
        } else {
            // No recovery happened: everything after failure onset is error.
            let onset = ep.frames.iter().position(|f| f.phase == PhaseTag::Error).unwrap_or(rec.t_rec);
            for f in &mut ep.frames[onset..] {
                f.phase = PhaseTag::Error;
            }
            ep.outcome = Outcome::Failure;
            ep.kind = EpisodeKind::PureFailure;
            ep.t_rec = None;
            if let Some(r) = rec.reason {
                ep.provenance.insert("failure_reason".into(), Value::from(r));
            }
        }
        ep.validate()?;
        Ok(RunOutcome::Recorded(ep))
    }
}

/// Frames produced by the recovery planner.
#[derive(Debug, Clone)]
pub struct Recovery {
    pub frames: Vec<Frame>,
    pub state: WorldState,
    pub t_rec: usize,
    pub success: bool,
    pub reason: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{ArmAction, Pose2D};

    fn action() -> BimanualAction {
        BimanualAction {
            left: ArmAction {
                target: Pose2D::new(-0.2, 0.1, 0.3),
                grip: 0.0,
            },
            right: ArmAction {
                target: Pose2D::new(0.25, 0.12, -0.2),
                grip: 1.0,
            },
        }
    }

    fn resolved(kind: ErrorKind, t: usize, seed: u64) -> InjectionSchedule {
        let mut s = InjectionSchedule::new(kind, Arm::Right, 0, seed);
        s.resolve(t, &FaultConfig::default()).unwrap();
        s
    }

    #[test]
    fn slip_forces_open_inside_window() {
        let s = resolved(ErrorKind::E2, 40, 1);
        let a = inject(&action(), 40 + 15, &s, Some(PlanPhase::Lift)).unwrap();
        assert_eq!(a.right.grip, GRIP_OPEN);
        assert_eq!(a.left, action().left);
        assert_eq!(s.window, Some((40, 70)));
    }

    #[test]
    fn identity_outside_window() {
        for kind in ErrorKind::ALL {
            let s = resolved(kind, 10, 3);
            let (_, end) = s.window.unwrap();
            for t in [0, 9, end, end + 7] {
                assert_eq!(inject(&action(), t, &s, Some(PlanPhase::Grasp)).unwrap(), action());
            }
        }
    }

    #[test]
    fn offset_is_drawn_once() {
        let cfg = FaultConfig {
            d: 0.02,
            ..FaultConfig::default()
        };
        let mut s = InjectionSchedule::new(ErrorKind::E3, Arm::Right, 0, 9);
        s.resolve(5, &cfg).unwrap();
        let a = inject(&action(), 5, &s, Some(PlanPhase::Grasp)).unwrap();
        let b = inject(&action(), 20, &s, Some(PlanPhase::Grasp)).unwrap();
        assert_eq!(a, b);
        let p = s.perturbation.unwrap();
        assert!(p.dx.abs() <= 0.02 && p.dy.abs() <= 0.02);
        assert!(matches!(s.resolve(6, &cfg), Err(Error::Sequencing(_))));
    }

    #[test]
    fn target_overrides_skip_non_grasp_phases() {
        let s = resolved(ErrorKind::E4, 0, 2);
        assert_eq!(inject(&action(), 1, &s, Some(PlanPhase::Lift)).unwrap(), action());
        assert_ne!(inject(&action(), 1, &s, Some(PlanPhase::Grasp)).unwrap(), action());
    }

    #[test]
    fn unresolved_schedule_is_a_sequencing_error() {
        let s = InjectionSchedule::new(ErrorKind::E1, Arm::Right, 0, 0);
        assert!(matches!(inject(&action(), 0, &s, None), Err(Error::Sequencing(_))));
    }

    #[test]
    fn failure_detection_is_strict() {
        assert!(!detect_failure(0, 50));
        assert!(!detect_failure(50, 50));
        assert!(detect_failure(51, 50));
    }

    #[test]
    fn t_max_is_the_longest_duration() {
        assert_eq!(compute_t_max(&[80, 95, 110]).unwrap(), 110);
        assert_eq!(compute_t_max(&[77]).unwrap(), 77);
        assert!(matches!(compute_t_max(&[]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn error_kinds_parse_both_spellings() {
        assert_eq!("E2".parse::<ErrorKind>().unwrap(), ErrorKind::E2);
        assert_eq!("e4".parse::<ErrorKind>().unwrap(), ErrorKind::E4);
        assert_eq!("E1_PrematureClose".parse::<ErrorKind>().unwrap(), ErrorKind::E1);
        assert!("E5".parse::<ErrorKind>().is_err());
    }

    #[test]
    fn nominal_rollout_is_not_adverse() {
        let ic = Interceptor::new(Sim::default(), Planner::default(), FaultConfig::default());
        let ep = ic.run_nominal(TaskId::PickPlace, EnvMode::Clean, 0).unwrap().episode().unwrap();
        let st = ic.sim.reset(TaskId::PickPlace, EnvMode::Clean, 0);
        let plan = ic.planner.plan_nominal(TaskId::PickPlace, &st).unwrap();
        let run = crate::planner::execute(&ic.sim, &ic.planner, plan, &st, 400).unwrap();
        assert!(!verify_adverse(run.states.last().unwrap(), ErrorKind::E1, TaskId::PickPlace, 0.05));
        assert_eq!(ep.kind, EpisodeKind::NominalSuccess);
    }
}
