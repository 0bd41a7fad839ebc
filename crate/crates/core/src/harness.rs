//! Phase-protocol evaluation, the training pipeline and the experiment
//! suites built on it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;
use std::sync::Mutex;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::fault::{compute_t_max, detect_failure, inject, success_durations, verify_adverse, ErrorKind, InjectionSchedule, Interceptor};
use crate::labeler::{label_episodes, LabelConfig, LabelSummary, ValueFn};
use crate::math::wilson_interval;
use crate::planner::{PlanExecutor, Planner};
use crate::policy::{policy_trigger, Controller, Policy, TrainReport, ValueSource};
use crate::sim::{Arm, ArmAction, BimanualAction, EnvMode, Observation, Pose2D, Sim, TaskId, WorldState, GRIP_CLOSED, GRIP_OPEN};
use crate::store::{recovery_slice, Episode, EpisodeKind, Frame, HistoryMode, Outcome, PhaseTag};
use crate::value::{AlignReport, ReferenceCluster, ValueModel};

/// Offsets of the training seed streams from `train_seed_base`.
pub const NOMINAL_SEED_OFFSET: u64 = 0;
pub const RECOVERY_SEED_OFFSET: u64 = 200_000;
pub const INDUCED_SEED_OFFSET: u64 = 400_000;
const STREAM_SPAN: u64 = 200_000;

/// Who drives the world into the adverse state in adversarial trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorDriver {
    /// The expert executes nominally and through the injected error; the
    /// agent takes over at the adverse state.
    Expert,
    /// The agent drives from reset and the override is applied to its own
    /// actions once a geometric trigger fires.
    Policy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Trials per evaluation cell.
    pub trials: usize,
    pub eval_seed_base: u64,
    pub train_seed_base: u64,
    /// Step budget multiplier on the longest nominal duration.
    pub timeout_scale: f64,
    pub error_driver: ErrorDriver,
    pub env_mode: EnvMode,
    pub tasks: Vec<TaskId>,
    pub errors: Vec<ErrorKind>,
    /// Expert demonstrations per task.
    pub n_expert: usize,
    /// Interception episodes per task and error type at the 1x tier.
    pub n_recovery: usize,
    /// Policy rollouts per task for induced-failure collection.
    pub n_induced: usize,
    pub tiers: Vec<usize>,
    pub alphas: Vec<f64>,
    /// Trials per cell for the value-input comparison.
    pub value_trials: usize,
    /// Steps a closed, empty gripper is tolerated before the expert takes over.
    pub induced_patience: usize,
    /// Frames before takeover tagged as error in induced episodes.
    pub induced_error_frames: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            eval_seed_base: 1_000_000,
            train_seed_base: 0,
            timeout_scale: 1.25,
            error_driver: ErrorDriver::Expert,
            env_mode: EnvMode::Random,
            tasks: TaskId::ALL.to_vec(),
            errors: ErrorKind::ALL.to_vec(),
            n_expert: 300,
            n_recovery: 25,
            n_induced: 50,
            tiers: vec![1, 2, 4],
            alphas: vec![1.0, 3.0, 10.0],
            value_trials: 30,
            induced_patience: 5,
            induced_error_frames: 20,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("harness: {m}")));
        if self.trials == 0 || self.value_trials == 0 {
            return bad("trial counts must be positive");
        }
        if !(self.timeout_scale >= 1.0 && self.timeout_scale.is_finite()) {
            return bad("timeout_scale must be at least 1");
        }
        if self.tasks.is_empty() || self.errors.is_empty() {
            return bad("tasks and errors must be non-empty");
        }
        if self.n_expert == 0 {
            return bad("n_expert must be positive");
        }
        if self.tiers.is_empty() || self.tiers.contains(&0) || self.tiers.windows(2).any(|w| w[0] >= w[1]) {
            return bad("tiers must be positive and strictly increasing");
        }
        if self.alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return bad("alphas must be positive");
        }
        let top = self.tiers.last().copied().unwrap_or(1) as u64 * self.n_recovery as u64;
        if self.n_expert as u64 > STREAM_SPAN || top > STREAM_SPAN || self.n_induced as u64 > STREAM_SPAN {
            return bad("dataset sizes exceed the seed stream span");
        }
        Ok(())
    }

    pub fn nominal_seeds(&self) -> Range<u64> {
        let s = self.train_seed_base + NOMINAL_SEED_OFFSET;
        s..s + self.n_expert as u64
    }

    /// Interception seeds for a tier; lower tiers are prefixes of higher ones.
    pub fn recovery_seeds(&self, tier: usize) -> Range<u64> {
        let s = self.train_seed_base + RECOVERY_SEED_OFFSET;
        s..s + (tier * self.n_recovery) as u64
    }

    pub fn induced_seeds(&self) -> Range<u64> {
        let s = self.train_seed_base + INDUCED_SEED_OFFSET;
        s..s + self.n_induced as u64
    }

    pub fn eval_seeds(&self, n: usize) -> Range<u64> {
        self.eval_seed_base..self.eval_seed_base + n as u64
    }

    /// Every training seed stream the pipeline may draw from.
    pub fn training_streams(&self) -> Vec<Range<u64>> {
        let top = self.tiers.last().copied().unwrap_or(1);
        vec![self.nominal_seeds(), self.recovery_seeds(top), self.induced_seeds()]
    }

    /// Fails if any evaluation seed could also have produced training data.
    pub fn check_seed_hygiene(&self, eval: &Range<u64>) -> Result<()> {
        for r in self.training_streams() {
            if r.start < eval.end && eval.start < r.end {
                return Err(Error::Config(format!(
                    "evaluation seeds {}..{} overlap training seeds {}..{}",
                    eval.start, eval.end, r.start, r.end
                )));
            }
        }
        Ok(())
    }
}

/// Per-task longest successful nominal duration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    pub t_max: BTreeMap<TaskId, usize>,
}

impl Budgets {
    pub fn from_episodes(expert: &[Episode]) -> Result<Self> {
        let mut by_task: BTreeMap<TaskId, Vec<Episode>> = BTreeMap::new();
        for e in expert {
            by_task.entry(e.task_id).or_default().push(e.clone());
        }
        let mut t_max = BTreeMap::new();
        for (task, eps) in by_task {
            t_max.insert(task, compute_t_max(&success_durations(&eps))?);
        }
        Ok(Self { t_max })
    }

    pub fn t_max(&self, task: TaskId) -> Result<usize> {
        self.t_max
            .get(&task)
            .copied()
            .ok_or_else(|| Error::InsufficientData(format!("no nominal durations for {task}")))
    }

    /// Steps allowed for a phase: `ceil(t_max * scale)`.
    pub fn budget(&self, task: TaskId, scale: f64) -> Result<usize> {
        Ok((self.t_max(task)? as f64 * scale).ceil() as usize)
    }
}

// ---------------------------------------------------------------- agents

/// Something that can control the robot for one trial.
pub trait Agent: Sync {
    fn name(&self) -> String;
    fn start(&self, task: TaskId, seed: u64) -> Box<dyn Driver + '_>;
}

pub trait Driver {
    fn act(&mut self, state: &WorldState, obs: &Observation) -> Result<BimanualAction>;
    /// Records an observation whose action was chosen elsewhere.
    fn observe(&mut self, obs: &Observation);
    /// Control passes to the agent mid-episode.
    fn take_over(&mut self, state: &WorldState) -> Result<()>;
}

pub struct PolicyAgent<'a> {
    pub label: String,
    pub policy: &'a Policy,
    pub v: f64,
}

impl<'a> PolicyAgent<'a> {
    pub fn new(label: impl Into<String>, policy: &'a Policy, v: f64) -> Self {
        Self {
            label: label.into(),
            policy,
            v,
        }
    }
}

struct PolicyDriver<'a>(Controller<'a>);

impl Driver for PolicyDriver<'_> {
    fn act(&mut self, _state: &WorldState, obs: &Observation) -> Result<BimanualAction> {
        self.0.act(obs)
    }

    fn observe(&mut self, obs: &Observation) {
        self.0.observe(obs)
    }

    fn take_over(&mut self, _state: &WorldState) -> Result<()> {
        Ok(())
    }
}

impl Agent for PolicyAgent<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn start(&self, _task: TaskId, _seed: u64) -> Box<dyn Driver + '_> {
        Box::new(PolicyDriver(Controller::new(self.policy, self.v)))
    }
}

/// The scripted planner used as a policy.
pub struct OracleAgent {
    pub planner: Planner,
}

struct OracleDriver<'a> {
    planner: &'a Planner,
    task: TaskId,
    exec: Option<PlanExecutor>,
    gave_up: bool,
}

impl OracleDriver<'_> {
    fn replan(&mut self, state: &WorldState, recovery: bool) -> Result<()> {
        let plan = if recovery {
            self.planner.plan_recovery(self.task, state)
        } else {
            self.planner.plan_nominal(self.task, state)
        };
        match plan {
            Ok(p) => self.exec = Some(PlanExecutor::new(p, self.planner)),
            Err(Error::Planning(_) | Error::Unrecoverable(_)) => self.gave_up = true,
            Err(e) => return Err(e),
        }
        Ok(())
    }
}

impl Driver for OracleDriver<'_> {
    fn act(&mut self, state: &WorldState, _obs: &Observation) -> Result<BimanualAction> {
        if self.exec.is_none() && !self.gave_up {
            self.replan(state, false)?;
        }
        match self.exec.as_mut() {
            Some(exec) => match exec.next_action(state) {
                Ok(a) => Ok(a),
                Err(Error::PlanExhausted) => Ok(BimanualAction::hold(state)),
                Err(e) => Err(e),
            },
            None => Ok(BimanualAction::hold(state)),
        }
    }

    fn observe(&mut self, _obs: &Observation) {}

    fn take_over(&mut self, state: &WorldState) -> Result<()> {
        self.exec = None;
        self.replan(state, true)
    }
}

impl Agent for OracleAgent {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn start(&self, task: TaskId, _seed: u64) -> Box<dyn Driver + '_> {
        Box::new(OracleDriver {
            planner: &self.planner,
            task,
            exec: None,
            gave_up: false,
        })
    }
}

/// Uniformly random targets in a box around the current poses.
pub struct RandomAgent {
    pub sim: Sim,
}

struct RandomDriver<'a> {
    sim: &'a Sim,
    rng: ChaCha8Rng,
}

impl Driver for RandomDriver<'_> {
    fn act(&mut self, state: &WorldState, _obs: &Observation) -> Result<BimanualAction> {
        let reach = 4.0 * self.sim.cfg.max_step();
        let turn = 4.0 * self.sim.cfg.max_turn();
        let mut arm = |a: Arm| {
            let p = state.arm_pose(a);
            ArmAction {
                target: Pose2D::new(
                    p.x + self.rng.random_range(-reach..=reach),
                    p.y + self.rng.random_range(-reach..=reach),
                    p.theta + self.rng.random_range(-turn..=turn),
                ),
                grip: if self.rng.random_bool(0.5) { GRIP_CLOSED } else { GRIP_OPEN },
            }
        };
        Ok(BimanualAction {
            left: arm(Arm::Left),
            right: arm(Arm::Right),
        })
    }

    fn observe(&mut self, _obs: &Observation) {}

    fn take_over(&mut self, _state: &WorldState) -> Result<()> {
        Ok(())
    }
}

impl Agent for RandomAgent {
    fn name(&self) -> String {
        "random".into()
    }

    fn start(&self, _task: TaskId, seed: u64) -> Box<dyn Driver + '_> {
        Box::new(RandomDriver {
            sim: &self.sim,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_4A4D),
        })
    }
}

// -------------------------------------------------------------- protocol

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    Standard,
    Adversarial,
}

impl Condition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Standard => "Standard",
            Condition::Adversarial => "Adversarial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub task_id: TaskId,
    pub env_mode: EnvMode,
    pub seed: u64,
    pub error_type: Option<ErrorKind>,
    /// The injection window opened.
    pub triggered: bool,
    pub adverse_verified: bool,
    pub t_rec: Option<usize>,
    pub phase_trace: Vec<PhaseTag>,
    pub outcome: Outcome,
    pub steps_used: usize,
}

impl TrialRecord {
    /// Whether the trial belongs in its condition's success denominator.
    pub fn valid(&self) -> bool {
        self.error_type.is_none() || self.adverse_verified
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub agent: String,
    pub condition: Condition,
    pub task_id: TaskId,
    pub error_type: Option<ErrorKind>,
    pub env_mode: EnvMode,
    pub trials: usize,
    pub triggered: usize,
    pub verified: usize,
    pub valid: usize,
    pub successes: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub insufficient_verification: bool,
    pub valid_rule: String,
    pub records: Vec<TrialRecord>,
}

impl EvalReport {
    pub fn from_records(agent: String, task: TaskId, error: Option<ErrorKind>, mode: EnvMode, records: Vec<TrialRecord>) -> Self {
        let valid = records.iter().filter(|r| r.valid()).count();
        let successes = records.iter().filter(|r| r.valid() && r.outcome == Outcome::Success).count();
        let (ci_low, ci_high) = wilson_interval(successes, valid, 1.96);
        Self {
            agent,
            condition: if error.is_some() { Condition::Adversarial } else { Condition::Standard },
            task_id: task,
            error_type: error,
            env_mode: mode,
            trials: records.len(),
            triggered: records.iter().filter(|r| r.triggered).count(),
            verified: records.iter().filter(|r| r.adverse_verified).count(),
            valid,
            successes,
            rate: if valid == 0 { 0.0 } else { successes as f64 / valid as f64 },
            ci_low,
            ci_high,
            insufficient_verification: error.is_some() && valid == 0,
            valid_rule: if error.is_some() {
                "trials whose injected failure was verified in the world state".into()
            } else {
                "all trials".into()
            },
            records,
        }
    }
}

/// Runs agents through the standard and adversarial conditions.
pub struct Protocol<'a> {
    pub ic: &'a Interceptor,
    pub budgets: &'a Budgets,
    pub cfg: &'a HarnessConfig,
}

impl Protocol<'_> {
    fn sim(&self) -> &Sim {
        &self.ic.sim
    }

    pub fn run(&self, agent: &dyn Agent, task: TaskId, error: Option<ErrorKind>, seeds: &[u64]) -> Result<EvalReport> {
        let records = seeds
            .par_iter()
            .map(|&s| match error {
                None => self.standard_trial(agent, task, s),
                Some(k) => self.adversarial_trial(agent, task, k, s),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport::from_records(agent.name(), task, error, self.cfg.env_mode, records))
    }

    fn record(&self, task: TaskId, seed: u64, error: Option<ErrorKind>) -> TrialRecord {
        TrialRecord {
            task_id: task,
            env_mode: self.cfg.env_mode,
            seed,
            error_type: error,
            triggered: false,
            adverse_verified: false,
            t_rec: None,
            phase_trace: Vec::new(),
            outcome: Outcome::Failure,
            steps_used: 0,
        }
    }

    /// Lets the driver act from `state` until success or timeout.
    fn drive(&self, driver: &mut dyn Driver, task: TaskId, state: WorldState, budget: usize, tag: PhaseTag, rec: &mut TrialRecord) -> Result<()> {
        let sim = self.sim();
        let mut st = state;
        let mut k = 0;
        loop {
            if sim.success_check(task, &st) {
                rec.outcome = Outcome::Success;
                break;
            }
            if detect_failure(k + 1, budget) {
                break;
            }
            let obs = sim.observe(&st);
            let a = driver.act(&st, &obs)?;
            st = sim.step(&st, &a)?;
            rec.phase_trace.push(tag);
            k += 1;
        }
        rec.steps_used += k;
        Ok(())
    }

    pub fn standard_trial(&self, agent: &dyn Agent, task: TaskId, seed: u64) -> Result<TrialRecord> {
        let budget = self.budgets.budget(task, self.cfg.timeout_scale)?;
        let mut rec = self.record(task, seed, None);
        let st = self.sim().reset(task, self.cfg.env_mode, seed);
        let mut driver = agent.start(task, seed);
        self.drive(driver.as_mut(), task, st, budget, PhaseTag::Nominal, &mut rec)?;
        Ok(rec)
    }

    pub fn adversarial_trial(&self, agent: &dyn Agent, task: TaskId, kind: ErrorKind, seed: u64) -> Result<TrialRecord> {
        match self.cfg.error_driver {
            ErrorDriver::Expert => self.expert_driven(agent, task, kind, seed),
            ErrorDriver::Policy => self.policy_driven(agent, task, kind, seed),
        }
    }

    fn expert_driven(&self, agent: &dyn Agent, task: TaskId, kind: ErrorKind, seed: u64) -> Result<TrialRecord> {
        let budget = self.budgets.budget(task, self.cfg.timeout_scale)?;
        let mut rec = self.record(task, seed, Some(kind));
        let st = self.sim().reset(task, self.cfg.env_mode, seed);
        let plan = match self.ic.planner.plan_nominal(task, &st) {
            Ok(p) => p,
            Err(Error::Planning(_)) => return Ok(rec),
            Err(e) => return Err(e),
        };
        let mut exec = PlanExecutor::new(plan, &self.ic.planner);
        let schedule = InjectionSchedule::for_task(kind, task, seed);
        let proj = self.ic.project_error(&mut exec, schedule, &st, 0, self.ic.planner.cfg.max_steps)?;
        let mut driver = agent.start(task, seed);
        for (s, _, tag) in &proj.steps {
            driver.observe(&self.sim().observe(s));
            rec.phase_trace.push(*tag);
        }
        rec.steps_used = proj.steps.len();
        rec.triggered = proj.triggered();
        rec.adverse_verified = proj.verified;
        if !proj.verified {
            return Ok(rec);
        }
        rec.t_rec = Some(proj.steps.len());
        driver.take_over(&proj.state)?;
        self.drive(driver.as_mut(), task, proj.state, budget, PhaseTag::Recovery, &mut rec)?;
        Ok(rec)
    }

    fn policy_driven(&self, agent: &dyn Agent, task: TaskId, kind: ErrorKind, seed: u64) -> Result<TrialRecord> {
        let sim = self.sim();
        let faults = &self.ic.faults;
        let budget = self.budgets.budget(task, self.cfg.timeout_scale)?;
        let mut rec = self.record(task, seed, Some(kind));
        let mut st = sim.reset(task, self.cfg.env_mode, seed);
        let mut schedule = InjectionSchedule::for_task(kind, task, seed);
        let mut driver = agent.start(task, seed);
        let mut t = 0;
        loop {
            if let Some((_, end)) = schedule.window {
                if t == end {
                    rec.adverse_verified = verify_adverse(&st, kind, task, sim.cfg.goal_radius);
                    if !rec.adverse_verified {
                        break;
                    }
                    rec.t_rec = Some(t);
                    rec.steps_used = t;
                    self.drive(driver.as_mut(), task, st, budget, PhaseTag::Recovery, &mut rec)?;
                    return Ok(rec);
                }
            }
            if sim.success_check(task, &st) || detect_failure(t + 1, budget + faults.window_len(kind)) {
                break;
            }
            let obs = sim.observe(&st);
            let mut a = driver.act(&st, &obs)?;
            if !schedule.is_resolved() && policy_trigger(&schedule, &st, sim, faults) {
                schedule.resolve(t, faults)?;
                rec.triggered = true;
            }
            let tag = if schedule.is_resolved() {
                a = inject(&a, t, &schedule, None)?;
                PhaseTag::Error
            } else {
                PhaseTag::Nominal
            };
            st = sim.step(&st, &a)?;
            rec.phase_trace.push(tag);
            t += 1;
        }
        rec.steps_used = t;
        Ok(rec)
    }
}

// -------------------------------------------------------------- pipeline

/// Shared simulator, planner and fault settings for one configuration.
pub struct Bench {
    pub cfg: Config,
    pub ic: Interceptor,
}

/// Episodes from a generation run plus the number of skipped seeds.
#[derive(Debug, Clone, Default)]
pub struct Generated {
    pub episodes: Vec<Episode>,
    pub skipped: usize,
}

impl Bench {
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let sim = Sim::new(cfg.sim.clone())?;
        let planner = Planner::new(cfg.sim.clone(), cfg.planner.clone());
        let ic = Interceptor::new(sim, planner, cfg.errors.clone());
        Ok(Self { cfg, ic })
    }

    pub fn harness(&self) -> &HarnessConfig {
        &self.cfg.harness
    }

    pub fn protocol<'a>(&'a self, budgets: &'a Budgets) -> Protocol<'a> {
        Protocol {
            ic: &self.ic,
            budgets,
            cfg: &self.cfg.harness,
        }
    }

    pub fn oracle(&self) -> OracleAgent {
        OracleAgent {
            planner: self.ic.planner.clone(),
        }
    }

    pub fn random(&self) -> RandomAgent {
        RandomAgent { sim: self.ic.sim.clone() }
    }

    pub fn gen_nominal(&self, task: TaskId, seeds: Range<u64>) -> Result<Generated> {
        let mode = self.cfg.harness.env_mode;
        let runs = seeds
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|s| self.ic.run_nominal(task, mode, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(collect_runs(runs))
    }

    /// Interception episodes; the corrective segment is limited to the
    /// task's step budget when `budgets` is given.
    pub fn gen_recovery(&self, task: TaskId, kind: ErrorKind, seeds: Range<u64>, budgets: Option<&Budgets>) -> Result<Generated> {
        let mode = self.cfg.harness.env_mode;
        let mut ic = self.ic.clone();
        if let Some(b) = budgets {
            ic.t_max = Some(b.budget(task, self.cfg.harness.timeout_scale)?);
        }
        let runs = seeds
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|s| ic.run_interception(task, mode, kind, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(collect_runs(runs))
    }

    /// Expert demonstrations for every configured task.
    pub fn expert_dataset(&self) -> Result<Generated> {
        let mut out = Generated::default();
        for &task in &self.cfg.harness.tasks {
            let g = self.gen_nominal(task, self.cfg.harness.nominal_seeds())?;
            out.episodes.extend(g.episodes);
            out.skipped += g.skipped;
        }
        Ok(out)
    }

    /// Interception episodes for every task and error type up to `tier`.
    pub fn recovery_dataset(&self, tier: usize, budgets: &Budgets) -> Result<Generated> {
        let mut out = Generated::default();
        for &task in &self.cfg.harness.tasks {
            for &kind in &self.cfg.harness.errors {
                let g = self.gen_recovery(task, kind, self.cfg.harness.recovery_seeds(tier), Some(budgets))?;
                out.episodes.extend(g.episodes);
                out.skipped += g.skipped;
            }
        }
        Ok(out)
    }

    /// Rolls out `agent` and lets the planner take over once it fails: on
    /// timeout, or when a gripper stays closed on nothing.
    pub fn collect_policy_induced(&self, agent: &dyn Agent, tasks: &[TaskId], seeds: Range<u64>, budgets: &Budgets) -> Result<Generated> {
        let mut jobs = Vec::new();
        for &task in tasks {
            jobs.extend(seeds.clone().map(|s| (task, s)));
        }
        let runs = jobs
            .into_par_iter()
            .map(|(task, s)| self.induced_episode(agent, task, s, budgets))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Generated::default();
        for r in runs {
            match r {
                Some(e) => out.episodes.push(e),
                None => out.skipped += 1,
            }
        }
        Ok(out)
    }

    fn induced_episode(&self, agent: &dyn Agent, task: TaskId, seed: u64, budgets: &Budgets) -> Result<Option<Episode>> {
        let hc = &self.cfg.harness;
        let sim = &self.ic.sim;
        let budget = budgets.budget(task, hc.timeout_scale)?;
        let mut st = sim.reset(task, hc.env_mode, seed);
        let mut driver = agent.start(task, seed);
        let mut frames = Vec::new();
        let mut stuck = 0;
        let reason = loop {
            if sim.success_check(task, &st) {
                return Ok(None);
            }
            if detect_failure(frames.len(), budget) {
                break "timeout";
            }
            if stuck >= hc.induced_patience {
                break "empty grasp";
            }
            let obs = sim.observe(&st);
            let a = driver.act(&st, &obs)?;
            frames.push(Frame {
                t: frames.len(),
                obs,
                action: a,
                phase: PhaseTag::Nominal,
                v: None,
            });
            st = sim.step(&st, &a)?;
            let empty = Arm::BOTH.iter().any(|&arm| st.grip_closed(arm) && st.held_by(arm).is_none());
            stuck = if empty { stuck + 1 } else { 0 };
        };
        let onset = frames.len().saturating_sub(hc.induced_error_frames);
        frames[onset..].iter_mut().for_each(|f| f.phase = PhaseTag::Error);
        let mut ep = Episode {
            episode_id: format!("{task}-{}-induced-s{seed}", hc.env_mode),
            task_id: task,
            instruction_id: task.instruction_id(),
            env_mode: hc.env_mode,
            seed,
            error_type: None,
            t_rec: None,
            outcome: Outcome::Failure,
            kind: EpisodeKind::PureFailure,
            frames,
            provenance: BTreeMap::new(),
        };
        ep.provenance.insert("source".into(), Value::from("induced"));
        ep.provenance.insert("anomaly".into(), Value::from(reason));
        ep.provenance.insert("t_max".into(), Value::from(budget as u64));
        let mut ic = self.ic.clone();
        ic.t_max = Some(budget);
        let t_rec = ep.frames.len();
        let rec = ic.recover(task, &st, t_rec)?;
        Ok(ic.finish(ep, rec)?.episode())
    }
}

fn collect_runs(runs: Vec<crate::fault::RunOutcome>) -> Generated {
    let mut out = Generated::default();
    for r in runs {
        match r.episode() {
            Some(e) => out.episodes.push(e),
            None => out.skipped += 1,
        }
    }
    out
}

pub fn train_value(cfg: &Config, expert: &[Episode]) -> Result<(ValueModel, ReferenceCluster, AlignReport)> {
    let success: Vec<Episode> = expert.iter().filter(|e| e.outcome == Outcome::Success).cloned().collect();
    let mut model = ValueModel::new(cfg.value.clone());
    let report = model.train_align(&success)?;
    let cluster = model.build_reference_cluster(&success)?;
    Ok((model, cluster, report))
}

pub fn train_sft(cfg: &Config, expert: &[Episode]) -> Result<(Policy, TrainReport)> {
    let mut p = Policy::for_data(cfg.policy.clone(), expert)?;
    let r = p.train_sft(expert, &cfg.train)?;
    Ok((p, r))
}

/// Recovery-aware imitation. With `reset_history`, recovery episodes are
/// sliced at `t_rec` and trained with reset histories; otherwise the whole
/// episodes are imitated with raw histories.
pub fn train_phase1(cfg: &Config, expert: &[Episode], recovery: &[Episode], reset_history: bool) -> Result<(Policy, TrainReport)> {
    let fr: Vec<&Episode> = recovery.iter().filter(|e| e.kind == EpisodeKind::FailureRecovery).collect();
    let (rec, mode) = if reset_history {
        (fr.iter().map(|e| recovery_slice(e)).collect::<Result<Vec<_>>>()?, HistoryMode::Reset)
    } else {
        (fr.into_iter().cloned().collect(), HistoryMode::Raw)
    };
    let mut p = Policy::for_data(cfg.policy.clone(), expert)?;
    let es = p.dataset_samples(expert, HistoryMode::Raw, ValueSource::Fixed(1.0))?;
    let rs = p.dataset_samples(&rec, mode, ValueSource::Fixed(1.0))?;
    let r = p.train_rai_samples(&es, &rs, &cfg.train)?;
    Ok((p, r))
}

pub fn label_total(cfg: &LabelConfig, model: &ValueModel, cluster: &ReferenceCluster, episodes: &[Episode]) -> Result<Vec<Episode>> {
    let est = ValueFn { model, cluster };
    label_episodes(episodes, &est, cfg)
}

/// Value-conditioned fine-tuning of a recovery-aware policy.
pub fn train_full(cfg: &Config, phase1: &Policy, labeled: &[Episode]) -> Result<(Policy, TrainReport)> {
    let mut p = phase1.clone();
    let r = p.train_vcr(labeled, &cfg.vcr)?;
    Ok((p, r))
}

/// Data and models shared by the experiment suites.
pub struct Pipeline<'a> {
    pub bench: &'a Bench,
    pub budgets: Budgets,
    pub expert: Vec<Episode>,
    /// Interception episodes at the largest tier.
    pub recovery: Vec<Episode>,
    pub value: ValueModel,
    pub cluster: ReferenceCluster,
    pub provenance: BTreeMap<String, Value>,
    models: Mutex<BTreeMap<String, Policy>>,
}

impl<'a> Pipeline<'a> {
    pub fn build(bench: &'a Bench) -> Result<Self> {
        let hc = bench.harness();
        let expert = bench.expert_dataset()?;
        let budgets = Budgets::from_episodes(&expert.episodes)?;
        let top = hc.tiers.last().copied().unwrap_or(1);
        let recovery = bench.recovery_dataset(top, &budgets)?;
        let (value, cluster, align) = train_value(&bench.cfg, &expert.episodes)?;
        info!(
            "pipeline: {} expert, {} interception episodes, align loss {:.4} -> {:.4}",
            expert.episodes.len(),
            recovery.episodes.len(),
            align.initial_loss,
            align.final_loss
        );
        let mut provenance = BTreeMap::new();
        provenance.insert("expert_episodes".into(), Value::from(expert.episodes.len()));
        provenance.insert("expert_skipped".into(), Value::from(expert.skipped));
        provenance.insert("recovery_episodes".into(), Value::from(recovery.episodes.len()));
        provenance.insert("recovery_skipped".into(), Value::from(recovery.skipped));
        provenance.insert("t_max".into(), serde_json::to_value(&budgets.t_max).map_err(|e| Error::Integrity(e.to_string()))?);
        let streams: Vec<Value> = hc.training_streams().iter().map(|r| Value::from(format!("{}..{}", r.start, r.end))).collect();
        provenance.insert("training_seed_streams".into(), Value::from(streams));
        Ok(Self {
            bench,
            budgets,
            expert: expert.episodes,
            recovery: recovery.episodes,
            value,
            cluster,
            provenance,
            models: Mutex::new(BTreeMap::new()),
        })
    }

    /// Trains a model once per key; training is deterministic, so reuse is
    /// indistinguishable from retraining.
    fn memo(&self, key: String, train: impl FnOnce() -> Result<Policy>) -> Result<Policy> {
        if let Some(p) = self.models.lock().expect("model cache poisoned").get(&key) {
            return Ok(p.clone());
        }
        let p = train()?;
        info!("trained {key}");
        self.models.lock().expect("model cache poisoned").insert(key, p.clone());
        Ok(p)
    }

    fn cfg(&self) -> &Config {
        &self.bench.cfg
    }

    /// Interception episodes belonging to a tier.
    pub fn recovery_tier(&self, tier: usize) -> Vec<Episode> {
        let seeds = self.cfg().harness.recovery_seeds(tier);
        self.recovery.iter().filter(|e| seeds.contains(&e.seed)).cloned().collect()
    }

    pub fn sft(&self) -> Result<Policy> {
        self.memo("sft".into(), || Ok(train_sft(self.cfg(), &self.expert)?.0))
    }

    pub fn phase1(&self, tier: usize, reset_history: bool) -> Result<Policy> {
        self.memo(format!("phase1/{tier}x/reset={reset_history}"), || {
            Ok(train_phase1(self.cfg(), &self.expert, &self.recovery_tier(tier), reset_history)?.0)
        })
    }

    /// Induced failures of the first-tier recovery-aware policy.
    pub fn induced(&self) -> Result<Generated> {
        let hc = &self.cfg().harness;
        let base = self.phase1(hc.tiers[0], true)?;
        let agent = PolicyAgent::new("phase1", &base, 1.0);
        self.bench.collect_policy_induced(&agent, &hc.tasks, hc.induced_seeds(), &self.budgets)
    }

    /// Labels expert, interception and induced episodes with decay `alpha`.
    pub fn labeled(&self, tier: usize, induced: &[Episode], alpha: f64) -> Result<Vec<Episode>> {
        let mut all = self.expert.clone();
        all.extend(self.recovery_tier(tier));
        all.extend_from_slice(induced);
        let lc = LabelConfig {
            alpha,
            ..self.cfg().labeler.clone()
        };
        label_total(&lc, &self.value, &self.cluster, &all)
    }

    /// Value-conditioned model on top of the tier's recovery-aware policy.
    pub fn full(&self, tier: usize, alpha: f64) -> Result<Policy> {
        self.memo(format!("full/{tier}x/alpha={alpha}"), || {
            let base = self.phase1(tier, true)?;
            let induced = self.induced()?;
            let labeled = self.labeled(tier, &induced.episodes, alpha)?;
            Ok(train_full(self.cfg(), &base, &labeled)?.0)
        })
    }

    /// Evaluates each variant on Standard and every configured error.
    pub fn evaluate(&self, variants: &[(String, &Policy, f64)], trials: usize) -> Result<Vec<EvalReport>> {
        let hc = &self.cfg().harness;
        let seeds = hc.eval_seeds(trials);
        hc.check_seed_hygiene(&seeds)?;
        let seeds: Vec<u64> = seeds.collect();
        let proto = self.bench.protocol(&self.budgets);
        let mut out = Vec::new();
        for (name, policy, v) in variants {
            let agent = PolicyAgent::new(name.clone(), policy, *v);
            for &task in &hc.tasks {
                out.push(proto.run(&agent, task, None, &seeds)?);
                for &kind in &hc.errors {
                    out.push(proto.run(&agent, task, Some(kind), &seeds)?);
                }
            }
        }
        Ok(out)
    }

    pub fn report(&self, name: &str, cells: Vec<EvalReport>) -> Report {
        Report {
            name: name.into(),
            config: self.cfg().clone(),
            provenance: self.provenance.clone(),
            cells,
            summary: Vec::new(),
        }
    }
}

// ----------------------------------------------------------- experiments

/// Pooled success over a set of cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub condition: Condition,
    pub valid: usize,
    pub successes: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl SummaryRow {
    pub fn pool(variant: &str, condition: Condition, cells: &[EvalReport]) -> Self {
        let pick = cells.iter().filter(|c| c.agent == variant && c.condition == condition);
        let (valid, successes) = pick.fold((0, 0), |(v, s), c| (v + c.valid, s + c.successes));
        let (ci_low, ci_high) = wilson_interval(successes, valid, 1.96);
        Self {
            variant: variant.into(),
            condition,
            valid,
            successes,
            rate: if valid == 0 { 0.0 } else { successes as f64 / valid as f64 },
            ci_low,
            ci_high,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub config: Config,
    pub provenance: BTreeMap<String, Value>,
    pub cells: Vec<EvalReport>,
    pub summary: Vec<SummaryRow>,
}

pub const CELL_COLUMNS: &str =
    "variant,condition,task,error,env_mode,trials,triggered,verified,valid,successes,rate,ci_low,ci_high,insufficient_verification";
pub const SUMMARY_COLUMNS: &str = "variant,condition,valid,successes,rate,ci_low,ci_high";

impl Report {
    fn variants(&self) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for c in &self.cells {
            if !seen.contains(&c.agent) {
                seen.push(c.agent.clone());
            }
        }
        seen
    }

    /// Fills `summary` with pooled rows per variant and condition.
    pub fn summarize(mut self) -> Self {
        let mut rows = Vec::new();
        for v in self.variants() {
            for cond in [Condition::Standard, Condition::Adversarial] {
                rows.push(SummaryRow::pool(&v, cond, &self.cells));
            }
        }
        self.summary = rows;
        self
    }

    pub fn summary_row(&self, variant: &str, condition: Condition) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.variant == variant && r.condition == condition)
    }

    pub fn cell(&self, variant: &str, task: TaskId, error: Option<ErrorKind>) -> Option<&EvalReport> {
        self.cells.iter().find(|c| c.agent == variant && c.task_id == task && c.error_type == error)
    }

    pub fn cells_csv(&self) -> String {
        let mut s = String::from(CELL_COLUMNS);
        s.push('\n');
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{:.4},{:.4},{:.4},{}",
                c.agent,
                c.condition.as_str(),
                c.task_id,
                c.error_type.map_or("none", |k| k.as_str()),
                c.env_mode,
                c.trials,
                c.triggered,
                c.verified,
                c.valid,
                c.successes,
                c.rate,
                c.ci_low,
                c.ci_high,
                c.insufficient_verification
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(SUMMARY_COLUMNS);
        s.push('\n');
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.4},{:.4},{:.4}",
                r.variant,
                r.condition.as_str(),
                r.valid,
                r.successes,
                r.rate,
                r.ci_low,
                r.ci_high
            );
        }
        s
    }

    /// Writes `<name>.json`, `<name>_cells.csv` and `<name>_summary.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Integrity(e.to_string()))?;
        crate::store::write_atomic(&dir.join(format!("{}.json", self.name)), &json)?;
        crate::store::write_atomic(&dir.join(format!("{}_cells.csv", self.name)), self.cells_csv().as_bytes())?;
        crate::store::write_atomic(&dir.join(format!("{}_summary.csv", self.name)), self.summary_csv().as_bytes())
    }
}

/// Baseline, recovery-aware and value-conditioned models side by side.
pub fn run_main(p: &Pipeline) -> Result<Report> {
    let hc = &p.cfg().harness;
    let t1 = hc.tiers[0];
    let alpha = p.cfg().labeler.alpha;
    let (sft, phase1, full) = (p.sft()?, p.phase1(t1, true)?, p.full(t1, alpha)?);
    let variants = vec![
        ("sft".to_string(), &sft, 1.0),
        ("phase1".to_string(), &phase1, 1.0),
        ("full".to_string(), &full, 1.0),
    ];
    let mut r = p.report("main", p.evaluate(&variants, hc.trials)?);
    r.provenance.insert("induced_episodes".into(), Value::from(p.induced()?.episodes.len()));
    Ok(r.summarize())
}

pub fn tier_name(tier: usize) -> String {
    format!("full_{tier}x")
}

/// Full models trained on nested recovery tiers, with the baseline and the
/// first-tier recovery-aware model for reference.
pub fn run_scaling(p: &Pipeline) -> Result<Report> {
    let hc = &p.cfg().harness;
    let alpha = p.cfg().labeler.alpha;
    let mut models = vec![("sft".to_string(), p.sft()?), ("phase1".to_string(), p.phase1(hc.tiers[0], true)?)];
    for &tier in &hc.tiers {
        models.push((tier_name(tier), p.full(tier, alpha)?));
    }
    let variants: Vec<(String, &Policy, f64)> = models.iter().map(|(n, m)| (n.clone(), m, 1.0)).collect();
    let mut r = p.report("scaling", p.evaluate(&variants, hc.trials)?);
    r.provenance.insert("induced_episodes".into(), Value::from(p.induced()?.episodes.len()));
    for &tier in &hc.tiers {
        r.provenance.insert(format!("recovery_episodes_{tier}x"), Value::from(p.recovery_tier(tier).len()));
    }
    Ok(r.summarize())
}

pub fn alpha_name(alpha: f64) -> String {
    format!("alpha_{alpha}")
}

/// History-reset, value-input and decay-rate ablations.
pub fn run_ablations(p: &Pipeline) -> Result<Report> {
    let hc = &p.cfg().harness;
    let t1 = hc.tiers[0];
    let (reset, raw) = (p.phase1(t1, true)?, p.phase1(t1, false)?);
    let mut cells = p.evaluate(&[("phase1_reset".to_string(), &reset, 1.0), ("phase1_raw".to_string(), &raw, 1.0)], hc.trials)?;

    let full = p.full(t1, p.cfg().labeler.alpha)?;
    cells.extend(p.evaluate(&[("full_v1".to_string(), &full, 1.0), ("full_v0".to_string(), &full, 0.0)], hc.value_trials)?);

    for &alpha in &hc.alphas {
        let m = p.full(t1, alpha)?;
        cells.extend(p.evaluate(&[(alpha_name(alpha), &m, 1.0)], hc.trials)?);
    }
    let mut r = p.report("ablations", cells);
    r.provenance.insert("induced_episodes".into(), Value::from(p.induced()?.episodes.len()));
    Ok(r.summarize())
}

/// Labeled-value summary, for reports on labeled datasets.
pub fn label_report(labeled: &[Episode]) -> LabelSummary {
    LabelSummary::from_episodes(labeled)
}
