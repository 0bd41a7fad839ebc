//! Scripted expert: nominal waypoint plans, a closed-loop plan executor, and
//! the hierarchical recovery planner.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{
    axial_diff, Arm, BimanualAction, Pose2D, Sim, SimConfig, TaskId, TaskSpec, WorldState,
    GRIP_CLOSED, GRIP_OPEN,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlanPhase {
    Approach,
    Grasp,
    Lift,
    Transport,
    Place,
    Release,
    ReOpen,
    RePerceive,
    ReApproach,
    ReGrasp,
}

impl PlanPhase {
    pub fn is_recovery(self) -> bool {
        matches!(
            self,
            PlanPhase::ReOpen | PlanPhase::RePerceive | PlanPhase::ReApproach | PlanPhase::ReGrasp
        )
    }

    /// Phases during which the gripper is meant to close on the object.
    pub fn is_grasp(self) -> bool {
        matches!(self, PlanPhase::Grasp | PlanPhase::ReGrasp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WaypointKind {
    /// Drive the arm to `target`; done once there (or once it stops moving).
    Motion,
    /// Issue the grip command for one step.
    Grip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub phase: PlanPhase,
    pub primitive: usize,
    pub arm: Arm,
    pub target: Pose2D,
    pub grip: f64,
    pub kind: WaypointKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub task: TaskId,
    pub waypoints: Vec<Waypoint>,
}

impl Plan {
    pub fn phases(&self) -> Vec<PlanPhase> {
        let mut out: Vec<PlanPhase> = Vec::new();
        for w in &self.waypoints {
            if out.last() != Some(&w.phase) {
                out.push(w.phase);
            }
        }
        out
    }

    pub fn is_recovery(&self) -> bool {
        self.waypoints.first().is_some_and(|w| w.phase.is_recovery())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Pre-grasp standoff along -y from the object.
    pub pregrasp_offset: f64,
    /// Retreat along -y after closing, standing in for a vertical lift.
    pub lift_offset: f64,
    pub pos_tol: f64,
    pub ang_tol: f64,
    /// Steps a grip waypoint holds position while the jaws actuate.
    pub grip_dwell: usize,
    /// Step cap when rolling a plan out to completion.
    pub max_steps: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            pregrasp_offset: 0.06,
            lift_offset: 0.05,
            pos_tol: 0.01,
            ang_tol: 0.05,
            grip_dwell: 3,
            max_steps: 400,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Planner {
    pub sim: SimConfig,
    pub cfg: PlannerConfig,
}

impl Planner {
    pub fn new(sim: SimConfig, cfg: PlannerConfig) -> Self {
        Self { sim, cfg }
    }

    fn check_reachable(&self, arm: Arm, p: &Pose2D, what: &str) -> Result<()> {
        if self.sim.reachable(arm, p) {
            Ok(())
        } else {
            Err(Error::Planning(format!(
                "{what} at ({:.3}, {:.3}) is out of reach for the {arm:?} arm",
                p.x, p.y
            )))
        }
    }

    fn pregrasp(&self, obj: &Pose2D) -> Pose2D {
        obj.translated(0.0, -self.cfg.pregrasp_offset)
    }

    /// Carry-and-place waypoints for primitive `k` once the object is held.
    fn carry(&self, spec: &TaskSpec, k: usize, from: Pose2D, out: &mut Vec<Waypoint>) -> Pose2D {
        let p = spec.primitives[k];
        let wp = |phase, target, grip, kind| Waypoint {
            phase,
            primitive: k,
            arm: p.arm,
            target,
            grip,
            kind,
        };
        let place = p.place;
        let lift = from.translated(0.0, -self.cfg.lift_offset);
        let above = place.translated(0.0, -self.cfg.lift_offset);
        out.push(wp(PlanPhase::Lift, lift, GRIP_CLOSED, WaypointKind::Motion));
        out.push(wp(PlanPhase::Transport, above, GRIP_CLOSED, WaypointKind::Motion));
        out.push(wp(PlanPhase::Place, place, GRIP_CLOSED, WaypointKind::Motion));
        out.push(wp(PlanPhase::Release, place, GRIP_OPEN, WaypointKind::Grip));
        place
    }

    /// Full pick-and-place waypoints for primitive `k` with the object
    /// expected at `obj`; returns where the object ends up.
    fn pick_and_place(
        &self,
        spec: &TaskSpec,
        k: usize,
        obj: Pose2D,
        arm_theta: f64,
        recovery: bool,
        out: &mut Vec<Waypoint>,
    ) -> Pose2D {
        let p = spec.primitives[k];
        let wp = |phase, target, grip, kind| Waypoint {
            phase,
            primitive: k,
            arm: p.arm,
            target,
            grip,
            kind,
        };
        // Pick the jaw heading closest to the arm's current one.
        let theta = arm_theta + axial_diff(obj.theta, arm_theta);
        let at = obj.with_theta(theta);
        let (approach, grasp) = if recovery {
            (PlanPhase::ReApproach, PlanPhase::ReGrasp)
        } else {
            (PlanPhase::Approach, PlanPhase::Grasp)
        };
        out.push(wp(approach, self.pregrasp(&at), GRIP_OPEN, WaypointKind::Motion));
        out.push(wp(grasp, at, GRIP_OPEN, WaypointKind::Motion));
        out.push(wp(grasp, at, GRIP_CLOSED, WaypointKind::Grip));
        self.carry(spec, k, at, out)
    }

    /// Appends nominal waypoints for primitives `from..`, tracking expected
    /// object poses as earlier primitives move them.
    fn nominal_tail(
        &self,
        spec: &TaskSpec,
        from: usize,
        mut objects: Vec<Pose2D>,
        mut arm_theta: [f64; 2],
        out: &mut Vec<Waypoint>,
    ) -> Result<()> {
        for k in from..spec.primitives.len() {
            let p = spec.primitives[k];
            let obj = objects[p.object];
            self.check_reachable(p.arm, &obj, "object")?;
            self.check_reachable(p.arm, &self.pregrasp(&obj), "pre-grasp pose")?;
            self.check_reachable(p.arm, &p.place, "place target")?;
            let placed = self.pick_and_place(spec, k, obj, arm_theta[p.arm.index()], false, out);
            objects[p.object] = placed;
            arm_theta[p.arm.index()] = placed.theta;
        }
        Ok(())
    }

    pub fn plan_nominal(&self, task: TaskId, state: &WorldState) -> Result<Plan> {
        let spec = task.spec();
        if state.objects.len() != spec.canonical.len() {
            return Err(Error::Planning(format!(
                "{task} expects {} objects, state has {}",
                spec.canonical.len(),
                state.objects.len()
            )));
        }
        let objects = state.objects.iter().map(|o| o.pose).collect();
        let theta = [state.arm_poses[0].theta, state.arm_poses[1].theta];
        let mut waypoints = Vec::new();
        self.nominal_tail(&spec, 0, objects, theta, &mut waypoints)?;
        Ok(Plan { task, waypoints })
    }

    /// Index of the primitive a recovery should resume from: the one after
    /// the latest already-completed primitive.
    fn resume_primitive(&self, spec: &TaskSpec, state: &WorldState) -> usize {
        (0..spec.primitives.len())
            .rev()
            .find(|&k| spec.primitive_done(k, state, self.sim.goal_radius))
            .map_or(0, |k| k + 1)
    }

    /// Corrective plan built from the live state only.
    pub fn plan_recovery(&self, task: TaskId, state: &WorldState) -> Result<Plan> {
        self.plan_from_state(task, state, true)
    }

    /// Nominal-phase plan that finishes the task from an arbitrary mid-task
    /// state, used to hand control from another controller to the expert.
    pub fn plan_continuation(&self, task: TaskId, state: &WorldState) -> Result<Plan> {
        self.plan_from_state(task, state, false)
    }

    fn plan_from_state(&self, task: TaskId, state: &WorldState, recovery: bool) -> Result<Plan> {
        let spec = task.spec();
        for o in &state.objects {
            if !self.sim.workspace.contains(&o.pose) {
                return Err(Error::Unrecoverable(format!("object {} left the workspace", o.id)));
            }
        }
        let mut k = self.resume_primitive(&spec, state);
        if k >= spec.primitives.len() {
            return Err(Error::Planning("task already complete".into()));
        }
        // Skip ahead to a later primitive on the same object when the current
        // arm can no longer reach it (e.g. dropped past the handover point).
        while !self.sim.reachable(spec.primitives[k].arm, &state.objects[spec.primitives[k].object].pose) {
            let obj = spec.primitives[k].object;
            match (k + 1..spec.primitives.len()).find(|&j| spec.primitives[j].object == obj) {
                Some(j) => k = j,
                None => {
                    return Err(Error::Unrecoverable(format!(
                        "object {obj} is out of reach for the {:?} arm",
                        spec.primitives[k].arm
                    )))
                }
            }
        }

        let p = spec.primitives[k];
        let arm_pose = *state.arm_pose(p.arm);
        let held = state.held_by(p.arm) == Some(p.object);
        let mut waypoints = Vec::new();
        if recovery {
            let reopen = state.grip_closed(p.arm) && !held;
            waypoints.push(Waypoint {
                phase: if reopen { PlanPhase::ReOpen } else { PlanPhase::RePerceive },
                primitive: k,
                arm: p.arm,
                target: arm_pose,
                grip: if reopen { GRIP_OPEN } else { state.grips[p.arm.index()] },
                kind: WaypointKind::Grip,
            });
        }

        let mut objects: Vec<Pose2D> = state.objects.iter().map(|o| o.pose).collect();
        let mut theta = [state.arm_poses[0].theta, state.arm_poses[1].theta];
        let placed = if held {
            self.carry(&spec, k, arm_pose, &mut waypoints)
        } else {
            let obj = objects[p.object];
            if !self.sim.reachable(p.arm, &self.pregrasp(&obj)) {
                return Err(Error::Unrecoverable("no reachable pre-grasp pose".into()));
            }
            self.pick_and_place(&spec, k, obj, arm_pose.theta, recovery, &mut waypoints)
        };
        objects[p.object] = placed;
        theta[p.arm.index()] = placed.theta;
        self.nominal_tail(&spec, k + 1, objects, theta, &mut waypoints)?;
        Ok(Plan { task, waypoints })
    }
}

/// Closed-loop executor stepping through a [`Plan`].
///
/// Call [`PlanExecutor::next_action`] exactly once per simulator step.
#[derive(Debug, Clone)]
pub struct PlanExecutor {
    plan: Plan,
    idx: usize,
    steps_in_wp: usize,
    last_pose: Option<Pose2D>,
    sim: SimConfig,
    cfg: PlannerConfig,
}

impl PlanExecutor {
    pub fn new(plan: Plan, planner: &Planner) -> Self {
        Self {
            plan,
            idx: 0,
            steps_in_wp: 0,
            last_pose: None,
            sim: planner.sim.clone(),
            cfg: planner.cfg.clone(),
        }
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn current(&self) -> Option<&Waypoint> {
        self.plan.waypoints.get(self.idx)
    }

    pub fn phase(&self) -> Option<PlanPhase> {
        self.current().map(|w| w.phase)
    }

    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn is_exhausted(&self) -> bool {
        self.idx >= self.plan.waypoints.len()
    }

    fn done(&self, w: &Waypoint, state: &WorldState) -> bool {
        match w.kind {
            WaypointKind::Grip => self.steps_in_wp >= self.cfg.grip_dwell.max(1),
            WaypointKind::Motion => {
                let pose = state.arm_pose(w.arm);
                let goal = self.sim.clamp_target(w.arm, &w.target);
                let arrived = pose.dist(&goal) <= self.cfg.pos_tol
                    && crate::sim::wrap_angle(pose.theta - goal.theta).abs() <= self.cfg.ang_tol;
                // An arm steered elsewhere (e.g. by an override) counts as
                // done once it stops moving.
                let settled = self.steps_in_wp >= 1 && self.last_pose == Some(*pose);
                arrived || settled
            }
        }
    }

    pub fn next_action(&mut self, state: &WorldState) -> Result<BimanualAction> {
        while let Some(w) = self.current().copied() {
            if !self.done(&w, state) {
                break;
            }
            self.idx += 1;
            self.steps_in_wp = 0;
        }
        let Some(w) = self.current().copied() else {
            return Err(Error::PlanExhausted);
        };
        let mut action = BimanualAction::hold(state);
        let cmd = action.arm_mut(w.arm);
        cmd.target = w.target;
        cmd.grip = w.grip;
        self.steps_in_wp += 1;
        self.last_pose = Some(*state.arm_pose(w.arm));
        Ok(action)
    }
}

/// Outcome of executing a plan to completion.
#[derive(Debug, Clone)]
pub struct PlanRun {
    pub states: Vec<WorldState>,
    pub actions: Vec<BimanualAction>,
    pub success: bool,
}

/// Executes `plan` from `state` until it is exhausted or `max_steps` elapse.
pub fn execute(sim: &Sim, planner: &Planner, plan: Plan, state: &WorldState, max_steps: usize) -> Result<PlanRun> {
    let task = plan.task;
    let mut exec = PlanExecutor::new(plan, planner);
    let mut st = state.clone();
    let mut states = vec![st.clone()];
    let mut actions = Vec::new();
    for _ in 0..max_steps {
        let a = match exec.next_action(&st) {
            Ok(a) => a,
            Err(Error::PlanExhausted) => break,
            Err(e) => return Err(e),
        };
        st = sim.step(&st, &a)?;
        states.push(st.clone());
        actions.push(a);
    }
    let success = sim.success_check(task, &st);
    Ok(PlanRun {
        states,
        actions,
        success,
    })
}
