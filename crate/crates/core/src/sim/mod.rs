//! Deterministic planar bimanual world.
//!
//! The world is viewed top-down. Each arm is reduced to an end-effector pose
//! and a scalar gripper command; objects are rigid planar poses that either
//! rest on the table or follow the arm holding them. Motion is kinematic:
//! every step the end-effectors move toward their absolute targets, limited
//! per axis by `v_max * dt` and in heading by `omega_max * dt`.

mod pose;
mod task;

pub use pose::{axial_diff, wrap_angle, Pose2D};
pub use task::{EnvMode, Primitive, Region, TaskId, TaskSpec, LEFT_HOME, RIGHT_HOME};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grip values at or above this are "closed".
pub const GRIP_THRESHOLD: f64 = 0.5;
pub const GRIP_OPEN: f64 = 0.0;
pub const GRIP_CLOSED: f64 = 1.0;

/// Objects represented in every observation (absent ones are zero-filled).
pub const MAX_OBJECTS: usize = 2;
pub const PROPRIO_DIM: usize = 10;
pub const OBJECT_FEAT_DIM: usize = MAX_OBJECTS * 2 * 4;
pub const OBS_DIM: usize = PROPRIO_DIM + OBJECT_FEAT_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Workspace {
    pub fn contains(&self, p: &Pose2D) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub v_max: f64,
    pub omega_max: f64,
    pub grasp_radius: f64,
    pub goal_radius: f64,
    /// Maximum axial misalignment (rad) at which a closing gripper still holds.
    pub grasp_angle_tol: f64,
    /// Distance a misaligned closing gripper nudges the object away.
    pub misgrasp_push: f64,
    pub workspace: Workspace,
    /// Each arm may reach this far past the center line into the other half.
    pub reach_overlap: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            v_max: 0.5,
            omega_max: 2.0,
            grasp_radius: 0.03,
            goal_radius: 0.05,
            grasp_angle_tol: 0.35,
            misgrasp_push: 0.02,
            workspace: Workspace {
                x_min: -0.6,
                x_max: 0.6,
                y_min: -0.4,
                y_max: 0.4,
            },
            reach_overlap: 0.2,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("v_max", self.v_max),
            ("omega_max", self.omega_max),
            ("grasp_radius", self.grasp_radius),
            ("goal_radius", self.goal_radius),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("sim.{k} must be positive, got {v}")));
            }
        }
        let w = &self.workspace;
        if !(w.x_min < w.x_max && w.y_min < w.y_max) {
            return Err(Error::Config("sim.workspace bounds are empty".into()));
        }
        Ok(())
    }

    pub fn max_step(&self) -> f64 {
        self.v_max * self.dt
    }

    pub fn max_turn(&self) -> f64 {
        self.omega_max * self.dt
    }

    /// Horizontal band an arm can reach.
    pub fn reach_x(&self, arm: Arm) -> (f64, f64) {
        let w = &self.workspace;
        match arm {
            Arm::Left => (w.x_min, self.reach_overlap.min(w.x_max)),
            Arm::Right => ((-self.reach_overlap).max(w.x_min), w.x_max),
        }
    }

    pub fn reachable(&self, arm: Arm, p: &Pose2D) -> bool {
        let (lo, hi) = self.reach_x(arm);
        self.workspace.contains(p) && p.x >= lo && p.x <= hi
    }

    pub fn clamp_target(&self, arm: Arm, p: &Pose2D) -> Pose2D {
        let (lo, hi) = self.reach_x(arm);
        Pose2D::new(
            p.x.clamp(lo, hi),
            p.y.clamp(self.workspace.y_min, self.workspace.y_max),
            p.theta,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Left,
    Right,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Left, Arm::Right];

    pub fn index(self) -> usize {
        match self {
            Arm::Left => 0,
            Arm::Right => 1,
        }
    }

    pub fn other(self) -> Arm {
        match self {
            Arm::Left => Arm::Right,
            Arm::Right => Arm::Left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmAction {
    /// Absolute end-effector target.
    pub target: Pose2D,
    /// 0 = open, 1 = closed.
    pub grip: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BimanualAction {
    pub left: ArmAction,
    pub right: ArmAction,
}

/// Width of the flat action vector: `(x, y, theta, grip)` per arm.
pub const ACTION_DIM: usize = 8;

impl BimanualAction {
    /// Both arms hold their current pose and grip.
    pub fn hold(state: &WorldState) -> Self {
        let a = |arm: Arm| ArmAction {
            target: state.arm_poses[arm.index()],
            grip: state.grips[arm.index()],
        };
        Self {
            left: a(Arm::Left),
            right: a(Arm::Right),
        }
    }

    pub fn arm(&self, arm: Arm) -> &ArmAction {
        match arm {
            Arm::Left => &self.left,
            Arm::Right => &self.right,
        }
    }

    pub fn arm_mut(&mut self, arm: Arm) -> &mut ArmAction {
        match arm {
            Arm::Left => &mut self.left,
            Arm::Right => &mut self.right,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.left, self.right]
            .iter()
            .all(|a| a.target.is_finite() && a.grip.is_finite())
    }

    pub fn to_vec(&self) -> [f64; ACTION_DIM] {
        let l = &self.left;
        let r = &self.right;
        [
            l.target.x, l.target.y, l.target.theta, l.grip, r.target.x, r.target.y, r.target.theta, r.grip,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != ACTION_DIM {
            return Err(Error::Dim {
                what: "action",
                expected: ACTION_DIM,
                got: v.len(),
            });
        }
        let a = |o: usize| ArmAction {
            target: Pose2D::new(v[o], v[o + 1], v[o + 2]),
            grip: v[o + 3],
        };
        Ok(Self {
            left: a(0),
            right: a(4),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: usize,
    pub pose: Pose2D,
    pub held_by: Option<Arm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub arm_poses: [Pose2D; 2],
    pub grips: [f64; 2],
    pub objects: Vec<ObjectState>,
    pub t: usize,
    pub task_id: TaskId,
    pub rng_seed: u64,
}

impl WorldState {
    pub fn arm_pose(&self, arm: Arm) -> &Pose2D {
        &self.arm_poses[arm.index()]
    }

    pub fn grip_closed(&self, arm: Arm) -> bool {
        self.grips[arm.index()] >= GRIP_THRESHOLD
    }

    /// Object currently held by `arm`, if any.
    pub fn held_by(&self, arm: Arm) -> Option<usize> {
        self.objects.iter().find(|o| o.held_by == Some(arm)).map(|o| o.id)
    }
}

/// State-derived stand-in for the camera stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Per arm: x, y, sin θ, cos θ, grip.
    pub proprio: Vec<f64>,
    /// Per object slot and per gripper: dx, dy, sin 2Δθ, cos 2Δθ.
    pub object_feats: Vec<f64>,
    pub instruction_id: u32,
}

impl Observation {
    /// All-zero padding observation for empty history slots.
    pub fn padding() -> Self {
        Self {
            proprio: vec![0.0; PROPRIO_DIM],
            object_feats: vec![0.0; OBJECT_FEAT_DIM],
            instruction_id: 0,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(OBS_DIM);
        v.extend_from_slice(&self.proprio);
        v.extend_from_slice(&self.object_feats);
        v
    }

    pub fn write_into(&self, out: &mut [f64]) {
        out[..PROPRIO_DIM].copy_from_slice(&self.proprio);
        out[PROPRIO_DIM..OBS_DIM].copy_from_slice(&self.object_feats);
    }

    pub fn dim(&self) -> usize {
        self.proprio.len() + self.object_feats.len()
    }
}

// Observations are quantized to the f32 grid so stored episodes stay compact
// and round-trip exactly through text.
fn q(v: f64) -> f64 {
    v as f32 as f64
}

/// The simulator: a pure function bundle over [`WorldState`] values.
#[derive(Debug, Clone, Default)]
pub struct Sim {
    pub cfg: SimConfig,
}

impl Sim {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn reset(&self, task: TaskId, mode: EnvMode, seed: u64) -> WorldState {
        let spec = task.spec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WorldState {
            arm_poses: spec.homes,
            grips: [GRIP_OPEN; 2],
            objects: spec.initial_objects(mode, &mut rng),
            t: 0,
            task_id: task,
            rng_seed: seed,
        }
    }

    /// Like [`Sim::reset`] but takes the task key as a string.
    pub fn reset_named(&self, task: &str, mode: EnvMode, seed: u64) -> Result<WorldState> {
        Ok(self.reset(task.parse()?, mode, seed))
    }

    pub fn step(&self, state: &WorldState, action: &BimanualAction) -> Result<WorldState> {
        if !action.is_finite() {
            return Err(Error::Input(format!("non-finite action at t={}", state.t)));
        }
        let mut next = state.clone();
        let dp = self.cfg.max_step();
        let dw = self.cfg.max_turn();

        for arm in Arm::BOTH {
            let cmd = action.arm(arm);
            let target = self.cfg.clamp_target(arm, &cmd.target);
            let cur = state.arm_poses[arm.index()];
            next.arm_poses[arm.index()] = Pose2D::new(
                cur.x + (target.x - cur.x).clamp(-dp, dp),
                cur.y + (target.y - cur.y).clamp(-dp, dp),
                cur.theta + wrap_angle(target.theta - cur.theta).clamp(-dw, dw),
            );
        }
        for obj in next.objects.iter_mut() {
            if let Some(arm) = obj.held_by {
                obj.pose = next.arm_poses[arm.index()];
            }
        }

        for arm in Arm::BOTH {
            let i = arm.index();
            let old = state.grips[i];
            let new = action.arm(arm).grip.clamp(0.0, 1.0);
            next.grips[i] = new;
            let closing = old < GRIP_THRESHOLD && new >= GRIP_THRESHOLD;
            let opening = old >= GRIP_THRESHOLD && new < GRIP_THRESHOLD;
            if closing && next.held_by(arm).is_none() {
                self.try_grasp(&mut next, arm);
            } else if opening {
                for obj in next.objects.iter_mut().filter(|o| o.held_by == Some(arm)) {
                    obj.held_by = None;
                }
            }
        }
        next.t += 1;
        Ok(next)
    }

    fn try_grasp(&self, state: &mut WorldState, arm: Arm) {
        let gripper = state.arm_poses[arm.index()];
        let nearest = state
            .objects
            .iter()
            .filter(|o| o.held_by.is_none())
            .map(|o| (o.id, o.pose.dist(&gripper)))
            .filter(|&(_, d)| d <= self.cfg.grasp_radius)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let Some((id, d)) = nearest else { return };
        let obj = &mut state.objects[id];
        if axial_diff(obj.pose.theta, gripper.theta).abs() <= self.cfg.grasp_angle_tol {
            obj.held_by = Some(arm);
            obj.pose = gripper;
        } else if self.cfg.misgrasp_push > 0.0 {
            // Misaligned jaws shove the object away from the gripper center.
            let (ux, uy) = if d > 1e-9 {
                ((obj.pose.x - gripper.x) / d, (obj.pose.y - gripper.y) / d)
            } else {
                (-gripper.theta.sin(), gripper.theta.cos())
            };
            let push = self.cfg.misgrasp_push;
            obj.pose = obj.pose.translated(ux * push, uy * push);
        }
    }

    pub fn observe(&self, state: &WorldState) -> Observation {
        let mut proprio = Vec::with_capacity(PROPRIO_DIM);
        for arm in Arm::BOTH {
            let p = state.arm_pose(arm);
            proprio.extend([p.x, p.y, p.theta.sin(), p.theta.cos(), state.grips[arm.index()]].map(q));
        }
        let mut object_feats = vec![0.0; OBJECT_FEAT_DIM];
        for (slot, obj) in state.objects.iter().take(MAX_OBJECTS).enumerate() {
            for arm in Arm::BOTH {
                let g = state.arm_pose(arm);
                let rel = 2.0 * axial_diff(obj.pose.theta, g.theta);
                let o = (slot * 2 + arm.index()) * 4;
                object_feats[o..o + 4].copy_from_slice(
                    &[obj.pose.x - g.x, obj.pose.y - g.y, rel.sin(), rel.cos()].map(q),
                );
            }
        }
        Observation {
            proprio,
            object_feats,
            instruction_id: state.task_id.instruction_id(),
        }
    }

    pub fn success_check(&self, task: TaskId, state: &WorldState) -> bool {
        task.spec().is_success(state, self.cfg.goal_radius)
    }

    pub fn success_check_named(&self, task: &str, state: &WorldState) -> Result<bool> {
        Ok(self.success_check(task.parse()?, state))
    }
}
