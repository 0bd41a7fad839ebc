use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Arm, ObjectState, Pose2D, WorldState};
use crate::error::{Error, Result};

/// Registered toy tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    #[serde(rename = "pick-place")]
    PickPlace,
    #[serde(rename = "stack-two")]
    StackTwo,
    #[serde(rename = "bimanual-handover")]
    BimanualHandover,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::PickPlace, TaskId::StackTwo, TaskId::BimanualHandover];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskId::PickPlace => "pick-place",
            TaskId::StackTwo => "stack-two",
            TaskId::BimanualHandover => "bimanual-handover",
        }
    }

    /// Key of the task's language instruction.
    pub fn instruction_id(&self) -> u32 {
        match self {
            TaskId::PickPlace => 0,
            TaskId::StackTwo => 1,
            TaskId::BimanualHandover => 2,
        }
    }

    pub fn from_instruction_id(id: u32) -> Option<TaskId> {
        TaskId::ALL.into_iter().find(|t| t.instruction_id() == id)
    }

    pub fn spec(&self) -> TaskSpec {
        TaskSpec::for_task(*self)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task id `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvMode {
    Clean,
    Random,
}

impl EnvMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnvMode::Clean => "clean",
            EnvMode::Random => "random",
        }
    }
}

impl fmt::Display for EnvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(EnvMode::Clean),
            "random" => Ok(EnvMode::Random),
            other => Err(Error::Config(format!("unknown env mode `{other}`"))),
        }
    }
}

/// Axis-aligned sampling region for a randomized object pose.
#[derive(Debug, Clone, Copy)]
pub struct Region {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub theta: (f64, f64),
}

impl Region {
    fn sample<R: Rng>(&self, rng: &mut R) -> Pose2D {
        Pose2D::new(
            rng.random_range(self.x.0..self.x.1),
            rng.random_range(self.y.0..self.y.1),
            rng.random_range(self.theta.0..self.theta.1),
        )
    }
}

/// One arm moving one object to a place target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub arm: Arm,
    pub object: usize,
    pub place: Pose2D,
}

/// Static layout and goal description of a task.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub id: TaskId,
    pub homes: [Pose2D; 2],
    pub canonical: Vec<Pose2D>,
    pub regions: Vec<Region>,
    pub primitives: Vec<Primitive>,
}

pub const LEFT_HOME: Pose2D = Pose2D {
    x: -0.35,
    y: -0.3,
    theta: 0.0,
};
pub const RIGHT_HOME: Pose2D = Pose2D {
    x: 0.35,
    y: -0.3,
    theta: 0.0,
};

const RIGHT_REGION: Region = Region {
    x: (0.16, 0.40),
    y: (0.02, 0.24),
    theta: (-0.6, 0.6),
};
const LEFT_REGION: Region = Region {
    x: (-0.40, -0.16),
    y: (0.02, 0.24),
    theta: (-0.6, 0.6),
};

impl TaskSpec {
    pub fn for_task(id: TaskId) -> TaskSpec {
        let homes = [LEFT_HOME, RIGHT_HOME];
        match id {
            TaskId::PickPlace => TaskSpec {
                id,
                homes,
                canonical: vec![Pose2D::new(0.28, 0.12, 0.0)],
                regions: vec![RIGHT_REGION],
                primitives: vec![Primitive {
                    arm: Arm::Right,
                    object: 0,
                    place: Pose2D::new(-0.12, 0.20, 0.0),
                }],
            },
            TaskId::StackTwo => {
                let stack = Pose2D::new(0.0, 0.25, 0.0);
                TaskSpec {
                    id,
                    homes,
                    canonical: vec![Pose2D::new(-0.28, 0.12, 0.0), Pose2D::new(0.28, 0.12, 0.0)],
                    regions: vec![LEFT_REGION, RIGHT_REGION],
                    primitives: vec![
                        Primitive {
                            arm: Arm::Left,
                            object: 0,
                            place: stack,
                        },
                        Primitive {
                            arm: Arm::Right,
                            object: 1,
                            place: stack,
                        },
                    ],
                }
            }
            TaskId::BimanualHandover => TaskSpec {
                id,
                homes,
                canonical: vec![Pose2D::new(0.28, 0.12, 0.0)],
                regions: vec![RIGHT_REGION],
                primitives: vec![
                    Primitive {
                        arm: Arm::Right,
                        object: 0,
                        place: Pose2D::new(0.0, 0.05, 0.0),
                    },
                    Primitive {
                        arm: Arm::Left,
                        object: 0,
                        place: Pose2D::new(-0.30, 0.20, 0.0),
                    },
                ],
            },
        }
    }

    /// The primitive whose grasp is the critical node for error injection.
    pub fn designated(&self) -> Primitive {
        self.primitives[0]
    }

    pub fn initial_objects<R: Rng>(&self, mode: EnvMode, rng: &mut R) -> Vec<ObjectState> {
        self.canonical
            .iter()
            .zip(&self.regions)
            .enumerate()
            .map(|(id, (canon, region))| ObjectState {
                id,
                pose: match mode {
                    EnvMode::Clean => *canon,
                    EnvMode::Random => region.sample(rng),
                },
                held_by: None,
            })
            .collect()
    }

    /// Goal predicate; `goal_radius` is the placement tolerance.
    pub fn is_success(&self, state: &WorldState, goal_radius: f64) -> bool {
        let placed = |obj: usize, at: &Pose2D| {
            state
                .objects
                .get(obj)
                .is_some_and(|o| o.held_by.is_none() && o.pose.dist(at) <= goal_radius)
        };
        match self.id {
            TaskId::PickPlace | TaskId::BimanualHandover => {
                let last = self.primitives.last().expect("task has primitives");
                placed(last.object, &last.place)
            }
            TaskId::StackTwo => {
                let base = &self.primitives[0];
                placed(base.object, &base.place)
                    && placed(self.primitives[1].object, &state.objects[base.object].pose)
            }
        }
    }

    /// True when primitive `k`'s object rests unheld at its place target.
    pub fn primitive_done(&self, k: usize, state: &WorldState, goal_radius: f64) -> bool {
        let p = &self.primitives[k];
        state
            .objects
            .get(p.object)
            .is_some_and(|o| o.held_by.is_none() && o.pose.dist(&p.place) <= goal_radius)
    }
}
