use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a - TAU * ((a + PI) / TAU).floor();
    if w <= -PI {
        w += TAU;
    }
    if w > PI {
        w -= TAU;
    }
    w
}

/// Signed difference `a - b` modulo π, in `(-π/2, π/2]`.
///
/// Parallel-jaw grippers are symmetric under a half turn, so grasp alignment
/// is measured on this axis rather than on the full circle.
pub fn axial_diff(a: f64, b: f64) -> f64 {
    let d = wrap_angle(2.0 * (a - b)) / 2.0;
    if d <= -PI / 2.0 {
        d + PI
    } else {
        d
    }
}

/// Planar end-effector or object pose. `theta` is kept in `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn dist(&self, other: &Pose2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Pose2D {
        Pose2D::new(self.x + dx, self.y + dy, self.theta)
    }

    pub fn with_theta(&self, theta: f64) -> Pose2D {
        Pose2D::new(self.x, self.y, theta)
    }
}
