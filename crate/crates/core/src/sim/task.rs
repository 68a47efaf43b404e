//! Task targets, success scoring and the geometric steering rule shared by
//! the oracle annotator, the scripted agents and the oracle planner.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::geometry::{dist, dot, sub, Point};
use super::scene::{Scene, StructureKind};
use crate::model::{AtomicLabel, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Object { object: String },
    Side { object: String, side: Side },
    Structure { structure: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Object,
    Referential,
    Continuous,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Object, Category::Referential, Category::Continuous];

    pub fn of(target: &Target) -> Category {
        match target {
            Target::Object { .. } => Category::Object,
            Target::Side { .. } => Category::Referential,
            Target::Structure { .. } => Category::Continuous,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Object => "object",
            Category::Referential => "referential",
            Category::Continuous => "continuous",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub category: Category,
    pub instruction: String,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuccessThresholds {
    /// Object tasks: distance from the robot center to the object surface.
    pub object_distance: f64,
    /// Referential tasks: distance to the side anchor.
    pub side_distance: f64,
    /// Gap between the object surface and its side anchor.
    pub side_clearance: f64,
    /// Continuous tasks: distance to the structure.
    pub structure_distance: f64,
    /// Continuous tasks: progress along the structure while within range.
    pub structure_progress: f64,
}

impl Default for SuccessThresholds {
    fn default() -> Self {
        Self {
            object_distance: 0.5,
            side_distance: 0.6,
            side_clearance: 0.7,
            structure_distance: 1.0,
            structure_progress: 2.0,
        }
    }
}

/// Incremental success check over a pose sequence.
#[derive(Debug, Clone)]
pub struct Tracker<'a> {
    scene: &'a Scene,
    target: &'a Target,
    th: &'a SuccessThresholds,
    run_start: Option<f64>,
    pub succeeded: bool,
}

impl<'a> Tracker<'a> {
    pub fn new(scene: &'a Scene, target: &'a Target, th: &'a SuccessThresholds) -> Self {
        Self {
            scene,
            target,
            th,
            run_start: None,
            succeeded: false,
        }
    }

    /// Feeds the next position; returns whether the task has succeeded.
    pub fn update(&mut self, p: Point) -> bool {
        if self.succeeded {
            return true;
        }
        self.succeeded = match self.target {
            Target::Object { object } => self
                .scene
                .object(object)
                .is_some_and(|o| dist(p, o.position) - o.radius <= self.th.object_distance),
            Target::Side { object, side } => self.scene.object(object).is_some_and(|o| {
                dist(p, self.scene.side_anchor(o, *side, self.th.side_clearance)) <= self.th.side_distance
            }),
            Target::Structure { structure } => {
                let Some(s) = self.scene.structure(structure) else {
                    return false;
                };
                let (d, along) = s.polyline().project(p);
                if d <= self.th.structure_distance {
                    let start = *self.run_start.get_or_insert(along);
                    along - start >= self.th.structure_progress
                } else {
                    self.run_start = None;
                    false
                }
            }
        };
        self.succeeded
    }
}

/// Whether the polyline through `points` completes the task. Segments are
/// densified so sparse samples are scored like a dense path.
pub fn satisfied_by(scene: &Scene, target: &Target, th: &SuccessThresholds, points: &[Point]) -> bool {
    let mut tracker = Tracker::new(scene, target, th);
    let Some(&first) = points.first() else {
        return false;
    };
    if tracker.update(first) {
        return true;
    }
    for w in points.windows(2) {
        let n = (dist(w[0], w[1]) / 0.05).ceil().max(1.0) as usize;
        for k in 1..=n {
            let t = k as f64 / n as f64;
            let p = [w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])];
            if tracker.update(p) {
                return true;
            }
        }
    }
    false
}

/// Where to steer for `target` from `pose`, and whether the robot is close
/// enough to stop.
pub fn steering_point(scene: &Scene, target: &Target, pose: &Pose, th: &SuccessThresholds) -> Option<(Point, bool)> {
    const LOOKAHEAD: f64 = 1.5;
    let p = [pose.x, pose.y];
    Some(match target {
        Target::Object { object } => {
            let o = scene.object(object)?;
            (o.position, dist(p, o.position) - o.radius <= 0.7 * th.object_distance)
        }
        Target::Side { object, side } => {
            let anchor = scene.side_anchor(scene.object(object)?, *side, th.side_clearance);
            (anchor, dist(p, anchor) <= 0.5 * th.side_distance)
        }
        Target::Structure { structure } => {
            let s = scene.structure(structure)?;
            let line = s.polyline();
            let (_, along) = line.project(p);
            let ahead = (along + LOOKAHEAD).min(line.length());
            let mut q = line.point_at(ahead);
            if s.kind == StructureKind::Wall {
                let dir = line.direction_at(along);
                let mut n = [-dir[1], dir[0]];
                if dot(n, sub(p, line.point_at(along))) < 0.0 {
                    n = [-n[0], -n[1]];
                }
                let offset = 0.6 * th.structure_distance;
                q = [q[0] + n[0] * offset, q[1] + n[1] * offset];
            }
            (q, along >= line.length() - 0.5)
        }
    })
}

/// The atomic command that heads toward `target`: stop when close, go forward
/// within 10 degrees, adjust within 30, turn beyond.
pub fn command_toward(scene: &Scene, target: &Target, pose: &Pose, th: &SuccessThresholds) -> Option<AtomicLabel> {
    let (point, close) = steering_point(scene, target, pose, th)?;
    if close {
        return Some(AtomicLabel::Stop);
    }
    let b = scene.bearing(pose, point).to_degrees();
    Some(match b {
        b if b.abs() < 10.0 => AtomicLabel::GoForward,
        b if b.abs() <= 30.0 && b > 0.0 => AtomicLabel::AdjustLeft,
        b if b.abs() <= 30.0 => AtomicLabel::AdjustRight,
        b if b > 0.0 => AtomicLabel::TurnLeft,
        _ => AtomicLabel::TurnRight,
    })
}
