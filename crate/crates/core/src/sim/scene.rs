//! Scenes: a bounded workspace with walls, non-colliding paths and disc
//! objects, loaded from TOML.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::geometry::{dist, point_segment, ray_circle, ray_segment, segment_segment, Point, Polyline};
use super::task::{Side, TaskSpec, Target};
use crate::error::{Error, Result};
use crate::model::{wrap_angle, Pose};

pub const RAY_COUNT: usize = 9;
pub const RAY_SPREAD_DEG: f64 = 120.0;
pub const RAY_RANGE: f64 = 6.0;
pub const OBJECT_SLOTS: usize = 4;
pub const APPEARANCE_DIM: usize = 3;
pub const APPEARANCE_WEIGHT: f64 = 2.0;
pub const FEATURE_DIM: usize = RAY_COUNT + 3 * OBJECT_SLOTS + APPEARANCE_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    /// Collidable; instructions read "Move along the <name>".
    Wall,
    /// Free space; instructions read "Move down the <name>".
    Path,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub name: String,
    pub kind: StructureKind,
    pub points: Vec<Point>,
}

impl Structure {
    pub fn polyline(&self) -> Polyline<'_> {
        Polyline { points: &self.points }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    #[serde(default)]
    pub tags: Vec<String>,
    pub position: Point,
    pub radius: f64,
}

impl SceneObject {
    /// Name with attribute tags, e.g. "red chair".
    pub fn phrase(&self) -> String {
        let mut words = self.tags.clone();
        words.push(self.name.clone());
        words.join(" ")
    }
}

/// The route scripted "default" trajectories take from the entry pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefaultRoute {
    pub entry: Pose,
    pub waypoints: Vec<Point>,
    pub goal: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    pub seed: u64,
    /// Coarse appearance descriptor that lets features tell scenes apart.
    pub appearance: [f64; APPEARANCE_DIM],
    /// `[xmin, ymin, xmax, ymax]`; the boundary is collidable.
    pub bounds: [f64; 4],
    #[serde(default = "default_radius")]
    pub robot_radius: f64,
    /// Evaluation start pose. Its heading defines "left" and "right" for
    /// side relations.
    pub start: Pose,
    #[serde(default)]
    pub structures: Vec<Structure>,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_route: Option<DefaultRoute>,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
}

fn default_radius() -> f64 {
    0.2
}

const BUILTIN: [(&str, &str); 3] = [
    ("corridor", include_str!("../../scenes/corridor.toml")),
    ("kitchen", include_str!("../../scenes/kitchen.toml")),
    ("park", include_str!("../../scenes/park.toml")),
];

impl Scene {
    pub fn from_toml(text: &str) -> Result<Self> {
        let scene: Scene = toml::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::UnknownScene(name.to_string()))?;
        Self::from_toml(text)
    }

    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN.iter().map(|(n, _)| *n).collect()
    }

    pub fn builtin_all() -> Result<Vec<Self>> {
        Self::builtin_names().into_iter().map(Self::builtin).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scene {}: {m}", self.name)));
        let [x0, y0, x1, y1] = self.bounds;
        if !(x0 < x1 && y0 < y1) {
            return bad("empty bounds".into());
        }
        let mut names = BTreeSet::new();
        for o in &self.objects {
            if !names.insert(o.name.as_str()) {
                return bad(format!("duplicate object name {:?}", o.name));
            }
            if o.radius <= 0.0 {
                return bad(format!("object {:?} has non-positive radius", o.name));
            }
            let [x, y] = o.position;
            if x - o.radius < x0 || x + o.radius > x1 || y - o.radius < y0 || y + o.radius > y1 {
                return bad(format!("object {:?} leaves the bounds", o.name));
            }
            for w in self.walls() {
                if point_segment(o.position, w.0, w.1).0 <= o.radius {
                    return bad(format!("object {:?} overlaps a wall", o.name));
                }
            }
        }
        let mut snames = BTreeSet::new();
        for s in &self.structures {
            if !snames.insert(s.name.as_str()) {
                return bad(format!("duplicate structure name {:?}", s.name));
            }
            if s.points.len() < 2 {
                return bad(format!("structure {:?} needs two points", s.name));
            }
            if s.kind == StructureKind::Wall
                && s.points.windows(2).any(|w| w[0][0] != w[1][0] && w[0][1] != w[1][1])
            {
                return bad(format!("wall {:?} is not axis-aligned", s.name));
            }
        }
        if self.collides_at([self.start.x, self.start.y]) {
            return bad("start pose collides".into());
        }
        for t in &self.tasks {
            self.check_target(&t.target)?;
        }
        if let Some(r) = &self.default_route {
            self.check_target(&r.goal)?;
        }
        Ok(())
    }

    fn check_target(&self, target: &Target) -> Result<()> {
        let ok = match target {
            Target::Object { object } | Target::Side { object, .. } => self.object(object).is_some(),
            Target::Structure { structure } => self.structure(structure).is_some(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("scene {}: unknown target {target:?}", self.name)))
        }
    }

    pub fn object(&self, name: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn structure(&self, name: &str) -> Option<&Structure> {
        self.structures.iter().find(|s| s.name == name)
    }

    /// Collidable segments: wall structures and the boundary.
    pub fn walls(&self) -> Vec<(Point, Point)> {
        let [x0, y0, x1, y1] = self.bounds;
        let mut out = vec![
            ([x0, y0], [x1, y0]),
            ([x1, y0], [x1, y1]),
            ([x1, y1], [x0, y1]),
            ([x0, y1], [x0, y0]),
        ];
        for s in self.structures.iter().filter(|s| s.kind == StructureKind::Wall) {
            out.extend(s.points.windows(2).map(|w| (w[0], w[1])));
        }
        out
    }

    /// Clearance between a robot centered at `p` and the nearest obstacle.
    pub fn clearance(&self, p: Point) -> f64 {
        let walls = self.walls().iter().map(|w| point_segment(p, w.0, w.1).0).fold(f64::INFINITY, f64::min);
        let objs = self
            .objects
            .iter()
            .map(|o| dist(p, o.position) - o.radius)
            .fold(f64::INFINITY, f64::min);
        walls.min(objs) - self.robot_radius
    }

    pub fn collides_at(&self, p: Point) -> bool {
        self.clearance(p) < 0.0
    }

    /// Whether the robot disc swept from `p` to `q` touches any obstacle.
    pub fn collides(&self, p: Point, q: Point) -> bool {
        let r = self.robot_radius;
        let [x0, y0, x1, y1] = self.bounds;
        let inside = |a: Point| a[0] - r >= x0 && a[0] + r <= x1 && a[1] - r >= y0 && a[1] + r <= y1;
        if !inside(p) || !inside(q) {
            return true;
        }
        self.walls().iter().any(|w| segment_segment(p, q, w.0, w.1) < r)
            || self
                .objects
                .iter()
                .any(|o| point_segment(o.position, p, q).0 < r + o.radius)
    }

    /// Whether any step of a pose sequence collides.
    pub fn path_collides(&self, poses: &[Pose]) -> bool {
        poses
            .windows(2)
            .any(|w| self.collides([w[0].x, w[0].y], [w[1].x, w[1].y]))
    }

    /// Range readings, object bearings and the appearance descriptor.
    pub fn features(&self, pose: &Pose) -> Vec<f64> {
        let origin = [pose.x, pose.y];
        let walls = self.walls();
        let mut out = Vec::with_capacity(FEATURE_DIM);
        for i in 0..RAY_COUNT {
            let rel = (-RAY_SPREAD_DEG + i as f64 * 2.0 * RAY_SPREAD_DEG / (RAY_COUNT - 1) as f64).to_radians();
            let a = pose.yaw + rel;
            let dir = [a.cos(), a.sin()];
            let hit = walls
                .iter()
                .filter_map(|w| ray_segment(origin, dir, w.0, w.1))
                .chain(self.objects.iter().filter_map(|o| ray_circle(origin, dir, o.position, o.radius)))
                .fold(RAY_RANGE, f64::min);
            out.push(hit / RAY_RANGE);
        }
        for slot in 0..OBJECT_SLOTS {
            match self.objects.get(slot) {
                Some(o) => {
                    let b = self.bearing(pose, o.position);
                    out.extend([b.cos(), b.sin(), dist(origin, o.position).min(RAY_RANGE) / RAY_RANGE]);
                }
                None => out.extend([0.0, 0.0, 1.0]),
            }
        }
        out.extend(self.appearance.iter().map(|a| a * APPEARANCE_WEIGHT));
        out
    }

    /// Bearing of `p` in the robot frame, in (-pi, pi].
    pub fn bearing(&self, pose: &Pose, p: Point) -> f64 {
        wrap_angle((p[1] - pose.y).atan2(p[0] - pose.x) - pose.yaw)
    }

    /// Unit vector pointing to the scene's left.
    pub fn left_normal(&self) -> Point {
        [-self.start.yaw.sin(), self.start.yaw.cos()]
    }

    /// The point beside an object that a side relation refers to.
    pub fn side_anchor(&self, object: &SceneObject, side: Side, clearance: f64) -> Point {
        let n = self.left_normal();
        let s = match side {
            Side::Left => 1.0,
            Side::Right => -1.0,
        };
        let off = s * (object.radius + clearance);
        [object.position[0] + n[0] * off, object.position[1] + n[1] * off]
    }

    /// Canonical instruction for a target.
    pub fn instruction(&self, target: &Target) -> String {
        match target {
            Target::Object { object } => format!("Move to the {}", self.phrase(object)),
            Target::Side { object, side } => format!("Move to the {side} of the {}", self.phrase(object)),
            Target::Structure { structure } => match self.structure(structure).map(|s| s.kind) {
                Some(StructureKind::Path) => format!("Move down the {structure}"),
                _ => format!("Move along the {structure}"),
            },
        }
    }

    fn phrase(&self, object: &str) -> String {
        self.object(object).map_or_else(|| object.to_string(), SceneObject::phrase)
    }

    /// Every target the scene can name, in a fixed order.
    pub fn targets(&self) -> Vec<Target> {
        let mut out = Vec::new();
        for o in &self.objects {
            out.push(Target::Object { object: o.name.clone() });
            for side in [Side::Left, Side::Right] {
                out.push(Target::Side {
                    object: o.name.clone(),
                    side,
                });
            }
        }
        out.extend(self.structures.iter().map(|s| Target::Structure {
            structure: s.name.clone(),
        }));
        out
    }

    /// Maps an instruction back to a target: exact canonical match first,
    /// then the unique best bag-of-words match.
    pub fn resolve(&self, instruction: &str) -> Option<Target> {
        let norm = crate::text::normalize(instruction);
        let targets = self.targets();
        if let Some(t) = targets.iter().find(|t| crate::text::normalize(&self.instruction(t)) == norm) {
            return Some(t.clone());
        }
        let query = crate::text::BagOfTokens::new(instruction);
        let mut scored: Vec<(f64, &Target)> = targets
            .iter()
            .map(|t| (query.cosine(&crate::text::BagOfTokens::new(&self.instruction(t))), t))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        match scored.as_slice() {
            [(best, t), rest @ ..] if *best >= 0.75 && rest.first().is_none_or(|r| r.0 < *best) => Some((*t).clone()),
            _ => None,
        }
    }
}

/// Heading in degrees, for readable descriptions.
pub fn degrees(rad: f64) -> f64 {
    rad * 180.0 / PI
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_load_and_validate() {
        for s in Scene::builtin_all().unwrap() {
            assert_eq!(s.tasks.len(), 9, "{}", s.name);
            assert!(s.default_route.is_some());
            assert_eq!(s.features(&s.start).len(), FEATURE_DIM);
            for t in s.targets() {
                assert_eq!(s.resolve(&s.instruction(&t)), Some(t.clone()));
            }
        }
        assert!(matches!(Scene::builtin("moon"), Err(Error::UnknownScene(_))));
    }

    #[test]
    fn swept_collision() {
        let s = Scene::builtin("corridor").unwrap();
        let o = &s.objects[0];
        let before = [o.position[0] - o.radius - 1.0, o.position[1]];
        let after = [o.position[0] + o.radius + 1.0, o.position[1]];
        assert!(!s.collides_at(before) && !s.collides_at(after));
        assert!(s.collides(before, after));
        assert!(s.collides([0.0, 0.0], [0.0, 100.0]));
        assert!(!s.collides([0.0, 0.0], [0.25, 0.0]));
    }

    #[test]
    fn invalid_scenes_are_rejected() {
        let mut s = Scene::builtin("corridor").unwrap();
        s.objects[1].name = s.objects[0].name.clone();
        assert!(s.validate().is_err());
        let mut s = Scene::builtin("corridor").unwrap();
        let wall = s.structures.iter().find(|x| x.kind == StructureKind::Wall).unwrap().points[0];
        s.objects[0].position = wall;
        assert!(s.validate().is_err());
    }

    #[test]
    fn features_see_the_wall_ahead() {
        let s = Scene::builtin("corridor").unwrap();
        let facing_wall = Pose::new(s.bounds[2] - 1.0, 1.5, 0.0);
        let f = s.features(&facing_wall);
        // the middle ray points straight ahead
        assert!((f[RAY_COUNT / 2] * RAY_RANGE - 1.0).abs() < 1e-9);
    }
}
