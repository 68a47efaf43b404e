//! Ground-truth annotator for simulator observations.
//!
//! Replies are produced in the same text formats a remote model is asked
//! for, so they flow through the same parsers. Every decision reads the true
//! scene geometry from the observation's pose.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::geometry::{dist, Point};
use super::scene::{Scene, StructureKind};
use super::task::{command_toward, satisfied_by, steering_point, SuccessThresholds, Target, Tracker};
use crate::annotate::{AnnotationKind, Annotator, AnnotatorRequest};
use crate::error::{Error, Result};
use crate::hash::sha256_json;
use crate::model::{Action, AtomicLabel, Observation, Payload, Pose};
use crate::policy::{ActionChunk, CHUNK_HORIZON};
use crate::seed::derive_seed;
use crate::text::normalize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub thresholds: SuccessThresholds,
    pub max_per_decision_point: usize,
    /// Step length of the canonical chunks used for feasibility checks.
    pub step: f64,
    pub turn_deg: f64,
    pub adjust_deg: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            thresholds: SuccessThresholds::default(),
            max_per_decision_point: 4,
            step: 0.25,
            turn_deg: 80.0,
            adjust_deg: 20.0,
            seed: 0,
        }
    }
}

impl OracleConfig {
    /// The chunk the oracle imagines for an atomic command.
    pub fn canonical_chunk(&self, label: AtomicLabel) -> ActionChunk {
        let per_step = |total: f64| (total / CHUNK_HORIZON as f64).to_radians();
        let a = match label {
            AtomicLabel::TurnLeft => Action::arc(self.step, per_step(self.turn_deg)),
            AtomicLabel::TurnRight => Action::arc(self.step, -per_step(self.turn_deg)),
            AtomicLabel::AdjustLeft => Action::arc(self.step, per_step(self.adjust_deg)),
            AtomicLabel::AdjustRight => Action::arc(self.step, -per_step(self.adjust_deg)),
            AtomicLabel::GoForward => Action::new(self.step, 0.0),
            AtomicLabel::Stop => Action::ZERO,
        };
        ActionChunk::repeat(a)
    }
}

/// Whether the chunk can be executed from `pose` without touching anything.
pub fn chunk_feasible(scene: &Scene, pose: &Pose, chunk: &ActionChunk) -> bool {
    let mut p = *pose;
    for a in chunk.iter() {
        let q = p.advance(*a);
        if scene.collides([p.x, p.y], [q.x, q.y]) {
            return false;
        }
        p = q;
    }
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alternative {
    pub command: AtomicLabel,
    pub target: Target,
    pub instruction: String,
}

/// Every feasible alternative at a decision point: for each nameable target
/// not already satisfied, the command that heads toward it, kept when it
/// differs from the factual command, its canonical chunk is collision-free,
/// and its instruction is not in `exclude`.
pub fn alternatives(
    scene: &Scene,
    pose: &Pose,
    factual: AtomicLabel,
    exclude: &[String],
    cfg: &OracleConfig,
) -> Vec<Alternative> {
    let excluded: Vec<String> = exclude.iter().map(|e| normalize(e)).collect();
    let mut out = Vec::new();
    for target in scene.targets() {
        let instruction = scene.instruction(&target);
        if excluded.contains(&normalize(&instruction)) {
            continue;
        }
        if Tracker::new(scene, &target, &cfg.thresholds).update([pose.x, pose.y]) {
            continue;
        }
        let Some(command) = command_toward(scene, &target, pose, &cfg.thresholds) else {
            continue;
        };
        if command == factual || !chunk_feasible(scene, pose, &cfg.canonical_chunk(command)) {
            continue;
        }
        out.push(Alternative {
            command,
            target,
            instruction,
        });
    }
    out
}

pub struct OracleAnnotator {
    scenes: BTreeMap<String, Scene>,
    cfg: OracleConfig,
    id: String,
}

impl OracleAnnotator {
    pub fn new(scenes: impl IntoIterator<Item = Scene>, cfg: OracleConfig) -> Self {
        let scenes: BTreeMap<String, Scene> = scenes.into_iter().map(|s| (s.name.clone(), s)).collect();
        let id = format!("oracle:{}", &sha256_json(&(&scenes, &cfg))[..16]);
        Self { scenes, cfg, id }
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    fn locate<'a>(&'a self, obs: &Observation) -> Result<(&'a Scene, Pose)> {
        match &obs.payload {
            Payload::Sim { scene, pose, .. } => {
                let s = self.scenes.get(scene).ok_or_else(|| Error::UnknownScene(scene.clone()))?;
                Ok((s, *pose))
            }
            other => Err(Error::Precondition(format!(
                "oracle annotator needs simulator observations, got {}",
                other.kind()
            ))),
        }
    }

    fn describe(&self, req: &AnnotatorRequest) -> Result<String> {
        let obs = req.images.first().ok_or(Error::MissingField("images"))?;
        let (scene, pose) = self.locate(obs)?;
        let p = [pose.x, pose.y];
        let mut parts = vec![format!("The robot is in the {}.", scene.name)];
        for o in &scene.objects {
            let d = (dist(p, o.position) - o.radius).max(0.0);
            parts.push(format!(
                "The {} is {} meters away {}.",
                o.phrase(),
                fmt_m(d),
                relative(scene.bearing(&pose, o.position).to_degrees())
            ));
        }
        for s in &scene.structures {
            let (d, along) = s.polyline().project(p);
            let q = s.polyline().point_at(along);
            match s.kind {
                StructureKind::Wall => parts.push(format!(
                    "The {} runs {} meters away {}.",
                    s.name,
                    fmt_m(d),
                    relative(scene.bearing(&pose, q).to_degrees())
                )),
                StructureKind::Path if d <= self.cfg.thresholds.structure_distance => {
                    parts.push(format!("The robot is on the {}.", s.name))
                }
                StructureKind::Path => {}
            }
        }
        Ok(parts.join(" "))
    }

    fn poses(&self, req: &AnnotatorRequest) -> Result<(&Scene, Vec<Pose>)> {
        let first = req.images.first().ok_or(Error::MissingField("images"))?;
        let (scene, _) = self.locate(first)?;
        let poses = req
            .images
            .iter()
            .map(|o| self.locate(o).map(|(_, p)| p))
            .collect::<Result<Vec<_>>>()?;
        Ok((scene, poses))
    }

    fn summarize(&self, req: &AnnotatorRequest) -> Result<String> {
        let (scene, poses) = self.poses(req)?;
        let points: Vec<Point> = poses.iter().map(|p| [p.x, p.y]).collect();
        let th = &self.cfg.thresholds;
        let mut instructions = Vec::new();
        let mut reached = Vec::new();
        for target in scene.targets() {
            if satisfied_by(scene, &target, th, &points) {
                if let Target::Object { object } = &target {
                    reached.push(object.clone());
                }
                instructions.push(scene.instruction(&target));
            }
        }
        let fwd = [scene.start.yaw.cos(), scene.start.yaw.sin()];
        let along = |p: Point| p[0] * fwd[0] + p[1] * fwd[1];
        let (first, last) = (points[0], points[points.len() - 1]);
        for o in scene.objects.iter().filter(|o| !reached.contains(&o.name)) {
            let x = along(o.position);
            let near = points.iter().any(|p| dist(*p, o.position) - o.radius <= 1.5);
            if near && along(first) < x && along(last) > x {
                instructions.push(format!("Move past the {}", o.phrase()));
            }
        }
        if instructions.is_empty() {
            let turning: f64 = poses
                .windows(2)
                .map(|w| crate::model::wrap_angle(w[1].yaw - w[0].yaw).abs())
                .sum();
            let manner = if turning.to_degrees() > 60.0 { "winding" } else { "straight" };
            instructions.push(format!("Move in a {manner} way"));
        }
        Ok(json!({
            "instructions": instructions,
            "reasoning": format!("Read from {} observations of the {}.", poses.len(), scene.name),
        })
        .to_string())
    }

    /// Which side of the starting pose an instruction points to, if any.
    fn instruction_side(&self, scene: &Scene, pose: &Pose, text: &str) -> Option<f64> {
        let bearing = match scene.resolve(text) {
            Some(target) => {
                let (point, _) = steering_point(scene, &target, pose, &self.cfg.thresholds)?;
                scene.bearing(pose, point).to_degrees()
            }
            None => {
                let words: Vec<String> = crate::text::tokens(text).collect();
                match (words.iter().any(|w| w == "left"), words.iter().any(|w| w == "right")) {
                    (true, false) => 90.0,
                    (false, true) => -90.0,
                    _ => return None,
                }
            }
        };
        (bearing.abs() > 20.0).then(|| bearing.signum())
    }

    fn filter(&self, req: &AnnotatorRequest) -> Result<String> {
        let first = req.images.first().ok_or(Error::MissingField("images"))?;
        let (scene, pose) = self.locate(first)?;
        let labels = req.context.labels.as_deref().ok_or(Error::MissingField("labels"))?;
        let orig = req.context.orig_lang.as_deref().ok_or(Error::MissingField("orig_lang"))?;
        let has = |l: AtomicLabel| labels.contains(&l);
        let went_left = has(AtomicLabel::TurnLeft) || has(AtomicLabel::AdjustLeft);
        let went_right = has(AtomicLabel::TurnRight) || has(AtomicLabel::AdjustRight);
        let mut best = Vec::new();
        let mut dropped = Vec::new();
        for text in orig {
            let contradicted = match self.instruction_side(scene, &pose, text) {
                Some(s) if s > 0.0 => has(AtomicLabel::TurnRight) && !went_left,
                Some(_) => has(AtomicLabel::TurnLeft) && !went_right,
                None => false,
            };
            if contradicted {
                dropped.push(text.clone());
            } else {
                best.push(text.clone());
            }
        }
        Ok(json!({
            "best": best,
            "new": [],
            "reasoning": if dropped.is_empty() {
                "All instructions agree with the actions.".to_string()
            } else {
                format!("These turn the wrong way: {}.", dropped.join("; "))
            },
        })
        .to_string())
    }

    fn counterfactual(&self, req: &AnnotatorRequest) -> Result<String> {
        let labels = req.context.labels.as_deref().ok_or(Error::MissingField("labels"))?;
        let filtered = req
            .context
            .filtered_lang
            .as_deref()
            .ok_or(Error::MissingField("filtered_lang"))?;
        let trajectory = req.trajectory_id().unwrap_or_default().to_string();
        let mut proposals = Vec::new();
        for idx in 0..labels.len().saturating_sub(1) {
            let Some(obs) = req.images.get(idx + 1) else {
                break;
            };
            let (scene, pose) = self.locate(obs)?;
            let mut alts = alternatives(scene, &pose, labels[idx + 1], filtered, &self.cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &format!("{trajectory}/{idx}")));
            alts.shuffle(&mut rng);
            // one proposal per distinct command first, then the rest
            let mut seen = Vec::new();
            let (mut firsts, mut rest): (Vec<_>, Vec<_>) = (Vec::new(), Vec::new());
            for a in alts {
                if seen.contains(&a.command) {
                    rest.push(a);
                } else {
                    seen.push(a.command);
                    firsts.push(a);
                }
            }
            firsts.extend(rest);
            for a in firsts.into_iter().take(self.cfg.max_per_decision_point) {
                proposals.push(json!({
                    "prev_action": [labels[idx].prompt_name(), idx],
                    "proposed_action": a.command.prompt_name(),
                    "new_instruction": a.instruction,
                    "reasoning": format!(
                        "Instead of {}, the robot could {} to {}.",
                        labels[idx + 1].as_str(),
                        a.command.as_str(),
                        a.instruction.to_lowercase()
                    ),
                }));
            }
        }
        Ok(serde_json::Value::Array(proposals).to_string())
    }

    fn plan(&self, req: &AnnotatorRequest) -> Result<String> {
        let prompt = req.context.prompt.as_deref().ok_or(Error::MissingField("prompt"))?;
        let obs = req.images.first().ok_or(Error::MissingField("images"))?;
        let (scene, pose) = self.locate(obs)?;
        let Some(target) = scene.resolve(prompt) else {
            return Ok(format!("I cannot find anything matching {prompt:?} here."));
        };
        Ok(command_toward(scene, &target, &pose, &self.cfg.thresholds)
            .map_or("I am not sure.", |c| c.prompt_name())
            .to_string())
    }
}

fn fmt_m(d: f64) -> String {
    format!("{d:.1}")
}

fn relative(bearing_deg: f64) -> &'static str {
    let b = bearing_deg;
    match b.abs() {
        a if a < 15.0 => "straight ahead",
        a if a < 60.0 && b > 0.0 => "ahead on the left",
        a if a < 60.0 => "ahead on the right",
        a if a <= 120.0 && b > 0.0 => "on the left",
        a if a <= 120.0 => "on the right",
        _ if b > 0.0 => "behind on the left",
        _ => "behind on the right",
    }
}

impl Annotator for OracleAnnotator {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, req: &AnnotatorRequest) -> Result<String> {
        match req.kind {
            AnnotationKind::Describe => self.describe(req),
            AnnotationKind::Summarize => self.summarize(req),
            AnnotationKind::Filter => self.filter(req),
            AnnotationKind::Counterfactual => self.counterfactual(req),
            AnnotationKind::Plan => self.plan(req),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::{annotate, AnnotatorResponse, RequestContext};
    use crate::sim::corpus::sim_trajectory;

    fn obs(scene: &Scene, pose: Pose) -> Observation {
        Observation {
            trajectory_id: "t".into(),
            timestep: 0,
            payload: Payload::Sim {
                scene: scene.name.clone(),
                pose,
                features: scene.features(&pose),
            },
        }
    }

    const JUNCTION: &str = r#"
name = "junction"
seed = 1
appearance = [0.5, 0.5, 0.0]
bounds = [-3.0, -6.0, 3.0, 6.0]
start = { x = 0.0, y = -4.0, yaw = 1.5707963267948966 }

[[structures]]
name = "lower left wall"
kind = "wall"
points = [[-1.0, -6.0], [-1.0, -1.0]]

[[structures]]
name = "lower right wall"
kind = "wall"
points = [[1.0, -6.0], [1.0, -1.0]]

[[structures]]
name = "end wall"
kind = "wall"
points = [[-3.0, 2.0], [3.0, 2.0]]

[[structures]]
name = "hallway on the left"
kind = "path"
points = [[0.0, 0.0], [-3.0, 0.0]]

[[structures]]
name = "hallway on the right"
kind = "path"
points = [[0.0, 0.0], [3.0, 0.0]]
"#;

    #[test]
    fn corridor_openings_offer_the_other_turn() {
        let scene = Scene::from_toml(JUNCTION).unwrap();
        let cfg = OracleConfig::default();
        let pose = Pose::new(0.0, -0.6, std::f64::consts::FRAC_PI_2);
        let alts = alternatives(&scene, &pose, AtomicLabel::TurnLeft, &[], &cfg);
        assert!(alts
            .iter()
            .any(|a| a.command == AtomicLabel::TurnRight && a.instruction == "Move down the hallway on the right"));
        assert!(alts.iter().all(|a| a.command != AtomicLabel::TurnLeft));
    }

    #[test]
    fn dead_end_has_no_alternatives() {
        let scene = Scene::from_toml(JUNCTION).unwrap();
        let cfg = OracleConfig::default();
        // deep in the lower corridor, facing the bottom boundary
        let pose = Pose::new(0.0, -5.4, -std::f64::consts::FRAC_PI_2);
        assert!(alternatives(&scene, &pose, AtomicLabel::Stop, &[], &cfg).is_empty());
    }

    #[test]
    fn open_field_offers_both_turns() {
        let text = r#"
name = "field"
seed = 2
appearance = [0.0, 0.5, 0.5]
bounds = [-10.0, -10.0, 10.0, 10.0]
start = { x = 0.0, y = 0.0, yaw = 0.0 }

[[objects]]
name = "kite"
position = [1.0, 3.0]
radius = 0.3

[[objects]]
name = "ball"
position = [1.0, -3.0]
radius = 0.3
"#;
        let scene = Scene::from_toml(text).unwrap();
        let alts = alternatives(&scene, &scene.start, AtomicLabel::GoForward, &[], &OracleConfig::default());
        assert!(alts.iter().any(|a| a.command == AtomicLabel::TurnLeft));
        assert!(alts.iter().any(|a| a.command == AtomicLabel::TurnRight));
        for a in &alts {
            assert!(chunk_feasible(&scene, &scene.start, &OracleConfig::default().canonical_chunk(a.command)));
        }
    }

    #[test]
    fn descriptions_name_true_sides() {
        let scene = Scene::builtin("corridor").unwrap();
        let oracle = OracleAnnotator::new([scene.clone()], OracleConfig::default());
        let req = AnnotatorRequest::new(AnnotationKind::Describe, vec![obs(&scene, scene.start)], RequestContext::default());
        let AnnotatorResponse::Description(d) = annotate(&oracle, &req).unwrap() else {
            panic!()
        };
        assert!(d.contains("The red chair is"), "{d}");
        assert!(d.contains("ahead on the left"), "{d}");
        assert!(d.contains("The left wall runs 2.5 meters away on the left"), "{d}");
        assert!(d.contains("The right wall runs 2.5 meters away on the right"), "{d}");
        assert_eq!(oracle.complete(&req).unwrap(), d);
    }

    #[test]
    fn summary_of_a_straight_run_names_the_hallway() {
        let scene = Scene::builtin("corridor").unwrap();
        let oracle = OracleAnnotator::new([scene.clone()], OracleConfig::default());
        let t = sim_trajectory(&scene, "s".into(), Pose::new(-3.0, 0.0, 0.0), vec![Action::new(0.25, 0.0); 12]);
        let req = AnnotatorRequest::new(
            AnnotationKind::Summarize,
            t.observations.iter().step_by(3).cloned().collect(),
            RequestContext {
                descriptions: Some(vec!["x".into()]),
                ..Default::default()
            },
        );
        let AnnotatorResponse::Instructions(list) = annotate(&oracle, &req).unwrap() else {
            panic!()
        };
        assert_eq!(list, vec!["Move down the hallway"]);
    }

    #[test]
    fn filter_drops_the_wrong_side() {
        let scene = Scene::from_toml(JUNCTION).unwrap();
        let oracle = OracleAnnotator::new([scene.clone()], OracleConfig::default());
        let pose = Pose::new(0.0, -0.6, std::f64::consts::FRAC_PI_2);
        let req = AnnotatorRequest::new(
            AnnotationKind::Filter,
            vec![obs(&scene, pose)],
            RequestContext {
                labels: Some(vec![AtomicLabel::GoForward, AtomicLabel::TurnLeft]),
                orig_lang: Some(vec![
                    "Move down the hallway on the right".into(),
                    "Move down the hallway on the left".into(),
                ]),
                ..Default::default()
            },
        );
        let AnnotatorResponse::Filter(f) = annotate(&oracle, &req).unwrap() else {
            panic!()
        };
        assert_eq!(f.best, vec!["Move down the hallway on the left"]);
    }

    #[test]
    fn plan_replies_parse() {
        let scene = Scene::builtin("corridor").unwrap();
        let oracle = OracleAnnotator::new([scene.clone()], OracleConfig::default());
        let plan = |prompt: &str, pose: Pose| {
            let req = AnnotatorRequest::new(
                AnnotationKind::Plan,
                vec![obs(&scene, pose)],
                RequestContext {
                    prompt: Some(prompt.into()),
                    ..Default::default()
                },
            );
            annotate(&oracle, &req)
        };
        assert!(matches!(
            plan("Move to the red chair", scene.start).unwrap(),
            AnnotatorResponse::Plan(AtomicLabel::AdjustLeft)
        ));
        assert!(plan("dance", scene.start).is_err());
    }
}
