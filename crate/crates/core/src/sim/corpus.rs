//! Scripted-agent trajectory corpora.
//!
//! Two kinds of agents drive through a scene. Route agents enter behind the
//! evaluation start, pass through it heading forward and follow the scene's
//! default route to its goal. Goal agents start at random poses away from the
//! evaluation start and head for a randomly chosen task target. Both steer
//! toward their current aim point with a bounded turn rate and heading noise,
//! avoid obstacles with a short look-ahead, and dwell at the goal.

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::geometry::{dist, Point};
use super::scene::Scene;
use super::task::{steering_point, SuccessThresholds, Target, Tracker};
use crate::error::{Error, Result};
use crate::model::{wrap_angle, Action, Payload, Pose, Trajectory};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub route_trajectories: usize,
    pub goal_trajectories: usize,
    pub step: f64,
    pub max_turn_deg: f64,
    pub heading_noise_deg: f64,
    pub dwell_steps: usize,
    pub max_steps: usize,
    /// Goal agents start at least this far from the evaluation start.
    pub min_start_distance: f64,
    /// Range of forward offsets from the evaluation start for goal agents.
    pub start_ahead: [f64; 2],
    pub start_heading_spread_deg: f64,
    pub entry_jitter: f64,
    pub thresholds: SuccessThresholds,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            route_trajectories: 24,
            goal_trajectories: 120,
            step: 0.25,
            max_turn_deg: 20.0,
            heading_noise_deg: 3.0,
            dwell_steps: 10,
            max_steps: 90,
            min_start_distance: 1.5,
            start_ahead: [0.5, 6.0],
            start_heading_spread_deg: 30.0,
            entry_jitter: 0.1,
            thresholds: SuccessThresholds::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.max_turn_deg > 0.0) || self.max_steps == 0 {
            return Err(Error::Config("corpus step, turn rate and max_steps must be positive".into()));
        }
        if self.start_ahead[0] > self.start_ahead[1] {
            return Err(Error::Config("start_ahead must be an increasing range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub generated: usize,
    pub skipped_collision: usize,
    pub skipped_unreachable: usize,
}

#[derive(Debug)]
pub enum ScriptOutcome {
    Done(Vec<Action>),
    Collision,
    Unreachable,
}

/// Drives one scripted agent from `start` through `waypoints` to `goal`.
pub fn script_actions(
    scene: &Scene,
    start: Pose,
    waypoints: &[Point],
    goal: &Target,
    cfg: &CorpusConfig,
    rng: &mut ChaCha8Rng,
) -> ScriptOutcome {
    let noise = Normal::new(0.0, cfg.heading_noise_deg.to_radians()).expect("finite noise");
    let max_turn = cfg.max_turn_deg.to_radians();
    let mut pose = start;
    let mut actions = Vec::new();
    let mut next_wp = 0;
    let mut tracker = Tracker::new(scene, goal, &cfg.thresholds);
    let structure_goal = matches!(goal, Target::Structure { .. });
    loop {
        let p = [pose.x, pose.y];
        while next_wp < waypoints.len() && dist(p, waypoints[next_wp]) < 0.4 {
            next_wp += 1;
        }
        let tracked = tracker.update(p);
        let Some((aim, close)) = steering_point(scene, goal, &pose, &cfg.thresholds) else {
            return ScriptOutcome::Unreachable;
        };
        if next_wp >= waypoints.len() && (close || (structure_goal && tracked)) {
            break;
        }
        if actions.len() >= cfg.max_steps {
            return ScriptOutcome::Unreachable;
        }
        let aim = waypoints.get(next_wp).copied().unwrap_or(aim);
        let desired = scene.bearing(&pose, aim).clamp(-max_turn, max_turn);
        let turn = (choose_turn(scene, &pose, desired, max_turn, cfg.step) + noise.sample(rng)).clamp(-max_turn, max_turn);
        let action = Action::arc(cfg.step, turn);
        let next = pose.advance(action);
        if scene.collides(p, [next.x, next.y]) {
            return ScriptOutcome::Collision;
        }
        actions.push(action);
        pose = next;
    }
    actions.extend(std::iter::repeat_n(Action::ZERO, cfg.dwell_steps));
    ScriptOutcome::Done(actions)
}

/// The turn closest to `desired` whose short straight look-ahead stays clear.
pub(crate) fn choose_turn(scene: &Scene, pose: &Pose, desired: f64, max_turn: f64, step: f64) -> f64 {
    const LOOKAHEAD_STEPS: usize = 4;
    const MARGIN: f64 = 0.08;
    let clear = |turn: f64| {
        let yaw = pose.yaw + turn;
        let mut prev = [pose.x, pose.y];
        (1..=LOOKAHEAD_STEPS).all(|k| {
            let q = [pose.x + k as f64 * step * yaw.cos(), pose.y + k as f64 * step * yaw.sin()];
            let ok = !scene.collides(prev, q) && scene.clearance(q) >= MARGIN;
            prev = q;
            ok
        })
    };
    if clear(desired) {
        return desired;
    }
    let n = 16;
    let mut best: Option<(f64, f64)> = None;
    for i in 0..=2 * n {
        let turn = -max_turn + i as f64 * max_turn / n as f64;
        if clear(turn) {
            let cost = (turn - desired).abs();
            if best.is_none_or(|(c, _)| cost < c) {
                best = Some((cost, turn));
            }
        }
    }
    best.map_or(desired, |(_, t)| t)
}

fn observe(scene: &Scene) -> impl FnMut(usize, &Pose) -> Payload + '_ {
    move |_, pose| Payload::Sim {
        scene: scene.name.clone(),
        pose: *pose,
        features: scene.features(pose),
    }
}

pub fn sim_trajectory(scene: &Scene, id: String, start: Pose, actions: Vec<Action>) -> Trajectory {
    Trajectory::integrate(id, format!("sim:{}", scene.name), start, actions, observe(scene))
}

fn random_start(scene: &Scene, goal: &Target, cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Option<Pose> {
    let s = scene.start;
    let (fwd, left) = ([s.yaw.cos(), s.yaw.sin()], scene.left_normal());
    let [_, y0, _, y1] = scene.bounds;
    let half = (y1 - y0) / 2.0 - 0.4;
    for _ in 0..200 {
        let a = rng.random_range(cfg.start_ahead[0]..=cfg.start_ahead[1]);
        let b = rng.random_range(-half..=half);
        let p = [s.x + a * fwd[0] + b * left[0], s.y + a * fwd[1] + b * left[1]];
        if dist(p, [s.x, s.y]) < cfg.min_start_distance || scene.clearance(p) < 0.3 {
            continue;
        }
        let probe = Pose::new(p[0], p[1], 0.0);
        let (aim, close) = steering_point(scene, goal, &probe, &cfg.thresholds)?;
        if close || Tracker::new(scene, goal, &cfg.thresholds).update(p) {
            continue;
        }
        let spread = cfg.start_heading_spread_deg.to_radians();
        let yaw = wrap_angle(scene.bearing(&probe, aim) + rng.random_range(-spread..=spread));
        return Some(Pose::new(p[0], p[1], yaw));
    }
    None
}

/// Generates the scene's corpus: route agents first, then goal agents.
/// Agents that collide or fail to reach their goal are skipped and logged.
pub fn generate_corpus(scene: &Scene, cfg: &CorpusConfig, seed: u64) -> Result<(Vec<Trajectory>, CorpusReport)> {
    cfg.validate()?;
    let mut report = CorpusReport::default();
    let mut out = Vec::new();
    let mut record = |id: String, start: Pose, outcome: ScriptOutcome, report: &mut CorpusReport| match outcome {
        ScriptOutcome::Done(actions) => {
            out.push(sim_trajectory(scene, id, start, actions));
            report.generated += 1;
        }
        ScriptOutcome::Collision => {
            debug!("{id}: scripted agent collided; skipped");
            report.skipped_collision += 1;
        }
        ScriptOutcome::Unreachable => {
            debug!("{id}: goal not reached within {} steps; skipped", cfg.max_steps);
            report.skipped_unreachable += 1;
        }
    };

    if let Some(route) = &scene.default_route {
        for i in 0..cfg.route_trajectories {
            let id = format!("{}-route-{i:03}", scene.name);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &id));
            let j = cfg.entry_jitter;
            let start = Pose::new(
                route.entry.x + rng.random_range(-j..=j),
                route.entry.y + rng.random_range(-j..=j),
                route.entry.yaw + rng.random_range(-3.0f64..=3.0).to_radians(),
            );
            let outcome = script_actions(scene, start, &route.waypoints, &route.goal, cfg, &mut rng);
            record(id, start, outcome, &mut report);
        }
    }

    let goals: Vec<&Target> = scene.tasks.iter().map(|t| &t.target).collect();
    if !goals.is_empty() {
        for i in 0..cfg.goal_trajectories {
            let id = format!("{}-goal-{i:03}", scene.name);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &id));
            let goal = goals[rng.random_range(0..goals.len())];
            let Some(start) = random_start(scene, goal, cfg, &mut rng) else {
                report.skipped_unreachable += 1;
                continue;
            };
            let outcome = script_actions(scene, start, &[], goal, cfg, &mut rng);
            record(id, start, outcome, &mut report);
        }
    }
    info!(
        "{}: {} trajectories ({} collided, {} unreachable)",
        scene.name, report.generated, report.skipped_collision, report.skipped_unreachable
    );
    Ok((out, report))
}
