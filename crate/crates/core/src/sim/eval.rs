//! Closed-loop rollouts and the scene benchmark.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::geometry::dist;
use super::policy::ConditionedPolicy;
use super::scene::Scene;
use super::task::{Category, SuccessThresholds, TaskSpec, Tracker};
use crate::error::{Error, Result};
use crate::model::{Observation, Payload, Pose};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes_per_task: usize,
    pub max_steps: usize,
    /// Steps executed from each chunk before the policy is queried again.
    pub replan_every: usize,
    pub max_step: f64,
    pub start_jitter: f64,
    pub start_yaw_jitter_deg: f64,
    pub thresholds: SuccessThresholds,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_task: 5,
            max_steps: 64,
            replan_every: 4,
            max_step: 0.5,
            start_jitter: 0.1,
            start_yaw_jitter_deg: 3.0,
            thresholds: SuccessThresholds::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_task == 0 || self.max_steps == 0 {
            return Err(Error::Config("episodes_per_task and max_steps must be >= 1".into()));
        }
        if !(1..=crate::policy::CHUNK_HORIZON).contains(&self.replan_every) {
            return Err(Error::Config(format!(
                "replan_every must be in 1..={}",
                crate::policy::CHUNK_HORIZON
            )));
        }
        if !(self.max_step > 0.0) {
            return Err(Error::Config("max_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode: usize,
    pub success: bool,
    pub collided: bool,
    pub steps: usize,
    #[serde(skip)]
    pub poses: Vec<Pose>,
}

pub fn start_pose(scene: &Scene, cfg: &EvalConfig, seed: u64) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = cfg.start_jitter;
    let yj = cfg.start_yaw_jitter_deg.to_radians();
    let mut sample = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    Pose::new(
        scene.start.x + sample(j),
        scene.start.y + sample(j),
        scene.start.yaw + sample(yj),
    )
}

/// Runs one episode. The episode ends on success, on collision (the
/// colliding step is not taken) or after `max_steps`.
pub fn rollout(
    policy: &dyn ConditionedPolicy,
    scene: &Scene,
    task: &TaskSpec,
    cfg: &EvalConfig,
    start: Pose,
    seed: u64,
    episode: usize,
) -> Result<Episode> {
    let id = format!("eval/{}/{}/{episode}", scene.name, task.id);
    let mut tracker = Tracker::new(scene, &task.target, &cfg.thresholds);
    let mut pose = start;
    let mut poses = vec![pose];
    let mut queue = VecDeque::new();
    let mut success = tracker.update([pose.x, pose.y]);
    let mut collided = false;
    let mut steps = 0;
    while !success && steps < cfg.max_steps {
        if queue.is_empty() {
            let obs = Observation {
                trajectory_id: id.clone(),
                timestep: steps,
                payload: Payload::Sim {
                    scene: scene.name.clone(),
                    pose,
                    features: scene.features(&pose),
                },
            };
            let chunk = policy.act(&task.instruction, &obs, derive_seed(seed, &steps.to_string()))?;
            queue.extend(chunk.deltas.into_iter().take(cfg.replan_every));
        }
        let a = queue.pop_front().expect("queue refilled above").clamp_norm(cfg.max_step);
        let next = pose.advance(a);
        let (p, q) = ([pose.x, pose.y], [next.x, next.y]);
        if scene.collides(p, q) {
            collided = true;
            break;
        }
        let n = (dist(p, q) / 0.05).ceil().max(1.0) as usize;
        for k in 1..=n {
            let t = k as f64 / n as f64;
            if tracker.update([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]) {
                success = true;
                break;
            }
        }
        pose = next;
        poses.push(pose);
        steps += 1;
    }
    Ok(Episode {
        episode,
        success,
        collided,
        steps,
        poses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
    /// Binomial standard error of the rate.
    pub stderr: f64,
}

impl Rate {
    pub fn new(successes: usize, trials: usize) -> Self {
        let p = if trials == 0 { 0.0 } else { successes as f64 / trials as f64 };
        let stderr = if trials == 0 { 0.0 } else { (p * (1.0 - p) / trials as f64).sqrt() };
        Self {
            successes,
            trials,
            rate: p,
            stderr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub scene: String,
    pub task_id: String,
    pub category: Category,
    pub instruction: String,
    pub episodes: Vec<Episode>,
}

impl TaskOutcome {
    pub fn rate(&self) -> Rate {
        Rate::new(self.episodes.iter().filter(|e| e.success).count(), self.episodes.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: String,
    pub overall: Rate,
    pub categories: BTreeMap<Category, Rate>,
    pub collisions: usize,
    pub tasks: Vec<TaskOutcome>,
}

impl PolicyReport {
    fn from_tasks(policy: String, tasks: Vec<TaskOutcome>) -> Self {
        let mut cats: BTreeMap<Category, (usize, usize)> = BTreeMap::new();
        let (mut s, mut n, mut collisions) = (0, 0, 0);
        for t in &tasks {
            let r = t.rate();
            let c = cats.entry(t.category).or_default();
            c.0 += r.successes;
            c.1 += r.trials;
            s += r.successes;
            n += r.trials;
            collisions += t.episodes.iter().filter(|e| e.collided).count();
        }
        Self {
            policy,
            overall: Rate::new(s, n),
            categories: cats.into_iter().map(|(k, (s, n))| (k, Rate::new(s, n))).collect(),
            collisions,
            tasks,
        }
    }
}

/// Evaluates a policy built per task (the oracle policy needs the target).
pub fn evaluate_with<'s, F>(name: &str, scenes: &'s [Scene], cfg: &EvalConfig, seed: u64, make: F) -> Result<PolicyReport>
where
    F: Fn(&'s Scene, &'s TaskSpec) -> Box<dyn ConditionedPolicy + 's> + Sync,
{
    cfg.validate()?;
    let jobs: Vec<(&Scene, &TaskSpec)> = scenes.iter().flat_map(|s| s.tasks.iter().map(move |t| (s, t))).collect();
    let tasks = jobs
        .par_iter()
        .map(|&(scene, task)| {
            let policy = make(scene, task);
            let episodes = (0..cfg.episodes_per_task)
                .map(|k| {
                    let ep_seed = derive_seed(seed, &format!("{}/{}/{k}", scene.name, task.id));
                    let start = start_pose(scene, cfg, derive_seed(ep_seed, "start"));
                    rollout(policy.as_ref(), scene, task, cfg, start, ep_seed, k)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TaskOutcome {
                scene: scene.name.clone(),
                task_id: task.id.clone(),
                category: task.category,
                instruction: task.instruction.clone(),
                episodes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PolicyReport::from_tasks(name.to_string(), tasks))
}

pub fn evaluate(policy: &dyn ConditionedPolicy, scenes: &[Scene], cfg: &EvalConfig, seed: u64) -> Result<PolicyReport> {
    struct Borrowed<'a>(&'a dyn ConditionedPolicy);
    impl ConditionedPolicy for Borrowed<'_> {
        fn name(&self) -> String {
            self.0.name()
        }
        fn act(&self, i: &str, o: &Observation, s: u64) -> Result<crate::policy::ActionChunk> {
            self.0.act(i, o, s)
        }
    }
    evaluate_with(&policy.name(), scenes, cfg, seed, |_, _| Box::new(Borrowed(policy)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub config: EvalConfig,
    pub policies: Vec<PolicyReport>,
}

impl BenchmarkReport {
    pub fn policy(&self, name: &str) -> Option<&PolicyReport> {
        self.policies.iter().find(|p| p.policy == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>16} {:>16} {:>16} {:>16} {:>10}",
            "policy", "object", "referential", "continuous", "overall", "collisions"
        );
        let cell = |r: Option<&Rate>| match r {
            Some(r) => format!("{:.1}% ±{:.1}", 100.0 * r.rate, 100.0 * r.stderr),
            None => "-".into(),
        };
        for p in &self.policies {
            let _ = writeln!(
                out,
                "{:<14} {:>16} {:>16} {:>16} {:>16} {:>10}",
                p.policy,
                cell(p.categories.get(&Category::Object)),
                cell(p.categories.get(&Category::Referential)),
                cell(p.categories.get(&Category::Continuous)),
                cell(Some(&p.overall)),
                p.collisions
            );
        }
        let _ = writeln!(out);
        for p in &self.policies {
            let _ = writeln!(out, "[{}]", p.policy);
            for t in &p.tasks {
                let r = t.rate();
                let _ = writeln!(
                    out,
                    "  {:<10} {:<14} {}/{}  {}",
                    t.scene, t.task_id, r.successes, r.trials, t.instruction
                );
            }
        }
        out
    }
}

/// Successful episodes whose recorded path intersects an obstacle.
pub fn colliding_successes(scenes: &[Scene], report: &PolicyReport) -> Vec<String> {
    let mut bad = Vec::new();
    for t in &report.tasks {
        let Some(scene) = scenes.iter().find(|s| s.name == t.scene) else {
            bad.push(format!("{}: unknown scene", t.task_id));
            continue;
        };
        for e in t.episodes.iter().filter(|e| e.success) {
            if scene.path_collides(&e.poses) {
                bad.push(format!("{}/{}/{}", t.scene, t.task_id, e.episode));
            }
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::policy::{OraclePolicy, RandomPolicy};

    #[test]
    fn oracle_policy_solves_open_tasks() {
        let scenes = Scene::builtin_all().unwrap();
        let cfg = EvalConfig {
            episodes_per_task: 2,
            ..Default::default()
        };
        let report = evaluate_with("oracle", &scenes, &cfg, 1, |scene, task| {
            Box::new(OraclePolicy {
                scene,
                target: task.target.clone(),
                step: 0.25,
                max_turn_deg: 30.0,
                thresholds: cfg.thresholds.clone(),
            })
        })
        .unwrap();
        assert!(report.overall.rate >= 0.8, "{}", BenchmarkReport { seed: 1, config: cfg.clone(), policies: vec![report.clone()] }.to_text());
        assert!(colliding_successes(&scenes, &report).is_empty());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let scenes = vec![Scene::builtin("corridor").unwrap()];
        let cfg = EvalConfig {
            episodes_per_task: 2,
            ..Default::default()
        };
        let p = RandomPolicy {
            step: 0.25,
            max_turn_deg: 30.0,
        };
        let a = evaluate(&p, &scenes, &cfg, 9).unwrap();
        let b = evaluate(&p, &scenes, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.overall.trials, 18);
        for t in &a.tasks {
            for e in &t.episodes {
                assert!(!scenes[0].path_collides(&e.poses));
            }
        }
    }

    #[test]
    fn start_jitter_is_bounded() {
        let s = Scene::builtin("park").unwrap();
        let cfg = EvalConfig::default();
        for seed in 0..50 {
            let p = start_pose(&s, &cfg, seed);
            assert!((p.x - s.start.x).abs() <= 0.1 && (p.y - s.start.y).abs() <= 0.1);
            assert!((p.yaw - s.start.yaw).abs() <= 3f64.to_radians() + 1e-12);
        }
    }
}
