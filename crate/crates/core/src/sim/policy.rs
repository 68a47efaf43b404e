//! Instruction-conditioned chunk policies used in evaluation.

use std::collections::BTreeMap;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::choose_turn;
use super::scene::Scene;
use super::task::{steering_point, SuccessThresholds, Target};
use crate::annotate::{annotate, AnnotationKind, Annotator, AnnotatorRequest, AnnotatorResponse, RequestContext};
use crate::error::{Error, Result};
use crate::hash::sha256_json;
use crate::model::{Action, AtomicLabel, Branch, LabeledExample, Observation, Payload};
use crate::policy::{ActionChunk, PolicyModel, CHUNK_HORIZON};
use crate::text::BagOfTokens;

/// Maps an instruction and an observation to an action chunk.
pub trait ConditionedPolicy: Send + Sync {
    fn name(&self) -> String;

    fn act(&self, instruction: &str, obs: &Observation, seed: u64) -> Result<ActionChunk>;
}

fn features(obs: &Observation) -> Result<&[f64]> {
    obs.payload
        .features()
        .ok_or_else(|| Error::Precondition("observation has no feature vector".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    /// Number of nearest observation keys whose examples compete on
    /// instruction similarity.
    pub neighbor_keys: usize,
    /// Keys farther than this multiple of the nearest key's distance drop
    /// out, so a query on a training observation only sees that observation.
    pub distance_ratio: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            neighbor_keys: 6,
            distance_ratio: 1.5,
        }
    }
}

#[derive(Debug, Clone)]
struct Stored {
    bag: BagOfTokens,
    chunk: ActionChunk,
    source: Retrieved,
}

/// Which training example a query retrieved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub trajectory_id: String,
    pub anchor_timestep: usize,
    pub instruction: String,
    pub branch: Branch,
    #[serde(default)]
    pub similarity: f64,
    #[serde(default)]
    pub feature_distance: f64,
}

#[derive(Debug, Clone)]
struct Key {
    features: Vec<f64>,
    examples: Vec<usize>,
}

/// Nearest-example retrieval: find the nearest observation keys by feature
/// distance (at most `neighbor_keys`, within `distance_ratio` of the nearest), then return the chunk of the example whose instruction has the
/// highest bag-of-tokens cosine with the query. Ties go to the nearer key,
/// then to the earlier example. No randomness is involved.
#[derive(Debug, Clone)]
pub struct ToyPolicy {
    pub label: String,
    pub cfg: ToyConfig,
    pub dataset_hash: String,
    keys: Vec<Key>,
    examples: Vec<Stored>,
}

pub fn train_toy_policy(label: &str, data: &[LabeledExample], cfg: &ToyConfig) -> Result<ToyPolicy> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("labeled dataset"));
    }
    if cfg.neighbor_keys == 0 {
        return Err(Error::Config("neighbor_keys must be >= 1".into()));
    }
    if !(cfg.distance_ratio >= 1.0) {
        return Err(Error::Config("distance_ratio must be >= 1".into()));
    }
    let mut index: BTreeMap<(&str, usize), usize> = BTreeMap::new();
    let mut keys: Vec<Key> = Vec::new();
    let mut examples = Vec::with_capacity(data.len());
    for (i, e) in data.iter().enumerate() {
        let k = *index.entry((e.trajectory_id.as_str(), e.anchor_timestep)).or_insert_with(|| {
            keys.push(Key {
                features: e.observation.payload.features().unwrap_or_default().to_vec(),
                examples: Vec::new(),
            });
            keys.len() - 1
        });
        keys[k].examples.push(i);
        examples.push(Stored {
            bag: BagOfTokens::new(&e.instruction.text),
            chunk: e.chunk,
            source: Retrieved {
                trajectory_id: e.trajectory_id.clone(),
                anchor_timestep: e.anchor_timestep,
                instruction: e.instruction.text.clone(),
                branch: e.branch,
                similarity: 0.0,
                feature_distance: 0.0,
            },
        });
    }
    Ok(ToyPolicy {
        label: label.to_string(),
        cfg: cfg.clone(),
        dataset_hash: sha256_json(data),
        keys,
        examples,
    })
}

impl ToyPolicy {
    pub fn key_count(&self) -> usize {
        self.keys.len()
    }

    pub fn query(&self, instruction: &str, features: &[f64]) -> &ActionChunk {
        &self.examples[self.best(instruction, features).2].chunk
    }

    /// The retrieved example with its similarity and feature distance.
    pub fn explain(&self, instruction: &str, features: &[f64]) -> Retrieved {
        let (score, d, e) = self.best(instruction, features);
        Retrieved {
            similarity: score,
            feature_distance: d.sqrt(),
            ..self.examples[e].source.clone()
        }
    }

    fn best(&self, instruction: &str, features: &[f64]) -> (f64, f64, usize) {
        let mut near: Vec<(f64, usize)> = self
            .keys
            .iter()
            .enumerate()
            .map(|(i, k)| (sq_dist(&k.features, features), i))
            .collect();
        let k = self.cfg.neighbor_keys.min(near.len());
        near.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        near.truncate(k);
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let cutoff = near[0].0 * self.cfg.distance_ratio * self.cfg.distance_ratio;
        near.retain(|&(d, _)| d <= cutoff);
        let q = BagOfTokens::new(instruction);
        let mut best: Option<(f64, f64, usize)> = None;
        for &(d, key) in &near {
            for &e in &self.keys[key].examples {
                let score = q.cosine(&self.examples[e].bag);
                let better = match best {
                    None => true,
                    Some((s, bd, be)) => score > s || (score == s && (d < bd || (d == bd && e < be))),
                };
                if better {
                    best = Some((score, d, e));
                }
            }
        }
        best.expect("at least one key with examples")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl ConditionedPolicy for ToyPolicy {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn act(&self, instruction: &str, obs: &Observation, _seed: u64) -> Result<ActionChunk> {
        Ok(*self.query(instruction, features(obs)?))
    }
}

/// Asks a backend which atomic command to run, then samples it from the
/// atomic policy. Unparseable replies fall back to going forward.
pub struct PlannerPolicy<'a> {
    pub annotator: &'a dyn Annotator,
    pub atomic: &'a PolicyModel,
}

impl PlannerPolicy<'_> {
    pub fn choose(&self, instruction: &str, obs: &Observation) -> Result<AtomicLabel> {
        let req = AnnotatorRequest::new(
            AnnotationKind::Plan,
            vec![obs.clone()],
            RequestContext {
                prompt: Some(instruction.to_string()),
                ..Default::default()
            },
        );
        match annotate(self.annotator, &req) {
            Ok(AnnotatorResponse::Plan(label)) => Ok(label),
            Ok(_) => unreachable!("plan requests parse to labels"),
            Err(Error::UnknownLabel(reply)) => {
                warn!("planner reply {reply:?} names no primitive; going forward");
                Ok(AtomicLabel::GoForward)
            }
            Err(e) => Err(e),
        }
    }
}

impl ConditionedPolicy for PlannerPolicy<'_> {
    fn name(&self) -> String {
        "planner".into()
    }

    fn act(&self, instruction: &str, obs: &Observation, seed: u64) -> Result<ActionChunk> {
        let label = self.choose(instruction, obs)?;
        self.atomic.sample(label, features(obs)?, seed)
    }
}

/// Uniformly random bounded-turn chunks.
pub struct RandomPolicy {
    pub step: f64,
    pub max_turn_deg: f64,
}

impl ConditionedPolicy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn act(&self, _instruction: &str, _obs: &Observation, seed: u64) -> Result<ActionChunk> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = self.max_turn_deg.to_radians();
        let deltas: Vec<Action> = (0..CHUNK_HORIZON)
            .map(|_| Action::arc(self.step, rng.random_range(-t..=t)))
            .collect();
        ActionChunk::from_slice(&deltas)
    }
}

/// Steers toward the task's aim point with the scripted agents' obstacle
/// look-ahead. Reads the true pose and target; a sanity upper bound.
pub struct OraclePolicy<'a> {
    pub scene: &'a Scene,
    pub target: Target,
    pub step: f64,
    pub max_turn_deg: f64,
    pub thresholds: SuccessThresholds,
}

impl ConditionedPolicy for OraclePolicy<'_> {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn act(&self, _instruction: &str, obs: &Observation, _seed: u64) -> Result<ActionChunk> {
        let Payload::Sim { pose, .. } = &obs.payload else {
            return Err(Error::Precondition("oracle policy needs simulator observations".into()));
        };
        let max_turn = self.max_turn_deg.to_radians();
        let mut pose = *pose;
        let mut deltas = Vec::with_capacity(CHUNK_HORIZON);
        while deltas.len() < CHUNK_HORIZON {
            match steering_point(self.scene, &self.target, &pose, &self.thresholds) {
                Some((aim, false)) => {
                    let desired = self.scene.bearing(&pose, aim).clamp(-max_turn, max_turn);
                    let a = Action::arc(self.step, choose_turn(self.scene, &pose, desired, max_turn, self.step));
                    pose = pose.advance(a);
                    deltas.push(a);
                }
                _ => deltas.push(Action::ZERO),
            }
        }
        ActionChunk::from_slice(&deltas)
    }
}
