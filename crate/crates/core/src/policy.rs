//! Atomic policy: samples action chunks conditioned on an atomic command and
//! observation features.
//!
//! The model is a per-label mixture of prototype chunks. Prototypes are fit by
//! k-means over the observation features of same-label training chunks; at
//! sampling time the mixture weights are reweighted by a Gaussian kernel on the
//! query features, one prototype is drawn and its step lengths are jittered.

use std::collections::BTreeMap;
use std::ops::Deref;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{sha256_hex, sha256_json};
use crate::model::{Action, AtomicLabel, Segment, Trajectory, DEFAULT_MAX_STEP};
use crate::seed::derive_seed;
use crate::segment::{relabel_chunk, SegmenterConfig};

pub const CHUNK_HORIZON: usize = 8;

/// Bump when the serialized model layout changes.
pub const POLICY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub deltas: [Action; CHUNK_HORIZON],
}

impl ActionChunk {
    pub fn new(deltas: [Action; CHUNK_HORIZON]) -> Self {
        Self { deltas }
    }

    pub fn zeros() -> Self {
        Self::new([Action::ZERO; CHUNK_HORIZON])
    }

    pub fn repeat(a: Action) -> Self {
        Self::new([a; CHUNK_HORIZON])
    }

    pub fn from_slice(actions: &[Action]) -> Result<Self> {
        let deltas: [Action; CHUNK_HORIZON] = actions.try_into().map_err(|_| {
            Error::Precondition(format!(
                "action chunk needs exactly {CHUNK_HORIZON} deltas, got {}",
                actions.len()
            ))
        })?;
        if deltas.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("action chunk"));
        }
        Ok(Self { deltas })
    }

    pub fn as_slice(&self) -> &[Action] {
        &self.deltas
    }

    /// Sum of per-step displacement magnitudes.
    pub fn path_length(&self) -> f64 {
        self.deltas.iter().map(Action::norm).sum()
    }
}

impl Deref for ActionChunk {
    type Target = [Action];

    fn deref(&self) -> &[Action] {
        &self.deltas
    }
}

/// Number of past actions used for pose-history features.
const HISTORY: usize = 4;

/// Observation features at `step`: the payload's feature vector when present,
/// otherwise the preceding actions scaled by the mean step distance.
pub fn observation_features(t: &Trajectory, step: usize) -> Vec<f64> {
    if let Some(f) = t.observations.get(step).and_then(|o| o.payload.features()) {
        return f.to_vec();
    }
    let scale = if t.metadata.mean_step_distance > 0.0 {
        t.metadata.mean_step_distance
    } else {
        1.0
    };
    let mut out = Vec::with_capacity(2 * HISTORY);
    for back in 1..=HISTORY {
        let a = step
            .checked_sub(back)
            .and_then(|i| t.actions.get(i))
            .copied()
            .unwrap_or(Action::ZERO);
        out.push(a.dx / scale);
        out.push(a.dy / scale);
    }
    out
}

/// One element of the atomic dataset: a chunk starting at a segment start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicSample {
    pub trajectory_id: String,
    pub timestep: usize,
    pub label: AtomicLabel,
    pub features: Vec<f64>,
    pub chunk: ActionChunk,
}

/// Builds the atomic dataset from segmented trajectories. Chunks running past
/// the end of a trajectory are zero-padded.
pub fn build_atomic_dataset<'a>(
    items: impl IntoIterator<Item = (&'a Trajectory, &'a [Segment])>,
) -> Vec<AtomicSample> {
    let mut out = Vec::new();
    for (t, segs) in items {
        for s in segs {
            let actions = t.padded_actions(s.start, CHUNK_HORIZON);
            let Ok(chunk) = ActionChunk::from_slice(&actions) else {
                continue;
            };
            out.push(AtomicSample {
                trajectory_id: t.id.clone(),
                timestep: s.start,
                label: s.label,
                features: observation_features(t, s.start),
                chunk,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub prototypes_per_label: usize,
    /// Step-length jitter, as a fraction of each prototype delta's norm.
    pub noise_scale: f64,
    pub max_step: f64,
    /// Kernel width over observation features.
    pub feature_bandwidth: f64,
    pub kmeans_iterations: usize,
    pub holdout_fraction: f64,
    /// Held-out samples drawn per label when measuring self-consistency.
    pub report_samples: usize,
    pub relabel: SegmenterConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            prototypes_per_label: 4,
            noise_scale: 0.1,
            max_step: DEFAULT_MAX_STEP,
            feature_bandwidth: 0.5,
            kmeans_iterations: 25,
            holdout_fraction: 0.2,
            report_samples: 200,
            relabel: SegmenterConfig::default(),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prototypes_per_label == 0 {
            return Err(Error::Config("prototypes_per_label must be >= 1".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be >= 0".into()));
        }
        if !(self.feature_bandwidth > 0.0) {
            return Err(Error::Config("feature_bandwidth must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
        }
        self.relabel.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub centroid: Vec<f64>,
    pub chunk: ActionChunk,
    pub weight: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub version: u32,
    pub dataset_hash: String,
    pub seed: u64,
    pub feature_dim: usize,
    pub noise_scale: f64,
    pub max_step: f64,
    pub feature_bandwidth: f64,
    pub prototypes: BTreeMap<AtomicLabel, Vec<Prototype>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub train: usize,
    pub held_out: usize,
    /// Training chunks whose relabel disagreed with their segment label.
    pub dropped_inconsistent: usize,
    pub prototypes: usize,
    /// Fraction of held-out samples whose sampled chunk relabels to the label.
    pub self_consistency: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub labels: BTreeMap<AtomicLabel, LabelReport>,
    pub missing_labels: Vec<AtomicLabel>,
}

impl PolicyModel {
    /// Content hash of the serialized model.
    pub fn hash(&self) -> String {
        sha256_json(self)
    }

    pub fn covers(&self, label: AtomicLabel) -> bool {
        self.prototypes.get(&label).is_some_and(|p| !p.is_empty())
    }

    /// Draws a chunk for `label` at an observation with the given features.
    pub fn sample(&self, label: AtomicLabel, features: &[f64], seed: u64) -> Result<ActionChunk> {
        let protos = self
            .prototypes
            .get(&label)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::UncoveredLabel(label.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let use_features = features.len() == self.feature_dim && self.feature_dim > 0;
        let d2: Vec<f64> = protos
            .iter()
            .map(|p| {
                if use_features {
                    sq_dist(&p.centroid, features)
                } else {
                    0.0
                }
            })
            .collect();
        let min_d2 = d2.iter().copied().fold(f64::INFINITY, f64::min);
        let h2 = 2.0 * self.feature_bandwidth * self.feature_bandwidth;
        let weights: Vec<f64> = protos
            .iter()
            .zip(&d2)
            .map(|(p, d)| p.weight * (-(d - min_d2) / h2).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = protos.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }

        let proto = &protos[pick].chunk;
        let mut deltas = proto.deltas;
        if self.noise_scale > 0.0 {
            let jitter = Normal::new(0.0, self.noise_scale).expect("finite noise scale");
            for d in deltas.iter_mut() {
                let factor = (1.0 + jitter.sample(&mut rng)).max(0.0);
                *d = Action::new(d.dx * factor, d.dy * factor).clamp_norm(self.max_step);
            }
        }
        Ok(ActionChunk::new(deltas))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_chunk(chunks: &[&ActionChunk]) -> ActionChunk {
    let n = chunks.len() as f64;
    let mut deltas = [Action::ZERO; CHUNK_HORIZON];
    for c in chunks {
        for (acc, d) in deltas.iter_mut().zip(c.deltas.iter()) {
            acc.dx += d.dx / n;
            acc.dy += d.dy / n;
        }
    }
    ActionChunk::new(deltas)
}

fn chunk_sq_dist(a: &ActionChunk, b: &ActionChunk) -> f64 {
    a.deltas
        .iter()
        .zip(b.deltas.iter())
        .map(|(x, y)| (x.dx - y.dx).powi(2) + (x.dy - y.dy).powi(2))
        .sum()
}

/// Lloyd's k-means with k-means++ seeding. Returns cluster assignments.
fn kmeans(points: &[&[f64]], k: usize, iterations: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    let k = k.min(n).max(1);
    let dim = points[0].len();
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].to_vec()];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| sq_dist(c, p))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, d) in d2.iter().enumerate() {
            if u < *d {
                pick = i;
                break;
            }
            u -= d;
        }
        centers.push(points[pick].to_vec());
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iterations.max(1) {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = centers
                .iter()
                .enumerate()
                .map(|(j, c)| (j, sq_dist(c, p)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(j, _)| j)
                .unwrap();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<&&[f64]> = points
                .iter()
                .zip(&assign)
                .filter(|(_, a)| **a == j)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let m = members.len() as f64;
            *c = (0..dim)
                .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / m)
                .collect();
        }
        if !changed {
            break;
        }
    }
    assign
}

fn is_held_out(sample: &AtomicSample, seed: u64, fraction: f64) -> bool {
    if fraction <= 0.0 {
        return false;
    }
    let h = sha256_hex(format!("{}:{}:{seed}", sample.trajectory_id, sample.timestep).as_bytes());
    let bucket = u64::from_str_radix(&h[..12], 16).unwrap() as f64 / (1u64 << 48) as f64;
    bucket < fraction
}

/// Fits the prototype mixture. Pure function of `(data, cfg, seed)`.
pub fn train(data: &[AtomicSample], cfg: &PolicyConfig, seed: u64) -> Result<(PolicyModel, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("atomic dataset"));
    }
    let feature_dim = data[0].features.len();
    if data.iter().any(|s| s.features.len() != feature_dim) {
        return Err(Error::Precondition(
            "atomic samples have inconsistent feature dimensions".into(),
        ));
    }

    let mut report = TrainReport::default();
    let mut prototypes = BTreeMap::new();
    let mut held_out: BTreeMap<AtomicLabel, Vec<&AtomicSample>> = BTreeMap::new();

    for label in AtomicLabel::ALL {
        let mut entry = LabelReport::default();
        let mut train_set: Vec<&AtomicSample> = Vec::new();
        for s in data.iter().filter(|s| s.label == label) {
            if relabel_chunk(&s.chunk, &cfg.relabel) != label {
                entry.dropped_inconsistent += 1;
            } else if is_held_out(s, seed, cfg.holdout_fraction) {
                held_out.entry(label).or_default().push(s);
            } else {
                train_set.push(s);
            }
        }
        // Tiny labels would otherwise lose everything to the held-out split.
        if train_set.is_empty() {
            if let Some(h) = held_out.remove(&label) {
                train_set = h;
            }
        }
        entry.train = train_set.len();
        entry.held_out = held_out.get(&label).map_or(0, Vec::len);
        if train_set.is_empty() {
            report.missing_labels.push(label);
            report.labels.insert(label, entry);
            continue;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label.as_str()));
        let points: Vec<&[f64]> = train_set.iter().map(|s| s.features.as_slice()).collect();
        let assign = if feature_dim == 0 {
            vec![0; points.len()]
        } else {
            kmeans(&points, cfg.prototypes_per_label, cfg.kmeans_iterations, &mut rng)
        };
        let clusters = assign.iter().copied().max().unwrap_or(0) + 1;
        let mut protos = Vec::new();
        for c in 0..clusters {
            let members: Vec<&AtomicSample> = train_set
                .iter()
                .zip(&assign)
                .filter(|(_, a)| **a == c)
                .map(|(s, _)| *s)
                .collect();
            if members.is_empty() {
                continue;
            }
            let chunks: Vec<&ActionChunk> = members.iter().map(|s| &s.chunk).collect();
            let mut chunk = mean_chunk(&chunks);
            if relabel_chunk(&chunk, &cfg.relabel) != label {
                // fall back to the medoid, which is label-consistent by construction
                chunk = **chunks
                    .iter()
                    .min_by(|a, b| chunk_sq_dist(a, &chunk).total_cmp(&chunk_sq_dist(b, &chunk)))
                    .unwrap();
            }
            let m = members.len() as f64;
            let centroid = (0..feature_dim)
                .map(|d| members.iter().map(|s| s.features[d]).sum::<f64>() / m)
                .collect();
            protos.push(Prototype {
                centroid,
                chunk,
                weight: m / train_set.len() as f64,
                support: members.len(),
            });
        }
        entry.prototypes = protos.len();
        report.labels.insert(label, entry);
        prototypes.insert(label, protos);
    }

    if !report.missing_labels.is_empty() {
        warn!(
            "atomic dataset does not cover {:?}; the policy cannot sample them",
            report.missing_labels
        );
    }

    let model = PolicyModel {
        version: POLICY_VERSION,
        dataset_hash: sha256_json(&data),
        seed,
        feature_dim,
        noise_scale: cfg.noise_scale,
        max_step: cfg.max_step,
        feature_bandwidth: cfg.feature_bandwidth,
        prototypes,
    };

    for (label, samples) in &held_out {
        if !model.covers(*label) || samples.is_empty() {
            continue;
        }
        let n = cfg.report_samples.max(samples.len());
        let mut hits = 0usize;
        for i in 0..n {
            let s = samples[i % samples.len()];
            let chunk = model.sample(*label, &s.features, derive_seed(seed, &format!("report:{label}:{i}")))?;
            if relabel_chunk(&chunk, &cfg.relabel) == *label {
                hits += 1;
            }
        }
        if let Some(entry) = report.labels.get_mut(label) {
            entry.self_consistency = Some(hits as f64 / n as f64);
        }
    }

    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::chunk_yaw;

    /// Constant-rate chunk for a label, with a mild per-sample variation.
    fn synthetic_chunk(label: AtomicLabel, variant: f64) -> ActionChunk {
        let step = 0.25 * (0.9 + 0.2 * variant);
        let total_deg = match label {
            AtomicLabel::TurnLeft => 70.0 + 30.0 * variant,
            AtomicLabel::TurnRight => -(70.0 + 30.0 * variant),
            AtomicLabel::AdjustLeft => 20.0 + 10.0 * variant,
            AtomicLabel::AdjustRight => -(20.0 + 10.0 * variant),
            AtomicLabel::GoForward => 0.0,
            AtomicLabel::Stop => return ActionChunk::zeros(),
        };
        ActionChunk::repeat(Action::arc(step, (total_deg / CHUNK_HORIZON as f64).to_radians()))
    }

    pub(crate) fn balanced(n_per_label: usize) -> Vec<AtomicSample> {
        let mut out = Vec::new();
        for label in AtomicLabel::ALL {
            for i in 0..n_per_label {
                let v = i as f64 / n_per_label as f64;
                out.push(AtomicSample {
                    trajectory_id: format!("{label}-{i}"),
                    timestep: 0,
                    label,
                    features: vec![v, 1.0 - v, (i % 3) as f64 / 3.0],
                    chunk: synthetic_chunk(label, v),
                });
            }
        }
        out
    }

    fn cfg() -> PolicyConfig {
        PolicyConfig {
            relabel: SegmenterConfig::default().with_reference_step(0.25),
            ..Default::default()
        }
    }

    #[test]
    fn straight_only_data_covers_only_forward() {
        let data: Vec<AtomicSample> = balanced(10)
            .into_iter()
            .filter(|s| s.label == AtomicLabel::GoForward)
            .collect();
        let (model, report) = train(&data, &cfg(), 1).unwrap();
        assert!(model.covers(AtomicLabel::GoForward));
        assert_eq!(model.prototypes.len(), 1);
        assert_eq!(report.missing_labels.len(), 5);
        assert!(matches!(
            model.sample(AtomicLabel::TurnLeft, &[0.0, 0.0, 0.0], 3),
            Err(Error::UncoveredLabel(_))
        ));
    }

    #[test]
    fn balanced_data_is_fully_self_consistent() {
        let (_, report) = train(&balanced(40), &cfg(), 11).unwrap();
        for (label, entry) in &report.labels {
            assert_eq!(entry.self_consistency, Some(1.0), "{label}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = balanced(20);
        let (a, _) = train(&data, &cfg(), 5).unwrap();
        let (b, _) = train(&data, &cfg(), 5).unwrap();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(train(&[], &cfg(), 0), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn weights_sum_to_one() {
        let (model, _) = train(&balanced(30), &cfg(), 2).unwrap();
        for protos in model.prototypes.values() {
            let total: f64 = protos.iter().map(|p| p.weight).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic_and_stop_is_still() {
        let (model, _) = train(&balanced(20), &cfg(), 9).unwrap();
        let f = [0.3, 0.7, 0.0];
        let a = model.sample(AtomicLabel::TurnLeft, &f, 42).unwrap();
        let b = model.sample(AtomicLabel::TurnLeft, &f, 42).unwrap();
        assert_eq!(a, b);
        let stop = model.sample(AtomicLabel::Stop, &f, 1).unwrap();
        assert!(stop.path_length() < 1e-12);
    }

    #[test]
    fn turn_left_samples_relabel_to_turn_left() {
        let (model, _) = train(&balanced(30), &cfg(), 4).unwrap();
        let relabel = cfg().relabel;
        let hits = (0..1000u64)
            .filter(|s| {
                let c = model
                    .sample(AtomicLabel::TurnLeft, &[0.5, 0.5, 0.3], *s)
                    .unwrap();
                relabel_chunk(&c, &relabel) == AtomicLabel::TurnLeft
            })
            .count();
        assert!(hits >= 950, "{hits}");
        let l = model.sample(AtomicLabel::TurnLeft, &[0.5, 0.5, 0.3], 0).unwrap();
        let r = model.sample(AtomicLabel::TurnRight, &[0.5, 0.5, 0.3], 0).unwrap();
        assert!(chunk_yaw(&l) > 0.0 && chunk_yaw(&r) < 0.0);
    }

    #[test]
    fn chunk_from_slice_checks_length() {
        assert!(ActionChunk::from_slice(&[Action::ZERO; 7]).is_err());
        assert!(ActionChunk::from_slice(&[Action::new(f64::NAN, 0.0); 8]).is_err());
        assert!(ActionChunk::from_slice(&[Action::ZERO; 8]).is_ok());
    }
}
