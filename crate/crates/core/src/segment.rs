//! Heuristic atomic segmentation of trajectories.
//!
//! A segment is closed as soon as the cumulative signed yaw change since its
//! start reaches the turn threshold. Otherwise it is closed after `window`
//! steps (or at the end of the trajectory) and labeled from its residual yaw
//! and the distance traveled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mean_step_distance, wrap_angle, Action, AtomicLabel, Pose, Segment, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "SegmenterSettings", into = "SegmenterSettings")]
pub struct SegmenterConfig {
    pub window: usize,
    /// Radians.
    pub turn_yaw_threshold: f64,
    /// Radians.
    pub adjust_yaw_threshold: f64,
    pub stop_distance_fraction: f64,
    /// Step length used to judge go-forward vs stop when relabeling a lone
    /// chunk. When unset, the chunk's own mean step length is used.
    pub reference_step_distance: Option<f64>,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            window: 10,
            turn_yaw_threshold: 45f64.to_radians(),
            adjust_yaw_threshold: 10f64.to_radians(),
            stop_distance_fraction: 0.25,
            reference_step_distance: None,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config("segmenter window must be >= 2".into()));
        }
        if !(self.adjust_yaw_threshold > 0.0
            && self.adjust_yaw_threshold < self.turn_yaw_threshold
            && self.turn_yaw_threshold <= std::f64::consts::PI)
        {
            return Err(Error::Config(
                "need 0 < adjust_yaw_threshold < turn_yaw_threshold <= pi".into(),
            ));
        }
        if !(self.stop_distance_fraction > 0.0 && self.stop_distance_fraction < 1.0) {
            return Err(Error::Config(
                "stop_distance_fraction must be in (0, 1)".into(),
            ));
        }
        if let Some(r) = self.reference_step_distance {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config("reference_step_distance must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn with_reference_step(mut self, step: f64) -> Self {
        self.reference_step_distance = Some(step);
        self
    }

    /// Label for a stretch that never reached the turn threshold.
    fn weak_label(&self, cum_yaw: f64, traveled: f64, steps: usize, step_ref: f64) -> AtomicLabel {
        if cum_yaw.abs() >= self.adjust_yaw_threshold {
            if cum_yaw > 0.0 {
                AtomicLabel::AdjustLeft
            } else {
                AtomicLabel::AdjustRight
            }
        } else if traveled > self.stop_distance_fraction * steps as f64 * step_ref {
            AtomicLabel::GoForward
        } else {
            AtomicLabel::Stop
        }
    }

    fn turn_label(&self, cum_yaw: f64) -> Option<AtomicLabel> {
        if cum_yaw.abs() >= self.turn_yaw_threshold {
            Some(if cum_yaw > 0.0 {
                AtomicLabel::TurnLeft
            } else {
                AtomicLabel::TurnRight
            })
        } else {
            None
        }
    }
}

/// Interface form of [`SegmenterConfig`]: thresholds in degrees.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
struct SegmenterSettings {
    window: usize,
    turn_yaw_threshold_deg: f64,
    adjust_yaw_threshold_deg: f64,
    stop_distance_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference_step_distance: Option<f64>,
}

impl Default for SegmenterSettings {
    fn default() -> Self {
        SegmenterConfig::default().into()
    }
}

impl From<SegmenterSettings> for SegmenterConfig {
    fn from(s: SegmenterSettings) -> Self {
        Self {
            window: s.window,
            turn_yaw_threshold: s.turn_yaw_threshold_deg.to_radians(),
            adjust_yaw_threshold: s.adjust_yaw_threshold_deg.to_radians(),
            stop_distance_fraction: s.stop_distance_fraction,
            reference_step_distance: s.reference_step_distance,
        }
    }
}

impl From<SegmenterConfig> for SegmenterSettings {
    fn from(c: SegmenterConfig) -> Self {
        Self {
            window: c.window,
            turn_yaw_threshold_deg: c.turn_yaw_threshold.to_degrees(),
            adjust_yaw_threshold_deg: c.adjust_yaw_threshold.to_degrees(),
            stop_distance_fraction: c.stop_distance_fraction,
            reference_step_distance: c.reference_step_distance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionPoint {
    pub trajectory_id: String,
    pub timestep: usize,
    pub preceding_label: Option<AtomicLabel>,
    pub following_label: AtomicLabel,
}

/// Splits a trajectory into labeled atomic segments covering every action.
pub fn segment(t: &Trajectory, cfg: &SegmenterConfig) -> Result<Vec<Segment>> {
    cfg.validate()?;
    let step_ref = mean_step_distance(t)?;
    if t.poses.len() != t.actions.len() + 1 {
        return Err(Error::Precondition(format!(
            "trajectory {} has {} poses for {} actions",
            t.id,
            t.poses.len(),
            t.actions.len()
        )));
    }

    let mut segments = Vec::new();
    let mut start = 0;
    let mut cum_yaw = 0.0;
    let mut traveled = 0.0;
    let n = t.actions.len();
    for k in 0..n {
        cum_yaw += wrap_angle(t.poses[k + 1].yaw - t.poses[k].yaw);
        traveled += t.actions[k].norm();
        let steps = k + 1 - start;
        let label = match cfg.turn_label(cum_yaw) {
            Some(turn) => Some(turn),
            None if steps == cfg.window || k + 1 == n => {
                Some(cfg.weak_label(cum_yaw, traveled, steps, step_ref))
            }
            None => None,
        };
        if let Some(label) = label {
            segments.push(Segment {
                trajectory_id: t.id.clone(),
                start,
                end: k + 1,
                label,
            });
            start = k + 1;
            cum_yaw = 0.0;
            traveled = 0.0;
        }
    }
    Ok(segments)
}

/// One decision point at the trajectory start and one per internal boundary.
pub fn decision_points(segments: &[Segment]) -> Vec<DecisionPoint> {
    segments
        .iter()
        .enumerate()
        .map(|(i, s)| DecisionPoint {
            trajectory_id: s.trajectory_id.clone(),
            timestep: s.start,
            preceding_label: i.checked_sub(1).map(|p| segments[p].label),
            following_label: s.label,
        })
        .collect()
}

/// Cumulative signed heading change produced by executing `chunk` from rest.
pub fn chunk_yaw(chunk: &[Action]) -> f64 {
    let mut pose = Pose::origin();
    let mut cum = 0.0;
    for a in chunk {
        let next = pose.advance(*a);
        cum += wrap_angle(next.yaw - pose.yaw);
        pose = next;
    }
    cum
}

/// Deterministic map from an action chunk to its atomic label.
pub fn relabel_chunk(chunk: &[Action], cfg: &SegmenterConfig) -> AtomicLabel {
    let cum_yaw = chunk_yaw(chunk);
    if let Some(turn) = cfg.turn_label(cum_yaw) {
        return turn;
    }
    let traveled: f64 = chunk.iter().map(Action::norm).sum();
    let steps = chunk.len().max(1);
    let step_ref = cfg
        .reference_step_distance
        .unwrap_or(traveled / steps as f64);
    cfg.weak_label(cum_yaw, traveled, steps, step_ref)
}
