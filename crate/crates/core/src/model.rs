//! Shared data model for every pipeline stage.
//!
//! All geometric logic reads poses and actions only. Observation payloads are
//! carried around opaquely so that stages which must not look at perception
//! (segmentation, relabeling) structurally cannot.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::ActionChunk;
use crate::segment::DecisionPoint;

/// Default sanity bound on a single action's magnitude, in meters.
pub const DEFAULT_MAX_STEP: f64 = 5.0;

/// Displacements shorter than this leave the heading unchanged.
pub const MIN_HEADING_MOVE: f64 = 1e-9;

/// Wraps an angle into `(-pi, pi]`. Values already in range are returned untouched.
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let mut r = angle.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    if r <= -PI {
        r = PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn origin() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.yaw.is_finite()
    }

    /// Applies an egocentric action. The new heading follows the direction of
    /// travel; a (near) zero displacement keeps the heading.
    pub fn advance(&self, action: Action) -> Pose {
        let (wx, wy) = action.to_world(self.yaw);
        let yaw = if action.norm() > MIN_HEADING_MOVE {
            wy.atan2(wx)
        } else {
            self.yaw
        };
        Pose::new(self.x + wx, self.y + wy, yaw)
    }

    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        (self.x - x).hypot(self.y - y)
    }
}

/// Egocentric displacement expressed in the frame of the pose that emitted it:
/// `dx` forward, `dy` to the left.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
}

impl Action {
    pub const ZERO: Action = Action { dx: 0.0, dy: 0.0 };

    pub fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    /// A step of length `len` that rotates the heading by `turn` radians.
    pub fn arc(len: f64, turn: f64) -> Self {
        Self::new(len * turn.cos(), len * turn.sin())
    }

    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite()
    }

    pub fn to_world(&self, yaw: f64) -> (f64, f64) {
        let (s, c) = yaw.sin_cos();
        (c * self.dx - s * self.dy, s * self.dx + c * self.dy)
    }

    pub fn from_world(wx: f64, wy: f64, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Self::new(c * wx + s * wy, -s * wx + c * wy)
    }

    /// Scales the action down so its norm does not exceed `max`.
    pub fn clamp_norm(self, max: f64) -> Self {
        let n = self.norm();
        if n > max && n > 0.0 {
            Self::new(self.dx * max / n, self.dy * max / n)
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Uri,
    Features,
    Sim,
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PayloadKind::Uri => "uri",
            PayloadKind::Features => "features",
            PayloadKind::Sim => "sim",
        })
    }
}

/// Opaque perceptual payload. `Sim` payloads additionally carry the ground-truth
/// state so that oracle annotators can resolve them against a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Uri { uri: String },
    Features { values: Vec<f64> },
    Sim { scene: String, pose: Pose, features: Vec<f64> },
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Uri { .. } => PayloadKind::Uri,
            Payload::Features { .. } => PayloadKind::Features,
            Payload::Sim { .. } => PayloadKind::Sim,
        }
    }

    /// Feature vector, when the payload has one.
    pub fn features(&self) -> Option<&[f64]> {
        match self {
            Payload::Features { values } => Some(values),
            Payload::Sim { features, .. } => Some(features),
            Payload::Uri { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub trajectory_id: String,
    pub timestep: usize,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub source: String,
    pub mean_step_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub poses: Vec<Pose>,
    pub actions: Vec<Action>,
    pub observations: Vec<Observation>,
    pub metadata: TrajectoryMeta,
}

impl Trajectory {
    /// Builds a trajectory by integrating `actions` from `start`. Observations
    /// are produced by `observe` for every pose.
    pub fn integrate(
        id: impl Into<String>,
        source: impl Into<String>,
        start: Pose,
        actions: Vec<Action>,
        mut observe: impl FnMut(usize, &Pose) -> Payload,
    ) -> Self {
        let id = id.into();
        let mut poses = Vec::with_capacity(actions.len() + 1);
        poses.push(start);
        for a in &actions {
            let next = poses[poses.len() - 1].advance(*a);
            poses.push(next);
        }
        let observations = poses
            .iter()
            .enumerate()
            .map(|(t, p)| Observation {
                trajectory_id: id.clone(),
                timestep: t,
                payload: observe(t, p),
            })
            .collect();
        let msd = mean_step(&actions).unwrap_or(0.0);
        Self {
            id,
            poses,
            actions,
            observations,
            metadata: TrajectoryMeta {
                source: source.into(),
                mean_step_distance: msd,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Actions `[start, start + len)`, zero-padded past the end of the trajectory.
    pub fn padded_actions(&self, start: usize, len: usize) -> Vec<Action> {
        (start..start + len)
            .map(|t| self.actions.get(t).copied().unwrap_or(Action::ZERO))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Empty,
    LengthMismatch {
        poses: usize,
        actions: usize,
        observations: usize,
    },
    NonFinitePose(usize),
    NonFiniteAction(usize),
    MaxStepExceeded { index: usize, norm: f64 },
    TimestepOrder { index: usize, found: usize },
    ForeignObservation { index: usize, owner: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "empty trajectory"),
            Violation::LengthMismatch {
                poses,
                actions,
                observations,
            } => write!(
                f,
                "length mismatch: {poses} poses, {actions} actions, {observations} observations"
            ),
            Violation::NonFinitePose(i) => write!(f, "non-finite pose at {i}"),
            Violation::NonFiniteAction(i) => write!(f, "non-finite action at {i}"),
            Violation::MaxStepExceeded { index, norm } => {
                write!(f, "max step exceeded at {index} ({norm} m)")
            }
            Violation::TimestepOrder { index, found } => {
                write!(f, "observation {index} has timestep {found}")
            }
            Violation::ForeignObservation { index, owner } => {
                write!(f, "observation {index} belongs to trajectory {owner}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(ToString::to_string).collect()
    }
}

pub fn validate_trajectory(t: &Trajectory, max_step: f64) -> ValidationReport {
    let mut violations = Vec::new();
    if t.poses.is_empty() {
        violations.push(Violation::Empty);
    }
    if t.poses.len() != t.actions.len() + 1 || t.observations.len() != t.poses.len() {
        violations.push(Violation::LengthMismatch {
            poses: t.poses.len(),
            actions: t.actions.len(),
            observations: t.observations.len(),
        });
    }
    for (i, p) in t.poses.iter().enumerate() {
        if !p.is_finite() {
            violations.push(Violation::NonFinitePose(i));
        }
    }
    for (i, a) in t.actions.iter().enumerate() {
        if !a.is_finite() {
            violations.push(Violation::NonFiniteAction(i));
        } else if a.norm() > max_step {
            violations.push(Violation::MaxStepExceeded {
                index: i,
                norm: a.norm(),
            });
        }
    }
    for (i, o) in t.observations.iter().enumerate() {
        if o.timestep != i {
            violations.push(Violation::TimestepOrder {
                index: i,
                found: o.timestep,
            });
        }
        if o.trajectory_id != t.id {
            violations.push(Violation::ForeignObservation {
                index: i,
                owner: o.trajectory_id.clone(),
            });
        }
    }
    ValidationReport { violations }
}

fn mean_step(actions: &[Action]) -> Option<f64> {
    if actions.is_empty() {
        return None;
    }
    Some(actions.iter().map(Action::norm).sum::<f64>() / actions.len() as f64)
}

/// Mean per-step displacement magnitude.
pub fn mean_step_distance(t: &Trajectory) -> Result<f64> {
    mean_step(&t.actions).ok_or_else(|| Error::DegenerateTrajectory(t.id.clone()))
}

/// The six atomic motion commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AtomicLabel {
    #[serde(rename = "turn left")]
    TurnLeft,
    #[serde(rename = "turn right")]
    TurnRight,
    #[serde(rename = "go forward")]
    GoForward,
    #[serde(rename = "stop")]
    Stop,
    #[serde(rename = "adjust left")]
    AdjustLeft,
    #[serde(rename = "adjust right")]
    AdjustRight,
}

impl AtomicLabel {
    /// Order used when listing primitives in prompts.
    pub const ALL: [AtomicLabel; 6] = [
        AtomicLabel::TurnLeft,
        AtomicLabel::TurnRight,
        AtomicLabel::GoForward,
        AtomicLabel::Stop,
        AtomicLabel::AdjustLeft,
        AtomicLabel::AdjustRight,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AtomicLabel::TurnLeft => "turn left",
            AtomicLabel::TurnRight => "turn right",
            AtomicLabel::GoForward => "go forward",
            AtomicLabel::Stop => "stop",
            AtomicLabel::AdjustLeft => "adjust left",
            AtomicLabel::AdjustRight => "adjust right",
        }
    }

    /// Capitalized spelling used inside prompts, e.g. `Turn left`.
    pub fn prompt_name(&self) -> &'static str {
        match self {
            AtomicLabel::TurnLeft => "Turn left",
            AtomicLabel::TurnRight => "Turn right",
            AtomicLabel::GoForward => "Go forward",
            AtomicLabel::Stop => "Stop",
            AtomicLabel::AdjustLeft => "Adjust left",
            AtomicLabel::AdjustRight => "Adjust right",
        }
    }

    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|l| l == self).unwrap()
    }

    /// +1 for left-turning labels, -1 for right-turning, 0 otherwise.
    pub fn turn_sign(&self) -> i8 {
        match self {
            AtomicLabel::TurnLeft | AtomicLabel::AdjustLeft => 1,
            AtomicLabel::TurnRight | AtomicLabel::AdjustRight => -1,
            AtomicLabel::GoForward | AtomicLabel::Stop => 0,
        }
    }
}

impl fmt::Display for AtomicLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AtomicLabel {
    type Err = Error;

    /// Case-insensitive; tolerates surrounding whitespace, quotes and
    /// underscores/hyphens in place of spaces.
    fn from_str(s: &str) -> Result<Self> {
        let cleaned: String = s
            .trim()
            .trim_matches(|c: char| c == '\'' || c == '"' || c == '.' || c == '`')
            .to_lowercase()
            .replace(['_', '-'], " ");
        let normalized = cleaned.split_whitespace().collect::<Vec<_>>().join(" ");
        AtomicLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == normalized)
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub trajectory_id: String,
    pub start: usize,
    pub end: usize,
    pub label: AtomicLabel,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Checks that `segments` are non-empty, ordered, disjoint and cover `[0, n_actions)`.
pub fn validate_segments(segments: &[Segment], n_actions: usize) -> Result<()> {
    let mut cursor = 0;
    for s in segments {
        if s.start >= s.end {
            return Err(Error::Precondition(format!(
                "empty segment [{}, {})",
                s.start, s.end
            )));
        }
        if s.start != cursor {
            return Err(Error::Precondition(format!(
                "segment starts at {} but previous ended at {cursor}",
                s.start
            )));
        }
        cursor = s.end;
    }
    if cursor != n_actions {
        return Err(Error::Precondition(format!(
            "segments cover [0, {cursor}) but trajectory has {n_actions} actions"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    HindsightRaw,
    HindsightFiltered,
    Counterfactual,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::HindsightRaw => "hindsight-raw",
            Provenance::HindsightFiltered => "hindsight-filtered",
            Provenance::Counterfactual => "counterfactual",
        }
    }
}

/// The four structured instruction templates plus a catch-all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormatClass {
    /// "Move from A to B" or "Move to B"
    MoveTo,
    /// "Move away from C"
    MoveAway,
    /// "Move past D"
    MovePast,
    /// "Move in a E way"
    MoveManner,
    FreeForm,
}

impl FormatClass {
    pub fn classify(text: &str) -> FormatClass {
        let t = normalize_whitespace(text).to_lowercase();
        if t.starts_with("move away from ") {
            FormatClass::MoveAway
        } else if t.starts_with("move past ") {
            FormatClass::MovePast
        } else if t.starts_with("move in a ") || t.starts_with("move in an ") {
            FormatClass::MoveManner
        } else if t.starts_with("move to ") || t.starts_with("move from ") {
            FormatClass::MoveTo
        } else {
            FormatClass::FreeForm
        }
    }
}

pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionLabel {
    pub text: String,
    pub provenance: Provenance,
    pub format_class: FormatClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_point: Option<DecisionPoint>,
}

impl InstructionLabel {
    pub fn hindsight(text: &str, provenance: Provenance) -> Result<Self> {
        let text = normalize_whitespace(text);
        if text.is_empty() {
            return Err(Error::Precondition("instruction text is empty".into()));
        }
        Ok(Self {
            format_class: FormatClass::classify(&text),
            text,
            provenance,
            decision_point: None,
        })
    }

    pub fn counterfactual(text: &str, decision_point: DecisionPoint) -> Result<Self> {
        let text = normalize_whitespace(text);
        if text.is_empty() {
            return Err(Error::Precondition("instruction text is empty".into()));
        }
        Ok(Self {
            format_class: FormatClass::classify(&text),
            text,
            provenance: Provenance::Counterfactual,
            decision_point: Some(decision_point),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Factual,
    Counterfactual,
}

/// Records which atomic policy produced a counterfactual chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyProvenance {
    pub policy_hash: String,
    pub seed: u64,
    pub atomic: AtomicLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub trajectory_id: String,
    pub anchor_timestep: usize,
    pub observation: Observation,
    pub instruction: InstructionLabel,
    pub chunk: ActionChunk,
    pub branch: Branch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyProvenance>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(actions: Vec<Action>) -> Trajectory {
        Trajectory::integrate("t0", "test", Pose::origin(), actions, |_, _| {
            Payload::Features { values: vec![] }
        })
    }

    #[test]
    fn minimal_trajectory_is_valid() {
        let t = traj(vec![Action::new(1.0, 0.0); 2]);
        assert_eq!(t.poses.len(), 3);
        assert!(validate_trajectory(&t, DEFAULT_MAX_STEP).is_ok());
    }

    #[test]
    fn extra_action_is_length_mismatch() {
        let mut t = traj(vec![Action::new(1.0, 0.0); 2]);
        t.actions.push(Action::new(1.0, 0.0));
        let report = validate_trajectory(&t, DEFAULT_MAX_STEP);
        assert!(report.messages()[0].starts_with("length mismatch"));
    }

    #[test]
    fn huge_action_exceeds_max_step() {
        let mut t = traj(vec![Action::new(1.0, 0.0); 2]);
        t.actions[1] = Action::new(1e9, 0.0);
        let report = validate_trajectory(&t, DEFAULT_MAX_STEP);
        assert_eq!(report.violations.len(), 1);
        assert!(report.messages()[0].starts_with("max step exceeded"));
    }

    #[test]
    fn mean_step_distance_cases() {
        let t = traj(vec![Action::new(1.0, 0.0); 5]);
        assert_eq!(mean_step_distance(&t).unwrap(), 1.0);
        let t = traj(vec![Action::new(3.0, 4.0), Action::new(0.0, 0.0)]);
        assert_eq!(mean_step_distance(&t).unwrap(), 2.5);
        let t = traj(vec![]);
        assert!(matches!(
            mean_step_distance(&t),
            Err(Error::DegenerateTrajectory(_))
        ));
    }

    #[test]
    fn random_walk_mean_step_matches_direct_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let actions: Vec<Action> = (0..100)
            .map(|_| Action::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let mut total = 0.0;
        for a in &actions {
            total += (a.dx * a.dx + a.dy * a.dy).sqrt();
        }
        let t = traj(actions);
        assert!((mean_step_distance(&t).unwrap() - total / 100.0).abs() < 1e-12);
    }

    #[test]
    fn atomic_label_parsing_is_case_insensitive() {
        assert_eq!("Turn LEFT".parse::<AtomicLabel>().unwrap(), AtomicLabel::TurnLeft);
        assert_eq!(" 'Go forward' ".parse::<AtomicLabel>().unwrap(), AtomicLabel::GoForward);
        assert_eq!("adjust_right".parse::<AtomicLabel>().unwrap(), AtomicLabel::AdjustRight);
        assert!("dance".parse::<AtomicLabel>().is_err());
        assert_eq!(
            serde_json::to_string(&AtomicLabel::AdjustLeft).unwrap(),
            "\"adjust left\""
        );
    }

    #[test]
    fn format_classes() {
        assert_eq!(FormatClass::classify("Move to the door"), FormatClass::MoveTo);
        assert_eq!(FormatClass::classify("Move from A to B"), FormatClass::MoveTo);
        assert_eq!(FormatClass::classify("Move away from the bin"), FormatClass::MoveAway);
        assert_eq!(FormatClass::classify("Move past the pillar"), FormatClass::MovePast);
        assert_eq!(FormatClass::classify("Move in a zigzag way"), FormatClass::MoveManner);
        assert_eq!(FormatClass::classify("Follow the wall"), FormatClass::FreeForm);
    }

    #[test]
    fn segment_cover_check() {
        let seg = |s, e| Segment {
            trajectory_id: "t".into(),
            start: s,
            end: e,
            label: AtomicLabel::Stop,
        };
        assert!(validate_segments(&[seg(0, 10), seg(10, 16)], 16).is_ok());
        assert!(validate_segments(&[seg(0, 10), seg(9, 16)], 16).is_err());
        assert!(validate_segments(&[seg(0, 10)], 16).is_err());
    }

    #[test]
    fn frame_conversion_round_trip() {
        let a = Action::new(0.3, -0.1);
        let (wx, wy) = a.to_world(1.2);
        let b = Action::from_world(wx, wy, 1.2);
        assert!((a.dx - b.dx).abs() < 1e-12 && (a.dy - b.dy).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn wrap_is_idempotent_and_in_range(theta in -1e3f64..1e3) {
            let w = wrap_angle(theta);
            prop_assert!(w > -PI && w <= PI);
            prop_assert_eq!(wrap_angle(w), w);
        }

        #[test]
        fn trajectory_json_round_trip(steps in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 0..20)) {
            let t = traj(steps.into_iter().map(|(x, y)| Action::new(x, y)).collect());
            let text = serde_json::to_string(&t).unwrap();
            let back: Trajectory = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
