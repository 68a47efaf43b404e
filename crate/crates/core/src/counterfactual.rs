//! Counterfactual branches at decision points and assembly of the labeled
//! training set.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::{
    parse_response, render_prompt, AnnotationKind, Annotator, AnnotatorRequest, AnnotatorResponse,
    CounterfactualProposal, RequestContext,
};
use crate::error::{Error, Result};
use crate::model::{
    AtomicLabel, Branch, InstructionLabel, LabeledExample, PolicyProvenance, Segment, Trajectory,
};
use crate::policy::{observation_features, ActionChunk, PolicyModel, CHUNK_HORIZON};
use crate::seed::derive_seed;
use crate::segment::{relabel_chunk, DecisionPoint, SegmenterConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterfactualConfig {
    /// Chunks drawn per proposal before it is given up.
    pub rejection_budget: usize,
    pub max_per_decision_point: usize,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        Self {
            rejection_budget: 8,
            max_per_decision_point: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    pub trajectory_id: String,
    pub decision_timestep: usize,
    pub instruction: InstructionLabel,
    pub atomic: AtomicLabel,
    pub chunk: ActionChunk,
    pub policy: PolicyProvenance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualStats {
    pub proposals: usize,
    pub capped: usize,
    pub rejected: usize,
    pub uncovered: usize,
    pub accepted: usize,
}

impl CounterfactualStats {
    pub fn merge(mut self, o: Self) -> Self {
        self.proposals += o.proposals;
        self.capped += o.capped;
        self.rejected += o.rejected;
        self.uncovered += o.uncovered;
        self.accepted += o.accepted;
        self
    }
}

/// Builds the counterfactual request for one trajectory: one image per segment
/// start, so `images[i]` is where `labels[i]` begins.
pub fn counterfactual_request(t: &Trajectory, segments: &[Segment], filtered: &[InstructionLabel]) -> AnnotatorRequest {
    AnnotatorRequest::new(
        AnnotationKind::Counterfactual,
        segments.iter().map(|s| t.observations[s.start].clone()).collect(),
        RequestContext {
            labels: Some(segments.iter().map(|s| s.label).collect()),
            filtered_lang: Some(filtered.iter().map(|l| l.text.clone()).collect()),
            ..Default::default()
        },
    )
}

/// Queries the backend for proposals. A reply with no usable proposal yields
/// an empty list; other errors propagate.
pub fn request_proposals(
    t: &Trajectory,
    segments: &[Segment],
    filtered: &[InstructionLabel],
    annotator: &dyn Annotator,
) -> Result<(Vec<CounterfactualProposal>, String)> {
    if segments.len() < 2 {
        return Ok((Vec::new(), String::new()));
    }
    let req = counterfactual_request(t, segments, filtered);
    render_prompt(&req)?;
    let raw = annotator.complete(&req)?;
    match parse_response(&req, &raw) {
        Ok(AnnotatorResponse::Proposals(p)) => Ok((p, raw)),
        Ok(_) => unreachable!("counterfactual requests parse to proposals"),
        Err(Error::EmptyCounterfactualResponse) => {
            debug!("{}: no counterfactual proposals", t.id);
            Ok((Vec::new(), raw))
        }
        Err(e) => Err(e),
    }
}

/// Turns proposals into records by sampling branch chunks from the atomic
/// policy, keeping the first draw whose relabel matches the proposed command.
pub fn realize_proposals(
    t: &Trajectory,
    segments: &[Segment],
    proposals: &[CounterfactualProposal],
    policy: &PolicyModel,
    relabel: &SegmenterConfig,
    cfg: &CounterfactualConfig,
    seed: u64,
) -> Result<(Vec<CounterfactualRecord>, CounterfactualStats)> {
    if policy.prototypes.values().all(Vec::is_empty) {
        return Err(Error::Precondition("atomic policy has no prototypes".into()));
    }
    let policy_hash = policy.hash();
    let mut stats = CounterfactualStats {
        proposals: proposals.len(),
        ..Default::default()
    };
    let mut per_point: BTreeMap<usize, usize> = BTreeMap::new();
    let mut seen: BTreeSet<(usize, AtomicLabel, String)> = BTreeSet::new();
    let mut out = Vec::new();
    for p in proposals {
        let idx = p.branch_segment();
        let Some(seg) = segments.get(idx) else {
            warn!("{}: proposal refers to missing segment {idx}", t.id);
            stats.rejected += 1;
            continue;
        };
        if p.proposed_action == seg.label {
            stats.rejected += 1;
            continue;
        }
        if !seen.insert((seg.start, p.proposed_action, p.new_instruction.to_lowercase())) {
            continue;
        }
        let count = per_point.entry(seg.start).or_default();
        if *count >= cfg.max_per_decision_point {
            stats.capped += 1;
            continue;
        }
        if !policy.covers(p.proposed_action) {
            warn!("{}: atomic policy has no prototypes for {}", t.id, p.proposed_action);
            stats.uncovered += 1;
            continue;
        }
        let features = observation_features(t, seg.start);
        let mut accepted = None;
        for r in 0..cfg.rejection_budget {
            let s = derive_seed(
                seed,
                &format!("{}/{}/{}/{}/{r}", t.id, seg.start, p.proposed_action, p.new_instruction),
            );
            let chunk = policy.sample(p.proposed_action, &features, s)?;
            if relabel_chunk(&chunk, relabel) == p.proposed_action {
                accepted = Some((chunk, s));
                break;
            }
        }
        let Some((chunk, s)) = accepted else {
            warn!(
                "{}: no {} chunk in {} draws at step {}; proposal dropped",
                t.id, p.proposed_action, cfg.rejection_budget, seg.start
            );
            stats.rejected += 1;
            continue;
        };
        let dp = DecisionPoint {
            trajectory_id: t.id.clone(),
            timestep: seg.start,
            preceding_label: idx.checked_sub(1).map(|i| segments[i].label),
            following_label: seg.label,
        };
        out.push(CounterfactualRecord {
            trajectory_id: t.id.clone(),
            decision_timestep: seg.start,
            instruction: InstructionLabel::counterfactual(&p.new_instruction, dp)?,
            atomic: p.proposed_action,
            chunk,
            policy: PolicyProvenance {
                policy_hash: policy_hash.clone(),
                seed: s,
                atomic: p.proposed_action,
            },
        });
        *count += 1;
        stats.accepted += 1;
    }
    Ok((out, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryCounterfactuals {
    pub trajectory_id: String,
    pub records: Vec<CounterfactualRecord>,
    pub stats: CounterfactualStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
}

/// Requests and realizes counterfactuals for one trajectory.
#[allow(clippy::too_many_arguments)]
pub fn generate_counterfactuals(
    t: &Trajectory,
    segments: &[Segment],
    filtered: &[InstructionLabel],
    annotator: &dyn Annotator,
    policy: &PolicyModel,
    relabel: &SegmenterConfig,
    cfg: &CounterfactualConfig,
    seed: u64,
) -> Result<TrajectoryCounterfactuals> {
    let wrap = |e: Error| Error::Annotation {
        trajectory: t.id.clone(),
        source: Box::new(e),
    };
    let (proposals, raw) = request_proposals(t, segments, filtered, annotator).map_err(wrap)?;
    let (records, stats) = realize_proposals(t, segments, &proposals, policy, relabel, cfg, seed)?;
    Ok(TrajectoryCounterfactuals {
        trajectory_id: t.id.clone(),
        records,
        stats,
        raw_reply: Some(raw),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssemblyConfig {
    /// Step between factual anchors; only full chunk windows are used.
    pub chunk_stride: usize,
    /// Also anchor factual examples at decision points that have
    /// counterfactuals, so each branch shares its observation with a factual
    /// example.
    pub anchor_decision_points: bool,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        Self {
            chunk_stride: CHUNK_HORIZON,
            anchor_decision_points: true,
        }
    }
}

/// Builds the labeled dataset. Trajectories without filtered instructions
/// contribute nothing. Output order follows the trajectory order, then anchor,
/// with factual examples before counterfactual ones at the same anchor.
pub fn assemble_labeled_dataset(
    trajectories: &[Trajectory],
    instructions: &BTreeMap<String, Vec<InstructionLabel>>,
    counterfactuals: &[CounterfactualRecord],
    cfg: &AssemblyConfig,
) -> Result<Vec<LabeledExample>> {
    if cfg.chunk_stride == 0 {
        return Err(Error::Config("chunk_stride must be >= 1".into()));
    }
    let index: BTreeMap<&str, usize> = trajectories.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
    let mut by_traj: BTreeMap<usize, Vec<&CounterfactualRecord>> = BTreeMap::new();
    for c in counterfactuals {
        let &i = index
            .get(c.trajectory_id.as_str())
            .ok_or_else(|| Error::OrphanCounterfactual(c.trajectory_id.clone()))?;
        if c.decision_timestep >= trajectories[i].observations.len() {
            return Err(Error::OrphanCounterfactual(format!(
                "{} at step {}",
                c.trajectory_id, c.decision_timestep
            )));
        }
        by_traj.entry(i).or_default().push(c);
    }

    let per_traj: Vec<Vec<LabeledExample>> = trajectories
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let labels = instructions.get(&t.id).map(Vec::as_slice).unwrap_or(&[]);
            let cfs = by_traj.get(&i).map(Vec::as_slice).unwrap_or(&[]);
            let mut anchors: BTreeSet<usize> = (0..t.len())
                .step_by(cfg.chunk_stride)
                .filter(|s| s + CHUNK_HORIZON <= t.len())
                .collect();
            if cfg.anchor_decision_points {
                anchors.extend(cfs.iter().map(|c| c.decision_timestep));
            }
            let mut out = Vec::new();
            if labels.is_empty() {
                return Ok(out);
            }
            for &anchor in &anchors {
                let chunk = ActionChunk::from_slice(&t.padded_actions(anchor, CHUNK_HORIZON))?;
                for l in labels {
                    out.push(LabeledExample {
                        trajectory_id: t.id.clone(),
                        anchor_timestep: anchor,
                        observation: t.observations[anchor].clone(),
                        instruction: l.clone(),
                        chunk,
                        branch: Branch::Factual,
                        policy: None,
                    });
                }
                for c in cfs.iter().filter(|c| c.decision_timestep == anchor) {
                    out.push(LabeledExample {
                        trajectory_id: t.id.clone(),
                        anchor_timestep: anchor,
                        observation: t.observations[anchor].clone(),
                        instruction: c.instruction.clone(),
                        chunk: c.chunk,
                        branch: Branch::Counterfactual,
                        policy: Some(c.policy.clone()),
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_traj.into_iter().flatten().collect())
}

/// The factual part of a labeled dataset.
pub fn hindsight_only(examples: &[LabeledExample]) -> Vec<LabeledExample> {
    examples.iter().filter(|e| e.branch == Branch::Factual).cloned().collect()
}
