//! Hindsight instruction labeling: describe subsampled observations, summarize
//! them into candidate instructions, then filter the candidates against the
//! trajectory's atomic labels.

use std::collections::BTreeSet;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::annotate::{
    parse_response, render_prompt, AnnotationKind, Annotator, AnnotatorRequest, AnnotatorResponse, RequestContext,
};
use crate::error::{Error, Result};
use crate::model::{normalize_whitespace, AtomicLabel, FormatClass, InstructionLabel, Provenance, Segment, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelerConfig {
    /// Subsample stride in steps. `0` picks the smallest stride that keeps
    /// the image count within `max_images_per_trajectory`.
    pub subsample_stride: usize,
    pub max_images_per_trajectory: usize,
    pub move_to: bool,
    pub move_away: bool,
    pub move_past: bool,
    pub move_manner: bool,
    pub free_form: bool,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            subsample_stride: 0,
            max_images_per_trajectory: 8,
            move_to: true,
            move_away: true,
            move_past: true,
            move_manner: true,
            free_form: true,
        }
    }
}

impl LabelerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_images_per_trajectory < 2 {
            return Err(Error::Config("max_images_per_trajectory must be >= 2".into()));
        }
        Ok(())
    }

    pub fn allows(&self, class: FormatClass) -> bool {
        match class {
            FormatClass::MoveTo => self.move_to,
            FormatClass::MoveAway => self.move_away,
            FormatClass::MovePast => self.move_past,
            FormatClass::MoveManner => self.move_manner,
            FormatClass::FreeForm => self.free_form,
        }
    }

    /// Timesteps whose observations are described.
    pub fn subsample(&self, n_actions: usize) -> Vec<usize> {
        let stride = if self.subsample_stride > 0 {
            self.subsample_stride
        } else {
            n_actions.div_ceil(self.max_images_per_trajectory).max(1)
        };
        (0..n_actions)
            .step_by(stride)
            .take(self.max_images_per_trajectory)
            .collect()
    }
}

/// Raw replies per stage, kept for the `--debug` sidecar.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReplies {
    pub describe: Vec<String>,
    pub summarize: Option<String>,
    pub filter: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLabels {
    pub trajectory_id: String,
    pub raw: Vec<InstructionLabel>,
    pub filtered: Vec<InstructionLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub debug: Option<StageReplies>,
}

fn call(annotator: &dyn Annotator, req: &AnnotatorRequest) -> Result<(AnnotatorResponse, String)> {
    render_prompt(req)?;
    let raw = annotator.complete(req)?;
    let parsed = parse_response(req, &raw)?;
    Ok((parsed, raw))
}

/// One description per subsampled observation, in order.
pub fn describe_observations(
    t: &Trajectory,
    annotator: &dyn Annotator,
    cfg: &LabelerConfig,
) -> Result<Vec<(usize, String, String)>> {
    if t.observations.len() < 2 {
        return Err(Error::Precondition(format!(
            "trajectory {} has {} observations, need at least 2",
            t.id,
            t.observations.len()
        )));
    }
    cfg.subsample(t.len())
        .into_iter()
        .map(|step| {
            let req = AnnotatorRequest::new(
                AnnotationKind::Describe,
                vec![t.observations[step].clone()],
                RequestContext::default(),
            );
            match call(annotator, &req)? {
                (AnnotatorResponse::Description(d), raw) => Ok((step, d, raw)),
                _ => unreachable!("describe requests parse to descriptions"),
            }
        })
        .collect()
}

/// Candidate instructions from the per-image descriptions.
pub fn summarize_to_instructions(
    t: &Trajectory,
    described: &[(usize, String)],
    annotator: &dyn Annotator,
) -> Result<(Vec<InstructionLabel>, String)> {
    let req = AnnotatorRequest::new(
        AnnotationKind::Summarize,
        described.iter().map(|(s, _)| t.observations[*s].clone()).collect(),
        RequestContext {
            descriptions: Some(described.iter().map(|(_, d)| d.clone()).collect()),
            ..Default::default()
        },
    );
    let (parsed, raw) = call(annotator, &req)?;
    let AnnotatorResponse::Instructions(list) = parsed else {
        unreachable!("summarize requests parse to instruction lists")
    };
    let labels = dedup(list)
        .iter()
        .map(|text| InstructionLabel::hindsight(text, Provenance::HindsightRaw))
        .collect::<Result<Vec<_>>>()?;
    Ok((labels, raw))
}

fn dedup(items: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    items
        .into_iter()
        .map(|s| normalize_whitespace(&s))
        .filter(|s| !s.is_empty() && seen.insert(s.to_lowercase()))
        .collect()
}

/// Keeps the candidates the backend judges consistent with the atomic labels,
/// plus any new instructions it adds. A "best" entry that is not among the
/// candidates is dropped.
pub fn filter_instructions(
    t: &Trajectory,
    raw: &[InstructionLabel],
    labels: &[AtomicLabel],
    annotator: &dyn Annotator,
) -> Result<(Vec<InstructionLabel>, String)> {
    let req = AnnotatorRequest::new(
        AnnotationKind::Filter,
        t.observations.first().cloned().into_iter().collect(),
        RequestContext {
            labels: Some(labels.to_vec()),
            orig_lang: Some(raw.iter().map(|l| l.text.clone()).collect()),
            ..Default::default()
        },
    );
    let (parsed, reply) = call(annotator, &req)?;
    let AnnotatorResponse::Filter(result) = parsed else {
        unreachable!("filter requests parse to filter results")
    };
    let known: BTreeSet<String> = raw.iter().map(|l| l.text.to_lowercase()).collect();
    let mut best = Vec::new();
    for b in result.best {
        if known.contains(&b.to_lowercase()) {
            best.push(b);
        } else {
            warn!("{}: filter kept an instruction it was not given: {b:?}", t.id);
        }
    }
    let mut all = best;
    all.extend(result.new);
    let filtered = dedup(all)
        .iter()
        .map(|text| InstructionLabel::hindsight(text, Provenance::HindsightFiltered))
        .collect::<Result<Vec<_>>>()?;
    Ok((filtered, reply))
}

/// Runs describe, summarize and filter for one trajectory. Errors carry the
/// trajectory id.
pub fn label_trajectory(
    t: &Trajectory,
    segments: &[Segment],
    annotator: &dyn Annotator,
    cfg: &LabelerConfig,
    keep_debug: bool,
) -> Result<TrajectoryLabels> {
    let wrap = |e: Error| Error::Annotation {
        trajectory: t.id.clone(),
        source: Box::new(e),
    };
    cfg.validate()?;
    let described = describe_observations(t, annotator, cfg).map_err(wrap)?;
    let pairs: Vec<(usize, String)> = described.iter().map(|(s, d, _)| (*s, d.clone())).collect();
    let (raw, summarize_reply) = summarize_to_instructions(t, &pairs, annotator).map_err(wrap)?;
    let raw: Vec<InstructionLabel> = raw.into_iter().filter(|l| cfg.allows(l.format_class)).collect();
    let labels: Vec<AtomicLabel> = segments.iter().map(|s| s.label).collect();
    let (filtered, filter_reply) = if raw.is_empty() {
        (Vec::new(), None)
    } else {
        let (f, r) = filter_instructions(t, &raw, &labels, annotator).map_err(wrap)?;
        (f.into_iter().filter(|l| cfg.allows(l.format_class)).collect(), Some(r))
    };
    if filtered.is_empty() {
        info!("{}: no instructions survived filtering; excluded from the labeled set", t.id);
    }
    Ok(TrajectoryLabels {
        trajectory_id: t.id.clone(),
        raw,
        filtered,
        debug: keep_debug.then(|| StageReplies {
            describe: described.into_iter().map(|(_, _, r)| r).collect(),
            summarize: Some(summarize_reply),
            filter: filter_reply,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Action, Payload, Pose};

    struct Scripted;

    impl Annotator for Scripted {
        fn id(&self) -> String {
            "scripted".into()
        }

        fn complete(&self, req: &AnnotatorRequest) -> Result<String> {
            Ok(match req.kind {
                AnnotationKind::Describe => format!("frame {}", req.images[0].timestep),
                AnnotationKind::Summarize => "{'instructions': ['Move down the hallway on the right', 'Move to the door', 'Move to the door'], 'reasoning': ''}".into(),
                AnnotationKind::Filter => {
                    let labels = req.context.labels.as_ref().unwrap();
                    let best = if labels.contains(&AtomicLabel::TurnLeft) {
                        "['Move to the door', 'Move to the window']"
                    } else {
                        "['Move down the hallway on the right', 'Move to the door']"
                    };
                    format!("{{'best': {best}, 'new': ['Turn left at the door']}}")
                }
                _ => unreachable!(),
            })
        }
    }

    fn traj(n: usize) -> Trajectory {
        Trajectory::integrate("t", "test", Pose::origin(), vec![Action::new(0.25, 0.0); n], |_, _| {
            Payload::Features { values: vec![] }
        })
    }

    #[test]
    fn stride_arithmetic() {
        let cfg = LabelerConfig {
            subsample_stride: 5,
            ..Default::default()
        };
        assert_eq!(cfg.subsample(20), vec![0, 5, 10, 15]);
        let auto = LabelerConfig::default();
        assert!(auto.subsample(100).len() <= 8);
        assert_eq!(auto.subsample(4), vec![0, 1, 2, 3]);
    }

    #[test]
    fn descriptions_follow_subsampling() {
        let cfg = LabelerConfig {
            subsample_stride: 5,
            ..Default::default()
        };
        let d = describe_observations(&traj(20), &Scripted, &cfg).unwrap();
        let steps: Vec<usize> = d.iter().map(|x| x.0).collect();
        assert_eq!(steps, vec![0, 5, 10, 15]);
        assert_eq!(d[2].1, "frame 10");
        assert!(matches!(
            describe_observations(&traj(0), &Scripted, &cfg),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn filter_drops_contradicted_and_unknown_survivors() {
        let t = traj(20);
        let seg = |label| Segment {
            trajectory_id: "t".into(),
            start: 0,
            end: 20,
            label,
        };
        let out = label_trajectory(&t, &[seg(AtomicLabel::TurnLeft)], &Scripted, &LabelerConfig::default(), true).unwrap();
        assert_eq!(out.raw.len(), 2);
        let texts: Vec<&str> = out.filtered.iter().map(|l| l.text.as_str()).collect();
        assert_eq!(texts, vec!["Move to the door", "Turn left at the door"]);
        assert!(out.filtered.iter().all(|l| l.provenance == Provenance::HindsightFiltered));
        assert_eq!(out.debug.unwrap().describe.len(), 7);
    }

    #[test]
    fn disabled_format_is_removed() {
        let cfg = LabelerConfig {
            free_form: false,
            ..Default::default()
        };
        let seg = Segment {
            trajectory_id: "t".into(),
            start: 0,
            end: 20,
            label: AtomicLabel::GoForward,
        };
        let out = label_trajectory(&traj(20), &[seg], &Scripted, &cfg, false).unwrap();
        assert!(out.filtered.iter().all(|l| l.format_class != FormatClass::FreeForm));
        assert!(out.debug.is_none());
    }
}
