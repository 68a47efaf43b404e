//! CAST vs hindsight-only comparison on the scene benchmark.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, evaluate_with, BenchmarkReport, EvalConfig};
use super::policy::{train_toy_policy, OraclePolicy, PlannerPolicy, RandomPolicy, ToyConfig, ToyPolicy};
use super::scene::Scene;
use crate::annotate::Annotator;
use crate::counterfactual::hindsight_only;
use crate::error::Result;
use crate::model::{AtomicLabel, Branch, LabeledExample};
use crate::policy::PolicyModel;
use crate::seed::derive_seed;
use crate::segment::{relabel_chunk, SegmenterConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSettings {
    pub enabled: bool,
    pub toy: ToyConfig,
    pub eval: EvalConfig,
    /// Also evaluate the planner, random and oracle reference policies.
    pub baselines: bool,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            toy: ToyConfig::default(),
            eval: EvalConfig::default(),
            baselines: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOutcome {
    pub report: BenchmarkReport,
    pub cast_probes: ProbeReport,
    pub hindsight_probes: ProbeReport,
}

impl BenchmarkOutcome {
    pub fn to_text(&self) -> String {
        format!(
            "{}\nshared-observation probes: cast differs at {}/{}, hindsight differs at {}/{}\n",
            self.report.to_text(),
            self.cast_probes.differing,
            self.cast_probes.probes,
            self.hindsight_probes.differing,
            self.hindsight_probes.probes
        )
    }
}

/// Trains the toy learner on the full and the factual-only dataset and
/// evaluates both, plus reference policies when configured.
#[allow(clippy::too_many_arguments)]
pub fn benchmark(
    scenes: &[Scene],
    dataset: &[LabeledExample],
    atomic: &PolicyModel,
    planner_backend: &dyn Annotator,
    relabel: &SegmenterConfig,
    cfg: &BenchmarkSettings,
    step: f64,
    seed: u64,
) -> Result<BenchmarkOutcome> {
    let eval_seed = derive_seed(seed, "eval");
    let cast = train_toy_policy("cast", dataset, &cfg.toy)?;
    let hindsight = train_toy_policy("hindsight", &hindsight_only(dataset), &cfg.toy)?;
    let cast_probes = shared_observation_probes(&cast, dataset, relabel);
    let hindsight_probes = shared_observation_probes(&hindsight, dataset, relabel);
    let mut policies = vec![
        evaluate(&cast, scenes, &cfg.eval, eval_seed)?,
        evaluate(&hindsight, scenes, &cfg.eval, eval_seed)?,
    ];
    if cfg.baselines {
        let planner = PlannerPolicy {
            annotator: planner_backend,
            atomic,
        };
        policies.push(evaluate(&planner, scenes, &cfg.eval, eval_seed)?);
        let random = RandomPolicy {
            step,
            max_turn_deg: 20.0,
        };
        policies.push(evaluate(&random, scenes, &cfg.eval, eval_seed)?);
        policies.push(evaluate_with("oracle", scenes, &cfg.eval, eval_seed, |scene, task| {
            Box::new(OraclePolicy {
                scene,
                target: task.target.clone(),
                step,
                max_turn_deg: 30.0,
                thresholds: cfg.eval.thresholds.clone(),
            })
        })?);
    }
    Ok(BenchmarkOutcome {
        report: BenchmarkReport {
            seed,
            config: cfg.eval.clone(),
            policies,
        },
        cast_probes,
        hindsight_probes,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probes: usize,
    /// Probes where the policy's chunks relabel differently across the
    /// instructions attached to the probe observation.
    pub differing: usize,
}

impl ProbeReport {
    pub fn fraction(&self) -> f64 {
        if self.probes == 0 {
            0.0
        } else {
            self.differing as f64 / self.probes as f64
        }
    }
}

/// Queries the policy at every observation that carries a counterfactual
/// branch, once per instruction attached there, and counts observations where
/// the atomic relabel of the returned chunks is not constant.
pub fn shared_observation_probes(policy: &ToyPolicy, dataset: &[LabeledExample], relabel: &SegmenterConfig) -> ProbeReport {
    let mut keys: BTreeMap<(&str, usize), (&LabeledExample, BTreeSet<&str>, bool)> = BTreeMap::new();
    for e in dataset {
        let entry = keys
            .entry((e.trajectory_id.as_str(), e.anchor_timestep))
            .or_insert_with(|| (e, BTreeSet::new(), false));
        entry.1.insert(e.instruction.text.as_str());
        entry.2 |= e.branch == Branch::Counterfactual;
    }
    let mut report = ProbeReport::default();
    for (e, instructions, branched) in keys.into_values() {
        if !branched {
            continue;
        }
        let Some(f) = e.observation.payload.features() else {
            continue;
        };
        let labels: BTreeSet<AtomicLabel> = instructions
            .iter()
            .map(|i| relabel_chunk(policy.query(i, f).as_slice(), relabel))
            .collect();
        report.probes += 1;
        report.differing += usize::from(labels.len() > 1);
    }
    report
}
