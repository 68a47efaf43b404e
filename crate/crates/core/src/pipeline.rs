//! Stage orchestration over a run directory.
//!
//! Each stage reads its inputs from verified artifacts in the run directory
//! and writes its outputs with a manifest recording the stage config hash and
//! the checksums of its inputs. A stage whose outputs already carry matching
//! hashes is skipped, so a rerun only redoes what changed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::{Annotator, BackendConfig, CachedAnnotator, RemoteAnnotator};
use crate::artifact::{self, verify, ArtifactKind, Lineage, Manifest, CODE_VERSION};
use crate::codec::{tokenize, CodecConfig};
use crate::counterfactual::{
    assemble_labeled_dataset, generate_counterfactuals, hindsight_only, AssemblyConfig, CounterfactualConfig,
    CounterfactualStats, TrajectoryCounterfactuals,
};
use crate::entropy::{empirical_bound, EntropyReport};
use crate::error::{Error, Result};
use crate::hash::{sha256_hex, sha256_json};
use crate::hindsight::{label_trajectory, LabelerConfig, TrajectoryLabels};
use crate::model::{
    validate_trajectory, Action, Branch, InstructionLabel, LabeledExample, PayloadKind, Segment, Trajectory,
    DEFAULT_MAX_STEP,
};
use crate::policy::{build_atomic_dataset, train, ActionChunk, PolicyConfig, PolicyModel, TrainReport};
use crate::seed::derive_seed;
use crate::segment::{segment, SegmenterConfig};
use crate::sim::compare::{benchmark, BenchmarkOutcome, BenchmarkSettings};
use crate::sim::oracle::{OracleAnnotator, OracleConfig};
use crate::sim::{generate_corpus, CorpusConfig, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionFrame {
    #[default]
    Egocentric,
    /// Actions are world-frame displacements; converted on ingest.
    World,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputConfig {
    Sim {
        #[serde(default = "default_scenes")]
        scenes: Vec<String>,
        #[serde(default)]
        scene_files: Vec<PathBuf>,
        #[serde(default)]
        corpus: CorpusConfig,
    },
    Jsonl {
        path: PathBuf,
        #[serde(default)]
        frame: ActionFrame,
        #[serde(default = "default_max_step")]
        max_step: f64,
    },
}

fn default_scenes() -> Vec<String> {
    Scene::builtin_names().iter().map(|s| s.to_string()).collect()
}

fn default_max_step() -> f64 {
    DEFAULT_MAX_STEP
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig::Sim {
            scenes: default_scenes(),
            scene_files: Vec::new(),
            corpus: CorpusConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Oracle,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendSettings {
    pub kind: BackendKind,
    pub remote: BackendConfig,
    pub oracle: OracleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecSettings {
    pub bins: u32,
    /// Defaults to the dataset's mean step distance.
    pub normalization_factor: Option<f64>,
}

impl Default for CodecSettings {
    fn default() -> Self {
        Self {
            bins: 128,
            normalization_factor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    /// Keep raw backend replies in the label and counterfactual artifacts.
    pub keep_debug: bool,
    pub input: InputConfig,
    pub segmenter: SegmenterConfig,
    pub labeler: LabelerConfig,
    pub backend: BackendSettings,
    pub policy: PolicyConfig,
    pub counterfactual: CounterfactualConfig,
    pub assembly: AssemblyConfig,
    pub codec: CodecSettings,
    pub benchmark: BenchmarkSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let step = CorpusConfig::default().step;
        Self {
            seed: 0,
            run_dir: PathBuf::from("run"),
            cache_dir: None,
            keep_debug: false,
            input: InputConfig::default(),
            segmenter: SegmenterConfig::default(),
            labeler: LabelerConfig::default(),
            backend: BackendSettings::default(),
            policy: PolicyConfig {
                relabel: SegmenterConfig::default().with_reference_step(step),
                ..Default::default()
            },
            counterfactual: CounterfactualConfig::default(),
            assembly: AssemblyConfig {
                chunk_stride: 4,
                anchor_decision_points: true,
            },
            codec: CodecSettings::default(),
            benchmark: BenchmarkSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative paths in the file are relative to the file
        if let Some(base) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut cfg.run_dir);
            if let Some(c) = cfg.cache_dir.as_mut() {
                fix(c);
            }
            match &mut cfg.input {
                InputConfig::Sim { scene_files, .. } => scene_files.iter_mut().for_each(fix),
                InputConfig::Jsonl { path, .. } => fix(path),
            }
        }
        Ok(cfg)
    }

    /// Checks settings and that referenced input files exist.
    pub fn validate(&self) -> Result<()> {
        self.segmenter.validate()?;
        self.labeler.validate()?;
        self.policy.validate()?;
        CodecConfig {
            bins: self.codec.bins,
            normalization_factor: self.codec.normalization_factor.unwrap_or(1.0),
        }
        .validate()?;
        self.benchmark.eval.validate()?;
        match &self.input {
            InputConfig::Sim {
                scenes,
                scene_files,
                corpus,
            } => {
                corpus.validate()?;
                for s in scenes {
                    if !Scene::builtin_names().contains(&s.as_str()) {
                        return Err(Error::UnknownScene(s.clone()));
                    }
                }
                for f in scene_files {
                    if !f.is_file() {
                        return Err(Error::Config(format!("scene file {} not found", f.display())));
                    }
                }
            }
            InputConfig::Jsonl { path, .. } => {
                if !path.is_file() {
                    return Err(Error::Config(format!("input {} not found", path.display())));
                }
            }
        }
        Ok(())
    }

    pub fn scenes(&self) -> Result<Vec<Scene>> {
        match &self.input {
            InputConfig::Sim {
                scenes, scene_files, ..
            } => {
                let mut out: Vec<Scene> = scenes.iter().map(|n| Scene::builtin(n)).collect::<Result<_>>()?;
                for f in scene_files {
                    out.push(Scene::load(f)?);
                }
                Ok(out)
            }
            InputConfig::Jsonl { .. } => Scene::builtin_all(),
        }
    }

    pub fn is_sim(&self) -> bool {
        matches!(self.input, InputConfig::Sim { .. })
    }

    pub fn artifact(&self, kind: ArtifactKind) -> PathBuf {
        self.run_dir.join(kind.file_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Segment,
    Label,
    TrainAtomic,
    Augment,
    Tokenize,
    Diagnose,
    Benchmark,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Segment,
        Stage::Label,
        Stage::TrainAtomic,
        Stage::Augment,
        Stage::Tokenize,
        Stage::Diagnose,
        Stage::Benchmark,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Segment => "segment",
            Stage::Label => "label",
            Stage::TrainAtomic => "train-atomic",
            Stage::Augment => "augment",
            Stage::Tokenize => "tokenize",
            Stage::Diagnose => "diagnose",
            Stage::Benchmark => "benchmark",
        }
    }

    pub fn inputs(&self) -> &'static [ArtifactKind] {
        use ArtifactKind as K;
        match self {
            Stage::Ingest => &[],
            Stage::Segment => &[K::Trajectories],
            Stage::Label => &[K::Trajectories, K::Segments],
            Stage::TrainAtomic => &[K::Trajectories, K::Segments],
            Stage::Augment => &[K::Trajectories, K::Segments, K::Labels, K::AtomicPolicy],
            Stage::Tokenize => &[K::Trajectories, K::Dataset],
            Stage::Diagnose => &[K::Dataset],
            Stage::Benchmark => &[K::Dataset, K::AtomicPolicy],
        }
    }

    pub fn outputs(&self) -> &'static [ArtifactKind] {
        use ArtifactKind as K;
        match self {
            Stage::Ingest => &[K::Trajectories],
            Stage::Segment => &[K::Segments],
            Stage::Label => &[K::Labels],
            Stage::TrainAtomic => &[K::AtomicPolicy],
            Stage::Augment => &[K::Counterfactuals, K::Dataset],
            Stage::Tokenize => &[K::Tokens],
            Stage::Diagnose => &[K::Entropy],
            Stage::Benchmark => &[K::Benchmark],
        }
    }

    fn uses_backend(&self) -> bool {
        matches!(self, Stage::Label | Stage::Augment | Stage::Benchmark)
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySegments {
    pub trajectory_id: String,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicArtifact {
    pub model: PolicyModel,
    pub report: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub trajectory_id: String,
    pub anchor_timestep: usize,
    pub branch: Branch,
    pub instruction: String,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyArtifact {
    pub cast: EntropyReport,
    pub hindsight_only: EntropyReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Executed,
    Cached,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub code_version: String,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
    #[serde(default)]
    pub cache_hits: usize,
    #[serde(default)]
    pub cache_misses: usize,
}

impl RunManifest {
    pub fn all_cached(&self) -> bool {
        self.stages.iter().all(|s| s.status != StageStatus::Executed)
    }

    pub fn executed(&self) -> Vec<Stage> {
        self.stages
            .iter()
            .filter(|s| s.status == StageStatus::Executed)
            .map(|s| s.stage)
            .collect()
    }
}

/// Holds the run directory for one pipeline run.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join("run.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(run_dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Backend shared by the stages of one run.
enum Backend {
    Oracle(CachedOrPlain<OracleAnnotator>),
    Remote(CachedOrPlain<RemoteAnnotator<crate::annotate::HttpTransport>>),
}

enum CachedOrPlain<A> {
    Plain(A),
    Cached(CachedAnnotator<A>),
}

impl<A: Annotator> CachedOrPlain<A> {
    fn new(inner: A, cache: Option<&Path>) -> Result<Self> {
        Ok(match cache {
            Some(dir) => CachedOrPlain::Cached(CachedAnnotator::new(inner, dir)?),
            None => CachedOrPlain::Plain(inner),
        })
    }

    fn annotator(&self) -> &dyn Annotator {
        match self {
            CachedOrPlain::Plain(a) => a,
            CachedOrPlain::Cached(a) => a,
        }
    }

    fn stats(&self) -> (usize, usize) {
        match self {
            CachedOrPlain::Plain(_) => (0, 0),
            CachedOrPlain::Cached(a) => (a.hits(), a.misses()),
        }
    }
}

impl Backend {
    fn build(cfg: &PipelineConfig) -> Result<Self> {
        let cache = cfg.cache_dir.as_deref();
        Ok(match cfg.backend.kind {
            BackendKind::Oracle => {
                let oracle = OracleAnnotator::new(
                    cfg.scenes()?,
                    OracleConfig {
                        seed: derive_seed(cfg.seed, "oracle"),
                        ..cfg.backend.oracle.clone()
                    },
                );
                Backend::Oracle(CachedOrPlain::new(oracle, cache)?)
            }
            BackendKind::Remote => {
                Backend::Remote(CachedOrPlain::new(RemoteAnnotator::http(cfg.backend.remote.clone())?, cache)?)
            }
        })
    }

    fn annotator(&self) -> &dyn Annotator {
        match self {
            Backend::Oracle(a) => a.annotator(),
            Backend::Remote(a) => a.annotator(),
        }
    }

    fn stats(&self) -> (usize, usize) {
        match self {
            Backend::Oracle(a) => a.stats(),
            Backend::Remote(a) => a.stats(),
        }
    }
}

/// Per-stage configuration that determines its outputs (besides inputs).
fn stage_config(cfg: &PipelineConfig, stage: Stage) -> serde_json::Value {
    let backend = match cfg.backend.kind {
        BackendKind::Oracle => serde_json::json!({"kind": "oracle", "oracle": cfg.backend.oracle}),
        BackendKind::Remote => serde_json::json!({
            "kind": "remote",
            "endpoint": cfg.backend.remote.endpoint,
            "model": cfg.backend.remote.model,
        }),
    };
    let input_files = match &cfg.input {
        InputConfig::Sim { scene_files, .. } => scene_files.clone(),
        InputConfig::Jsonl { path, .. } => vec![path.clone()],
    };
    let input_hashes: Vec<String> = input_files
        .iter()
        .map(|p| fs::read(p).map(|b| sha256_hex(&b)).unwrap_or_default())
        .collect();
    let section = match stage {
        Stage::Ingest => serde_json::json!({"input": input_config_without_paths(&cfg.input), "files": input_hashes}),
        Stage::Segment => serde_json::json!(cfg.segmenter),
        Stage::Label => serde_json::json!({"labeler": cfg.labeler, "backend": backend}),
        Stage::TrainAtomic => serde_json::json!(cfg.policy),
        Stage::Augment => serde_json::json!({
            "counterfactual": cfg.counterfactual,
            "assembly": cfg.assembly,
            "relabel": cfg.policy.relabel,
            "backend": backend,
        }),
        Stage::Tokenize => serde_json::json!(cfg.codec),
        Stage::Diagnose => serde_json::json!(cfg.policy.relabel),
        Stage::Benchmark => serde_json::json!({"benchmark": cfg.benchmark, "relabel": cfg.policy.relabel, "backend": backend}),
    };
    serde_json::json!({"stage": stage.name(), "seed": cfg.seed, "code": CODE_VERSION, "config": section})
}

fn input_config_without_paths(input: &InputConfig) -> serde_json::Value {
    match input {
        InputConfig::Sim { scenes, corpus, .. } => serde_json::json!({"kind": "sim", "scenes": scenes, "corpus": corpus}),
        InputConfig::Jsonl { frame, max_step, .. } => {
            serde_json::json!({"kind": "jsonl", "frame": frame, "max_step": max_step})
        }
    }
}

struct StageCtx<'a> {
    cfg: &'a PipelineConfig,
    backend: Option<&'a Backend>,
    lineage: Lineage,
}

impl StageCtx<'_> {
    fn path(&self, kind: ArtifactKind) -> PathBuf {
        self.cfg.artifact(kind)
    }

    fn lineage(&self) -> Lineage {
        self.lineage.clone()
    }

    fn annotator(&self) -> Result<&dyn Annotator> {
        self.backend
            .map(Backend::annotator)
            .ok_or_else(|| Error::Config("stage needs an annotation backend".into()))
    }

    fn trajectories(&self) -> Result<(Vec<Trajectory>, Manifest)> {
        artifact::read_jsonl(ArtifactKind::Trajectories, &self.path(ArtifactKind::Trajectories))
    }

    fn segments(&self) -> Result<Vec<TrajectorySegments>> {
        Ok(artifact::read_jsonl(ArtifactKind::Segments, &self.path(ArtifactKind::Segments))?.0)
    }

    fn dataset(&self) -> Result<Vec<LabeledExample>> {
        Ok(artifact::read_jsonl(ArtifactKind::Dataset, &self.path(ArtifactKind::Dataset))?.0)
    }

    fn atomic(&self) -> Result<AtomicArtifact> {
        Ok(artifact::read_json(ArtifactKind::AtomicPolicy, &self.path(ArtifactKind::AtomicPolicy))?.0)
    }
}

fn segments_by_id<'a>(
    trajectories: &[Trajectory],
    segs: &'a [TrajectorySegments],
) -> Result<Vec<&'a [Segment]>> {
    let index: BTreeMap<&str, &TrajectorySegments> = segs.iter().map(|s| (s.trajectory_id.as_str(), s)).collect();
    trajectories
        .iter()
        .map(|t| {
            index
                .get(t.id.as_str())
                .map(|s| s.segments.as_slice())
                .ok_or_else(|| Error::Precondition(format!("no segments for trajectory {}", t.id)))
        })
        .collect()
}

/// The relabel config with the reference step filled in from the dataset when unset.
fn resolved_relabel(cfg: &PipelineConfig, trajectories: &Manifest) -> SegmenterConfig {
    let mut r = cfg.policy.relabel;
    if r.reference_step_distance.is_none() {
        r.reference_step_distance = trajectories.normalization_factor;
    }
    r
}

fn provenance_counts(examples: &[LabeledExample]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for e in examples {
        *counts.entry(e.instruction.provenance.as_str().to_string()).or_insert(0) += 1;
    }
    counts
}

fn ingest(ctx: &StageCtx) -> Result<()> {
    let cfg = ctx.cfg;
    let trajectories = match &cfg.input {
        InputConfig::Sim { corpus, .. } => {
            let mut all = Vec::new();
            for scene in cfg.scenes()? {
                let (mut ts, report) = generate_corpus(&scene, corpus, derive_seed(cfg.seed, &format!("ingest/{}", scene.name)))?;
                info!(
                    "{}: {} trajectories, {} skipped on collision, {} unreachable",
                    scene.name, report.generated, report.skipped_collision, report.skipped_unreachable
                );
                all.append(&mut ts);
            }
            all
        }
        InputConfig::Jsonl { path, frame, max_step } => read_trajectories(path, *frame, *max_step)?,
    };
    if trajectories.is_empty() {
        return Err(Error::EmptyDataset("ingested trajectories"));
    }
    let (sum, n) = trajectories
        .iter()
        .flat_map(|t| &t.actions)
        .fold((0.0, 0usize), |(s, n), a| (s + a.norm(), n + 1));
    let normalization = cfg.codec.normalization_factor.unwrap_or(sum / n.max(1) as f64);
    if !(normalization > 0.0) {
        return Err(Error::NotNormalized(normalization));
    }
    let kinds: BTreeSet<PayloadKind> = trajectories
        .iter()
        .flat_map(|t| t.observations.iter().map(|o| o.payload.kind()))
        .collect();
    if kinds.len() > 1 {
        return Err(Error::Precondition(format!("mixed observation payload kinds {kinds:?}")));
    }
    let mut counts = BTreeMap::new();
    for t in &trajectories {
        *counts.entry(t.metadata.source.clone()).or_insert(0) += 1;
    }
    artifact::write_jsonl(
        ArtifactKind::Trajectories,
        &ctx.path(ArtifactKind::Trajectories),
        &trajectories,
        Lineage {
            normalization_factor: Some(normalization),
            payload_kind: kinds.into_iter().next(),
            counts,
            ..ctx.lineage()
        },
    )?;
    Ok(())
}

/// Reads newline-delimited trajectories, converting world-frame actions and
/// rejecting any trajectory that fails validation.
pub fn read_trajectories(path: &Path, frame: ActionFrame, max_step: f64) -> Result<Vec<Trajectory>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut t: Trajectory = serde_json::from_str(line)?;
        if frame == ActionFrame::World {
            let yaws: Vec<f64> = t.poses.iter().map(|p| p.yaw).collect();
            for (a, yaw) in t.actions.iter_mut().zip(yaws) {
                *a = Action::from_world(a.dx, a.dy, yaw);
            }
        }
        let report = validate_trajectory(&t, max_step);
        if !report.is_ok() {
            return Err(Error::InvalidTrajectory {
                id: t.id,
                violations: report.messages(),
            });
        }
        if !seen.insert(t.id.clone()) {
            return Err(Error::Precondition(format!("duplicate trajectory id {}", t.id)));
        }
        out.push(t);
    }
    Ok(out)
}

fn segment_stage(ctx: &StageCtx) -> Result<()> {
    let (trajectories, _) = ctx.trajectories()?;
    let segs = trajectories
        .par_iter()
        .map(|t| {
            Ok(TrajectorySegments {
                trajectory_id: t.id.clone(),
                segments: segment(t, &ctx.cfg.segmenter)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counts = BTreeMap::new();
    for s in segs.iter().flat_map(|s| &s.segments) {
        *counts.entry(s.label.as_str().to_string()).or_insert(0) += 1;
    }
    artifact::write_jsonl(
        ArtifactKind::Segments,
        &ctx.path(ArtifactKind::Segments),
        &segs,
        Lineage {
            counts,
            ..ctx.lineage()
        },
    )?;
    Ok(())
}

fn label_stage(ctx: &StageCtx) -> Result<()> {
    let (trajectories, _) = ctx.trajectories()?;
    let segs = ctx.segments()?;
    let by_traj = segments_by_id(&trajectories, &segs)?;
    let annotator = ctx.annotator()?;
    let labels = trajectories
        .par_iter()
        .zip(&by_traj)
        .map(|(t, s)| label_trajectory(t, s, annotator, &ctx.cfg.labeler, ctx.cfg.keep_debug))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = BTreeMap::new();
    for l in &labels {
        *counts.entry("hindsight_raw".to_string()).or_insert(0) += l.raw.len();
        *counts.entry("hindsight_filtered".to_string()).or_insert(0) += l.filtered.len();
        if l.filtered.is_empty() {
            *counts.entry("unlabeled_trajectories".to_string()).or_insert(0) += 1;
        }
    }
    artifact::write_jsonl(
        ArtifactKind::Labels,
        &ctx.path(ArtifactKind::Labels),
        &labels,
        Lineage {
            counts,
            ..ctx.lineage()
        },
    )?;
    Ok(())
}

fn train_stage(ctx: &StageCtx) -> Result<()> {
    let (trajectories, tm) = ctx.trajectories()?;
    let segs = ctx.segments()?;
    let by_traj = segments_by_id(&trajectories, &segs)?;
    let data = build_atomic_dataset(trajectories.iter().zip(by_traj.iter().copied()));
    let policy_cfg = PolicyConfig {
        relabel: resolved_relabel(ctx.cfg, &tm),
        ..ctx.cfg.policy.clone()
    };
    let (model, report) = train(&data, &policy_cfg, derive_seed(ctx.cfg.seed, "train-atomic"))?;
    let counts = report
        .labels
        .iter()
        .map(|(label, r)| (label.as_str().to_string(), r.train))
        .collect();
    artifact::write_json(
        ArtifactKind::AtomicPolicy,
        &ctx.path(ArtifactKind::AtomicPolicy),
        &AtomicArtifact { model, report },
        Lineage {
            counts,
            ..ctx.lineage()
        },
    )?;
    Ok(())
}

fn augment_stage(ctx: &StageCtx) -> Result<()> {
    let cfg = ctx.cfg;
    let (trajectories, tm) = ctx.trajectories()?;
    let segs = ctx.segments()?;
    let by_traj = segments_by_id(&trajectories, &segs)?;
    let (labels, _): (Vec<TrajectoryLabels>, _) = artifact::read_jsonl(ArtifactKind::Labels, &ctx.path(ArtifactKind::Labels))?;
    let atomic = ctx.atomic()?;
    let annotator = ctx.annotator()?;
    let relabel = resolved_relabel(cfg, &tm);
    let filtered: BTreeMap<&str, &[InstructionLabel]> =
        labels.iter().map(|l| (l.trajectory_id.as_str(), l.filtered.as_slice())).collect();
    let seed = derive_seed(cfg.seed, "augment");
    let per_traj = trajectories
        .par_iter()
        .zip(&by_traj)
        .filter_map(|(t, s)| {
            let f = filtered.get(t.id.as_str()).copied().unwrap_or(&[]);
            (!f.is_empty()).then(|| {
                let mut r = generate_counterfactuals(t, s, f, annotator, &atomic.model, &relabel, &cfg.counterfactual, seed)?;
                if !cfg.keep_debug {
                    r.raw_reply = None;
                }
                Ok(r)
            })
        })
        .collect::<Result<Vec<TrajectoryCounterfactuals>>>()?;
    let stats = per_traj
        .iter()
        .fold(CounterfactualStats::default(), |acc, t| acc.merge(t.stats.clone()));
    info!(
        "counterfactuals: {} proposals, {} accepted, {} rejected, {} capped, {} uncovered",
        stats.proposals, stats.accepted, stats.rejected, stats.capped, stats.uncovered
    );
    let records: Vec<_> = per_traj.iter().flat_map(|t| t.records.iter().cloned()).collect();
    let instructions: BTreeMap<String, Vec<InstructionLabel>> = labels
        .iter()
        .map(|l| (l.trajectory_id.clone(), l.filtered.clone()))
        .collect();
    let dataset = assemble_labeled_dataset(&trajectories, &instructions, &records, &cfg.assembly)?;
    let mut cf_counts = BTreeMap::new();
    cf_counts.insert("proposals".to_string(), stats.proposals);
    cf_counts.insert("accepted".to_string(), stats.accepted);
    cf_counts.insert("rejected".to_string(), stats.rejected);
    cf_counts.insert("capped".to_string(), stats.capped);
    cf_counts.insert("uncovered".to_string(), stats.uncovered);
    artifact::write_jsonl(
        ArtifactKind::Counterfactuals,
        &ctx.path(ArtifactKind::Counterfactuals),
        &per_traj,
        Lineage {
            counts: cf_counts,
            ..ctx.lineage()
        },
    )?;
    artifact::write_jsonl(
        ArtifactKind::Dataset,
        &ctx.path(ArtifactKind::Dataset),
        &dataset,
        Lineage {
            normalization_factor: tm.normalization_factor,
            payload_kind: tm.payload_kind,
            counts: provenance_counts(&dataset),
            ..ctx.lineage()
        },
    )?;
    Ok(())
}

fn tokenize_stage(ctx: &StageCtx) -> Result<()> {
    let tm = verify(&ctx.path(ArtifactKind::Trajectories))?.0;
    let dataset = ctx.dataset()?;
    let factor = tm
        .normalization_factor
        .ok_or_else(|| Error::Precondition("trajectory manifest has no normalization factor".into()))?;
    let codec = CodecConfig {
        bins: ctx.cfg.codec.bins,
        normalization_factor: factor,
    };
    let records = dataset
        .par_iter()
        .map(|e| {
            Ok(TokenRecord {
                trajectory_id: e.trajectory_id.clone(),
                anchor_timestep: e.anchor_timestep,
                branch: e.branch,
                instruction: e.instruction.text.clone(),
                tokens: tokenize(&e.chunk, &codec)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let clamped = dataset
        .iter()
        .flat_map(|e| e.chunk.iter())
        .flat_map(|a| [a.dx, a.dy])
        .filter(|c| c.abs() > factor)
        .count();
    if clamped > 0 {
        warn!("{clamped} action components exceed the normalization factor {factor:.4} and were clamped");
    }
    let mut counts = BTreeMap::new();
    counts.insert("clamped_components".to_string(), clamped);
    artifact::write_jsonl(
        ArtifactKind::Tokens,
        &ctx.path(ArtifactKind::Tokens),
        &records,
        Lineage {
            normalization_factor: Some(factor),
            counts,
            ..ctx.lineage()
        },
    )?;
    Ok(())
}

fn diagnose_stage(ctx: &StageCtx) -> Result<()> {
    let tm = verify(&ctx.path(ArtifactKind::Trajectories))?.0;
    let relabel = resolved_relabel(ctx.cfg, &tm);
    let dataset = ctx.dataset()?;
    let report = EntropyArtifact {
        cast: empirical_bound(&dataset, &relabel)?,
        hindsight_only: empirical_bound(&hindsight_only(&dataset), &relabel)?,
    };
    info!(
        "bound: cast {:.4} nats, hindsight-only {:.4} nats",
        report.cast.bound, report.hindsight_only.bound
    );
    artifact::write_json(ArtifactKind::Entropy, &ctx.path(ArtifactKind::Entropy), &report, ctx.lineage())?;
    Ok(())
}

fn benchmark_stage(ctx: &StageCtx) -> Result<()> {
    let tm = verify(&ctx.path(ArtifactKind::Trajectories))?.0;
    let relabel = resolved_relabel(ctx.cfg, &tm);
    let dataset = ctx.dataset()?;
    let atomic = ctx.atomic()?;
    let scenes = ctx.cfg.scenes()?;
    let step = relabel.reference_step_distance.unwrap_or(0.25);
    let outcome = benchmark(
        &scenes,
        &dataset,
        &atomic.model,
        ctx.annotator()?,
        &relabel,
        &ctx.cfg.benchmark,
        step,
        derive_seed(ctx.cfg.seed, "benchmark"),
    )?;
    let path = ctx.path(ArtifactKind::Benchmark);
    artifact::write_json(ArtifactKind::Benchmark, &path, &outcome, ctx.lineage())?;
    let txt = path.with_extension("txt");
    fs::write(&txt, outcome.to_text()).map_err(|e| Error::io(&txt, e))?;
    Ok(())
}

fn execute(stage: Stage, ctx: &StageCtx) -> Result<()> {
    match stage {
        Stage::Ingest => ingest(ctx),
        Stage::Segment => segment_stage(ctx),
        Stage::Label => label_stage(ctx),
        Stage::TrainAtomic => train_stage(ctx),
        Stage::Augment => augment_stage(ctx),
        Stage::Tokenize => tokenize_stage(ctx),
        Stage::Diagnose => diagnose_stage(ctx),
        Stage::Benchmark => benchmark_stage(ctx),
    }
}

/// Whether `stage` is part of a full run under `cfg`.
pub fn stage_enabled(cfg: &PipelineConfig, stage: Stage) -> bool {
    stage != Stage::Benchmark || (cfg.is_sim() && cfg.benchmark.enabled)
}

pub struct Pipeline {
    cfg: PipelineConfig,
    backend: Option<Backend>,
    _lock: RunLock,
}

impl Pipeline {
    /// Validates the config, takes the run-directory lock and builds the
    /// annotation backend (so a missing credential fails before any work).
    pub fn open(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let lock = RunLock::acquire(&cfg.run_dir)?;
        let backend = Some(Backend::build(&cfg)?);
        Ok(Self {
            cfg,
            backend,
            _lock: lock,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Runs one stage unless its outputs are current. With `force` the stage
    /// always executes.
    pub fn run_stage(&self, stage: Stage, force: bool) -> Result<StageRecord> {
        let wrap = |e: Error| Error::Stage {
            stage: stage.name().to_string(),
            source: Box::new(e),
        };
        let mut input_hashes = BTreeMap::new();
        for kind in stage.inputs() {
            let path = self.cfg.artifact(*kind);
            let (m, _) = verify(&path).map_err(|e| match e {
                Error::Io { .. } => wrap(Error::Precondition(format!(
                    "missing input {}; run the producing stage first",
                    path.display()
                ))),
                other => wrap(other),
            })?;
            input_hashes.insert(kind.file_name().to_string(), m.sha256);
        }
        let config_hash = sha256_json(&stage_config(&self.cfg, stage));
        let current = |kind: &ArtifactKind| {
            verify(&self.cfg.artifact(*kind))
                .map(|(m, _)| m.config_hash == config_hash && m.input_hashes == input_hashes)
                .unwrap_or(false)
        };
        let status = if !force && stage.outputs().iter().all(current) {
            info!("{}: up to date", stage.name());
            StageStatus::Cached
        } else {
            info!("{}: running", stage.name());
            let ctx = StageCtx {
                cfg: &self.cfg,
                backend: if stage.uses_backend() { self.backend.as_ref() } else { None },
                lineage: Lineage {
                    stage: stage.name().to_string(),
                    config_hash,
                    input_hashes,
                    seed: self.cfg.seed,
                    ..Default::default()
                },
            };
            execute(stage, &ctx).map_err(wrap)?;
            StageStatus::Executed
        };
        let mut outputs = BTreeMap::new();
        for kind in stage.outputs() {
            let (m, _) = verify(&self.cfg.artifact(*kind)).map_err(wrap)?;
            outputs.insert(kind.file_name().to_string(), m.sha256);
        }
        Ok(StageRecord { stage, status, outputs })
    }

    /// Runs every enabled stage in order and writes `run.json`.
    pub fn run_all(&self) -> Result<RunManifest> {
        self.run(false)
    }

    pub fn run(&self, force: bool) -> Result<RunManifest> {
        let mut stages = Vec::new();
        for stage in Stage::ALL {
            if !stage_enabled(&self.cfg, stage) {
                continue;
            }
            stages.push(self.run_stage(stage, force)?);
        }
        let (cache_hits, cache_misses) = self.backend.as_ref().map_or((0, 0), Backend::stats);
        let manifest = RunManifest {
            seed: self.cfg.seed,
            code_version: CODE_VERSION.to_string(),
            config_hash: sha256_json(&self.cfg),
            stages,
            cache_hits,
            cache_misses,
        };
        let path = self.cfg.run_dir.join("run.json");
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

pub fn run_pipeline(cfg: PipelineConfig) -> Result<RunManifest> {
    Pipeline::open(cfg)?.run_all()
}

/// Human-readable summary of an artifact; verifies schema and checksum.
pub fn inspect(path: &Path) -> Result<String> {
    let (m, _) = verify(path)?;
    let kind = ArtifactKind::from_schema(&m.schema).expect("verify checks the schema");
    let mut out = String::new();
    let _ = writeln!(out, "file:           {}", path.display());
    let _ = writeln!(out, "schema:         {} v{}", m.schema, m.schema_version);
    let _ = writeln!(out, "stage:          {}", m.stage);
    let _ = writeln!(out, "records:        {}", m.records);
    let _ = writeln!(out, "sha256:         {}", m.sha256);
    let _ = writeln!(out, "config hash:    {}", m.config_hash);
    let _ = writeln!(out, "code version:   {}", m.code_version);
    let _ = writeln!(out, "seed:           {}", m.seed);
    if let Some(f) = m.normalization_factor {
        let _ = writeln!(out, "normalization:  {f:.6} m");
    }
    if let Some(k) = m.payload_kind {
        let _ = writeln!(out, "payload kind:   {k:?}");
    }
    for (name, hash) in &m.input_hashes {
        let _ = writeln!(out, "input:          {name} {hash}");
    }
    let histogram = |out: &mut String, title: &str, counts: &BTreeMap<String, usize>| {
        let _ = writeln!(out, "{title}:");
        for (k, v) in counts {
            let _ = writeln!(out, "  {k:<24} {v}");
        }
    };
    match kind {
        ArtifactKind::Dataset => {
            let (examples, _): (Vec<LabeledExample>, _) = artifact::read_jsonl(kind, path)?;
            let counts = provenance_counts(&examples);
            histogram(&mut out, "provenance", &counts);
            if counts != m.counts {
                let _ = writeln!(out, "warning: provenance counts differ from the manifest {:?}", m.counts);
            }
            let branches = examples.iter().filter(|e| e.branch == Branch::Counterfactual).count();
            let _ = writeln!(out, "branches:       factual {} counterfactual {}", examples.len() - branches, branches);
        }
        ArtifactKind::Segments => {
            let (segs, _): (Vec<TrajectorySegments>, _) = artifact::read_jsonl(kind, path)?;
            let mut counts = BTreeMap::new();
            for s in segs.iter().flat_map(|s| &s.segments) {
                *counts.entry(s.label.as_str().to_string()).or_insert(0) += 1;
            }
            histogram(&mut out, "atomic labels", &counts);
        }
        ArtifactKind::Entropy => {
            let (e, _): (EntropyArtifact, _) = artifact::read_json(kind, path)?;
            let _ = writeln!(out, "[cast]\n{}", e.cast.to_text());
            let _ = writeln!(out, "[hindsight-only]\n{}", e.hindsight_only.to_text());
        }
        ArtifactKind::Benchmark => {
            let (b, _): (BenchmarkOutcome, _) = artifact::read_json(kind, path)?;
            out.push_str(&b.to_text());
        }
        _ if !m.counts.is_empty() => histogram(&mut out, "counts", &m.counts),
        _ => {}
    }
    Ok(out)
}

/// Reads a chunk artifact's tokens back into chunks (used by round-trip checks).
pub fn decode_tokens(records: &[TokenRecord], codec: &CodecConfig) -> Result<Vec<ActionChunk>> {
    records.iter().map(|r| crate::codec::detokenize(&r.tokens, codec)).collect()
}
