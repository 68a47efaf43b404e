use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use cfnav_core::artifact::{self, ArtifactKind, Lineage};
use cfnav_core::counterfactual::hindsight_only;
use cfnav_core::model::LabeledExample;
use cfnav_core::pipeline::{inspect, BackendKind, InputConfig, Pipeline, PipelineConfig, Stage};
use cfnav_core::seed::derive_seed;
use cfnav_core::sim::eval::{self, evaluate_with, BenchmarkReport};
use cfnav_core::sim::policy::{OraclePolicy, RandomPolicy};
use cfnav_core::sim::{generate_corpus, train_toy_policy, CorpusConfig, Scene};

#[derive(Parser)]
#[command(name = "cfnav", version, about = "Counterfactual instruction augmentation for navigation datasets")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Annotation backend.
    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,

    /// Response cache directory.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    /// Remote backend requests per minute.
    #[arg(long, global = true)]
    rate_limit: Option<u32>,

    #[arg(long, global = true)]
    max_retries: Option<u32>,

    /// Keep raw backend replies in artifacts.
    #[arg(long, global = true)]
    debug: bool,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Re-run stages even when their outputs are current.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Remote,
    Oracle,
}

#[derive(Subcommand)]
enum Command {
    /// Load trajectories into the run directory.
    Ingest,
    /// Split trajectories into atomic segments.
    Segment,
    /// Hindsight instruction labeling.
    Label,
    /// Fit the atomic policy.
    TrainAtomic,
    /// Counterfactual generation and dataset assembly.
    Augment,
    /// Discretize action chunks.
    Tokenize,
    /// Entropy diagnostics for the assembled datasets.
    Diagnose,
    /// Train and evaluate the toy policies on the simulator suite.
    Benchmark,
    /// Run every stage, skipping the ones that are up to date.
    Run,
    /// Write a simulated trajectory corpus as JSONL.
    GenCorpus(GenCorpus),
    /// Evaluate policies trained from the run directory's dataset.
    Evaluate(Evaluate),
    /// Print a summary of an artifact after verifying it.
    Inspect {
        path: PathBuf,
    },
}

#[derive(Args)]
struct GenCorpus {
    /// Scene name or scene file; repeatable. Defaults to every built-in scene.
    #[arg(long = "scene")]
    scenes: Vec<String>,

    #[arg(long)]
    out: PathBuf,

    #[arg(long)]
    routes: Option<usize>,

    #[arg(long)]
    goals: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyName {
    Cast,
    Hindsight,
    Random,
    Oracle,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long = "policy", value_enum, default_values_t = [PolicyName::Cast, PolicyName::Hindsight])]
    policies: Vec<PolicyName>,

    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long)]
    episodes: Option<usize>,
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = &g.run_dir {
        cfg.run_dir = d.clone();
    }
    if let Some(c) = &g.cache_dir {
        cfg.cache_dir = Some(c.clone());
    }
    if let Some(b) = g.backend {
        cfg.backend.kind = match b {
            Backend::Remote => BackendKind::Remote,
            Backend::Oracle => BackendKind::Oracle,
        };
    }
    if let Some(r) = g.rate_limit {
        cfg.backend.remote.requests_per_minute = r;
    }
    if let Some(r) = g.max_retries {
        cfg.backend.remote.max_retries = r;
    }
    cfg.keep_debug |= g.debug;
    Ok(cfg)
}

fn run_stage(g: &Global, stage: Stage) -> Result<()> {
    let p = Pipeline::open(load_config(g)?)?;
    let rec = p.run_stage(stage, g.force)?;
    println!("{}: {:?}", stage.name(), rec.status);
    for (file, hash) in &rec.outputs {
        println!("  {file} {hash}");
    }
    Ok(())
}

fn run_all(g: &Global) -> Result<()> {
    let p = Pipeline::open(load_config(g)?)?;
    let m = p.run(g.force)?;
    for s in &m.stages {
        println!("{:<13} {:?}", s.stage.name(), s.status);
    }
    if m.cache_hits + m.cache_misses > 0 {
        println!("response cache: {} hits, {} misses", m.cache_hits, m.cache_misses);
    }
    let report = p.config().run_dir.join("benchmark.txt");
    if let Ok(text) = std::fs::read_to_string(&report) {
        print!("{text}");
    }
    Ok(())
}

fn scene_arg(s: &str) -> Result<Scene> {
    let path = Path::new(s);
    Ok(if path.is_file() {
        Scene::load(path)?
    } else {
        Scene::builtin(s)?
    })
}

fn gen_corpus(g: &Global, args: &GenCorpus) -> Result<()> {
    let cfg = load_config(g)?;
    let mut corpus = match &cfg.input {
        InputConfig::Sim { corpus, .. } => corpus.clone(),
        InputConfig::Jsonl { .. } => CorpusConfig::default(),
    };
    if let Some(n) = args.routes {
        corpus.route_trajectories = n;
    }
    if let Some(n) = args.goals {
        corpus.goal_trajectories = n;
    }
    let scenes = if args.scenes.is_empty() {
        Scene::builtin_all()?
    } else {
        args.scenes.iter().map(|s| scene_arg(s)).collect::<Result<_>>()?
    };
    let mut all = Vec::new();
    for scene in &scenes {
        let (ts, report) = generate_corpus(scene, &corpus, derive_seed(cfg.seed, &format!("ingest/{}", scene.name)))?;
        info!("{}: {} generated, {} skipped", scene.name, report.generated, report.skipped_collision + report.skipped_unreachable);
        all.extend(ts);
    }
    artifact::write_jsonl(
        ArtifactKind::Trajectories,
        &args.out,
        &all,
        Lineage {
            stage: "gen-corpus".into(),
            seed: cfg.seed,
            ..Default::default()
        },
    )?;
    println!("wrote {} trajectories to {}", all.len(), args.out.display());
    Ok(())
}

fn evaluate(g: &Global, args: &Evaluate) -> Result<()> {
    let cfg = load_config(g)?;
    if !cfg.is_sim() {
        bail!("evaluate needs a simulator input configuration");
    }
    let scenes = cfg.scenes()?;
    let dir = &cfg.run_dir;
    let (dataset, _): (Vec<LabeledExample>, _) =
        artifact::read_jsonl(ArtifactKind::Dataset, &dir.join(ArtifactKind::Dataset.file_name()))?;
    let step = cfg.policy.relabel.reference_step_distance.unwrap_or(0.25);
    let mut eval_cfg = cfg.benchmark.eval.clone();
    if let Some(n) = args.episodes {
        eval_cfg.episodes_per_task = n;
    }
    let seed = derive_seed(cfg.seed, "evaluate");
    let mut policies = Vec::new();
    for name in &args.policies {
        let report = match name {
            PolicyName::Cast | PolicyName::Hindsight => {
                let (label, data) = if *name == PolicyName::Cast {
                    ("cast", dataset.clone())
                } else {
                    ("hindsight", hindsight_only(&dataset))
                };
                let toy = train_toy_policy(label, &data, &cfg.benchmark.toy)?;
                eval::evaluate(&toy, &scenes, &eval_cfg, seed)?
            }
            PolicyName::Random => evaluate_with("random", &scenes, &eval_cfg, seed, |_, _| {
                Box::new(RandomPolicy {
                    step,
                    max_turn_deg: 20.0,
                })
            })?,
            PolicyName::Oracle => evaluate_with("oracle", &scenes, &eval_cfg, seed, |scene, task| {
                Box::new(OraclePolicy {
                    scene,
                    target: task.target.clone(),
                    step,
                    max_turn_deg: 30.0,
                    thresholds: eval_cfg.thresholds.clone(),
                })
            })?,
        };
        policies.push(report);
    }
    let report = BenchmarkReport {
        seed,
        config: eval_cfg,
        policies,
    };
    print!("{}", report.to_text());
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match &cli.command {
        Command::Ingest => run_stage(g, Stage::Ingest),
        Command::Segment => run_stage(g, Stage::Segment),
        Command::Label => run_stage(g, Stage::Label),
        Command::TrainAtomic => run_stage(g, Stage::TrainAtomic),
        Command::Augment => run_stage(g, Stage::Augment),
        Command::Tokenize => run_stage(g, Stage::Tokenize),
        Command::Diagnose => run_stage(g, Stage::Diagnose),
        Command::Benchmark => run_stage(g, Stage::Benchmark),
        Command::Run => run_all(g),
        Command::GenCorpus(args) => gen_corpus(g, args),
        Command::Evaluate(args) => evaluate(g, args),
        Command::Inspect { path } => inspect(path).map(|t| print!("{t}")).map_err(Into::into),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
