//! Deterministic 2D navigation simulator with ground-truth annotation.

pub mod corpus;
pub mod eval;
pub mod compare;
pub mod oracle;
pub mod policy;
pub mod geometry;
pub mod scene;
pub mod task;

pub use corpus::{generate_corpus, CorpusConfig, CorpusReport};
pub use scene::Scene;
pub use task::{Category, SuccessThresholds, Target, TaskSpec};
pub use eval::{evaluate, evaluate_with, BenchmarkReport, EvalConfig, PolicyReport};
pub use policy::{train_toy_policy, ConditionedPolicy, PlannerPolicy, ToyConfig, ToyPolicy};
