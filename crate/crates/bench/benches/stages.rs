use std::hint::black_box;
use std::path::PathBuf;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};

use cfnav_core::artifact::{read_jsonl, ArtifactKind};
use cfnav_core::codec::{detokenize, tokenize, CodecConfig};
use cfnav_core::entropy::empirical_bound;
use cfnav_core::model::{Action, LabeledExample, Payload, Pose, Trajectory};
use cfnav_core::pipeline::{run_pipeline, PipelineConfig};
use cfnav_core::policy::ActionChunk;
use cfnav_core::segment::{segment, SegmenterConfig};
use cfnav_core::sim::eval::EvalConfig;
use cfnav_core::sim::{evaluate, train_toy_policy, Scene, ToyConfig};

fn wavy(n: usize) -> Trajectory {
    let actions = (0..n)
        .map(|k| Action::arc(0.25, 0.2 * ((k as f64) * 0.07).sin()))
        .collect();
    Trajectory::integrate("bench", "bench", Pose::origin(), actions, |t, _| Payload::Features {
        values: vec![t as f64],
    })
}

fn codec(c: &mut Criterion) {
    let cfg = CodecConfig::new(0.25);
    let chunk = ActionChunk::new(std::array::from_fn(|i| Action::arc(0.2, 0.05 * i as f64)));
    let tokens = tokenize(&chunk, &cfg).unwrap();
    let mut g = c.benchmark_group("codec");
    g.throughput(Throughput::Elements(1));
    g.bench_function("tokenize", |b| b.iter(|| tokenize(black_box(&chunk), &cfg).unwrap()));
    g.bench_function("detokenize", |b| b.iter(|| detokenize(black_box(&tokens), &cfg).unwrap()));
    g.finish();
}

fn segmenter(c: &mut Criterion) {
    let cfg = SegmenterConfig::default();
    let mut g = c.benchmark_group("segment");
    for n in [100, 1_000, 10_000] {
        let t = wavy(n);
        g.throughput(Throughput::Elements(n as u64));
        g.bench_function(format!("steps_{n}"), |b| b.iter(|| segment(black_box(&t), &cfg).unwrap()));
    }
    g.finish();
}

/// One default pipeline run shared by the dataset-level benchmarks.
fn dataset() -> Vec<LabeledExample> {
    let dir: PathBuf = std::env::temp_dir().join(format!("cfnav-bench-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let mut cfg = PipelineConfig {
        run_dir: dir.clone(),
        ..Default::default()
    };
    cfg.benchmark.enabled = false;
    run_pipeline(cfg).unwrap();
    let data = read_jsonl(ArtifactKind::Dataset, &dir.join(ArtifactKind::Dataset.file_name()))
        .unwrap()
        .0;
    let _ = std::fs::remove_dir_all(&dir);
    data
}

fn dataset_level(c: &mut Criterion) {
    let data = dataset();
    let relabel = SegmenterConfig::default().with_reference_step(0.25);
    let scenes = Scene::builtin_all().unwrap();
    let toy = train_toy_policy("cast", &data, &ToyConfig::default()).unwrap();

    let mut g = c.benchmark_group("dataset");
    g.sample_size(20);
    g.throughput(Throughput::Elements(data.len() as u64));
    g.bench_function("empirical_bound", |b| b.iter(|| empirical_bound(black_box(&data), &relabel).unwrap()));
    g.bench_function("train_toy_policy", |b| {
        b.iter_batched(|| data.clone(), |d| train_toy_policy("cast", &d, &ToyConfig::default()).unwrap(), BatchSize::LargeInput)
    });
    g.finish();

    let probe = data[data.len() / 2].clone();
    let features = probe.observation.payload.features().unwrap().to_vec();
    c.bench_function("toy_query", |b| b.iter(|| *toy.query(black_box(&probe.instruction.text), &features)));

    let mut g = c.benchmark_group("simulator");
    g.sample_size(10);
    let eval = EvalConfig {
        episodes_per_task: 1,
        ..Default::default()
    };
    g.bench_function("evaluate_27_tasks", |b| b.iter(|| evaluate(&toy, &scenes, &eval, 0).unwrap()));
    g.finish();
}

criterion_group!(benches, codec, segmenter, dataset_level);
criterion_main!(benches);
