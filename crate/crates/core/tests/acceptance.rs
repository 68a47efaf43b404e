//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Every expected value here is computed by a test-side oracle that does not
//! call into the code under test.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use cfnav_core::annotate::parse::{parse_counterfactual_response, parse_filter, parse_instructions, parse_plan_reply};
use cfnav_core::annotate::prompt::{SYSTEM_TEMPLATE};
use cfnav_core::annotate::{render_prompt, AnnotationKind, AnnotatorRequest, RequestContext};
use cfnav_core::codec::{detokenize, tokenize, CodecConfig};
use cfnav_core::entropy::{exact_information, ToyJoint};
use cfnav_core::model::{Action, AtomicLabel, Observation, Payload, Pose, Trajectory};
use cfnav_core::pipeline::{run_pipeline, PipelineConfig};
use cfnav_core::policy::{train, ActionChunk, AtomicSample, PolicyConfig};
use cfnav_core::segment::{segment, SegmenterConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- oracles

/// Reference quantizer: normalized value in [-1, 1] split into `bins` equal bins.
fn oracle_bin(x: f64, factor: f64, bins: u32) -> u32 {
    let v = (x / factor).clamp(-1.0, 1.0);
    let width = 2.0 / bins as f64;
    let mut k = ((v + 1.0) / width).floor() as i64;
    if k >= bins as i64 {
        k = bins as i64 - 1;
    }
    k as u32
}

fn wrap(mut a: f64) -> f64 {
    while a > PI {
        a -= 2.0 * PI;
    }
    while a <= -PI {
        a += 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum L {
    TurnLeft,
    TurnRight,
    GoForward,
    Stop,
    AdjustLeft,
    AdjustRight,
}

fn to_l(a: AtomicLabel) -> L {
    match a {
        AtomicLabel::TurnLeft => L::TurnLeft,
        AtomicLabel::TurnRight => L::TurnRight,
        AtomicLabel::GoForward => L::GoForward,
        AtomicLabel::Stop => L::Stop,
        AtomicLabel::AdjustLeft => L::AdjustLeft,
        AtomicLabel::AdjustRight => L::AdjustRight,
    }
}

const TURN: f64 = 45.0 * PI / 180.0;
const ADJUST: f64 = 10.0 * PI / 180.0;
const STOP_FRACTION: f64 = 0.25;

fn weak(cum: f64, traveled: f64, steps: usize, step_ref: f64) -> L {
    if cum.abs() >= ADJUST {
        if cum > 0.0 {
            L::AdjustLeft
        } else {
            L::AdjustRight
        }
    } else if traveled > STOP_FRACTION * steps as f64 * step_ref {
        L::GoForward
    } else {
        L::Stop
    }
}

fn turn(cum: f64) -> Option<L> {
    (cum.abs() >= TURN).then_some(if cum > 0.0 { L::TurnLeft } else { L::TurnRight })
}

/// Step-by-step reference segmenter: for every candidate end it recomputes the
/// window statistics from scratch.
fn oracle_segment(poses: &[(f64, f64, f64)], actions: &[(f64, f64)], window: usize) -> Vec<(usize, usize, L)> {
    let n = actions.len();
    let norm = |a: &(f64, f64)| a.0.hypot(a.1);
    let step_ref = actions.iter().map(norm).sum::<f64>() / n as f64;
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        loop {
            let cum: f64 = (start..end).map(|k| wrap(poses[k + 1].2 - poses[k].2)).sum();
            let traveled: f64 = actions[start..end].iter().map(norm).sum();
            if let Some(l) = turn(cum) {
                out.push((start, end, l));
                break;
            }
            if end - start == window || end == n {
                out.push((start, end, weak(cum, traveled, end - start, step_ref)));
                break;
            }
            end += 1;
        }
        start = end;
    }
    out
}

/// Reference chunk labeler. An egocentric step rotates the heading by the
/// bearing of its displacement.
fn oracle_relabel(chunk: &[(f64, f64)], step_ref: f64) -> L {
    let cum: f64 = chunk
        .iter()
        .filter(|a| a.0.hypot(a.1) > 1e-9)
        .map(|a| a.1.atan2(a.0))
        .sum();
    if let Some(l) = turn(cum) {
        return l;
    }
    let traveled: f64 = chunk.iter().map(|a| a.0.hypot(a.1)).sum();
    weak(cum, traveled, chunk.len(), step_ref)
}

fn chunk_pairs(c: &ActionChunk) -> Vec<(f64, f64)> {
    c.iter().map(|a| (a.dx, a.dy)).collect()
}

/// Plug-in conditional entropy `H(x | g)` from weighted `(g, x)` observations.
fn plugin_h<G: std::hash::Hash + Eq + Clone, X: std::hash::Hash + Eq + Clone>(rows: &[(G, X, f64)]) -> f64 {
    let mut joint: HashMap<(G, X), f64> = HashMap::new();
    let mut marg: HashMap<G, f64> = HashMap::new();
    let mut total = 0.0;
    for (g, x, w) in rows {
        *joint.entry((g.clone(), x.clone())).or_default() += w;
        *marg.entry(g.clone()).or_default() += w;
        total += w;
    }
    let mut h = 0.0;
    for ((g, _), w) in &joint {
        if *w > 0.0 {
            h -= w / total * (w / marg[g]).ln();
        }
    }
    h
}

fn python_repr_list(items: &[&str]) -> String {
    let quoted: Vec<String> = items
        .iter()
        .map(|s| {
            if s.contains('\'') && !s.contains('"') {
                format!("\"{s}\"")
            } else {
                format!("'{}'", s.replace('\\', "\\\\").replace('\'', "\\'"))
            }
        })
        .collect();
    format!("[{}]", quoted.join(", "))
}

// ---------------------------------------------------------------- criteria

fn codec_roundtrip() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DEC);
    let mut worst: f64 = 0.0;
    let mut token_mismatch = 0;
    let mut identity_failures = 0;
    for i in 0..10_000 {
        let factor = [0.05, 0.25, 1.0, 3.7][i % 4];
        let cfg = CodecConfig::new(factor);
        let mut deltas = [Action::ZERO; 8];
        for d in deltas.iter_mut() {
            let mut draw = || match rng.random_range(0..10) {
                0 => factor * [-1.0, 1.0, 0.0][rng.random_range(0..3)],
                1 => rng.random_range(-4.0..4.0) * factor,
                _ => rng.random_range(-1.0..1.0) * factor,
            };
            *d = Action::new(draw(), draw());
        }
        let chunk = ActionChunk::new(deltas);
        let tokens = tokenize(&chunk, &cfg).unwrap();
        let expect: Vec<u32> = deltas
            .iter()
            .flat_map(|a| [a.dx, a.dy])
            .map(|x| oracle_bin(x, factor, 128))
            .collect();
        token_mismatch += (tokens != expect) as usize;
        let back = detokenize(&tokens, &cfg).unwrap();
        for (a, b) in deltas.iter().zip(back.iter()) {
            for (x, y) in [(a.dx, b.dx), (a.dy, b.dy)] {
                let clamped = x.clamp(-factor, factor);
                worst = worst.max((y - clamped).abs() / factor);
            }
        }
        let random_tokens: Vec<u32> = (0..16).map(|_| rng.random_range(0..128)).collect();
        let decoded = detokenize(&random_tokens, &cfg).unwrap();
        identity_failures += (tokenize(&decoded, &cfg).unwrap() != random_tokens) as usize;
    }
    let elapsed = t0.elapsed();
    let bound = 1.0 / 128.0;
    outcome(
        worst <= bound + 1e-12 && token_mismatch == 0 && identity_failures == 0 && elapsed < Duration::from_secs(10),
        format!(
            "max error {worst:.6}*F (bound {bound:.6}*F), token mismatches {token_mismatch}, identity failures {identity_failures}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn random_trajectory(rng: &mut ChaCha8Rng, id: usize) -> Trajectory {
    let n = rng.random_range(1..=30);
    let mut actions = Vec::with_capacity(n);
    let mode_len = rng.random_range(1..6);
    let mut bias = 0.0;
    for k in 0..n {
        if k % mode_len == 0 {
            bias = rng.random_range(-20.0f64..20.0).to_radians();
        }
        let len = match rng.random_range(0..8) {
            0 => 0.0,
            1 => rng.random_range(0.0..0.02),
            _ => rng.random_range(0.1..0.5),
        };
        let turn = bias + rng.random_range(-5.0f64..5.0).to_radians();
        actions.push(Action::arc(len, turn));
    }
    let start = Pose::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-PI..PI));
    Trajectory::integrate(format!("r{id}"), "random", start, actions, |t, _| Payload::Features {
        values: vec![t as f64],
    })
}

fn segmenter_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5E6);
    let cfg = SegmenterConfig::default();
    let mut mismatches = 0;
    let mut perturbed = 0;
    let mut segments = 0;
    for i in 0..1000 {
        let t = random_trajectory(&mut rng, i);
        let got = segment(&t, &cfg).unwrap();
        segments += got.len();
        let poses: Vec<_> = t.poses.iter().map(|p| (p.x, p.y, p.yaw)).collect();
        let actions: Vec<_> = t.actions.iter().map(|a| (a.dx, a.dy)).collect();
        let expect = oracle_segment(&poses, &actions, cfg.window);
        let got_triples: Vec<_> = got.iter().map(|s| (s.start, s.end, to_l(s.label))).collect();
        mismatches += (got_triples != expect) as usize;

        let mut other = t.clone();
        for o in other.observations.iter_mut() {
            o.payload = Payload::Uri {
                uri: format!("file:///frames/{}.png", rng.random::<u32>()),
            };
        }
        perturbed += (segment(&other, &cfg).unwrap() != got) as usize;
    }
    let elapsed = t0.elapsed();
    outcome(
        mismatches == 0 && perturbed == 0 && elapsed < Duration::from_secs(30),
        format!(
            "1000 trajectories, {segments} segments, {mismatches} oracle mismatches, {perturbed} payload-sensitive, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn synthetic_chunk(label: AtomicLabel, rng: &mut ChaCha8Rng) -> ActionChunk {
    let deg = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| rng.random_range(lo..hi).to_radians();
    let mut deltas = [Action::ZERO; 8];
    for d in deltas.iter_mut() {
        let len = rng.random_range(0.2..0.3);
        *d = match label {
            AtomicLabel::TurnLeft => Action::arc(len, deg(7.0, 11.0, rng)),
            AtomicLabel::TurnRight => Action::arc(len, -deg(7.0, 11.0, rng)),
            AtomicLabel::GoForward => Action::arc(len, deg(-0.5, 0.5, rng)),
            AtomicLabel::Stop => Action::arc(rng.random_range(0.0..0.01), 0.0),
            AtomicLabel::AdjustLeft => Action::arc(len, deg(2.0, 3.0, rng)),
            AtomicLabel::AdjustRight => Action::arc(len, -deg(2.0, 3.0, rng)),
        };
    }
    ActionChunk::new(deltas)
}

fn atomic_self_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA70);
    let mut data = Vec::new();
    for label in AtomicLabel::ALL {
        for i in 0..60 {
            data.push(AtomicSample {
                trajectory_id: format!("{label}-{i}"),
                timestep: 0,
                label,
                features: (0..3).map(|_| rng.random_range(0.0..1.0)).collect(),
                chunk: synthetic_chunk(label, &mut rng),
            });
        }
    }
    let step_ref = 0.25;
    let cfg = PolicyConfig {
        relabel: SegmenterConfig::default().with_reference_step(step_ref),
        ..Default::default()
    };
    let (model, _) = train(&data, &cfg, 7).unwrap();
    let mut rates = BTreeMap::new();
    let mut yaw: BTreeMap<AtomicLabel, Vec<f64>> = BTreeMap::new();
    for label in AtomicLabel::ALL {
        let mut hits = 0;
        for s in 0..1000u64 {
            // held-out observations: fresh features never seen in training
            let features: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let chunk = model.sample(label, &features, 1_000_000 + s).unwrap();
            let pairs = chunk_pairs(&chunk);
            hits += (oracle_relabel(&pairs, step_ref) == to_l(label)) as usize;
            let cum: f64 = pairs.iter().filter(|a| a.0.hypot(a.1) > 1e-9).map(|a| a.1.atan2(a.0)).sum();
            yaw.entry(label).or_default().push(cum);
        }
        rates.insert(label, hits as f64 / 1000.0);
    }
    let left = &yaw[&AtomicLabel::TurnLeft];
    let right = &yaw[&AtomicLabel::TurnRight];
    let differ = left
        .iter()
        .zip(right)
        .filter(|(l, r)| l.signum() != r.signum() && **l != 0.0 && **r != 0.0)
        .count() as f64
        / left.len() as f64;
    let worst = rates.values().copied().fold(1.0, f64::min);
    let detail = rates
        .iter()
        .map(|(l, r)| format!("{}={r:.3}", l.prompt_name()))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(
        worst >= 0.95 && differ >= 0.99,
        format!("{detail}; left/right yaw sign differs {differ:.3}"),
    )
}

fn random_joint(rng: &mut ChaCha8Rng) -> ToyJoint {
    let (no, nl, na, nla) = (
        rng.random_range(1..4),
        rng.random_range(1..4),
        rng.random_range(1..6),
        rng.random_range(1..4),
    );
    let atomic_of: Vec<usize> = (0..na).map(|_| rng.random_range(0..nla)).collect();
    let mut rows = Vec::new();
    for o in 0..no {
        for l in 0..nl {
            for a in 0..na {
                let p: f64 = if rng.random_range(0..4) == 0 { 0.0 } else { rng.random_range(0.0..1.0) };
                rows.push((o, l, a, p));
            }
        }
    }
    let total: f64 = rows.iter().map(|r| r.3).sum();
    if total == 0.0 {
        rows[0].3 = 1.0;
    } else {
        rows.iter_mut().for_each(|r| r.3 /= total);
    }
    ToyJoint { rows, atomic_of }
}

fn lemma_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1E33A);
    let mut violations = 0;
    let mut disagreements = 0;
    let mut min_gap = f64::INFINITY;
    for _ in 0..200 {
        let j = random_joint(&mut rng);
        let got = exact_information(&j).unwrap();
        let rows_a_o: Vec<_> = j.rows.iter().map(|&(o, _, a, p)| (o, a, p)).collect();
        let rows_a_lo: Vec<_> = j.rows.iter().map(|&(o, l, a, p)| ((o, l), a, p)).collect();
        let rows_la_o: Vec<_> = j.rows.iter().map(|&(o, _, a, p)| (o, j.atomic_of[a], p)).collect();
        let rows_la_lo: Vec<_> = j.rows.iter().map(|&(o, l, a, p)| ((o, l), j.atomic_of[a], p)).collect();
        let mi = plugin_h(&rows_a_o) - plugin_h(&rows_a_lo);
        let h_o = plugin_h(&rows_la_o);
        let h_lo = plugin_h(&rows_la_lo);
        let bound = h_o - h_lo;
        min_gap = min_gap.min(mi - bound);
        violations += (mi < bound - 1e-9 || got.action_instruction < got.bound() - 1e-9) as usize;
        disagreements += ((got.action_instruction - mi).abs() > 1e-9
            || (got.h_atomic_given_obs - h_o).abs() > 1e-9
            || (got.h_atomic_given_instruction_obs - h_lo).abs() > 1e-9) as usize;
    }

    // independence: o, l, a uniform and independent
    let mut rows = Vec::new();
    for o in 0..2 {
        for l in 0..2 {
            for a in 0..4 {
                rows.push((o, l, a, 1.0 / 16.0));
            }
        }
    }
    let indep = exact_information(&ToyJoint {
        rows,
        atomic_of: vec![0, 0, 1, 1],
    })
    .unwrap();
    let indep_ok = indep.action_instruction == 0.0 && indep.atomic_instruction == 0.0 && indep.bound() == 0.0;

    // deterministic chain l -> a -> la with two equally likely instructions
    let chain = exact_information(&ToyJoint {
        rows: vec![(0, 0, 0, 0.5), (0, 1, 1, 0.5)],
        atomic_of: vec![0, 1],
    })
    .unwrap();
    let h_l_given_o = 2f64.ln();
    let chain_ok = chain.action_instruction == h_l_given_o
        && chain.bound() == h_l_given_o
        && chain.h_atomic_given_instruction_obs == 0.0;

    outcome(
        violations == 0 && disagreements == 0 && indep_ok && chain_ok,
        format!(
            "200 joints: {violations} violations, {disagreements} oracle disagreements, min I-bound gap {min_gap:.3e}; independence {indep_ok}, chain {chain_ok}"
        ),
    )
}

/// `(H(la|o), H(la|l,o))` from a dataset file, keys and labels computed here.
fn oracle_dataset_entropy(path: &Path, factual_only: bool, step_ref: f64) -> (f64, f64, usize) {
    let text = fs::read_to_string(path).unwrap();
    let mut by_o = Vec::new();
    let mut by_lo = Vec::new();
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        if factual_only && v["branch"] != "factual" {
            continue;
        }
        let key = (v["trajectory_id"].as_str().unwrap().to_string(), v["anchor_timestep"].as_u64().unwrap());
        let instr = v["instruction"]["text"]
            .as_str()
            .unwrap()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        let chunk: Vec<(f64, f64)> = v["chunk"]["deltas"]
            .as_array()
            .unwrap()
            .iter()
            .map(|d| (d["dx"].as_f64().unwrap(), d["dy"].as_f64().unwrap()))
            .collect();
        let label = format!("{:?}", oracle_relabel(&chunk, step_ref));
        by_o.push((key.clone(), label.clone(), 1.0));
        by_lo.push(((key, instr), label, 1.0));
    }
    (plugin_h(&by_o), plugin_h(&by_lo), by_o.len())
}

fn bound_monotonicity(run: &Path) -> Outcome {
    let report: Value = serde_json::from_str(&fs::read_to_string(run.join("entropy.json")).unwrap()).unwrap();
    let lib_cast = report["cast"]["bound"].as_f64().unwrap();
    let lib_hind = report["hindsight_only"]["bound"].as_f64().unwrap();
    let (ho, hlo, n) = oracle_dataset_entropy(&run.join("dataset.jsonl"), false, 0.25);
    let (hho, hhlo, nh) = oracle_dataset_entropy(&run.join("dataset.jsonl"), true, 0.25);
    let cast = ho - hlo;
    let hind = hho - hhlo;
    let agree = (cast - lib_cast).abs() < 1e-9 && (hind - lib_hind).abs() < 1e-9;
    outcome(
        cast > hind && hind <= 0.05 && agree,
        format!("cast {cast:.4} nats over {n} examples, hindsight-only {hind:.4} nats over {nh}; library agrees: {agree}"),
    )
}

fn sim_config(seed: u64, run_dir: PathBuf, cache: Option<PathBuf>) -> PipelineConfig {
    PipelineConfig {
        seed,
        run_dir,
        cache_dir: cache,
        ..Default::default()
    }
}

struct PolicyTally {
    successes: usize,
    episodes: usize,
}

fn tally(benchmark: &Value, policy: &str) -> PolicyTally {
    let p = benchmark["report"]["policies"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| p["policy"] == policy)
        .unwrap();
    let mut t = PolicyTally {
        successes: 0,
        episodes: 0,
    };
    for task in p["tasks"].as_array().unwrap() {
        for ep in task["episodes"].as_array().unwrap() {
            t.episodes += 1;
            t.successes += ep["success"].as_bool().unwrap() as usize;
        }
    }
    t
}

fn language_following(root: &Path, seeds: &[u64]) -> Outcome {
    let t0 = Instant::now();
    let mut cast = PolicyTally {
        successes: 0,
        episodes: 0,
    };
    let mut hind = PolicyTally {
        successes: 0,
        episodes: 0,
    };
    let mut per_seed = Vec::new();
    let mut cast_probes = (0, 0);
    let mut hind_probes = (0, 0);
    let mut tasks = 0;
    for &seed in seeds {
        let dir = root.join(format!("seed{seed}"));
        if let Err(e) = run_pipeline(sim_config(seed, dir.clone(), None)) {
            return outcome(false, format!("pipeline failed for seed {seed}: {e}"));
        }
        let b: Value = serde_json::from_str(&fs::read_to_string(dir.join("benchmark.json")).unwrap()).unwrap();
        let c = tally(&b, "cast");
        let h = tally(&b, "hindsight");
        tasks = b["report"]["policies"][0]["tasks"].as_array().unwrap().len();
        per_seed.push(format!(
            "{:+.1}",
            100.0 * (c.successes as f64 / c.episodes as f64 - h.successes as f64 / h.episodes as f64)
        ));
        cast.successes += c.successes;
        cast.episodes += c.episodes;
        hind.successes += h.successes;
        hind.episodes += h.episodes;
        for (acc, key) in [(&mut cast_probes, "cast_probes"), (&mut hind_probes, "hindsight_probes")] {
            acc.0 += b[key]["probes"].as_u64().unwrap() as usize;
            acc.1 += b[key]["differing"].as_u64().unwrap() as usize;
        }
    }
    let elapsed = t0.elapsed();
    let rc = cast.successes as f64 / cast.episodes as f64;
    let rh = hind.successes as f64 / hind.episodes as f64;
    let gap = 100.0 * (rc - rh);
    let cast_frac = cast_probes.1 as f64 / cast_probes.0.max(1) as f64;
    outcome(
        tasks == 27
            && gap >= 15.0
            && cast_probes.0 > 0
            && cast_frac >= 0.9
            && hind_probes.1 == 0
            && elapsed < Duration::from_secs(600),
        format!(
            "{} seeds x {tasks} tasks: cast {:.1}% vs hindsight {:.1}% (gap {gap:.1} pp; per seed {}); probes differing cast {}/{} hindsight {}/{}; {:.0}s",
            seeds.len(),
            100.0 * rc,
            100.0 * rh,
            per_seed.join(" "),
            cast_probes.1,
            cast_probes.0,
            hind_probes.1,
            hind_probes.0,
            elapsed.as_secs_f64()
        ),
    )
}

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    fs::read_to_string(path).unwrap()
}

fn obs(t: usize) -> Observation {
    Observation {
        trajectory_id: "g".into(),
        timestep: t,
        payload: Payload::Uri {
            uri: format!("https://example.invalid/{t}.png"),
        },
    }
}

fn prompt_fidelity() -> Outcome {
    let labels = [AtomicLabel::GoForward, AtomicLabel::TurnLeft, AtomicLabel::Stop];
    let label_names = ["Go forward", "Turn left", "Stop"];
    let orig = ["Move to the door", "Move past the robot's charger"];
    let filtered = ["Move to the door"];
    let ctx = RequestContext {
        labels: Some(labels.to_vec()),
        orig_lang: Some(orig.iter().map(|s| s.to_string()).collect()),
        filtered_lang: Some(filtered.iter().map(|s| s.to_string()).collect()),
        prompt: Some("Move to the red chair".into()),
        descriptions: Some(vec!["A hallway.".into()]),
    };
    let primitives = python_repr_list(&["Turn left", "Turn right", "Go forward", "Stop", "Adjust left", "Adjust right"]);
    let cases = [
        (AnnotationKind::Describe, "describe.txt", golden("describe.txt")),
        (AnnotationKind::Summarize, "summarize.txt", golden("summarize.txt")),
        (
            AnnotationKind::Filter,
            "filter.txt",
            golden("filter.txt")
                .replace("{labels}", &python_repr_list(&label_names))
                .replace("{orig_lang}", &python_repr_list(&orig)),
        ),
        (
            AnnotationKind::Counterfactual,
            "counterfactual.txt",
            golden("counterfactual.txt")
                .replace("{labels}", &python_repr_list(&label_names))
                .replace("{filtered_lang}", &python_repr_list(&filtered)),
        ),
        (
            AnnotationKind::Plan,
            "plan.txt",
            golden("plan.txt")
                .replace("{prompt}", "Move to the red chair")
                .replace("{PRIMITIVES}", &primitives),
        ),
    ];
    let mut failures = Vec::new();
    for (kind, name, expect) in &cases {
        let req = AnnotatorRequest::new(*kind, vec![obs(0), obs(1), obs(2)], ctx.clone());
        match render_prompt(&req) {
            Ok(got) if &got == expect => {}
            Ok(_) => failures.push(name.to_string()),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    if SYSTEM_TEMPLATE != golden("system.txt") {
        failures.push("system.txt".into());
    }

    let exemplar = "'['prev_action' : ['Go forward', 1], 'proposed_action' : 'Turn right', 'new_instruction' : ' Move away from the door on the left' 'reasoning': 'The robot could try instead moving away from the door on the left to explore the room further. This would be a good alternative to the original instruction.'";
    let cf_ok = parse_counterfactual_response(exemplar, &[AtomicLabel::GoForward, AtomicLabel::GoForward, AtomicLabel::TurnLeft])
        .map(|p| {
            p.len() == 1
                && p[0].prev_action == (AtomicLabel::GoForward, 1)
                && p[0].proposed_action == AtomicLabel::TurnRight
                && p[0].new_instruction == "Move away from the door on the left"
        })
        .unwrap_or(false);
    let summarize_ok = parse_instructions(
        "{\"instructions\": [\"Move from the door to the stairs\", \"Move past the plant\", \"Move in a slow way\"], \"reasoning\": \"The robot walks down the hall.\"}",
    )
    .map(|v| v.len() == 3)
    .unwrap_or(false);
    let filter_ok = parse_filter("{'best': ['Move to the door'], 'new': ['Turn left and stop at the door']}")
        .map(|f| f.best == ["Move to the door"] && f.new == ["Turn left and stop at the door"])
        .unwrap_or(false);
    let plan_ok = parse_plan_reply("Turn left").ok() == Some(AtomicLabel::TurnLeft);
    for (ok, name) in [
        (cf_ok, "counterfactual exemplar"),
        (summarize_ok, "summarize reply"),
        (filter_ok, "filter reply"),
        (plan_ok, "plan reply"),
    ] {
        if !ok {
            failures.push(format!("parser: {name}"));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "5 listings and system prompt match golden files; 4 reply shapes parse".to_string()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

fn reproducibility(root: &Path) -> Outcome {
    let cache = root.join("cache");
    let files = ["dataset.jsonl", "entropy.json", "benchmark.json"];
    let mut runs = Vec::new();
    for name in ["warm", "a", "b"] {
        let dir = root.join(name);
        match run_pipeline(sim_config(11, dir.clone(), Some(cache.clone()))) {
            Ok(m) => runs.push((dir, m)),
            Err(e) => return outcome(false, format!("run {name} failed: {e}")),
        }
    }
    let read = |dir: &Path| files.map(|f| fs::read(dir.join(f)).unwrap());
    let a = read(&runs[1].0);
    let b = read(&runs[2].0);
    let cold = read(&runs[0].0);
    let identical: Vec<&str> = files.iter().zip(a.iter().zip(&b)).filter(|(_, (x, y))| x == y).map(|(f, _)| *f).collect();
    let misses = runs[1].1.cache_misses + runs[2].1.cache_misses;
    let hits = runs[2].1.cache_hits;
    outcome(
        identical.len() == files.len() && misses == 0 && hits > 0,
        format!(
            "identical: [{}]; warm runs: {hits} cache hits, {misses} misses; matches cold run: {}",
            identical.join(", "),
            a == cold
        ),
    )
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let runs = root.path().join("language");
    let seeds = [0, 1, 2, 3, 4];
    let mut results: Vec<(&str, Outcome, f64)> = Vec::new();
    let mut timed = |name, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let o = f();
        let line = format!(
            "[{}] {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
        println!("{line}");
        results.push((name, o, t0.elapsed().as_secs_f64()));
    };
    timed("1 codec round-trip", &mut codec_roundtrip);
    timed("2 segmenter oracle equivalence", &mut segmenter_oracle);
    timed("3 atomic-policy self-consistency", &mut atomic_self_consistency);
    timed("4 information bound suite", &mut lemma_suite);
    timed("6 end-to-end language following", &mut || language_following(&runs, &seeds));
    timed("5 bound monotonicity", &mut || bound_monotonicity(&runs.join("seed0")));
    timed("7 prompt fidelity", &mut prompt_fidelity);
    timed("8 reproducibility", &mut || reproducibility(&root.path().join("repro")));
    let failed = results.iter().filter(|r| !r.1.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
