//! Conditional entropy diagnostics for labeled datasets.
//!
//! The quantity of interest is `H(la | o) - H(la | l, o)`, where `la` is the
//! atomic relabel of an example's chunk, `o` its observation key and `l` its
//! instruction. By the data processing inequality along `l -> a -> la` it
//! lower-bounds `I(a; l | o)`. Entropies are plug-in estimates in nats.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normalize_whitespace, AtomicLabel, LabeledExample};
use crate::segment::{relabel_chunk, SegmenterConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub h_label_given_obs: f64,
    pub h_label_given_instruction_obs: f64,
    pub bound: f64,
    pub examples: usize,
    pub observation_keys: usize,
    pub instruction_keys: usize,
    pub atomic_labels: usize,
    /// Number of observation keys carrying `n` distinct atomic labels, keyed by `n`.
    pub label_multiplicity: BTreeMap<usize, usize>,
    /// Number of observation keys carrying `n` distinct instructions, keyed by `n`.
    pub instruction_multiplicity: BTreeMap<usize, usize>,
}

impl EntropyReport {
    /// Mean number of distinct atomic labels per observation key.
    pub fn mean_label_multiplicity(&self) -> f64 {
        let keys: usize = self.label_multiplicity.values().sum();
        if keys == 0 {
            return 0.0;
        }
        self.label_multiplicity
            .iter()
            .map(|(m, c)| (m * c) as f64)
            .sum::<f64>()
            / keys as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("examples                 {}\n", self.examples));
        s.push_str(&format!("observation keys         {}\n", self.observation_keys));
        s.push_str(&format!("(observation, instr.)    {}\n", self.instruction_keys));
        s.push_str(&format!("distinct atomic labels   {}\n", self.atomic_labels));
        s.push_str(&format!("H(la | o)                {:.6} nats\n", self.h_label_given_obs));
        s.push_str(&format!(
            "H(la | l, o)             {:.6} nats\n",
            self.h_label_given_instruction_obs
        ));
        s.push_str(&format!("bound                    {:.6} nats\n", self.bound));
        s.push_str("labels per observation key:\n");
        for (m, c) in &self.label_multiplicity {
            s.push_str(&format!("  {m:>3}: {c}\n"));
        }
        s
    }
}

type ObsKey = (String, usize);

#[derive(Default)]
struct Counts {
    by_obs: BTreeMap<ObsKey, BTreeMap<AtomicLabel, usize>>,
    by_obs_instr: BTreeMap<(ObsKey, String), BTreeMap<AtomicLabel, usize>>,
    instructions_per_obs: BTreeMap<ObsKey, BTreeMap<String, usize>>,
}

impl Counts {
    fn add(&mut self, key: ObsKey, instruction: String, label: AtomicLabel) {
        *self
            .by_obs
            .entry(key.clone())
            .or_default()
            .entry(label)
            .or_default() += 1;
        *self
            .instructions_per_obs
            .entry(key.clone())
            .or_default()
            .entry(instruction.clone())
            .or_default() += 1;
        *self
            .by_obs_instr
            .entry((key, instruction))
            .or_default()
            .entry(label)
            .or_default() += 1;
    }

    fn merge(mut self, other: Counts) -> Counts {
        fn merge_into<K: Ord, L: Ord>(
            dst: &mut BTreeMap<K, BTreeMap<L, usize>>,
            src: BTreeMap<K, BTreeMap<L, usize>>,
        ) {
            for (k, inner) in src {
                let d = dst.entry(k).or_default();
                for (l, n) in inner {
                    *d.entry(l).or_default() += n;
                }
            }
        }
        merge_into(&mut self.by_obs, other.by_obs);
        merge_into(&mut self.by_obs_instr, other.by_obs_instr);
        merge_into(&mut self.instructions_per_obs, other.instructions_per_obs);
        self
    }
}

/// `-sum_g sum_x n_gx / n * ln(n_gx / n_g)` over groups `g`.
fn conditional_entropy<'a>(groups: impl Iterator<Item = &'a BTreeMap<AtomicLabel, usize>>, n: usize) -> f64 {
    let n = n as f64;
    let mut h = 0.0;
    for g in groups {
        let ng: usize = g.values().sum();
        for &c in g.values() {
            if c > 0 {
                h -= c as f64 / n * (c as f64 / ng as f64).ln();
            }
        }
    }
    h
}

/// Plug-in estimate of the bound over `(trajectory_id, anchor_timestep)` keys.
pub fn empirical_bound(examples: &[LabeledExample], relabel: &SegmenterConfig) -> Result<EntropyReport> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("labeled dataset"));
    }
    let counts = examples
        .par_iter()
        .fold(Counts::default, |mut acc, e| {
            acc.add(
                (e.trajectory_id.clone(), e.anchor_timestep),
                normalize_whitespace(&e.instruction.text),
                relabel_chunk(&e.chunk, relabel),
            );
            acc
        })
        .reduce(Counts::default, Counts::merge);

    let n = examples.len();
    let h_o = conditional_entropy(counts.by_obs.values(), n);
    let h_lo = conditional_entropy(counts.by_obs_instr.values(), n);

    let mut label_multiplicity = BTreeMap::new();
    let mut labels = std::collections::BTreeSet::new();
    for g in counts.by_obs.values() {
        *label_multiplicity.entry(g.len()).or_default() += 1;
        labels.extend(g.keys().copied());
    }
    let mut instruction_multiplicity = BTreeMap::new();
    for g in counts.instructions_per_obs.values() {
        *instruction_multiplicity.entry(g.len()).or_default() += 1;
    }

    Ok(EntropyReport {
        h_label_given_obs: h_o,
        h_label_given_instruction_obs: h_lo,
        bound: h_o - h_lo,
        examples: n,
        observation_keys: counts.by_obs.len(),
        instruction_keys: counts.by_obs_instr.len(),
        atomic_labels: labels.len(),
        label_multiplicity,
        instruction_multiplicity,
    })
}

/// Explicit finite joint over (observation, instruction, action) with a
/// deterministic map from actions to atomic labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyJoint {
    /// `(observation, instruction, action, probability)` rows.
    pub rows: Vec<(usize, usize, usize, f64)>,
    /// `atomic_of[action]` is the atomic label of that action.
    pub atomic_of: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InformationTerms {
    /// `I(a; l | o)`
    pub action_instruction: f64,
    /// `I(la; l | o)`, computed directly from the induced joint.
    pub atomic_instruction: f64,
    /// `H(la | o)`
    pub h_atomic_given_obs: f64,
    /// `H(la | l, o)`
    pub h_atomic_given_instruction_obs: f64,
}

impl InformationTerms {
    pub fn bound(&self) -> f64 {
        self.h_atomic_given_obs - self.h_atomic_given_instruction_obs
    }
}

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

impl ToyJoint {
    pub fn validate(&self) -> Result<()> {
        let mut sum = 0.0;
        for &(_, _, a, p) in &self.rows {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidJoint(format!("bad probability {p}")));
            }
            if a >= self.atomic_of.len() {
                return Err(Error::InvalidJoint(format!("action {a} has no atomic label")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::NotNormalized(sum));
        }
        Ok(())
    }
}

/// `I(x; y | o) = sum p(o,y,x) ln[p(o,y,x) p(o) / (p(o,y) p(o,x))]`.
fn conditional_mi(rows: &BTreeMap<(usize, usize, usize), f64>) -> f64 {
    let mut p_o: BTreeMap<usize, f64> = BTreeMap::new();
    let mut p_oy: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut p_ox: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&(o, y, x), &p) in rows {
        *p_o.entry(o).or_default() += p;
        *p_oy.entry((o, y)).or_default() += p;
        *p_ox.entry((o, x)).or_default() += p;
    }
    rows.iter()
        .filter(|(_, &p)| p > 0.0)
        .map(|(&(o, y, x), &p)| p * (p * p_o[&o] / (p_oy[&(o, y)] * p_ox[&(o, x)])).ln())
        .sum()
}

/// `H(x | g) = -sum p(g,x) ln[p(g,x) / p(g)]` with rows keyed by `(g, x)`.
fn conditional_h<G: Ord + Clone>(rows: &BTreeMap<(G, usize), f64>) -> f64 {
    let mut p_g: BTreeMap<G, f64> = BTreeMap::new();
    for ((g, _), p) in rows {
        *p_g.entry(g.clone()).or_default() += p;
    }
    -rows
        .iter()
        .filter(|(_, &p)| p > 0.0)
        .map(|((g, _), &p)| p * (p / p_g[g]).ln())
        .sum::<f64>()
}

/// Exact information terms by enumeration.
pub fn exact_information(joint: &ToyJoint) -> Result<InformationTerms> {
    joint.validate()?;
    let mut full: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    let mut atomic: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    let mut atomic_o: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut atomic_lo: BTreeMap<((usize, usize), usize), f64> = BTreeMap::new();
    for &(o, l, a, p) in &joint.rows {
        let la = joint.atomic_of[a];
        *full.entry((o, l, a)).or_default() += p;
        *atomic.entry((o, l, la)).or_default() += p;
        *atomic_o.entry((o, la)).or_default() += p;
        *atomic_lo.entry(((o, l), la)).or_default() += p;
    }
    Ok(InformationTerms {
        action_instruction: conditional_mi(&full),
        atomic_instruction: conditional_mi(&atomic),
        h_atomic_given_obs: conditional_h(&atomic_o),
        h_atomic_given_instruction_obs: conditional_h(&atomic_lo),
    })
}
