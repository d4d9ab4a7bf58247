//! Synthetic tasks and expertise populations.
//!
//! Regions are compact 2D clusters centred on the unit circle, so any two
//! regions are linearly separable. Each region is one class.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ContextVector, Payload, SupportAction, SupportKind, TaskDataset, TaskItem};
use crate::rng::{self, Stream};
use crate::simulator::{classify_profile, ExpertiseProfile, ProfileKind, DEFAULT_CLASSIFY_TOLERANCE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub name: String,
    pub regions: usize,
    pub items_per_region: usize,
    /// Radius of the disc each cluster's points are drawn from.
    pub spread: f64,
    /// Costs of no support, a model prediction, and a consensus distribution.
    pub costs: [f64; 3],
    /// Probability the model payload shows the true label.
    pub model_accuracy: f64,
    /// Consensus mass on the true label.
    pub consensus_peak: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            name: "synthetic-3a".into(),
            regions: 3,
            items_per_region: 50,
            spread: 0.3,
            costs: [0.0, 0.3, 0.6],
            model_accuracy: 0.8,
            consensus_peak: 0.7,
        }
    }
}

pub const ACTION_IDS: [&str; 3] = ["human_alone", "model", "consensus"];

pub fn region_name(r: usize) -> String {
    format!("region-{r}")
}

/// Builds a dataset from `spec`; deterministic in `seed`.
pub fn synthetic_dataset(spec: &WorldSpec, seed: u64) -> TaskDataset {
    let mut rng = rng::stream(seed, Stream::Shuffle);
    let n = spec.regions;
    let regions: Vec<String> = (0..n).map(region_name).collect();
    let mut items = Vec::with_capacity(n * spec.items_per_region);
    for r in 0..n {
        let angle = TAU * r as f64 / n as f64;
        let (cx, cy) = (angle.cos(), angle.sin());
        for i in 0..spec.items_per_region {
            let rho = spec.spread * rng.random::<f64>().sqrt();
            let phi = TAU * rng.random::<f64>();
            let context = ContextVector(vec![cx + rho * phi.cos(), cy + rho * phi.sin()]);
            let model_label = if rng.random::<f64>() < spec.model_accuracy {
                r
            } else {
                (r + rng.random_range(1..n.max(2))) % n
            };
            let rest = (1.0 - spec.consensus_peak) / (n - 1).max(1) as f64;
            let consensus = (0..n).map(|l| if l == r { spec.consensus_peak } else { rest }).collect();
            items.push(TaskItem {
                item_id: format!("r{r}-{i:03}"),
                context,
                true_label: r,
                region: regions[r].clone(),
                payloads: BTreeMap::from([
                    (ACTION_IDS[1].to_string(), Payload::Label { value: model_label }),
                    (ACTION_IDS[2].to_string(), Payload::Distribution { value: consensus }),
                ]),
                stimulus: Some(format!("point {i} of class {r}")),
            });
        }
    }
    let kinds = [SupportKind::NoSupport, SupportKind::ModelPrediction, SupportKind::ConsensusDistribution];
    TaskDataset {
        name: spec.name.clone(),
        label_count: n.max(2),
        label_names: (0..n.max(2)).map(|l| format!("class-{l}")).collect(),
        actions: ACTION_IDS
            .iter()
            .zip(kinds)
            .zip(spec.costs)
            .map(|((id, kind), cost)| SupportAction { action_id: (*id).into(), kind, cost })
            .collect(),
        regions,
        items,
        min_display_ms: None,
    }
}

fn build(actions: &[String], regions: &[String], rates: &[Vec<f64>]) -> ExpertiseProfile {
    let table = actions
        .iter()
        .zip(rates)
        .map(|(a, row)| (a.clone(), regions.iter().cloned().zip(row.iter().copied()).collect()))
        .collect();
    ExpertiseProfile { name: None, regions: regions.to_vec(), actions: actions.to_vec(), table }
}

/// Rates drawn from {0.1, 0.7}; every action is the best option in at least
/// one region and no action dominates.
pub fn varying_profile(actions: &[String], regions: &[String], rng: &mut ChaCha8Rng) -> ExpertiseProfile {
    assert!(actions.len() >= 2 && regions.len() >= actions.len(), "need at least as many regions as actions");
    loop {
        let rates: Vec<Vec<f64>> = actions
            .iter()
            .map(|_| regions.iter().map(|_| if rng.random_bool(0.5) { 0.1 } else { 0.7 }).collect())
            .collect();
        let best_somewhere = (0..actions.len()).all(|a| {
            (0..regions.len()).any(|r| (0..actions.len()).all(|b| rates[a][r] <= rates[b][r]))
        });
        let p = build(actions, regions, &rates);
        if best_somewhere && classify_profile(&p, DEFAULT_CLASSIFY_TOLERANCE).map(|c| c.kind) == Ok(ProfileKind::Varying) {
            return p;
        }
    }
}

/// One randomly chosen action beats every other action in every region.
pub fn strictly_better_profile(actions: &[String], regions: &[String], rng: &mut ChaCha8Rng) -> ExpertiseProfile {
    let dominant = rng.random_range(0..actions.len());
    let base: Vec<f64> = regions.iter().map(|_| *[0.1, 0.2, 0.3].choose(rng).expect("non-empty")).collect();
    let rates: Vec<Vec<f64>> = (0..actions.len())
        .map(|a| {
            base.iter()
                .map(|b| if a == dominant { *b } else { b + *[0.3, 0.4, 0.5].choose(rng).expect("non-empty") })
                .collect()
        })
        .collect();
    build(actions, regions, &rates)
}

/// All actions within ±0.02 of a per-region base rate.
pub fn invariant_profile(actions: &[String], regions: &[String], rng: &mut ChaCha8Rng) -> ExpertiseProfile {
    let base: Vec<f64> = regions.iter().map(|_| rng.random_range(0.1..0.5)).collect();
    let rates: Vec<Vec<f64>> = actions
        .iter()
        .map(|_| base.iter().map(|b| b + rng.random_range(-0.02..=0.02)).collect())
        .collect();
    build(actions, regions, &rates)
}

/// `n` named profiles of one kind for the actions and regions of `dataset`.
pub fn synthetic_population(dataset: &TaskDataset, kind: ProfileKind, n: usize, seed: u64) -> Vec<ExpertiseProfile> {
    let actions = dataset.action_ids();
    let mut rng = rng::stream(rng::derive_seed(seed, &[kind as u64]), Stream::Simulator);
    (0..n)
        .map(|i| {
            let p = match kind {
                ProfileKind::Varying => varying_profile(&actions, &dataset.regions, &mut rng),
                ProfileKind::StrictlyBetter => strictly_better_profile(&actions, &dataset.regions, &mut rng),
                ProfileKind::Invariant => invariant_profile(&actions, &dataset.regions, &mut rng),
            };
            p.with_name(format!("{}-{i:02}", kind.as_str()))
        })
        .collect()
}

/// A shuffled copy of `0..n`.
pub fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}
