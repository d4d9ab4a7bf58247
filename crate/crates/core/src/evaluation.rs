//! Policy metrics: expected loss and cost, excess loss, the trailing-window
//! protocol, Pareto filtering and reliance sensibility.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{InteractionRecord, SupportAction, SupportKind, TaskItem};
use crate::policy::{PolicyError, PolicySnapshot};
use crate::simulator::{optimal_loss, ExpertiseProfile, SimError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("evaluation set is empty")]
    EmptyEvaluationSet,
    #[error("weights must be non-negative and sum to 1 (got {0})")]
    InvalidWeights(f64),
    #[error("window {window} exceeds history length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("window must be at least 1")]
    EmptyWindow,
    #[error("no points to filter")]
    EmptyInput,
    #[error("unknown action {0}")]
    UnknownAction(String),
    #[error("supported trial {t} lacks support correctness")]
    MissingSupportCorrectness { t: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Simulator(#[from] SimError),
}

/// Items with per-item probability weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSet {
    items: Vec<TaskItem>,
    weights: Vec<f64>,
}

impl EvaluationSet {
    /// Uniform weights over `items`.
    pub fn uniform(items: Vec<TaskItem>) -> Result<Self, EvalError> {
        if items.is_empty() {
            return Err(EvalError::EmptyEvaluationSet);
        }
        let w = 1.0 / items.len() as f64;
        let weights = vec![w; items.len()];
        Ok(Self { items, weights })
    }

    pub fn weighted(items: Vec<TaskItem>, weights: Vec<f64>) -> Result<Self, EvalError> {
        if items.is_empty() {
            return Err(EvalError::EmptyEvaluationSet);
        }
        let sum: f64 = weights.iter().sum();
        if weights.len() != items.len() || weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(EvalError::InvalidWeights(sum));
        }
        Ok(Self { items, weights })
    }

    pub fn items(&self) -> &[TaskItem] {
        &self.items
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Probability mass of each region.
    pub fn region_weights(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (item, w) in self.items.iter().zip(&self.weights) {
            *out.entry(item.region.clone()).or_insert(0.0) += w;
        }
        out
    }

    fn iter(&self) -> impl Iterator<Item = (&TaskItem, f64)> {
        self.items.iter().zip(self.weights.iter().copied())
    }
}

/// `Σ_x w(x) Σ_a π(x)_a r_a(region(x))`.
pub fn expected_loss(policy: &PolicySnapshot, profile: &ExpertiseProfile, eval: &EvaluationSet) -> Result<f64, EvalError> {
    let mut total = 0.0;
    for (item, w) in eval.iter() {
        let p = policy.distribution(item.context.as_slice(), Some(&item.region))?;
        let rates = profile.region_rates(&policy.action_ids, &item.region)?;
        total += w * p.iter().zip(&rates).map(|(p, r)| p * r).sum::<f64>();
    }
    Ok(total)
}

/// `Σ_x w(x) Σ_a π(x)_a c(a)` with costs taken from `actions`.
pub fn expected_cost(policy: &PolicySnapshot, actions: &[SupportAction], eval: &EvaluationSet) -> Result<f64, EvalError> {
    let costs = policy
        .action_ids
        .iter()
        .map(|id| {
            actions
                .iter()
                .find(|a| &a.action_id == id)
                .map(|a| a.cost)
                .ok_or_else(|| EvalError::UnknownAction(id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = 0.0;
    for (item, w) in eval.iter() {
        let p = policy.distribution(item.context.as_slice(), Some(&item.region))?;
        total += w * p.iter().zip(&costs).map(|(p, c)| p * c).sum::<f64>();
    }
    Ok(total)
}

pub fn excess_loss(policy: &PolicySnapshot, profile: &ExpertiseProfile, eval: &EvaluationSet) -> Result<f64, EvalError> {
    Ok(expected_loss(policy, profile, eval)? - optimal_loss(profile, &eval.region_weights())?)
}

/// Mean of the last `window` values.
pub fn trailing_mean(values: &[f64], window: usize) -> Result<f64, EvalError> {
    if window == 0 {
        return Err(EvalError::EmptyWindow);
    }
    if window > values.len() {
        return Err(EvalError::WindowTooLarge { window, len: values.len() });
    }
    let tail = &values[values.len() - window..];
    Ok(tail.iter().sum::<f64>() / window as f64)
}

/// Mean expected loss of the final `window` snapshots.
pub fn trailing_window_loss(
    history: &[PolicySnapshot],
    profile: &ExpertiseProfile,
    eval: &EvaluationSet,
    window: usize,
) -> Result<f64, EvalError> {
    if window == 0 {
        return Err(EvalError::EmptyWindow);
    }
    if window > history.len() {
        return Err(EvalError::WindowTooLarge { window, len: history.len() });
    }
    let losses = history[history.len() - window..]
        .iter()
        .map(|s| expected_loss(s, profile, eval))
        .collect::<Result<Vec<_>, _>>()?;
    trailing_mean(&losses, window)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub lambda: f64,
    pub expected_loss: f64,
    pub expected_cost: f64,
}

impl ParetoPoint {
    pub fn new(lambda: f64, expected_loss: f64, expected_cost: f64) -> Self {
        Self { lambda, expected_loss, expected_cost }
    }

    /// `self` is no worse in both coordinates and better in one.
    pub fn dominates(&self, other: &ParetoPoint) -> bool {
        self.expected_loss <= other.expected_loss
            && self.expected_cost <= other.expected_cost
            && (self.expected_loss < other.expected_loss || self.expected_cost < other.expected_cost)
    }
}

/// Non-dominated points sorted by loss. Points sharing both coordinates
/// collapse to the one with the lowest λ.
pub fn pareto_front(points: &[ParetoPoint]) -> Result<Vec<ParetoPoint>, EvalError> {
    if points.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        a.expected_loss
            .total_cmp(&b.expected_loss)
            .then(a.expected_cost.total_cmp(&b.expected_cost))
            .then(a.lambda.total_cmp(&b.lambda))
    });
    let mut front = Vec::new();
    let mut best_cost = f64::INFINITY;
    for p in sorted {
        if p.expected_cost < best_cost {
            best_cost = p.expected_cost;
            front.push(p);
        }
    }
    Ok(front)
}

/// Exact trade-off curve of the true-profile optimum: for each λ, the
/// per-region `argmin_a λ·r_a + (1−λ)·c(a)`, with ties resolved toward the
/// cheaper action.
pub fn oracle_sweep(
    profile: &ExpertiseProfile,
    actions: &[SupportAction],
    region_weights: &BTreeMap<String, f64>,
    grid: &[f64],
) -> Result<Vec<ParetoPoint>, EvalError> {
    let ids: Vec<String> = actions.iter().map(|a| a.action_id.clone()).collect();
    let rates = region_weights
        .iter()
        .map(|(region, w)| Ok((*w, profile.region_rates(&ids, region)?)))
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(grid
        .iter()
        .map(|&lambda| {
            let (mut loss, mut cost) = (0.0, 0.0);
            for (w, r) in &rates {
                let score = |a: usize| lambda * r[a] + (1.0 - lambda) * actions[a].cost;
                let min = (0..actions.len()).map(score).fold(f64::INFINITY, f64::min);
                let a = (0..actions.len())
                    .filter(|&a| score(a) <= min + 1e-12)
                    .min_by(|&a, &b| actions[a].cost.total_cmp(&actions[b].cost))
                    .expect("at least one action");
                loss += w * r[a];
                cost += w * actions[a].cost;
            }
            ParetoPoint::new(lambda, loss, cost)
        })
        .collect())
}

/// Share of supported trials where the human followed correct support or
/// overrode incorrect support. `None` when no trial showed support.
pub fn reliance_sensibility(records: &[InteractionRecord], actions: &[SupportAction]) -> Result<Option<f64>, EvalError> {
    let mut supported = 0usize;
    let mut sensible = 0usize;
    for r in records {
        let action = actions
            .iter()
            .find(|a| a.action_id == r.action_id)
            .ok_or_else(|| EvalError::UnknownAction(r.action_id.clone()))?;
        if action.kind == SupportKind::NoSupport {
            continue;
        }
        let (Some(correct), Some(label)) = (r.support_was_correct, r.support_label) else {
            return Err(EvalError::MissingSupportCorrectness { t: r.t });
        };
        supported += 1;
        if correct == (r.human_label == label) {
            sensible += 1;
        }
    }
    Ok((supported > 0).then(|| sensible as f64 / supported as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ContextVector, TaskDataset};
    use crate::policy::Objective;
    use proptest::prelude::*;

    fn three_region_items() -> Vec<TaskItem> {
        ["x1", "x2", "x3"]
            .iter()
            .enumerate()
            .map(|(i, r)| TaskItem {
                item_id: format!("i{i}"),
                context: ContextVector(vec![i as f64]),
                true_label: 0,
                region: (*r).into(),
                payloads: Default::default(),
                stimulus: None,
            })
            .collect()
    }

    fn dataset(costs: [f64; 2]) -> TaskDataset {
        TaskDataset {
            name: "d".into(),
            label_count: 2,
            label_names: vec![],
            actions: vec![
                SupportAction { action_id: "a1".into(), kind: SupportKind::NoSupport, cost: costs[0] },
                SupportAction { action_id: "a2".into(), kind: SupportKind::ModelPrediction, cost: costs[1] },
            ],
            regions: vec!["x1".into(), "x2".into(), "x3".into()],
            items: three_region_items(),
            min_display_ms: None,
        }
    }

    fn varying() -> ExpertiseProfile {
        ExpertiseProfile::from_rows(&["a1", "a2"], &["x1", "x2", "x3"], &[&[0.7, 0.1, 0.7], &[0.1, 0.7, 0.1]]).unwrap()
    }

    #[test]
    fn loss_examples() {
        let ds = dataset([0.0, 0.7]);
        let eval = EvaluationSet::uniform(three_region_items()).unwrap();
        let fixed = PolicySnapshot::fixed(&ds, "a1").unwrap();
        assert!((expected_loss(&fixed, &varying(), &eval).unwrap() - 0.5).abs() < 1e-12);
        assert!((excess_loss(&fixed, &varying(), &eval).unwrap() - 0.4).abs() < 1e-12);
        let oracle = PolicySnapshot::oracle(&ds, varying(), Objective::LossOnly);
        assert!((expected_loss(&oracle, &varying(), &eval).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(excess_loss(&oracle, &varying(), &eval).unwrap(), 0.0);
        let zeros = ExpertiseProfile::from_rows(&["a1", "a2"], &["x1", "x2", "x3"], &[&[0.0; 3], &[0.0; 3]]).unwrap();
        assert_eq!(expected_loss(&fixed, &zeros, &eval).unwrap(), 0.0);
    }

    #[test]
    fn cost_examples() {
        let eval = EvaluationSet::uniform(three_region_items()).unwrap();
        let ds = dataset([0.0, 0.7]);
        assert_eq!(expected_cost(&PolicySnapshot::fixed(&ds, "a1").unwrap(), &ds.actions, &eval).unwrap(), 0.0);
        assert_eq!(expected_cost(&PolicySnapshot::fixed(&ds, "a2").unwrap(), &ds.actions, &eval).unwrap(), 0.7);
        let half = dataset([0.0, 0.5]);
        let uniform = PolicySnapshot::uniform(&half);
        assert!((expected_cost(&uniform, &half.actions, &eval).unwrap() - 0.25).abs() < 1e-12);
        let other = vec![SupportAction { action_id: "zz".into(), kind: SupportKind::Other, cost: 0.1 }];
        assert!(matches!(expected_cost(&uniform, &other, &eval), Err(EvalError::UnknownAction(_))));
    }

    #[test]
    fn unknown_region_is_reported() {
        let ds = dataset([0.0, 0.7]);
        let mut items = three_region_items();
        items[0].region = "elsewhere".into();
        let eval = EvaluationSet::uniform(items).unwrap();
        let fixed = PolicySnapshot::fixed(&ds, "a1").unwrap();
        assert!(matches!(
            expected_loss(&fixed, &varying(), &eval),
            Err(EvalError::Simulator(SimError::UnknownRegion(_)))
        ));
    }

    #[test]
    fn trailing_window_examples() {
        let mut history = vec![0.5; 9];
        history.push(0.1);
        assert!((trailing_mean(&history, 10).unwrap() - 0.46).abs() < 1e-12);
        assert_eq!(trailing_mean(&history, 1).unwrap(), 0.1);
        assert_eq!(trailing_mean(&history, 11), Err(EvalError::WindowTooLarge { window: 11, len: 10 }));
        assert_eq!(trailing_mean(&history, 0), Err(EvalError::EmptyWindow));

        let ds = dataset([0.0, 0.7]);
        let eval = EvaluationSet::uniform(three_region_items()).unwrap();
        let snaps = vec![PolicySnapshot::fixed(&ds, "a1").unwrap(); 4];
        let l = trailing_window_loss(&snaps, &varying(), &eval, 3).unwrap();
        assert!((l - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weights_are_validated() {
        assert!(EvaluationSet::weighted(three_region_items(), vec![0.5, 0.5, 0.5]).is_err());
        assert!(EvaluationSet::weighted(three_region_items(), vec![1.5, -0.5, 0.0]).is_err());
        let e = EvaluationSet::weighted(three_region_items(), vec![0.5, 0.25, 0.25]).unwrap();
        assert_eq!(e.region_weights()["x1"], 0.5);
        assert!(EvaluationSet::uniform(vec![]).is_err());
    }

    #[test]
    fn pareto_examples() {
        let pts = [ParetoPoint::new(0.0, 0.1, 0.9), ParetoPoint::new(0.5, 0.5, 0.2), ParetoPoint::new(1.0, 0.6, 0.3)];
        let front = pareto_front(&pts).unwrap();
        assert_eq!(front, vec![pts[0], pts[1]]);
        assert_eq!(pareto_front(&pts[..1]).unwrap(), vec![pts[0]]);
        let dup = [ParetoPoint::new(0.7, 0.2, 0.2), ParetoPoint::new(0.3, 0.2, 0.2)];
        assert_eq!(pareto_front(&dup).unwrap(), vec![dup[1]]);
        assert_eq!(pareto_front(&[]), Err(EvalError::EmptyInput));
    }

    fn record(t: usize, action: &str, human: usize, support: Option<(bool, usize)>) -> InteractionRecord {
        InteractionRecord {
            t,
            item_id: format!("i{t}"),
            action_id: action.into(),
            human_label: human,
            loss: 0,
            support_was_correct: support.map(|s| s.0),
            support_label: support.map(|s| s.1),
        }
    }

    #[test]
    fn reliance_examples() {
        let actions = dataset([0.0, 0.5]).actions;
        let recs = vec![
            record(1, "a2", 0, Some((true, 0))),
            record(2, "a2", 1, Some((true, 1))),
            record(3, "a2", 0, Some((false, 1))),
            record(4, "a2", 1, Some((false, 1))),
            record(5, "a1", 1, None),
        ];
        assert_eq!(reliance_sensibility(&recs, &actions).unwrap(), Some(0.75));
        assert_eq!(reliance_sensibility(&recs[4..], &actions).unwrap(), None);
        assert_eq!(reliance_sensibility(&recs[..2], &actions).unwrap(), Some(1.0));
        let broken = vec![record(1, "a2", 0, None)];
        assert_eq!(reliance_sensibility(&broken, &actions), Err(EvalError::MissingSupportCorrectness { t: 1 }));
    }

    fn brute_front(points: &[ParetoPoint]) -> Vec<(u64, u64)> {
        let mut kept: Vec<(u64, u64)> = points
            .iter()
            .filter(|p| !points.iter().any(|q| q.dominates(p)))
            .map(|p| (p.expected_loss.to_bits(), p.expected_cost.to_bits()))
            .collect();
        kept.sort_by(|a, b| f64::from_bits(a.0).total_cmp(&f64::from_bits(b.0)).then(a.1.cmp(&b.1)));
        kept.dedup();
        kept
    }

    proptest! {
        #[test]
        fn pareto_matches_pairwise_filter(raw in prop::collection::vec((0u8..20, 0u8..20, 0u8..21), 1..200)) {
            let points: Vec<ParetoPoint> = raw
                .iter()
                .map(|&(l, c, lam)| ParetoPoint::new(lam as f64 / 20.0, l as f64 / 19.0, c as f64 / 19.0))
                .collect();
            let front = pareto_front(&points).unwrap();
            let coords: Vec<(u64, u64)> = front.iter().map(|p| (p.expected_loss.to_bits(), p.expected_cost.to_bits())).collect();
            prop_assert_eq!(coords, brute_front(&points));
            for p in &front {
                let min_lambda = points
                    .iter()
                    .filter(|q| q.expected_loss == p.expected_loss && q.expected_cost == p.expected_cost)
                    .map(|q| q.lambda)
                    .fold(f64::INFINITY, f64::min);
                prop_assert_eq!(p.lambda, min_lambda);
            }
        }
    }
}
