//! Support selection: the learning session, frozen policies, and the
//! comparison policies (fixed support, uniform random, population majority,
//! and the exact oracle).
//!
//! A learned policy picks `argmin_a λ·r̂_a(x) + (1−λ)·c(a)`. LinUCB subtracts
//! its confidence bonus from that objective; online KNN instead chooses
//! uniformly during warm-up and with probability γ afterwards. Ties are
//! broken uniformly at random from the session's tie-break stream.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{EstimatorError, KnnBuffer, LinUcbState};
use crate::model::{normalize_context, ContextVector, zero_one_loss, InteractionRecord, ModelError, SupportKind, TaskDataset, TaskItem};
use crate::rng::{self, Stream};
use crate::simulator::{ExpertiseProfile, SimError};

/// Scores within this distance of the minimum count as tied.
const TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("session exhausted after {horizon} trials")]
    SessionExhausted { horizon: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("outcome for action {got} does not match the selected action {expected:?}")]
    ActionMismatch { expected: Option<String>, got: String },
    #[error("unknown action {0}")]
    UnknownAction(String),
    #[error("this policy needs the input's region")]
    MissingRegion,
    #[error("population majority needs at least one policy")]
    EmptyPolicyList,
    #[error("policies disagree on the action set")]
    ActionSetMismatch,
    #[error("lambda must lie in [0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("invalid session parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Simulator(#[from] SimError),
}

/// Algorithm-specific parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineParams {
    /// LinUCB confidence multiplier.
    pub alpha: f64,
    /// KNN neighbour count.
    pub k: usize,
    /// KNN warm-up trials chosen uniformly at random.
    pub warmup: usize,
    /// KNN probability of a uniform choice after warm-up.
    pub gamma: f64,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self { alpha: 1.0, k: 8, warmup: 25, gamma: 0.1 }
    }
}

/// What a policy minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Objective {
    /// Expected loss only; cost is ignored.
    LossOnly,
    /// `λ·loss + (1−λ)·cost`.
    Scalarized { lambda: f64 },
}

impl Objective {
    pub fn scalarized(lambda: f64) -> Result<Self, PolicyError> {
        if (0.0..=1.0).contains(&lambda) {
            Ok(Objective::Scalarized { lambda })
        } else {
            Err(PolicyError::InvalidLambda(lambda))
        }
    }

    pub fn lambda(self) -> f64 {
        match self {
            Objective::LossOnly => 1.0,
            Objective::Scalarized { lambda } => lambda,
        }
    }

    #[inline]
    pub fn score(self, loss: f64, cost: f64) -> f64 {
        match self {
            Objective::LossOnly => loss,
            Objective::Scalarized { lambda } => lambda * loss + (1.0 - lambda) * cost,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyKind {
    ThreadLinUcb,
    ThreadKnn,
    Fixed(String),
    PopulationMajority(Vec<PolicySnapshot>),
    OracleOptimal(ExpertiseProfile),
    UniformRandom,
}

impl PolicyKind {
    /// Parses the policy names that need no extra data.
    pub fn parse(name: &str) -> Result<Self, PolicyError> {
        match name {
            "thread-knn" => Ok(PolicyKind::ThreadKnn),
            "thread-linucb" => Ok(PolicyKind::ThreadLinUcb),
            "random" => Ok(PolicyKind::UniformRandom),
            other => match other.strip_prefix("fixed:") {
                Some(action) if !action.is_empty() => Ok(PolicyKind::Fixed(action.to_owned())),
                _ => Err(PolicyError::InvalidParams(format!("unknown policy {other}"))),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            PolicyKind::ThreadLinUcb => "thread-linucb".into(),
            PolicyKind::ThreadKnn => "thread-knn".into(),
            PolicyKind::Fixed(a) => format!("fixed:{a}"),
            PolicyKind::PopulationMajority(_) => "population".into(),
            PolicyKind::OracleOptimal(_) => "oracle".into(),
            PolicyKind::UniformRandom => "random".into(),
        }
    }

    pub fn estimator_label(&self) -> &'static str {
        match self {
            PolicyKind::ThreadLinUcb => "linucb",
            PolicyKind::ThreadKnn => "knn",
            _ => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "snake_case")]
pub enum EstimatorState {
    LinUcb(LinUcbState),
    Knn(KnnBuffer),
    Stateless,
}

/// Uniform choice among the indices whose score is within
/// [`TIE_EPSILON`] of the minimum. Draws from `rng` only on a tie.
pub fn argmin_random_tie(scores: &[f64], rng: &mut impl Rng) -> usize {
    let ties = argmin_set(scores);
    if ties.len() == 1 {
        ties[0]
    } else {
        ties[rng.random_range(0..ties.len())]
    }
}

pub fn argmin_set(scores: &[f64]) -> Vec<usize> {
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    scores
        .iter()
        .enumerate()
        .filter(|(_, s)| **s <= min + TIE_EPSILON)
        .map(|(i, _)| i)
        .collect()
}

/// One learner–decision-maker interaction.
#[derive(Debug, Clone)]
pub struct ThreadSession {
    dataset: Arc<TaskDataset>,
    kind: PolicyKind,
    objective: Objective,
    params: EngineParams,
    estimator: EstimatorState,
    horizon: usize,
    seed: u64,
    action_ids: Vec<String>,
    costs: Vec<f64>,
    tie_rng: ChaCha8Rng,
    explore_rng: ChaCha8Rng,
    pending: Option<usize>,
    log: Vec<InteractionRecord>,
}

impl ThreadSession {
    pub fn new(
        dataset: Arc<TaskDataset>,
        kind: PolicyKind,
        objective: Objective,
        params: EngineParams,
        horizon: usize,
        seed: u64,
    ) -> Result<Self, PolicyError> {
        if let Objective::Scalarized { lambda } = objective {
            Objective::scalarized(lambda)?;
        }
        if horizon == 0 {
            return Err(PolicyError::InvalidParams("horizon must be at least 1".into()));
        }
        let action_ids = dataset.action_ids();
        let dim = dataset.dim();
        let estimator = match &kind {
            PolicyKind::ThreadLinUcb => EstimatorState::LinUcb(LinUcbState::new(action_ids.clone(), dim, params.alpha)?),
            PolicyKind::ThreadKnn => {
                EstimatorState::Knn(KnnBuffer::new(action_ids.clone(), dim, params.k, params.warmup, params.gamma)?)
            }
            PolicyKind::Fixed(a) => {
                if !action_ids.contains(a) {
                    return Err(PolicyError::UnknownAction(a.clone()));
                }
                EstimatorState::Stateless
            }
            PolicyKind::PopulationMajority(members) => {
                if members.is_empty() {
                    return Err(PolicyError::EmptyPolicyList);
                }
                if members.iter().any(|m| m.action_ids != action_ids) {
                    return Err(PolicyError::ActionSetMismatch);
                }
                EstimatorState::Stateless
            }
            PolicyKind::OracleOptimal(_) | PolicyKind::UniformRandom => EstimatorState::Stateless,
        };
        Ok(Self {
            costs: dataset.costs(),
            action_ids,
            dataset,
            kind,
            objective,
            params,
            estimator,
            horizon,
            seed,
            tie_rng: rng::stream(seed, Stream::TieBreak),
            explore_rng: rng::stream(seed, Stream::Exploration),
            pending: None,
            log: Vec::new(),
        })
    }

    /// Index of the upcoming trial (1-based).
    pub fn t(&self) -> usize {
        self.log.len() + 1
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn is_exhausted(&self) -> bool {
        self.t() > self.horizon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kind(&self) -> &PolicyKind {
        &self.kind
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn params(&self) -> EngineParams {
        self.params
    }

    pub fn dataset(&self) -> &Arc<TaskDataset> {
        &self.dataset
    }

    pub fn log(&self) -> &[InteractionRecord] {
        &self.log
    }

    pub fn estimator(&self) -> &EstimatorState {
        &self.estimator
    }

    pub fn action_ids(&self) -> &[String] {
        &self.action_ids
    }

    pub fn pending_action(&self) -> Option<&str> {
        self.pending.map(|i| self.action_ids[i].as_str())
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), PolicyError> {
        let expected = self.dataset.dim();
        if x.len() == expected {
            Ok(())
        } else {
            Err(PolicyError::DimensionMismatch { expected, actual: x.len() })
        }
    }

    fn uniform_index(&mut self) -> usize {
        self.explore_rng.random_range(0..self.action_ids.len())
    }

    /// Picks the support to show for `context`. `region` is consulted only
    /// by the oracle policy.
    pub fn select_support(&mut self, context: &[f64], region: Option<&str>) -> Result<String, PolicyError> {
        self.select_index(context, region).map(|i| self.action_ids[i].clone())
    }

    pub fn select_index(&mut self, context: &[f64], region: Option<&str>) -> Result<usize, PolicyError> {
        if self.is_exhausted() {
            return Err(PolicyError::SessionExhausted { horizon: self.horizon });
        }
        self.check_dim(context)?;
        let t = self.t();
        let choice = match &self.kind {
            PolicyKind::ThreadLinUcb => {
                let EstimatorState::LinUcb(state) = &self.estimator else { unreachable!() };
                let x = normalize_context(&ContextVector(context.to_vec()))?;
                let scores = state
                    .estimate_all(x.as_slice())?
                    .iter()
                    .zip(&self.costs)
                    .map(|(e, c)| self.objective.score(e.r_hat, *c) - e.bonus)
                    .collect::<Vec<_>>();
                argmin_random_tie(&scores, &mut self.tie_rng)
            }
            PolicyKind::ThreadKnn => {
                let EstimatorState::Knn(buffer) = &self.estimator else { unreachable!() };
                if t <= buffer.warmup() {
                    self.uniform_index()
                } else {
                    let gamma = buffer.gamma();
                    let scores = buffer
                        .estimate(context)?
                        .iter()
                        .zip(&self.costs)
                        .map(|(e, c)| self.objective.score(e.r_hat, *c))
                        .collect::<Vec<_>>();
                    if self.explore_rng.random::<f64>() < gamma {
                        self.uniform_index()
                    } else {
                        argmin_random_tie(&scores, &mut self.tie_rng)
                    }
                }
            }
            PolicyKind::Fixed(a) => self.action_ids.iter().position(|x| x == a).expect("checked at construction"),
            PolicyKind::UniformRandom => self.uniform_index(),
            PolicyKind::PopulationMajority(members) => {
                population_majority_select(members, context, region, &mut self.tie_rng)?
            }
            PolicyKind::OracleOptimal(profile) => {
                let region = region.ok_or(PolicyError::MissingRegion)?;
                oracle_select(profile, &self.action_ids, &self.costs, self.objective, region, &mut self.tie_rng)?
            }
        };
        self.pending = Some(choice);
        Ok(choice)
    }

    /// Absorbs the decision-maker's answer to the pending trial.
    pub fn record_outcome(
        &mut self,
        item: &TaskItem,
        action_id: &str,
        human_label: usize,
    ) -> Result<&InteractionRecord, PolicyError> {
        if self.is_exhausted() {
            return Err(PolicyError::SessionExhausted { horizon: self.horizon });
        }
        let expected = self.pending.map(|i| self.action_ids[i].clone());
        let index = match self.pending {
            Some(i) if self.action_ids[i] == action_id => i,
            _ => return Err(PolicyError::ActionMismatch { expected, got: action_id.to_owned() }),
        };
        self.check_dim(item.context.as_slice())?;
        let loss = zero_one_loss(item.true_label, human_label, self.dataset.label_count)?;

        let action = &self.dataset.actions[index];
        let support_label = if action.kind == SupportKind::NoSupport {
            None
        } else {
            item.payloads.get(action_id).and_then(|p| p.support_label())
        };

        match &mut self.estimator {
            EstimatorState::LinUcb(state) => {
                let x = normalize_context(&item.context)?;
                state.update_at(index, x.as_slice(), loss)?;
            }
            EstimatorState::Knn(buffer) => buffer.push(item.context.as_slice(), index, loss)?,
            EstimatorState::Stateless => {}
        }

        self.pending = None;
        let t = self.t();
        self.log.push(InteractionRecord {
            t,
            item_id: item.item_id.clone(),
            action_id: action_id.to_owned(),
            human_label,
            loss,
            support_was_correct: support_label.map(|l| l == item.true_label),
            support_label,
        });
        Ok(self.log.last().expect("just pushed"))
    }

    /// Greedy copy of the current policy: no confidence bonus, no warm-up,
    /// no γ-mixing.
    pub fn freeze(&self) -> PolicySnapshot {
        let backend = match (&self.kind, &self.estimator) {
            (_, EstimatorState::LinUcb(state)) => SnapshotBackend::LinUcb { state: state.clone() },
            (_, EstimatorState::Knn(buffer)) => SnapshotBackend::Knn { buffer: buffer.clone() },
            (PolicyKind::Fixed(a), _) => SnapshotBackend::Fixed {
                action: self.action_ids.iter().position(|x| x == a).expect("checked at construction"),
            },
            (PolicyKind::PopulationMajority(members), _) => SnapshotBackend::Population { members: members.clone() },
            (PolicyKind::OracleOptimal(profile), _) => SnapshotBackend::Oracle { profile: profile.clone() },
            _ => SnapshotBackend::Uniform,
        };
        PolicySnapshot {
            policy_kind: self.kind.label(),
            lambda: self.objective.lambda(),
            objective: self.objective,
            t: self.log.len(),
            action_ids: self.action_ids.clone(),
            costs: self.costs.clone(),
            tie_seed: rng::derive_seed(self.seed, &[Stream::TieBreak as u64]),
            backend,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SnapshotBackend {
    LinUcb { state: LinUcbState },
    Knn { buffer: KnnBuffer },
    Fixed { action: usize },
    Uniform,
    Oracle { profile: ExpertiseProfile },
    Population { members: Vec<PolicySnapshot> },
}

/// A frozen policy, evaluable at any input.
///
/// Learned policies are greedy: the action minimizing the objective over the
/// current estimates. Several minimizers share the probability mass evenly,
/// and [`PolicySnapshot::choose`] picks one of them deterministically from
/// the tie seed and the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub policy_kind: String,
    pub lambda: f64,
    pub objective: Objective,
    pub t: usize,
    pub action_ids: Vec<String>,
    pub costs: Vec<f64>,
    pub tie_seed: u64,
    pub backend: SnapshotBackend,
}

impl PolicySnapshot {
    fn bare(policy_kind: String, action_ids: Vec<String>, costs: Vec<f64>, objective: Objective, backend: SnapshotBackend) -> Self {
        Self { policy_kind, lambda: objective.lambda(), objective, t: 0, action_ids, costs, tie_seed: 0, backend }
    }

    pub fn fixed(dataset: &TaskDataset, action: &str) -> Result<Self, PolicyError> {
        let index = dataset.action_index(action).ok_or_else(|| PolicyError::UnknownAction(action.to_owned()))?;
        Ok(Self::bare(
            format!("fixed:{action}"),
            dataset.action_ids(),
            dataset.costs(),
            Objective::LossOnly,
            SnapshotBackend::Fixed { action: index },
        ))
    }

    pub fn uniform(dataset: &TaskDataset) -> Self {
        Self::bare("random".into(), dataset.action_ids(), dataset.costs(), Objective::LossOnly, SnapshotBackend::Uniform)
    }

    pub fn oracle(dataset: &TaskDataset, profile: ExpertiseProfile, objective: Objective) -> Self {
        Self::bare("oracle".into(), dataset.action_ids(), dataset.costs(), objective, SnapshotBackend::Oracle { profile })
    }

    pub fn population(members: Vec<PolicySnapshot>, tie_seed: u64) -> Result<Self, PolicyError> {
        let first = members.first().ok_or(PolicyError::EmptyPolicyList)?;
        if members.iter().any(|m| m.action_ids != first.action_ids) {
            return Err(PolicyError::ActionSetMismatch);
        }
        let mut s = Self::bare(
            "population".into(),
            first.action_ids.clone(),
            first.costs.clone(),
            first.objective,
            SnapshotBackend::Population { members: Vec::new() },
        );
        s.tie_seed = tie_seed;
        s.backend = SnapshotBackend::Population { members };
        Ok(s)
    }

    pub fn with_costs(mut self, costs: Vec<f64>) -> Self {
        self.costs = costs;
        self
    }

    /// Greedy objective per action, for the backends that have one.
    pub fn scores(&self, x: &[f64], region: Option<&str>) -> Result<Option<Vec<f64>>, PolicyError> {
        let scores = match &self.backend {
            SnapshotBackend::LinUcb { state } => {
                let x = normalize_context(&ContextVector(x.to_vec()))?;
                let est = state.estimate_all(x.as_slice())?;
                est.iter().zip(&self.costs).map(|(e, c)| self.objective.score(e.r_hat, *c)).collect()
            }
            SnapshotBackend::Knn { buffer } => {
                let est = buffer.estimate(x)?;
                est.iter().zip(&self.costs).map(|(e, c)| self.objective.score(e.r_hat, *c)).collect()
            }
            SnapshotBackend::Oracle { profile } => {
                let region = region.ok_or(PolicyError::MissingRegion)?;
                profile
                    .region_rates(&self.action_ids, region)?
                    .iter()
                    .zip(&self.costs)
                    .map(|(r, c)| self.objective.score(*r, *c))
                    .collect()
            }
            _ => return Ok(None),
        };
        Ok(Some(scores))
    }

    /// Actions this policy may take at `x`, each equally likely.
    pub fn support(&self, x: &[f64], region: Option<&str>) -> Result<Vec<usize>, PolicyError> {
        if let Some(scores) = self.scores(x, region)? {
            return Ok(argmin_set(&scores));
        }
        Ok(match &self.backend {
            SnapshotBackend::Fixed { action } => vec![*action],
            SnapshotBackend::Uniform => (0..self.action_ids.len()).collect(),
            SnapshotBackend::Population { members } => plurality(members, x, region, self.action_ids.len())?,
            _ => unreachable!("scored backends handled above"),
        })
    }

    /// `π(x)` as a probability vector over actions.
    pub fn distribution(&self, x: &[f64], region: Option<&str>) -> Result<Vec<f64>, PolicyError> {
        let support = self.support(x, region)?;
        let mut p = vec![0.0; self.action_ids.len()];
        let mass = 1.0 / support.len() as f64;
        for a in support {
            p[a] = mass;
        }
        Ok(p)
    }

    /// A single action, reproducible for a given input.
    pub fn choose(&self, x: &[f64], region: Option<&str>) -> Result<usize, PolicyError> {
        let support = self.support(x, region)?;
        if support.len() == 1 {
            return Ok(support[0]);
        }
        let mut rng = rng::query_rng(self.tie_seed, x);
        Ok(support[rng.random_range(0..support.len())])
    }

    pub fn choose_id(&self, x: &[f64], region: Option<&str>) -> Result<&str, PolicyError> {
        self.choose(x, region).map(|i| self.action_ids[i].as_str())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("snapshot serializes")
    }
}

fn tally(members: &[PolicySnapshot], x: &[f64], region: Option<&str>, n_actions: usize) -> Result<Vec<usize>, PolicyError> {
    let mut votes = vec![0usize; n_actions];
    for m in members {
        let a = m.choose(x, region)?;
        *votes.get_mut(a).ok_or(PolicyError::ActionSetMismatch)? += 1;
    }
    Ok(votes)
}

fn plurality(members: &[PolicySnapshot], x: &[f64], region: Option<&str>, n_actions: usize) -> Result<Vec<usize>, PolicyError> {
    let votes = tally(members, x, region, n_actions)?;
    let top = votes.iter().copied().max().unwrap_or(0);
    Ok((0..n_actions).filter(|&a| votes[a] == top).collect())
}

/// Plurality vote of frozen policies at `x`; ties resolved from `rng`.
pub fn population_majority_select(
    policies: &[PolicySnapshot],
    x: &[f64],
    region: Option<&str>,
    rng: &mut impl Rng,
) -> Result<usize, PolicyError> {
    let first = policies.first().ok_or(PolicyError::EmptyPolicyList)?;
    let winners = plurality(policies, x, region, first.action_ids.len())?;
    Ok(if winners.len() == 1 { winners[0] } else { winners[rng.random_range(0..winners.len())] })
}

/// Exact `argmin_a λ·r_a(region) + (1−λ)·c(a)` from the true profile.
pub fn oracle_select(
    profile: &ExpertiseProfile,
    action_ids: &[String],
    costs: &[f64],
    objective: Objective,
    region: &str,
    rng: &mut impl Rng,
) -> Result<usize, PolicyError> {
    let scores: Vec<f64> = profile
        .region_rates(action_ids, region)?
        .iter()
        .zip(costs)
        .map(|(r, c)| objective.score(*r, *c))
        .collect();
    Ok(argmin_random_tie(&scores, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Payload, SupportAction};
    use rand::SeedableRng;
    use std::collections::BTreeMap;

    fn dataset(costs: [f64; 2]) -> Arc<TaskDataset> {
        let items = (0..6)
            .map(|i| TaskItem {
                item_id: format!("i{i}"),
                context: ContextVector(vec![i as f64 * 0.1, 1.0 - i as f64 * 0.1]),
                true_label: i % 2,
                region: if i < 3 { "r0".into() } else { "r1".into() },
                payloads: BTreeMap::from([("model".to_string(), Payload::Label { value: 0 })]),
                stimulus: None,
            })
            .collect();
        Arc::new(TaskDataset {
            name: "toy".into(),
            label_count: 2,
            label_names: vec![],
            actions: vec![
                SupportAction { action_id: "alone".into(), kind: SupportKind::NoSupport, cost: costs[0] },
                SupportAction { action_id: "model".into(), kind: SupportKind::ModelPrediction, cost: costs[1] },
            ],
            regions: vec!["r0".into(), "r1".into()],
            items,
            min_display_ms: None,
        })
    }

    fn session(kind: PolicyKind, objective: Objective, params: EngineParams, horizon: usize, seed: u64) -> ThreadSession {
        ThreadSession::new(dataset([0.2, 0.7]), kind, objective, params, horizon, seed).unwrap()
    }

    fn knn_params(warmup: usize, gamma: f64) -> EngineParams {
        EngineParams { warmup, gamma, ..EngineParams::default() }
    }

    #[test]
    fn warmup_choice_is_reproducible() {
        let pick = |seed| {
            let mut s = session(PolicyKind::ThreadKnn, Objective::LossOnly, EngineParams::default(), 10, seed);
            s.select_support(&[0.1, 0.2], None).unwrap()
        };
        assert_eq!(pick(5), pick(5));
        let distinct: std::collections::BTreeSet<String> = (0..40).map(pick).collect();
        assert_eq!(distinct.len(), 2);
    }

    #[test]
    fn cost_only_objective_picks_cheapest() {
        let mut s = session(PolicyKind::ThreadKnn, Objective::Scalarized { lambda: 0.0 }, knn_params(0, 0.0), 50, 3);
        let ds = s.dataset().clone();
        for t in 0..30 {
            let item = &ds.items[t % 6];
            let a = s.select_support(item.context.as_slice(), None).unwrap();
            assert_eq!(a, "alone");
            s.record_outcome(item, &a, (t * 7) % 2).unwrap();
        }
    }

    #[test]
    fn loss_objective_follows_knn_estimates() {
        let mut s = session(PolicyKind::ThreadKnn, Objective::Scalarized { lambda: 1.0 }, knn_params(0, 0.0), 50, 3);
        if let EstimatorState::Knn(b) = &mut s.estimator {
            b.push(&[0.0, 0.0], 0, 1).unwrap();
            b.push(&[0.1, 0.0], 0, 0).unwrap();
            b.push(&[0.0, 0.1], 1, 1).unwrap();
        }
        s.costs = vec![0.5, 0.5];
        for _ in 0..20 {
            assert_eq!(s.select_support(&[0.05, 0.05], None).unwrap(), "alone");
        }
    }

    #[test]
    fn outcome_bookkeeping() {
        let mut s = session(PolicyKind::ThreadLinUcb, Objective::LossOnly, EngineParams::default(), 3, 1);
        let ds = s.dataset().clone();
        let item = &ds.items[1];
        let a = s.select_support(item.context.as_slice(), None).unwrap();
        let idx = s.action_ids().iter().position(|x| *x == a).unwrap();
        let rec = s.record_outcome(item, &a, item.true_label).unwrap().clone();
        assert_eq!(rec.loss, 0);
        assert_eq!(rec.t, 1);
        let EstimatorState::LinUcb(state) = s.estimator() else { panic!() };
        assert!(state.arm(idx).response().iter().all(|v| *v == 0.0));

        let a = s.select_support(item.context.as_slice(), None).unwrap();
        let rec = s.record_outcome(item, &a, 1 - item.true_label).unwrap();
        assert_eq!(rec.loss, 1);
        assert_eq!(s.log().len(), 2);
        assert_eq!(s.t(), 3);
    }

    #[test]
    fn knn_buffer_grows_by_one_per_outcome() {
        let mut s = session(PolicyKind::ThreadKnn, Objective::LossOnly, EngineParams::default(), 5, 2);
        let ds = s.dataset().clone();
        let a = s.select_support(ds.items[0].context.as_slice(), None).unwrap();
        s.record_outcome(&ds.items[0], &a, 1).unwrap();
        let EstimatorState::Knn(b) = s.estimator() else { panic!() };
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn exhaustion_after_horizon() {
        let mut s = session(PolicyKind::UniformRandom, Objective::LossOnly, EngineParams::default(), 100, 9);
        let ds = s.dataset().clone();
        for t in 0..100 {
            let item = &ds.items[t % 6];
            let a = s.select_support(item.context.as_slice(), None).unwrap();
            s.record_outcome(item, &a, 0).unwrap();
        }
        assert!(matches!(s.select_support(&[0.0, 0.0], None), Err(PolicyError::SessionExhausted { .. })));
        assert!(matches!(s.record_outcome(&ds.items[0], "alone", 0), Err(PolicyError::SessionExhausted { .. })));
    }

    #[test]
    fn outcome_must_match_selection() {
        let mut s = session(PolicyKind::Fixed("model".into()), Objective::LossOnly, EngineParams::default(), 5, 0);
        let ds = s.dataset().clone();
        assert!(matches!(s.record_outcome(&ds.items[0], "model", 0), Err(PolicyError::ActionMismatch { .. })));
        s.select_support(ds.items[0].context.as_slice(), None).unwrap();
        assert!(matches!(s.record_outcome(&ds.items[0], "alone", 0), Err(PolicyError::ActionMismatch { .. })));
        let rec = s.record_outcome(&ds.items[0], "model", 0).unwrap();
        assert_eq!(rec.support_was_correct, Some(true));
    }

    #[test]
    fn no_support_records_have_no_support_correctness() {
        let mut s = session(PolicyKind::Fixed("alone".into()), Objective::LossOnly, EngineParams::default(), 5, 0);
        let ds = s.dataset().clone();
        s.select_support(ds.items[1].context.as_slice(), None).unwrap();
        let rec = s.record_outcome(&ds.items[1], "alone", 0).unwrap();
        assert_eq!(rec.support_was_correct, None);
        assert_eq!(rec.loss, 1);
    }

    fn fixed_snapshot(action: usize, seed: u64) -> PolicySnapshot {
        let mut s = PolicySnapshot::fixed(&dataset([0.0, 0.0]), if action == 0 { "alone" } else { "model" }).unwrap();
        s.tie_seed = seed;
        s
    }

    #[test]
    fn majority_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ten: Vec<_> = (0..10).map(|i| fixed_snapshot(usize::from(i >= 6), i)).collect();
        assert_eq!(population_majority_select(&ten, &[0.0, 0.0], None, &mut rng).unwrap(), 0);

        let split: Vec<_> = (0..10).map(|i| fixed_snapshot(usize::from(i >= 5), i)).collect();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            population_majority_select(&split, &[0.0, 0.0], None, &mut rng).unwrap()
        };
        assert_eq!(draw(4), draw(4));
        let seen: std::collections::BTreeSet<usize> = (0..30).map(draw).collect();
        assert_eq!(seen.len(), 2);

        let one = vec![fixed_snapshot(1, 0)];
        assert_eq!(population_majority_select(&one, &[0.0, 0.0], None, &mut rng).unwrap(), 1);
        assert_eq!(population_majority_select(&[], &[0.0, 0.0], None, &mut rng), Err(PolicyError::EmptyPolicyList));
    }

    #[test]
    fn oracle_examples() {
        let profile = ExpertiseProfile::from_rows(&["a1", "a2"], &["x1", "x2", "x3"], &[&[0.7, 0.1, 0.7], &[0.1, 0.7, 0.1]]).unwrap();
        let ids = vec!["a1".to_string(), "a2".to_string()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(oracle_select(&profile, &ids, &[0.0, 0.0], Objective::Scalarized { lambda: 1.0 }, "x1", &mut rng).unwrap(), 1);
        for region in ["x1", "x2", "x3"] {
            assert_eq!(oracle_select(&profile, &ids, &[0.0, 0.4], Objective::Scalarized { lambda: 0.0 }, region, &mut rng).unwrap(), 0);
        }
        let flat = ExpertiseProfile::from_rows(&["a1", "a2"], &["x"], &[&[0.3], &[0.3]]).unwrap();
        let seen: std::collections::BTreeSet<usize> = (0..40)
            .map(|_| oracle_select(&flat, &ids, &[0.1, 0.1], Objective::LossOnly, "x", &mut rng).unwrap())
            .collect();
        assert_eq!(seen.len(), 2);
        assert!(matches!(
            oracle_select(&profile, &ids, &[0.0, 0.0], Objective::LossOnly, "nowhere", &mut rng),
            Err(PolicyError::Simulator(SimError::UnknownRegion(_)))
        ));
    }

    #[test]
    fn fresh_knn_snapshot_is_all_ties() {
        let s = session(PolicyKind::ThreadKnn, Objective::LossOnly, EngineParams::default(), 10, 11);
        let snap = s.freeze();
        assert_eq!(snap.t, 0);
        assert_eq!(snap.distribution(&[0.3, 0.3], None).unwrap(), vec![0.5, 0.5]);
        let a = snap.choose(&[0.3, 0.3], None).unwrap();
        assert_eq!(snap.choose(&[0.3, 0.3], None).unwrap(), a);
    }

    #[test]
    fn snapshot_json_round_trip() {
        let mut s = session(PolicyKind::ThreadLinUcb, Objective::Scalarized { lambda: 0.4 }, EngineParams::default(), 10, 4);
        let ds = s.dataset().clone();
        for item in ds.items.iter().take(4) {
            let a = s.select_support(item.context.as_slice(), None).unwrap();
            s.record_outcome(item, &a, 0).unwrap();
        }
        let snap = s.freeze();
        let json = snap.to_json();
        assert_eq!(json["policy_kind"], "thread-linucb");
        assert_eq!(json["lambda"], 0.4);
        assert_eq!(json["t"], 4);
        let back: PolicySnapshot = serde_json::from_value(json).unwrap();
        assert_eq!(back, snap);
    }

    #[test]
    fn parse_policy_names() {
        assert_eq!(PolicyKind::parse("thread-knn").unwrap(), PolicyKind::ThreadKnn);
        assert_eq!(PolicyKind::parse("fixed:model").unwrap(), PolicyKind::Fixed("model".into()));
        assert!(PolicyKind::parse("fixed:").is_err());
        assert!(PolicyKind::parse("bogus").is_err());
    }
}
