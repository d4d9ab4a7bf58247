//! One simulated interaction run: a policy against a synthetic
//! decision-maker, with per-step evaluation of the frozen policy.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::evaluation::{expected_cost, expected_loss, trailing_mean, EvalError, EvaluationSet};
use crate::model::{InteractionRecord, TaskDataset};
use crate::policy::{EngineParams, Objective, PolicyError, PolicyKind, PolicySnapshot, ThreadSession};
use crate::rng::{self, Stream};
use crate::simulator::{optimal_loss, ExpertiseProfile, SimError, SyntheticDecisionMaker};

use super::EvalProtocol;

#[derive(Debug, thiserror::Error)]
pub enum SimulationError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Simulator(#[from] SimError),
    #[error("no training items to sample from")]
    NoTrainingItems,
}

/// Everything a run needs besides the policy.
#[derive(Debug, Clone, Copy)]
pub struct RunSetup<'a> {
    pub dataset: &'a Arc<TaskDataset>,
    /// Indices of the items inputs are drawn from, with replacement.
    pub train: &'a [usize],
    pub eval: &'a EvaluationSet,
    pub profile: &'a ExpertiseProfile,
}

#[derive(Debug, Clone)]
pub struct RunParams {
    pub kind: PolicyKind,
    pub objective: Objective,
    pub engine: EngineParams,
    pub horizon: usize,
    /// Seeds the policy's and the decision-maker's streams.
    pub seed: u64,
    /// Seeds the input stream; shared across policies for paired comparisons.
    pub item_seed: u64,
    pub protocol: EvalProtocol,
    pub window: usize,
    /// Evaluate every step instead of only the steps the metric needs.
    pub full_curve: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub t: usize,
    pub expected_loss: f64,
    pub expected_cost: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<InteractionRecord>,
    pub curve: Vec<CurvePoint>,
    pub final_snapshot: PolicySnapshot,
    /// Protocol metric: trailing-window mean, or the final policy on the
    /// held-out set.
    pub expected_loss: f64,
    pub expected_cost: f64,
    pub optimal_loss: f64,
}

impl RunOutcome {
    pub fn excess_loss(&self) -> f64 {
        self.expected_loss - self.optimal_loss
    }
}

fn is_learning(kind: &PolicyKind) -> bool {
    matches!(kind, PolicyKind::ThreadKnn | PolicyKind::ThreadLinUcb)
}

pub fn simulate(setup: RunSetup<'_>, params: &RunParams) -> Result<RunOutcome, SimulationError> {
    if setup.train.is_empty() {
        return Err(SimulationError::NoTrainingItems);
    }
    let dataset = setup.dataset;
    let mut session = ThreadSession::new(
        dataset.clone(),
        params.kind.clone(),
        params.objective,
        params.engine,
        params.horizon,
        params.seed,
    )?;
    let mut dm = SyntheticDecisionMaker::new(
        setup.profile.clone(),
        dataset.label_count,
        rng::stream(params.seed, Stream::Simulator),
    )?;
    let mut items = rng::stream(params.item_seed, Stream::ItemSampling);
    let action_ids = dataset.action_ids();
    let learning = is_learning(&params.kind);

    let horizon = params.horizon;
    let needed = |t: usize| {
        params.full_curve
            || match params.protocol {
                EvalProtocol::Trailing => t + params.window > horizon,
                EvalProtocol::Heldout => t == horizon,
            }
    };
    let evaluate = |snap: &PolicySnapshot| -> Result<(f64, f64), EvalError> {
        Ok((expected_loss(snap, setup.profile, setup.eval)?, expected_cost(snap, &dataset.actions, setup.eval)?))
    };

    let mut curve = Vec::new();
    let mut fixed_metrics = None;
    for t in 1..=horizon {
        let item = &dataset.items[setup.train[items.random_range(0..setup.train.len())]];
        let a = session.select_index(item.context.as_slice(), Some(&item.region))?;
        let (label, _) = dm.decide(item, &action_ids[a])?;
        session.record_outcome(item, &action_ids[a], label)?;
        if needed(t) {
            let (l, c) = match fixed_metrics {
                Some(m) if !learning => m,
                _ => {
                    let m = evaluate(&session.freeze())?;
                    fixed_metrics = Some(m);
                    m
                }
            };
            curve.push(CurvePoint { t, expected_loss: l, expected_cost: c });
        }
    }

    let final_snapshot = session.freeze();
    let (expected_loss, expected_cost) = match params.protocol {
        EvalProtocol::Trailing => {
            let losses: Vec<f64> = curve.iter().map(|p| p.expected_loss).collect();
            let costs: Vec<f64> = curve.iter().map(|p| p.expected_cost).collect();
            (trailing_mean(&losses, params.window)?, trailing_mean(&costs, params.window)?)
        }
        EvalProtocol::Heldout => {
            let last = curve.last().expect("horizon is at least 1");
            (last.expected_loss, last.expected_cost)
        }
    };
    Ok(RunOutcome {
        records: session.log().to_vec(),
        curve,
        final_snapshot,
        expected_loss,
        expected_cost,
        optimal_loss: optimal_loss(setup.profile, &setup.eval.region_weights())?,
    })
}
