//! Trade-off sweeps over a simulator population and the strategies that
//! turn a sweep into one deployable λ.
//!
//! A cell `(j, λ)` is feasible when the learned policy's loss against
//! simulator `j` stays within ε of that simulator's optimum.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::EvaluationSet;
use crate::experiment::{run_seeds, simulate, EvalProtocol, RunParams, RunSetup, SimulationError};
use crate::model::TaskDataset;
use crate::policy::{EngineParams, Objective, PolicyKind};
use crate::simulator::ExpertiseProfile;

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_GRID_STEP: f64 = 0.05;

#[derive(Debug, Error)]
pub enum TuningError {
    #[error("population is empty")]
    EmptyPopulation,
    #[error("λ grid is empty")]
    EmptyGrid,
    #[error("no seeds given")]
    NoSeeds,
    #[error("invalid grid step {0}")]
    InvalidStep(f64),
    #[error("sweep is malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
}

/// `0, step, 2·step, …, 1`.
pub fn lambda_grid(step: f64) -> Result<Vec<f64>, TuningError> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(TuningError::InvalidStep(step));
    }
    let n = (1.0 / step).round() as usize;
    if ((n as f64) * step - 1.0).abs() > 1e-9 {
        return Err(TuningError::InvalidStep(step));
    }
    Ok((0..=n).map(|i| i as f64 / n as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// A: the λ feasible for the most simulators.
    MostLikely,
    /// B: the most common cheapest-feasible λ.
    MostLikelyLowestCost,
    /// C: the largest per-simulator minimum feasible λ.
    Conservative,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::MostLikely, Strategy::MostLikelyLowestCost, Strategy::Conservative];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "A" | "a" => Some(Strategy::MostLikely),
            "B" | "b" => Some(Strategy::MostLikelyLowestCost),
            "C" | "c" => Some(Strategy::Conservative),
            _ => None,
        }
    }

    pub fn letter(self) -> &'static str {
        match self {
            Strategy::MostLikely => "A",
            Strategy::MostLikelyLowestCost => "B",
            Strategy::Conservative => "C",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub simulator: usize,
    pub lambda: f64,
    pub expected_loss: f64,
    pub expected_cost: f64,
    pub feasible: bool,
}

/// Metrics for every (simulator, λ) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: Vec<f64>,
    pub epsilon: f64,
    pub simulators: Vec<String>,
    pub optimal_loss: Vec<f64>,
    /// Simulator-major, grid-minor.
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    /// Builds a sweep from `losses[j][i]` and `costs[j][i]`, deriving
    /// feasibility from the optimum and ε.
    pub fn from_metrics(
        grid: Vec<f64>,
        epsilon: f64,
        simulators: Vec<String>,
        optimal_loss: Vec<f64>,
        losses: &[Vec<f64>],
        costs: &[Vec<f64>],
    ) -> Result<Self, TuningError> {
        if grid.is_empty() {
            return Err(TuningError::EmptyGrid);
        }
        if simulators.is_empty() {
            return Err(TuningError::EmptyPopulation);
        }
        let shape_ok = optimal_loss.len() == simulators.len()
            && losses.len() == simulators.len()
            && costs.len() == simulators.len()
            && losses.iter().chain(costs).all(|row| row.len() == grid.len());
        if !shape_ok {
            return Err(TuningError::Malformed("metrics do not match the grid and population".into()));
        }
        let mut cells = Vec::with_capacity(simulators.len() * grid.len());
        for j in 0..simulators.len() {
            for (i, &lambda) in grid.iter().enumerate() {
                cells.push(SweepCell {
                    simulator: j,
                    lambda,
                    expected_loss: losses[j][i],
                    expected_cost: costs[j][i],
                    feasible: losses[j][i] <= optimal_loss[j] + epsilon,
                });
            }
        }
        Ok(Self { grid, epsilon, simulators, optimal_loss, cells })
    }

    pub fn cell(&self, simulator: usize, grid_index: usize) -> &SweepCell {
        &self.cells[simulator * self.grid.len() + grid_index]
    }

    fn row(&self, simulator: usize) -> &[SweepCell] {
        let n = self.grid.len();
        &self.cells[simulator * n..(simulator + 1) * n]
    }

    /// Grid indices of the feasible λ values for one simulator.
    pub fn feasible(&self, simulator: usize) -> Vec<usize> {
        self.row(simulator).iter().enumerate().filter(|(_, c)| c.feasible).map(|(i, _)| i).collect()
    }

    /// Index of the λ whose loss is closest to the optimum; ties go to the
    /// larger λ.
    fn closest_to_optimum(&self, simulator: usize) -> usize {
        let opt = self.optimal_loss[simulator];
        let mut best = 0;
        for (i, c) in self.row(simulator).iter().enumerate() {
            let gap = (c.expected_loss - opt).abs();
            if gap <= (self.row(simulator)[best].expected_loss - opt).abs() {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub simulator: String,
    pub lambdas: Vec<f64>,
    /// The vote came from a fallback rather than the feasible set.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub strategy: Strategy,
    pub lambda: f64,
    /// No simulator contributed a vote and λ = 1 was used.
    pub fallback: bool,
    pub votes: Vec<Vote>,
    /// Simulators without any feasible λ that did not vote.
    pub skipped: Vec<String>,
}

/// Most frequent index; ties go to the smallest.
fn mode(indices: impl IntoIterator<Item = usize>) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for i in indices {
        *counts.entry(i).or_default() += 1;
    }
    let top = counts.values().copied().max()?;
    counts.into_iter().find(|(_, c)| *c == top).map(|(i, _)| i)
}

pub fn select_lambda(strategy: Strategy, sweep: &SweepResult) -> Selection {
    let mut votes = Vec::new();
    let mut skipped = Vec::new();
    let mut ballot: Vec<usize> = Vec::new();
    for j in 0..sweep.simulators.len() {
        let feasible = sweep.feasible(j);
        let name = sweep.simulators[j].clone();
        let (chosen, fallback) = match strategy {
            Strategy::MostLikely if feasible.is_empty() => (vec![sweep.closest_to_optimum(j)], true),
            Strategy::MostLikely => (feasible, false),
            _ if feasible.is_empty() => {
                skipped.push(name);
                continue;
            }
            Strategy::MostLikelyLowestCost => {
                let cheapest = feasible
                    .iter()
                    .copied()
                    .min_by(|&a, &b| sweep.cell(j, a).expected_cost.total_cmp(&sweep.cell(j, b).expected_cost).then(a.cmp(&b)))
                    .expect("non-empty");
                (vec![cheapest], false)
            }
            Strategy::Conservative => (vec![feasible[0]], false),
        };
        ballot.extend(&chosen);
        votes.push(Vote { simulator: name, lambdas: chosen.iter().map(|&i| sweep.grid[i]).collect(), fallback });
    }
    let picked = match strategy {
        Strategy::Conservative => ballot.iter().copied().max(),
        _ => mode(ballot.iter().copied()),
    };
    let (lambda, fallback) = match picked {
        Some(i) => (sweep.grid[i], false),
        None => (1.0, true),
    };
    Selection { strategy, lambda, fallback, votes, skipped }
}

/// How each sweep cell is learned and scored.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub kind: PolicyKind,
    pub engine: EngineParams,
    pub horizon: usize,
    pub window: usize,
    pub seeds: Vec<u64>,
    pub epsilon: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::ThreadKnn,
            engine: EngineParams::default(),
            horizon: 100,
            window: 10,
            seeds: (0..5).collect(),
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Learns a policy for every (simulator, λ, seed) and scores it with the
/// trailing-window loss over the whole dataset; metrics are averaged over
/// seeds.
pub fn sweep_lambda(
    dataset: &Arc<TaskDataset>,
    population: &[ExpertiseProfile],
    grid: &[f64],
    cfg: &SweepConfig,
) -> Result<SweepResult, TuningError> {
    if population.is_empty() {
        return Err(TuningError::EmptyPopulation);
    }
    if grid.is_empty() {
        return Err(TuningError::EmptyGrid);
    }
    if cfg.seeds.is_empty() {
        return Err(TuningError::NoSeeds);
    }
    let train: Vec<usize> = (0..dataset.items.len()).collect();
    let eval = EvaluationSet::uniform(dataset.items.clone()).map_err(|e| TuningError::Malformed(e.to_string()))?;

    let jobs: Vec<(usize, usize, u64)> = (0..population.len())
        .flat_map(|j| (0..grid.len()).flat_map(move |i| cfg.seeds.iter().map(move |&s| (j, i, s))))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(j, i, seed)| {
            let (session_seed, item_seed) = run_seeds(seed, j);
            let params = RunParams {
                kind: cfg.kind.clone(),
                objective: Objective::Scalarized { lambda: grid[i] },
                engine: cfg.engine,
                horizon: cfg.horizon,
                seed: session_seed,
                item_seed,
                protocol: EvalProtocol::Trailing,
                window: cfg.window,
                full_curve: false,
            };
            let setup = RunSetup { dataset, train: &train, eval: &eval, profile: &population[j] };
            simulate(setup, &params)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let n_seeds = cfg.seeds.len();
    let mut losses = vec![vec![0.0; grid.len()]; population.len()];
    let mut costs = vec![vec![0.0; grid.len()]; population.len()];
    let mut optimal = vec![0.0; population.len()];
    for (&(j, i, _), out) in jobs.iter().zip(&results) {
        losses[j][i] += out.expected_loss / n_seeds as f64;
        costs[j][i] += out.expected_cost / n_seeds as f64;
        optimal[j] = out.optimal_loss;
    }
    let names = population.iter().enumerate().map(|(j, p)| p.label(j)).collect();
    SweepResult::from_metrics(grid.to_vec(), cfg.epsilon, names, optimal, &losses, &costs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};

    /// A sweep over grid {0.6, 0.8, 1.0} with the given feasible sets; costs
    /// fall as λ falls.
    fn fixture(feasible: &[&[f64]], cost_of: impl Fn(usize, f64) -> f64) -> SweepResult {
        let grid = vec![0.6, 0.8, 1.0];
        let losses: Vec<Vec<f64>> = feasible
            .iter()
            .map(|set| grid.iter().map(|l| if set.contains(l) { 0.1 } else { 0.5 }).collect())
            .collect();
        let costs: Vec<Vec<f64>> = (0..feasible.len()).map(|j| grid.iter().map(|&l| cost_of(j, l)).collect()).collect();
        let names = (0..feasible.len()).map(|j| format!("sim-{j}")).collect();
        SweepResult::from_metrics(grid, 0.05, names, vec![0.1; feasible.len()], &losses, &costs).unwrap()
    }

    #[test]
    fn strategy_a_example() {
        let sweep = fixture(&[&[0.6, 0.8], &[0.8], &[0.8, 1.0]], |_, l| l);
        assert_eq!(select_lambda(Strategy::MostLikely, &sweep).lambda, 0.8);
    }

    #[test]
    fn strategy_b_example() {
        let sweep = fixture(&[&[0.6, 1.0], &[0.6, 0.8], &[0.8, 1.0]], |_, l| l);
        let sel = select_lambda(Strategy::MostLikelyLowestCost, &sweep);
        let cheapest: Vec<f64> = sel.votes.iter().map(|v| v.lambdas[0]).collect();
        assert_eq!(cheapest, vec![0.6, 0.6, 0.8]);
        assert_eq!(sel.lambda, 0.6);
    }

    #[test]
    fn strategy_c_example() {
        let sweep = fixture(&[&[0.6, 0.8, 1.0], &[0.8, 1.0], &[0.8]], |_, l| l);
        let sel = select_lambda(Strategy::Conservative, &sweep);
        assert_eq!(sel.lambda, 0.8);
        assert!(!sel.fallback);
    }

    #[test]
    fn conservative_skips_and_falls_back() {
        let sweep = fixture(&[&[0.6], &[]], |_, l| l);
        let sel = select_lambda(Strategy::Conservative, &sweep);
        assert_eq!(sel.lambda, 0.6);
        assert_eq!(sel.skipped, vec!["sim-1".to_string()]);
        let none = fixture(&[&[], &[]], |_, l| l);
        let sel = select_lambda(Strategy::Conservative, &none);
        assert_eq!(sel.lambda, 1.0);
        assert!(sel.fallback);
    }

    #[test]
    fn most_likely_fallback_uses_closest_loss() {
        let grid = vec![0.0, 0.5, 1.0];
        let sweep = SweepResult::from_metrics(grid, 0.0, vec!["s".into()], vec![0.1], &[vec![0.5, 0.3, 0.3]], &[vec![0.0; 3]]).unwrap();
        let sel = select_lambda(Strategy::MostLikely, &sweep);
        assert_eq!(sel.lambda, 1.0);
        assert!(sel.votes[0].fallback);
    }

    #[test]
    fn mode_ties_go_to_smaller_lambda() {
        let sweep = fixture(&[&[0.6], &[1.0]], |_, l| l);
        assert_eq!(select_lambda(Strategy::MostLikely, &sweep).lambda, 0.6);
        assert_eq!(select_lambda(Strategy::MostLikelyLowestCost, &sweep).lambda, 0.6);
    }

    #[test]
    fn grid_shape() {
        let g = lambda_grid(0.05).unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[20], 1.0);
        assert!((g[7] - 0.35).abs() < 1e-15);
        assert_eq!(lambda_grid(1.0).unwrap(), vec![0.0, 1.0]);
        assert!(lambda_grid(0.3).is_err());
        assert!(lambda_grid(0.0).is_err());
    }

    proptest! {
        #[test]
        fn conservative_covers_every_minimum(table in prop::collection::vec(prop::collection::vec(any::<bool>(), 5), 1..8)) {
            let grid: Vec<f64> = (0..5).map(|i| i as f64 / 4.0).collect();
            let losses: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|f| if *f { 0.0 } else { 1.0 }).collect()).collect();
            let costs = vec![vec![0.0; 5]; table.len()];
            let names = (0..table.len()).map(|j| format!("s{j}")).collect();
            let sweep = SweepResult::from_metrics(grid, 0.05, names, vec![0.0; table.len()], &losses, &costs).unwrap();
            let c = select_lambda(Strategy::Conservative, &sweep);
            for j in 0..table.len() {
                if let Some(&min) = sweep.feasible(j).first() {
                    prop_assert!(c.lambda >= sweep.grid[min]);
                }
            }
            let again = select_lambda(Strategy::Conservative, &sweep);
            prop_assert_eq!(c, again);
            let a = select_lambda(Strategy::MostLikely, &sweep);
            prop_assert_eq!(a.clone(), select_lambda(Strategy::MostLikely, &sweep));
        }
    }
}
