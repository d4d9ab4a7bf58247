//! Synthetic decision-makers with region-structured expertise.
//!
//! An expertise profile gives, for every (support action, region) pair, the
//! probability that the decision-maker answers wrongly. A synthetic
//! decision-maker draws Bernoulli losses from that table.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::UNINFORMED_ESTIMATE;
use crate::model::{InteractionRecord, TaskDataset, TaskItem};

pub const DEFAULT_CLASSIFY_TOLERANCE: f64 = 0.1;
const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("unknown region {0}")]
    UnknownRegion(String),
    #[error("unknown action {0}")]
    UnknownAction(String),
    #[error("profile table is missing ({action}, {region})")]
    MissingCell { action: String, region: String },
    #[error("rate {rate} for ({action}, {region}) is outside [0, 1]")]
    RateOutOfRange { action: String, region: String, rate: f64 },
    #[error("region weights sum to {0}, expected 1")]
    WeightSumMismatch(f64),
    #[error("a decision-maker needs at least two labels to err")]
    TooFewLabels,
    #[error("profile JSON: {0}")]
    Parse(String),
}

/// Per-region, per-action expected error of one decision-maker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertiseProfile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub regions: Vec<String>,
    pub actions: Vec<String>,
    /// `table[action][region]` = error rate.
    pub table: BTreeMap<String, BTreeMap<String, f64>>,
}

impl ExpertiseProfile {
    /// Builds a profile from `rates[action][region]`, in the given orders.
    pub fn from_rows(actions: &[&str], regions: &[&str], rates: &[&[f64]]) -> Result<Self, SimError> {
        let table = actions
            .iter()
            .zip(rates)
            .map(|(a, row)| {
                let cells = regions.iter().zip(row.iter()).map(|(r, v)| (r.to_string(), *v)).collect();
                (a.to_string(), cells)
            })
            .collect();
        let profile = Self {
            name: None,
            regions: regions.iter().map(|r| r.to_string()).collect(),
            actions: actions.iter().map(|a| a.to_string()).collect(),
            table,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn from_json(raw: &str) -> Result<Self, SimError> {
        let p: Self = serde_json::from_str(raw).map_err(|e| SimError::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    /// Every (action, region) cell present and in `[0, 1]`.
    pub fn validate(&self) -> Result<(), SimError> {
        for action in &self.actions {
            for region in &self.regions {
                let rate = self.rate(action, region)?;
                if !(0.0..=1.0).contains(&rate) {
                    return Err(SimError::RateOutOfRange { action: action.clone(), region: region.clone(), rate });
                }
            }
        }
        Ok(())
    }

    pub fn rate(&self, action: &str, region: &str) -> Result<f64, SimError> {
        let row = self.table.get(action).ok_or_else(|| SimError::UnknownAction(action.to_owned()))?;
        match row.get(region) {
            Some(r) => Ok(*r),
            None if self.regions.iter().any(|r| r == region) => Err(SimError::MissingCell {
                action: action.to_owned(),
                region: region.to_owned(),
            }),
            None => Err(SimError::UnknownRegion(region.to_owned())),
        }
    }

    /// Rates for `actions` (in that order) within one region.
    pub fn region_rates(&self, actions: &[String], region: &str) -> Result<Vec<f64>, SimError> {
        actions.iter().map(|a| self.rate(a, region)).collect()
    }

    pub fn label(&self, fallback_index: usize) -> String {
        self.name.clone().unwrap_or_else(|| format!("profile-{fallback_index:02}"))
    }
}

/// A set of profiles, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub profiles: Vec<ExpertiseProfile>,
}

impl Population {
    pub fn from_json(raw: &str) -> Result<Self, SimError> {
        let p: Self = serde_json::from_str(raw).map_err(|e| SimError::Parse(e.to_string()))?;
        for profile in &p.profiles {
            profile.validate()?;
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Invariant,
    StrictlyBetter,
    Varying,
}

impl ProfileKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProfileKind::Invariant => "invariant",
            ProfileKind::StrictlyBetter => "strictly_better",
            ProfileKind::Varying => "varying",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileClass {
    pub kind: ProfileKind,
    pub dominant_action: Option<String>,
}

/// Classifies a profile.
///
/// Invariant when, in every region, all actions are within `tol` of each
/// other. Otherwise strictly better when one action is no worse than every
/// other action in every region (the first such action in profile order is
/// reported). Otherwise varying.
pub fn classify_profile(profile: &ExpertiseProfile, tol: f64) -> Result<ProfileClass, SimError> {
    let rows: Vec<Vec<f64>> = profile
        .regions
        .iter()
        .map(|r| profile.region_rates(&profile.actions, r))
        .collect::<Result<_, _>>()?;

    let spread = rows
        .iter()
        .map(|row| {
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            hi - lo
        })
        .fold(0.0, f64::max);
    if spread <= tol {
        return Ok(ProfileClass { kind: ProfileKind::Invariant, dominant_action: None });
    }

    let dominant = (0..profile.actions.len()).find(|&a| rows.iter().all(|row| row.iter().all(|&other| row[a] <= other)));
    Ok(match dominant {
        Some(a) => ProfileClass {
            kind: ProfileKind::StrictlyBetter,
            dominant_action: Some(profile.actions[a].clone()),
        },
        None => ProfileClass { kind: ProfileKind::Varying, dominant_action: None },
    })
}

/// `Σ_j w_j · min_a r(a, j)`: the best expected loss any policy can reach.
pub fn optimal_loss(profile: &ExpertiseProfile, region_weights: &BTreeMap<String, f64>) -> Result<f64, SimError> {
    let total: f64 = region_weights.values().sum();
    if (total - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(SimError::WeightSumMismatch(total));
    }
    let mut acc = 0.0;
    for (region, w) in region_weights {
        if *w == 0.0 {
            continue;
        }
        let best = profile
            .region_rates(&profile.actions, region)?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        acc += w * best;
    }
    Ok(acc)
}

/// `Σ_j w_j · r(a, j)` for the policy that always shows `action`.
pub fn fixed_action_loss(
    profile: &ExpertiseProfile,
    action: &str,
    region_weights: &BTreeMap<String, f64>,
) -> Result<f64, SimError> {
    region_weights
        .iter()
        .map(|(region, w)| profile.rate(action, region).map(|r| w * r))
        .sum()
}

/// Draws decisions from an expertise profile.
#[derive(Debug, Clone)]
pub struct SyntheticDecisionMaker {
    profile: ExpertiseProfile,
    label_count: usize,
    rng: ChaCha8Rng,
}

impl SyntheticDecisionMaker {
    pub fn new(profile: ExpertiseProfile, label_count: usize, rng: ChaCha8Rng) -> Result<Self, SimError> {
        if label_count < 2 {
            return Err(SimError::TooFewLabels);
        }
        profile.validate()?;
        Ok(Self { profile, label_count, rng })
    }

    pub fn profile(&self) -> &ExpertiseProfile {
        &self.profile
    }

    /// Returns `(human_label, loss)`. A wrong answer is uniform over the
    /// `label_count − 1` incorrect labels.
    pub fn decide(&mut self, item: &TaskItem, action: &str) -> Result<(usize, u8), SimError> {
        let rate = self.profile.rate(action, &item.region)?;
        let wrong = self.rng.random::<f64>() < rate;
        if !wrong {
            return Ok((item.true_label, 0));
        }
        let offset = self.rng.random_range(1..self.label_count);
        Ok(((item.true_label + offset) % self.label_count, 1))
    }
}

/// Free-function form of [`SyntheticDecisionMaker::decide`].
pub fn simulate_decision(
    dm: &mut SyntheticDecisionMaker,
    item: &TaskItem,
    action: &str,
) -> Result<(usize, u8), SimError> {
    dm.decide(item, action)
}

/// A logged outcome stripped down to what profile estimation needs.
#[derive(Debug, Clone, Copy)]
pub struct LoggedOutcome<'a> {
    pub region: &'a str,
    pub action: &'a str,
    pub loss: u8,
}

/// Cells that had no data when estimating a profile from logs.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CoverageReport {
    pub missing: Vec<(String, String)>,
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
}

/// Estimates a profile as the mean loss per (action, region) cell. Empty
/// cells are set to the uninformed 0.5 and listed in the coverage report.
pub fn profile_from_logs<'a>(
    records: impl IntoIterator<Item = LoggedOutcome<'a>>,
    actions: &[String],
    regions: &[String],
) -> (ExpertiseProfile, CoverageReport) {
    let mut sums: BTreeMap<(&str, &str), (u64, usize)> = BTreeMap::new();
    for r in records {
        let cell = sums.entry((r.action, r.region)).or_default();
        cell.0 += u64::from(r.loss);
        cell.1 += 1;
    }
    let mut report = CoverageReport::default();
    let mut table = BTreeMap::new();
    for action in actions {
        let mut row = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for region in regions {
            let (losses, n) = sums.get(&(action.as_str(), region.as_str())).copied().unwrap_or((0, 0));
            counts.insert(region.clone(), n);
            let rate = if n == 0 {
                report.missing.push((action.clone(), region.clone()));
                UNINFORMED_ESTIMATE
            } else {
                losses as f64 / n as f64
            };
            row.insert(region.clone(), rate);
        }
        table.insert(action.clone(), row);
        report.counts.insert(action.clone(), counts);
    }
    let profile = ExpertiseProfile { name: None, regions: regions.to_vec(), actions: actions.to_vec(), table };
    (profile, report)
}

/// Profile estimation straight from a session log.
pub fn profile_from_records(
    records: &[InteractionRecord],
    dataset: &TaskDataset,
) -> Result<(ExpertiseProfile, CoverageReport), SimError> {
    let outcomes = records
        .iter()
        .map(|r| {
            let item = dataset
                .item(&r.item_id)
                .ok_or_else(|| SimError::Parse(format!("log references unknown item {}", r.item_id)))?;
            Ok(LoggedOutcome { region: item.region.as_str(), action: r.action_id.as_str(), loss: r.loss })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(profile_from_logs(outcomes, &dataset.action_ids(), &dataset.regions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ContextVector;
    use crate::rng::{stream, Stream};

    fn varying() -> ExpertiseProfile {
        ExpertiseProfile::from_rows(&["a1", "a2"], &["x1", "x2", "x3"], &[&[0.7, 0.1, 0.7], &[0.1, 0.7, 0.1]]).unwrap()
    }

    fn uniform_weights(regions: &[&str]) -> BTreeMap<String, f64> {
        regions.iter().map(|r| (r.to_string(), 1.0 / regions.len() as f64)).collect()
    }

    fn item(region: &str) -> TaskItem {
        TaskItem {
            item_id: "i".into(),
            context: ContextVector(vec![0.0]),
            true_label: 1,
            region: region.into(),
            payloads: BTreeMap::new(),
            stimulus: None,
        }
    }

    fn dm(profile: ExpertiseProfile, seed: u64) -> SyntheticDecisionMaker {
        SyntheticDecisionMaker::new(profile, 4, stream(seed, Stream::Simulator)).unwrap()
    }

    #[test]
    fn degenerate_rates() {
        let p = ExpertiseProfile::from_rows(&["a"], &["r"], &[&[0.0]]).unwrap();
        let mut d = dm(p, 1);
        for _ in 0..100 {
            assert_eq!(d.decide(&item("r"), "a").unwrap(), (1, 0));
        }
        let p = ExpertiseProfile::from_rows(&["a"], &["r"], &[&[1.0]]).unwrap();
        let mut d = dm(p, 1);
        for _ in 0..100 {
            let (label, loss) = d.decide(&item("r"), "a").unwrap();
            assert_eq!(loss, 1);
            assert_ne!(label, 1);
            assert!(label < 4);
        }
    }

    #[test]
    fn empirical_rate_matches_table() {
        let p = ExpertiseProfile::from_rows(&["a"], &["r"], &[&[0.7]]).unwrap();
        let mut d = dm(p, 42);
        let n = 10_000;
        let losses: u32 = (0..n).map(|_| u32::from(d.decide(&item("r"), "a").unwrap().1)).sum();
        let rate = f64::from(losses) / f64::from(n);
        assert!((rate - 0.7).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn unknown_cells() {
        let mut d = dm(varying(), 0);
        assert_eq!(d.decide(&item("x9"), "a1"), Err(SimError::UnknownRegion("x9".into())));
        assert_eq!(d.decide(&item("x1"), "zz"), Err(SimError::UnknownAction("zz".into())));
    }

    #[test]
    fn logs_to_profile() {
        let actions = vec!["a1".to_string(), "a2".to_string()];
        let regions = vec!["r1".to_string(), "r2".to_string(), "r3".to_string()];
        let logs: Vec<LoggedOutcome> = [1, 0, 1, 0]
            .iter()
            .map(|&loss| LoggedOutcome { region: "r1", action: "a1", loss })
            .chain(std::iter::once(LoggedOutcome { region: "r2", action: "a2", loss: 1 }))
            .collect();
        let (p, report) = profile_from_logs(logs, &actions, &regions);
        assert_eq!(p.rate("a1", "r1").unwrap(), 0.5);
        assert_eq!(p.rate("a2", "r2").unwrap(), 1.0);
        assert_eq!(p.rate("a2", "r3").unwrap(), 0.5);
        assert!(report.missing.contains(&("a2".to_string(), "r3".to_string())));
        assert_eq!(report.missing.len(), 4);
        p.validate().unwrap();
    }

    #[test]
    fn classification_examples() {
        let inv = ExpertiseProfile::from_rows(&["a1", "a2"], &["x", "y"], &[&[0.5, 0.5], &[0.52, 0.48]]).unwrap();
        assert_eq!(classify_profile(&inv, 0.1).unwrap().kind, ProfileKind::Invariant);
        assert_eq!(classify_profile(&varying(), 0.1).unwrap().kind, ProfileKind::Varying);
        let sb = ExpertiseProfile::from_rows(&["a1", "a2"], &["x", "y"], &[&[0.1, 0.1], &[0.7, 0.7]]).unwrap();
        assert_eq!(
            classify_profile(&sb, 0.1).unwrap(),
            ProfileClass { kind: ProfileKind::StrictlyBetter, dominant_action: Some("a1".into()) }
        );
    }

    #[test]
    fn optimal_loss_examples() {
        let w = uniform_weights(&["x1", "x2", "x3"]);
        assert!((optimal_loss(&varying(), &w).unwrap() - 0.1).abs() < 1e-12);
        let single = ExpertiseProfile::from_rows(&["a"], &["x1", "x2", "x3"], &[&[0.2, 0.4, 0.9]]).unwrap();
        assert!((optimal_loss(&single, &w).unwrap() - 0.5).abs() < 1e-12);
        let bad: BTreeMap<String, f64> = [("x1".to_string(), 0.5)].into();
        assert_eq!(optimal_loss(&varying(), &bad), Err(SimError::WeightSumMismatch(0.5)));
    }

    #[test]
    fn profile_json_shape() {
        let json = serde_json::to_value(varying()).unwrap();
        assert_eq!(json["table"]["a1"]["x2"], 0.1);
        let back = ExpertiseProfile::from_json(&json.to_string()).unwrap();
        assert_eq!(back, varying());
        let bad = r#"{"regions":["x"],"actions":["a"],"table":{"a":{}}}"#;
        assert!(matches!(ExpertiseProfile::from_json(bad), Err(SimError::MissingCell { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn profile_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
            (1usize..4, 1usize..5).prop_flat_map(|(a, r)| (Just(a), Just(r), prop::collection::vec(0.0f64..=1.0, a * r)))
        }

        fn build(a: usize, r: usize, rates: &[f64], action_order: &[usize], region_order: &[usize]) -> ExpertiseProfile {
            let actions: Vec<String> = action_order.iter().map(|i| format!("a{i}")).collect();
            let regions: Vec<String> = region_order.iter().map(|j| format!("r{j}")).collect();
            let table = (0..a)
                .map(|i| (format!("a{i}"), (0..r).map(|j| (format!("r{j}"), rates[i * r + j])).collect()))
                .collect();
            ExpertiseProfile { name: None, regions, actions, table }
        }

        proptest! {
            #[test]
            fn optimum_dominates_every_fixed_action((a, r, rates) in profile_strategy()) {
                let order_a: Vec<usize> = (0..a).collect();
                let order_r: Vec<usize> = (0..r).collect();
                let p = build(a, r, &rates, &order_a, &order_r);
                let w: BTreeMap<String, f64> = p.regions.iter().map(|g| (g.clone(), 1.0 / r as f64)).collect();
                let opt = optimal_loss(&p, &w).unwrap();
                for action in &p.actions {
                    prop_assert!(opt <= fixed_action_loss(&p, action, &w).unwrap());
                }
            }

            #[test]
            fn classification_ignores_ordering((a, r, rates) in profile_strategy(), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut order_a: Vec<usize> = (0..a).collect();
                let mut order_r: Vec<usize> = (0..r).collect();
                let base = build(a, r, &rates, &order_a, &order_r);
                order_a.shuffle(&mut rng);
                order_r.shuffle(&mut rng);
                let shuffled = build(a, r, &rates, &order_a, &order_r);
                let c1 = classify_profile(&base, 0.1).unwrap();
                let c2 = classify_profile(&shuffled, 0.1).unwrap();
                prop_assert_eq!(c1.kind, c2.kind);
            }
        }
    }
}
