//! Config-driven experiments: every (policy, profile, seed) triple is
//! simulated, evaluated, and written out as CSV.

pub mod report;
pub mod sim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{reliance_sensibility, EvaluationSet};
use crate::model::{DatasetError, TaskDataset};
use crate::policy::{EngineParams, Objective, PolicyKind, PolicySnapshot};
use crate::rng::{self, Stream};
use crate::simulator::{classify_profile, ExpertiseProfile, Population, ProfileKind, DEFAULT_CLASSIFY_TOLERANCE};
use crate::synth::permutation;

pub use report::{emit_report, Summary, SummaryRow};
pub use sim::{simulate, CurvePoint, RunOutcome, RunParams, RunSetup, SimulationError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid dataset {path}: {source}")]
    Dataset { path: PathBuf, source: DatasetError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error("no metrics found in {0}")]
    NoMetricsFound(PathBuf),
    #[error("malformed metrics: {0}")]
    Metrics(String),
    #[error(transparent)]
    Tuning(#[from] crate::tuning::TuningError),
}

impl ExperimentError {
    /// 2 for configuration problems, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Dataset { .. } => 2,
            _ => 3,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalProtocol {
    /// Mean over the final `window` per-step snapshots, evaluated on the
    /// whole input distribution.
    #[default]
    Trailing,
    /// The final policy on a held-out sample that is never trained on.
    Heldout,
}

impl EvalProtocol {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalProtocol::Trailing => "trailing",
            EvalProtocol::Heldout => "heldout",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "trailing" => Some(EvalProtocol::Trailing),
            "heldout" => Some(EvalProtocol::Heldout),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Task label for the metrics; the dataset name when absent.
    pub task: Option<String>,
    pub dataset: PathBuf,
    /// Profiles the population-majority members are trained on, and the
    /// simulators for λ sweeps.
    pub population: Option<PathBuf>,
    /// Profiles to evaluate against. When absent, the population is used and
    /// each profile is left out of its own majority vote.
    pub profiles: Option<PathBuf>,
    pub policies: Vec<String>,
    pub lambda: f64,
    pub alpha: f64,
    pub k: usize,
    pub warmup: usize,
    pub gamma: f64,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    pub eval: EvalProtocol,
    pub window: usize,
    pub heldout_size: usize,
    /// Number of learned policies in the majority vote.
    pub population_size: usize,
    /// `[K, W]` pairs; each expands `thread-knn` into one variant.
    pub knn_grid: Vec<[usize; 2]>,
    pub out: Option<PathBuf>,
    pub epsilon: f64,
    pub grid_step: f64,
    pub sweep_seeds: Vec<u64>,
    /// Write per-step curves for every step rather than only the steps the
    /// protocol needs.
    pub full_curves: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let engine = EngineParams::default();
        Self {
            task: None,
            dataset: PathBuf::new(),
            population: None,
            profiles: None,
            policies: vec!["thread-knn".into()],
            lambda: 1.0,
            alpha: engine.alpha,
            k: engine.k,
            warmup: engine.warmup,
            gamma: engine.gamma,
            horizon: 100,
            seeds: (0..10).collect(),
            eval: EvalProtocol::Trailing,
            window: 10,
            heldout_size: 100,
            population_size: 10,
            knn_grid: Vec::new(),
            out: None,
            epsilon: 0.05,
            grid_step: 0.05,
            sweep_seeds: (0..5).collect(),
            full_curves: true,
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let raw = fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&raw).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset);
        cfg.population.as_mut().map(resolve);
        cfg.profiles.as_mut().map(resolve);
        cfg.out.as_mut().map(resolve);
        Ok(cfg)
    }

    pub fn engine(&self) -> EngineParams {
        EngineParams { alpha: self.alpha, k: self.k, warmup: self.warmup, gamma: self.gamma }
    }

    pub fn objective(&self) -> Objective {
        Objective::Scalarized { lambda: self.lambda }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_owned()));
        if self.dataset.as_os_str().is_empty() {
            return bad("dataset path is required");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.policies.is_empty() {
            return bad("at least one policy is required");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gamma) || self.k == 0 || self.alpha < 0.0 {
            return bad("engine parameters out of range");
        }
        if self.window == 0 || (self.eval == EvalProtocol::Trailing && self.window > self.horizon) {
            return bad("window must lie in [1, horizon]");
        }
        if self.population_size == 0 {
            return bad("population_size must be at least 1");
        }
        if self.knn_grid.iter().any(|[k, _]| *k == 0) {
            return bad("knn_grid K must be at least 1");
        }
        Ok(())
    }
}

/// A policy to run, with its own engine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub spec: VariantSpec,
    pub engine: EngineParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VariantSpec {
    Session(PolicyKind),
    Population,
    Oracle,
}

impl Variant {
    pub fn estimator(&self) -> &'static str {
        match &self.spec {
            VariantSpec::Session(kind) => kind.estimator_label(),
            VariantSpec::Population => "knn",
            VariantSpec::Oracle => "none",
        }
    }
}

pub fn expand_variants(cfg: &ExperimentConfig, dataset: &TaskDataset) -> Result<Vec<Variant>, ExperimentError> {
    let base = cfg.engine();
    let mut out = Vec::new();
    for name in &cfg.policies {
        let spec = match name.as_str() {
            "population" => VariantSpec::Population,
            "oracle" => VariantSpec::Oracle,
            other => VariantSpec::Session(PolicyKind::parse(other).map_err(|e| ExperimentError::Config(e.to_string()))?),
        };
        if let VariantSpec::Session(PolicyKind::Fixed(a)) = &spec {
            if dataset.action_index(a).is_none() {
                return Err(ExperimentError::Config(format!("policy {name} references unknown action {a}")));
            }
        }
        if spec == VariantSpec::Session(PolicyKind::ThreadKnn) && !cfg.knn_grid.is_empty() {
            for [k, w] in &cfg.knn_grid {
                out.push(Variant {
                    label: format!("thread-knn(k={k},w={w})"),
                    spec: spec.clone(),
                    engine: EngineParams { k: *k, warmup: *w, ..base },
                });
            }
        } else {
            out.push(Variant { label: name.clone(), spec, engine: base });
        }
    }
    Ok(out)
}

/// A profile to evaluate against, with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub name: String,
    pub profile: ExpertiseProfile,
    pub class: ProfileKind,
}

fn check_profile(profile: &ExpertiseProfile, dataset: &TaskDataset, name: &str) -> Result<(), ExperimentError> {
    profile.validate().map_err(|e| ExperimentError::Config(format!("profile {name}: {e}")))?;
    for region in &dataset.regions {
        for action in dataset.action_ids() {
            profile
                .rate(&action, region)
                .map_err(|e| ExperimentError::Config(format!("profile {name} does not cover the dataset: {e}")))?;
        }
    }
    Ok(())
}

pub fn make_targets(profiles: &[ExpertiseProfile], dataset: &TaskDataset) -> Result<Vec<Target>, ExperimentError> {
    profiles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let name = p.label(i);
            check_profile(p, dataset, &name)?;
            let class = classify_profile(p, DEFAULT_CLASSIFY_TOLERANCE)
                .map_err(|e| ExperimentError::Config(format!("profile {name}: {e}")))?
                .kind;
            Ok(Target { name, profile: p.clone(), class })
        })
        .collect()
}

/// Inputs of an experiment after loading and validation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub task: String,
    pub dataset: Arc<TaskDataset>,
    pub variants: Vec<Variant>,
    pub targets: Vec<Target>,
    pub population: Vec<ExpertiseProfile>,
    /// Targets are the population itself, so each is left out of its vote.
    pub leave_one_out: bool,
}

fn read_profiles(path: &Path) -> Result<Vec<ExpertiseProfile>, ExperimentError> {
    let raw = fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
    Population::from_json(&raw)
        .map(|p| p.profiles)
        .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
}

pub fn load_dataset(path: &Path) -> Result<TaskDataset, ExperimentError> {
    let raw = fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
    TaskDataset::from_json(&raw).map_err(|source| ExperimentError::Dataset { path: path.to_path_buf(), source })
}

impl Prepared {
    pub fn load(config: ExperimentConfig) -> Result<Self, ExperimentError> {
        config.validate()?;
        let dataset = load_dataset(&config.dataset)?;
        let population = config.population.as_deref().map(read_profiles).transpose()?.unwrap_or_default();
        let explicit = config.profiles.as_deref().map(read_profiles).transpose()?;
        Self::from_parts(config, dataset, population, explicit)
    }

    /// Builds an experiment from in-memory inputs. `profiles` of `None`
    /// evaluates against the population with leave-one-out voting.
    pub fn from_parts(
        config: ExperimentConfig,
        dataset: TaskDataset,
        population: Vec<ExpertiseProfile>,
        profiles: Option<Vec<ExpertiseProfile>>,
    ) -> Result<Self, ExperimentError> {
        config.validate()?;
        dataset
            .validate()
            .map_err(|source| ExperimentError::Dataset { path: config.dataset.clone(), source })?;
        let leave_one_out = profiles.is_none();
        let targets = make_targets(profiles.as_deref().unwrap_or(&population), &dataset)?;
        if targets.is_empty() {
            return Err(ExperimentError::Config("no profiles to evaluate against".into()));
        }
        for (i, p) in population.iter().enumerate() {
            check_profile(p, &dataset, &p.label(i))?;
        }
        let variants = expand_variants(&config, &dataset)?;
        if variants.iter().any(|v| v.spec == VariantSpec::Population) {
            let available = population.len() - usize::from(leave_one_out);
            if population.is_empty() || available == 0 {
                return Err(ExperimentError::Config("the population policy needs population profiles".into()));
            }
        }
        if config.eval == EvalProtocol::Heldout && config.heldout_size >= dataset.items.len() {
            return Err(ExperimentError::Config(format!(
                "heldout_size {} leaves no training items in a dataset of {}",
                config.heldout_size,
                dataset.items.len()
            )));
        }
        Ok(Self {
            task: config.task.clone().unwrap_or_else(|| dataset.name.clone()),
            config,
            dataset: Arc::new(dataset),
            variants,
            targets,
            population,
            leave_one_out,
        })
    }
}

/// Seed tags.
const TAG_ITEMS: u64 = 0x17E5;
const TAG_SESSION: u64 = 0x5E55;
const TAG_MEMBER: u64 = 0x3E3B;

/// Training indices and evaluation set for one seed.
pub fn split(dataset: &TaskDataset, protocol: EvalProtocol, heldout_size: usize, seed: u64) -> (Vec<usize>, EvaluationSet) {
    match protocol {
        EvalProtocol::Trailing => {
            let train = (0..dataset.items.len()).collect();
            (train, EvaluationSet::uniform(dataset.items.clone()).expect("validated datasets are non-empty"))
        }
        EvalProtocol::Heldout => {
            let mut rng = rng::stream(seed, Stream::HeldOut);
            let order = permutation(dataset.items.len(), &mut rng);
            let (eval, train) = order.split_at(heldout_size);
            let mut train = train.to_vec();
            train.sort_unstable();
            let eval_items = eval.iter().map(|&i| dataset.items[i].clone()).collect();
            (train, EvaluationSet::uniform(eval_items).expect("heldout_size is at least 1"))
        }
    }
}

/// Seeds for run `(seed, profile index)`: `(session seed, item seed)`.
pub fn run_seeds(seed: u64, profile_index: usize) -> (u64, u64) {
    (
        rng::derive_seed(seed, &[TAG_SESSION, profile_index as u64]),
        rng::derive_seed(seed, &[TAG_ITEMS, profile_index as u64]),
    )
}

/// One result row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: String,
    pub policy_kind: String,
    pub estimator: String,
    pub lambda: f64,
    pub seed: u64,
    pub profile_class: String,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub excess_loss: f64,
    pub expected_loss: f64,
    pub expected_cost: f64,
    pub reliance_sensibility: Option<f64>,
    pub profile: String,
}

#[derive(Debug, Clone)]
pub struct JobResult {
    pub key: String,
    pub row: MetricsRow,
    pub outcome: RunOutcome,
}

#[derive(Debug, Clone)]
pub struct ExperimentResults {
    pub protocol: EvalProtocol,
    pub jobs: Vec<JobResult>,
}

fn file_key(variant: &str, profile: &str, seed: u64) -> String {
    let clean = |s: &str| {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
            .collect::<String>()
    };
    format!("{}__{}__s{seed}", clean(variant), clean(profile))
}

impl Prepared {
    fn run_params(&self, kind: PolicyKind, engine: EngineParams, seed: u64, index: usize, full_curve: bool) -> RunParams {
        let (session_seed, item_seed) = run_seeds(seed, index);
        RunParams {
            kind,
            objective: self.config.objective(),
            engine,
            horizon: self.config.horizon,
            seed: session_seed,
            item_seed,
            protocol: self.config.eval,
            window: self.config.window,
            full_curve,
        }
    }

    /// Final THREAD-KNN policies learned on each population profile.
    fn train_members(&self, seed: u64, split: &(Vec<usize>, EvaluationSet)) -> Result<Vec<PolicySnapshot>, ExperimentError> {
        let engine = self.config.engine();
        self.population
            .par_iter()
            .enumerate()
            .map(|(m, profile)| {
                let mut params = self.run_params(PolicyKind::ThreadKnn, engine, seed, m, false);
                params.seed = rng::derive_seed(params.seed, &[TAG_MEMBER]);
                params.item_seed = rng::derive_seed(params.item_seed, &[TAG_MEMBER]);
                let setup = RunSetup { dataset: &self.dataset, train: &split.0, eval: &split.1, profile };
                Ok(simulate(setup, &params)?.final_snapshot)
            })
            .collect()
    }

    fn population_kind(&self, members: &[PolicySnapshot], target: usize) -> PolicyKind {
        let chosen: Vec<PolicySnapshot> = members
            .iter()
            .enumerate()
            .filter(|(m, _)| !(self.leave_one_out && *m == target))
            .map(|(_, s)| s.clone())
            .take(self.config.population_size)
            .collect();
        PolicyKind::PopulationMajority(chosen)
    }

    /// Runs every (variant, profile, seed) triple.
    pub fn run(&self) -> Result<ExperimentResults, ExperimentError> {
        let cfg = &self.config;
        let needs_members = self.variants.iter().any(|v| v.spec == VariantSpec::Population);
        let per_seed: Vec<(u64, (Vec<usize>, EvaluationSet), Vec<PolicySnapshot>)> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let split = split(&self.dataset, cfg.eval, cfg.heldout_size, rng::derive_seed(seed, &[Stream::HeldOut as u64]));
                let members = if needs_members { self.train_members(seed, &split)? } else { Vec::new() };
                Ok((seed, split, members))
            })
            .collect::<Result<_, ExperimentError>>()?;

        let mut jobs = Vec::new();
        for v in 0..self.variants.len() {
            for t in 0..self.targets.len() {
                for s in 0..per_seed.len() {
                    jobs.push((v, t, s));
                }
            }
        }

        let results = jobs
            .par_iter()
            .map(|&(v, t, s)| {
                let variant = &self.variants[v];
                let target = &self.targets[t];
                let (seed, split, members) = &per_seed[s];
                let kind = match &variant.spec {
                    VariantSpec::Session(kind) => kind.clone(),
                    VariantSpec::Oracle => PolicyKind::OracleOptimal(target.profile.clone()),
                    VariantSpec::Population => self.population_kind(members, t),
                };
                let params = self.run_params(kind, variant.engine, *seed, t, cfg.full_curves);
                let setup = RunSetup { dataset: &self.dataset, train: &split.0, eval: &split.1, profile: &target.profile };
                let outcome = simulate(setup, &params)?;
                let reliance = reliance_sensibility(&outcome.records, &self.dataset.actions).ok().flatten();
                let row = MetricsRow {
                    task: self.task.clone(),
                    policy_kind: variant.label.clone(),
                    estimator: variant.estimator().into(),
                    lambda: cfg.lambda,
                    seed: *seed,
                    profile_class: target.class.as_str().into(),
                    horizon: cfg.horizon,
                    excess_loss: outcome.excess_loss(),
                    expected_loss: outcome.expected_loss,
                    expected_cost: outcome.expected_cost,
                    reliance_sensibility: reliance,
                    profile: target.name.clone(),
                };
                Ok(JobResult { key: file_key(&variant.label, &target.name, *seed), row, outcome })
            })
            .collect::<Result<Vec<_>, ExperimentError>>()?;
        Ok(ExperimentResults { protocol: cfg.eval, jobs: results })
    }
}

/// Run metadata stored next to the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub task: String,
    pub protocol: EvalProtocol,
    pub window: usize,
    pub heldout_size: usize,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    pub policies: Vec<String>,
    pub profiles: Vec<String>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| ExperimentError::Metrics(e.to_string()))?;
    }
    w.into_inner().map_err(|e| ExperimentError::Metrics(e.to_string()))
}

/// Writes metrics, curves, final-policy snapshots, logs and the summary.
pub fn write_results(prepared: &Prepared, results: &ExperimentResults, out: &Path) -> Result<Summary, ExperimentError> {
    for sub in ["curves", "snapshots", "logs"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    write_file(&out.join("metrics.csv"), &csv_bytes(results.jobs.iter().map(|j| &j.row))?)?;

    let manifest = RunManifest {
        task: prepared.task.clone(),
        protocol: results.protocol,
        window: prepared.config.window,
        heldout_size: prepared.config.heldout_size,
        horizon: prepared.config.horizon,
        seeds: prepared.config.seeds.clone(),
        policies: prepared.variants.iter().map(|v| v.label.clone()).collect(),
        profiles: prepared.targets.iter().map(|t| t.name.clone()).collect(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&out.join("run.json"), &json)?;

    let items = &prepared.dataset.items;
    results.jobs.par_iter().try_for_each(|job| -> Result<(), ExperimentError> {
        write_file(&out.join("curves").join(format!("{}.csv", job.key)), &csv_bytes(&job.outcome.curve)?)?;

        let snap = &job.outcome.final_snapshot;
        let mut w = csv::Writer::from_writer(Vec::new());
        let dim = prepared.dataset.dim();
        let header = std::iter::once("item_id".to_string())
            .chain((0..dim).map(|d| format!("x{d}")))
            .chain(std::iter::once("action_id".to_string()));
        w.write_record(header).map_err(|e| ExperimentError::Metrics(e.to_string()))?;
        for item in items {
            let action = snap.choose_id(item.context.as_slice(), Some(&item.region)).map_err(SimulationError::from)?;
            let record = std::iter::once(item.item_id.clone())
                .chain(item.context.0.iter().map(|v| v.to_string()))
                .chain(std::iter::once(action.to_owned()));
            w.write_record(record).map_err(|e| ExperimentError::Metrics(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| ExperimentError::Metrics(e.to_string()))?;
        write_file(&out.join("snapshots").join(format!("{}.csv", job.key)), &bytes)?;

        let mut log = Vec::new();
        for r in &job.outcome.records {
            serde_json::to_writer(&mut log, r).expect("records serialize");
            log.push(b'\n');
        }
        write_file(&out.join("logs").join(format!("{}.jsonl", job.key)), &log)
    })?;

    emit_report(out)
}

/// Loads, runs and writes an experiment.
pub fn run_experiment(config: ExperimentConfig) -> Result<Summary, ExperimentError> {
    let out = config.out.clone().ok_or_else(|| ExperimentError::Config("an output directory is required".into()))?;
    let prepared = Prepared::load(config)?;
    let results = prepared.run()?;
    write_results(&prepared, &results, &out)
}
