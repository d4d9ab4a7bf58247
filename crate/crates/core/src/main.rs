use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use support_policy::experiment::report::render_table;
use support_policy::experiment::{emit_report, load_dataset, run_experiment, EvalProtocol, ExperimentConfig, ExperimentError};
use support_policy::policy::PolicyKind;
use support_policy::service::{env_settings, serve};
use support_policy::simulator::{ExpertiseProfile, Population, ProfileKind};
use support_policy::synth::{synthetic_dataset, synthetic_population, WorldSpec};
use support_policy::tuning::{lambda_grid, select_lambda, sweep_lambda, Selection, Strategy, SweepConfig, SweepResult};

#[derive(Parser)]
#[command(name = "support-policy", version, about = "Learn and evaluate personalized decision support policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics, curves, snapshots and logs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Sweep λ over the population and select one per strategy.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Strategy whose selection is printed: A, B or C.
        #[arg(long, default_value = "C")]
        strategy: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Summarize an output directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Serve live sessions over HTTP.
    Serve {
        /// Defaults to $SUPPORT_POLICY_DATA_DIR or ./data.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Defaults to $SUPPORT_POLICY_BIND or 127.0.0.1:8080.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Write a synthetic dataset, population, target profiles and config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// invariant, strictly_better or varying.
        #[arg(long, default_value = "varying")]
        kind: String,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
}

/// Flags that replace the matching config field.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    population: Option<PathBuf>,
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Repeatable; replaces the policy list.
    #[arg(long = "policy")]
    policies: Vec<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, visible_alias = "T")]
    horizon: Option<usize>,
    /// `a..b` (inclusive) or a comma-separated list.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<Seeds>,
    #[arg(long, value_parser = parse_eval)]
    eval: Option<EvalProtocol>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    heldout_size: Option<usize>,
    #[arg(long)]
    population_size: Option<usize>,
    /// Comma-separated `KxW` pairs.
    #[arg(long, value_parser = parse_knn_grid)]
    knn_grid: Option<KnnGrid>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    grid_step: Option<f64>,
    #[arg(long, value_parser = parse_seeds)]
    sweep_seeds: Option<Seeds>,
    #[arg(long)]
    full_curves: Option<bool>,
}

impl Overrides {
    fn apply(self, cfg: &mut ExperimentConfig) {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            )*};
        }
        set!(lambda, alpha, k, warmup, gamma, horizon, eval, window, heldout_size, population_size);
        set!(epsilon, grid_step, full_curves, dataset);
        if let Some(Seeds(v)) = self.seeds {
            cfg.seeds = v;
        }
        if let Some(Seeds(v)) = self.sweep_seeds {
            cfg.sweep_seeds = v;
        }
        if let Some(KnnGrid(v)) = self.knn_grid {
            cfg.knn_grid = v;
        }
        if self.task.is_some() {
            cfg.task = self.task;
        }
        if self.population.is_some() {
            cfg.population = self.population;
        }
        if self.profiles.is_some() {
            cfg.profiles = self.profiles;
        }
        if self.out.is_some() {
            cfg.out = self.out;
        }
        if !self.policies.is_empty() {
            cfg.policies = self.policies;
        }
    }
}

#[derive(Clone)]
struct Seeds(Vec<u64>);

#[derive(Clone)]
struct KnnGrid(Vec<[usize; 2]>);

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    seed_list(s).map(Seeds)
}

fn seed_list(s: &str) -> Result<Vec<u64>, String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("{t:?}: {e}"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            return Err(format!("empty seed range {s}"));
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(num).collect()
}

fn parse_eval(s: &str) -> Result<EvalProtocol, String> {
    EvalProtocol::parse(s).ok_or_else(|| format!("expected trailing or heldout, got {s}"))
}

fn parse_knn_grid(s: &str) -> Result<KnnGrid, String> {
    s.split(',')
        .map(|pair| {
            let (k, w) = pair.split_once(['x', 'X']).ok_or_else(|| format!("expected KxW, got {pair}"))?;
            let k = k.trim().parse().map_err(|e| format!("{pair}: {e}"))?;
            let w = w.trim().parse().map_err(|e| format!("{pair}: {e}"))?;
            Ok([k, w])
        })
        .collect::<Result<_, String>>()
        .map(KnnGrid)
}

fn load_config(path: &Path, overrides: Overrides) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig::load(path)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct SweepOutput {
    policy_kind: String,
    horizon: usize,
    window: usize,
    seeds: Vec<u64>,
    sweep: SweepResult,
    selections: Vec<Selection>,
}

fn run_sweep(config: &Path, strategy: &str, overrides: Overrides) -> Result<(), ExperimentError> {
    let strategy = Strategy::parse(strategy)
        .ok_or_else(|| ExperimentError::Config(format!("strategy must be A, B or C, got {strategy}")))?;
    let cfg = load_config(config, overrides)?;
    let population_path =
        cfg.population.clone().ok_or_else(|| ExperimentError::Config("sweep needs a population".into()))?;
    let raw = fs::read_to_string(&population_path)
        .map_err(|e| ExperimentError::Config(format!("{}: {e}", population_path.display())))?;
    let population = Population::from_json(&raw)
        .map_err(|e| ExperimentError::Config(format!("{}: {e}", population_path.display())))?
        .profiles;
    let dataset = Arc::new(load_dataset(&cfg.dataset)?);
    let kind = cfg
        .policies
        .iter()
        .filter_map(|p| PolicyKind::parse(p).ok())
        .find(|k| matches!(k, PolicyKind::ThreadKnn | PolicyKind::ThreadLinUcb))
        .unwrap_or(PolicyKind::ThreadKnn);
    if !(0.0..=1.0).contains(&cfg.epsilon) {
        return Err(ExperimentError::Config("epsilon must lie in [0, 1]".into()));
    }
    let grid = lambda_grid(cfg.grid_step).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let sweep_cfg = SweepConfig {
        kind: kind.clone(),
        engine: cfg.engine(),
        horizon: cfg.horizon,
        window: cfg.window,
        seeds: cfg.sweep_seeds.clone(),
        epsilon: cfg.epsilon,
    };
    let sweep = sweep_lambda(&dataset, &population, &grid, &sweep_cfg)?;
    let selections: Vec<Selection> = [Strategy::MostLikely, Strategy::MostLikelyLowestCost, Strategy::Conservative]
        .into_iter()
        .map(|s| select_lambda(s, &sweep))
        .collect();
    let chosen = selections.iter().find(|s| s.strategy == strategy).expect("all strategies computed");
    println!("strategy {} selects λ = {}{}", strategy.letter(), chosen.lambda, if chosen.fallback { " (fallback)" } else { "" });
    if !chosen.skipped.is_empty() {
        println!("no feasible λ for: {}", chosen.skipped.join(", "));
    }

    let out = SweepOutput {
        policy_kind: kind.label(),
        horizon: cfg.horizon,
        window: cfg.window,
        seeds: cfg.sweep_seeds.clone(),
        sweep,
        selections,
    };
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|source| ExperimentError::Io { path: dir.clone(), source })?;
    let path = dir.join("sweep.json");
    let json = serde_json::to_string_pretty(&out).expect("sweep serializes");
    fs::write(&path, json + "\n").map_err(|source| ExperimentError::Io { path: path.clone(), source })?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), ExperimentError> {
    let json = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, json + "\n").map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}

fn run_synth(out: &Path, seed: u64, kind: &str, count: usize) -> Result<(), ExperimentError> {
    let kind = match kind {
        "invariant" => ProfileKind::Invariant,
        "strictly_better" => ProfileKind::StrictlyBetter,
        "varying" => ProfileKind::Varying,
        other => return Err(ExperimentError::Config(format!("unknown profile kind {other}"))),
    };
    if count == 0 {
        return Err(ExperimentError::Config("count must be at least 1".into()));
    }
    fs::create_dir_all(out).map_err(|source| ExperimentError::Io { path: out.to_path_buf(), source })?;
    let dataset = synthetic_dataset(&WorldSpec::default(), seed);
    let population = synthetic_population(&dataset, kind, count, seed.wrapping_add(1));
    let profiles: Vec<ExpertiseProfile> = synthetic_population(&dataset, kind, count, seed.wrapping_add(2))
        .into_iter()
        .map(|p| {
            let name = p.name.clone().unwrap_or_default();
            p.with_name(format!("target-{name}"))
        })
        .collect();
    let ds_path = out.join("dataset.json");
    fs::write(&ds_path, dataset.to_json() + "\n").map_err(|source| ExperimentError::Io { path: ds_path, source })?;
    write_json(&out.join("population.json"), &Population { profiles: population })?;
    write_json(&out.join("profiles.json"), &Population { profiles })?;
    let config = ExperimentConfig {
        dataset: "dataset.json".into(),
        population: Some("population.json".into()),
        profiles: Some("profiles.json".into()),
        policies: ["thread-knn", "thread-linucb", "fixed:human_alone", "fixed:model", "fixed:consensus", "population", "oracle"]
            .map(String::from)
            .to_vec(),
        out: Some("results".into()),
        ..ExperimentConfig::default()
    };
    write_json(&out.join("config.json"), &config)?;
    println!("wrote dataset, population, profiles and config to {}", out.display());
    Ok(())
}

fn execute(command: Command) -> Result<(), ExperimentError> {
    match command {
        Command::Run { config, overrides } => {
            let cfg = load_config(&config, overrides)?;
            let summary = run_experiment(cfg)?;
            print!("{}", render_table(&summary));
            Ok(())
        }
        Command::Sweep { config, strategy, overrides } => run_sweep(&config, &strategy, overrides),
        Command::Report { input } => {
            let summary = emit_report(&input)?;
            print!("{}", render_table(&summary));
            Ok(())
        }
        Command::Synth { out, seed, kind, count } => run_synth(&out, seed, &kind, count),
        Command::Serve { .. } => unreachable!("handled in main"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Serve { data_dir, bind } = cli.command {
        let (env_dir, env_bind) = env_settings();
        let runtime = match tokio::runtime::Runtime::new() {
            Ok(rt) => rt,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(3);
            }
        };
        let result = runtime.block_on(serve(data_dir.unwrap_or(env_dir), &bind.unwrap_or(env_bind)));
        return match result {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(3)
            }
        };
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
