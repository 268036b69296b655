//! Builds and executes the runs of a [`RunConfig`], writing traces,
//! a JSON summary and an optional SVG plot.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adversary::{expand_preset, AttackerSpec};
use crate::dataset::{gen_gaussian, gen_spam_like, load_csv, partition, LabeledSet, NodePartition};
use crate::defenses::{DefenseSet, RejectionConfig, VerificationConfig};
use crate::engine::{run, Adversary, Defense, EngineConfig, EngineError};
use crate::harness::config::{AttackerPlan, ConfigError, DatasetSpec, RunConfig, RunSpec};
use crate::harness::metrics::moving_average;
use crate::harness::svg::{line_chart, Series};
use crate::harness::trace::{write_combined_csv, RiskTrace, RunMetadata};
use crate::topology::{make_topology, Topology};

/// Environment variable holding the worker thread count.
pub const WORKERS_ENV: &str = "DSVM_WORKERS";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run `{label}`: {message}")]
    Setup { label: String, message: String },
    #[error("run `{label}` failed: {source}")]
    Engine { label: String, source: EngineError },
    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
    #[error("{WORKERS_ENV} must be a positive integer, got `{0}`")]
    Workers(String),
}

impl ScenarioError {
    /// Process exit status: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Config(_) | ScenarioError::Setup { .. } | ScenarioError::Workers(_) => 2,
            ScenarioError::Engine { .. } | ScenarioError::Output { .. } => 3,
        }
    }
}

/// Seed streams derived from a run's top-level seed.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Everything needed to call the engine for one run.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub spec: RunSpec,
    pub topology: Topology,
    pub partition: NodePartition,
    pub engine: EngineConfig,
    pub attacker: Option<AttackerSpec>,
    pub defense: Option<DefenseSet>,
}

fn setup_err(spec: &RunSpec, message: impl ToString) -> ScenarioError {
    ScenarioError::Setup { label: spec.label.clone(), message: message.to_string() }
}

pub fn load_dataset(spec: &DatasetSpec, seed: u64, base_dir: Option<&Path>) -> Result<LabeledSet, String> {
    match spec {
        DatasetSpec::Gaussian { per_class, mean_pos, mean_neg, cov } => {
            let p = mean_pos.len();
            let cov = match cov {
                Some(rows) => DMatrix::from_fn(p, p, |i, j| rows[i][j]),
                None => DMatrix::identity(p, p),
            };
            gen_gaussian(*per_class, mean_pos, mean_neg, &cov, seed).map_err(|e| e.to_string())
        }
        DatasetSpec::SpamLike { rows, scale } => {
            let data = gen_spam_like(*rows, seed).map_err(|e| e.to_string())?;
            Ok(if *scale { data.min_max_scaled() } else { data })
        }
        DatasetSpec::Csv { path, label_column, positive_label, scale } => {
            let resolved = match base_dir {
                Some(dir) if path.is_relative() => dir.join(path),
                _ => path.clone(),
            };
            let data = load_csv(&resolved, label_column, positive_label)
                .map_err(|e| format!("{}: {e}", resolved.display()))?;
            Ok(if *scale { data.min_max_scaled() } else { data })
        }
    }
}

pub fn prepare(spec: &RunSpec, base_dir: Option<&Path>) -> Result<PreparedRun, ScenarioError> {
    let topology = make_topology(&spec.topology, sub_seed(spec.seed, 2)).map_err(|e| setup_err(spec, e))?;
    let data = load_dataset(&spec.dataset, spec.seed, base_dir).map_err(|e| setup_err(spec, e))?;
    let part = partition(
        &data,
        &topology,
        &spec.partition.train_per_node,
        spec.partition.test_per_node,
        sub_seed(spec.seed, 1),
    )
    .map_err(|e| setup_err(spec, e))?;

    let e = &spec.engine;
    let engine = EngineConfig {
        c_l: e.c_l,
        eta: e.eta,
        rounds: e.rounds,
        seed: sub_seed(spec.seed, 3),
        init: e.init,
        inner_rounds: e.inner_rounds,
        qp_tol: e.qp_tol,
        shrink_u_with_trusted: e.shrink_u_with_trusted,
    };
    engine.validate().map_err(|err| setup_err(spec, err))?;

    let attacker = match &spec.attacker {
        None => None,
        Some(section) => {
            let mut atk = match section.plan()? {
                AttackerPlan::Explicit { budgets } => AttackerSpec::new(budgets, section.cost),
                AttackerPlan::Strategy { preset, cap } => {
                    expand_preset(&preset, &topology, cap, section.cost).map_err(|err| setup_err(spec, err))?
                }
            };
            atk.start_round = section.start_round;
            atk.validate(&topology).map_err(|err| setup_err(spec, err))?;
            Some(atk)
        }
    };

    let defense = spec.defense.map(|d| DefenseSet {
        verification: d.verification.map(|v| VerificationConfig { tau: v.tau }),
        rejection: d
            .rejection
            .map(|r| RejectionConfig { rho: r.rho, j_init: r.j_init, burn_in: r.burn_in }),
    });
    if let Some(d) = &defense {
        d.validate().map_err(|err| setup_err(spec, err))?;
    }

    Ok(PreparedRun { spec: spec.clone(), topology, partition: part, engine, attacker, defense })
}

/// Stable identifier of a run: hash of its resolved configuration.
pub fn run_id(spec: &RunSpec) -> String {
    let json = serde_json::to_vec(spec).expect("run specs serialize");
    hex::encode(&Sha256::digest(&json)[..8])
}

impl PreparedRun {
    pub fn execute(&self) -> Result<RiskTrace, ScenarioError> {
        let adversary = self.attacker.as_ref().map(|a| a as &dyn Adversary);
        let defense = self.defense.as_ref().filter(|d| !d.is_empty()).map(|d| d as &dyn Defense);
        let mut trace = run(&self.engine, &self.partition, &self.topology, adversary, defense)
            .map_err(|source| ScenarioError::Engine { label: self.spec.label.clone(), source })?;
        trace.metadata = Some(RunMetadata {
            run_id: run_id(&self.spec),
            label: self.spec.label.clone(),
            seed: self.spec.seed,
            config: serde_json::to_value(&self.spec).expect("run specs serialize"),
        });
        Ok(trace)
    }
}

/// Runs configured for a scenario, in config order.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub name: String,
    pub runs: Vec<(RunSpec, RiskTrace)>,
}

impl ScenarioOutcome {
    pub fn trace(&self, label: &str) -> Option<&RiskTrace> {
        self.runs.iter().find(|(s, _)| s.label == label).map(|(_, t)| t)
    }
}

#[derive(Serialize)]
struct RunSummary<'a> {
    label: &'a str,
    run_id: String,
    seed: u64,
    rounds: usize,
    final_global_risk: f64,
    final_node_risks: &'a [f64],
    smoothed_final_global_risk: f64,
    moving_average: usize,
    final_consensus_gap: f64,
    rejections: usize,
    qp_unconverged: usize,
    config: &'a RunSpec,
}

#[derive(Serialize)]
struct Summary<'a> {
    name: &'a str,
    description: &'a str,
    generated_unix: u64,
    elapsed_seconds: f64,
    runs: Vec<RunSummary<'a>>,
}

/// Number of worker threads requested through [`WORKERS_ENV`], if any.
pub fn workers_from_env() -> Result<Option<usize>, ScenarioError> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(ScenarioError::Workers(raw)),
        },
    }
}

/// Executes every run of `cfg` (runs in parallel) and, when `out_dir` is
/// given, writes `trace.csv`, one `trace_<label>.csv` per run,
/// `summary.json`, and `risk.svg` when `emit_svg` or the config asks for it.
pub fn run_scenario(cfg: &RunConfig, out_dir: Option<&Path>, emit_svg: bool) -> Result<ScenarioOutcome, ScenarioError> {
    let specs = cfg.runs()?;
    let base_dir = cfg.base_dir.as_deref();
    let started = Instant::now();
    let prepared: Vec<PreparedRun> = specs.iter().map(|s| prepare(s, base_dir)).collect::<Result<_, _>>()?;

    let execute_all = || prepared.par_iter().map(PreparedRun::execute).collect::<Result<Vec<_>, _>>();
    let traces = match workers_from_env()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| ScenarioError::Workers(e.to_string()))?
            .install(execute_all)?,
        None => execute_all()?,
    };
    let elapsed = started.elapsed().as_secs_f64();
    log::info!("scenario {} finished {} runs in {elapsed:.2}s", cfg.name, traces.len());

    let outcome = ScenarioOutcome { name: cfg.name.clone(), runs: specs.into_iter().zip(traces).collect() };
    if let Some(dir) = out_dir {
        let svg = emit_svg || outcome.runs.iter().any(|(s, _)| s.output.emit_svg);
        write_outputs(cfg, &outcome, dir, svg, elapsed)?;
    }
    Ok(outcome)
}

fn output_err(path: &Path, e: impl ToString) -> ScenarioError {
    ScenarioError::Output { path: path.to_path_buf(), message: e.to_string() }
}

fn create(path: &Path) -> Result<BufWriter<File>, ScenarioError> {
    File::create(path).map(BufWriter::new).map_err(|e| output_err(path, e))
}

/// File-name-safe form of a run label.
pub fn label_slug(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn write_outputs(
    cfg: &RunConfig,
    outcome: &ScenarioOutcome,
    dir: &Path,
    emit_svg: bool,
    elapsed: f64,
) -> Result<(), ScenarioError> {
    std::fs::create_dir_all(dir).map_err(|e| output_err(dir, e))?;

    let labelled: Vec<(String, RiskTrace)> =
        outcome.runs.iter().map(|(s, t)| (s.label.clone(), t.clone())).collect();
    let combined = dir.join("trace.csv");
    write_combined_csv(&labelled, create(&combined)?).map_err(|e| output_err(&combined, e))?;
    for (spec, trace) in &outcome.runs {
        let path = dir.join(format!("trace_{}.csv", label_slug(&spec.label)));
        trace.write_csv(create(&path)?).map_err(|e| output_err(&path, e))?;
    }

    let runs = outcome
        .runs
        .iter()
        .map(|(spec, trace)| {
            let last = trace.final_report();
            let window = spec.moving_average();
            RunSummary {
                label: &spec.label,
                run_id: run_id(spec),
                seed: spec.seed,
                rounds: trace.rounds(),
                final_global_risk: last.global_risk,
                final_node_risks: &last.local_risk,
                smoothed_final_global_risk: *moving_average(&trace.global_risk(), window).last().unwrap_or(&0.0),
                moving_average: window,
                final_consensus_gap: last.consensus_gap,
                rejections: trace.rejection_count(),
                qp_unconverged: trace.reports.iter().map(|r| r.qp_unconverged).sum(),
                config: spec,
            }
        })
        .collect();
    let generated_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let summary = Summary { name: &cfg.name, description: &cfg.description, generated_unix, elapsed_seconds: elapsed, runs };
    let path = dir.join("summary.json");
    serde_json::to_writer_pretty(create(&path)?, &summary).map_err(|e| output_err(&path, e))?;

    if emit_svg {
        let series: Vec<Series> = outcome
            .runs
            .iter()
            .map(|(spec, trace)| Series {
                label: spec.label.clone(),
                values: moving_average(&trace.global_risk(), spec.moving_average()),
            })
            .collect();
        let path = dir.join("risk.svg");
        let title = format!("{}: global risk", cfg.name);
        std::fs::write(&path, line_chart(&title, "round", "global risk", &series)).map_err(|e| output_err(&path, e))?;
    }
    Ok(())
}
