//! Run configuration files.
//!
//! A config is a TOML document describing one scenario: a base run plus
//! optional `[[variant]]` tables. Each variant is the base with some
//! sections overridden:
//!
//! - `dataset`, `topology`, `attacker` and `defense` are replaced wholesale;
//! - `partition`, `engine` and `output` are merged key by key;
//! - `no_attack = true` / `no_defense = true` drop the base attacker/defense.
//!
//! Thresholds (`tau`, `rho`) accept a number, `inf`, or the string `"off"`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{AttackStrategyPreset, BudgetSplit};
use crate::dataset::{LabelColumn, TrainSizes, SPAM_LIKE_DIM};
use crate::engine::{InitMode, DEFAULT_INITIAL_RESIDUAL};
use crate::subsolvers::DEFAULT_QP_TOL;
use crate::topology::{NodeId, TopologyKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("{context}: {message}")]
    Schema { context: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("unknown preset `{name}`; run `dsvm list-presets` for the catalog")]
    UnknownPreset { name: String },
}

impl ConfigError {
    fn invalid(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid { field: field.to_string(), message: message.into() }
    }
}

/// Where the labelled data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Two Gaussian classes; `cov` defaults to the identity.
    Gaussian {
        per_class: usize,
        mean_pos: Vec<f64>,
        mean_neg: Vec<f64>,
        #[serde(default)]
        cov: Option<Vec<Vec<f64>>>,
    },
    /// Synthetic data with the Spambase column layout.
    SpamLike {
        #[serde(default = "default_spam_rows")]
        rows: usize,
        #[serde(default)]
        scale: bool,
    },
    /// A CSV file; relative paths resolve against the config's directory.
    Csv {
        path: PathBuf,
        label_column: LabelColumn,
        positive_label: String,
        #[serde(default)]
        scale: bool,
    },
}

fn default_spam_rows() -> usize {
    4601
}

impl DatasetSpec {
    fn validate(&self) -> Result<(), ConfigError> {
        match self {
            DatasetSpec::Gaussian { per_class, mean_pos, mean_neg, cov } => {
                if *per_class == 0 {
                    return Err(ConfigError::invalid("dataset.per_class", "must be at least 1"));
                }
                if mean_pos.is_empty() || mean_pos.len() != mean_neg.len() {
                    return Err(ConfigError::invalid(
                        "dataset.mean_pos",
                        format!("mean_pos has {} entries, mean_neg has {}", mean_pos.len(), mean_neg.len()),
                    ));
                }
                if let Some(cov) = cov {
                    let p = mean_pos.len();
                    if cov.len() != p || cov.iter().any(|row| row.len() != p) {
                        return Err(ConfigError::invalid("dataset.cov", format!("must be a {p}x{p} matrix")));
                    }
                }
                Ok(())
            }
            DatasetSpec::SpamLike { rows, .. } if *rows == 0 => {
                Err(ConfigError::invalid("dataset.rows", "must be at least 1"))
            }
            _ => Ok(()),
        }
    }

    /// True for data sets whose risk curves are noisy enough to smooth.
    pub fn is_spam_like(&self) -> bool {
        matches!(self, DatasetSpec::SpamLike { .. } | DatasetSpec::Csv { .. })
    }

    /// Feature count, when known without loading anything.
    pub fn dim(&self) -> Option<usize> {
        match self {
            DatasetSpec::Gaussian { mean_pos, .. } => Some(mean_pos.len()),
            DatasetSpec::SpamLike { .. } => Some(SPAM_LIKE_DIM),
            DatasetSpec::Csv { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub train_per_node: TrainSizes,
    pub test_per_node: usize,
}

/// Engine parameters; the seed comes from the run's top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    pub c_l: f64,
    pub eta: f64,
    pub rounds: usize,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default = "one")]
    pub inner_rounds: usize,
    #[serde(default = "default_qp_tol")]
    pub qp_tol: f64,
    #[serde(default)]
    pub shrink_u_with_trusted: bool,
}

fn one() -> usize {
    1
}

fn default_qp_tol() -> f64 {
    DEFAULT_QP_TOL
}

/// Either an explicit `nodes`/`budgets` list or a named `strategy` with a
/// total `cap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackerSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<NodeId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budgets: Option<Vec<f64>>,
    /// `single-node`, `high-degree-pair` or `random-node`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<BudgetSplit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<f64>,
    pub cost: f64,
    #[serde(default)]
    pub start_round: usize,
}

/// How the attacker section resolves.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackerPlan {
    Explicit { budgets: Vec<(NodeId, f64)> },
    Strategy { preset: AttackStrategyPreset, cap: f64 },
}

impl AttackerSection {
    pub fn plan(&self) -> Result<AttackerPlan, ConfigError> {
        match (&self.strategy, &self.nodes, &self.budgets) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => Err(ConfigError::invalid(
                "attacker",
                "give either `strategy` (with `cap`) or `nodes` + `budgets`, not both",
            )),
            (Some(name), None, None) => {
                let cap = self
                    .cap
                    .ok_or_else(|| ConfigError::invalid("attacker.cap", "a strategy needs a total budget `cap`"))?;
                let preset = match name.as_str() {
                    "single-node" => AttackStrategyPreset::SingleNode {
                        node: self.node.ok_or_else(|| {
                            ConfigError::invalid("attacker.node", "strategy `single-node` needs `node`")
                        })?,
                    },
                    "high-degree-pair" => AttackStrategyPreset::HighDegreePair {
                        split: self.split.ok_or_else(|| {
                            ConfigError::invalid(
                                "attacker.split",
                                "strategy `high-degree-pair` needs `split = \"balanced\"` or `\"unbalanced\"`",
                            )
                        })?,
                    },
                    "random-node" => AttackStrategyPreset::RandomNode { seed: self.strategy_seed.unwrap_or(0) },
                    other => {
                        return Err(ConfigError::invalid(
                            "attacker.strategy",
                            format!("unknown strategy `{other}` (expected single-node, high-degree-pair, random-node)"),
                        ))
                    }
                };
                Ok(AttackerPlan::Strategy { preset, cap })
            }
            (None, Some(nodes), Some(budgets)) => {
                if nodes.len() != budgets.len() {
                    return Err(ConfigError::invalid(
                        "attacker.budgets",
                        format!("{} budgets for {} nodes", budgets.len(), nodes.len()),
                    ));
                }
                let mut sorted = nodes.clone();
                sorted.sort_unstable();
                if sorted.windows(2).any(|w| w[0] == w[1]) {
                    return Err(ConfigError::invalid("attacker.nodes", "nodes must be distinct"));
                }
                Ok(AttackerPlan::Explicit { budgets: nodes.iter().copied().zip(budgets.iter().copied()).collect() })
            }
            (None, _, _) => Err(ConfigError::invalid(
                "attacker",
                "missing `nodes` + `budgets` (or a `strategy` with `cap`)",
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationSection {
    #[serde(deserialize_with = "threshold")]
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RejectionSection {
    #[serde(deserialize_with = "threshold")]
    pub rho: f64,
    #[serde(default = "default_j_init")]
    pub j_init: f64,
    #[serde(default)]
    pub burn_in: usize,
}

fn default_j_init() -> f64 {
    DEFAULT_INITIAL_RESIDUAL
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<RejectionSection>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Trailing window for smoothed risk curves; 20 for spam-like and CSV
    /// data, 1 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moving_average: Option<usize>,
    #[serde(default)]
    pub emit_svg: bool,
}

/// A single fully resolved run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub label: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub topology: TopologyKind,
    pub partition: PartitionSpec,
    pub engine: EngineSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attacker: Option<AttackerSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defense: Option<DefenseSection>,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunSpec {
    pub fn moving_average(&self) -> usize {
        self.output.moving_average.unwrap_or(if self.dataset.is_spam_like() { 20 } else { 1 })
    }

    fn validate(&self) -> Result<(), ConfigError> {
        self.dataset.validate()?;
        if self.partition.test_per_node == 0 {
            return Err(ConfigError::invalid("partition.test_per_node", "must be at least 1"));
        }
        if self.engine.rounds == 0 {
            return Err(ConfigError::invalid("engine.rounds", "must be at least 1"));
        }
        if !(self.engine.c_l > 0.0) || !(self.engine.eta > 0.0) {
            return Err(ConfigError::invalid("engine", "c_l and eta must be positive"));
        }
        if let Some(a) = &self.attacker {
            a.plan()?;
        }
        if let Some(d) = &self.defense {
            if let Some(v) = d.verification {
                if !(v.tau >= 0.0) {
                    return Err(ConfigError::invalid("defense.verification.tau", "must be >= 0"));
                }
            }
            if let Some(r) = d.rejection {
                if !(r.rho >= 1.0) {
                    return Err(ConfigError::invalid("defense.rejection.rho", "must be >= 1"));
                }
            }
        }
        Ok(())
    }
}

const TOP_LEVEL_ONLY: [&str; 3] = ["name", "description", "variant"];
const REPLACED: [&str; 4] = ["dataset", "topology", "attacker", "defense"];
const MERGED: [&str; 3] = ["partition", "engine", "output"];

/// A parsed config file: shared base plus variants.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub name: String,
    pub description: String,
    base: toml::Table,
    variants: Vec<toml::Table>,
    /// Directory that relative data paths resolve against.
    pub base_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let mut base: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let name = take_string(&mut base, "name")?.unwrap_or_else(|| "scenario".to_string());
        let description = take_string(&mut base, "description")?.unwrap_or_default();
        let variants = match base.remove("variant") {
            None => Vec::new(),
            Some(toml::Value::Array(items)) => items
                .into_iter()
                .enumerate()
                .map(|(i, item)| match item {
                    toml::Value::Table(t) => Ok(t),
                    _ => Err(ConfigError::invalid(&format!("variant[{i}]"), "must be a table")),
                })
                .collect::<Result<_, _>>()?,
            Some(_) => return Err(ConfigError::invalid("variant", "use [[variant]] tables")),
        };
        let cfg = Self { name, description, base, variants, base_dir: None };
        cfg.runs()?;
        Ok(cfg)
    }

    /// Overrides the top-level seed for every run.
    pub fn set_seed(&mut self, seed: u64) {
        self.base.insert("seed".into(), toml::Value::Integer(seed as i64));
    }

    pub fn seed(&self) -> Option<u64> {
        self.base.get("seed").and_then(toml::Value::as_integer).map(|s| s as u64)
    }

    pub fn variant_count(&self) -> usize {
        self.variants.len().max(1)
    }

    /// All runs in file order, validated.
    pub fn runs(&self) -> Result<Vec<RunSpec>, ConfigError> {
        if self.variants.is_empty() {
            let mut table = self.base.clone();
            table.insert("label".into(), toml::Value::String(self.name.clone()));
            return Ok(vec![to_run(table, "base run")?]);
        }
        let mut runs = Vec::with_capacity(self.variants.len());
        let mut labels = Vec::new();
        for (i, variant) in self.variants.iter().enumerate() {
            let context = format!("variant[{i}]");
            let table = merge_variant(&self.base, variant, &context)?;
            let run = to_run(table, &context)?;
            if labels.contains(&run.label) {
                return Err(ConfigError::invalid(&context, format!("duplicate label `{}`", run.label)));
            }
            labels.push(run.label.clone());
            runs.push(run);
        }
        Ok(runs)
    }
}

fn take_string(table: &mut toml::Table, key: &str) -> Result<Option<String>, ConfigError> {
    match table.remove(key) {
        None => Ok(None),
        Some(toml::Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(ConfigError::invalid(key, "must be a string")),
    }
}

fn merge_variant(base: &toml::Table, variant: &toml::Table, context: &str) -> Result<toml::Table, ConfigError> {
    let mut out = base.clone();
    for (key, value) in variant {
        match key.as_str() {
            "label" => {
                out.insert(key.clone(), value.clone());
            }
            "no_attack" | "no_defense" => {
                let drop = value
                    .as_bool()
                    .ok_or_else(|| ConfigError::invalid(&format!("{context}.{key}"), "must be true or false"))?;
                if drop {
                    out.remove(if key == "no_attack" { "attacker" } else { "defense" });
                }
            }
            k if REPLACED.contains(&k) => {
                out.insert(key.clone(), value.clone());
            }
            k if MERGED.contains(&k) => {
                let patch = value
                    .as_table()
                    .ok_or_else(|| ConfigError::invalid(&format!("{context}.{key}"), "must be a table"))?;
                let entry = out.entry(key.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                let target = entry
                    .as_table_mut()
                    .ok_or_else(|| ConfigError::invalid(key, "must be a table"))?;
                for (k2, v2) in patch {
                    target.insert(k2.clone(), v2.clone());
                }
            }
            k if TOP_LEVEL_ONLY.contains(&k) || k == "seed" => {
                return Err(ConfigError::invalid(
                    &format!("{context}.{key}"),
                    "may only be set at the top level of the file",
                ))
            }
            other => {
                return Err(ConfigError::invalid(
                    &format!("{context}.{other}"),
                    "unknown key (variants may set label, no_attack, no_defense, dataset, topology, attacker, defense, partition, engine, output)",
                ))
            }
        }
    }
    if !out.contains_key("label") {
        return Err(ConfigError::invalid(context, "every variant needs a `label`"));
    }
    Ok(out)
}

fn to_run(table: toml::Table, context: &str) -> Result<RunSpec, ConfigError> {
    let run: RunSpec = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Schema { context: context.to_string(), message: e.to_string() })?;
    run.validate()?;
    Ok(run)
}

/// Accepts a number, `inf`, or `"off"` / `"inf"` for a disabled threshold.
fn threshold<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
    struct ThresholdVisitor;

    impl Visitor<'_> for ThresholdVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a number, inf, or \"off\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "off" | "inf" | "infinity" => Ok(f64::INFINITY),
                other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
            }
        }
    }

    de.deserialize_any(ThresholdVisitor)
}
