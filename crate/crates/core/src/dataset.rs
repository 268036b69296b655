//! Labeled data: synthetic generators, CSV ingestion, and the per-node
//! train/test partition with the augmented `[x | 1]` encoding.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::Topology;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("covariance must be symmetric positive definite: {0}")]
    BadCovariance(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("labels must be +1 or -1, found {0}")]
    BadLabel(f64),
    #[error("parse error at row {row}, column {column}: {message}")]
    ParseError { row: usize, column: usize, message: String },
    #[error("non-finite feature value at row {row}, column {column}")]
    NonNumericFeature { row: usize, column: usize },
    #[error("label column {0} not found")]
    MissingColumn(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("node {node} training set holds a single class after {attempts} reshuffles")]
    SingleClassNode { node: usize, attempts: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Feature matrix (`N x p`) with `+1/-1` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: DMatrix<f64>,
    pub labels: Vec<f64>,
}

impl LabeledSet {
    pub fn new(features: DMatrix<f64>, labels: Vec<f64>) -> Result<Self, DatasetError> {
        if features.nrows() != labels.len() {
            return Err(DatasetError::DimensionMismatch(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
            return Err(DatasetError::BadLabel(bad));
        }
        if let Some(idx) = features.iter().position(|x| !x.is_finite()) {
            let (row, column) = (idx % features.nrows(), idx / features.nrows());
            return Err(DatasetError::NonNumericFeature { row, column });
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn has_both_classes(&self) -> bool {
        self.labels.contains(&1.0) && self.labels.contains(&-1.0)
    }

    /// Copies the given rows, in order.
    pub fn subset(&self, rows: &[usize]) -> LabeledSet {
        let features = self.features.select_rows(rows);
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        LabeledSet { features, labels }
    }

    /// Per-column min-max scaling to `[0, 1]`; constant columns map to 0.
    pub fn min_max_scaled(&self) -> LabeledSet {
        let mut features = self.features.clone();
        for mut col in features.column_iter_mut() {
            let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
            let span = hi - lo;
            for x in col.iter_mut() {
                *x = if span > 0.0 { (*x - lo) / span } else { 0.0 };
            }
        }
        LabeledSet { features, labels: self.labels.clone() }
    }
}

/// Draws `n_per_class` samples from each of two Gaussians sharing `covariance`.
/// Positive samples come first.
pub fn gen_gaussian(
    n_per_class: usize,
    mean_pos: &[f64],
    mean_neg: &[f64],
    covariance: &DMatrix<f64>,
    seed: u64,
) -> Result<LabeledSet, DatasetError> {
    let p = mean_pos.len();
    if mean_neg.len() != p || covariance.shape() != (p, p) {
        return Err(DatasetError::DimensionMismatch(format!(
            "means have lengths {} and {}, covariance is {}x{}",
            p,
            mean_neg.len(),
            covariance.nrows(),
            covariance.ncols()
        )));
    }
    if n_per_class == 0 {
        return Err(DatasetError::EmptyDataset);
    }
    if (covariance - covariance.transpose()).abs().max() > 1e-12 * (1.0 + covariance.abs().max()) {
        return Err(DatasetError::BadCovariance("matrix is not symmetric".into()));
    }
    let chol = covariance
        .clone()
        .cholesky()
        .ok_or_else(|| DatasetError::BadCovariance("Cholesky factorization failed".into()))?;
    let factor = chol.l();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = DMatrix::zeros(2 * n_per_class, p);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for (class, mean) in [(1.0, mean_pos), (-1.0, mean_neg)] {
        for _ in 0..n_per_class {
            let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = DVector::from_column_slice(mean) + &factor * z;
            features.set_row(labels.len(), &x.transpose());
            labels.push(class);
        }
    }
    LabeledSet::new(features, labels)
}

/// Number of columns produced by [`gen_spam_like`].
pub const SPAM_LIKE_DIM: usize = 57;

/// Synthetic stand-in with the Spambase column layout: 48 word-frequency
/// percentages, 6 character-frequency percentages and 3 heavy-tailed
/// capital-run statistics, unnormalized. About 39.4% of rows are spam (`+1`).
///
/// Per-column class parameters come from a fixed generator, so every seed
/// samples the same underlying distribution.
pub fn gen_spam_like(n: usize, seed: u64) -> Result<LabeledSet, DatasetError> {
    if n == 0 {
        return Err(DatasetError::EmptyDataset);
    }
    struct Column {
        present: [f64; 2],
        scale: [f64; 2],
    }
    let mut params_rng = ChaCha8Rng::seed_from_u64(0x5a4d_5350_414d);
    let freq_columns: Vec<Column> = (0..54)
        .map(|_| {
            let base: f64 = params_rng.random_range(0.05..0.45);
            let lift: f64 = params_rng.random_range(-0.6..0.9);
            let scale: f64 = params_rng.random_range(0.1..0.8);
            let spam = (base * (1.0 + lift)).clamp(0.01, 0.95);
            Column { present: [spam, base], scale: [scale * (1.0 + 0.5 * lift.max(0.0)), scale] }
        })
        .collect();
    // (log-mean, log-sd) for spam and ham: average, longest, total capital run.
    let capital = [[(1.3, 0.7), (0.6, 0.5)], [(3.6, 1.1), (2.4, 1.0)], [(5.6, 1.2), (4.4, 1.3)]];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = DMatrix::zeros(n, SPAM_LIKE_DIM);
    let mut labels = Vec::with_capacity(n);
    for row in 0..n {
        let spam = rng.random_bool(0.394);
        let class = usize::from(!spam);
        for (j, col) in freq_columns.iter().enumerate() {
            if rng.random_bool(col.present[class]) {
                let v: f64 = Exp::new(1.0 / col.scale[class]).expect("positive rate").sample(&mut rng);
                features[(row, j)] = (v * 100.0).round() / 100.0;
            }
        }
        for (k, dist) in capital.iter().enumerate() {
            let (mu, sd) = dist[class];
            let v: f64 = LogNormal::new(mu, sd).expect("valid lognormal").sample(&mut rng);
            features[(row, 54 + k)] = if k == 0 { 1.0 + v } else { (1.0 + v).round() };
        }
        labels.push(if spam { 1.0 } else { -1.0 });
    }
    LabeledSet::new(features, labels)
}

/// Which CSV column holds the label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

fn labels_match(raw: &str, positive: &str) -> bool {
    let (raw, positive) = (raw.trim(), positive.trim());
    if raw == positive {
        return true;
    }
    matches!((raw.parse::<f64>(), positive.parse::<f64>()), (Ok(a), Ok(b)) if a == b)
}

/// Reads a comma-separated file. A first row containing any non-numeric cell
/// is treated as a header. Reading stops at the first blank line. Label cells
/// equal to `positive_label` map to `+1`, everything else to `-1`.
pub fn load_csv(path: &Path, label_column: &LabelColumn, positive_label: &str) -> Result<LabeledSet, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows: Vec<Vec<String>> = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            break;
        }
        rows.push(line.split(',').map(|c| c.trim().to_string()).collect());
    }
    let Some(first) = rows.first() else {
        return Err(DatasetError::EmptyDataset);
    };
    let has_header = first.iter().any(|cell| cell.parse::<f64>().is_err());
    let width = first.len();
    let label_idx = match label_column {
        LabelColumn::Index(i) if *i < width => *i,
        LabelColumn::Index(i) => return Err(DatasetError::MissingColumn(format!("index {i}"))),
        LabelColumn::Name(name) if has_header => first
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(format!("'{name}'")))?,
        LabelColumn::Name(name) => {
            return Err(DatasetError::MissingColumn(format!("'{name}' (file has no header row)")))
        }
    };
    let data_rows = if has_header { &rows[1..] } else { &rows[..] };
    if data_rows.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let header_offset = usize::from(has_header);
    let p = width - 1;
    let mut features = DMatrix::zeros(data_rows.len(), p);
    let mut labels = Vec::with_capacity(data_rows.len());
    for (i, cells) in data_rows.iter().enumerate() {
        // 1-based file line numbers in messages.
        let row = i + header_offset + 1;
        if cells.len() != width {
            return Err(DatasetError::ParseError {
                row,
                column: cells.len().min(width) + 1,
                message: format!("expected {width} cells, found {}", cells.len()),
            });
        }
        let mut j = 0;
        for (c, cell) in cells.iter().enumerate() {
            if c == label_idx {
                continue;
            }
            let value: f64 = cell.parse().map_err(|_| DatasetError::ParseError {
                row,
                column: c + 1,
                message: format!("'{cell}' is not a number"),
            })?;
            if !value.is_finite() {
                return Err(DatasetError::NonNumericFeature { row, column: c + 1 });
            }
            features[(i, j)] = value;
            j += 1;
        }
        labels.push(if labels_match(&cells[label_idx], positive_label) { 1.0 } else { -1.0 });
    }
    LabeledSet::new(features, labels)
}

/// Training-set sizes: one count for every node, or an explicit list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrainSizes {
    Uniform(usize),
    PerNode(Vec<usize>),
}

impl TrainSizes {
    fn expand(&self, nodes: usize) -> Result<Vec<usize>, DatasetError> {
        match self {
            TrainSizes::Uniform(n) => Ok(vec![*n; nodes]),
            TrainSizes::PerNode(list) if list.len() == nodes => Ok(list.clone()),
            TrainSizes::PerNode(list) => Err(DatasetError::DimensionMismatch(format!(
                "{} per-node train sizes for {} nodes",
                list.len(),
                nodes
            ))),
        }
    }
}

/// One node's local data.
#[derive(Debug, Clone)]
pub struct NodeData {
    pub train: LabeledSet,
    pub test: LabeledSet,
    /// `X_v = [features | 1]`, shape `N_v x (p+1)`.
    pub augmented: DMatrix<f64>,
    /// Diagonal of `Y_v`.
    pub label_diag: DVector<f64>,
}

impl NodeData {
    fn new(train: LabeledSet, test: LabeledSet) -> Self {
        let (augmented, label_diag) = augmented_parts(&train);
        Self { train, test, augmented, label_diag }
    }
}

fn augmented_parts(train: &LabeledSet) -> (DMatrix<f64>, DVector<f64>) {
    let (n, p) = train.features.shape();
    let augmented = DMatrix::from_fn(n, p + 1, |i, j| if j < p { train.features[(i, j)] } else { 1.0 });
    (augmented, DVector::from_column_slice(&train.labels))
}

#[derive(Debug, Clone)]
pub struct NodePartition {
    pub nodes: Vec<NodeData>,
}

impl NodePartition {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Feature dimension `p`.
    pub fn dim(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.train.dim())
    }

    pub fn total_train(&self) -> usize {
        self.nodes.iter().map(|n| n.train.len()).sum()
    }
}

/// Recomputes `X_v` and `Y_v` from each node's training set.
pub fn augment(mut part: NodePartition) -> NodePartition {
    for node in &mut part.nodes {
        let (augmented, label_diag) = augmented_parts(&node.train);
        node.augmented = augmented;
        node.label_diag = label_diag;
    }
    part
}

const RESHUFFLE_ATTEMPTS: usize = 100;

/// Splits `data` across the nodes of `topology`.
///
/// Training sets are disjoint. Test sets are drawn from the remaining rows;
/// they are disjoint when the remainder is large enough and otherwise each
/// node samples its own test set, so test rows may repeat across nodes.
pub fn partition(
    data: &LabeledSet,
    topology: &Topology,
    train_per_node: &TrainSizes,
    test_per_node: usize,
    seed: u64,
) -> Result<NodePartition, DatasetError> {
    let v = topology.node_count();
    let sizes = train_per_node.expand(v)?;
    let train_total: usize = sizes.iter().sum();
    if train_total > data.len() {
        return Err(DatasetError::InsufficientData(format!(
            "{train_total} training rows requested, {} available",
            data.len()
        )));
    }
    let remaining = data.len() - train_total;
    if test_per_node > remaining {
        return Err(DatasetError::InsufficientData(format!(
            "{test_per_node} test rows per node requested, {remaining} left after training split"
        )));
    }
    if test_per_node == 0 {
        return Err(DatasetError::InsufficientData("test sets must be non-empty".into()));
    }
    if let Some(node) = sizes.iter().position(|&n| n < 2) {
        return Err(DatasetError::InsufficientData(format!("node {node} needs at least 2 training rows")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last_single = 0;
    for _ in 0..RESHUFFLE_ATTEMPTS {
        order.shuffle(&mut rng);
        let mut offset = 0;
        let mut train_rows = Vec::with_capacity(v);
        for &n in &sizes {
            train_rows.push(&order[offset..offset + n]);
            offset += n;
        }
        let single_class = train_rows.iter().position(|rows| {
            let first = data.labels[rows[0]];
            rows.iter().all(|&i| data.labels[i] == first)
        });
        if let Some(node) = single_class {
            last_single = node;
            continue;
        }
        let pool = &order[offset..];
        let disjoint_tests = pool.len() >= v * test_per_node;
        let nodes = train_rows
            .iter()
            .enumerate()
            .map(|(node, rows)| {
                let test_rows: Vec<usize> = if disjoint_tests {
                    pool[node * test_per_node..(node + 1) * test_per_node].to_vec()
                } else {
                    pool.choose_multiple(&mut rng, test_per_node).copied().collect()
                };
                NodeData::new(data.subset(rows), data.subset(&test_rows))
            })
            .collect();
        return Ok(NodePartition { nodes });
    }
    Err(DatasetError::SingleClassNode { node: last_single, attempts: RESHUFFLE_ATTEMPTS })
}
