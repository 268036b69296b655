//! Synchronous consensus-ADMM round engine.
//!
//! Each round runs, with a barrier between phases:
//!
//! 1. attacker best response at compromised nodes (`delta_v`),
//! 2. per-node dual QP for `lambda_v` and the primal update of `r_v`,
//! 3. broadcast of `r_v` to graph neighbors,
//! 4. optional neighbor verification (trusted set),
//! 5. consensus `omega_vu` and multiplier `alpha_v` updates,
//! 6. optional per-node rejection of the whole update.
//!
//! Per-node work only reads barrier snapshots, so a run is bit-identical
//! regardless of how many worker threads execute it.

mod mailbox;

pub use mailbox::{Mailbox, Message};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{LabeledSet, NodePartition};
use crate::defenses::combined_residual_node;
use crate::harness::metrics::{consensus_gap, global_risk_from_errors, misclassified, risk_from_errors};
use crate::harness::trace::RiskTrace;
use crate::subsolvers::{build_u_inverse, solve_box_qp, BoxQp, SolverError, DEFAULT_QP_TOL};
use crate::topology::{NodeId, Topology};

/// Initial `J_v`, large enough that the first rejection test always passes.
pub const DEFAULT_INITIAL_RESIDUAL: f64 = 1e18;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("node {node}: {source}")]
    Solver {
        node: NodeId,
        #[source]
        source: SolverError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum InitMode {
    #[default]
    Zero,
    /// `r`, `omega` uniform in `[-range, range]`; `lambda` uniform in
    /// `[0, range]` then clipped into the box.
    RandomUniform { range: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub c_l: f64,
    pub eta: f64,
    pub rounds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: InitMode,
    /// Learner rounds per attacker best response.
    #[serde(default = "default_inner_rounds")]
    pub inner_rounds: usize,
    #[serde(default = "default_qp_tol")]
    pub qp_tol: f64,
    /// Size `U_v` from the trusted neighbor count instead of the graph degree.
    #[serde(default)]
    pub shrink_u_with_trusted: bool,
}

fn default_inner_rounds() -> usize {
    1
}

fn default_qp_tol() -> f64 {
    DEFAULT_QP_TOL
}

impl EngineConfig {
    pub fn new(c_l: f64, eta: f64, rounds: usize, seed: u64) -> Self {
        Self {
            c_l,
            eta,
            rounds,
            seed,
            init: InitMode::Zero,
            inner_rounds: 1,
            qp_tol: DEFAULT_QP_TOL,
            shrink_u_with_trusted: false,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.c_l > 0.0) {
            return Err(EngineError::InvalidConfig(format!("C_l = {} must be positive", self.c_l)));
        }
        if !(self.eta > 0.0) {
            return Err(EngineError::InvalidConfig(format!("eta = {} must be positive", self.eta)));
        }
        if self.rounds == 0 {
            return Err(EngineError::InvalidConfig("rounds must be at least 1".into()));
        }
        if self.inner_rounds == 0 {
            return Err(EngineError::InvalidConfig("inner_rounds must be at least 1".into()));
        }
        if let InitMode::RandomUniform { range } = self.init {
            if !(range >= 0.0) {
                return Err(EngineError::InvalidConfig(format!("init range {range} must be non-negative")));
            }
        }
        if !(self.qp_tol > 0.0) {
            return Err(EngineError::InvalidConfig("qp_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Attacker hook, consulted at the start of each round.
pub trait Adversary: Sync {
    /// Number of compromised nodes `V_a`; scales the perturbation term in `f_v`.
    fn compromised_count(&self) -> usize;

    /// Perturbation `delta_v` (length `p`) for `node` given its current
    /// `r_v`, or `None` for no perturbation.
    fn perturb(&self, round: usize, node: NodeId, r: &DVector<f64>, c_l: f64) -> Option<DVector<f64>>;
}

/// Defense hook: neighbor verification and update rejection.
pub trait Defense: Sync {
    /// Trusted subset of `received` (neighbor id, `r_u`) for `node`, or
    /// `None` to trust every graph neighbor.
    fn verify(&self, node: NodeId, r_v: &DVector<f64>, received: &[Message]) -> Option<Vec<NodeId>>;

    /// Whether the update that produced residual `j_new` must be reverted.
    fn reject(&self, round: usize, node: NodeId, j_new: f64, j_old: f64) -> bool;

    fn initial_residual(&self) -> f64 {
        DEFAULT_INITIAL_RESIDUAL
    }
}

/// Learner state of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    /// `r_v = [w_v; b_v]`.
    pub r: DVector<f64>,
    pub lambda: DVector<f64>,
    pub alpha: DVector<f64>,
    /// `omega_vu`, aligned with the node's sorted graph neighbors.
    pub omega: Vec<DVector<f64>>,
    /// Last received `r_u`, aligned with the graph neighbors.
    pub inbox: Vec<DVector<f64>>,
    /// Current attacker perturbation (length `p`), zero when uncompromised.
    pub delta: DVector<f64>,
    /// Combined residual `J_v` of the last accepted update.
    pub j: f64,
    /// Trusted-neighbor mask, aligned with the graph neighbors.
    pub trusted: Vec<bool>,
}

impl NodeState {
    pub fn w(&self) -> DVector<f64> {
        self.r.rows(0, self.r.len() - 1).into_owned()
    }

    pub fn trusted_count(&self) -> usize {
        self.trusted.iter().filter(|&&t| t).count()
    }
}

/// Per-node data that stays fixed for the run, plus the QP matrix cached
/// for the current `U_v`.
#[derive(Debug, Clone)]
struct NodeKernel {
    /// `Y_v X_v`.
    yx: DMatrix<f64>,
    test: LabeledSet,
    neighbors: Vec<NodeId>,
    u_count: usize,
    u_inv: DVector<f64>,
    q: DMatrix<f64>,
}

impl NodeKernel {
    fn refresh_u(&mut self, p: usize, eta: f64, count: usize) -> Result<(), SolverError> {
        if count == self.u_count {
            return Ok(());
        }
        self.u_inv = build_u_inverse(p, eta, count)?;
        let scaled = DMatrix::from_fn(self.yx.nrows(), self.yx.ncols(), |i, j| self.yx[(i, j)] * self.u_inv[j]);
        let mut q = &scaled * self.yx.transpose();
        // exact symmetry for the solver's check
        for i in 0..q.nrows() {
            for j in 0..i {
                let m = 0.5 * (q[(i, j)] + q[(j, i)]);
                q[(i, j)] = m;
                q[(j, i)] = m;
            }
        }
        self.q = q;
        self.u_count = count;
        Ok(())
    }
}

/// Snapshot of one completed round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based index of the round just completed.
    pub round: usize,
    pub r: Vec<DVector<f64>>,
    pub consensus_gap: f64,
    pub local_risk: Vec<f64>,
    pub global_risk: f64,
    /// Misclassified test samples per node.
    pub errors: Vec<usize>,
    /// `J_v` after the rejection gate.
    pub j: Vec<f64>,
    /// Global combined residual of this round's (pre-gate) updates.
    pub global_residual: f64,
    pub delta_norm_sq: Vec<f64>,
    pub verified_count: Vec<usize>,
    pub rejected: Vec<bool>,
    /// Nodes whose QP hit the sweep budget before tolerance.
    pub qp_unconverged: usize,
}

/// Full engine state between rounds.
#[derive(Debug, Clone)]
pub struct EngineState {
    cfg: EngineConfig,
    p: usize,
    node_count: usize,
    round: usize,
    kernels: Vec<NodeKernel>,
    pub nodes: Vec<NodeState>,
}

/// Prepares the state for round 0: `alpha_v = 0`, the remaining iterates per
/// `cfg.init`, `U_v^{-1}` precomputed from the graph degree.
pub fn init_run(
    cfg: &EngineConfig,
    part: &NodePartition,
    topo: &Topology,
    initial_residual: f64,
) -> Result<EngineState, EngineError> {
    cfg.validate()?;
    let v_count = topo.node_count();
    if part.node_count() != v_count {
        return Err(EngineError::ShapeMismatch(format!(
            "partition has {} nodes, topology has {v_count}",
            part.node_count()
        )));
    }
    let p = part.dim();
    let upper = v_count as f64 * cfg.c_l;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut kernels = Vec::with_capacity(v_count);
    let mut nodes = Vec::with_capacity(v_count);
    for (v, data) in part.nodes.iter().enumerate() {
        if data.train.dim() != p || data.test.dim() != p {
            return Err(EngineError::ShapeMismatch(format!("node {v} has feature dimension {}", data.train.dim())));
        }
        let neighbors = topo.neighbors(v).to_vec();
        let yx = DMatrix::from_fn(data.augmented.nrows(), p + 1, |i, j| data.label_diag[i] * data.augmented[(i, j)]);
        let mut kernel = NodeKernel {
            yx,
            test: data.test.clone(),
            neighbors: neighbors.clone(),
            u_count: 0,
            u_inv: DVector::zeros(p + 1),
            q: DMatrix::zeros(0, 0),
        };
        kernel.refresh_u(p, cfg.eta, neighbors.len()).map_err(|source| EngineError::Solver { node: v, source })?;

        let n_v = data.train.len();
        let deg = neighbors.len();
        let (r, lambda, omega) = match cfg.init {
            InitMode::Zero => (DVector::zeros(p + 1), DVector::zeros(n_v), vec![DVector::zeros(p + 1); deg]),
            InitMode::RandomUniform { range } => {
                let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
                let r = DVector::from_fn(p + 1, |_, _| uniform(-range, range));
                let lambda = DVector::from_fn(n_v, |_, _| uniform(0.0, range).clamp(0.0, upper));
                let omega = (0..deg).map(|_| DVector::from_fn(p + 1, |_, _| uniform(-range, range))).collect();
                (r, lambda, omega)
            }
        };
        nodes.push(NodeState {
            r,
            lambda,
            alpha: DVector::zeros(p + 1),
            omega,
            inbox: vec![DVector::zeros(p + 1); deg],
            delta: DVector::zeros(p),
            j: initial_residual,
            trusted: vec![true; deg],
        });
        kernels.push(kernel);
    }
    Ok(EngineState { cfg: cfg.clone(), p, node_count: v_count, round: 0, kernels, nodes })
}

impl EngineState {
    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn neighbors(&self, v: NodeId) -> &[NodeId] {
        &self.kernels[v].neighbors
    }

    pub fn test_sizes(&self) -> Vec<usize> {
        self.kernels.iter().map(|k| k.test.len()).collect()
    }

    /// Diagonal of the `U_v^{-1}` currently in use at `v`.
    pub fn u_inverse(&self, v: NodeId) -> &DVector<f64> {
        &self.kernels[v].u_inv
    }

    /// Executes one round and reports on it.
    pub fn step(&mut self, adversary: Option<&dyn Adversary>, defense: Option<&dyn Defense>) -> Result<RoundReport, EngineError> {
        let t = self.round;
        let p = self.p;
        let cfg = self.cfg.clone();
        let upper = self.node_count as f64 * cfg.c_l;

        // (a) attacker best response against r_v^(t)
        let attack_scale = match adversary {
            Some(adv) if adv.compromised_count() > 0 => {
                if t % cfg.inner_rounds == 0 {
                    for (v, node) in self.nodes.iter_mut().enumerate() {
                        node.delta = adv.perturb(t, v, &node.r, cfg.c_l).unwrap_or_else(|| DVector::zeros(p));
                    }
                }
                Some(adv.compromised_count() as f64 * cfg.c_l)
            }
            _ => None,
        };

        let previous = self.nodes.clone();

        // (b) dual QP and primal update, per node
        let results: Vec<Result<bool, EngineError>> = self
            .nodes
            .par_iter_mut()
            .zip(self.kernels.par_iter_mut())
            .enumerate()
            .map(|(v, (node, kernel))| {
                let count = if cfg.shrink_u_with_trusted && node.trusted_count() > 0 {
                    node.trusted_count()
                } else {
                    kernel.neighbors.len()
                };
                kernel.refresh_u(p, cfg.eta, count).map_err(|source| EngineError::Solver { node: v, source })?;
                let mut f = 2.0 * &node.alpha;
                for (omega, _) in node.omega.iter().zip(&node.trusted).filter(|(_, &t)| t) {
                    f.axpy(-2.0 * cfg.eta, omega, 1.0);
                }
                if let Some(scale) = attack_scale {
                    for i in 0..p {
                        f[i] += scale * node.delta[i];
                    }
                }
                let uf = kernel.u_inv.component_mul(&f);
                let c = (&kernel.yx * &uf).add_scalar(1.0);
                let mut prob = BoxQp::new(kernel.q.clone(), c, upper);
                prob.tol = cfg.qp_tol;
                let (lambda, converged) = match solve_box_qp(&prob, Some(&node.lambda)) {
                    Ok(sol) => (sol.lambda, true),
                    Err(SolverError::NoProgress { best, .. }) => (best, false),
                    Err(source) => return Err(EngineError::Solver { node: v, source }),
                };
                let xty = kernel.yx.tr_mul(&lambda);
                node.r = kernel.u_inv.component_mul(&(xty - f));
                node.lambda = lambda;
                Ok(converged)
            })
            .collect();
        let mut qp_unconverged = 0;
        for res in results {
            if !res? {
                qp_unconverged += 1;
            }
        }

        // (c) broadcast behind a barrier
        let mut mailbox = Mailbox::new(self.node_count);
        for (v, kernel) in self.kernels.iter().enumerate() {
            for &u in &kernel.neighbors {
                mailbox.send(v, u, self.nodes[v].r.clone());
            }
        }
        let delivered = mailbox.deliver();

        let eta = cfg.eta;
        let (rejected, residuals): (Vec<bool>, Vec<f64>) = self
            .nodes
            .par_iter_mut()
            .zip(self.kernels.par_iter())
            .zip(delivered.into_par_iter())
            .zip(previous.par_iter())
            .enumerate()
            .map(|(v, (((node, kernel), inbox), prev))| {
                debug_assert!(inbox.iter().map(|m| m.from).eq(kernel.neighbors.iter().copied()));
                // (d) verification
                node.trusted = match defense.and_then(|d| d.verify(v, &node.r, &inbox)) {
                    Some(ids) => kernel.neighbors.iter().map(|u| ids.contains(u)).collect(),
                    None => vec![true; kernel.neighbors.len()],
                };
                node.inbox = inbox.into_iter().map(|m| m.payload).collect();

                // (e) consensus and multiplier updates over trusted neighbors
                let mut drift = DVector::zeros(p + 1);
                for k in 0..kernel.neighbors.len() {
                    if node.trusted[k] {
                        node.omega[k] = 0.5 * (&node.r + &node.inbox[k]);
                        drift += &node.r - &node.inbox[k];
                    }
                }
                node.alpha.axpy(0.5 * eta, &drift, 1.0);

                // (f) residual and rejection gate
                let j_new = combined_residual_node(&node.omega, &prev.omega, &node.alpha, &prev.alpha, eta);
                let revert = defense.is_some_and(|d| d.reject(t, v, j_new, prev.j));
                if revert {
                    node.lambda = prev.lambda.clone();
                    node.r = prev.r.clone();
                    node.alpha = prev.alpha.clone();
                    node.omega = prev.omega.clone();
                    node.j = prev.j;
                } else {
                    node.j = j_new;
                }
                (revert, j_new)
            })
            .unzip();
        let global_residual = residuals.iter().sum();

        self.round += 1;
        Ok(self.report(qp_unconverged, rejected, global_residual))
    }

    fn report(&self, qp_unconverged: usize, rejected: Vec<bool>, global_residual: f64) -> RoundReport {
        let errors: Vec<usize> = self
            .nodes
            .par_iter()
            .zip(self.kernels.par_iter())
            .map(|(node, kernel)| misclassified(&node.r, &kernel.test))
            .collect();
        let local_risk = errors
            .iter()
            .zip(&self.kernels)
            .map(|(&e, k)| risk_from_errors(e, k.test.len()).expect("partition guarantees non-empty test sets"))
            .collect();
        let sizes = self.test_sizes();
        let global_risk = global_risk_from_errors(&errors, &sizes).expect("non-empty test sets");
        let r: Vec<DVector<f64>> = self.nodes.iter().map(|n| n.r.clone()).collect();
        RoundReport {
            round: self.round,
            consensus_gap: consensus_gap(&r),
            r,
            local_risk,
            global_risk,
            errors,
            j: self.nodes.iter().map(|n| n.j).collect(),
            global_residual,
            delta_norm_sq: self.nodes.iter().map(|n| n.delta.norm_squared()).collect(),
            verified_count: self.nodes.iter().map(NodeState::trusted_count).collect(),
            rejected,
            qp_unconverged,
        }
    }
}

/// `g_v(x) = [x', 1] r_v`.
pub fn local_discriminant(r: &DVector<f64>, x: &[f64]) -> Result<f64, EngineError> {
    if r.len() != x.len() + 1 {
        return Err(EngineError::DimensionMismatch { expected: r.len() - 1, found: x.len() });
    }
    let p = x.len();
    Ok(x.iter().zip(r.iter()).map(|(a, b)| a * b).sum::<f64>() + r[p])
}

/// Sign of a discriminant value; ties go to `+1`.
pub fn predict_label(score: f64) -> f64 {
    if score >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Runs `cfg.rounds` rounds from a fresh state.
pub fn run(
    cfg: &EngineConfig,
    part: &NodePartition,
    topo: &Topology,
    adversary: Option<&dyn Adversary>,
    defense: Option<&dyn Defense>,
) -> Result<RiskTrace, EngineError> {
    let initial = defense.map_or(DEFAULT_INITIAL_RESIDUAL, |d| d.initial_residual());
    let mut state = init_run(cfg, part, topo, initial)?;
    let mut reports = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        reports.push(state.step(adversary, defense)?);
    }
    Ok(RiskTrace::new(reports, state.test_sizes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_gaussian, partition, TrainSizes};
    use crate::topology::{make_topology, TopologyKind};

    fn small_setup(seed: u64) -> (NodePartition, Topology) {
        let topo = make_topology(&TopologyKind::Complete { nodes: 3 }, 0).unwrap();
        let data = gen_gaussian(200, &[3.0, 3.0], &[1.0, 1.0], &DMatrix::identity(2, 2), seed).unwrap();
        let part = partition(&data, &topo, &TrainSizes::Uniform(20), 50, seed).unwrap();
        (part, topo)
    }

    #[test]
    fn discriminant_and_ties() {
        let r = DVector::from_column_slice(&[1.0, 1.0, -2.0]);
        let g = local_discriminant(&r, &[1.0, 1.0]).unwrap();
        assert_eq!((g, predict_label(g)), (0.0, 1.0));
        let r = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
        let g = local_discriminant(&r, &[-3.0, 7.0]).unwrap();
        assert_eq!((g, predict_label(g)), (-3.0, -1.0));
        assert_eq!(local_discriminant(&DVector::zeros(3), &[5.0, -2.0]).unwrap(), 0.0);
        assert!(local_discriminant(&r, &[1.0]).is_err());
    }

    #[test]
    fn zero_init_and_determinism() {
        let (part, topo) = small_setup(1);
        let cfg = EngineConfig::new(1.0, 1.0, 5, 3);
        let a = init_run(&cfg, &part, &topo, DEFAULT_INITIAL_RESIDUAL).unwrap();
        assert!(a.nodes.iter().all(|n| n.r.iter().all(|&x| x == 0.0) && n.alpha.iter().all(|&x| x == 0.0)));
        assert_eq!(a.nodes[0].j, 1e18);

        let mut random = cfg.clone();
        random.init = InitMode::RandomUniform { range: 1.0 };
        let x = init_run(&random, &part, &topo, 1e18).unwrap();
        let y = init_run(&random, &part, &topo, 1e18).unwrap();
        assert_eq!(x.nodes, y.nodes);
        assert!(x.nodes.iter().all(|n| n.alpha.iter().all(|&a| a == 0.0)));
        assert!(x.nodes.iter().all(|n| n.lambda.iter().all(|&l| (0.0..=3.0).contains(&l))));
    }

    #[test]
    fn shape_and_config_errors() {
        let (part, _) = small_setup(2);
        let four = make_topology(&TopologyKind::Ring { nodes: 4 }, 0).unwrap();
        let cfg = EngineConfig::new(1.0, 1.0, 5, 0);
        assert!(matches!(init_run(&cfg, &part, &four, 1e18), Err(EngineError::ShapeMismatch(_))));
        let (part, topo) = small_setup(2);
        assert!(matches!(
            run(&EngineConfig::new(1.0, 1.0, 0, 0), &part, &topo, None, None),
            Err(EngineError::InvalidConfig(_))
        ));
        assert!(matches!(
            run(&EngineConfig::new(0.0, 1.0, 3, 0), &part, &topo, None, None),
            Err(EngineError::InvalidConfig(_))
        ));
    }

    #[test]
    fn box_feasibility_and_omega_symmetry() {
        let (part, topo) = small_setup(4);
        let cfg = EngineConfig::new(1.0, 1.0, 10, 0);
        let mut state = init_run(&cfg, &part, &topo, 1e18).unwrap();
        for _ in 0..10 {
            state.step(None, None).unwrap();
            for node in &state.nodes {
                assert!(node.lambda.iter().all(|&l| (0.0..=3.0).contains(&l)));
            }
            for v in 0..3 {
                for (k, &u) in state.neighbors(v).iter().enumerate() {
                    let back = state.neighbors(u).iter().position(|&x| x == v).unwrap();
                    let diff = (&state.nodes[v].omega[k] - &state.nodes[u].omega[back]).amax();
                    assert!(diff < 1e-12, "omega_vu != omega_uv");
                }
            }
        }
    }
}
