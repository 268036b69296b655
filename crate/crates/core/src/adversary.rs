//! Compromised-node attacker: which nodes, how much budget, from when.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Adversary;
use crate::subsolvers::{attacker_delta, AttackStep};
use crate::topology::{NodeId, Topology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdversaryError {
    #[error("budgets sum to {total}, above the cap {cap}")]
    CapViolation { total: f64, cap: f64 },
    #[error("compromised node {node} is not in the graph ({node_count} nodes)")]
    UnknownNode { node: NodeId, node_count: usize },
    #[error("invalid attacker parameter: {0}")]
    InvalidParameter(String),
}

/// Attacker configuration: compromised set `V_a` with per-node budgets
/// `C_{v,delta}`, l1 cost `C_a`, and start round `t_a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerSpec {
    pub budgets: BTreeMap<NodeId, f64>,
    pub cost: f64,
    #[serde(default)]
    pub start_round: usize,
    #[serde(default)]
    pub total_budget_cap: Option<f64>,
}

impl AttackerSpec {
    pub fn new(budgets: impl IntoIterator<Item = (NodeId, f64)>, cost: f64) -> Self {
        Self { budgets: budgets.into_iter().collect(), cost, start_round: 0, total_budget_cap: None }
    }

    pub fn starting_at(mut self, round: usize) -> Self {
        self.start_round = round;
        self
    }

    pub fn compromised(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.budgets.keys().copied()
    }

    pub fn validate(&self, topo: &Topology) -> Result<(), AdversaryError> {
        if let Some(&node) = self.budgets.keys().find(|&&v| !topo.contains_node(v)) {
            return Err(AdversaryError::UnknownNode { node, node_count: topo.node_count() });
        }
        if !(self.cost >= 0.0) {
            return Err(AdversaryError::InvalidParameter(format!("cost {} must be non-negative", self.cost)));
        }
        if let Some((&v, &b)) = self.budgets.iter().find(|(_, &b)| !(b >= 0.0)) {
            return Err(AdversaryError::InvalidParameter(format!("budget {b} at node {v} must be non-negative")));
        }
        if let Some(cap) = self.total_budget_cap {
            let total: f64 = self.budgets.values().sum();
            if total > cap {
                return Err(AdversaryError::CapViolation { total, cap });
            }
        }
        Ok(())
    }
}

impl Adversary for AttackerSpec {
    fn compromised_count(&self) -> usize {
        self.budgets.len()
    }

    /// Best response `delta_v` against `w_v`, the first `p` entries of `r_v`,
    /// with linear coefficient `V_a * C_l * w_v`.
    fn perturb(&self, round: usize, node: NodeId, r: &DVector<f64>, c_l: f64) -> Option<DVector<f64>> {
        if round < self.start_round {
            return None;
        }
        let budget = *self.budgets.get(&node)?;
        let scale = self.budgets.len() as f64 * c_l;
        let p = r.len() - 1;
        let a = r.rows(0, p) * scale;
        Some(attacker_delta(&AttackStep { a, cost: self.cost, budget }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetSplit {
    Balanced,
    /// 3:1 in favor of the higher-degree node.
    Unbalanced,
}

/// Heuristic strategies that spend a total budget cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum AttackStrategyPreset {
    SingleNode { node: NodeId },
    HighDegreePair { split: BudgetSplit },
    RandomNode { seed: u64 },
}

/// Expands a strategy into a concrete spec spending `cap` in total.
/// The high-degree pair takes the two nodes with most neighbors, ties going
/// to the lower id.
pub fn expand_preset(
    preset: &AttackStrategyPreset,
    topo: &Topology,
    cap: f64,
    cost: f64,
) -> Result<AttackerSpec, AdversaryError> {
    if !(cap >= 0.0) {
        return Err(AdversaryError::InvalidParameter(format!("cap {cap} must be non-negative")));
    }
    let budgets: Vec<(NodeId, f64)> = match *preset {
        AttackStrategyPreset::SingleNode { node } => vec![(node, cap)],
        AttackStrategyPreset::HighDegreePair { split } => {
            let ranked = topo.nodes_by_degree();
            if ranked.len() < 2 {
                return Err(AdversaryError::InvalidParameter("need at least two nodes".into()));
            }
            let first_share = match split {
                BudgetSplit::Balanced => 0.5,
                BudgetSplit::Unbalanced => 0.75,
            };
            vec![(ranked[0], cap * first_share), (ranked[1], cap * (1.0 - first_share))]
        }
        AttackStrategyPreset::RandomNode { seed } => {
            let node = ChaCha8Rng::seed_from_u64(seed).random_range(0..topo.node_count());
            vec![(node, cap)]
        }
    };
    let mut spec = AttackerSpec::new(budgets, cost);
    spec.total_budget_cap = Some(cap);
    spec.validate(topo)?;
    Ok(spec)
}
