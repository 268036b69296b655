//! Neighbor verification and update rejection, plugged into the engine
//! through [`Defense`].

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Defense, Message, DEFAULT_INITIAL_RESIDUAL};
use crate::topology::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DefenseError {
    #[error("verification tolerance tau = {0} must be non-negative")]
    NegativeTau(f64),
    #[error("rejection factor rho = {0} must be at least 1")]
    RhoBelowOne(f64),
}

/// Trust `r_u` only when `|1 - |r_u| / |r_v|| < tau`. `tau = inf` disables
/// filtering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationConfig {
    pub tau: f64,
}

impl VerificationConfig {
    pub fn validate(&self) -> Result<(), DefenseError> {
        if self.tau >= 0.0 {
            Ok(())
        } else {
            Err(DefenseError::NegativeTau(self.tau))
        }
    }
}

/// Revert a node's update when `J_v^(t+1) > rho * J_v^(t)`. `rho = inf`
/// disables the gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionConfig {
    pub rho: f64,
    #[serde(default = "default_j_init")]
    pub j_init: f64,
    /// Rounds at the start during which every update is accepted (the
    /// residual is still tracked).
    #[serde(default)]
    pub burn_in: usize,
}

fn default_j_init() -> f64 {
    DEFAULT_INITIAL_RESIDUAL
}

impl RejectionConfig {
    pub fn new(rho: f64) -> Self {
        Self { rho, j_init: DEFAULT_INITIAL_RESIDUAL, burn_in: 0 }
    }

    pub fn with_burn_in(mut self, rounds: usize) -> Self {
        self.burn_in = rounds;
        self
    }

    pub fn validate(&self) -> Result<(), DefenseError> {
        if self.rho >= 1.0 {
            Ok(())
        } else {
            Err(DefenseError::RhoBelowOne(self.rho))
        }
    }
}

/// Neighbors whose norm ratio to `r_v` lies strictly within `tau` of one.
/// A zero `r_v` carries no information to defend, so every sender is trusted.
pub fn verify_neighbors(r_v: &DVector<f64>, received: &[Message], tau: f64) -> Vec<NodeId> {
    let own = r_v.norm();
    if own == 0.0 {
        return received.iter().map(|m| m.from).collect();
    }
    received
        .iter()
        .filter(|m| (1.0 - m.payload.norm() / own).abs() < tau)
        .map(|m| m.from)
        .collect()
}

/// `J_v = eta * sum_u |omega_vu - omega_vu_old|^2 + (2/eta) |alpha_v - alpha_v_old|^2`.
pub fn combined_residual_node(
    omega_new: &[DVector<f64>],
    omega_old: &[DVector<f64>],
    alpha_new: &DVector<f64>,
    alpha_old: &DVector<f64>,
    eta: f64,
) -> f64 {
    assert_eq!(omega_new.len(), omega_old.len(), "neighbor sets differ");
    let dual: f64 = omega_new.iter().zip(omega_old).map(|(a, b)| (a - b).norm_squared()).sum();
    eta * dual + 2.0 / eta * (alpha_new - alpha_old).norm_squared()
}

/// Per-node view of one round's consensus variables, for the global residual.
#[derive(Debug, Clone, Copy)]
pub struct ResidualInputs<'a> {
    pub omega_new: &'a [DVector<f64>],
    pub omega_old: &'a [DVector<f64>],
    pub alpha_new: &'a DVector<f64>,
    pub alpha_old: &'a DVector<f64>,
}

/// Network-wide residual: the sum over nodes, each edge counted from both ends.
pub fn combined_residual_global(nodes: &[ResidualInputs<'_>], eta: f64) -> f64 {
    nodes
        .iter()
        .map(|n| combined_residual_node(n.omega_new, n.omega_old, n.alpha_new, n.alpha_old, eta))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Accept,
    Revert,
}

pub fn rejection_gate(j_new: f64, j_old: f64, rho: f64) -> GateDecision {
    if j_new > rho * j_old {
        GateDecision::Revert
    } else {
        GateDecision::Accept
    }
}

/// Both defenses behind the engine hook; either may be absent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSet {
    pub verification: Option<VerificationConfig>,
    pub rejection: Option<RejectionConfig>,
}

impl DefenseSet {
    pub fn verification(tau: f64) -> Self {
        Self { verification: Some(VerificationConfig { tau }), rejection: None }
    }

    pub fn rejection(rho: f64) -> Self {
        Self { verification: None, rejection: Some(RejectionConfig::new(rho)) }
    }

    pub fn validate(&self) -> Result<(), DefenseError> {
        if let Some(v) = &self.verification {
            v.validate()?;
        }
        if let Some(r) = &self.rejection {
            r.validate()?;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.verification.is_none() && self.rejection.is_none()
    }
}

impl Defense for DefenseSet {
    fn verify(&self, _node: NodeId, r_v: &DVector<f64>, received: &[Message]) -> Option<Vec<NodeId>> {
        self.verification.map(|cfg| verify_neighbors(r_v, received, cfg.tau))
    }

    /// `round` is 0-based.
    fn reject(&self, round: usize, _node: NodeId, j_new: f64, j_old: f64) -> bool {
        self.rejection.is_some_and(|cfg| {
            round >= cfg.burn_in && rejection_gate(j_new, j_old, cfg.rho) == GateDecision::Revert
        })
    }

    fn initial_residual(&self) -> f64 {
        self.rejection.map_or(DEFAULT_INITIAL_RESIDUAL, |cfg| cfg.j_init)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(from: NodeId, norm: f64) -> Message {
        Message { from, payload: DVector::from_column_slice(&[norm, 0.0]) }
    }

    #[test]
    fn verification_rule() {
        let r_v = DVector::from_column_slice(&[0.0, 1.0]);
        let inbox = [msg(1, 1.05), msg(2, 2.0)];
        assert_eq!(verify_neighbors(&r_v, &inbox, 0.1), vec![1]);
        assert_eq!(verify_neighbors(&r_v, &[msg(3, 1.0)], 0.0), Vec::<NodeId>::new());
        assert_eq!(verify_neighbors(&r_v, &inbox, f64::INFINITY), vec![1, 2]);
        assert_eq!(verify_neighbors(&DVector::zeros(2), &inbox, 0.0), vec![1, 2]);
    }

    #[test]
    fn node_residual_arithmetic() {
        let z = DVector::zeros(2);
        let e = DVector::from_column_slice(&[1.0, 0.0]);
        assert_eq!(combined_residual_node(&[z.clone()], &[z.clone()], &z, &z, 1.0), 0.0);
        assert_eq!(combined_residual_node(&[e.clone()], &[z.clone()], &e, &z, 1.0), 3.0);
        assert_eq!(combined_residual_node(&[e.clone()], &[z.clone()], &e, &z, 2.0), 3.0);
    }

    #[test]
    fn global_residual_is_sum_of_nodes() {
        let z = DVector::zeros(1);
        let one = DVector::from_element(1, 1.0);
        let a = [one.clone(), z.clone()];
        let b = [z.clone(), z.clone()];
        let nodes = [
            ResidualInputs { omega_new: &a, omega_old: &b, alpha_new: &one, alpha_old: &z },
            ResidualInputs { omega_new: &b, omega_old: &b, alpha_new: &z, alpha_old: &z },
        ];
        let expected: f64 = nodes
            .iter()
            .map(|n| combined_residual_node(n.omega_new, n.omega_old, n.alpha_new, n.alpha_old, 0.5))
            .sum();
        assert_eq!(combined_residual_global(&nodes, 0.5), expected);
        assert_eq!(combined_residual_global(&nodes[1..], 0.5), 0.0);
    }

    #[test]
    fn gate_decisions() {
        assert_eq!(rejection_gate(0.5, 1.0, 1.5), GateDecision::Accept);
        assert_eq!(rejection_gate(2.0, 1.0, 1.5), GateDecision::Revert);
        assert_eq!(rejection_gate(1e12, DEFAULT_INITIAL_RESIDUAL, 1.0), GateDecision::Accept);
        assert_eq!(rejection_gate(1e300, 0.0, f64::INFINITY), GateDecision::Accept);
    }

    #[test]
    fn config_validation() {
        assert!(VerificationConfig { tau: -0.1 }.validate().is_err());
        assert!(RejectionConfig::new(0.9).validate().is_err());
        assert!(RejectionConfig::new(1.0).validate().is_ok());
        assert!(DefenseSet::default().is_empty());
    }

    #[test]
    fn burn_in_suppresses_early_reverts() {
        let set = DefenseSet { verification: None, rejection: Some(RejectionConfig::new(1.5).with_burn_in(5)) };
        assert!(!set.reject(4, 0, 2.0, 1.0));
        assert!(set.reject(5, 0, 2.0, 1.0));
    }
}
