//! Numerical kernels used once per node per round: the box-constrained dual
//! QP, the attacker's budgeted perturbation, and the diagonal `U_v^{-1}`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid QP: {0}")]
    InvalidProblem(String),
    #[error("box QP stopped after {sweeps} sweeps with KKT residual {kkt:e}")]
    NoProgress { best: DVector<f64>, kkt: f64, sweeps: usize },
    #[error("U_v is singular: node has no neighbors")]
    SingularU,
}

/// Diagonal entries below this are treated as zero curvature.
const DEGENERATE_DIAGONAL: f64 = 1e-12;

pub const DEFAULT_QP_TOL: f64 = 1e-8;

/// `max c'x - x'Qx/2` over `0 <= x <= upper`.
#[derive(Debug, Clone)]
pub struct BoxQp {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub upper: f64,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl BoxQp {
    /// Problem with the default tolerance and a `10 * N` sweep budget.
    pub fn new(q: DMatrix<f64>, c: DVector<f64>, upper: f64) -> Self {
        let max_sweeps = 10 * c.len().max(1);
        Self { q, c, upper, tol: DEFAULT_QP_TOL, max_sweeps }
    }

    fn validate(&self) -> Result<(), SolverError> {
        let n = self.c.len();
        if self.q.shape() != (n, n) {
            return Err(SolverError::InvalidProblem(format!(
                "Q is {}x{} but c has length {n}",
                self.q.nrows(),
                self.q.ncols()
            )));
        }
        if !(self.upper > 0.0) {
            return Err(SolverError::InvalidProblem(format!("upper bound {} must be positive", self.upper)));
        }
        if !(self.tol > 0.0) {
            return Err(SolverError::InvalidProblem("tolerance must be positive".into()));
        }
        let scale = 1.0 + self.q.abs().max();
        for i in 0..n {
            for j in 0..i {
                if (self.q[(i, j)] - self.q[(j, i)]).abs() > self.tol * scale {
                    return Err(SolverError::InvalidProblem(format!("Q is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    pub fn objective(&self, lambda: &DVector<f64>) -> f64 {
        self.c.dot(lambda) - 0.5 * lambda.dot(&(&self.q * lambda))
    }

    /// Largest violation of the box KKT conditions at `lambda`, using the
    /// ascent direction `g = c - Q lambda`.
    pub fn kkt_residual(&self, lambda: &DVector<f64>) -> f64 {
        let g = &self.c - &self.q * lambda;
        kkt_from_gradient(lambda, &g, self.upper)
    }
}

fn kkt_from_gradient(lambda: &DVector<f64>, g: &DVector<f64>, upper: f64) -> f64 {
    lambda
        .iter()
        .zip(g.iter())
        .map(|(&l, &gn)| {
            if l <= 0.0 {
                gn.max(0.0)
            } else if l >= upper {
                (-gn).max(0.0)
            } else {
                gn.abs()
            }
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub lambda: DVector<f64>,
    pub sweeps: usize,
    pub kkt: f64,
}

/// Cyclic coordinate ascent with exact clipped coordinate maximization.
///
/// Each coordinate step solves its one-dimensional problem exactly, so the
/// objective is monotone. When the sweep budget runs out before the KKT
/// residual reaches `tol`, the best iterate is returned inside
/// [`SolverError::NoProgress`].
pub fn solve_box_qp(prob: &BoxQp, warm_start: Option<&DVector<f64>>) -> Result<QpSolution, SolverError> {
    prob.validate()?;
    let n = prob.c.len();
    let upper = prob.upper;
    let mut lambda = match warm_start {
        Some(w) if w.len() == n => w.map(|x| x.clamp(0.0, upper)),
        Some(w) => {
            return Err(SolverError::InvalidProblem(format!("warm start has length {}, expected {n}", w.len())))
        }
        None => DVector::zeros(n),
    };
    let mut g = &prob.c - &prob.q * &lambda;
    let mut kkt = kkt_from_gradient(&lambda, &g, upper);
    let mut sweeps = 0;
    while kkt > prob.tol && sweeps < prob.max_sweeps {
        for k in 0..n {
            let qkk = prob.q[(k, k)];
            let old = lambda[k];
            let new = if qkk < DEGENERATE_DIAGONAL {
                if g[k] <= 0.0 {
                    0.0
                } else {
                    upper
                }
            } else {
                (old + g[k] / qkk).clamp(0.0, upper)
            };
            let step = new - old;
            if step != 0.0 {
                lambda[k] = new;
                g.axpy(-step, &prob.q.column(k), 1.0);
            }
        }
        sweeps += 1;
        // Fresh gradient so accumulated rank-one drift never fakes convergence.
        g = &prob.c - &prob.q * &lambda;
        kkt = kkt_from_gradient(&lambda, &g, upper);
    }
    if kkt <= prob.tol {
        Ok(QpSolution { lambda, sweeps, kkt })
    } else {
        Err(SolverError::NoProgress { best: lambda, kkt, sweeps })
    }
}

/// One attacker best response at a compromised node.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackStep {
    /// Linear coefficient `V_a * C_l * w_v`.
    pub a: DVector<f64>,
    /// `C_a`, weight of the l1 cost.
    pub cost: f64,
    /// `C_{v,delta}`, bound on the squared l2 norm.
    pub budget: f64,
}

impl AttackStep {
    pub fn objective(&self, delta: &DVector<f64>) -> f64 {
        self.a.dot(delta) - self.cost * delta.lp_norm(1)
    }
}

/// Closed-form maximizer of `a'd - cost * |d|_1` over `|d|_2^2 <= budget`.
///
/// Coordinates whose `|a_i|` does not exceed `cost` are zeroed; the surviving
/// soft-thresholded magnitudes `b_i` set the direction, scaled to the ball
/// boundary.
pub fn attacker_delta(step: &AttackStep) -> DVector<f64> {
    let b = step.a.map(|ai| (ai.abs() - step.cost).max(0.0));
    let norm = b.norm();
    if norm == 0.0 || step.budget <= 0.0 {
        return DVector::zeros(step.a.len());
    }
    let scale = step.budget.sqrt() / norm;
    DVector::from_fn(step.a.len(), |i, _| step.a[i].signum() * b[i] * scale)
}

/// Diagonal of `U_v^{-1}` where `U_v = (I - Pi) + 2 eta |B_v| I`: the first
/// `p` entries are `1 / (1 + 2 eta |B_v|)`, the bias entry `1 / (2 eta |B_v|)`.
pub fn build_u_inverse(p: usize, eta: f64, neighbor_count: usize) -> Result<DVector<f64>, SolverError> {
    if neighbor_count == 0 {
        return Err(SolverError::SingularU);
    }
    if !(eta > 0.0) {
        return Err(SolverError::InvalidProblem(format!("eta {eta} must be positive")));
    }
    let consensus = 2.0 * eta * neighbor_count as f64;
    Ok(DVector::from_fn(p + 1, |i, _| if i < p { 1.0 / (1.0 + consensus) } else { 1.0 / consensus }))
}
