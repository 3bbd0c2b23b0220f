//! Conformable time derivative, the diffusion residual, and the closed-form
//! Gaussian solution.
//!
//! For differentiable `f` the conformable derivative of order `α` reduces to
//! `T_α(f)(t) = t^(1-α) f'(t)`, which is what [`conformable_derivative`]
//! builds. The residual of `T^α u = λ u_xx` is `T^α u - λ u_xx`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{Graph, GraphError, NodeRef};

pub const DEFAULT_LAMBDA: f64 = 0.5073;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConformableError {
    #[error("fractional order {0} outside (0, 1]")]
    InvalidOrder(f64),
    #[error("invalid domain: {0}")]
    InvalidDomain(&'static str),
    #[error("{what} must be positive, got {value}")]
    DomainError { what: &'static str, value: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Space-time rectangle `[t_lo, t_hi] × [x_lo, x_hi]` plus the equation
/// coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub t_lo: f64,
    pub t_hi: f64,
    pub x_lo: f64,
    pub x_hi: f64,
    pub alpha: f64,
    pub lambda: f64,
}

impl DomainSpec {
    /// `t ∈ [0.01, 1]`, `x ∈ [-1, 1]`, `λ = 0.5073`.
    pub fn standard(alpha: f64) -> Self {
        Self {
            t_lo: 0.01,
            t_hi: 1.0,
            x_lo: -1.0,
            x_hi: 1.0,
            alpha,
            lambda: DEFAULT_LAMBDA,
        }
    }

    pub fn validate(&self) -> Result<(), ConformableError> {
        check_order(self.alpha)?;
        let finite = [self.t_lo, self.t_hi, self.x_lo, self.x_hi, self.lambda]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(ConformableError::InvalidDomain(
                "bounds and λ must be finite",
            ));
        }
        if self.t_lo <= 0.0 {
            return Err(ConformableError::InvalidDomain("t_lo must be positive"));
        }
        if self.t_lo >= self.t_hi {
            return Err(ConformableError::InvalidDomain("t_lo must be below t_hi"));
        }
        if self.x_lo >= self.x_hi {
            return Err(ConformableError::InvalidDomain("x_lo must be below x_hi"));
        }
        if self.lambda <= 0.0 {
            return Err(ConformableError::InvalidDomain("λ must be positive"));
        }
        Ok(())
    }

    pub fn contains(&self, t: f64, x: f64) -> bool {
        (self.t_lo..=self.t_hi).contains(&t) && (self.x_lo..=self.x_hi).contains(&x)
    }

    /// Exact solution of this problem at `(t, x)`.
    pub fn exact(&self, t: f64, x: f64) -> Result<f64, ConformableError> {
        analytic_solution(self.alpha, self.lambda, t, x)
    }
}

fn check_order(alpha: f64) -> Result<(), ConformableError> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(ConformableError::InvalidOrder(alpha))
    }
}

/// The weight `t^(1-α)` multiplying the ordinary time derivative.
pub fn time_weight(t: f64, alpha: f64) -> f64 {
    if alpha == 1.0 {
        1.0
    } else {
        t.powf(1.0 - alpha)
    }
}

/// `T_α(u) = t^(1-α) ∂u/∂t` as a graph node.
///
/// The weight is built as `exp((1-α) ln t)` so that evaluating at `t ≤ 0`
/// fails with a domain error instead of silently producing `0^(1-α)`.
/// At `α = 1` no weight is applied.
pub fn conformable_derivative(
    graph: &mut Graph,
    u: NodeRef,
    t: NodeRef,
    alpha: f64,
) -> Result<NodeRef, ConformableError> {
    check_order(alpha)?;
    let du = graph.differentiate(u, t)?;
    if alpha == 1.0 {
        return Ok(du);
    }
    let log_t = graph.ln(t);
    let k = graph.constant(1.0 - alpha);
    let scaled = graph.mul(k, log_t);
    let weight = graph.exp(scaled);
    Ok(graph.mul(weight, du))
}

/// Residual `T^α u - λ u_xx`. `lambda` may be a constant or a trainable
/// variable.
pub fn residual(
    graph: &mut Graph,
    u: NodeRef,
    t: NodeRef,
    x: NodeRef,
    lambda: NodeRef,
    alpha: f64,
) -> Result<NodeRef, ConformableError> {
    let dt = conformable_derivative(graph, u, t, alpha)?;
    let ux = graph.differentiate(u, x)?;
    let uxx = graph.differentiate(ux, x)?;
    let diffusion = graph.mul(lambda, uxx);
    Ok(graph.sub(dt, diffusion))
}

/// `u(t, x) = sqrt(α / (4πλ t^α)) · exp(-α x² / (4λ t^α))`.
pub fn analytic_solution(alpha: f64, lambda: f64, t: f64, x: f64) -> Result<f64, ConformableError> {
    check_order(alpha)?;
    if t <= 0.0 {
        return Err(ConformableError::DomainError {
            what: "t",
            value: t,
        });
    }
    if lambda <= 0.0 {
        return Err(ConformableError::DomainError {
            what: "λ",
            value: lambda,
        });
    }
    let spread = 4.0 * lambda * t.powf(alpha);
    Ok((alpha / (PI * spread)).sqrt() * (-alpha * x * x / spread).exp())
}

/// The closed-form solution expressed as a differentiable graph of `t`, `x`.
pub fn analytic_solution_graph(
    graph: &mut Graph,
    t: NodeRef,
    x: NodeRef,
    alpha: f64,
    lambda: f64,
) -> Result<NodeRef, ConformableError> {
    check_order(alpha)?;
    if lambda <= 0.0 {
        return Err(ConformableError::DomainError {
            what: "λ",
            value: lambda,
        });
    }
    let t_alpha = graph.powf(t, alpha);
    let c = graph.constant(4.0 * lambda / alpha);
    let spread = graph.mul(c, t_alpha);
    let pi = graph.constant(PI);
    let denom = graph.mul(pi, spread);
    let amplitude = graph.powf(denom, -0.5);
    let x2 = graph.mul(x, x);
    let ratio = graph.div(x2, spread);
    let neg = graph.neg(ratio);
    let gauss = graph.exp(neg);
    Ok(graph.mul(amplitude, gauss))
}
