//! Mean-square-error losses for the forward, weighted-forward and inverse
//! problems.
//!
//! Two routes compute the same numbers:
//!
//! * [`forward_loss`] / [`inverse_loss`] unroll the whole loss into one
//!   [`Graph`], one pair of input variables per point. This is exact and
//!   fully differentiable but only practical for small point sets.
//! * [`ForwardProblem`] / [`InverseProblem`] evaluate loss and gradient for
//!   training, either with the batched derivative streams of
//!   [`crate::net::JetTrace`] ([`Engine::Batched`]) or by replaying a compiled
//!   per-point residual graph ([`Engine::Graph`]).

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformable::{self, time_weight, ConformableError, DomainSpec};
use crate::diffgraph::{Bindings, Graph, GraphError, NodeRef, Tape};
use crate::net::{self, Architecture, JetAdjoint, JetTrace, NetError};
use crate::sampling::{PointSet, Role};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("length mismatch: {pred} vs {target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("{0} point set has no targets")]
    MissingTargets(Role),
    #[error("expected a {expected} point set, got {actual}")]
    WrongRole { expected: Role, actual: Role },
    #[error("loss weights must be non-negative and not both zero")]
    InvalidWeights,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Conformable(#[from] ConformableError),
}

/// Static weights of the data and residual terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_u: f64,
    pub w_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_u: 1.0, w_f: 1.0 }
    }
}

impl LossWeights {
    pub fn new(w_u: f64, w_f: f64) -> Result<Self, LossError> {
        let valid = w_u >= 0.0
            && w_f >= 0.0
            && w_u.is_finite()
            && w_f.is_finite()
            && (w_u > 0.0 || w_f > 0.0);
        if valid {
            Ok(Self { w_u, w_f })
        } else {
            Err(LossError::InvalidWeights)
        }
    }

    /// Down-weighted residual used for orders close to one.
    pub fn near_integer() -> Self {
        Self { w_u: 1.0, w_f: 0.1 }
    }
}

/// Loss components; terms that do not apply to a mode stay zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse_ic: f64,
    pub mse_bc: f64,
    pub mse_u: f64,
    pub mse_f: f64,
    pub mse_data: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn forward(mse_ic: f64, mse_bc: f64, mse_f: f64, w: LossWeights) -> Self {
        let mse_u = mse_ic + mse_bc;
        Self {
            mse_ic,
            mse_bc,
            mse_u,
            mse_f,
            mse_data: 0.0,
            total: w.w_u * mse_u + w.w_f * mse_f,
        }
    }

    fn inverse(mse_data: f64, mse_f: f64) -> Self {
        Self {
            mse_f,
            mse_data,
            total: mse_data + mse_f,
            ..Self::default()
        }
    }
}

/// `(1/N) Σ (pred_i − target_i)²`.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64, LossError> {
    if pred.len() != target.len() {
        return Err(LossError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(LossError::EmptyInput);
    }
    Ok(mean_sq(
        pred.iter().zip(target).map(|(p, t)| p - t),
        pred.len(),
    ))
}

fn mean_sq(residuals: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    residuals.map(|r| r * r).sum::<f64>() / n as f64
}

fn targets_of(set: &PointSet) -> Result<&[f64], LossError> {
    set.targets
        .as_deref()
        .ok_or(LossError::MissingTargets(set.role))
}

fn expect_role(set: &PointSet, expected: Role) -> Result<(), LossError> {
    if set.role != expected {
        return Err(LossError::WrongRole {
            expected,
            actual: set.role,
        });
    }
    Ok(())
}

/// A loss unrolled into a single graph together with the bindings it was
/// evaluated at.
#[derive(Clone, Debug)]
pub struct LossAssembly {
    pub graph: Graph,
    pub param_nodes: Vec<NodeRef>,
    /// Trainable λ in inverse mode.
    pub lambda_node: Option<NodeRef>,
    pub total: NodeRef,
    pub bindings: Bindings,
    pub breakdown: LossBreakdown,
}

impl LossAssembly {
    /// d(total)/d(params), followed by d(total)/dλ in inverse mode.
    pub fn gradient(&self) -> Result<Vec<f64>, LossError> {
        let mut wrt = self.param_nodes.clone();
        wrt.extend(self.lambda_node);
        Ok(self.graph.gradient(self.total, &wrt, &self.bindings)?)
    }
}

struct Unrolled {
    graph: Graph,
    params: Vec<NodeRef>,
    bindings: Bindings,
}

impl Unrolled {
    fn new(arch: &Architecture, params: &[f64]) -> Result<Self, LossError> {
        if params.len() != arch.param_count() {
            return Err(NetError::ShapeMismatch {
                expected: arch.param_count(),
                actual: params.len(),
            }
            .into());
        }
        let mut graph = Graph::new();
        let mut bindings = Bindings::new();
        let nodes = params
            .iter()
            .map(|&v| {
                let n = graph.variable();
                bindings.set(n, v);
                n
            })
            .collect();
        Ok(Self {
            graph,
            params: nodes,
            bindings,
        })
    }

    fn point(
        &mut self,
        arch: &Architecture,
        t: f64,
        x: f64,
    ) -> Result<(NodeRef, NodeRef, NodeRef), LossError> {
        let (tn, xn) = (self.graph.variable(), self.graph.variable());
        self.bindings.set(tn, t).set(xn, x);
        let u = net::forward(arch, &mut self.graph, &self.params, tn, xn)?;
        Ok((u, tn, xn))
    }

    fn data_term(&mut self, arch: &Architecture, set: &PointSet) -> Result<NodeRef, LossError> {
        let targets = targets_of(set)?;
        let mut diffs = Vec::with_capacity(set.len());
        for (&(t, x), &target) in set.coords.iter().zip(targets) {
            let (u, _, _) = self.point(arch, t, x)?;
            let c = self.graph.constant(target);
            diffs.push(self.graph.sub(u, c));
        }
        Ok(self.mean_square(&diffs))
    }

    fn residual_term(
        &mut self,
        arch: &Architecture,
        set: &PointSet,
        lambda: NodeRef,
        alpha: f64,
    ) -> Result<NodeRef, LossError> {
        let mut rs = Vec::with_capacity(set.len());
        for &(t, x) in &set.coords {
            let (u, tn, xn) = self.point(arch, t, x)?;
            rs.push(conformable::residual(
                &mut self.graph,
                u,
                tn,
                xn,
                lambda,
                alpha,
            )?);
        }
        Ok(self.mean_square(&rs))
    }

    fn mean_square(&mut self, terms: &[NodeRef]) -> NodeRef {
        let squares: Vec<_> = terms.iter().map(|&d| self.graph.mul(d, d)).collect();
        let sum = self.graph.sum(&squares);
        if terms.is_empty() {
            return sum;
        }
        let n = self.graph.constant(terms.len() as f64);
        self.graph.div(sum, n)
    }

    fn eval(&self, node: NodeRef) -> Result<f64, LossError> {
        Ok(self.graph.eval(node, &self.bindings)?)
    }
}

/// `w_u·(MSE_IC + MSE_BC) + w_f·MSE_f` unrolled into one graph, with λ taken
/// from `domain` as a constant. IC and BC errors are averaged separately.
pub fn forward_loss(
    arch: &Architecture,
    params: &[f64],
    ic: &PointSet,
    bc: &PointSet,
    colloc: &PointSet,
    domain: &DomainSpec,
    weights: LossWeights,
) -> Result<LossAssembly, LossError> {
    expect_role(ic, Role::Initial)?;
    expect_role(bc, Role::Boundary)?;
    expect_role(colloc, Role::Collocation)?;
    let mut un = Unrolled::new(arch, params)?;
    let ic_node = un.data_term(arch, ic)?;
    let bc_node = un.data_term(arch, bc)?;
    let lambda = un.graph.constant(domain.lambda);
    let f_node = un.residual_term(arch, colloc, lambda, domain.alpha)?;

    let g = &mut un.graph;
    let data = g.add(ic_node, bc_node);
    let wu = g.constant(weights.w_u);
    let wf = g.constant(weights.w_f);
    let a = g.mul(wu, data);
    let b = g.mul(wf, f_node);
    let total = g.add(a, b);

    let breakdown = LossBreakdown::forward(
        un.eval(ic_node)?,
        un.eval(bc_node)?,
        un.eval(f_node)?,
        weights,
    );
    Ok(LossAssembly {
        total,
        breakdown,
        param_nodes: un.params,
        lambda_node: None,
        graph: un.graph,
        bindings: un.bindings,
    })
}

/// `MSE_data + MSE_f`, both averaged over the same labelled points, with λ a
/// trainable variable bound to `lambda`.
pub fn inverse_loss(
    arch: &Architecture,
    params: &[f64],
    lambda: f64,
    data: &PointSet,
    alpha: f64,
) -> Result<LossAssembly, LossError> {
    expect_role(data, Role::InteriorData)?;
    targets_of(data)?;
    let mut un = Unrolled::new(arch, params)?;
    let lambda_node = un.graph.variable();
    un.bindings.set(lambda_node, lambda);
    let data_node = un.data_term(arch, data)?;
    let f_node = un.residual_term(arch, data, lambda_node, alpha)?;
    let total = un.graph.add(data_node, f_node);
    let breakdown = LossBreakdown::inverse(un.eval(data_node)?, un.eval(f_node)?);
    Ok(LossAssembly {
        total,
        breakdown,
        param_nodes: un.params,
        lambda_node: Some(lambda_node),
        graph: un.graph,
        bindings: un.bindings,
    })
}

/// How [`ForwardProblem`] and [`InverseProblem`] compute derivatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    /// Batched derivative streams through dense layer products.
    #[default]
    Batched,
    /// A compiled per-point graph of `u` and the residual, replayed per point.
    Graph,
}

/// Per-point graph of `u(t, x)` and its residual over inputs
/// `[params..., t, x, λ]`.
#[derive(Debug)]
struct PointTape {
    tape: Tape,
}

impl PointTape {
    fn build(arch: &Architecture, alpha: f64) -> Result<Self, LossError> {
        let mut g = Graph::new();
        let mut inputs: Vec<_> = (0..arch.param_count()).map(|_| g.variable()).collect();
        let (t, x, lambda) = (g.variable(), g.variable(), g.variable());
        let u = net::forward(arch, &mut g, &inputs, t, x)?;
        let r = conformable::residual(&mut g, u, t, x, lambda, alpha)?;
        inputs.extend([t, x, lambda]);
        Ok(Self {
            tape: Tape::compile(&g, &inputs, &[u, r])?,
        })
    }

    /// Visits every point with `(u, r)` and accumulates the gradient for the
    /// seeds returned by `seed`. Returns the gradient over `[params..., λ]`.
    fn sweep(
        &self,
        params: &[f64],
        lambda: f64,
        coords: &[(f64, f64)],
        mut seed: impl FnMut(usize, f64, f64) -> [f64; 2],
        grad: &mut [f64],
    ) {
        let np = params.len();
        let mut inputs = params.to_vec();
        inputs.extend([0.0, 0.0, lambda]);
        let mut g_in = vec![0.0; np + 3];
        let mut buf = self.tape.buffers();
        for (k, &(t, x)) in coords.iter().enumerate() {
            inputs[np] = t;
            inputs[np + 1] = x;
            self.tape.forward(&mut buf, &inputs);
            let s = seed(k, self.tape.output(&buf, 0), self.tape.output(&buf, 1));
            if s != [0.0, 0.0] {
                self.tape.backward(&mut buf, &s, &mut g_in);
            }
        }
        grad[..np]
            .iter_mut()
            .zip(&g_in[..np])
            .for_each(|(g, v)| *g += v);
        if grad.len() > np {
            grad[np] += g_in[np + 2];
        }
    }
}

/// Forward-problem objective over fixed IC, BC and collocation sets.
#[derive(Debug)]
pub struct ForwardProblem {
    pub arch: Architecture,
    pub domain: DomainSpec,
    pub weights: LossWeights,
    ic: PointSet,
    bc: PointSet,
    colloc: PointSet,
    colloc_weight: Vec<f64>,
    tape: OnceLock<PointTape>,
}

impl ForwardProblem {
    pub fn new(
        arch: Architecture,
        domain: DomainSpec,
        weights: LossWeights,
        ic: PointSet,
        bc: PointSet,
        colloc: PointSet,
    ) -> Result<Self, LossError> {
        expect_role(&ic, Role::Initial)?;
        expect_role(&bc, Role::Boundary)?;
        expect_role(&colloc, Role::Collocation)?;
        targets_of(&ic)?;
        targets_of(&bc)?;
        domain.validate()?;
        let colloc_weight = colloc
            .coords
            .iter()
            .map(|&(t, _)| time_weight(t, domain.alpha))
            .collect();
        Ok(Self {
            arch,
            domain,
            weights,
            ic,
            bc,
            colloc,
            colloc_weight,
            tape: OnceLock::new(),
        })
    }

    pub fn point_sets(&self) -> [&PointSet; 3] {
        [&self.ic, &self.bc, &self.colloc]
    }

    pub fn evaluate(
        &self,
        params: &[f64],
        engine: Engine,
    ) -> Result<(LossBreakdown, Vec<f64>), LossError> {
        match engine {
            Engine::Batched => Ok(self.evaluate_batched(params)),
            Engine::Graph => self.evaluate_graph(params),
        }
    }

    /// Loss and parameter gradient through the batched derivative streams.
    pub fn evaluate_batched(&self, params: &[f64]) -> (LossBreakdown, Vec<f64>) {
        let arch = &self.arch;
        let w = self.weights;
        let mut grad = vec![0.0; params.len()];

        let mut data_term = |set: &PointSet| -> f64 {
            let n = set.len();
            if n == 0 {
                return 0.0;
            }
            let trace = JetTrace::forward(arch, params, &set.coords, false);
            let d: Vec<f64> = trace
                .jet()
                .u
                .iter()
                .zip(set.targets.as_ref().unwrap())
                .map(|(u, g)| u - g)
                .collect();
            let adj: Vec<f64> = d.iter().map(|d| w.w_u * 2.0 * d / n as f64).collect();
            trace.backward(
                arch,
                params,
                &JetAdjoint {
                    u: &adj,
                    u_t: &[],
                    u_x: &[],
                    u_xx: &[],
                },
                &mut grad,
            );
            mean_sq(d.into_iter(), n)
        };
        let mse_ic = data_term(&self.ic);
        let mse_bc = data_term(&self.bc);

        let n = self.colloc.len();
        let mut mse_f = 0.0;
        if n > 0 {
            let lambda = self.domain.lambda;
            let trace = JetTrace::forward(arch, params, &self.colloc.coords, true);
            let jet = trace.jet();
            let r: Vec<f64> = (0..n)
                .map(|i| self.colloc_weight[i] * jet.u_t[i] - lambda * jet.u_xx[i])
                .collect();
            let scale = w.w_f * 2.0 / n as f64;
            let adj_t: Vec<f64> = (0..n)
                .map(|i| scale * r[i] * self.colloc_weight[i])
                .collect();
            let adj_xx: Vec<f64> = r.iter().map(|ri| -lambda * scale * ri).collect();
            let zeros = vec![0.0; n];
            trace.backward(
                arch,
                params,
                &JetAdjoint {
                    u: &zeros,
                    u_t: &adj_t,
                    u_x: &zeros,
                    u_xx: &adj_xx,
                },
                &mut grad,
            );
            mse_f = mean_sq(r.into_iter(), n);
        }
        (LossBreakdown::forward(mse_ic, mse_bc, mse_f, w), grad)
    }

    /// Loss and parameter gradient by replaying the compiled residual graph.
    pub fn evaluate_graph(&self, params: &[f64]) -> Result<(LossBreakdown, Vec<f64>), LossError> {
        if self.tape.get().is_none() {
            let built = PointTape::build(&self.arch, self.domain.alpha)?;
            let _ = self.tape.set(built);
        }
        let tape = self.tape.get().unwrap();
        let w = self.weights;
        let mut grad = vec![0.0; params.len()];
        let mut mse = [0.0; 3];
        for (k, set) in [&self.ic, &self.bc].into_iter().enumerate() {
            let n = set.len();
            let targets = set.targets.as_ref().unwrap();
            let mut sq = 0.0;
            tape.sweep(
                params,
                self.domain.lambda,
                &set.coords,
                |i, u, _| {
                    let d = u - targets[i];
                    sq += d * d;
                    [w.w_u * 2.0 * d / n as f64, 0.0]
                },
                &mut grad,
            );
            mse[k] = if n == 0 { 0.0 } else { sq / n as f64 };
        }
        let n = self.colloc.len();
        let mut sq = 0.0;
        tape.sweep(
            params,
            self.domain.lambda,
            &self.colloc.coords,
            |_, _, r| {
                sq += r * r;
                [0.0, w.w_f * 2.0 * r / n as f64]
            },
            &mut grad,
        );
        mse[2] = if n == 0 { 0.0 } else { sq / n as f64 };
        Ok((LossBreakdown::forward(mse[0], mse[1], mse[2], w), grad))
    }
}

/// Inverse-problem objective. Its parameter vector is the network parameters
/// followed by λ.
#[derive(Debug)]
pub struct InverseProblem {
    pub arch: Architecture,
    pub alpha: f64,
    data: PointSet,
    weight: Vec<f64>,
    tape: OnceLock<PointTape>,
}

impl InverseProblem {
    pub fn new(arch: Architecture, alpha: f64, data: PointSet) -> Result<Self, LossError> {
        expect_role(&data, Role::InteriorData)?;
        targets_of(&data)?;
        if data.is_empty() {
            return Err(LossError::EmptyInput);
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(ConformableError::InvalidOrder(alpha).into());
        }
        let weight = data
            .coords
            .iter()
            .map(|&(t, _)| time_weight(t, alpha))
            .collect();
        Ok(Self {
            arch,
            alpha,
            data,
            weight,
            tape: OnceLock::new(),
        })
    }

    pub fn data(&self) -> &PointSet {
        &self.data
    }

    /// Length of the trainable vector: network parameters plus λ.
    pub fn dimension(&self) -> usize {
        self.arch.param_count() + 1
    }

    pub fn evaluate(
        &self,
        theta: &[f64],
        engine: Engine,
    ) -> Result<(LossBreakdown, Vec<f64>), LossError> {
        match engine {
            Engine::Batched => Ok(self.evaluate_batched(theta)),
            Engine::Graph => self.evaluate_graph(theta),
        }
    }

    pub fn evaluate_batched(&self, theta: &[f64]) -> (LossBreakdown, Vec<f64>) {
        let np = self.arch.param_count();
        assert_eq!(theta.len(), np + 1, "inverse parameter vector");
        let (params, lambda) = (&theta[..np], theta[np]);
        let n = self.data.len();
        let targets = self.data.targets.as_ref().unwrap();
        let trace = JetTrace::forward(&self.arch, params, &self.data.coords, true);
        let jet = trace.jet();

        let d: Vec<f64> = jet.u.iter().zip(targets).map(|(u, g)| u - g).collect();
        let r: Vec<f64> = (0..n)
            .map(|i| self.weight[i] * jet.u_t[i] - lambda * jet.u_xx[i])
            .collect();
        let scale = 2.0 / n as f64;
        let adj_u: Vec<f64> = d.iter().map(|d| scale * d).collect();
        let adj_t: Vec<f64> = (0..n).map(|i| scale * r[i] * self.weight[i]).collect();
        let adj_xx: Vec<f64> = r.iter().map(|ri| -lambda * scale * ri).collect();
        let zeros = vec![0.0; n];

        let mut grad = vec![0.0; np + 1];
        trace.backward(
            &self.arch,
            params,
            &JetAdjoint {
                u: &adj_u,
                u_t: &adj_t,
                u_x: &zeros,
                u_xx: &adj_xx,
            },
            &mut grad[..np],
        );
        grad[np] = -scale
            * r.iter()
                .zip(&jet.u_xx)
                .map(|(ri, uxx)| ri * uxx)
                .sum::<f64>();
        let breakdown =
            LossBreakdown::inverse(mean_sq(d.into_iter(), n), mean_sq(r.into_iter(), n));
        (breakdown, grad)
    }

    pub fn evaluate_graph(&self, theta: &[f64]) -> Result<(LossBreakdown, Vec<f64>), LossError> {
        if self.tape.get().is_none() {
            let built = PointTape::build(&self.arch, self.alpha)?;
            let _ = self.tape.set(built);
        }
        let tape = self.tape.get().unwrap();
        let np = self.arch.param_count();
        let (params, lambda) = (&theta[..np], theta[np]);
        let n = self.data.len() as f64;
        let targets = self.data.targets.as_ref().unwrap();
        let mut grad = vec![0.0; np + 1];
        let (mut sd, mut sr) = (0.0, 0.0);
        tape.sweep(
            params,
            lambda,
            &self.data.coords,
            |i, u, r| {
                let d = u - targets[i];
                sd += d * d;
                sr += r * r;
                [2.0 * d / n, 2.0 * r / n]
            },
            &mut grad,
        );
        Ok((LossBreakdown::inverse(sd / n, sr / n), grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;
    use crate::sampling::{sample_collocation, sample_ic_bc, sample_interior_data};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    fn small_forward(weights: LossWeights) -> (Architecture, Vec<f64>, ForwardProblem) {
        let arch = Architecture::new(vec![2, 5, 5, 1]).unwrap();
        let params = init_params(&arch, 21).into_inner();
        let domain = DomainSpec::standard(0.5);
        let (ic, bc) = sample_ic_bc(&domain, 4, 6, 2);
        let colloc = sample_collocation(&domain, 20, 3);
        let p = ForwardProblem::new(arch.clone(), domain, weights, ic, bc, colloc).unwrap();
        (arch, params, p)
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        let base = mse(&[0.3, -0.7, 1.1], &[0.0; 3]).unwrap();
        let scaled = mse(&[0.9, -2.1, 3.3000000000000003], &[0.0; 3]).unwrap();
        assert!(rel(scaled, 9.0 * base) < 1e-14);
        assert_eq!(mse(&[], &[]), Err(LossError::EmptyInput));
        assert!(matches!(
            mse(&[1.0], &[]),
            Err(LossError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0).is_err());
        assert!(LossWeights::new(1.0, 0.0).is_ok());
        assert_eq!(
            LossWeights::near_integer(),
            LossWeights { w_u: 1.0, w_f: 0.1 }
        );
    }

    #[test]
    fn zero_network_with_zero_data_has_zero_loss() {
        let arch = Architecture::new(vec![2, 3, 1]).unwrap();
        let params = vec![0.0; arch.param_count()];
        let domain = DomainSpec::standard(0.5);
        let zero = |role, coords: Vec<(f64, f64)>| PointSet {
            role,
            targets: Some(vec![0.0; coords.len()]),
            coords,
        };
        let ic = zero(Role::Initial, vec![(0.01, 0.2), (0.01, -0.5)]);
        let bc = zero(Role::Boundary, vec![(0.3, -1.0), (0.6, 1.0)]);
        let colloc = sample_collocation(&domain, 5, 1);
        let a = forward_loss(
            &arch,
            &params,
            &ic,
            &bc,
            &colloc,
            &domain,
            LossWeights::default(),
        )
        .unwrap();
        assert_eq!(a.breakdown.total, 0.0);
        assert_eq!(a.graph.eval(a.total, &a.bindings).unwrap(), 0.0);
    }

    #[test]
    fn single_point_data_loss() {
        // widths (2,1): output = 0.1 everywhere via the bias.
        let arch = Architecture::new(vec![2, 1]).unwrap();
        let params = [0.0, 0.0, 0.1];
        let domain = DomainSpec::standard(0.5);
        let ic = PointSet {
            role: Role::Initial,
            coords: vec![(0.01, 0.0)],
            targets: Some(vec![0.3]),
        };
        let bc = PointSet {
            role: Role::Boundary,
            coords: vec![],
            targets: Some(vec![]),
        };
        let colloc = sample_collocation(&domain, 3, 1);
        let w = LossWeights::new(1.0, 0.0).unwrap();
        let a = forward_loss(&arch, &params, &ic, &bc, &colloc, &domain, w).unwrap();
        assert!((a.breakdown.total - 0.04).abs() < 1e-15);
        assert_eq!(a.breakdown.total, a.breakdown.mse_ic + a.breakdown.mse_bc);
    }

    #[test]
    fn weight_degeneration_and_breakdown_consistency() {
        let (arch, params, p) = small_forward(LossWeights::new(1.0, 0.0).unwrap());
        let [ic, bc, colloc] = p.point_sets();
        let a = forward_loss(&arch, &params, ic, bc, colloc, &p.domain, p.weights).unwrap();
        assert_eq!(a.breakdown.total, a.breakdown.mse_ic + a.breakdown.mse_bc);

        let w = LossWeights::new(0.7, 0.3).unwrap();
        let a = forward_loss(&arch, &params, ic, bc, colloc, &p.domain, w).unwrap();
        let b = a.breakdown;
        let node_total = a.graph.eval(a.total, &a.bindings).unwrap();
        let recomputed = w.w_u * (b.mse_ic + b.mse_bc) + w.w_f * b.mse_f;
        assert!((node_total - recomputed).abs() <= 4.0 * f64::EPSILON * node_total.abs());
        assert!([b.mse_ic, b.mse_bc, b.mse_f, b.total]
            .iter()
            .all(|&v| v >= 0.0));
    }

    #[test]
    fn separate_ic_bc_averaging_differs_from_pooled_when_unbalanced() {
        let (arch, params, p) = small_forward(LossWeights::default());
        let [ic, bc, colloc] = p.point_sets();
        let a = forward_loss(&arch, &params, ic, bc, colloc, &p.domain, p.weights).unwrap();
        let u = |s: &PointSet| net::eval_values(&arch, &params, &s.coords);
        let e_ic = mse(&u(ic), ic.targets.as_ref().unwrap()).unwrap();
        let e_bc = mse(&u(bc), bc.targets.as_ref().unwrap()).unwrap();
        assert!(rel(a.breakdown.mse_u, e_ic + e_bc) < 1e-12);
        let pooled =
            (e_ic * ic.len() as f64 + e_bc * bc.len() as f64) / (ic.len() + bc.len()) as f64;
        assert!(rel(a.breakdown.mse_u, pooled) > 1e-6);
    }

    #[test]
    fn engines_agree_with_unrolled_graph() {
        let (arch, params, p) = small_forward(LossWeights::new(1.0, 0.1).unwrap());
        let [ic, bc, colloc] = p.point_sets();
        let a = forward_loss(&arch, &params, ic, bc, colloc, &p.domain, p.weights).unwrap();
        let g_ref = a.gradient().unwrap();
        for engine in [Engine::Batched, Engine::Graph] {
            let (b, g) = p.evaluate(&params, engine).unwrap();
            assert!(rel(b.total, a.breakdown.total) < 1e-12, "{engine:?}");
            assert!(rel(b.mse_f, a.breakdown.mse_f) < 1e-12);
            for (x, y) in g.iter().zip(&g_ref) {
                assert!(
                    (x - y).abs() <= 1e-11 * (1.0 + y.abs()),
                    "{engine:?}: {x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn forward_gradient_matches_finite_differences() {
        let (_, params, p) = small_forward(LossWeights::default());
        let (_, g) = p.evaluate_batched(&params);
        let h = 1e-6;
        for i in 0..params.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (p.evaluate_batched(&plus).0.total - p.evaluate_batched(&minus).0.total)
                / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1e-3),
                "coord {i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn inverse_engines_and_finite_differences() {
        let arch = Architecture::new(vec![2, 5, 5, 1]).unwrap();
        let domain = DomainSpec::standard(0.5);
        let data = sample_interior_data(&domain, 10, 4);
        let p = InverseProblem::new(arch.clone(), 0.5, data.clone()).unwrap();
        let params = init_params(&arch, 2).into_inner();
        let mut theta = params.clone();
        theta.push(0.3);

        let a = inverse_loss(&arch, &params, 0.3, &data, 0.5).unwrap();
        let g_ref = a.gradient().unwrap();
        for engine in [Engine::Batched, Engine::Graph] {
            let (b, g) = p.evaluate(&theta, engine).unwrap();
            assert!(rel(b.total, a.breakdown.total) < 1e-12);
            assert!(rel(b.mse_data, a.breakdown.mse_data) < 1e-12);
            for (x, y) in g.iter().zip(&g_ref) {
                assert!((x - y).abs() <= 1e-11 * (1.0 + y.abs()));
            }
        }
        let h = 1e-6;
        let (_, g) = p.evaluate_batched(&theta);
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (p.evaluate_batched(&plus).0.total - p.evaluate_batched(&minus).0.total)
                / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1e-3),
                "coord {i}"
            );
        }
    }

    #[test]
    fn inverse_loss_requires_labels_and_role() {
        let arch = Architecture::new(vec![2, 3, 1]).unwrap();
        let params = vec![0.0; arch.param_count()];
        let colloc = sample_collocation(&DomainSpec::standard(0.5), 3, 1);
        assert!(matches!(
            inverse_loss(&arch, &params, 0.1, &colloc, 0.5),
            Err(LossError::WrongRole { .. })
        ));
        let unlabeled = PointSet {
            role: Role::InteriorData,
            coords: vec![(0.5, 0.0)],
            targets: None,
        };
        assert_eq!(
            inverse_loss(&arch, &params, 0.1, &unlabeled, 0.5).unwrap_err(),
            LossError::MissingTargets(Role::InteriorData)
        );
    }

    #[test]
    fn target_shift_raises_data_loss_by_its_square() {
        let arch = Architecture::new(vec![2, 3, 1]).unwrap();
        let params = init_params(&arch, 1).into_inner();
        let domain = DomainSpec::standard(0.5);
        let data = sample_interior_data(&domain, 6, 1);
        let pred = net::eval_values(&arch, &params, &data.coords);
        let mut exact = data.clone();
        exact.targets = Some(pred);
        let mut shifted = exact.clone();
        shifted.targets = Some(
            exact
                .targets
                .as_ref()
                .unwrap()
                .iter()
                .map(|v| v + 0.25)
                .collect(),
        );
        let a = inverse_loss(&arch, &params, 0.4, &exact, 0.5).unwrap();
        let b = inverse_loss(&arch, &params, 0.4, &shifted, 0.5).unwrap();
        assert!(a.breakdown.mse_data < 1e-30);
        assert!((b.breakdown.mse_data - 0.0625).abs() < 1e-14);
    }
}
