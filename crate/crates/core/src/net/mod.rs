//! Fully connected tanh networks `u(t, x)`.
//!
//! Parameters live in one flat vector, layer by layer: the `fan_in × fan_out`
//! weight matrix in row-major order followed by the `fan_out` biases, so that
//! layer pre-activations are `z_j = b_j + Σ_i h_i W[i][j]`. Hidden layers use
//! `tanh`; the output layer is linear.

mod jet;

pub use jet::{eval_values, Jet, JetAdjoint, JetTrace};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{Graph, NodeRef};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid architecture {widths:?}: {reason}")]
    InvalidArchitecture {
        widths: Vec<usize>,
        reason: &'static str,
    },
    #[error("expected {expected} parameters, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("parameter {index} is not finite")]
    NonFiniteParameter { index: usize },
}

/// Affine map of `(t, x)` onto `[-1, 1]²` applied before the first layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub t_lo: f64,
    pub t_hi: f64,
    pub x_lo: f64,
    pub x_hi: f64,
}

impl InputScaling {
    /// `(scale, shift)` pairs for t and x: `t' = scale·t + shift`.
    pub fn coefficients(&self) -> [(f64, f64); 2] {
        let map = |lo: f64, hi: f64| {
            let s = 2.0 / (hi - lo);
            (s, -1.0 - s * lo)
        };
        [map(self.t_lo, self.t_hi), map(self.x_lo, self.x_hi)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    widths: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_scaling: Option<InputScaling>,
}

impl Architecture {
    pub fn new(widths: Vec<usize>) -> Result<Self, NetError> {
        let bad = |reason| NetError::InvalidArchitecture {
            widths: widths.clone(),
            reason,
        };
        if widths.len() < 2 {
            return Err(bad("need at least an input and an output layer"));
        }
        if widths[0] != 2 {
            return Err(bad("input width must be 2 (t, x)"));
        }
        if *widths.last().unwrap() != 1 {
            return Err(bad("output width must be 1"));
        }
        if widths.contains(&0) {
            return Err(bad("all widths must be at least 1"));
        }
        Ok(Self {
            widths,
            input_scaling: None,
        })
    }

    /// `hidden_layers` tanh layers of `width` neurons between (t, x) and u.
    pub fn mlp(hidden_layers: usize, width: usize) -> Result<Self, NetError> {
        let mut widths = vec![2];
        widths.extend(std::iter::repeat_n(width, hidden_layers));
        widths.push(1);
        Self::new(widths)
    }

    /// Eight hidden layers of twenty neurons: 3021 parameters.
    pub fn default_pinn() -> Self {
        Self::mlp(8, 20).expect("static architecture")
    }

    pub fn with_input_scaling(mut self, scaling: Option<InputScaling>) -> Self {
        self.input_scaling = scaling;
        self
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_scaling(&self) -> Option<InputScaling> {
        self.input_scaling
    }

    pub fn hidden_layers(&self) -> usize {
        self.widths.len() - 2
    }

    /// `(fan_in, fan_out, offset)` of every layer inside the flat vector.
    pub fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.widths.windows(2).map(move |w| {
            let here = offset;
            offset += w[0] * w[1] + w[1];
            (w[0], w[1], here)
        })
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.widths)
    }
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Flat trainable parameters in fixed layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(arch: &Architecture, values: Vec<f64>) -> Result<Self, NetError> {
        if values.len() != arch.param_count() {
            return Err(NetError::ShapeMismatch {
                expected: arch.param_count(),
                actual: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(NetError::NonFiniteParameter { index });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(arch: &Architecture, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; arch.param_count()];
    for (fan_in, fan_out, offset) in arch.layers() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for w in &mut values[offset..offset + fan_in * fan_out] {
            *w = dist.sample(&mut rng);
        }
    }
    ParamVector(values)
}

/// Builds the network output as a graph node over `t`, `x` and one node per
/// parameter.
pub fn forward(
    arch: &Architecture,
    graph: &mut Graph,
    param_nodes: &[NodeRef],
    t: NodeRef,
    x: NodeRef,
) -> Result<NodeRef, NetError> {
    if param_nodes.len() != arch.param_count() {
        return Err(NetError::ShapeMismatch {
            expected: arch.param_count(),
            actual: param_nodes.len(),
        });
    }
    let mut h: Vec<NodeRef> = match arch.input_scaling {
        None => vec![t, x],
        Some(s) => {
            let [(st, ct), (sx, cx)] = s.coefficients();
            [(t, st, ct), (x, sx, cx)]
                .into_iter()
                .map(|(v, s, c)| {
                    let s = graph.constant(s);
                    let c = graph.constant(c);
                    let m = graph.mul(s, v);
                    graph.add(m, c)
                })
                .collect()
        }
    };

    let last = arch.widths.len() - 2;
    for (layer, (fan_in, fan_out, offset)) in arch.layers().enumerate() {
        let weights = &param_nodes[offset..offset + fan_in * fan_out];
        let biases = &param_nodes[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        let mut next = Vec::with_capacity(fan_out);
        for j in 0..fan_out {
            let mut acc = graph.mul(h[0], weights[j]);
            for i in 1..fan_in {
                let term = graph.mul(h[i], weights[i * fan_out + j]);
                acc = graph.add(acc, term);
            }
            let z = graph.add(acc, biases[j]);
            next.push(if layer == last { z } else { graph.tanh(z) });
        }
        h = next;
    }
    Ok(h[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgraph::Bindings;

    #[test]
    fn parameter_counts() {
        assert_eq!(Architecture::default_pinn().param_count(), 3021);
        assert_eq!(param_count(&[1, 1]), 2);
        assert_eq!(param_count(&[2, 10, 1]), 41);
        assert_eq!(Architecture::mlp(9, 20).unwrap().param_count(), 3441);
    }

    #[test]
    fn rejects_bad_architectures() {
        assert!(Architecture::new(vec![2]).is_err());
        assert!(Architecture::new(vec![3, 5, 1]).is_err());
        assert!(Architecture::new(vec![2, 5, 2]).is_err());
        assert!(Architecture::new(vec![2, 0, 1]).is_err());
    }

    #[test]
    fn glorot_init_is_deterministic_bounded_and_zero_bias() {
        let arch = Architecture::default_pinn();
        let a = init_params(&arch, 7);
        assert_eq!(a, init_params(&arch, 7));
        assert_ne!(a, init_params(&arch, 8));
        for (fan_in, fan_out, offset) in arch.layers() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = &a.as_slice()[offset..offset + fan_in * fan_out];
            assert!(w.iter().all(|v| v.abs() <= bound));
            let b = &a.as_slice()[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            assert!(b.iter().all(|&v| v == 0.0));
        }
        let first = &a.as_slice()[..40];
        let max = first.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 0.5222329678670935);
        assert!(max > 0.4, "sample should come close to the bound");
    }

    fn eval_net(arch: &Architecture, params: &[f64], t: f64, x: f64) -> f64 {
        let mut g = Graph::new();
        let p: Vec<_> = (0..params.len()).map(|_| g.variable()).collect();
        let (tv, xv) = (g.variable(), g.variable());
        let u = forward(arch, &mut g, &p, tv, xv).unwrap();
        let mut b = Bindings::new();
        for (&n, &v) in p.iter().zip(params) {
            b.set(n, v);
        }
        b.set(tv, t).set(xv, x);
        g.eval(u, &b).unwrap()
    }

    #[test]
    fn zero_network_is_zero() {
        let arch = Architecture::mlp(2, 5).unwrap();
        let zeros = vec![0.0; arch.param_count()];
        assert_eq!(eval_net(&arch, &zeros, 0.3, -0.7), 0.0);
    }

    #[test]
    fn constant_and_tanh_realizations() {
        let arch = Architecture::new(vec![2, 1]).unwrap();
        assert_eq!(eval_net(&arch, &[0.0, 0.0, 0.25], 0.9, 0.1), 0.25);

        let arch = Architecture::new(vec![2, 1, 1]).unwrap();
        let p = [1.0, 0.0, 0.0, 1.0, 0.0];
        let v = eval_net(&arch, &p, 0.5, 0.3);
        assert_eq!(v, 0.5f64.tanh());
        assert!((v - 0.4621).abs() < 1e-4);
    }

    #[test]
    fn forward_checks_parameter_count() {
        let arch = Architecture::mlp(1, 3).unwrap();
        let mut g = Graph::new();
        let p: Vec<_> = (0..4).map(|_| g.variable()).collect();
        let (t, x) = (g.variable(), g.variable());
        assert_eq!(
            forward(&arch, &mut g, &p, t, x).unwrap_err(),
            NetError::ShapeMismatch {
                expected: 13,
                actual: 4
            }
        );
    }

    #[test]
    fn param_vector_validates() {
        let arch = Architecture::new(vec![2, 1]).unwrap();
        assert!(ParamVector::new(&arch, vec![1.0]).is_err());
        assert!(ParamVector::new(&arch, vec![1.0, f64::NAN, 0.0]).is_err());
        assert!(ParamVector::new(&arch, vec![1.0, 2.0, 0.0]).is_ok());
    }

    #[test]
    fn input_scaling_maps_domain_corners() {
        let s = InputScaling {
            t_lo: 0.01,
            t_hi: 1.0,
            x_lo: -1.0,
            x_hi: 1.0,
        };
        let [(st, ct), (sx, cx)] = s.coefficients();
        assert!((st * 0.01 + ct + 1.0).abs() < 1e-15);
        assert!((st * 1.0 + ct - 1.0).abs() < 1e-15);
        assert_eq!(-sx + cx, -1.0);
        assert_eq!(sx + cx, 1.0);
    }
}
