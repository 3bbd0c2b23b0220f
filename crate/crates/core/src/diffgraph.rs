//! Scalar computation graphs with graph-producing reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of primitive records. [`Graph::differentiate`]
//! appends the derivative as new records, so the result can be differentiated
//! again to any order. [`Graph::eval`] and [`Graph::gradient`] are the numeric
//! entry points; [`Tape`] compiles a finished graph for repeated evaluation with
//! per-point inputs.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("input variable at node {node} has no binding")]
    UnboundVariable { node: usize },
    #[error("{op} is undefined for operand value(s) at node {node}")]
    DomainError { node: usize, op: &'static str },
    #[error("node {node} is not an input variable")]
    NotAVariable { node: usize },
    #[error("node {node} belongs to a different graph")]
    ForeignNode { node: usize },
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Handle to one record of the [`Graph`] that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef {
    graph: u32,
    index: u32,
}

impl NodeRef {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Unary {
    Neg,
    Exp,
    Ln,
    Tanh,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Node {
    Const(f64),
    Var,
    Unary(Unary, u32),
    Binary(Binary, u32, u32),
    Powf(u32, f64),
}

/// Hash-consing key; floats are keyed by bit pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Key {
    Const(u64),
    Unary(Unary, u32),
    Binary(Binary, u32, u32),
    Powf(u32, u64),
}

impl Node {
    fn key(self) -> Option<Key> {
        match self {
            Node::Const(v) => Some(Key::Const(v.to_bits())),
            Node::Var => None,
            Node::Unary(op, a) => Some(Key::Unary(op, a)),
            Node::Binary(op, a, b) => Some(Key::Binary(op, a, b)),
            Node::Powf(a, p) => Some(Key::Powf(a, p.to_bits())),
        }
    }

    fn visit_operands(self, mut f: impl FnMut(u32)) {
        match self {
            Node::Const(_) | Node::Var => {}
            Node::Unary(_, a) | Node::Powf(a, _) => f(a),
            Node::Binary(_, a, b) => {
                f(a);
                f(b);
            }
        }
    }
}

/// Values bound to input variables for one evaluation.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    values: HashMap<NodeRef, f64>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, var: NodeRef, value: f64) -> &mut Self {
        self.values.insert(var, value);
        self
    }

    pub fn with(mut self, var: NodeRef, value: f64) -> Self {
        self.values.insert(var, value);
        self
    }

    pub fn get(&self, var: NodeRef) -> Option<f64> {
        self.values.get(&var).copied()
    }
}

/// Append-only scalar expression graph.
///
/// Structurally identical records are shared (hash-consing), and constant
/// operands are folded where the result is exact or well defined. Builder
/// methods panic when handed a [`NodeRef`] from another graph; fallible
/// entry points return [`GraphError::ForeignNode`] instead.
#[derive(Clone, Debug)]
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    interned: HashMap<Key, u32>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            interned: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn handle(&self, index: u32) -> NodeRef {
        NodeRef {
            graph: self.id,
            index,
        }
    }

    fn check(&self, node: NodeRef) -> Result<u32> {
        if node.graph != self.id || node.index as usize >= self.nodes.len() {
            return Err(GraphError::ForeignNode { node: node.index() });
        }
        Ok(node.index)
    }

    fn idx(&self, node: NodeRef) -> u32 {
        match self.check(node) {
            Ok(i) => i,
            Err(e) => panic!("{e}"),
        }
    }

    fn push(&mut self, node: Node) -> u32 {
        if let Some(key) = node.key() {
            if let Some(&existing) = self.interned.get(&key) {
                return existing;
            }
            let index = self.nodes.len() as u32;
            self.nodes.push(node);
            self.interned.insert(key, index);
            index
        } else {
            let index = self.nodes.len() as u32;
            self.nodes.push(node);
            index
        }
    }

    fn const_value(&self, index: u32) -> Option<f64> {
        match self.nodes[index as usize] {
            Node::Const(v) => Some(v),
            _ => None,
        }
    }

    /// Adds a new input variable. Variables are never shared.
    pub fn variable(&mut self) -> NodeRef {
        let i = self.push(Node::Var);
        self.handle(i)
    }

    pub fn constant(&mut self, value: f64) -> NodeRef {
        let i = self.c(value);
        self.handle(i)
    }

    pub fn is_variable(&self, node: NodeRef) -> bool {
        matches!(self.check(node), Ok(i) if self.nodes[i as usize] == Node::Var)
    }

    /// The folded value of `node`, if it is a constant record.
    pub fn as_constant(&self, node: NodeRef) -> Option<f64> {
        self.check(node).ok().and_then(|i| self.const_value(i))
    }

    fn c(&mut self, value: f64) -> u32 {
        self.push(Node::Const(value))
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        let (a, b) = (self.idx(a), self.idx(b));
        let i = self.add_i(a, b);
        self.handle(i)
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        let (a, b) = (self.idx(a), self.idx(b));
        let i = self.sub_i(a, b);
        self.handle(i)
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        let (a, b) = (self.idx(a), self.idx(b));
        let i = self.mul_i(a, b);
        self.handle(i)
    }

    pub fn div(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        let (a, b) = (self.idx(a), self.idx(b));
        let i = self.div_i(a, b);
        self.handle(i)
    }

    pub fn neg(&mut self, a: NodeRef) -> NodeRef {
        let a = self.idx(a);
        let i = self.neg_i(a);
        self.handle(i)
    }

    /// `a` raised to a constant real exponent.
    pub fn powf(&mut self, a: NodeRef, exponent: f64) -> NodeRef {
        let a = self.idx(a);
        let i = self.powf_i(a, exponent);
        self.handle(i)
    }

    pub fn exp(&mut self, a: NodeRef) -> NodeRef {
        let a = self.idx(a);
        let i = self.unary_i(Unary::Exp, a);
        self.handle(i)
    }

    pub fn ln(&mut self, a: NodeRef) -> NodeRef {
        let a = self.idx(a);
        let i = self.unary_i(Unary::Ln, a);
        self.handle(i)
    }

    pub fn tanh(&mut self, a: NodeRef) -> NodeRef {
        let a = self.idx(a);
        let i = self.unary_i(Unary::Tanh, a);
        self.handle(i)
    }

    pub fn sqrt(&mut self, a: NodeRef) -> NodeRef {
        let a = self.idx(a);
        let i = self.unary_i(Unary::Sqrt, a);
        self.handle(i)
    }

    /// Sum of `terms` accumulated left to right; zero for an empty slice.
    pub fn sum(&mut self, terms: &[NodeRef]) -> NodeRef {
        let mut acc = self.c(0.0);
        for &t in terms {
            let t = self.idx(t);
            acc = self.add_i(acc, t);
        }
        self.handle(acc)
    }

    fn add_i(&mut self, a: u32, b: u32) -> u32 {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) => self.c(x + y),
            (Some(0.0), _) => b,
            (_, Some(0.0)) => a,
            _ => {
                let (a, b) = if a <= b { (a, b) } else { (b, a) };
                self.push(Node::Binary(Binary::Add, a, b))
            }
        }
    }

    fn sub_i(&mut self, a: u32, b: u32) -> u32 {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) => self.c(x - y),
            (_, Some(0.0)) => a,
            (Some(0.0), _) => self.neg_i(b),
            _ => self.push(Node::Binary(Binary::Sub, a, b)),
        }
    }

    fn mul_i(&mut self, a: u32, b: u32) -> u32 {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) => self.c(x * y),
            (Some(x), _) | (_, Some(x)) if x == 0.0 => self.c(0.0),
            (Some(1.0), _) => b,
            (_, Some(1.0)) => a,
            (Some(-1.0), _) => self.neg_i(b),
            (_, Some(-1.0)) => self.neg_i(a),
            _ => {
                let (a, b) = if a <= b { (a, b) } else { (b, a) };
                self.push(Node::Binary(Binary::Mul, a, b))
            }
        }
    }

    fn div_i(&mut self, a: u32, b: u32) -> u32 {
        match (self.const_value(a), self.const_value(b)) {
            (Some(x), Some(y)) if y != 0.0 => self.c(x / y),
            (_, Some(1.0)) => a,
            _ => self.push(Node::Binary(Binary::Div, a, b)),
        }
    }

    fn neg_i(&mut self, a: u32) -> u32 {
        match self.nodes[a as usize] {
            Node::Const(x) => self.c(-x),
            Node::Unary(Unary::Neg, inner) => inner,
            _ => self.push(Node::Unary(Unary::Neg, a)),
        }
    }

    fn powf_i(&mut self, a: u32, p: f64) -> u32 {
        if p == 1.0 {
            return a;
        }
        if p == 0.0 {
            return self.c(1.0);
        }
        match self.const_value(a) {
            Some(x) if pow_defined(x, p) => self.c(x.powf(p)),
            _ => self.push(Node::Powf(a, p)),
        }
    }

    fn unary_i(&mut self, op: Unary, a: u32) -> u32 {
        if op == Unary::Neg {
            return self.neg_i(a);
        }
        if let Some(x) = self.const_value(a) {
            if let Ok(v) = apply_unary(op, x) {
                return self.c(v);
            }
        }
        self.push(Node::Unary(op, a))
    }

    fn reachable(&self, roots: &[u32]) -> Vec<bool> {
        let top = roots.iter().copied().max().map_or(0, |m| m as usize + 1);
        let mut mark = vec![false; top];
        for &r in roots {
            mark[r as usize] = true;
        }
        for i in (0..top).rev() {
            if mark[i] {
                self.nodes[i].visit_operands(|o| mark[o as usize] = true);
            }
        }
        mark
    }

    fn forward_values(&self, root: u32, bindings: &Bindings) -> Result<Vec<f64>> {
        let mark = self.reachable(&[root]);
        let mut vals = vec![0.0; mark.len()];
        for (i, &live) in mark.iter().enumerate() {
            if !live {
                continue;
            }
            vals[i] = match self.nodes[i] {
                Node::Const(v) => v,
                Node::Var => bindings
                    .get(self.handle(i as u32))
                    .ok_or(GraphError::UnboundVariable { node: i })?,
                node => apply(node, &vals).map_err(|op| GraphError::DomainError { node: i, op })?,
            };
        }
        Ok(vals)
    }

    /// Evaluates `node` in one forward sweep over the records it depends on.
    pub fn eval(&self, node: NodeRef, bindings: &Bindings) -> Result<f64> {
        let root = self.check(node)?;
        Ok(self.forward_values(root, bindings)?[root as usize])
    }

    /// Appends a subgraph computing d(node)/d(wrt) and returns its root.
    pub fn differentiate(&mut self, node: NodeRef, wrt: NodeRef) -> Result<NodeRef> {
        Ok(self.differentiate_many(node, &[wrt])?[0])
    }

    /// Derivatives of `node` with respect to each of `wrt`, built by a single
    /// reverse accumulation over the graph.
    pub fn differentiate_many(&mut self, node: NodeRef, wrt: &[NodeRef]) -> Result<Vec<NodeRef>> {
        let root = self.check(node)?;
        let mut targets = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let i = self.check(w)?;
            if self.nodes[i as usize] != Node::Var {
                return Err(GraphError::NotAVariable { node: i as usize });
            }
            targets.push(i);
        }

        let n = root as usize + 1;
        let mut depends = vec![false; n];
        for &t in &targets {
            if (t as usize) < n {
                depends[t as usize] = true;
            }
        }
        for i in 0..n {
            if !depends[i] {
                let mut d = false;
                self.nodes[i].visit_operands(|o| d |= depends[o as usize]);
                depends[i] = d;
            }
        }
        let live = self.reachable(&[root]);

        let mut adj: Vec<Option<u32>> = vec![None; n];
        adj[root as usize] = Some(self.c(1.0));
        for i in (0..n).rev() {
            if !live[i] || !depends[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let here = i as u32;
            match self.nodes[i] {
                Node::Const(_) | Node::Var => {}
                Node::Unary(op, a) => {
                    if !depends[a as usize] {
                        continue;
                    }
                    let contrib = match op {
                        Unary::Neg => self.neg_i(g),
                        Unary::Exp => self.mul_i(g, here),
                        Unary::Ln => self.div_i(g, a),
                        Unary::Tanh => {
                            let sq = self.mul_i(here, here);
                            let one = self.c(1.0);
                            let d = self.sub_i(one, sq);
                            self.mul_i(g, d)
                        }
                        Unary::Sqrt => {
                            let two = self.c(2.0);
                            let den = self.mul_i(two, here);
                            self.div_i(g, den)
                        }
                    };
                    self.accumulate(&mut adj, a, contrib);
                }
                Node::Powf(a, p) => {
                    if !depends[a as usize] {
                        continue;
                    }
                    let pw = self.powf_i(a, p - 1.0);
                    let k = self.c(p);
                    let d = self.mul_i(k, pw);
                    let contrib = self.mul_i(g, d);
                    self.accumulate(&mut adj, a, contrib);
                }
                Node::Binary(op, a, b) => {
                    let (da, db) = (depends[a as usize], depends[b as usize]);
                    match op {
                        Binary::Add => {
                            if da {
                                self.accumulate(&mut adj, a, g);
                            }
                            if db {
                                self.accumulate(&mut adj, b, g);
                            }
                        }
                        Binary::Sub => {
                            if da {
                                self.accumulate(&mut adj, a, g);
                            }
                            if db {
                                let ng = self.neg_i(g);
                                self.accumulate(&mut adj, b, ng);
                            }
                        }
                        Binary::Mul => {
                            if da {
                                let c = self.mul_i(g, b);
                                self.accumulate(&mut adj, a, c);
                            }
                            if db {
                                let c = self.mul_i(g, a);
                                self.accumulate(&mut adj, b, c);
                            }
                        }
                        Binary::Div => {
                            if da {
                                let c = self.div_i(g, b);
                                self.accumulate(&mut adj, a, c);
                            }
                            if db {
                                // d(a/b)/db = -(a/b)/b
                                let q = self.mul_i(g, here);
                                let q = self.div_i(q, b);
                                let c = self.neg_i(q);
                                self.accumulate(&mut adj, b, c);
                            }
                        }
                    }
                }
            }
        }

        Ok(targets
            .iter()
            .map(|&t| {
                let i = adj.get(t as usize).copied().flatten();
                let i = i.unwrap_or_else(|| self.c(0.0));
                self.handle(i)
            })
            .collect())
    }

    fn accumulate(&mut self, adj: &mut [Option<u32>], target: u32, contrib: u32) {
        let slot = &mut adj[target as usize];
        *slot = Some(match *slot {
            None => contrib,
            Some(prev) => self.add_i(prev, contrib),
        });
    }

    /// Numeric gradient of `loss` with respect to `params` by one forward and
    /// one reverse sweep; no records are appended.
    pub fn gradient(
        &self,
        loss: NodeRef,
        params: &[NodeRef],
        bindings: &Bindings,
    ) -> Result<Vec<f64>> {
        let root = self.check(loss)?;
        let mut slots = Vec::with_capacity(params.len());
        for &p in params {
            let i = self.check(p)?;
            if self.nodes[i as usize] != Node::Var {
                return Err(GraphError::NotAVariable { node: i as usize });
            }
            slots.push(i as usize);
        }
        let vals = self.forward_values(root, bindings)?;
        let live = self.reachable(&[root]);
        let mut adj = vec![0.0; vals.len()];
        adj[root as usize] = 1.0;
        for i in (0..vals.len()).rev() {
            if live[i] && adj[i] != 0.0 {
                backprop(self.nodes[i], i, &vals, &mut adj);
            }
        }
        Ok(slots
            .iter()
            .map(|&s| adj.get(s).copied().unwrap_or(0.0))
            .collect())
    }
}

fn pow_defined(x: f64, p: f64) -> bool {
    !(x < 0.0 && p.fract() != 0.0) && !(x == 0.0 && p < 0.0)
}

fn apply_unary(op: Unary, x: f64) -> std::result::Result<f64, &'static str> {
    Ok(match op {
        Unary::Neg => -x,
        Unary::Exp => x.exp(),
        Unary::Tanh => x.tanh(),
        Unary::Ln if x > 0.0 => x.ln(),
        Unary::Ln => return Err("ln"),
        Unary::Sqrt if x >= 0.0 => x.sqrt(),
        Unary::Sqrt => return Err("sqrt"),
    })
}

fn apply(node: Node, vals: &[f64]) -> std::result::Result<f64, &'static str> {
    Ok(match node {
        Node::Const(v) => v,
        Node::Var => unreachable!("variables are bound by the caller"),
        Node::Unary(op, a) => apply_unary(op, vals[a as usize])?,
        Node::Powf(a, p) => {
            let x = vals[a as usize];
            if !pow_defined(x, p) {
                return Err("powf");
            }
            x.powf(p)
        }
        Node::Binary(op, a, b) => {
            let (x, y) = (vals[a as usize], vals[b as usize]);
            match op {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div if y != 0.0 => x / y,
                Binary::Div => return Err("division"),
            }
        }
    })
}

fn backprop(node: Node, i: usize, vals: &[f64], adj: &mut [f64]) {
    let g = adj[i];
    let z = vals[i];
    match node {
        Node::Const(_) | Node::Var => {}
        Node::Unary(op, a) => {
            let a = a as usize;
            adj[a] += match op {
                Unary::Neg => -g,
                Unary::Exp => g * z,
                Unary::Ln => g / vals[a],
                Unary::Tanh => g * (1.0 - z * z),
                Unary::Sqrt => g / (2.0 * z),
            };
        }
        Node::Powf(a, p) => {
            let a = a as usize;
            adj[a] += g * (p * vals[a].powf(p - 1.0));
        }
        Node::Binary(op, a, b) => {
            let (a, b) = (a as usize, b as usize);
            match op {
                Binary::Add => {
                    adj[a] += g;
                    adj[b] += g;
                }
                Binary::Sub => {
                    adj[a] += g;
                    adj[b] -= g;
                }
                Binary::Mul => {
                    let (x, y) = (vals[a], vals[b]);
                    adj[a] += g * y;
                    adj[b] += g * x;
                }
                Binary::Div => {
                    let y = vals[b];
                    adj[a] += g / y;
                    adj[b] -= g * z / y;
                }
            }
        }
    }
}

/// A graph slice compiled for repeated evaluation.
///
/// Only records reachable from the outputs are kept, renumbered densely in
/// topological order. Every reachable variable must be one of the declared
/// inputs. A `Tape` is immutable and shareable; each worker owns a
/// [`TapeBuffers`].
#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    input_slot: Vec<Option<u32>>,
    outputs: Vec<u32>,
    inputs: usize,
}

/// Private forward and adjoint storage for evaluating a [`Tape`].
#[derive(Clone, Debug)]
pub struct TapeBuffers {
    values: Vec<f64>,
    adjoints: Vec<f64>,
}

impl Tape {
    pub fn compile(graph: &Graph, inputs: &[NodeRef], outputs: &[NodeRef]) -> Result<Tape> {
        let mut input_of: HashMap<u32, usize> = HashMap::new();
        for (k, &v) in inputs.iter().enumerate() {
            let i = graph.check(v)?;
            if graph.nodes[i as usize] != Node::Var {
                return Err(GraphError::NotAVariable { node: i as usize });
            }
            input_of.insert(i, k);
        }
        let roots = outputs
            .iter()
            .map(|&o| graph.check(o))
            .collect::<Result<Vec<_>>>()?;
        let live = graph.reachable(&roots);

        let mut remap = vec![u32::MAX; live.len()];
        let mut nodes = Vec::new();
        let mut input_slot = Vec::new();
        for (i, &l) in live.iter().enumerate() {
            if !l {
                continue;
            }
            let r = |o: u32| remap[o as usize];
            let node = match graph.nodes[i] {
                Node::Var => {
                    let k = *input_of
                        .get(&(i as u32))
                        .ok_or(GraphError::UnboundVariable { node: i })?;
                    input_slot.push(Some(k as u32));
                    remap[i] = nodes.len() as u32;
                    nodes.push(Node::Var);
                    continue;
                }
                Node::Const(v) => Node::Const(v),
                Node::Unary(op, a) => Node::Unary(op, r(a)),
                Node::Powf(a, p) => Node::Powf(r(a), p),
                Node::Binary(op, a, b) => Node::Binary(op, r(a), r(b)),
            };
            input_slot.push(None);
            remap[i] = nodes.len() as u32;
            nodes.push(node);
        }
        Ok(Tape {
            nodes,
            input_slot,
            outputs: roots.iter().map(|&o| remap[o as usize]).collect(),
            inputs: inputs.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn buffers(&self) -> TapeBuffers {
        TapeBuffers {
            values: vec![0.0; self.nodes.len()],
            adjoints: vec![0.0; self.nodes.len()],
        }
    }

    /// Forward sweep. Domain violations surface as non-finite outputs.
    pub fn forward(&self, buf: &mut TapeBuffers, inputs: &[f64]) {
        assert_eq!(inputs.len(), self.inputs, "tape input count");
        let vals = &mut buf.values;
        for (i, &node) in self.nodes.iter().enumerate() {
            vals[i] = match node {
                Node::Var => inputs[self.input_slot[i].unwrap() as usize],
                node => apply(node, vals).unwrap_or(f64::NAN),
            };
        }
    }

    pub fn output(&self, buf: &TapeBuffers, k: usize) -> f64 {
        buf.values[self.outputs[k] as usize]
    }

    /// Reverse sweep seeded with `seeds[k]` on output `k`; adds the resulting
    /// input adjoints into `input_grad`. Must follow [`Tape::forward`].
    pub fn backward(&self, buf: &mut TapeBuffers, seeds: &[f64], input_grad: &mut [f64]) {
        assert_eq!(seeds.len(), self.outputs.len(), "tape seed count");
        buf.adjoints.fill(0.0);
        for (&o, &s) in self.outputs.iter().zip(seeds) {
            buf.adjoints[o as usize] += s;
        }
        for i in (0..self.nodes.len()).rev() {
            if buf.adjoints[i] == 0.0 {
                continue;
            }
            match self.nodes[i] {
                Node::Var => input_grad[self.input_slot[i].unwrap() as usize] += buf.adjoints[i],
                node => backprop(node, i, &buf.values, &mut buf.adjoints),
            }
        }
    }
}
