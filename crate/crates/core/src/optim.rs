//! Adam and L-BFGS over flat parameter vectors.

use std::collections::VecDeque;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("gradient entry {index} is not finite")]
    NonFiniteGradient { index: usize },
    #[error("objective is not finite at the starting point")]
    NonFiniteObjective,
    #[error("parameter and gradient sizes differ ({params} vs {grad})")]
    SizeMismatch { params: usize, grad: usize },
}

/// Bias-corrected Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), OptimError> {
        if params.len() != grad.len() || self.m.len() != grad.len() {
            return Err(OptimError::SizeMismatch {
                params: params.len(),
                grad: grad.len(),
            });
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGradient { index });
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub f_rel_tol: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 50,
            max_iters: 50_000,
            grad_tol: 1e-8,
            f_rel_tol: 10.0 * f64::EPSILON,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            max_line_search: 25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    LineSearchFailure,
}

/// One accepted iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub step: f64,
}

pub fn write_history<W: Write>(rows: &[HistoryRow], mut w: W) -> io::Result<()> {
    writeln!(w, "iter,loss,grad_norm,step")?;
    for r in rows {
        writeln!(w, "{},{:e},{:e},{:e}", r.iter, r.loss, r.grad_norm, r.step)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsResult {
    pub params: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    pub history: Vec<HistoryRow>,
}

impl LbfgsResult {
    pub fn line_search_failed(&self) -> bool {
        self.termination == Termination::LineSearchFailure
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizer of the cubic matching values and slopes at two points, clamped
/// to `bounds`; the midpoint when the cubic has no real minimizer.
fn cubic_interpolate(
    (x1, f1, g1): (f64, f64, f64),
    (x2, f2, g2): (f64, f64, f64),
    bounds: Option<(f64, f64)>,
) -> f64 {
    let (lo, hi) = bounds.unwrap_or(if x1 <= x2 { (x1, x2) } else { (x2, x1) });
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 && d2_sq.is_finite() {
        let d2 = d2_sq.sqrt();
        let min_pos = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if min_pos.is_finite() {
            return min_pos.max(lo).min(hi);
        }
    }
    0.5 * (lo + hi)
}

#[derive(Clone, Debug)]
struct Probe {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

struct LineSearch {
    probe: Probe,
    evaluations: usize,
    wolfe: bool,
}

/// Bracketing and zoom with cubic interpolation until the strong Wolfe
/// conditions hold (or the evaluation budget runs out).
fn strong_wolfe<F>(
    objective: &mut F,
    x: &[f64],
    d: &[f64],
    start: &Probe,
    t0: f64,
    cfg: &LbfgsConfig,
) -> LineSearch
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (f0, gtd0) = (start.f, start.gtd);
    let d_norm = inf_norm(d);
    let mut trial = vec![0.0; x.len()];
    let mut evaluations = 0;
    let mut eval = |t: f64, evaluations: &mut usize| -> Probe {
        for i in 0..x.len() {
            trial[i] = x[i] + t * d[i];
        }
        *evaluations += 1;
        let (f, g) = objective(&trial);
        let gtd = dot(&g, d);
        Probe { t, f, g, gtd }
    };
    let armijo_fails = |p: &Probe| !p.f.is_finite() || p.f > f0 + cfg.wolfe_c1 * p.t * gtd0;
    let curvature_ok = |p: &Probe| p.gtd.abs() <= -cfg.wolfe_c2 * gtd0;

    let mut prev = start.clone();
    let mut cur = eval(t0, &mut evaluations);
    let mut bracket: [Probe; 2];
    let mut iters = 0;
    loop {
        if armijo_fails(&cur) || (iters > 1 && cur.f >= prev.f) {
            bracket = [prev, cur];
            break;
        }
        if curvature_ok(&cur) {
            return LineSearch {
                probe: cur,
                evaluations,
                wolfe: true,
            };
        }
        if cur.gtd >= 0.0 {
            bracket = [prev, cur];
            break;
        }
        if evaluations >= cfg.max_line_search {
            return LineSearch {
                probe: cur,
                evaluations,
                wolfe: false,
            };
        }
        let min_step = cur.t + 0.01 * (cur.t - prev.t);
        let max_step = cur.t * 10.0;
        let t = cubic_interpolate(
            (prev.t, prev.f, prev.gtd),
            (cur.t, cur.f, cur.gtd),
            Some((min_step, max_step)),
        );
        prev = cur;
        cur = eval(t, &mut evaluations);
        iters += 1;
    }

    let mut insufficient_progress = false;
    let (mut low, mut high) = if bracket[0].f <= bracket[1].f {
        (0, 1)
    } else {
        (1, 0)
    };
    while evaluations < cfg.max_line_search {
        let (a, b) = (bracket[0].t, bracket[1].t);
        if (b - a).abs() * d_norm < 1e-12 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        let (bmin, bmax) = (a.min(b), a.max(b));
        let mut t = if bracket.iter().all(|p| p.f.is_finite()) {
            cubic_interpolate(
                (bracket[0].t, bracket[0].f, bracket[0].gtd),
                (bracket[1].t, bracket[1].f, bracket[1].gtd),
                None,
            )
        } else {
            0.5 * (a + b)
        };
        let eps = 0.1 * (bmax - bmin);
        if (bmax - t).min(t - bmin) < eps {
            if insufficient_progress || t >= bmax || t <= bmin {
                t = if (t - bmax).abs() < (t - bmin).abs() {
                    bmax - eps
                } else {
                    bmin + eps
                };
                insufficient_progress = false;
            } else {
                insufficient_progress = true;
            }
        } else {
            insufficient_progress = false;
        }

        let p = eval(t, &mut evaluations);
        if armijo_fails(&p) || p.f >= bracket[low].f {
            bracket[high] = p;
        } else {
            if curvature_ok(&p) {
                return LineSearch {
                    probe: p,
                    evaluations,
                    wolfe: true,
                };
            }
            if p.gtd * (bracket[high].t - bracket[low].t) >= 0.0 {
                bracket[high] = bracket[low].clone();
            }
            bracket[low] = p;
        }
        (low, high) = if bracket[0].f <= bracket[1].f {
            (0, 1)
        } else {
            (1, 0)
        };
    }
    let [b0, b1] = bracket;
    LineSearch {
        probe: if low == 0 { b0 } else { b1 },
        evaluations,
        wolfe: false,
    }
}

/// Limited-memory BFGS with the two-loop recursion and a strong-Wolfe line
/// search starting from a unit step.
///
/// `objective` returns the value and gradient at a point; it must be
/// deterministic. A failed line search ends the run with
/// [`Termination::LineSearchFailure`] and the best iterate found so far.
pub fn lbfgs_minimize<F>(
    mut objective: F,
    params0: Vec<f64>,
    cfg: &LbfgsConfig,
) -> Result<LbfgsResult, OptimError>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = params0;
    let (mut f, mut g) = objective(&x);
    let mut evaluations = 1;
    if !f.is_finite() {
        return Err(OptimError::NonFiniteObjective);
    }
    if let Some(index) = g.iter().position(|v| !v.is_finite()) {
        return Err(OptimError::NonFiniteGradient { index });
    }

    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    let mut d = vec![0.0; x.len()];
    let mut alpha = vec![0.0; cfg.memory];

    if inf_norm(&g) <= cfg.grad_tol {
        termination = Termination::GradientTolerance;
    }
    while termination == Termination::MaxIterations && iterations < cfg.max_iters {
        // Two-loop recursion: d = -H·g.
        for (di, gi) in d.iter_mut().zip(&g) {
            *di = -gi;
        }
        for (k, (s, y, rho)) in memory.iter().enumerate().rev() {
            alpha[k] = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= alpha[k] * yi;
            }
        }
        if let Some((s, y, _)) = memory.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        for (k, (s, y, rho)) in memory.iter().enumerate() {
            let beta = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (alpha[k] - beta) * si;
            }
        }
        let mut gtd = dot(&g, &d);
        if gtd.is_nan() || gtd >= 0.0 {
            memory.clear();
            for (di, gi) in d.iter_mut().zip(&g) {
                *di = -gi;
            }
            gtd = dot(&g, &d);
        }

        let start = Probe {
            t: 0.0,
            f,
            g: g.clone(),
            gtd,
        };
        let ls = strong_wolfe(&mut objective, &x, &d, &start, 1.0, cfg);
        evaluations += ls.evaluations;
        let probe = ls.probe;
        let decreased = probe.t != 0.0 && probe.f.is_finite() && probe.f < f;
        if !decreased || !(ls.wolfe || probe.f <= f + cfg.wolfe_c1 * probe.t * gtd) {
            if !memory.is_empty() {
                memory.clear();
                continue;
            }
            termination = Termination::LineSearchFailure;
            break;
        }

        let s: Vec<f64> = d.iter().map(|di| probe.t * di).collect();
        for (xi, di) in x.iter_mut().zip(&d) {
            *xi += probe.t * di;
        }
        let y: Vec<f64> = probe.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm2(&s) * norm2(&y) {
            if memory.len() == cfg.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }

        iterations += 1;
        let f_old = f;
        f = probe.f;
        g = probe.g;
        let grad_norm = inf_norm(&g);
        history.push(HistoryRow {
            iter: iterations,
            loss: f,
            grad_norm,
            step: probe.t,
        });
        if grad_norm <= cfg.grad_tol {
            termination = Termination::GradientTolerance;
        } else if (f_old - f) / f_old.abs().max(f.abs()).max(1.0) <= cfg.f_rel_tol {
            termination = Termination::FunctionTolerance;
        }
    }

    Ok(LbfgsResult {
        params: x,
        value: f,
        grad: g,
        iterations,
        evaluations,
        termination,
        history,
    })
}
