//! Experiment runner: configuration, training schedule, evaluation,
//! checkpoints and plot-ready exports.
//!
//! A run writes into `<output_dir>/seed-<seed>/`:
//!
//! | file            | content                                         |
//! |-----------------|-------------------------------------------------|
//! | `config.echo`   | the full [`ExperimentConfig`] as TOML           |
//! | `summary.json`  | the [`RunSummary`]                              |
//! | `checkpoint.txt`| the trained parameters, see [`Checkpoint`]      |
//! | `grid.csv`      | `t,x,u_pred,u_exact,abs_error` on the eval grid |
//! | `history.csv`   | L-BFGS history `iter,loss,grad_norm,step`       |
//! | `adam.csv`      | Adam history in the same layout (inverse mode)  |
//! | `points.csv`    | the sampled training points                     |

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformable::{ConformableError, DomainSpec};
use crate::losses::{
    Engine, ForwardProblem, InverseProblem, LossBreakdown, LossError, LossWeights,
};
use crate::metrics::{self, ErrorReport, MetricError};
use crate::net::{eval_values, init_params, Architecture, InputScaling, NetError};
use crate::optim::{
    lbfgs_minimize, write_history, AdamState, HistoryRow, LbfgsConfig, OptimError, Termination,
};
use crate::sampling::{
    add_noise, sample_collocation, sample_ic_bc, sample_interior_data, write_point_sets, PointSet,
};

pub const SCHEMA_VERSION: u32 = 1;

/// L-BFGS iteration cap used by the table sweeps unless overridden.
pub const SWEEP_LBFGS_MAX_ITERS: usize = 10_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Conformable(#[from] ConformableError),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Forward,
    ForwardWeighted,
    Inverse,
}

impl Mode {
    pub fn is_forward(self) -> bool {
        self != Mode::Inverse
    }
}

/// Uniform `n_t × n_x` evaluation grid including the domain corners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_t: usize,
    pub n_x: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { n_t: 256, n_x: 100 }
    }
}

impl GridSpec {
    /// Points in t-major order.
    pub fn points(&self, domain: &DomainSpec) -> Vec<(f64, f64)> {
        let axis = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
            if n == 1 {
                return vec![lo];
            }
            (0..n)
                .map(|k| {
                    if k == n - 1 {
                        hi
                    } else {
                        lo + (hi - lo) * k as f64 / (n - 1) as f64
                    }
                })
                .collect()
        };
        let xs = axis(domain.x_lo, domain.x_hi, self.n_x);
        axis(domain.t_lo, domain.t_hi, self.n_t)
            .into_iter()
            .flat_map(|t| xs.iter().map(move |&x| (t, x)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimSettings {
    pub adam_steps: usize,
    pub adam_lr: f64,
    pub lbfgs: LbfgsConfig,
}

impl OptimSettings {
    /// L-BFGS only for forward problems; 5000 Adam steps first for inverse ones.
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            adam_steps: if mode == Mode::Inverse { 5000 } else { 0 },
            adam_lr: 1e-3,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub domain: DomainSpec,
    pub hidden_layers: usize,
    pub width: usize,
    #[serde(default)]
    pub input_scaling: bool,
    pub n_ic: usize,
    pub n_bc: usize,
    pub n_f: usize,
    /// Interior measurements; inverse mode only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_data: Option<usize>,
    /// Forward modes only; falls back to the mode's default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<LossWeights>,
    #[serde(default)]
    pub noise_level: f64,
    /// Starting value of the trainable λ in inverse mode.
    #[serde(default)]
    pub lambda_init: f64,
    pub optim: OptimSettings,
    #[serde(default)]
    pub engine: Engine,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub grid: GridSpec,
}

impl ExperimentConfig {
    /// Forward problem with `N_u = 100` split evenly, `N_f = 10000` and the
    /// default network.
    pub fn forward(alpha: f64) -> Self {
        Self {
            mode: Mode::Forward,
            domain: DomainSpec::standard(alpha),
            hidden_layers: 8,
            width: 20,
            input_scaling: false,
            n_ic: 50,
            n_bc: 50,
            n_f: 10_000,
            n_data: None,
            weights: None,
            noise_level: 0.0,
            lambda_init: 0.0,
            optim: OptimSettings::for_mode(Mode::Forward),
            engine: Engine::Batched,
            seed: 0,
            output_dir: None,
            grid: GridSpec::default(),
        }
    }

    /// Forward problem with the `(w_u, w_f) = (1, 0.1)` loss.
    pub fn forward_weighted(alpha: f64) -> Self {
        Self {
            mode: Mode::ForwardWeighted,
            ..Self::forward(alpha)
        }
    }

    /// Inverse problem from `N_data = 2000` interior measurements.
    pub fn inverse(alpha: f64) -> Self {
        Self {
            mode: Mode::Inverse,
            n_ic: 0,
            n_bc: 0,
            n_f: 0,
            n_data: Some(2000),
            optim: OptimSettings::for_mode(Mode::Inverse),
            ..Self::forward(alpha)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        self.domain.validate()?;
        self.architecture()?;
        if self.grid.n_t == 0 || self.grid.n_x == 0 {
            return bad("evaluation grid must be non-empty");
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad("noise level must be a non-negative number");
        }
        let lb = &self.optim.lbfgs;
        if lb.memory == 0 || !(0.0 < lb.wolfe_c1 && lb.wolfe_c1 < lb.wolfe_c2 && lb.wolfe_c2 < 1.0)
        {
            return bad("L-BFGS needs memory ≥ 1 and 0 < c1 < c2 < 1");
        }
        if self.optim.adam_lr.is_nan() || self.optim.adam_lr <= 0.0 {
            return bad("Adam learning rate must be positive");
        }
        match self.mode {
            Mode::Inverse => {
                if self.weights.is_some() {
                    return bad("loss weights apply to forward modes only");
                }
                if !matches!(self.n_data, Some(n) if n >= 1) {
                    return bad("inverse mode needs n_data ≥ 1");
                }
                if !self.lambda_init.is_finite() {
                    return bad("lambda_init must be finite");
                }
            }
            _ => {
                if self.n_data.is_some() {
                    return bad("n_data applies to inverse mode only");
                }
                if self.noise_level != 0.0 {
                    return bad("noise applies to inverse mode only");
                }
                if self.n_ic + self.n_bc == 0 {
                    return bad("forward modes need initial or boundary data");
                }
                if let Some(w) = self.weights {
                    LossWeights::new(w.w_u, w.w_f)?;
                }
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture, HarnessError> {
        let arch = Architecture::mlp(self.hidden_layers, self.width)?;
        let d = &self.domain;
        Ok(
            arch.with_input_scaling(self.input_scaling.then_some(InputScaling {
                t_lo: d.t_lo,
                t_hi: d.t_hi,
                x_lo: d.x_lo,
                x_hi: d.x_hi,
            })),
        )
    }

    /// Weights actually used by the forward loss.
    pub fn effective_weights(&self) -> LossWeights {
        match (self.mode, self.weights) {
            (_, Some(w)) => w,
            (Mode::ForwardWeighted, None) => LossWeights::near_integer(),
            _ => LossWeights::default(),
        }
    }

    /// Directory this run writes into, if any.
    pub fn run_dir(&self) -> Option<PathBuf> {
        self.output_dir
            .as_ref()
            .map(|d| d.join(format!("seed-{}", self.seed)))
    }
}

/// Independent seeds for each random stream of a run.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_INIT: u64 = 1;
const STREAM_IC_BC: u64 = 2;
const STREAM_COLLOCATION: u64 = 3;
const STREAM_DATA: u64 = 4;
const STREAM_NOISE: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub loss: LossBreakdown,
    pub errors: ErrorReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_hat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_error_percent: Option<f64>,
    pub adam_steps: usize,
    pub lbfgs_iterations: usize,
    pub lbfgs_evaluations: usize,
    pub lbfgs_max_iters: usize,
    pub termination: Termination,
    pub line_search_failure: bool,
    pub wall_seconds: f64,
}

impl RunSummary {
    pub fn to_json(&self) -> Result<String, HarnessError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let s: Self = serde_json::from_str(text)?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::SchemaVersionMismatch {
                found: s.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        Ok(s)
    }

    /// Copy with the wall-clock time zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_seconds: 0.0,
            ..self.clone()
        }
    }
}

/// Trained parameters with the metadata needed to rebuild the network.
///
/// Text layout, one item per line:
///
/// ```text
/// cfpinn-checkpoint <schema version>
/// widths <w0> <w1> ...
/// input-scaling none | <t_lo> <t_hi> <x_lo> <x_hi>
/// alpha <α>
/// lambda <λ> constant|learned
/// params <count>
/// <one parameter per line>
/// ```
///
/// Reals are written with 17 significant digits, which round-trips every
/// `f64` exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub alpha: f64,
    pub lambda: f64,
    pub lambda_learned: bool,
    pub params: Vec<f64>,
}

const CHECKPOINT_MAGIC: &str = "cfpinn-checkpoint";

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let widths: Vec<String> = self.arch.widths().iter().map(|w| w.to_string()).collect();
        let scaling = match self.arch.input_scaling() {
            None => "none".to_string(),
            Some(sc) => [sc.t_lo, sc.t_hi, sc.x_lo, sc.x_hi].map(real).join(" "),
        };
        let kind = if self.lambda_learned {
            "learned"
        } else {
            "constant"
        };
        writeln!(s, "{CHECKPOINT_MAGIC} {SCHEMA_VERSION}").unwrap();
        writeln!(s, "widths {}", widths.join(" ")).unwrap();
        writeln!(s, "input-scaling {scaling}").unwrap();
        writeln!(s, "alpha {}", real(self.alpha)).unwrap();
        writeln!(s, "lambda {} {kind}", real(self.lambda)).unwrap();
        writeln!(s, "params {}", self.params.len()).unwrap();
        for p in &self.params {
            writeln!(s, "{}", real(*p)).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, HarnessError> {
        let corrupt = |m: &str| HarnessError::CorruptFile(m.to_string());
        let mut lines = text.lines();
        let mut field = |key: &str| -> Result<Vec<String>, HarnessError> {
            let line = lines
                .next()
                .ok_or_else(|| corrupt(&format!("missing `{key}` line")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(corrupt(&format!("expected `{key}` line, got `{line}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let num = |s: &str| -> Result<f64, HarnessError> {
            s.parse().map_err(|_| corrupt(&format!("bad number `{s}`")))
        };

        let version = field(CHECKPOINT_MAGIC)?;
        let found: u32 = version
            .first()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt("bad version"))?;
        if found != SCHEMA_VERSION {
            return Err(HarnessError::SchemaVersionMismatch {
                found,
                expected: SCHEMA_VERSION,
            });
        }
        let widths = field("widths")?
            .iter()
            .map(|w| w.parse::<usize>().map_err(|_| corrupt("bad width")))
            .collect::<Result<Vec<_>, _>>()?;
        let scaling = field("input-scaling")?;
        let scaling = match scaling.as_slice() {
            [none] if none == "none" => None,
            [a, b, c, d] => Some(InputScaling {
                t_lo: num(a)?,
                t_hi: num(b)?,
                x_lo: num(c)?,
                x_hi: num(d)?,
            }),
            _ => return Err(corrupt("bad input-scaling line")),
        };
        let alpha = match field("alpha")?.as_slice() {
            [a] => num(a)?,
            _ => return Err(corrupt("bad alpha line")),
        };
        let (lambda, lambda_learned) = match field("lambda")?.as_slice() {
            [l, k] if k == "constant" || k == "learned" => (num(l)?, k == "learned"),
            _ => return Err(corrupt("bad lambda line")),
        };
        let count: usize = match field("params")?.as_slice() {
            [n] => n.parse().map_err(|_| corrupt("bad parameter count"))?,
            _ => return Err(corrupt("bad params line")),
        };
        let arch = Architecture::new(widths)
            .map_err(|e| corrupt(&e.to_string()))?
            .with_input_scaling(scaling);
        if arch.param_count() != count {
            return Err(corrupt(&format!(
                "widths imply {} parameters, header says {count}",
                arch.param_count()
            )));
        }
        let params = lines
            .by_ref()
            .take(count)
            .map(num)
            .collect::<Result<Vec<_>, _>>()?;
        if params.len() != count {
            return Err(corrupt(&format!(
                "expected {count} parameters, found {}",
                params.len()
            )));
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(corrupt("trailing content after parameters"));
        }
        Ok(Self {
            arch,
            alpha,
            lambda,
            lambda_learned,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn predict(&self, points: &[(f64, f64)]) -> Vec<f64> {
        eval_values(&self.arch, &self.params, points)
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), HarnessError> {
    checkpoint.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    Checkpoint::load(path)
}

/// Writes `t,x,u_pred,u_exact,abs_error` over `grid`, in t-major order,
/// after a comment line recording the resolution. `domain` supplies the
/// rectangle and the exact solution.
pub fn export_grid<W: Write>(
    checkpoint: &Checkpoint,
    domain: &DomainSpec,
    grid: GridSpec,
    mut w: W,
) -> Result<(), HarnessError> {
    let points = grid.points(domain);
    let pred = checkpoint.predict(&points);
    writeln!(w, "# resolution n_t={} n_x={}", grid.n_t, grid.n_x)?;
    writeln!(w, "t,x,u_pred,u_exact,abs_error")?;
    for (&(t, x), &u) in points.iter().zip(&pred) {
        let exact = domain.exact(t, x)?;
        writeln!(w, "{t:e},{x:e},{u:e},{exact:e},{:e}", (u - exact).abs())?;
    }
    Ok(())
}

/// Training points of a run, regenerated from its configuration.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainingSets {
    Forward {
        ic: PointSet,
        bc: PointSet,
        colloc: PointSet,
    },
    Inverse {
        data: PointSet,
    },
}

impl TrainingSets {
    pub fn sample(cfg: &ExperimentConfig) -> Self {
        let d = &cfg.domain;
        match cfg.mode {
            Mode::Inverse => {
                let clean = sample_interior_data(
                    d,
                    cfg.n_data.unwrap_or(0),
                    sub_seed(cfg.seed, STREAM_DATA),
                );
                let data = add_noise(&clean, cfg.noise_level, sub_seed(cfg.seed, STREAM_NOISE));
                Self::Inverse { data }
            }
            _ => {
                let (ic, bc) =
                    sample_ic_bc(d, cfg.n_ic, cfg.n_bc, sub_seed(cfg.seed, STREAM_IC_BC));
                let colloc = sample_collocation(d, cfg.n_f, sub_seed(cfg.seed, STREAM_COLLOCATION));
                Self::Forward { ic, bc, colloc }
            }
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> io::Result<()> {
        match self {
            Self::Forward { ic, bc, colloc } => write_point_sets(&[ic, bc, colloc], w),
            Self::Inverse { data } => write_point_sets(&[data], w),
        }
    }
}

enum Objective {
    Forward(ForwardProblem),
    Inverse(InverseProblem),
}

impl Objective {
    fn build(cfg: &ExperimentConfig, sets: TrainingSets) -> Result<Self, HarnessError> {
        let arch = cfg.architecture()?;
        Ok(match sets {
            TrainingSets::Forward { ic, bc, colloc } => Self::Forward(ForwardProblem::new(
                arch,
                cfg.domain,
                cfg.effective_weights(),
                ic,
                bc,
                colloc,
            )?),
            TrainingSets::Inverse { data } => {
                Self::Inverse(InverseProblem::new(arch, cfg.domain.alpha, data)?)
            }
        })
    }

    fn evaluate(
        &self,
        theta: &[f64],
        engine: Engine,
    ) -> Result<(LossBreakdown, Vec<f64>), LossError> {
        match self {
            Self::Forward(p) => p.evaluate(theta, engine),
            Self::Inverse(p) => p.evaluate(theta, engine),
        }
    }
}

/// Outcome of training before any file is written.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub summary: RunSummary,
    pub checkpoint: Checkpoint,
    pub sets: TrainingSets,
    pub adam_history: Vec<HistoryRow>,
    pub lbfgs_history: Vec<HistoryRow>,
}

impl TrainedRun {
    /// Writes every artifact into the run directory.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir)?;
        let cfg = &self.summary.config;
        fs::write(dir.join("config.echo"), cfg.to_toml()?)?;
        fs::write(dir.join("summary.json"), self.summary.to_json()?)?;
        self.checkpoint.save(&dir.join("checkpoint.txt"))?;
        let file = |name: &str| -> io::Result<BufWriter<fs::File>> {
            Ok(BufWriter::new(fs::File::create(dir.join(name))?))
        };
        let mut grid = file("grid.csv")?;
        export_grid(&self.checkpoint, &cfg.domain, cfg.grid, &mut grid)?;
        grid.flush()?;
        let mut hist = file("history.csv")?;
        write_history(&self.lbfgs_history, &mut hist)?;
        hist.flush()?;
        if !self.adam_history.is_empty() {
            let mut adam = file("adam.csv")?;
            write_history(&self.adam_history, &mut adam)?;
            adam.flush()?;
        }
        let mut pts = file("points.csv")?;
        self.sets.write_csv(&mut pts)?;
        pts.flush()?;
        Ok(())
    }
}

/// Samples, trains and evaluates one configuration without touching the
/// file system.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainedRun, HarnessError> {
    cfg.validate()?;
    let start = Instant::now();
    let arch = cfg.architecture()?;
    let sets = TrainingSets::sample(cfg);
    let objective = Objective::build(cfg, sets.clone())?;
    let engine = cfg.engine;

    let mut theta = init_params(&arch, sub_seed(cfg.seed, STREAM_INIT)).into_inner();
    if cfg.mode == Mode::Inverse {
        theta.push(cfg.lambda_init);
    }
    // Surfaces set-up errors (e.g. graph compilation) before training.
    objective.evaluate(&theta, engine)?;

    let mut adam = AdamState::new(theta.len(), cfg.optim.adam_lr);
    let mut adam_history = Vec::with_capacity(cfg.optim.adam_steps);
    for k in 0..cfg.optim.adam_steps {
        let (b, g) = objective.evaluate(&theta, engine)?;
        adam.step(&mut theta, &g)?;
        adam_history.push(HistoryRow {
            iter: k + 1,
            loss: b.total,
            grad_norm: g.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            step: cfg.optim.adam_lr,
        });
    }

    let lbfgs = lbfgs_minimize(
        |x| {
            let (b, g) = objective
                .evaluate(x, engine)
                .expect("objective validated before training");
            (b.total, g)
        },
        theta,
        &cfg.optim.lbfgs,
    )?;
    let theta = lbfgs.params.clone();
    let (loss, _) = objective.evaluate(&theta, engine)?;

    let np = arch.param_count();
    let (lambda, learned) = match cfg.mode {
        Mode::Inverse => (theta[np], true),
        _ => (cfg.domain.lambda, false),
    };
    let checkpoint = Checkpoint {
        arch,
        alpha: cfg.domain.alpha,
        lambda,
        lambda_learned: learned,
        params: theta[..np].to_vec(),
    };
    let errors = grid_errors(&checkpoint, &cfg.domain, cfg.grid)?;
    let (lambda_hat, lambda_error_percent) = if learned {
        (
            Some(lambda),
            Some(metrics::lambda_error(lambda, cfg.domain.lambda)?),
        )
    } else {
        (None, None)
    };
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        loss,
        errors,
        lambda_hat,
        lambda_error_percent,
        adam_steps: cfg.optim.adam_steps,
        lbfgs_iterations: lbfgs.iterations,
        lbfgs_evaluations: lbfgs.evaluations,
        lbfgs_max_iters: cfg.optim.lbfgs.max_iters,
        termination: lbfgs.termination,
        line_search_failure: lbfgs.line_search_failed(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(TrainedRun {
        summary,
        checkpoint,
        sets,
        adam_history,
        lbfgs_history: lbfgs.history,
    })
}

/// Error measures of a checkpoint against the exact solution on `grid`.
pub fn grid_errors(
    checkpoint: &Checkpoint,
    domain: &DomainSpec,
    grid: GridSpec,
) -> Result<ErrorReport, HarnessError> {
    let points = grid.points(domain);
    let pred = checkpoint.predict(&points);
    let exact = points
        .iter()
        .map(|&(t, x)| domain.exact(t, x))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(metrics::error_stats(&pred, &exact)?)
}

/// Recomputes the final loss and error report of a run from its checkpoint.
pub fn recompute_metrics(
    cfg: &ExperimentConfig,
    checkpoint: &Checkpoint,
) -> Result<(LossBreakdown, ErrorReport), HarnessError> {
    let objective = Objective::build(cfg, TrainingSets::sample(cfg))?;
    let mut theta = checkpoint.params.clone();
    if cfg.mode == Mode::Inverse {
        theta.push(checkpoint.lambda);
    }
    let (loss, _) = objective.evaluate(&theta, cfg.engine)?;
    Ok((loss, grid_errors(checkpoint, &cfg.domain, cfg.grid)?))
}

fn run(cfg: &ExperimentConfig) -> Result<RunSummary, HarnessError> {
    let trained = train(cfg)?;
    if let Some(dir) = cfg.run_dir() {
        trained.write(&dir)?;
    }
    Ok(trained.summary)
}

/// Trains a forward (or weighted forward) problem and writes its artifacts
/// when an output directory is configured.
pub fn run_forward(cfg: &ExperimentConfig) -> Result<RunSummary, HarnessError> {
    if !cfg.mode.is_forward() {
        return Err(HarnessError::InvalidConfig(
            "run_forward needs a forward mode".into(),
        ));
    }
    run(cfg)
}

/// Trains network and λ jointly from interior data.
pub fn run_inverse(cfg: &ExperimentConfig) -> Result<RunSummary, HarnessError> {
    if cfg.mode != Mode::Inverse {
        return Err(HarnessError::InvalidConfig(
            "run_inverse needs inverse mode".into(),
        ));
    }
    run(cfg)
}

/// Relative L2 error over a two-parameter sweep; `None` marks a failed cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub row_name: String,
    pub col_name: String,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub cells: Vec<Vec<Option<f64>>>,
    pub lbfgs_max_iters: usize,
}

impl SweepTable {
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = self.rows.iter().position(|&r| r == row)?;
        let j = self.cols.iter().position(|&c| c == col)?;
        self.cells[i][j]
    }

    /// Rows of the table; the header names both axes as `row\col`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# relative_l2; lbfgs_max_iters={}", self.lbfgs_max_iters)?;
        let cols: Vec<String> = self.cols.iter().map(|c| c.to_string()).collect();
        writeln!(w, "{}\\{},{}", self.row_name, self.col_name, cols.join(","))?;
        for (r, row) in self.rows.iter().zip(&self.cells) {
            let cells: Vec<String> = row
                .iter()
                .map(|c| c.map(|v| format!("{v:e}")).unwrap_or_default())
                .collect();
            writeln!(w, "{r},{}", cells.join(","))?;
        }
        Ok(())
    }
}

fn sweep(
    base: &ExperimentConfig,
    (row_name, rows): (&str, &[usize]),
    (col_name, cols): (&str, &[usize]),
    mut cell: impl FnMut(&mut ExperimentConfig, usize, usize),
) -> Result<SweepTable, HarnessError> {
    if !base.mode.is_forward() {
        return Err(HarnessError::InvalidConfig(
            "sweeps need a forward-mode base".into(),
        ));
    }
    let mut cells = Vec::with_capacity(rows.len());
    for &r in rows {
        let mut line = Vec::with_capacity(cols.len());
        for &c in cols {
            let mut cfg = base.clone();
            cell(&mut cfg, r, c);
            cfg.output_dir = base
                .output_dir
                .as_ref()
                .map(|d| d.join(format!("{row_name}-{r}_{col_name}-{c}")));
            line.push(run(&cfg).ok().map(|s| s.errors.relative_l2));
        }
        cells.push(line);
    }
    let table = SweepTable {
        row_name: row_name.into(),
        col_name: col_name.into(),
        rows: rows.to_vec(),
        cols: cols.to_vec(),
        cells,
        lbfgs_max_iters: base.optim.lbfgs.max_iters,
    };
    if let Some(dir) = &base.output_dir {
        fs::create_dir_all(dir)?;
        let mut f = BufWriter::new(fs::File::create(
            dir.join(format!("sweep-seed-{}.csv", base.seed)),
        )?);
        table.write_csv(&mut f)?;
        f.flush()?;
    }
    Ok(table)
}

/// Error table over `N_u × N_f`, with `N_u` split evenly between initial
/// and boundary data.
pub fn sweep_data(
    base: &ExperimentConfig,
    n_u: &[usize],
    n_f: &[usize],
) -> Result<SweepTable, HarnessError> {
    sweep(base, ("n_u", n_u), ("n_f", n_f), |cfg, nu, nf| {
        cfg.n_ic = nu / 2;
        cfg.n_bc = nu - nu / 2;
        cfg.n_f = nf;
    })
}

/// Error table over hidden-layer count × width.
pub fn sweep_arch(
    base: &ExperimentConfig,
    layers: &[usize],
    neurons: &[usize],
) -> Result<SweepTable, HarnessError> {
    sweep(
        base,
        ("layers", layers),
        ("neurons", neurons),
        |cfg, l, n| {
            cfg.hidden_layers = l;
            cfg.width = n;
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::forward(0.5);
        cfg.hidden_layers = 1;
        cfg.width = 4;
        cfg.n_ic = 4;
        cfg.n_bc = 4;
        cfg.n_f = 16;
        cfg.optim.lbfgs.max_iters = 5;
        cfg.grid = GridSpec { n_t: 3, n_x: 4 };
        cfg
    }

    #[test]
    fn grid_is_t_major_and_spans_domain() {
        let d = DomainSpec::standard(0.5);
        let pts = GridSpec { n_t: 3, n_x: 2 }.points(&d);
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0], (0.01, -1.0));
        assert_eq!(pts[1], (0.01, 1.0));
        assert_eq!(pts[5], (1.0, 1.0));
        assert_eq!(GridSpec::default().points(&d).len(), 25_600);
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::forward(0.5).validate().is_ok());
        assert!(ExperimentConfig::inverse(0.5).validate().is_ok());
        let mut c = ExperimentConfig::forward(0.5);
        c.n_data = Some(10);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::inverse(0.5);
        c.weights = Some(LossWeights::default());
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::forward(0.5);
        c.noise_level = 0.01;
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::forward(1.3).validate().is_err());
    }

    #[test]
    fn effective_weights_follow_mode() {
        assert_eq!(
            ExperimentConfig::forward(0.8).effective_weights(),
            LossWeights::default()
        );
        assert_eq!(
            ExperimentConfig::forward_weighted(0.8).effective_weights(),
            LossWeights::near_integer()
        );
        let mut c = ExperimentConfig::forward_weighted(0.8);
        c.weights = Some(LossWeights { w_u: 2.0, w_f: 0.5 });
        assert_eq!(c.effective_weights().w_u, 2.0);
    }

    #[test]
    fn config_toml_round_trip() {
        for cfg in [
            ExperimentConfig::forward_weighted(0.8),
            ExperimentConfig::inverse(0.3),
        ] {
            let text = cfg.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn sub_seeds_differ_per_stream() {
        let s: Vec<u64> = (1..=5).map(|k| sub_seed(7, k)).collect();
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_eq!(sub_seed(7, 3), sub_seed(7, 3));
        assert_ne!(sub_seed(7, 3), sub_seed(8, 3));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let arch = Architecture::new(vec![2, 3, 1]).unwrap();
        let mut params = init_params(&arch, 3).into_inner();
        params[0] = 0.1 + 0.2;
        params[1] = f64::MIN_POSITIVE;
        params[2] = -1.0 / 3.0;
        let ck = Checkpoint {
            arch,
            alpha: 0.3,
            lambda: 0.5073,
            lambda_learned: true,
            params,
        };
        let text = ck.to_text();
        let back = Checkpoint::from_text(&text).unwrap();
        assert_eq!(back, ck);
        assert!(back
            .params
            .iter()
            .zip(&ck.params)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn checkpoint_rejects_bad_input() {
        let arch = Architecture::new(vec![2, 3, 1])
            .unwrap()
            .with_input_scaling(Some(InputScaling {
                t_lo: 0.01,
                t_hi: 1.0,
                x_lo: -1.0,
                x_hi: 1.0,
            }));
        let ck = Checkpoint {
            params: vec![0.5; arch.param_count()],
            arch,
            alpha: 0.5,
            lambda: 1.0,
            lambda_learned: false,
        };
        let text = ck.to_text();
        assert_eq!(Checkpoint::from_text(&text).unwrap(), ck);

        let truncated: String = text.lines().take(8).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            Checkpoint::from_text(&truncated),
            Err(HarnessError::CorruptFile(_))
        ));
        let wrong_widths = text.replace("widths 2 3 1", "widths 2 4 1");
        assert!(matches!(
            Checkpoint::from_text(&wrong_widths),
            Err(HarnessError::CorruptFile(_))
        ));
        let wrong_version = text.replace("cfpinn-checkpoint 1", "cfpinn-checkpoint 2");
        assert!(matches!(
            Checkpoint::from_text(&wrong_version),
            Err(HarnessError::SchemaVersionMismatch { found: 2, .. })
        ));
        assert!(matches!(
            Checkpoint::from_text(&format!("{text}0.1\n")),
            Err(HarnessError::CorruptFile(_))
        ));
        assert!(matches!(
            Checkpoint::from_text(""),
            Err(HarnessError::CorruptFile(_))
        ));
    }

    #[test]
    fn tiny_run_is_recomputable() {
        let cfg = tiny();
        let run = train(&cfg).unwrap();
        let (loss, errors) = recompute_metrics(&cfg, &run.checkpoint).unwrap();
        assert_eq!(loss, run.summary.loss);
        assert_eq!(errors, run.summary.errors);
        assert!(
            run.summary.loss.total
                < train(&ExperimentConfig {
                    optim: OptimSettings {
                        lbfgs: LbfgsConfig {
                            max_iters: 0,
                            ..cfg.optim.lbfgs
                        },
                        ..cfg.optim.clone()
                    },
                    ..cfg.clone()
                })
                .unwrap()
                .summary
                .loss
                .total
        );
    }

    #[test]
    fn summary_json_round_trip() {
        let mut cfg = ExperimentConfig::inverse(0.5);
        cfg.hidden_layers = 1;
        cfg.width = 3;
        cfg.n_data = Some(12);
        cfg.noise_level = 0.01;
        cfg.optim.adam_steps = 3;
        cfg.optim.lbfgs.max_iters = 2;
        cfg.grid = GridSpec { n_t: 2, n_x: 2 };
        let s = train(&cfg).unwrap().summary;
        assert!(s.lambda_hat.is_some() && s.lambda_error_percent.is_some());
        let back = RunSummary::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
        let bumped = s
            .to_json()
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(matches!(
            RunSummary::from_json(&bumped),
            Err(HarnessError::SchemaVersionMismatch { .. })
        ));
    }

    #[test]
    fn sweep_table_layout() {
        let t = SweepTable {
            row_name: "n_u".into(),
            col_name: "n_f".into(),
            rows: vec![20, 40],
            cols: vec![2000, 4000],
            cells: vec![vec![Some(0.5), None], vec![Some(0.25), Some(0.125)]],
            lbfgs_max_iters: 10,
        };
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[1], "n_u\\n_f,2000,4000");
        assert_eq!(lines[2], "20,5e-1,");
        assert_eq!(lines[3], "40,2.5e-1,1.25e-1");
        assert_eq!(t.get(40, 4000), Some(0.125));
        assert_eq!(t.get(20, 4000), None);
    }
}
