use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use cfpinn::conformable::{analytic_solution, DomainSpec, DEFAULT_LAMBDA};
use cfpinn::harness::{
    self, Checkpoint, ExperimentConfig, GridSpec, RunSummary, SweepTable, SWEEP_LBFGS_MAX_ITERS,
};
use cfpinn::losses::{Engine, LossWeights};

#[derive(Parser)]
#[command(
    name = "cfpinn",
    version,
    about = "PINN solver for the conformable time-fractional diffusion equation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the forward problem from initial and boundary data.
    Forward(RunArgs),
    /// Identify λ from interior measurements.
    Inverse(RunArgs),
    /// Relative L2 error over N_u × N_f.
    SweepData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "20,40,60,80,100,200")]
        n_u_values: Vec<usize>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "2000,4000,6000,8000,10000"
        )]
        n_f_values: Vec<usize>,
    },
    /// Relative L2 error over hidden layers × neurons per layer.
    SweepArch {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8")]
        layer_values: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "10,20,40")]
        width_values: Vec<usize>,
    },
    /// Evaluate a checkpoint on a grid against the exact solution.
    ExportGrid {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Coefficient of the exact solution; defaults to the checkpoint's
        /// constant λ, or the reference value for learned λ.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 256)]
        n_t: usize,
        #[arg(long, default_value_t = 100)]
        n_x: usize,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print exact solution values `t,x,u` on the product of the given points.
    EvalOracle {
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(
            long,
            value_delimiter = ',',
            required = true,
            allow_hyphen_values = true
        )]
        t: Vec<f64>,
        #[arg(
            long,
            value_delimiter = ',',
            required = true,
            allow_hyphen_values = true
        )]
        x: Vec<f64>,
    },
}

/// Settings shared by every training command. Each may also come from the
/// `--config` file, whose keys are the flag names; flags win.
#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
struct RunArgs {
    /// TOML file supplying any of these options.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    n_ic: Option<usize>,
    #[arg(long)]
    n_bc: Option<usize>,
    #[arg(long)]
    n_f: Option<usize>,
    #[arg(long)]
    n_data: Option<usize>,
    /// Hidden layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Neurons per hidden layer.
    #[arg(long)]
    width: Option<usize>,
    /// Loss weights `w_u,w_f`; implies the weighted forward mode.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// Use the `(1, 0.1)` weighted forward loss.
    #[arg(long)]
    weighted: Option<bool>,
    /// Gaussian noise level relative to the data's standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    lambda_init: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; each run writes into `<out>/seed-<seed>/`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    adam_steps: Option<usize>,
    #[arg(long)]
    adam_lr: Option<f64>,
    #[arg(long)]
    lbfgs_max_iters: Option<usize>,
    #[arg(long)]
    lbfgs_memory: Option<usize>,
    /// `batched` or `graph`.
    #[arg(long, value_parser = parse_engine)]
    #[serde(default, deserialize_with = "engine_from_str")]
    engine: Option<Engine>,
    /// Map inputs onto [-1, 1]² before the first layer.
    #[arg(long)]
    input_scaling: Option<bool>,
    #[arg(long)]
    grid_t: Option<usize>,
    #[arg(long)]
    grid_x: Option<usize>,
}

fn parse_engine(s: &str) -> Result<Engine, String> {
    match s {
        "batched" => Ok(Engine::Batched),
        "graph" => Ok(Engine::Graph),
        _ => Err(format!("unknown engine `{s}` (expected batched or graph)")),
    }
}

fn engine_from_str<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<Engine>, D::Error> {
    let s = String::deserialize(d)?;
    parse_engine(&s).map(Some).map_err(serde::de::Error::custom)
}

macro_rules! overlay {
    ($dst:ident, $src:ident: $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl RunArgs {
    /// Flags layered over the config file.
    fn merged(&self) -> Result<RunArgs> {
        let mut base = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                toml::from_str::<RunArgs>(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunArgs::default(),
        };
        overlay!(base, self: alpha, lambda, n_ic, n_bc, n_f, n_data, layers, width, weights, weighted, noise,
            lambda_init, seed, out, adam_steps, adam_lr, lbfgs_max_iters, lbfgs_memory, engine, input_scaling,
            grid_t, grid_x);
        Ok(base)
    }

    fn experiment(
        &self,
        inverse: bool,
        default_lbfgs_cap: Option<usize>,
    ) -> Result<ExperimentConfig> {
        let a = self.merged()?;
        let alpha = a.alpha.unwrap_or(0.5);
        let mut cfg = if inverse {
            if a.weights.is_some() || a.weighted.is_some() {
                bail!("loss weights apply to the forward problem only");
            }
            let mut c = ExperimentConfig::inverse(alpha);
            if a.n_ic.is_some() || a.n_bc.is_some() || a.n_f.is_some() {
                bail!("--n-ic, --n-bc and --n-f apply to the forward problem only; use --n-data");
            }
            c.n_data = Some(a.n_data.unwrap_or(2000));
            c.noise_level = a.noise.unwrap_or(0.0);
            c.lambda_init = a.lambda_init.unwrap_or(0.0);
            c
        } else {
            if a.n_data.is_some() || a.noise.is_some() || a.lambda_init.is_some() {
                bail!("--n-data, --noise and --lambda-init apply to the inverse problem only");
            }
            let weighted = a.weighted.unwrap_or(false) || a.weights.is_some();
            let mut c = if weighted {
                ExperimentConfig::forward_weighted(alpha)
            } else {
                ExperimentConfig::forward(alpha)
            };
            if let Some(w) = &a.weights {
                let [w_u, w_f] = w[..] else {
                    bail!("--weights takes exactly two values")
                };
                c.weights = Some(LossWeights::new(w_u, w_f)?);
            }
            c.n_ic = a.n_ic.unwrap_or(c.n_ic);
            c.n_bc = a.n_bc.unwrap_or(c.n_bc);
            c.n_f = a.n_f.unwrap_or(c.n_f);
            c
        };
        cfg.domain.lambda = a.lambda.unwrap_or(DEFAULT_LAMBDA);
        cfg.hidden_layers = a.layers.unwrap_or(cfg.hidden_layers);
        cfg.width = a.width.unwrap_or(cfg.width);
        cfg.input_scaling = a.input_scaling.unwrap_or(false);
        cfg.seed = a.seed.unwrap_or(0);
        cfg.output_dir = Some(a.out.clone().unwrap_or_else(|| PathBuf::from("runs")));
        cfg.optim.adam_steps = a.adam_steps.unwrap_or(cfg.optim.adam_steps);
        cfg.optim.adam_lr = a.adam_lr.unwrap_or(cfg.optim.adam_lr);
        cfg.optim.lbfgs.max_iters = a
            .lbfgs_max_iters
            .or(default_lbfgs_cap)
            .unwrap_or(cfg.optim.lbfgs.max_iters);
        cfg.optim.lbfgs.memory = a.lbfgs_memory.unwrap_or(cfg.optim.lbfgs.memory);
        cfg.engine = a.engine.unwrap_or_default();
        cfg.grid = GridSpec {
            n_t: a.grid_t.unwrap_or(cfg.grid.n_t),
            n_x: a.grid_x.unwrap_or(cfg.grid.n_x),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report(summary: &RunSummary) -> Result<()> {
    if summary.line_search_failure {
        eprintln!(
            "warning: L-BFGS stopped on a failed line search; results are from the best iterate"
        );
    }
    if let Some(dir) = summary.config.run_dir() {
        eprintln!("artifacts written to {}", dir.display());
    }
    println!("{}", summary.to_json()?);
    Ok(())
}

fn report_table(table: &SweepTable) -> Result<()> {
    let stdout = io::stdout();
    table.write_csv(stdout.lock())?;
    Ok(())
}

fn export(
    checkpoint: &Path,
    lambda: Option<f64>,
    grid: GridSpec,
    out: Option<&Path>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut domain = DomainSpec::standard(ck.alpha);
    domain.lambda = lambda.unwrap_or(if ck.lambda_learned {
        DEFAULT_LAMBDA
    } else {
        ck.lambda
    });
    match out {
        Some(path) => {
            let mut w = BufWriter::new(fs::File::create(path)?);
            harness::export_grid(&ck, &domain, grid, &mut w)?;
            w.flush()?;
        }
        None => harness::export_grid(&ck, &domain, grid, io::stdout().lock())?,
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Forward(args) => report(&harness::run_forward(&args.experiment(false, None)?)?),
        Command::Inverse(args) => report(&harness::run_inverse(&args.experiment(true, None)?)?),
        Command::SweepData {
            run,
            n_u_values,
            n_f_values,
        } => {
            let base = run.experiment(false, Some(SWEEP_LBFGS_MAX_ITERS))?;
            report_table(&harness::sweep_data(&base, &n_u_values, &n_f_values)?)
        }
        Command::SweepArch {
            run,
            layer_values,
            width_values,
        } => {
            let base = run.experiment(false, Some(SWEEP_LBFGS_MAX_ITERS))?;
            report_table(&harness::sweep_arch(&base, &layer_values, &width_values)?)
        }
        Command::ExportGrid {
            checkpoint,
            lambda,
            n_t,
            n_x,
            out,
        } => export(&checkpoint, lambda, GridSpec { n_t, n_x }, out.as_deref()),
        Command::EvalOracle {
            alpha,
            lambda,
            t,
            x,
        } => {
            let mut out = io::stdout().lock();
            writeln!(out, "t,x,u")?;
            for &tv in &t {
                for &xv in &x {
                    writeln!(
                        out,
                        "{tv:e},{xv:e},{:e}",
                        analytic_solution(alpha, lambda, tv, xv)?
                    )?;
                }
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cfpinn::harness::Mode;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("cfpinn").chain(args.iter().copied()))
            .unwrap()
            .command
    }

    fn run_args(cmd: Command) -> RunArgs {
        match cmd {
            Command::Forward(a) | Command::Inverse(a) => a,
            Command::SweepData { run, .. } | Command::SweepArch { run, .. } => run,
            _ => panic!("not a training command"),
        }
    }

    #[test]
    fn flags_build_forward_config() {
        let a = run_args(parse(&[
            "forward",
            "--alpha",
            "0.8",
            "--weights",
            "1,0.1",
            "--n-f",
            "500",
            "--seed",
            "3",
        ]));
        let cfg = a.experiment(false, None).unwrap();
        assert_eq!(cfg.mode, Mode::ForwardWeighted);
        assert_eq!(cfg.effective_weights(), LossWeights { w_u: 1.0, w_f: 0.1 });
        assert_eq!((cfg.n_f, cfg.seed, cfg.domain.alpha), (500, 3, 0.8));
        assert_eq!(cfg.optim.adam_steps, 0);
    }

    #[test]
    fn inverse_rejects_forward_only_flags() {
        let a = run_args(parse(&["inverse", "--n-f", "10"]));
        assert!(a.experiment(true, None).is_err());
        let a = run_args(parse(&["inverse", "--noise", "0.01", "--n-data", "50"]));
        let cfg = a.experiment(true, None).unwrap();
        assert_eq!(
            (cfg.n_data, cfg.noise_level, cfg.optim.adam_steps),
            (Some(50), 0.01, 5000)
        );
    }

    #[test]
    fn config_file_is_overridden_by_flags() {
        let dir = std::env::temp_dir().join(format!("cfpinn-cli-test-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.toml");
        fs::write(
            &path,
            "alpha = 0.3\nseed = 9\nn-f = 123\nengine = \"graph\"\nlbfgs-max-iters = 7\n",
        )
        .unwrap();
        let p = path.to_str().unwrap();
        let cfg = run_args(parse(&["forward", "--config", p, "--seed", "4"]))
            .experiment(false, None)
            .unwrap();
        assert_eq!((cfg.domain.alpha, cfg.seed, cfg.n_f), (0.3, 4, 123));
        assert_eq!(cfg.engine, Engine::Graph);
        assert_eq!(cfg.optim.lbfgs.max_iters, 7);
        fs::write(&path, "bogus = 1\n").unwrap();
        assert!(run_args(parse(&["forward", "--config", p]))
            .experiment(false, None)
            .is_err());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn sweeps_default_to_reduced_cap() {
        let a = run_args(parse(&["sweep-data"]));
        assert_eq!(
            a.experiment(false, Some(SWEEP_LBFGS_MAX_ITERS))
                .unwrap()
                .optim
                .lbfgs
                .max_iters,
            10_000
        );
        let a = run_args(parse(&["sweep-arch", "--lbfgs-max-iters", "50"]));
        assert_eq!(
            a.experiment(false, Some(SWEEP_LBFGS_MAX_ITERS))
                .unwrap()
                .optim
                .lbfgs
                .max_iters,
            50
        );
        match parse(&["sweep-arch"]) {
            Command::SweepArch {
                layer_values,
                width_values,
                ..
            } => {
                assert_eq!(layer_values, [2, 4, 6, 8]);
                assert_eq!(width_values, [10, 20, 40]);
            }
            _ => unreachable!(),
        }
    }
}
