//! Command-line front end: environment generation, sequence sampling,
//! learning, evaluation, map export, and experiment sweeps.
//!
//! Exit codes: 0 success, 2 input error, 3 convergence not reached under
//! `--strict`, 4 partial experiment failure. Logs go to standard error;
//! data only to files (or stdout when no output path is given).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use odohmm::eval::{extract_essential_map, sampled_kl};
use odohmm::experiment::{read_plan, run_experiment};
use odohmm::init::{init_model_kmeans, init_model_random, init_model_tag_based, InitConfig};
use odohmm::io;
use odohmm::model::{ConstraintRegime, CoordinateRegime};
use odohmm::sim::{build_environment, halls44_spec, loop17_spec, sample_experience};
use odohmm::{learn, EmConfig, OdoHmmError};

const EXIT_INPUT: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;
const EXIT_PARTIAL_FAILURE: u8 = 4;

#[derive(Parser)]
#[command(name = "odohmm", version, about = "Learn odometry-augmented HMMs of topological environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Environment spec management
    Env {
        #[command(subcommand)]
        command: EnvCommand,
    },
    /// Simulation
    Sim {
        #[command(subcommand)]
        command: SimCommand,
    },
    /// Learn a model from an experience sequence
    Learn(LearnArgs),
    /// Model evaluation
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Essential-map export
    Map {
        #[command(subcommand)]
        command: MapCommand,
    },
    /// Experiment sweeps
    Exp {
        #[command(subcommand)]
        command: ExpCommand,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Global,
    Relative,
}

impl From<RegimeArg> for CoordinateRegime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Global => CoordinateRegime::Global,
            RegimeArg::Relative => CoordinateRegime::StateRelative,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ConstraintsArg {
    Antisym,
    Additive,
}

impl From<ConstraintsArg> for ConstraintRegime {
    fn from(c: ConstraintsArg) -> Self {
        match c {
            ConstraintsArg::Antisym => ConstraintRegime::AntiSymmetric,
            ConstraintsArg::Additive => ConstraintRegime::Additive,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Tag,
    Kmeans,
    Random,
}

#[derive(Subcommand)]
enum EnvCommand {
    /// Write a built-in environment spec (and optionally its built model)
    Build {
        /// Built-in environment: loop17 (17-state loop) or halls44
        /// (44-state loop with a dead-end spur)
        #[arg(long)]
        name: String,
        #[arg(long, value_enum, default_value = "global")]
        regime: RegimeArg,
        #[arg(long, value_enum, default_value = "antisym")]
        constraints: ConstraintsArg,
        /// Spec output path
        #[arg(short, long)]
        out: PathBuf,
        /// Also build the ground-truth model and write it here
        #[arg(long)]
        model_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum SimCommand {
    /// Sample an experience sequence from an environment spec
    Sample {
        /// Environment spec path
        #[arg(long)]
        spec: PathBuf,
        /// Sequence length T
        #[arg(short = 't', long)]
        length: usize,
        /// Seed for both model construction and sampling
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sequence output path
        #[arg(short, long)]
        out: PathBuf,
        /// Optional trajectory CSV output
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Optional built-model output
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct LearnArgs {
    /// Experience sequence path
    #[arg(long)]
    seq: PathBuf,
    /// Number of states N
    #[arg(short = 'n', long)]
    n_states: usize,
    #[arg(long, value_enum, default_value = "tag")]
    init: InitArg,
    #[arg(long, value_enum, default_value = "antisym")]
    constraints: ConstraintsArg,
    /// Per-component alphabet sizes (defaults to 4 4 4)
    #[arg(long, num_args = 1.., default_values_t = vec![4usize, 4, 4])]
    obs_dims: Vec<usize>,
    /// Disable odometry: plain Baum-Welch, relation matrix untouched
    #[arg(long)]
    no_odometry: bool,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exit 3 if EM stops on the iteration cap instead of converging
    #[arg(long)]
    strict: bool,
    /// Learned model output path
    #[arg(short, long)]
    out: PathBuf,
    /// Optional per-iteration trace CSV
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Tag/k-means bucket sigmas: x y theta(radians)
    #[arg(long, num_args = 3)]
    bucket_sigma: Option<Vec<f64>>,
    /// Tagging new-state threshold in bucket-sigma units
    #[arg(long)]
    new_state_threshold: Option<f64>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Sampled KL divergence of a learned model against the truth
    Kl {
        #[arg(long)]
        true_model: PathBuf,
        #[arg(long)]
        learned: PathBuf,
        #[arg(short, long, default_value_t = 5)]
        k: usize,
        #[arg(short = 't', long, default_value_t = 1000)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report CSV output path (stdout when omitted)
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum MapCommand {
    /// Export a model's essential map as DOT and/or SVG
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dot: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Minimum probability for dashed (secondary) edges
        #[arg(long, default_value_t = 0.2)]
        dash_threshold: f64,
    },
}

#[derive(Subcommand)]
enum ExpCommand {
    /// Run an experiment plan file
    Run {
        #[arg(long)]
        plan: PathBuf,
    },
}

fn builtin_spec(
    name: &str,
    regime: CoordinateRegime,
    constraints: ConstraintRegime,
) -> Result<odohmm::sim::EnvironmentSpec, OdoHmmError> {
    match name {
        "loop17" => Ok(loop17_spec(regime, constraints)),
        "halls44" => Ok(halls44_spec(regime, constraints)),
        other => Err(OdoHmmError::Input(format!(
            "unknown environment '{other}' (expected loop17 or halls44)"
        ))),
    }
}

fn run(cli: Cli) -> Result<u8, OdoHmmError> {
    match cli.command {
        Command::Env { command: EnvCommand::Build { name, regime, constraints, out, model_out, seed } } => {
            let spec = builtin_spec(&name, regime.into(), constraints.into())?;
            io::write_spec(&spec, &out)?;
            log::info!("wrote spec for {} ({} states) to {}", spec.name, spec.states.len(), out.display());
            if let Some(path) = model_out {
                let model = build_environment(&spec, seed)?;
                io::write_model(&model, &path)?;
                log::info!("wrote ground-truth model to {}", path.display());
            }
            Ok(0)
        }
        Command::Sim { command: SimCommand::Sample { spec, length, seed, out, trajectory, model_out } } => {
            let spec = io::read_spec(&spec)?;
            let model = build_environment(&spec, seed)?;
            let (e, dump) = sample_experience(&model, length, seed)?;
            io::write_sequence(&e, &out)?;
            log::info!("wrote {length}-step sequence to {}", out.display());
            if let Some(path) = trajectory {
                std::fs::write(&path, dump.to_csv())?;
            }
            if let Some(path) = model_out {
                io::write_model(&model, &path)?;
            }
            Ok(0)
        }
        Command::Learn(args) => {
            let e = io::read_sequence(&args.seq)?;
            let constraints: ConstraintRegime = args.constraints.into();
            let mut init_config = InitConfig { seed: args.seed, ..InitConfig::default() };
            if let Some(s) = &args.bucket_sigma {
                init_config.bucket_sigma = (s[0], s[1], s[2]);
            }
            if let Some(t) = args.new_state_threshold {
                init_config.new_state_threshold = t;
            }
            let model0 = match args.init {
                InitArg::Tag => {
                    init_model_tag_based(&e, args.n_states, constraints, &args.obs_dims, &init_config)?
                }
                InitArg::Kmeans => {
                    init_model_kmeans(&e, args.n_states, constraints, &args.obs_dims, &init_config)?
                }
                InitArg::Random => init_model_random(
                    args.n_states,
                    &args.obs_dims,
                    &e,
                    e.coordinate_regime,
                    constraints,
                    &init_config,
                )?,
            };
            let mut config = EmConfig::new(constraints, e.coordinate_regime);
            config.epsilon = args.epsilon;
            config.max_iters = args.max_iters;
            config.seed = args.seed;
            config.use_odometry = !args.no_odometry;
            let outcome = learn(&model0, &e, &config)?;
            io::write_model(&outcome.model, &args.out)?;
            if let Some(path) = &args.trace {
                std::fs::write(path, outcome.trace.to_csv())?;
            }
            log::info!(
                "learning finished after {} iterations (converged: {})",
                outcome.iterations,
                outcome.converged
            );
            if args.strict && !outcome.converged {
                log::error!("EM stopped on the iteration cap without converging");
                return Ok(EXIT_NOT_CONVERGED);
            }
            Ok(0)
        }
        Command::Eval { command: EvalCommand::Kl { true_model, learned, k, t, seed, out } } => {
            let truth = io::read_model(&true_model)?;
            let candidate = io::read_model(&learned)?;
            let report = sampled_kl(&truth, &candidate, k, t, seed)?;
            let csv = format!(
                "{}\n{}\n",
                odohmm::eval::KlReport::csv_header(),
                report.to_csv_row()
            );
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            log::info!("D = {:.6} nats/obs ({:.6} bits/obs)", report.d_nats, report.d_bits);
            Ok(0)
        }
        Command::Map { command: MapCommand::Export { model, dot, svg, dash_threshold } } => {
            let model = io::read_model(&model)?;
            let map = extract_essential_map(&model, dash_threshold);
            if dot.is_none() && svg.is_none() {
                return Err(OdoHmmError::Input("pass --dot and/or --svg".into()));
            }
            if let Some(path) = dot {
                std::fs::write(path, map.to_dot())?;
            }
            if let Some(path) = svg {
                std::fs::write(path, map.to_svg())?;
            }
            Ok(0)
        }
        Command::Exp { command: ExpCommand::Run { plan } } => {
            let plan = read_plan(&plan)?;
            let results = run_experiment(&plan)?;
            log::info!(
                "{} runs over {} cells, {} failures; results in {}",
                results.runs.len(),
                results.cells.len(),
                results.failures,
                plan.output_dir.display()
            );
            for row in &results.t_tests {
                log::info!(
                    "T={} init={} {}: t = {:.3}, p = {:.3e}",
                    row.t_len,
                    row.initializer.name(),
                    row.quantity,
                    row.t_statistic,
                    row.p_value
                );
            }
            if results.failures > 0 {
                return Ok(EXIT_PARTIAL_FAILURE);
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            log::error!("{err}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}
