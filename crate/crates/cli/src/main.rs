use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lightcone::stfield::Boundary;
use lightcone_cli::bench;
use lightcone_cli::commands::{self, FieldInput};
use lightcone_cli::config::{InitialKind, RunConfig};
use lightcone_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "lightcone", version, about = "Predictive-state reconstruction for spatio-temporal fields")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; must exist.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the conditional-Gaussian test automaton.
    Simulate(SimulateArgs),
    /// Fit a model to a field.
    Fit(FitArgs),
    /// One-step forecasts of a field from a fitted model.
    Predict(PredictArgs),
    /// Simulate a new realization from a fitted model.
    Generate(GenerateArgs),
    /// Compare mixed and hard estimation over simulated replicates.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    sites: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long, value_enum)]
    initial: Option<InitialKind>,
    /// Start the patches with a negative block.
    #[arg(long)]
    first_negative: bool,
}

#[derive(Args)]
struct ConeArgs {
    #[arg(long)]
    hp: Option<usize>,
    #[arg(long)]
    hf: Option<usize>,
    #[arg(long)]
    speed: Option<usize>,
    #[arg(long, value_parser = parse_boundary)]
    boundary: Option<Boundary>,
}

#[derive(Args)]
struct FitFlags {
    #[command(flatten)]
    cone: ConeArgs,
    #[arg(long)]
    kmax: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    /// Fraction of time steps used for training.
    #[arg(long)]
    split: Option<f64>,
    /// Harden every E-step (the baseline estimator).
    #[arg(long)]
    hard: bool,
}

#[derive(Args)]
struct FitArgs {
    /// Field CSV (sites x time).
    #[arg(long)]
    field: PathBuf,
    /// Geometry JSON; defaults to the field path with a .json extension.
    #[arg(long)]
    meta: Option<PathBuf>,
    #[command(flatten)]
    flags: FitFlags,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Score only time steps after this training fraction.
    #[arg(long)]
    split: Option<f64>,
    /// Write the predictive density at this 1-based SITE:TIME cell; repeatable.
    #[arg(long = "density", value_parser = parse_cell)]
    densities: Vec<(usize, usize)>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Slices to simulate after the initial ones.
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long, value_enum)]
    initial: Option<InitialKind>,
    #[arg(long)]
    first_negative: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    replicates: Option<usize>,
    #[command(flatten)]
    flags: FitFlags,
}

fn parse_boundary(s: &str) -> Result<Boundary, String> {
    match s {
        "periodic" => Ok(Boundary::Periodic),
        "truncate" => Ok(Boundary::Truncate),
        other => Err(format!("unknown boundary '{other}' (periodic or truncate)")),
    }
}

fn parse_cell(s: &str) -> Result<(usize, usize), String> {
    let (site, time) = s.split_once(':').ok_or_else(|| format!("expected SITE:TIME, got '{s}'"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("'{v}': {e}"));
    Ok((parse(site)?, parse(time)?))
}

fn apply_cone(config: &mut RunConfig, a: &ConeArgs) {
    let c = &mut config.cone;
    c.past_horizon = a.hp.unwrap_or(c.past_horizon);
    c.future_horizon = a.hf.unwrap_or(c.future_horizon);
    c.speed = a.speed.unwrap_or(c.speed);
    c.boundary = a.boundary.unwrap_or(c.boundary);
}

fn apply_fit(config: &mut RunConfig, a: &FitFlags) {
    apply_cone(config, &a.cone);
    let f = &mut config.fit;
    f.k_max = a.kmax.unwrap_or(f.k_max);
    f.delta = a.delta.unwrap_or(f.delta);
    f.max_iterations = a.max_iter.unwrap_or(f.max_iterations);
    f.n_runs = a.runs.unwrap_or(f.n_runs);
    f.split = a.split.unwrap_or(f.split);
    f.hard |= a.hard;
}

fn run(cli: Cli) -> CliResult<()> {
    let mut config = RunConfig::load(cli.shared.config.as_deref())?;
    config.seed = cli.shared.seed.unwrap_or(config.seed);
    config.jobs = cli.shared.jobs.or(config.jobs);
    if let Some(jobs) = config.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))?;
    }
    let out = cli.shared.out.as_path();
    match cli.command {
        Command::Simulate(a) => {
            let s = &mut config.simulate;
            s.spatial_size = a.sites.unwrap_or(s.spatial_size);
            s.time_steps = a.steps.unwrap_or(s.time_steps);
            s.burn_in = a.burn_in.unwrap_or(s.burn_in);
            s.initial = a.initial.unwrap_or(s.initial);
            s.first_positive &= !a.first_negative;
            commands::simulate(&config, out)?;
            println!("wrote {}", out.join(commands::FIELD_CSV).display());
        }
        Command::Fit(a) => {
            apply_fit(&mut config, &a.flags);
            let input = FieldInput {
                csv: a.field,
                meta: a.meta,
            };
            let s = commands::fit(&config, &input, out)?;
            println!(
                "selected K={} (run {}, iteration {}), held-out MSE {:.6}{}",
                s.states,
                s.run,
                s.iteration,
                s.out_of_sample_mse,
                if s.truncated { "; some runs hit the iteration limit" } else { "" }
            );
        }
        Command::Predict(a) => {
            let input = FieldInput {
                csv: a.field,
                meta: a.meta,
            };
            let s = commands::predict(&config, &a.model, &input, a.split, &a.densities, out)?;
            println!("MSE {:.6} over {} cells (max-weight {:.6})", s.mse, s.cells, s.max_weight_mse);
        }
        Command::Generate(a) => {
            let g = &mut config.generate;
            g.t_max = a.t_max.unwrap_or(g.t_max);
            g.initial = a.initial.unwrap_or(g.initial);
            g.first_positive &= !a.first_negative;
            commands::generate(&config, &a.model, out)?;
            println!("wrote {}", out.join(commands::FIELD_CSV).display());
        }
        Command::Bench(a) => {
            apply_fit(&mut config, &a.flags);
            config.bench.replicates = a.replicates.unwrap_or(config.bench.replicates);
            let rows = bench::bench(&config, out)?;
            println!("wrote {} rows to {}", rows.len(), out.join(bench::RESULTS_CSV).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
