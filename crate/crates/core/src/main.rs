use clap::{Args, Parser, Subcommand};
use cutfem::cli::{Mode, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

/// 2D cut finite element solver for the Bernoulli free boundary problem.
#[derive(Parser)]
#[command(name = "cutfem", version, about)]
struct CliArgs {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the primal and dual problems on a fixed interface.
    Solve(CommonOpts),
    /// Run the free-boundary descent loop.
    Optimize(CommonOpts),
    /// Primal error convergence study on the reference interface.
    ConvergePrimal(CommonOpts),
    /// Velocity-field convergence study against a fine reference.
    ConvergeVelocity(CommonOpts),
    /// Condition numbers while the interface shifts across cells.
    ConditionSweep(CommonOpts),
}

#[derive(Args)]
struct CommonOpts {
    /// Key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model problem: mp1 | mp2 | custom.
    #[arg(long)]
    problem: Option<String>,
    /// Background cells per side.
    #[arg(short, long)]
    n: Option<usize>,
    /// Output directory (CUTFEM_OUTPUT_DIR overrides the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Nitsche penalty gamma_D.
    #[arg(long)]
    gamma_d: Option<f64>,
    /// Ghost penalty gamma_1.
    #[arg(long)]
    gamma_1: Option<f64>,
    /// Transport stabilization gamma_2.
    #[arg(long)]
    gamma_2: Option<f64>,
    /// Horizon damping alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// Crank-Nicolson steps per horizon.
    #[arg(long)]
    steps: Option<usize>,
    /// Residual tolerance TOL.
    #[arg(long)]
    tol: Option<f64>,
    /// Outer iteration cap.
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Reference resolution for convergence studies.
    #[arg(long)]
    ref_n: Option<usize>,
    /// Assemble the printed divergence variant of the shape gradient.
    #[arg(long)]
    printed_divergence: bool,
}

fn build_config(mode: Mode, opts: &CommonOpts) -> Result<RunConfig, cutfem::Error> {
    let mut config = match &opts.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                cutfem::Error::Config(format!("cannot read {}: {e}", path.display()))
            })?;
            RunConfig::from_key_values(&text)?
        }
        None => RunConfig::default(),
    };
    config.mode = mode;
    if let Ok(dir) = std::env::var("CUTFEM_OUTPUT_DIR") {
        config.output_dir = PathBuf::from(dir);
    }
    if let Some(p) = &opts.problem {
        config.apply("problem", p)?;
    }
    if let Some(n) = opts.n {
        config.n = n;
    }
    if let Some(out) = &opts.out {
        config.output_dir = out.clone();
    }
    if let Some(v) = opts.gamma_d {
        config.gamma_d = v;
    }
    if let Some(v) = opts.gamma_1 {
        config.gamma_1 = v;
    }
    if let Some(v) = opts.gamma_2 {
        config.gamma_2 = v;
    }
    if let Some(v) = opts.alpha {
        config.alpha = v;
    }
    if let Some(v) = opts.steps {
        config.time_steps = v;
    }
    if let Some(v) = opts.tol {
        config.tol = v;
    }
    if let Some(v) = opts.max_iterations {
        config.max_iterations = v;
    }
    if let Some(v) = opts.ref_n {
        config.ref_n = v;
    }
    if opts.printed_divergence {
        config.printed_divergence_variant = true;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let args = CliArgs::parse();
    let (mode, opts) = match &args.command {
        Command::Solve(o) => (Mode::Solve, o),
        Command::Optimize(o) => (Mode::Optimize, o),
        Command::ConvergePrimal(o) => (Mode::ConvergePrimal, o),
        Command::ConvergeVelocity(o) => (Mode::ConvergeVelocity, o),
        Command::ConditionSweep(o) => (Mode::ConditionSweep, o),
    };
    let config = match build_config(mode, opts) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    match cutfem::cli::run(&config) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{} failed: {e}", config.mode.as_str());
            ExitCode::FAILURE
        }
    }
}
