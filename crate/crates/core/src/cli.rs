//! Run configuration and mode orchestration behind the command-line binary:
//! scenario setup, per-iteration snapshot and CSV emission, convergence and
//! conditioning studies. Configs serialize to flat key=value files with `#`
//! comments; every run is fully deterministic.

use crate::analysis;
use crate::driver::{optimize, InitialGuess, OptimizationConfig, Termination};
use crate::fem::{FemParams, ProblemDefinition};
use crate::geom::Vec2;
use crate::levelset::Orientation;
use crate::shapegrad::DivergenceVariant;
use crate::snapshot::Snapshot;
use crate::transport::TransportParams;
use crate::Error;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Solve,
    Optimize,
    ConvergePrimal,
    ConvergeVelocity,
    ConditionSweep,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Solve => "solve",
            Mode::Optimize => "optimize",
            Mode::ConvergePrimal => "converge-primal",
            Mode::ConvergeVelocity => "converge-velocity",
            Mode::ConditionSweep => "condition-sweep",
        }
    }

    pub fn parse(s: &str) -> Result<Mode, Error> {
        match s {
            "solve" => Ok(Mode::Solve),
            "optimize" => Ok(Mode::Optimize),
            "converge-primal" => Ok(Mode::ConvergePrimal),
            "converge-velocity" => Ok(Mode::ConvergeVelocity),
            "condition-sweep" => Ok(Mode::ConditionSweep),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProblemId {
    Mp1,
    Mp2,
    Custom,
}

impl ProblemId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProblemId::Mp1 => "mp1",
            ProblemId::Mp2 => "mp2",
            ProblemId::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<ProblemId, Error> {
        match s {
            "mp1" => Ok(ProblemId::Mp1),
            "mp2" => Ok(ProblemId::Mp2),
            "custom" => Ok(ProblemId::Custom),
            other => Err(Error::Config(format!("unknown problem `{other}`"))),
        }
    }
}

/// Full description of one run. Defaults mirror the reference parameter set:
/// gamma_D = 10, gamma_1 = gamma_2 = 1, alpha = 0.5, N = 3, TOL = 1e-5.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub mode: Mode,
    pub problem: ProblemId,
    pub n: usize,
    pub gamma_d: f64,
    pub gamma_1: f64,
    pub gamma_2: f64,
    pub alpha: f64,
    pub time_steps: usize,
    pub tol: f64,
    pub max_iterations: usize,
    pub reinit_sweeps: usize,
    pub reinit_every: usize,
    pub cfl_factor: f64,
    pub ref_n: usize,
    pub printed_divergence_variant: bool,
    /// Custom problem data: constant Dirichlet and Neumann values and the
    /// initial circle.
    pub custom_g_d: f64,
    pub custom_g_n: f64,
    pub custom_center: Vec2,
    pub custom_radius: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Solve,
            problem: ProblemId::Mp1,
            n: 64,
            gamma_d: 10.0,
            gamma_1: 1.0,
            gamma_2: 1.0,
            alpha: 0.5,
            time_steps: 3,
            tol: 1e-5,
            max_iterations: 200,
            reinit_sweeps: 4,
            reinit_every: 1,
            cfl_factor: 2.0,
            ref_n: 256,
            printed_divergence_variant: false,
            custom_g_d: 0.0,
            custom_g_n: -4.0,
            custom_center: Vec2::new(0.5, 0.5),
            custom_radius: 0.3,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode = {}", self.mode.as_str());
        let _ = writeln!(s, "problem = {}", self.problem.as_str());
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "gamma_d = {}", self.gamma_d);
        let _ = writeln!(s, "gamma_1 = {}", self.gamma_1);
        let _ = writeln!(s, "gamma_2 = {}", self.gamma_2);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "time_steps = {}", self.time_steps);
        let _ = writeln!(s, "tol = {}", self.tol);
        let _ = writeln!(s, "max_iterations = {}", self.max_iterations);
        let _ = writeln!(s, "reinit_sweeps = {}", self.reinit_sweeps);
        let _ = writeln!(s, "reinit_every = {}", self.reinit_every);
        let _ = writeln!(s, "cfl_factor = {}", self.cfl_factor);
        let _ = writeln!(s, "ref_n = {}", self.ref_n);
        let _ = writeln!(s, "printed_divergence_variant = {}", self.printed_divergence_variant);
        let _ = writeln!(s, "custom_g_d = {}", self.custom_g_d);
        let _ = writeln!(s, "custom_g_n = {}", self.custom_g_n);
        let _ = writeln!(s, "custom_center_x = {}", self.custom_center.x);
        let _ = writeln!(s, "custom_center_y = {}", self.custom_center.y);
        let _ = writeln!(s, "custom_radius = {}", self.custom_radius);
        let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        s
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn from_key_values(text: &str) -> Result<RunConfig, Error> {
        let mut config = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, found `{raw}`", idx + 1))
            })?;
            config
                .apply(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", idx + 1)))?;
        }
        Ok(config)
    }

    /// Sets one field by key; used by file parsing and flag overrides.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), Error> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, Error> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("field `{key}`: cannot parse `{value}`")))
        }
        match key {
            "mode" => self.mode = Mode::parse(value)?,
            "problem" => self.problem = ProblemId::parse(value)?,
            "n" => self.n = num(key, value)?,
            "gamma_d" => self.gamma_d = num(key, value)?,
            "gamma_1" => self.gamma_1 = num(key, value)?,
            "gamma_2" => self.gamma_2 = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "time_steps" => self.time_steps = num(key, value)?,
            "tol" => self.tol = num(key, value)?,
            "max_iterations" => self.max_iterations = num(key, value)?,
            "reinit_sweeps" => self.reinit_sweeps = num(key, value)?,
            "reinit_every" => self.reinit_every = num(key, value)?,
            "cfl_factor" => self.cfl_factor = num(key, value)?,
            "ref_n" => self.ref_n = num(key, value)?,
            "printed_divergence_variant" => {
                self.printed_divergence_variant = num(key, value)?
            }
            "custom_g_d" => self.custom_g_d = num(key, value)?,
            "custom_g_n" => self.custom_g_n = num(key, value)?,
            "custom_center_x" => self.custom_center.x = num(key, value)?,
            "custom_center_y" => self.custom_center.y = num(key, value)?,
            "custom_radius" => self.custom_radius = num(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown field `{other}`"))),
        }
        Ok(())
    }

    pub fn fem_params(&self) -> FemParams {
        FemParams { gamma_d: self.gamma_d, gamma_1: self.gamma_1, ..FemParams::default() }
    }

    pub fn transport_params(&self) -> TransportParams {
        TransportParams {
            alpha: self.alpha,
            steps: self.time_steps,
            gamma_2: self.gamma_2,
            cfl_factor: self.cfl_factor,
            ..TransportParams::default()
        }
    }

    pub fn problem_definition(&self) -> ProblemDefinition {
        match self.problem {
            ProblemId::Mp1 => ProblemDefinition::mp1(),
            ProblemId::Mp2 => ProblemDefinition::mp2(),
            ProblemId::Custom => ProblemDefinition::custom(self.custom_g_d, self.custom_g_n),
        }
    }

    pub fn initial_guess(&self) -> InitialGuess {
        match self.problem {
            ProblemId::Mp1 => InitialGuess::Mp1Flower,
            ProblemId::Mp2 => InitialGuess::Mp2Ellipse,
            ProblemId::Custom => InitialGuess::Circle {
                center: self.custom_center,
                radius: self.custom_radius,
                orientation: Orientation::ExteriorNegative,
            },
        }
    }

    pub fn optimization_config(&self) -> OptimizationConfig {
        OptimizationConfig {
            fem: self.fem_params(),
            transport: self.transport_params(),
            tol: self.tol,
            max_iterations: self.max_iterations,
            reinit_sweeps: self.reinit_sweeps,
            reinit_every: self.reinit_every,
            divergence_variant: if self.printed_divergence_variant {
                DivergenceVariant::Printed
            } else {
                DivergenceVariant::SourceTimesDual
            },
            ..OptimizationConfig::default()
        }
    }
}

fn write_atomic_text(path: &Path, text: &str) -> Result<(), Error> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn study_resolutions(n: usize) -> Vec<usize> {
    let mut ns = vec![16usize];
    while *ns.last().unwrap() < n {
        let next = ns.last().unwrap() * 2;
        ns.push(next);
    }
    ns
}

/// Runs a configuration to completion, writing artifacts into its output
/// directory. Returns the text of the final summary.
pub fn run(config: &RunConfig) -> Result<String, Error> {
    std::fs::create_dir_all(&config.output_dir)?;
    write_atomic_text(&config.output_dir.join("config.txt"), &config.to_key_values())?;
    let summary = match config.mode {
        Mode::Solve => run_solve(config)?,
        Mode::Optimize => run_optimize(config)?,
        Mode::ConvergePrimal => run_converge_primal(config)?,
        Mode::ConvergeVelocity => run_converge_velocity(config)?,
        Mode::ConditionSweep => run_condition_sweep(config)?,
    };
    write_atomic_text(&config.output_dir.join("summary.txt"), &summary)?;
    Ok(summary)
}

fn run_solve(config: &RunConfig) -> Result<String, Error> {
    let mesh = crate::mesh::build_background_mesh(config.n)?;
    let problem = config.problem_definition();
    let (phi, _) = match config.problem {
        // the reference interface: solve on the known free boundary
        ProblemId::Mp1 => (analysis::mp1_interface(&mesh)?, true),
        _ => config.initial_guess().level_set(&mesh)?,
    };
    let geom = crate::levelset::build_cut_geometry(
        &mesh,
        &phi,
        problem.fixed_level_set(&mesh)?.as_ref(),
    )?;
    let params = config.fem_params();
    let (u, matrix, stats) = crate::fem::solve_primal(&mesh, &geom, &problem, &params)?;
    let (p, _) = crate::fem::solve_dual(&mesh, &geom, &matrix, &u, &params)?;
    let residual = crate::driver::residual_indicator(&mesh, &geom, &u)?;

    let snap = Snapshot::from_fields(
        &mesh,
        &format!("{} solve n={}", config.problem.as_str(), config.n),
        &[("phi", &phi.values), ("u", &u.values), ("p", &p.values)],
    );
    snap.write_atomic(&config.output_dir.join("solve.vtk"))?;

    let mut summary = String::new();
    let _ = writeln!(summary, "mode = solve");
    let _ = writeln!(summary, "problem = {}", config.problem.as_str());
    let _ = writeln!(summary, "n = {}", config.n);
    let _ = writeln!(summary, "solver_iterations = {}", stats.iterations);
    let _ = writeln!(summary, "residual_indicator = {residual}");

    if let (Some(exact), Some(exact_grad)) = (&problem.exact, &problem.exact_grad) {
        let exact_field = analysis::ExactField {
            value: Box::new(exact.as_ref()),
            gradient: Box::new(exact_grad.as_ref()),
        };
        let norms = analysis::field_errors(&mesh, &geom, &u, &exact_field, 2)?;
        let mut csv = String::new();
        let _ = writeln!(csv, "n,h,l2,h1_semi,energy");
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            config.n,
            mesh.h(),
            norms.lp,
            norms.w1p_semi,
            norms.energy
        );
        write_atomic_text(&config.output_dir.join("errors.csv"), &csv)?;
        let _ = writeln!(summary, "l2_error = {}", norms.lp);
        let _ = writeln!(summary, "energy_error = {}", norms.energy);
    }
    Ok(summary)
}

fn run_optimize(config: &RunConfig) -> Result<String, Error> {
    let mesh = crate::mesh::build_background_mesh(config.n)?;
    let problem = config.problem_definition();
    let opt_config = config.optimization_config();
    let out = config.output_dir.clone();

    let mut csv = String::from("iteration,residual,lagrangian,horizon,velocity_norm\n");
    let mut snapshot_error: Option<Error> = None;
    let report = optimize(
        &mesh,
        &problem,
        &config.initial_guess(),
        &opt_config,
        |state| {
            let r = state.record;
            println!(
                "iteration {:4}  residual {:.6e}  lagrangian {:+.6e}  horizon {:.3e}  |beta'| {:.3e}",
                r.iteration, r.residual, r.lagrangian, r.horizon, r.velocity_norm
            );
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                r.iteration, r.residual, r.lagrangian, r.horizon, r.velocity_norm
            );
            if snapshot_error.is_some() {
                return;
            }
            let mut fields: Vec<(&str, &[f64])> = vec![
                ("phi", state.level_set.values.as_slice()),
                ("u", state.u.values.as_slice()),
                ("p", state.p.values.as_slice()),
            ];
            let beta_parts: Option<(Vec<f64>, Vec<f64>)> = state
                .beta
                .map(|b| (b.values.iter().map(|v| v.x).collect(), b.values.iter().map(|v| v.y).collect()));
            if let Some((bx, by)) = &beta_parts {
                fields.push(("beta_x", bx.as_slice()));
                fields.push(("beta_y", by.as_slice()));
            }
            let snap = Snapshot::from_fields(
                &mesh,
                &format!("iteration {}", state.iteration),
                &fields,
            );
            let path = out.join(format!("iter_{:04}.vtk", state.iteration));
            if let Err(e) = snap.write_atomic(&path) {
                snapshot_error = Some(e);
            }
        },
    )?;
    if let Some(e) = snapshot_error {
        return Err(e);
    }
    write_atomic_text(&config.output_dir.join("history.csv"), &csv)?;

    let mut summary = String::new();
    let _ = writeln!(summary, "mode = optimize");
    let _ = writeln!(summary, "problem = {}", config.problem.as_str());
    let _ = writeln!(summary, "n = {}", config.n);
    let _ = writeln!(summary, "iterations = {}", report.records.len());
    let _ = writeln!(
        summary,
        "termination = {}",
        match report.termination {
            Termination::Converged => "converged",
            Termination::MaxIterations => "max-iterations",
            Termination::Stationary => "stationary",
            Termination::NonDescent => "non-descent",
        }
    );
    if let Some(last) = report.records.last() {
        let _ = writeln!(summary, "final_residual = {}", last.residual);
        let _ = writeln!(summary, "final_lagrangian = {}", last.lagrangian);
    }
    Ok(summary)
}

fn run_converge_primal(config: &RunConfig) -> Result<String, Error> {
    let table = analysis::primal_convergence(&study_resolutions(config.n), &config.fem_params())?;
    let mut csv = Vec::new();
    table.to_csv(&mut csv)?;
    write_atomic_text(
        &config.output_dir.join("primal_convergence.csv"),
        std::str::from_utf8(&csv).expect("csv is utf8"),
    )?;
    let mut summary = String::from("mode = converge-primal\n");
    for (k, name) in table.error_names.iter().enumerate() {
        let _ = writeln!(summary, "{name}_last_rate = {}", table.last_rate(k).unwrap_or(f64::NAN));
    }
    Ok(summary)
}

fn run_converge_velocity(config: &RunConfig) -> Result<String, Error> {
    let table = analysis::velocity_convergence(
        &study_resolutions(config.n),
        config.ref_n,
        &config.fem_params(),
    )?;
    let mut csv = Vec::new();
    table.to_csv(&mut csv)?;
    write_atomic_text(
        &config.output_dir.join("velocity_convergence.csv"),
        std::str::from_utf8(&csv).expect("csv is utf8"),
    )?;
    let mut summary = String::from("mode = converge-velocity\n");
    for (k, name) in table.error_names.iter().enumerate() {
        let _ = writeln!(summary, "{name}_last_rate = {}", table.last_rate(k).unwrap_or(f64::NAN));
    }
    Ok(summary)
}

fn run_condition_sweep(config: &RunConfig) -> Result<String, Error> {
    let mesh_h = 1.0 / config.n as f64;
    let offsets = [0.0, mesh_h / 7.0, mesh_h / 3.0, mesh_h / 2.0];
    let rows = analysis::conditioning_sweep(config.n, &offsets, config.gamma_d, config.gamma_1)?;
    let mut csv = String::from("offset,kappa,lambda_min,lambda_max,approximate\n");
    for (delta, est) in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            delta, est.kappa, est.lambda_min, est.lambda_max, est.approximate
        );
    }
    write_atomic_text(&config.output_dir.join("condition_sweep.csv"), &csv)?;
    let kappas: Vec<f64> = rows.iter().map(|(_, e)| e.kappa).collect();
    let ratio = kappas.iter().fold(0.0f64, |m, &k| m.max(k))
        / kappas.iter().fold(f64::INFINITY, |m, &k| m.min(k));
    let mut summary = String::from("mode = condition-sweep\n");
    let _ = writeln!(summary, "gamma_1 = {}", config.gamma_1);
    let _ = writeln!(summary, "kappa_ratio = {ratio}");
    Ok(summary)
}
