//! Subcommand implementations. Each returns an [`Outcome`] that maps onto
//! the process exit contract: 0 success, 1 usage/config error (as `Err`),
//! 2 numerical check failure, 3 optimizer non-convergence.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ndarray::{Array1, Array2};
use serde::Serialize;

use qoc_core::adjoint::GradientEngine;
use qoc_core::analysis::{
    self, dominant_peaks, fd_gradient, forward_sensitivity_gradient, frobenius_norm,
    pulse_spectrum, symmetric_eigenvalues, HessianProbe,
};
use qoc_core::integrator::Propagator;
use qoc_core::objective::{evaluate_objective, EvalOptions};
use qoc_core::optimizer::{
    initial_guess, optimize, OptimizerConfig, PulseProblem, StopReason,
};

use crate::artifacts::{
    self, AsymmetryRow, PeakRow, ProbeMatrixFile,
};
use crate::config::{AlphaFile, Problem, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
    NotConverged,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::CheckFailed => 2,
            Outcome::NotConverged => 3,
        }
    }
}

/// Inputs common to every subcommand, resolved from flags and config.
#[derive(Debug)]
pub struct RunContext {
    pub problem: Problem,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Coefficients from --alpha, already layout-checked.
    pub alpha: Option<Array1<f64>>,
    pub parallel: usize,
}

impl RunContext {
    pub fn resolve(
        config_path: &Path,
        alpha_path: Option<&Path>,
        out_flag: Option<&Path>,
        seed_flag: Option<u64>,
        parallel: usize,
    ) -> Result<Self> {
        if parallel == 0 {
            bail!("--parallel must be at least 1");
        }
        let config = RunConfig::load(config_path)?;
        let base = config_path.parent().unwrap_or_else(|| Path::new("."));
        let problem = config.build(base)?;
        let out_dir = out_flag
            .map(Path::to_path_buf)
            .or_else(|| config.output.directory.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&out_dir)
            .with_context(|| format!("creating output directory {}", out_dir.display()))?;
        let seed = seed_flag.or(config.optimizer.seed).unwrap_or(0);
        let alpha = match alpha_path {
            Some(path) => Some(AlphaFile::read(path)?.into_alpha(&problem.params)?),
            None => None,
        };
        Ok(Self {
            problem,
            out_dir,
            seed,
            alpha,
            parallel,
        })
    }

    fn params_with(&self, alpha: &Array1<f64>) -> Result<qoc_core::controls::ControlParameterization> {
        let mut params = self.problem.params.clone();
        params.set_alpha(alpha)?;
        Ok(params)
    }

    fn random_start(&self) -> Array1<f64> {
        let amplitude = self
            .problem
            .config
            .optimizer
            .initial_amplitude
            .unwrap_or(self.problem.alpha_max / 10.0);
        initial_guess(self.problem.params.dim(), amplitude, self.seed)
    }
}

#[derive(Serialize)]
struct SimulateSummary {
    infidelity: f64,
    guard_penalty: f64,
    total: f64,
    norm_error_max: f64,
    forbidden_population_max: f64,
    level_population_max: Vec<f64>,
    duration_ns: f64,
    steps: usize,
}

pub fn run_simulate(ctx: &RunContext) -> Result<Outcome> {
    let problem = &ctx.problem;
    let alpha = ctx
        .alpha
        .clone()
        .unwrap_or_else(|| Array1::zeros(problem.params.dim()));
    let params = ctx.params_with(&alpha)?;
    let opts = EvalOptions {
        population_trace: problem.config.output.populations,
        ..Default::default()
    };
    let (breakdown, diag) = evaluate_objective(
        &problem.model,
        &params,
        &problem.grid,
        &problem.target,
        &opts,
    )?;

    artifacts::write_json(&ctx.out_dir.join("breakdown.json"), &breakdown)?;
    let summary = SimulateSummary {
        infidelity: breakdown.infidelity,
        guard_penalty: breakdown.guard_penalty,
        total: breakdown.total,
        norm_error_max: diag.norm_error_max,
        forbidden_population_max: diag.forbidden_population_max,
        level_population_max: diag.level_population_max.clone(),
        duration_ns: problem.grid.duration(),
        steps: problem.grid.steps(),
    };
    artifacts::write_json(&ctx.out_dir.join("summary.json"), &summary)?;
    if problem.config.output.populations {
        artifacts::write_populations_csv(
            &ctx.out_dir.join("populations.csv"),
            problem.model.levels(),
            problem.model.essential(),
            &diag.population_trace,
        )?;
    }
    println!(
        "simulate: J1h = {:.6e}, J2h = {:.6e}, total = {:.6e}",
        breakdown.infidelity, breakdown.guard_penalty, breakdown.total
    );
    println!(
        "simulate: max norm error {:.3e}, max forbidden population {:.3e} over {} steps",
        diag.norm_error_max,
        diag.forbidden_population_max,
        problem.grid.steps()
    );
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct OptimizeSummary {
    stop: StopReason,
    iterations: usize,
    evaluations: usize,
    gradient_norm: f64,
    infidelity: f64,
    guard_penalty: f64,
    total: f64,
    forbidden_population_max: f64,
    norm_error_max: f64,
    seed: u64,
    steps: usize,
    wall_seconds: f64,
}

pub fn run_optimize(ctx: &RunContext) -> Result<Outcome> {
    let problem = &ctx.problem;
    let section = &problem.config.optimizer;
    let mut config = OptimizerConfig::new(problem.alpha_max);
    if let Some(v) = section.max_iterations {
        config.max_iterations = v;
    }
    if let Some(v) = section.tolerance {
        config.tolerance = v;
    }
    if let Some(v) = section.memory {
        config.memory = v;
    }
    if let Some(v) = section.armijo_c1 {
        config.armijo_c1 = v;
    }
    if let Some(v) = section.max_backtracks {
        config.max_backtracks = v;
    }
    let start = match &ctx.alpha {
        Some(alpha) => alpha.clone(),
        None => ctx.random_start(),
    };

    let mut engine =
        GradientEngine::new(&problem.model, problem.grid, problem.target.clone())?;
    let mut pulse = PulseProblem::new(&mut engine, problem.params.clone());
    let clock = Instant::now();
    let result = optimize(&mut pulse, &start, &config)?;
    let wall_seconds = clock.elapsed().as_secs_f64();

    // Trajectory diagnostics at the accepted optimum.
    let final_params = ctx.params_with(&result.alpha)?;
    let (_, diag) = evaluate_objective(
        &problem.model,
        &final_params,
        &problem.grid,
        &problem.target,
        &EvalOptions::default(),
    )?;

    let splines = problem.params.grid().count();
    let carriers = problem.params.carriers().count();
    artifacts::write_history_csv(&ctx.out_dir.join("history.csv"), &result.history)?;
    AlphaFile::write(
        &ctx.out_dir.join("alpha_opt.json"),
        splines,
        carriers,
        &result.alpha,
    )?;
    artifacts::write_json(&ctx.out_dir.join("breakdown.json"), &result.breakdown)?;
    let summary = OptimizeSummary {
        stop: result.stop,
        iterations: result.iterations,
        evaluations: result.evaluations,
        gradient_norm: result.gradient_norm,
        infidelity: result.breakdown.infidelity,
        guard_penalty: result.breakdown.guard_penalty,
        total: result.breakdown.total,
        forbidden_population_max: diag.forbidden_population_max,
        norm_error_max: diag.norm_error_max,
        seed: ctx.seed,
        steps: problem.grid.steps(),
        wall_seconds,
    };
    artifacts::write_json(&ctx.out_dir.join("summary.json"), &summary)?;

    println!(
        "optimize: {:?} after {} iterations ({} evaluations, {:.1} s)",
        result.stop, result.iterations, result.evaluations, wall_seconds
    );
    println!(
        "optimize: J1h = {:.6e}, J2h = {:.6e}, projected gradient {:.3e}, forbidden {:.3e}",
        result.breakdown.infidelity,
        result.breakdown.guard_penalty,
        result.gradient_norm,
        diag.forbidden_population_max
    );
    Ok(match result.stop {
        StopReason::Converged => Outcome::Success,
        StopReason::MaxIterations | StopReason::LineSearchFailed => Outcome::NotConverged,
    })
}

#[derive(Serialize)]
struct CheckResult {
    name: &'static str,
    measured: f64,
    tolerance: f64,
    pass: bool,
}

#[derive(Serialize)]
struct VerifyReport {
    checks: Vec<CheckResult>,
    all_passed: bool,
}

/// Max componentwise difference, relative to 1 + |reference|.
fn max_relative_difference(reference: &Array1<f64>, other: &Array1<f64>) -> f64 {
    reference
        .iter()
        .zip(other.iter())
        .map(|(&a, &b)| (a - b).abs() / (1.0 + a.abs()))
        .fold(0.0, f64::max)
}

pub fn run_verify(ctx: &RunContext, corrupt_gradient: bool) -> Result<Outcome> {
    let problem = &ctx.problem;
    let alpha = match &ctx.alpha {
        Some(alpha) => alpha.clone(),
        None => ctx.random_start(),
    };
    let params = ctx.params_with(&alpha)?;
    let model = &problem.model;
    let grid = &problem.grid;
    let target = &problem.target;

    let mut engine = GradientEngine::new(model, *grid, target.clone())?;
    let (_, mut adjoint_grad) = engine.evaluate(&params)?;
    if corrupt_gradient {
        // Fault-injection hook: shift one component so every downstream
        // comparison must notice.
        if let Some(g0) = adjoint_grad.get_mut(0) {
            *g0 += 1e-3;
        }
    }
    let (_, forward_grad) = forward_sensitivity_gradient(model, &params, grid, target)?;
    let fd_grad = fd_gradient(model, &params, grid, target, 1e-6)?;

    let mut checks = Vec::new();
    checks.push(CheckResult {
        name: "adjoint_vs_forward_sensitivity",
        measured: max_relative_difference(&adjoint_grad, &forward_grad),
        tolerance: 1e-10,
        pass: false,
    });
    checks.push(CheckResult {
        name: "adjoint_vs_finite_difference",
        measured: max_relative_difference(&adjoint_grad, &fd_grad),
        tolerance: 1e-6,
        pass: false,
    });

    // Round trip: forward through the full grid, then exact reverse steps
    // back to t = 0.
    let mut prop = Propagator::new(model, *grid);
    let initial = prop.initial_state();
    let mut state = prop.initial_state();
    for n in 0..grid.steps() {
        prop.step_forward(&params, &mut state, n)?;
    }
    for n in (0..grid.steps()).rev() {
        prop.step_reverse(&params, &mut state, n)?;
    }
    let round_trip = state
        .u
        .iter()
        .zip(initial.u.iter())
        .chain(state.v.iter().zip(initial.v.iter()))
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0, f64::max);
    checks.push(CheckResult {
        name: "reversibility_round_trip",
        measured: round_trip,
        tolerance: 1e-10,
        pass: false,
    });

    for check in &mut checks {
        check.pass = check.measured <= check.tolerance;
        println!(
            "verify: {} measured {:.3e} tolerance {:.1e} {}",
            check.name,
            check.measured,
            check.tolerance,
            if check.pass { "pass" } else { "FAIL" }
        );
    }
    let all_passed = checks.iter().all(|c| c.pass);
    let report = VerifyReport { checks, all_passed };
    artifacts::write_json(&ctx.out_dir.join("verify_report.json"), &report)?;
    Ok(if all_passed {
        Outcome::Success
    } else {
        Outcome::CheckFailed
    })
}

/// Probe columns sharded over worker threads; column `k` goes to worker
/// `k mod workers` and the assembly order is fixed, so the result is
/// identical for any worker count.
fn probe_columns_parallel(
    ctx: &RunContext,
    params: &qoc_core::controls::ControlParameterization,
    eps: f64,
) -> Result<Array2<f64>> {
    let problem = &ctx.problem;
    let dim = params.dim();
    let workers = ctx.parallel.min(dim.max(1));
    if workers <= 1 {
        let all: Vec<usize> = (0..dim).collect();
        return Ok(analysis::hessian_probe_columns(
            &problem.model,
            params,
            &problem.grid,
            &problem.target,
            eps,
            &all,
        )?);
    }
    let shards: Vec<Vec<usize>> = (0..workers)
        .map(|w| (w..dim).step_by(workers).collect())
        .collect();
    let mut full = Array2::zeros((dim, dim));
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = shards
            .iter()
            .map(|columns| {
                scope.spawn(move || {
                    analysis::hessian_probe_columns(
                        &problem.model,
                        params,
                        &problem.grid,
                        &problem.target,
                        eps,
                        columns,
                    )
                })
            })
            .collect();
        for (columns, handle) in shards.iter().zip(handles) {
            let part = handle
                .join()
                .map_err(|_| anyhow::anyhow!("probe worker panicked"))??;
            for (slot, &k) in columns.iter().enumerate() {
                full.column_mut(k).assign(&part.column(slot));
            }
        }
        Ok(())
    })?;
    Ok(full)
}

pub fn run_probe(ctx: &RunContext) -> Result<Outcome> {
    let problem = &ctx.problem;
    let Some(alpha) = &ctx.alpha else {
        bail!("probe needs --alpha pointing at an optimized coefficient file");
    };
    let params = ctx.params_with(alpha)?;
    let section = &problem.config.probe;

    let mut rows = Vec::new();
    let mut eigen_probe: Option<HessianProbe> = None;
    let mut epsilons = section.epsilons.clone();
    if !epsilons.contains(&section.eigen_epsilon) {
        epsilons.push(section.eigen_epsilon);
    }
    for &eps in &epsilons {
        let columns = probe_columns_parallel(ctx, &params, eps)?;
        let probe = HessianProbe::from_columns(columns)?;
        if section.epsilons.contains(&eps) {
            rows.push(AsymmetryRow {
                epsilon: eps,
                symmetric_norm: frobenius_norm(probe.symmetric.view()),
                antisymmetric_norm: frobenius_norm(probe.antisymmetric.view()),
                ratio: probe.asymmetry_ratio(),
            });
            println!(
                "probe: eps {:.1e} |L_s| {:.6e} |L_a| {:.6e} ratio {:.3e}",
                eps,
                rows.last().unwrap().symmetric_norm,
                rows.last().unwrap().antisymmetric_norm,
                rows.last().unwrap().ratio
            );
        }
        if eps == section.eigen_epsilon {
            eigen_probe = Some(probe);
        }
    }
    artifacts::write_asymmetry_csv(&ctx.out_dir.join("asymmetry.csv"), &rows)?;

    let probe = eigen_probe.expect("eigen epsilon was appended to the sweep");
    let (eigenvalues, _) = symmetric_eigenvalues(&probe.symmetric)?;
    artifacts::write_eigenvalues_csv(&ctx.out_dir.join("eigenvalues.csv"), &eigenvalues)?;
    if problem.config.output.probe_matrices {
        artifacts::write_json(
            &ctx.out_dir.join("probe_matrix.json"),
            &ProbeMatrixFile::new(section.eigen_epsilon, &probe.columns),
        )?;
    }
    println!(
        "probe: {} eigenvalues at eps {:.1e}, extremes {:.6e} .. {:.6e}",
        eigenvalues.len(),
        section.eigen_epsilon,
        eigenvalues[eigenvalues.len() - 1],
        eigenvalues[0]
    );
    Ok(Outcome::Success)
}

pub fn run_spectrum(ctx: &RunContext) -> Result<Outcome> {
    let problem = &ctx.problem;
    let Some(alpha) = &ctx.alpha else {
        bail!("spectrum needs --alpha pointing at an optimized coefficient file");
    };
    let params = ctx.params_with(alpha)?;
    let section = &problem.config.spectrum;

    let spectrum = pulse_spectrum(&params, problem.model.omega_a(), section.samples)?;
    artifacts::write_spectrum_csv(
        &ctx.out_dir.join("spectrum.csv"),
        &spectrum.frequencies,
        &spectrum.amplitudes,
    )?;

    let peaks = dominant_peaks(&spectrum, section.threshold, section.min_separation_bins);
    let bin_width = 1.0 / params.duration();
    let transitions: Vec<f64> = (0..problem.model.levels().saturating_sub(1))
        .map(|k| problem.model.transition_frequency(k) / std::f64::consts::TAU)
        .collect();
    let rows: Vec<PeakRow> = peaks
        .iter()
        .map(|&(freq, amp)| {
            let nearest = transitions
                .iter()
                .copied()
                .min_by(|a, b| {
                    (freq - a).abs().partial_cmp(&(freq - b).abs()).unwrap()
                })
                .unwrap_or(f64::NAN);
            PeakRow {
                frequency_ghz: freq,
                amplitude: amp,
                nearest_transition_ghz: nearest,
                bin_offset: (freq - nearest) / bin_width,
            }
        })
        .collect();
    artifacts::write_peaks_csv(&ctx.out_dir.join("peaks.csv"), &rows)?;
    for row in &rows {
        println!(
            "spectrum: peak {:.6} GHz amplitude {:.3e}, nearest transition {:.6} GHz ({:+.2} bins)",
            row.frequency_ghz, row.amplitude, row.nearest_transition_ghz, row.bin_offset
        );
    }
    if rows.is_empty() {
        println!("spectrum: no dominant peaks above the threshold");
    }
    Ok(Outcome::Success)
}
