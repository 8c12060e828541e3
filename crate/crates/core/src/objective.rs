//! Discrete objective: gate infidelity plus a guard-level occupation penalty,
//! both defined on the same grid the propagator uses.
//!
//! The trace overlap of the final state with the target columns d_j is
//!
//! ```text
//! S = sum_j <u_j, du_j> + <v_j, dv_j> + i ( <v_j, du_j> - <u_j, dv_j> )
//! ```
//!
//! giving the phase-insensitive infidelity J1 = 1 - |S|^2 / E^2. The guard
//! penalty J2 integrates the weighted guard occupation along the trajectory
//! with the quadrature the scheme itself induces: trapezoid weights 1/2 on
//! the two u-stages of each step and weight 1 on the shared midpoint v-stage,
//!
//! ```text
//! J2 = h/T sum_n sum_j 1/2 <U1_j, W U1_j> + 1/2 <U2_j, W U2_j> + <V1_j, W V1_j>
//! ```
//!
//! Matching the gradient to this exact quadrature (not to the continuous
//! integral) is what lets the adjoint reach machine precision.

use ndarray::Array1;
use num_complex::Complex64;
use serde::Serialize;

use crate::controls::ControlParameterization;
use crate::error::{Error, Result};
use crate::integrator::{Propagator, StageView, State, TimeGrid};
use crate::model::{QuditModel, TargetGate};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ObjectiveBreakdown {
    pub overlap_re: f64,
    pub overlap_im: f64,
    /// J1: 1 - |overlap|^2 / E^2.
    pub infidelity: f64,
    /// J2: trajectory-averaged weighted guard occupation.
    pub guard_penalty: f64,
    pub total: f64,
}

impl ObjectiveBreakdown {
    pub fn overlap(&self) -> Complex64 {
        Complex64::new(self.overlap_re, self.overlap_im)
    }

    /// Assembles the breakdown from the raw overlap and guard quadrature.
    pub fn from_parts(overlap: Complex64, guard_penalty: f64, essential: usize) -> Self {
        let infidelity = infidelity(overlap, essential);
        Self {
            overlap_re: overlap.re,
            overlap_im: overlap.im,
            infidelity,
            guard_penalty,
            total: infidelity + guard_penalty,
        }
    }
}

/// Trace overlap of `state` with the target columns.
pub fn overlap(state: &State, target: &TargetGate) -> Complex64 {
    let du = target.d_u();
    let dv = target.d_v();
    let mut re = 0.0;
    let mut im = 0.0;
    for j in 0..target.essential() {
        for i in 0..target.levels() {
            re += state.u[[i, j]] * du[[i, j]] + state.v[[i, j]] * dv[[i, j]];
            im += state.v[[i, j]] * du[[i, j]] - state.u[[i, j]] * dv[[i, j]];
        }
    }
    Complex64::new(re, im)
}

/// Phase-insensitive infidelity 1 - |overlap|^2 / E^2.
pub fn infidelity(overlap: Complex64, essential: usize) -> f64 {
    1.0 - overlap.norm_sqr() / (essential as f64 * essential as f64)
}

/// Accumulates the guard quadrature over visited steps.
pub struct GuardAccumulator<'a> {
    weights: &'a Array1<f64>,
    factor: f64,
    pub sum: f64,
}

impl<'a> GuardAccumulator<'a> {
    pub fn new(weights: &'a Array1<f64>, grid: &TimeGrid) -> Self {
        let factor = if grid.steps() == 0 {
            0.0
        } else {
            grid.h() / grid.duration()
        };
        Self { weights, factor, sum: 0.0 }
    }

    /// Quadrature prefactor h/T (zero on a degenerate grid).
    pub fn factor(&self) -> f64 {
        self.factor
    }

    fn weighted(&self, m: &ndarray::Array2<f64>) -> f64 {
        let mut s = 0.0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w != 0.0 {
                for j in 0..m.ncols() {
                    s += w * m[[i, j]] * m[[i, j]];
                }
            }
        }
        s
    }

    pub fn visit(&mut self, stages: StageView<'_>) {
        self.sum += self.factor
            * (0.5 * self.weighted(stages.u_start)
                + 0.5 * self.weighted(stages.u_end)
                + self.weighted(stages.v_mid));
    }
}

/// What [`evaluate_objective`] should record beyond the scalar breakdown.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Record (t, weighted guard occupation) along the trajectory.
    pub guard_trace: bool,
    /// Record (t, per-level-and-column populations) along the trajectory.
    pub population_trace: bool,
    /// Cap on recorded trace points; longer runs are strided down.
    pub trace_cap: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { guard_trace: false, population_trace: false, trace_cap: 10_000 }
    }
}

/// Trajectory diagnostics. Maxima are tracked at every node regardless of
/// the trace stride.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub guard_trace: Vec<(f64, f64)>,
    /// (t, populations flattened level-major: [lvl0 col0, lvl0 col1, ..]).
    pub population_trace: Vec<(f64, Vec<f64>)>,
    /// Per-level maximum occupation over all nodes and columns.
    pub level_population_max: Vec<f64>,
    /// Occupation maximum of the highest level.
    pub forbidden_population_max: f64,
    pub norm_error_max: f64,
}

pub(crate) fn check_compatible(
    model: &QuditModel,
    params: &ControlParameterization,
    grid: &TimeGrid,
    target: &TargetGate,
) -> Result<()> {
    if target.levels() != model.levels() || target.essential() != model.essential() {
        return Err(Error::DimensionMismatch(format!(
            "target is {}x{}, model wants {}x{}",
            target.levels(),
            target.essential(),
            model.levels(),
            model.essential()
        )));
    }
    if grid.steps() > 0 && (grid.duration() - params.duration()).abs() > 1e-9 * grid.duration() {
        return Err(Error::InvalidGrid(format!(
            "grid duration {} differs from pulse duration {}",
            grid.duration(),
            params.duration()
        )));
    }
    Ok(())
}

/// Scalar objective only; the cheapest full evaluation (one forward sweep).
pub fn evaluate_total(
    model: &QuditModel,
    params: &ControlParameterization,
    grid: &TimeGrid,
    target: &TargetGate,
) -> Result<ObjectiveBreakdown> {
    check_compatible(model, params, grid, target)?;
    let mut prop = Propagator::new(model, *grid);
    let mut guard = GuardAccumulator::new(model.guard_weights(), grid);
    let state = prop.propagate_with(params, |_, stages, _| guard.visit(stages))?;
    Ok(ObjectiveBreakdown::from_parts(
        overlap(&state, target),
        guard.sum,
        model.essential(),
    ))
}

/// Full evaluation with trajectory diagnostics.
pub fn evaluate_objective(
    model: &QuditModel,
    params: &ControlParameterization,
    grid: &TimeGrid,
    target: &TargetGate,
    opts: &EvalOptions,
) -> Result<(ObjectiveBreakdown, Diagnostics)> {
    check_compatible(model, params, grid, target)?;
    let levels = model.levels();
    let mut prop = Propagator::new(model, *grid);
    let mut guard = GuardAccumulator::new(model.guard_weights(), grid);
    let mut diag = Diagnostics {
        level_population_max: vec![0.0; levels],
        ..Default::default()
    };
    let stride = (grid.steps() / opts.trace_cap.max(1)).max(1);
    let weights = model.guard_weights();

    let mut state = prop.initial_state();
    let record = |state: &State, t: f64, diag: &mut Diagnostics, sampled: bool| {
        for level in 0..levels {
            let m = state.max_level_population(level);
            if m > diag.level_population_max[level] {
                diag.level_population_max[level] = m;
            }
        }
        diag.norm_error_max = diag.norm_error_max.max(state.max_norm_error());
        if sampled {
            if opts.guard_trace {
                diag.guard_trace.push((t, state.weighted_population(weights)));
            }
            if opts.population_trace {
                let mut row = Vec::with_capacity(levels * state.columns());
                for level in 0..levels {
                    for col in 0..state.columns() {
                        row.push(state.population(level, col));
                    }
                }
                diag.population_trace.push((t, row));
            }
        }
    };

    record(&state, 0.0, &mut diag, true);
    for n in 0..grid.steps() {
        prop.step_forward_visited(params, &mut state, n, |stages, _| guard.visit(stages))?;
        let sampled = (n + 1) % stride == 0 || n + 1 == grid.steps();
        record(&state, grid.time(n + 1), &mut diag, sampled);
    }
    diag.forbidden_population_max = diag.level_population_max[levels - 1];

    Ok((
        ObjectiveBreakdown::from_parts(overlap(&state, target), guard.sum, model.essential()),
        diag,
    ))
}
