//! Partitioned Stormer-Verlet propagation of the real split
//! udot = S u - K v, vdot = K u + S v.
//!
//! One step of size h from (u, v) at t_n, with matrices evaluated at t_n,
//! t_n + h/2 and t_n + h, runs through four stages:
//!
//! ```text
//! U1 = u
//! (I - h/2 S_mid) V1 = v + h/2 K_mid U1,           V2 = V1
//! (I - h/2 S_end) U2 = u + h/2 (S_beg U1 - K_beg V1 - K_end V2)
//! u' = U2
//! v' = v + h/2 (K_mid (U1 + U2) + S_mid (V1 + V2))
//! ```
//!
//! The implicit matrices I -+ h/2 S are shifted antisymmetric, hence always
//! invertible; each is LU-factored fresh every step. The scheme is second
//! order, time-reversible, and [`Propagator::step_reverse`] is its exact
//! algebraic inverse, which is what makes storage-free adjoint sweeps
//! possible. All columns of u, v advance together through the same
//! factorizations.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2};

use crate::controls::ControlParameterization;
use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::model::{Hamiltonian, QuditModel};

/// Uniform time grid with `steps` intervals on `[0, duration]`.
///
/// `steps == 0` is the degenerate diagnostic grid: propagation returns the
/// initial data untouched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    duration: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(duration: f64, steps: usize) -> Result<Self> {
        if !duration.is_finite() || duration < 0.0 {
            return Err(Error::InvalidGrid(format!(
                "duration must be finite and nonnegative, got {duration}"
            )));
        }
        if duration == 0.0 && steps > 0 {
            return Err(Error::InvalidGrid(
                "zero duration requires zero steps".into(),
            ));
        }
        Ok(Self { duration, steps })
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn h(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.duration / self.steps as f64
        }
    }

    /// Node time t_n; the final node is exactly `duration`.
    pub fn time(&self, n: usize) -> f64 {
        debug_assert!(n <= self.steps);
        if n == self.steps {
            self.duration
        } else {
            n as f64 * self.h()
        }
    }

    /// Interval midpoint t_n + h/2.
    pub fn midpoint(&self, n: usize) -> f64 {
        debug_assert!(n < self.steps);
        (n as f64 + 0.5) * self.h()
    }
}

/// Worst-case spectral radius of H over the pulse: a Gershgorin bound on the
/// two-photon diagonal plus the drive contribution at envelope bounds
/// (p_inf, q_inf).
pub fn spectral_radius_bound(model: &QuditModel, p_inf: f64, q_inf: f64) -> f64 {
    let n = model.levels() as f64;
    0.5 * model.anharmonicity().abs() * (n - 1.0) * (n - 2.0)
        + (p_inf + q_inf) * (n - 1.0).sqrt()
}

/// Largest rotating-frame detuning across the essential levels: (E-1)|xi|.
pub fn detuning_bound(model: &QuditModel) -> f64 {
    (model.essential() as f64 - 1.0) * model.anharmonicity().abs()
}

/// Picks the number of steps so the fastest bounded frequency is resolved
/// with `points_per_period` samples: h <= 2 pi / (P * max(rho, delta)),
/// then rounds M = ceil(duration / h) and returns h = duration / M.
pub fn estimate_timestep(
    model: &QuditModel,
    p_inf: f64,
    q_inf: f64,
    points_per_period: f64,
    duration: f64,
) -> Result<TimeGrid> {
    if !(points_per_period > 2.0) {
        return Err(Error::InvalidGrid(format!(
            "points per period must exceed 2 for stability, got {points_per_period}"
        )));
    }
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::InvalidGrid(format!(
            "duration must be positive, got {duration}"
        )));
    }
    if !(p_inf >= 0.0) || !(q_inf >= 0.0) {
        return Err(Error::InvalidGrid(
            "envelope bounds must be nonnegative".into(),
        ));
    }
    let scale = spectral_radius_bound(model, p_inf, q_inf).max(detuning_bound(model));
    if !(scale > 0.0) {
        return Err(Error::InvalidGrid(
            "model has no frequency scale to resolve (zero anharmonicity and drive)".into(),
        ));
    }
    let h = std::f64::consts::TAU / (points_per_period * scale);
    let steps = (duration / h).ceil() as usize;
    TimeGrid::new(duration, steps.max(1))
}

/// Real split state: u = Re psi, v = -Im psi, one column per initial
/// condition.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

impl State {
    /// Canonical initial data: the first `essential` basis columns.
    pub fn canonical(levels: usize, essential: usize) -> Self {
        let mut u = Array2::zeros((levels, essential));
        for j in 0..essential {
            u[[j, j]] = 1.0;
        }
        Self { u, v: Array2::zeros((levels, essential)) }
    }

    pub fn levels(&self) -> usize {
        self.u.nrows()
    }

    pub fn columns(&self) -> usize {
        self.u.ncols()
    }

    /// ||u_j||^2 + ||v_j||^2 for column j.
    pub fn norm_sq(&self, col: usize) -> f64 {
        let mut s = 0.0;
        for i in 0..self.levels() {
            s += self.u[[i, col]] * self.u[[i, col]] + self.v[[i, col]] * self.v[[i, col]];
        }
        s
    }

    /// Largest deviation of any column norm from one.
    pub fn max_norm_error(&self) -> f64 {
        (0..self.columns())
            .map(|j| (self.norm_sq(j) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Occupation |psi_{level,col}|^2.
    pub fn population(&self, level: usize, col: usize) -> f64 {
        self.u[[level, col]] * self.u[[level, col]] + self.v[[level, col]] * self.v[[level, col]]
    }

    /// Largest occupation of `level` over all columns.
    pub fn max_level_population(&self, level: usize) -> f64 {
        (0..self.columns())
            .map(|j| self.population(level, j))
            .fold(0.0, f64::max)
    }

    /// Weighted occupation sum_j <psi_j, W psi_j> for diagonal weights.
    pub fn weighted_population(&self, weights: &Array1<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..self.levels() {
            let w = weights[i];
            if w != 0.0 {
                for j in 0..self.columns() {
                    s += w * self.population(i, j);
                }
            }
        }
        s
    }
}

/// Read-only view of the internal stages of one completed step.
///
/// `u_start` and `u_end` are the node values u_n and u_{n+1} (the first and
/// last stages coincide with them); `v_mid` is the shared value of the two
/// interior v-stages; `v_start` is v_n.
#[derive(Clone, Copy)]
pub struct StageView<'a> {
    pub u_start: &'a Array2<f64>,
    pub v_start: &'a Array2<f64>,
    pub v_mid: &'a Array2<f64>,
    pub u_end: &'a Array2<f64>,
}

/// Views of the matrices assembled by the most recent step: K, S at the step
/// start, midpoint, and end, plus the precombined K sum k0 + k1.
#[derive(Clone, Copy)]
pub struct Assembled<'a> {
    pub k0: &'a Array2<f64>,
    pub s0: &'a Array2<f64>,
    pub kh: &'a Array2<f64>,
    pub sh: &'a Array2<f64>,
    pub k1: &'a Array2<f64>,
    pub s1: &'a Array2<f64>,
    pub ksum: &'a Array2<f64>,
}

struct Workspace {
    k0: Array2<f64>,
    s0: Array2<f64>,
    kh: Array2<f64>,
    sh: Array2<f64>,
    k1: Array2<f64>,
    s1: Array2<f64>,
    ksum: Array2<f64>,
    lhs: Array2<f64>,
    rhs: Array2<f64>,
    v1: Array2<f64>,
    u_next: Array2<f64>,
    v_next: Array2<f64>,
    usum: Array2<f64>,
}

impl Workspace {
    fn new(n: usize, cols: usize) -> Self {
        Self {
            k0: Array2::zeros((n, n)),
            s0: Array2::zeros((n, n)),
            kh: Array2::zeros((n, n)),
            sh: Array2::zeros((n, n)),
            k1: Array2::zeros((n, n)),
            s1: Array2::zeros((n, n)),
            ksum: Array2::zeros((n, n)),
            lhs: Array2::zeros((n, n)),
            rhs: Array2::zeros((n, cols)),
            v1: Array2::zeros((n, cols)),
            u_next: Array2::zeros((n, cols)),
            v_next: Array2::zeros((n, cols)),
            usum: Array2::zeros((n, cols)),
        }
    }
}

/// Steps states of one model forward and backward on a fixed grid, reusing
/// all scratch storage across steps.
pub struct Propagator {
    ham: Hamiltonian,
    grid: TimeGrid,
    levels: usize,
    essential: usize,
    ws: Workspace,
    lu: Lu,
}

impl Propagator {
    pub fn new(model: &QuditModel, grid: TimeGrid) -> Self {
        let n = model.levels();
        Self {
            ham: Hamiltonian::new(model),
            grid,
            levels: n,
            essential: model.essential(),
            ws: Workspace::new(n, model.essential()),
            lu: Lu::new(n),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hamiltonian(&self) -> &Hamiltonian {
        &self.ham
    }

    pub fn initial_state(&self) -> State {
        State::canonical(self.levels, self.essential)
    }

    /// Matrices assembled by the most recent forward or reverse step.
    pub fn assembled(&self) -> Assembled<'_> {
        Assembled {
            k0: &self.ws.k0,
            s0: &self.ws.s0,
            kh: &self.ws.kh,
            sh: &self.ws.sh,
            k1: &self.ws.k1,
            s1: &self.ws.s1,
            ksum: &self.ws.ksum,
        }
    }

    fn assemble_step(&mut self, params: &ControlParameterization, n: usize) -> Result<()> {
        let ws = &mut self.ws;
        self.ham
            .assemble_into(self.grid.time(n), params, ws.k0.view_mut(), ws.s0.view_mut())?;
        self.ham.assemble_into(
            self.grid.midpoint(n),
            params,
            ws.kh.view_mut(),
            ws.sh.view_mut(),
        )?;
        self.ham.assemble_into(
            self.grid.time(n + 1),
            params,
            ws.k1.view_mut(),
            ws.s1.view_mut(),
        )?;
        for (dst, (a, b)) in ws.ksum.iter_mut().zip(ws.k0.iter().zip(ws.k1.iter())) {
            *dst = a + b;
        }
        Ok(())
    }

    /// lhs = I + scale * s.
    fn build_shifted(lhs: &mut Array2<f64>, s: &Array2<f64>, scale: f64) {
        crate::linalg::shifted_identity(lhs, s, scale);
    }

    fn factor(&mut self, n: usize) -> Result<()> {
        self.lu.factor(&self.ws.lhs).map_err(|e| match e {
            Error::SingularMatrix { pivot } => Error::SingularStage { step: n, pivot },
            other => other,
        })
    }

    /// Advances `state` across step `n`, then hands the stage values to
    /// `visit` before committing.
    pub fn step_forward_visited(
        &mut self,
        params: &ControlParameterization,
        state: &mut State,
        n: usize,
        visit: impl FnOnce(StageView<'_>, Assembled<'_>),
    ) -> Result<()> {
        if n >= self.grid.steps() {
            return Err(Error::InvalidGrid(format!(
                "step {n} outside grid with {} steps",
                self.grid.steps()
            )));
        }
        let h2 = 0.5 * self.grid.h();
        self.assemble_step(params, n)?;

        // (I - h/2 S_mid) V1 = v + h/2 K_mid u
        self.ws.rhs.assign(&state.v);
        general_mat_mul(h2, &self.ws.kh, &state.u, 1.0, &mut self.ws.rhs);
        Self::build_shifted(&mut self.ws.lhs, &self.ws.sh, -h2);
        self.factor(n)?;
        self.ws.v1.assign(&self.ws.rhs);
        self.lu.solve_into(self.ws.v1.view_mut());

        // (I - h/2 S_end) U2 = u + h/2 (S_beg u - (K_beg + K_end) V1)
        self.ws.rhs.assign(&state.u);
        general_mat_mul(h2, &self.ws.s0, &state.u, 1.0, &mut self.ws.rhs);
        general_mat_mul(-h2, &self.ws.ksum, &self.ws.v1, 1.0, &mut self.ws.rhs);
        Self::build_shifted(&mut self.ws.lhs, &self.ws.s1, -h2);
        self.factor(n)?;
        self.ws.u_next.assign(&self.ws.rhs);
        self.lu.solve_into(self.ws.u_next.view_mut());

        // v' = v + h/2 K_mid (u + U2) + h S_mid V1
        for (dst, (a, b)) in self
            .ws
            .usum
            .iter_mut()
            .zip(state.u.iter().zip(self.ws.u_next.iter()))
        {
            *dst = a + b;
        }
        self.ws.v_next.assign(&state.v);
        general_mat_mul(h2, &self.ws.kh, &self.ws.usum, 1.0, &mut self.ws.v_next);
        general_mat_mul(2.0 * h2, &self.ws.sh, &self.ws.v1, 1.0, &mut self.ws.v_next);

        visit(
            StageView {
                u_start: &state.u,
                v_start: &state.v,
                v_mid: &self.ws.v1,
                u_end: &self.ws.u_next,
            },
            Assembled {
                k0: &self.ws.k0,
                s0: &self.ws.s0,
                kh: &self.ws.kh,
                sh: &self.ws.sh,
                k1: &self.ws.k1,
                s1: &self.ws.s1,
                ksum: &self.ws.ksum,
            },
        );

        std::mem::swap(&mut state.u, &mut self.ws.u_next);
        std::mem::swap(&mut state.v, &mut self.ws.v_next);
        Ok(())
    }

    pub fn step_forward(
        &mut self,
        params: &ControlParameterization,
        state: &mut State,
        n: usize,
    ) -> Result<()> {
        self.step_forward_visited(params, state, n, |_, _| {})
    }

    /// Exact algebraic inverse of [`Self::step_forward_visited`]: takes the
    /// state at node n+1 back to node n. The stage view it reports is
    /// identical to the one `step_forward` produced for step `n`.
    pub fn step_reverse_visited(
        &mut self,
        params: &ControlParameterization,
        state: &mut State,
        n: usize,
        visit: impl FnOnce(StageView<'_>, Assembled<'_>),
    ) -> Result<()> {
        if n >= self.grid.steps() {
            return Err(Error::InvalidGrid(format!(
                "step {n} outside grid with {} steps",
                self.grid.steps()
            )));
        }
        let h2 = 0.5 * self.grid.h();
        self.assemble_step(params, n)?;

        // (I + h/2 S_mid) V1 = v' - h/2 K_mid u'
        self.ws.rhs.assign(&state.v);
        general_mat_mul(-h2, &self.ws.kh, &state.u, 1.0, &mut self.ws.rhs);
        Self::build_shifted(&mut self.ws.lhs, &self.ws.sh, h2);
        self.factor(n)?;
        self.ws.v1.assign(&self.ws.rhs);
        self.lu.solve_into(self.ws.v1.view_mut());

        // (I + h/2 S_beg) u = (I - h/2 S_end) u' + h/2 (K_beg + K_end) V1
        self.ws.rhs.assign(&state.u);
        general_mat_mul(-h2, &self.ws.s1, &state.u, 1.0, &mut self.ws.rhs);
        general_mat_mul(h2, &self.ws.ksum, &self.ws.v1, 1.0, &mut self.ws.rhs);
        Self::build_shifted(&mut self.ws.lhs, &self.ws.s0, h2);
        self.factor(n)?;
        self.ws.u_next.assign(&self.ws.rhs);
        self.lu.solve_into(self.ws.u_next.view_mut());

        // v = V1 - h/2 (K_mid u + S_mid V1)
        self.ws.v_next.assign(&self.ws.v1);
        general_mat_mul(-h2, &self.ws.kh, &self.ws.u_next, 1.0, &mut self.ws.v_next);
        general_mat_mul(-h2, &self.ws.sh, &self.ws.v1, 1.0, &mut self.ws.v_next);

        visit(
            StageView {
                u_start: &self.ws.u_next,
                v_start: &self.ws.v_next,
                v_mid: &self.ws.v1,
                u_end: &state.u,
            },
            Assembled {
                k0: &self.ws.k0,
                s0: &self.ws.s0,
                kh: &self.ws.kh,
                sh: &self.ws.sh,
                k1: &self.ws.k1,
                s1: &self.ws.s1,
                ksum: &self.ws.ksum,
            },
        );

        std::mem::swap(&mut state.u, &mut self.ws.u_next);
        std::mem::swap(&mut state.v, &mut self.ws.v_next);
        Ok(())
    }

    pub fn step_reverse(
        &mut self,
        params: &ControlParameterization,
        state: &mut State,
        n: usize,
    ) -> Result<()> {
        self.step_reverse_visited(params, state, n, |_, _| {})
    }

    /// Marches `state` across the whole grid, visiting every step.
    pub fn propagate_state_with(
        &mut self,
        params: &ControlParameterization,
        state: &mut State,
        mut visit: impl FnMut(usize, StageView<'_>, Assembled<'_>),
    ) -> Result<()> {
        for n in 0..self.grid.steps() {
            self.step_forward_visited(params, state, n, |stages, mats| visit(n, stages, mats))?;
        }
        Ok(())
    }

    /// Propagates the canonical initial data across the whole grid.
    pub fn propagate_with(
        &mut self,
        params: &ControlParameterization,
        visit: impl FnMut(usize, StageView<'_>, Assembled<'_>),
    ) -> Result<State> {
        let mut state = self.initial_state();
        self.propagate_state_with(params, &mut state, visit)?;
        Ok(state)
    }

    pub fn propagate(&mut self, params: &ControlParameterization) -> Result<State> {
        self.propagate_with(params, |_, _, _| {})
    }
}
