//! Control parameterization: quadratic B-spline envelopes modulated by carrier
//! tones.
//!
//! The rotating-frame controls are
//!
//! ```text
//! p(t) = sum_l sum_k B_k(t) [ a1_{lk} cos(W_l t) - a2_{lk} sin(W_l t) ]
//! q(t) = sum_l sum_k B_k(t) [ a1_{lk} sin(W_l t) + a2_{lk} cos(W_l t) ]
//! ```
//!
//! with `D1` spline envelopes per carrier and `N_f` carriers, for a parameter
//! vector of dimension `D = 2 * N_f * D1`. The layout is carrier-major:
//! `alpha[2*(l*D1 + k) + c]` with component `c = 0` for the cosine coefficient
//! and `c = 1` for the sine coefficient. Both p and q are infinitely
//! differentiable in alpha (linear, in fact) and piecewise-smooth in t.

use ndarray::Array1;

use crate::error::{Error, Result};

/// Quadratic B-spline kernel on the normalized support [-1/2, 1/2).
///
/// Piecewise parabolic, C^1, peak value 3/4 at tau = 0, exactly zero at the
/// support boundary. Three polynomial pieces split at tau = +-1/6.
pub fn bspline_value(tau: f64) -> f64 {
    if !(-0.5..0.5).contains(&tau) {
        0.0
    } else if tau < -1.0 / 6.0 {
        9.0 / 8.0 + 4.5 * tau + 4.5 * tau * tau
    } else if tau < 1.0 / 6.0 {
        0.75 - 9.0 * tau * tau
    } else {
        9.0 / 8.0 - 4.5 * tau + 4.5 * tau * tau
    }
}

/// Uniform grid of `count` quadratic B-spline envelopes covering `[0, duration]`.
///
/// Knot spacing is `duration / (count - 2)` so the first and last splines are
/// centered half a knot outside the window; every interior time is covered by
/// exactly three active splines and the family sums to one on the whole window.
#[derive(Debug, Clone)]
pub struct SplineGrid {
    count: usize,
    duration: f64,
    spacing: f64,
}

/// Active splines at one time: at most three (index, value) pairs.
#[derive(Debug, Clone, Copy)]
pub struct ActiveSplines {
    items: [(usize, f64); 3],
    len: usize,
}

impl ActiveSplines {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.items[..self.len].iter().copied()
    }
}

impl SplineGrid {
    pub fn new(count: usize, duration: f64) -> Result<Self> {
        if count < 3 {
            return Err(Error::InvalidControls(format!(
                "need at least 3 spline envelopes, got {count}"
            )));
        }
        if !duration.is_finite() || duration <= 0.0 {
            return Err(Error::InvalidControls(format!(
                "pulse duration must be positive, got {duration}"
            )));
        }
        let spacing = duration / (count as f64 - 2.0);
        Ok(Self { count, duration, spacing })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Center of spline `k` (0-based): (k - 1/2) * spacing.
    pub fn center(&self, k: usize) -> f64 {
        (k as f64 - 0.5) * self.spacing
    }

    /// Value of spline `k` at time `t` (no range check; zero off support).
    pub fn value(&self, k: usize, t: f64) -> f64 {
        bspline_value((t - self.center(k)) / (3.0 * self.spacing))
    }

    /// The (at most three) splines whose support contains `t`.
    pub fn active(&self, t: f64) -> ActiveSplines {
        let base = (t / self.spacing).floor() as isize;
        let mut out = ActiveSplines { items: [(0, 0.0); 3], len: 0 };
        for k in base..base + 3 {
            if k >= 0 && (k as usize) < self.count {
                let k = k as usize;
                out.items[out.len] = (k, self.value(k, t));
                out.len += 1;
            }
        }
        out
    }
}

/// Carrier angular frequencies in rad/ns, one envelope family per carrier.
#[derive(Debug, Clone)]
pub struct CarrierSet {
    omega: Vec<f64>,
}

impl CarrierSet {
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        if omega.is_empty() {
            return Err(Error::InvalidControls(
                "at least one carrier frequency is required".into(),
            ));
        }
        for (i, w) in omega.iter().enumerate() {
            if !w.is_finite() {
                return Err(Error::InvalidControls(format!(
                    "carrier {i} is not finite"
                )));
            }
            if omega[..i].contains(w) {
                log::warn!("duplicate carrier frequency {w} rad/ns rejected");
                return Err(Error::InvalidControls(format!(
                    "duplicate carrier frequency {w} rad/ns"
                )));
            }
        }
        Ok(Self { omega })
    }

    pub fn count(&self) -> usize {
        self.omega.len()
    }

    pub fn omega(&self, l: usize) -> f64 {
        self.omega[l]
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.omega.iter().copied()
    }
}

/// Worst-case envelope bound: with every coefficient at `alpha_max`, both
/// |p| and |q| stay below sqrt(2) * N_f * alpha_max (three active splines
/// summing to one, and the two quadrature components adding in quadrature).
pub fn amplitude_bound(alpha_max: f64, carrier_count: usize) -> f64 {
    std::f64::consts::SQRT_2 * carrier_count as f64 * alpha_max
}

/// Per-coefficient box that splits an overall envelope budget equally across
/// carriers. The quadrature worst case (the sqrt(2) in [`amplitude_bound`])
/// is deliberately not folded in here: that factor matters for time-step
/// estimation, while the per-carrier budget is the convention the experiment
/// configurations are calibrated against.
pub fn alpha_bound_for_envelope(envelope_max: f64, carrier_count: usize) -> f64 {
    envelope_max / carrier_count as f64
}

/// B-spline control coefficients together with their grid and carriers.
#[derive(Debug, Clone)]
pub struct ControlParameterization {
    grid: SplineGrid,
    carriers: CarrierSet,
    alpha: Array1<f64>,
}

impl ControlParameterization {
    pub fn new(grid: SplineGrid, carriers: CarrierSet, alpha: Array1<f64>) -> Result<Self> {
        let dim = 2 * carriers.count() * grid.count();
        if alpha.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "alpha has length {}, expected 2 * {} carriers * {} splines = {dim}",
                alpha.len(),
                carriers.count(),
                grid.count()
            )));
        }
        Ok(Self { grid, carriers, alpha })
    }

    pub fn with_zero_alpha(grid: SplineGrid, carriers: CarrierSet) -> Self {
        let dim = 2 * carriers.count() * grid.count();
        Self { grid, carriers, alpha: Array1::zeros(dim) }
    }

    pub fn grid(&self) -> &SplineGrid {
        &self.grid
    }

    pub fn carriers(&self) -> &CarrierSet {
        &self.carriers
    }

    pub fn alpha(&self) -> &Array1<f64> {
        &self.alpha
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn duration(&self) -> f64 {
        self.grid.duration()
    }

    pub fn set_alpha(&mut self, alpha: &Array1<f64>) -> Result<()> {
        if alpha.len() != self.alpha.len() {
            return Err(Error::DimensionMismatch(format!(
                "alpha has length {}, expected {}",
                alpha.len(),
                self.alpha.len()
            )));
        }
        self.alpha.assign(alpha);
        Ok(())
    }

    /// Flat index of coefficient (carrier `l`, spline `k`, component `c`).
    pub fn param_index(&self, l: usize, k: usize, c: usize) -> usize {
        debug_assert!(l < self.carriers.count() && k < self.grid.count() && c < 2);
        2 * (l * self.grid.count() + k) + c
    }

    /// Inverse of [`Self::param_index`].
    pub fn param_coords(&self, index: usize) -> Result<(usize, usize, usize)> {
        if index >= self.dim() {
            return Err(Error::ParameterIndex { index, dim: self.dim() });
        }
        let d1 = self.grid.count();
        let c = index % 2;
        let k = (index / 2) % d1;
        let l = index / (2 * d1);
        Ok((l, k, c))
    }

    fn checked_time(&self, t: f64) -> Result<f64> {
        let duration = self.grid.duration();
        let tol = 1e-9 * duration.max(1.0);
        if !t.is_finite() || t < -tol || t > duration + tol {
            return Err(Error::TimeOutOfRange { t, duration });
        }
        Ok(t.clamp(0.0, duration))
    }

    /// Evaluates (p, q) at time `t` in [0, duration].
    pub fn eval(&self, t: f64) -> Result<(f64, f64)> {
        let t = self.checked_time(t)?;
        let active = self.grid.active(t);
        let d1 = self.grid.count();
        let mut p = 0.0;
        let mut q = 0.0;
        for (l, omega) in self.carriers.iter().enumerate() {
            let (sin, cos) = (omega * t).sin_cos();
            for (k, w) in active.iter() {
                let a1 = self.alpha[2 * (l * d1 + k)];
                let a2 = self.alpha[2 * (l * d1 + k) + 1];
                p += w * (a1 * cos - a2 * sin);
                q += w * (a1 * sin + a2 * cos);
            }
        }
        Ok((p, q))
    }

    /// Visits the nonzero entries of (dp/d alpha_r, dq/d alpha_r) at time `t`.
    ///
    /// At most `6 * N_f` parameters are active at any time; `visit` receives
    /// `(r, dp_r, dq_r)` for each. Both derivatives are independent of alpha.
    pub fn for_each_active_param(
        &self,
        t: f64,
        mut visit: impl FnMut(usize, f64, f64),
    ) -> Result<()> {
        let t = self.checked_time(t)?;
        let active = self.grid.active(t);
        let d1 = self.grid.count();
        for (l, omega) in self.carriers.iter().enumerate() {
            let (sin, cos) = (omega * t).sin_cos();
            for (k, w) in active.iter() {
                let r = 2 * (l * d1 + k);
                visit(r, w * cos, w * sin);
                visit(r + 1, -w * sin, w * cos);
            }
        }
        Ok(())
    }

    /// Dense (dp/d alpha, dq/d alpha) at time `t`, each of length `D`.
    pub fn control_gradient(&self, t: f64) -> Result<(Array1<f64>, Array1<f64>)> {
        let mut dp = Array1::zeros(self.dim());
        let mut dq = Array1::zeros(self.dim());
        self.for_each_active_param(t, |r, dp_r, dq_r| {
            dp[r] = dp_r;
            dq[r] = dq_r;
        })?;
        Ok((dp, dq))
    }

    /// Amplitude/phase form of one coefficient pair: `a1 cos - a2 sin`
    /// equals `beta cos(W t + theta)` with `beta = hypot(a1, a2)` and
    /// `theta = atan2(a2, a1)`.
    pub fn amplitude_phase(&self, l: usize, k: usize) -> (f64, f64) {
        let a1 = self.alpha[self.param_index(l, k, 0)];
        let a2 = self.alpha[self.param_index(l, k, 1)];
        (a1.hypot(a2), a2.atan2(a1))
    }

    /// Lab-frame drive 2 p(t) cos(wa t) - 2 q(t) sin(wa t).
    pub fn lab_frame(&self, t: f64, omega_a: f64) -> Result<f64> {
        let (p, q) = self.eval(t)?;
        let (sin, cos) = (omega_a * t).sin_cos();
        Ok(2.0 * p * cos - 2.0 * q * sin)
    }
}
