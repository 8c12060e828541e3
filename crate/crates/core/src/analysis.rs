//! Verification and diagnostic tools that sit beside the optimizer: gradient
//! cross-checks by two independent routes, a Hessian probe with a Jacobi
//! eigensolver, and a pulse spectrum built on a hand-rolled radix-2 FFT.
//!
//! The gradient checks deliberately avoid the adjoint machinery. The
//! finite-difference route only ever evaluates the objective; the forward
//! sensitivity route linearizes each forward step and marches one tangent
//! system per parameter, sharing the two stage factorizations of the base
//! trajectory across all tangents, so a full gradient costs about `D + 1`
//! propagations.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2};
use num_complex::Complex64;

use crate::controls::ControlParameterization;
use crate::error::{Error, Result};
use crate::integrator::{Propagator, State, TimeGrid};
use crate::linalg::{shifted_identity, Lu};
use crate::model::{Hamiltonian, QuditModel, TargetGate};
use crate::objective::{check_compatible, overlap, GuardAccumulator, ObjectiveBreakdown};
use crate::adjoint::GradientEngine;

/// Central-difference gradient of the total objective; the slow, assumption-free
/// reference the analytic routes are judged against.
pub fn fd_gradient(
    model: &QuditModel,
    params: &ControlParameterization,
    grid: &TimeGrid,
    target: &TargetGate,
    eps: f64,
) -> Result<Array1<f64>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidOptimizer(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut engine = GradientEngine::new(model, *grid, target.clone())?;
    let mut work = params.clone();
    let mut alpha = params.alpha().clone();
    let mut grad = Array1::zeros(params.dim());
    for r in 0..params.dim() {
        let base = alpha[r];
        alpha[r] = base + eps;
        work.set_alpha(&alpha)?;
        let plus = engine.objective(&work)?.total;
        alpha[r] = base - eps;
        work.set_alpha(&alpha)?;
        let minus = engine.objective(&work)?.total;
        alpha[r] = base;
        grad[r] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

fn axpy(dst: &mut Array2<f64>, c: f64, src: &Array2<f64>) {
    if c != 0.0 {
        dst.zip_mut_with(src, |d, &s| *d += c * s);
    }
}

fn weighted_dot(weights: &Array1<f64>, a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut sum = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if w != 0.0 {
            for j in 0..a.ncols() {
                sum += w * a[[i, j]] * b[[i, j]];
            }
        }
    }
    sum
}

/// Gradient by forward sensitivities: differentiate each stage equation with
/// respect to every control parameter and march the tangent pairs alongside
/// the base trajectory.
///
/// The tangents see the same implicit stage matrices as the base step, so the
/// two factorizations per step are shared across all `D` tangent solves. The
/// guard penalty accumulates `(h/T) (<W u, du> + <W u', du'> + 2 <W v1, dv1>)`
/// per step and the infidelity closes the chain rule through the final-state
/// overlap.
pub fn forward_sensitivity_gradient(
    model: &QuditModel,
    params: &ControlParameterization,
    grid: &TimeGrid,
    target: &TargetGate,
) -> Result<(ObjectiveBreakdown, Array1<f64>)> {
    check_compatible(model, params, grid, target)?;
    let n_dim = model.levels();
    let cols = model.essential();
    let dim = params.dim();
    let h = grid.h();
    let h2 = 0.5 * h;
    let weights = model.guard_weights().clone();
    let ham = Hamiltonian::new(model);

    let mut prop = Propagator::new(model, *grid);
    let mut guard = GuardAccumulator::new(model.guard_weights(), grid);

    let zeros = || Array2::<f64>::zeros((n_dim, cols));
    let mut tan_u: Vec<Array2<f64>> = (0..dim).map(|_| zeros()).collect();
    let mut tan_v: Vec<Array2<f64>> = (0..dim).map(|_| zeros()).collect();

    // Scratch shared across tangents and steps.
    let mut lhs = Array2::<f64>::zeros((n_dim, n_dim));
    let mut lu_mid = Lu::new(n_dim);
    let mut lu_end = Lu::new(n_dim);
    let mut rhs = zeros();
    let mut dv1 = zeros();
    let mut du_next = zeros();
    let mut dv_next = zeros();
    let (mut ap_u0, mut am_u0) = (zeros(), zeros());
    let (mut ap_v1, mut am_v1) = (zeros(), zeros());
    let (mut ap_u1, mut am_u1) = (zeros(), zeros());
    // Dense per-step control derivatives at the three stage times.
    let mut dp0 = vec![0.0; dim];
    let mut dq0 = vec![0.0; dim];
    let mut dph = vec![0.0; dim];
    let mut dqh = vec![0.0; dim];
    let mut dp1 = vec![0.0; dim];
    let mut dq1 = vec![0.0; dim];

    let mut guard_grad = Array1::<f64>::zeros(dim);
    let mut state = prop.initial_state();
    let mut sweep: Result<()> = Ok(());

    prop.propagate_state_with(params, &mut state, |n, st, mats| {
        guard.visit(st);
        if sweep.is_err() {
            return;
        }
        sweep = (|| {
            shifted_identity(&mut lhs, mats.sh, -h2);
            lu_mid.factor(&lhs)?;
            shifted_identity(&mut lhs, mats.s1, -h2);
            lu_end.factor(&lhs)?;

            ham.ladder_plus_apply(st.u_start.view(), ap_u0.view_mut());
            ham.ladder_minus_apply(st.u_start.view(), am_u0.view_mut());
            ham.ladder_plus_apply(st.v_mid.view(), ap_v1.view_mut());
            ham.ladder_minus_apply(st.v_mid.view(), am_v1.view_mut());
            ham.ladder_plus_apply(st.u_end.view(), ap_u1.view_mut());
            ham.ladder_minus_apply(st.u_end.view(), am_u1.view_mut());

            for buf in [&mut dp0, &mut dq0, &mut dph, &mut dqh, &mut dp1, &mut dq1] {
                buf.iter_mut().for_each(|x| *x = 0.0);
            }
            params.for_each_active_param(grid.time(n), |r, dp, dq| {
                dp0[r] = dp;
                dq0[r] = dq;
            })?;
            params.for_each_active_param(grid.midpoint(n), |r, dp, dq| {
                dph[r] = dp;
                dqh[r] = dq;
            })?;
            params.for_each_active_param(grid.time(n + 1), |r, dp, dq| {
                dp1[r] = dp;
                dq1[r] = dq;
            })?;

            for r in 0..dim {
                // d(stage 1): (I - h/2 S_mid) dV1
                //   = dv + h/2 K_mid du + h/2 (dp_mid A+ u + dq_mid A- V1)
                rhs.assign(&tan_v[r]);
                general_mat_mul(h2, mats.kh, &tan_u[r], 1.0, &mut rhs);
                axpy(&mut rhs, h2 * dph[r], &ap_u0);
                axpy(&mut rhs, h2 * dqh[r], &am_v1);
                dv1.assign(&rhs);
                lu_mid.solve_into(dv1.view_mut());

                // d(stage 2): (I - h/2 S_end) du'
                //   = du + h/2 S_beg du - h/2 (K_beg + K_end) dV1
                //   + h/2 (dq_beg A- u + dq_end A- u' - (dp_beg + dp_end) A+ V1)
                rhs.assign(&tan_u[r]);
                general_mat_mul(h2, mats.s0, &tan_u[r], 1.0, &mut rhs);
                general_mat_mul(-h2, mats.ksum, &dv1, 1.0, &mut rhs);
                axpy(&mut rhs, h2 * dq0[r], &am_u0);
                axpy(&mut rhs, h2 * dq1[r], &am_u1);
                axpy(&mut rhs, -h2 * (dp0[r] + dp1[r]), &ap_v1);
                du_next.assign(&rhs);
                lu_end.solve_into(du_next.view_mut());

                // d(stage 3): dv' = dv + h/2 K_mid (du + du') + h S_mid dV1
                //   + h/2 dp_mid A+ (u + u') + h dq_mid A- V1
                dv_next.assign(&tan_v[r]);
                general_mat_mul(h2, mats.kh, &tan_u[r], 1.0, &mut dv_next);
                general_mat_mul(h2, mats.kh, &du_next, 1.0, &mut dv_next);
                general_mat_mul(h, mats.sh, &dv1, 1.0, &mut dv_next);
                axpy(&mut dv_next, h2 * dph[r], &ap_u0);
                axpy(&mut dv_next, h2 * dph[r], &ap_u1);
                axpy(&mut dv_next, h * dqh[r], &am_v1);

                guard_grad[r] += guard.factor()
                    * (weighted_dot(&weights, &tan_u[r], st.u_start)
                        + weighted_dot(&weights, &du_next, st.u_end)
                        + 2.0 * weighted_dot(&weights, &dv1, st.v_mid));

                tan_u[r].assign(&du_next);
                tan_v[r].assign(&dv_next);
            }
            Ok(())
        })();
    })?;
    sweep?;

    let breakdown =
        ObjectiveBreakdown::from_parts(overlap(&state, target), guard.sum, model.essential());
    let s = breakdown.overlap();
    let scale = 2.0 / (model.essential() as f64).powi(2);
    let mut grad = guard_grad;
    for r in 0..dim {
        let tangent = State {
            u: tan_u[r].clone(),
            v: tan_v[r].clone(),
        };
        let ds = overlap(&tangent, target);
        grad[r] -= scale * (s.re * ds.re + s.im * ds.im);
    }
    Ok((breakdown, grad))
}

/// Finite-difference probe of the Hessian: column `k` is the central
/// difference of the (adjoint) gradient along coordinate `k`. An exact
/// gradient makes the probe symmetric up to truncation, so the split into
/// symmetric and antisymmetric parts measures gradient consistency.
pub struct HessianProbe {
    pub columns: Array2<f64>,
    pub symmetric: Array2<f64>,
    pub antisymmetric: Array2<f64>,
}

impl HessianProbe {
    /// Splits a full column matrix into its symmetric and antisymmetric
    /// parts. Columns from disjoint probes (e.g. computed concurrently) can
    /// be assembled into the square matrix first.
    pub fn from_columns(columns: Array2<f64>) -> Result<Self> {
        let dim = columns.nrows();
        if columns.ncols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "probe needs a square column matrix, got {}x{}",
                dim,
                columns.ncols()
            )));
        }
        let mut symmetric = Array2::zeros((dim, dim));
        let mut antisymmetric = Array2::zeros((dim, dim));
        for i in 0..dim {
            for j in 0..dim {
                symmetric[[i, j]] = 0.5 * (columns[[i, j]] + columns[[j, i]]);
                antisymmetric[[i, j]] = 0.5 * (columns[[i, j]] - columns[[j, i]]);
            }
        }
        Ok(Self {
            columns,
            symmetric,
            antisymmetric,
        })
    }

    /// Frobenius-norm ratio of the antisymmetric to the symmetric part.
    pub fn asymmetry_ratio(&self) -> f64 {
        let denom = frobenius_norm(self.symmetric.view());
        if denom == 0.0 {
            0.0
        } else {
            frobenius_norm(self.antisymmetric.view()) / denom
        }
    }
}

/// Central-difference gradient columns for the listed coordinates, as a
/// `dim x columns.len()` matrix in the given order. Independent across
/// coordinates, so callers may shard the index set.
pub fn hessian_probe_columns(
    model: &QuditModel,
    params: &ControlParameterization,
    grid: &TimeGrid,
    target: &TargetGate,
    eps: f64,
    columns: &[usize],
) -> Result<Array2<f64>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidOptimizer(format!(
            "Hessian probe step must be positive, got {eps}"
        )));
    }
    let dim = params.dim();
    let mut engine = GradientEngine::new(model, *grid, target.clone())?;
    let mut work = params.clone();
    let mut alpha = params.alpha().clone();
    let mut out = Array2::zeros((dim, columns.len()));
    for (slot, &k) in columns.iter().enumerate() {
        if k >= dim {
            return Err(Error::ParameterIndex { index: k, dim });
        }
        let base = alpha[k];
        alpha[k] = base + eps;
        work.set_alpha(&alpha)?;
        let (_, plus) = engine.evaluate(&work)?;
        alpha[k] = base - eps;
        work.set_alpha(&alpha)?;
        let (_, minus) = engine.evaluate(&work)?;
        alpha[k] = base;
        for r in 0..dim {
            out[[r, slot]] = (plus[r] - minus[r]) / (2.0 * eps);
        }
    }
    Ok(out)
}

pub fn hessian_probe(
    model: &QuditModel,
    params: &ControlParameterization,
    grid: &TimeGrid,
    target: &TargetGate,
    eps: f64,
) -> Result<HessianProbe> {
    let all: Vec<usize> = (0..params.dim()).collect();
    let columns = hessian_probe_columns(model, params, grid, target, eps, &all)?;
    HessianProbe::from_columns(columns)
}

pub fn frobenius_norm(m: ArrayView2<'_, f64>) -> f64 {
    m.iter().map(|&v| v * v).sum::<f64>().sqrt()
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Sweeps until the off-diagonal Frobenius norm falls below `1e-10` times the
/// matrix norm. Returns eigenvalues in descending order with the matching
/// eigenvector columns, satisfying `A V = V diag(lambda)` and `V^T V = I` to
/// roundoff.
pub fn symmetric_eigenvalues(matrix: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "eigensolver needs a square matrix, got {}x{}",
            n,
            matrix.ncols()
        )));
    }
    let mut a = matrix.clone();
    let mut vecs = Array2::<f64>::eye(n);
    let scale = frobenius_norm(matrix.view());
    let tol = 1e-10 * scale;
    let off = |a: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[[i, j]] * a[[i, j]];
                }
            }
        }
        s.sqrt()
    };

    const MAX_SWEEPS: usize = 64;
    let mut converged = n < 2 || off(&a) <= tol;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let (aip, aiq) = (a[[i, p]], a[[i, q]]);
                    a[[i, p]] = c * aip - s * aiq;
                    a[[i, q]] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let (api, aqi) = (a[[p, i]], a[[q, i]]);
                    a[[p, i]] = c * api - s * aqi;
                    a[[q, i]] = s * api + c * aqi;
                }
                for i in 0..n {
                    let (vip, viq) = (vecs[[i, p]], vecs[[i, q]]);
                    vecs[[i, p]] = c * vip - s * viq;
                    vecs[[i, q]] = s * vip + c * viq;
                }
            }
        }
        converged = off(&a) <= tol;
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: "Jacobi eigensolver".into(),
            iterations: MAX_SWEEPS,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).unwrap());
    let values = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut sorted_vecs = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..n {
            sorted_vecs[[i, dst]] = vecs[[i, src]];
        }
    }
    Ok((values, sorted_vecs))
}

/// In-place forward DFT, radix-2 decimation in time. Twiddles come from the
/// exact angle of each butterfly rather than a running recurrence, so no
/// phase drift accumulates at long lengths.
pub fn fft_radix2(data: &mut [Complex64]) -> Result<()> {
    let n = data.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::FftLength(n));
    }
    if n == 1 {
        return Ok(());
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            data.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = -std::f64::consts::TAU / len as f64;
        for k in 0..half {
            let (sin, cos) = (step * k as f64).sin_cos();
            let w = Complex64::new(cos, sin);
            let mut i = k;
            while i < n {
                let a = data[i];
                let b = data[i + half] * w;
                data[i] = a + b;
                data[i + half] = a - b;
                i += len;
            }
        }
        len *= 2;
    }
    Ok(())
}

/// In-place inverse DFT, normalized by `1/n`.
pub fn inverse_fft_radix2(data: &mut [Complex64]) -> Result<()> {
    for z in data.iter_mut() {
        *z = z.conj();
    }
    fft_radix2(data)?;
    let scale = 1.0 / data.len() as f64;
    for z in data.iter_mut() {
        *z = z.conj() * scale;
    }
    Ok(())
}

/// Single-sided magnitude spectrum of the lab-frame drive.
#[derive(Debug, Clone)]
pub struct Spectrum {
    /// Bin frequencies in GHz (= cycles/ns): bin `b` sits at `b / T`.
    pub frequencies: Vec<f64>,
    /// Magnitudes scaled so an on-bin cosine of amplitude `A` reads `A`.
    pub amplitudes: Vec<f64>,
}

/// Samples `2 p(t) cos(wa t) - 2 q(t) sin(wa t)` on `samples` uniform points
/// and returns the single-sided spectrum. `samples` must be a power of two
/// and large enough that the Nyquist frequency `samples / 2T` clears the
/// carrier band.
pub fn pulse_spectrum(
    params: &ControlParameterization,
    omega_a: f64,
    samples: usize,
) -> Result<Spectrum> {
    if samples == 0 || !samples.is_power_of_two() {
        return Err(Error::FftLength(samples));
    }
    let duration = params.duration();
    let dt = duration / samples as f64;
    let mut data = Vec::with_capacity(samples);
    for i in 0..samples {
        data.push(Complex64::new(params.lab_frame(i as f64 * dt, omega_a)?, 0.0));
    }
    fft_radix2(&mut data)?;
    let half = samples / 2;
    let mut frequencies = Vec::with_capacity(half);
    let mut amplitudes = Vec::with_capacity(half);
    for (b, z) in data.iter().take(half).enumerate() {
        frequencies.push(b as f64 / duration);
        let norm = if b == 0 { 1.0 } else { 2.0 };
        amplitudes.push(norm * z.norm() / samples as f64);
    }
    Ok(Spectrum {
        frequencies,
        amplitudes,
    })
}

/// Local spectral maxima above `threshold` times the global maximum, with
/// non-maximum suppression inside `min_separation_bins`. Returned as
/// `(frequency, amplitude)` pairs, strongest first.
pub fn dominant_peaks(
    spectrum: &Spectrum,
    threshold: f64,
    min_separation_bins: usize,
) -> Vec<(f64, f64)> {
    let amps = &spectrum.amplitudes;
    let peak = amps.iter().copied().fold(0.0, f64::max);
    let cut = threshold * peak;
    let mut candidates: Vec<usize> = (0..amps.len())
        .filter(|&b| {
            amps[b] >= cut
                && amps[b] > 0.0
                && (b == 0 || amps[b] >= amps[b - 1])
                && (b + 1 == amps.len() || amps[b] > amps[b + 1])
        })
        .collect();
    candidates.sort_by(|&i, &j| amps[j].partial_cmp(&amps[i]).unwrap());
    let mut picked: Vec<usize> = Vec::new();
    for b in candidates {
        if picked.iter().all(|&p| p.abs_diff(b) > min_separation_bins) {
            picked.push(b);
        }
    }
    picked
        .into_iter()
        .map(|b| (spectrum.frequencies[b], amps[b]))
        .collect()
}
