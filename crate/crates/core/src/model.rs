//! Qudit model in the rotating frame and the real-valued Hamiltonian split.
//!
//! With lowering operator `a`, self-Kerr coefficient `xi`, and controls
//! (p, q), the rotating-frame Hamiltonian is
//!
//! ```text
//! H(t) = -(xi/2) a'a'aa + p(t) (a + a') + i q(t) (a - a')
//! ```
//!
//! Writing the state as psi = u - i v, the Schrodinger equation becomes the
//! real pair udot = S u - K v, vdot = K u + S v with K = Re H (symmetric)
//! and S = Im H (antisymmetric):
//!
//! ```text
//! K = -(xi/2) diag(j(j-1)) + p(t) (a + a^T),    S = q(t) (a - a^T)
//! ```
//!
//! Angular frequencies are rad/ns throughout; time is ns.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2};
use num_complex::Complex64;

use crate::controls::ControlParameterization;
use crate::error::{Error, Result};

/// Converts a conventional frequency in GHz to rad/ns.
pub fn ghz_to_angular(f_ghz: f64) -> f64 {
    std::f64::consts::TAU * f_ghz
}

/// Converts a conventional frequency in MHz to rad/ns.
pub fn mhz_to_angular(f_mhz: f64) -> f64 {
    std::f64::consts::TAU * 1e-3 * f_mhz
}

/// Lowering operator on `n` levels: superdiagonal sqrt(1) .. sqrt(n-1).
pub fn lowering(n: usize) -> Array2<f64> {
    let mut a = Array2::zeros((n, n));
    for j in 0..n.saturating_sub(1) {
        a[[j, j + 1]] = ((j + 1) as f64).sqrt();
    }
    a
}

/// A single multi-level qudit: `essential` computational levels plus
/// `levels - essential` guard levels penalized by `guard_weights`.
#[derive(Debug, Clone)]
pub struct QuditModel {
    levels: usize,
    essential: usize,
    omega_a: f64,
    anharmonicity: f64,
    guard_weights: Array1<f64>,
}

impl QuditModel {
    /// `omega_a` and `anharmonicity` in rad/ns; `guard_weights` has one
    /// nonnegative entry per level and must vanish on the essential levels.
    pub fn new(
        levels: usize,
        essential: usize,
        omega_a: f64,
        anharmonicity: f64,
        guard_weights: Vec<f64>,
    ) -> Result<Self> {
        if levels < 2 {
            return Err(Error::InvalidModel(format!(
                "need at least 2 levels, got {levels}"
            )));
        }
        if essential < 2 || essential > levels {
            return Err(Error::InvalidModel(format!(
                "essential levels must satisfy 2 <= E <= {levels}, got {essential}"
            )));
        }
        if guard_weights.len() != levels {
            return Err(Error::InvalidModel(format!(
                "guard_weights has length {}, expected {levels}",
                guard_weights.len()
            )));
        }
        for (j, &w) in guard_weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidModel(format!(
                    "guard weight {w} at level {j} must be finite and nonnegative"
                )));
            }
            if j < essential && w != 0.0 {
                return Err(Error::InvalidModel(format!(
                    "guard weight at essential level {j} must be zero, got {w}"
                )));
            }
        }
        if !omega_a.is_finite() || !anharmonicity.is_finite() {
            return Err(Error::InvalidModel("frequencies must be finite".into()));
        }
        Ok(Self {
            levels,
            essential,
            omega_a,
            anharmonicity,
            guard_weights: Array1::from(guard_weights),
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn essential(&self) -> usize {
        self.essential
    }

    pub fn guard_count(&self) -> usize {
        self.levels - self.essential
    }

    pub fn omega_a(&self) -> f64 {
        self.omega_a
    }

    pub fn anharmonicity(&self) -> f64 {
        self.anharmonicity
    }

    pub fn guard_weights(&self) -> &Array1<f64> {
        &self.guard_weights
    }

    /// Lab-frame transition frequency of level k -> k+1 in rad/ns:
    /// omega_a - k * xi.
    pub fn transition_frequency(&self, k: usize) -> f64 {
        self.omega_a - k as f64 * self.anharmonicity
    }
}

/// Assembles K, S and their parameter derivatives for one model.
///
/// The tridiagonal structure is exploited only here; downstream consumers
/// treat both matrices as dense.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    drift: Array1<f64>,
    sq: Vec<f64>,
    a_plus: Array2<f64>,
    a_minus: Array2<f64>,
}

impl Hamiltonian {
    pub fn new(model: &QuditModel) -> Self {
        let n = model.levels();
        let xi = model.anharmonicity();
        let drift = Array1::from_shape_fn(n, |j| -0.5 * xi * (j * j.saturating_sub(1)) as f64);
        let sq: Vec<f64> = (0..=n).map(|j| (j as f64).sqrt()).collect();
        let a = lowering(n);
        let a_plus = &a + &a.t();
        let a_minus = &a - &a.t();
        Self { drift, sq, a_plus, a_minus }
    }

    pub fn dim(&self) -> usize {
        self.drift.len()
    }

    pub fn a_plus(&self) -> ArrayView2<'_, f64> {
        self.a_plus.view()
    }

    pub fn a_minus(&self) -> ArrayView2<'_, f64> {
        self.a_minus.view()
    }

    /// Writes K(t), S(t) for control values (p, q).
    pub fn assemble_from_pq(&self, p: f64, q: f64, mut k: ArrayViewMut2<'_, f64>, mut s: ArrayViewMut2<'_, f64>) {
        let n = self.dim();
        debug_assert_eq!(k.nrows(), n);
        debug_assert_eq!(s.nrows(), n);
        k.fill(0.0);
        s.fill(0.0);
        for j in 0..n {
            k[[j, j]] = self.drift[j];
        }
        for j in 0..n - 1 {
            let c = self.sq[j + 1];
            k[[j, j + 1]] = p * c;
            k[[j + 1, j]] = p * c;
            s[[j, j + 1]] = q * c;
            s[[j + 1, j]] = -q * c;
        }
    }

    /// Writes K(t), S(t) by evaluating the controls at `t`.
    pub fn assemble_into(
        &self,
        t: f64,
        params: &ControlParameterization,
        k: ArrayViewMut2<'_, f64>,
        s: ArrayViewMut2<'_, f64>,
    ) -> Result<()> {
        let (p, q) = params.eval(t)?;
        self.assemble_from_pq(p, q, k, s);
        Ok(())
    }

    pub fn assemble(&self, t: f64, params: &ControlParameterization) -> Result<(Array2<f64>, Array2<f64>)> {
        let n = self.dim();
        let mut k = Array2::zeros((n, n));
        let mut s = Array2::zeros((n, n));
        self.assemble_into(t, params, k.view_mut(), s.view_mut())?;
        Ok((k, s))
    }

    /// dK/d alpha_r and dS/d alpha_r at time `t`: the drift drops out and the
    /// result is (dp_r A+, dq_r A-), independent of alpha.
    pub fn assemble_derivative(
        &self,
        t: f64,
        params: &ControlParameterization,
        r: usize,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if r >= params.dim() {
            return Err(Error::ParameterIndex { index: r, dim: params.dim() });
        }
        let (dp, dq) = params.control_gradient(t)?;
        Ok((&self.a_plus * dp[r], &self.a_minus * dq[r]))
    }

    /// dst = (a + a^T) src, one column at a time in O(N E).
    pub fn ladder_plus_apply(&self, src: ArrayView2<'_, f64>, mut dst: ArrayViewMut2<'_, f64>) {
        let n = self.dim();
        debug_assert_eq!(src.nrows(), n);
        for col in 0..src.ncols() {
            for j in 0..n {
                let up = if j + 1 < n { self.sq[j + 1] * src[[j + 1, col]] } else { 0.0 };
                let down = if j > 0 { self.sq[j] * src[[j - 1, col]] } else { 0.0 };
                dst[[j, col]] = up + down;
            }
        }
    }

    /// dst = (a - a^T) src.
    pub fn ladder_minus_apply(&self, src: ArrayView2<'_, f64>, mut dst: ArrayViewMut2<'_, f64>) {
        let n = self.dim();
        debug_assert_eq!(src.nrows(), n);
        for col in 0..src.ncols() {
            for j in 0..n {
                let up = if j + 1 < n { self.sq[j + 1] * src[[j + 1, col]] } else { 0.0 };
                let down = if j > 0 { self.sq[j] * src[[j - 1, col]] } else { 0.0 };
                dst[[j, col]] = up - down;
            }
        }
    }
}

/// Target gate as real columns d_u = Re(V e_j), d_v = -Im(V e_j), zero-padded
/// onto the guard levels.
#[derive(Debug, Clone)]
pub struct TargetGate {
    d_u: Array2<f64>,
    d_v: Array2<f64>,
}

impl TargetGate {
    /// Builds the padded target from an essential-space unitary given as an
    /// E x E complex matrix. Unitarity is checked to 1e-12.
    pub fn from_essential_unitary(gate: &Array2<Complex64>, levels: usize) -> Result<Self> {
        let e = gate.nrows();
        if gate.ncols() != e {
            return Err(Error::InvalidTarget(format!(
                "gate must be square, got {}x{}",
                gate.nrows(),
                gate.ncols()
            )));
        }
        if e < 2 || e > levels {
            return Err(Error::InvalidTarget(format!(
                "gate dimension {e} incompatible with {levels} levels"
            )));
        }
        let mut max_dev: f64 = 0.0;
        for i in 0..e {
            for j in 0..e {
                let mut dot = Complex64::new(0.0, 0.0);
                for k in 0..e {
                    dot += gate[[k, i]].conj() * gate[[k, j]];
                }
                let expected = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((dot - expected).norm());
            }
        }
        if max_dev > 1e-12 {
            return Err(Error::InvalidTarget(format!(
                "gate is not unitary (deviation {max_dev:.3e})"
            )));
        }
        let mut d_u = Array2::zeros((levels, e));
        let mut d_v = Array2::zeros((levels, e));
        for i in 0..e {
            for j in 0..e {
                d_u[[i, j]] = gate[[i, j]].re;
                d_v[[i, j]] = -gate[[i, j]].im;
            }
        }
        Ok(Self { d_u, d_v })
    }

    /// Identity on the essential levels.
    pub fn identity(levels: usize, essential: usize) -> Result<Self> {
        let gate = Array2::from_shape_fn((essential, essential), |(i, j)| {
            Complex64::new(if i == j { 1.0 } else { 0.0 }, 0.0)
        });
        Self::from_essential_unitary(&gate, levels)
    }

    /// CNOT on a 4-dimensional essential space encoding two qubits in the
    /// lowest four levels.
    pub fn cnot(levels: usize) -> Result<Self> {
        let mut gate = Array2::from_elem((4, 4), Complex64::new(0.0, 0.0));
        for (row, col) in [(0, 0), (1, 1), (2, 3), (3, 2)] {
            gate[[row, col]] = Complex64::new(1.0, 0.0);
        }
        Self::from_essential_unitary(&gate, levels)
    }

    /// Swap of the lowest and highest essential levels, identity elsewhere.
    pub fn swap_ends(levels: usize, essential: usize) -> Result<Self> {
        let mut gate = Array2::from_elem((essential, essential), Complex64::new(0.0, 0.0));
        for j in 0..essential {
            let i = match j {
                0 => essential - 1,
                j if j == essential - 1 => 0,
                j => j,
            };
            gate[[i, j]] = Complex64::new(1.0, 0.0);
        }
        Self::from_essential_unitary(&gate, levels)
    }

    pub fn levels(&self) -> usize {
        self.d_u.nrows()
    }

    pub fn essential(&self) -> usize {
        self.d_u.ncols()
    }

    pub fn d_u(&self) -> ArrayView2<'_, f64> {
        self.d_u.view()
    }

    pub fn d_v(&self) -> ArrayView2<'_, f64> {
        self.d_v.view()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controls::{CarrierSet, ControlParameterization, SplineGrid};
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_params(alpha: Array1<f64>) -> ControlParameterization {
        ControlParameterization::new(
            SplineGrid::new(6, 10.0).unwrap(),
            CarrierSet::new(vec![0.0, -1.3]).unwrap(),
            alpha,
        )
        .unwrap()
    }

    fn test_model(n: usize, e: usize, xi: f64) -> QuditModel {
        let mut w = vec![0.0; n];
        for entry in w.iter_mut().skip(e) {
            *entry = 1.0;
        }
        QuditModel::new(n, e, 25.0, xi, w).unwrap()
    }

    #[test]
    fn lowering_matches_hand_values() {
        assert_eq!(lowering(2), array![[0.0, 1.0], [0.0, 0.0]]);
        let a3 = lowering(3);
        assert_eq!(a3[[0, 1]], 1.0);
        assert!((a3[[1, 2]] - 2.0f64.sqrt()).abs() < 1e-16);
        assert_eq!(a3[[1, 0]], 0.0);
        // Number operator a^T a = diag(0, 1, 2).
        let num = a3.t().dot(&a3);
        for j in 0..3 {
            assert!((num[[j, j]] - j as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn drift_is_the_two_photon_diagonal() {
        let ham = Hamiltonian::new(&test_model(6, 4, 2.0));
        let params = test_params(Array1::zeros(24));
        let (k, s) = ham.assemble(3.0, &params).unwrap();
        // -(xi/2) j(j-1) with xi = 2: 0, 0, -2, -6, -12, -20.
        let expected = [0.0, 0.0, -2.0, -6.0, -12.0, -20.0];
        for j in 0..6 {
            assert_eq!(k[[j, j]], expected[j]);
        }
        assert!(s.iter().all(|&x| x == 0.0));
        assert!(k.indexed_iter().all(|((i, j), &x)| i == j || x == 0.0));
    }

    #[test]
    fn two_level_assembly_by_hand() {
        let model = QuditModel::new(2, 2, 25.0, 7.7, vec![0.0, 0.0]).unwrap();
        let ham = Hamiltonian::new(&model);
        let n = 2;
        let mut k = Array2::zeros((n, n));
        let mut s = Array2::zeros((n, n));
        ham.assemble_from_pq(0.3, -0.2, k.view_mut(), s.view_mut());
        // Two levels carry no two-photon term, so K = p (a + a^T), S = q (a - a^T).
        assert_eq!(k, array![[0.0, 0.3], [0.3, 0.0]]);
        assert_eq!(s, array![[0.0, -0.2], [0.2, 0.0]]);
    }

    #[test]
    fn symmetry_holds_bitwise() {
        let ham = Hamiltonian::new(&test_model(7, 4, 0.83));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p: f64 = rng.gen_range(-2.0..2.0);
            let q: f64 = rng.gen_range(-2.0..2.0);
            let mut k = Array2::zeros((7, 7));
            let mut s = Array2::zeros((7, 7));
            ham.assemble_from_pq(p, q, k.view_mut(), s.view_mut());
            for i in 0..7 {
                assert_eq!(s[[i, i]], 0.0);
                for j in 0..7 {
                    assert_eq!(k[[i, j]], k[[j, i]]);
                    assert_eq!(s[[i, j]], -s[[j, i]]);
                    if i.abs_diff(j) > 1 {
                        assert_eq!(k[[i, j]], 0.0);
                        assert_eq!(s[[i, j]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let model = test_model(4, 2, 1.1);
        let ham = Hamiltonian::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let alpha = Array1::from_shape_fn(24, |_| rng.gen_range(-0.4..0.4));
        let params = test_params(alpha.clone());
        let eps = 1e-6;
        for &t in &[0.0, 2.9, 10.0] {
            for r in 0..params.dim() {
                let (dk, ds) = ham.assemble_derivative(t, &params, r).unwrap();
                let mut hi = alpha.clone();
                let mut lo = alpha.clone();
                hi[r] += eps;
                lo[r] -= eps;
                let (k_hi, s_hi) = ham.assemble(t, &test_params(hi)).unwrap();
                let (k_lo, s_lo) = ham.assemble(t, &test_params(lo)).unwrap();
                let k_fd = (&k_hi - &k_lo) / (2.0 * eps);
                let s_fd = (&s_hi - &s_lo) / (2.0 * eps);
                for i in 0..4 {
                    for j in 0..4 {
                        assert!((dk[[i, j]] - k_fd[[i, j]]).abs() < 1e-9);
                        assert!((ds[[i, j]] - s_fd[[i, j]]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn derivative_vanishes_off_the_spline_support() {
        let ham = Hamiltonian::new(&test_model(4, 2, 1.1));
        let params = test_params(Array1::zeros(24));
        // Parameter for spline k = 5 (support starts at 3 * spacing = 7.5 ns)
        // is inactive at t = 2.
        let r = params.param_index(0, 5, 0);
        let (dk, ds) = ham.assemble_derivative(2.0, &params, r).unwrap();
        assert!(dk.iter().all(|&x| x == 0.0));
        assert!(ds.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ladder_apply_matches_dense_product() {
        let ham = Hamiltonian::new(&test_model(6, 4, 0.3));
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let src = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
        let mut dst = Array2::zeros((6, 4));
        ham.ladder_plus_apply(src.view(), dst.view_mut());
        let dense = ham.a_plus().dot(&src);
        assert!(dst.iter().zip(dense.iter()).all(|(a, b)| (a - b).abs() < 1e-14));
        ham.ladder_minus_apply(src.view(), dst.view_mut());
        let dense = ham.a_minus().dot(&src);
        assert!(dst.iter().zip(dense.iter()).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn model_validation_rejects_bad_weights() {
        assert!(QuditModel::new(1, 1, 25.0, 1.0, vec![0.0]).is_err());
        assert!(QuditModel::new(4, 1, 25.0, 1.0, vec![0.0; 4]).is_err());
        assert!(QuditModel::new(4, 5, 25.0, 1.0, vec![0.0; 4]).is_err());
        assert!(QuditModel::new(4, 2, 25.0, 1.0, vec![0.0; 3]).is_err());
        // Nonzero weight on an essential level.
        assert!(QuditModel::new(4, 2, 25.0, 1.0, vec![0.0, 0.5, 0.0, 1.0]).is_err());
        // Negative weight.
        assert!(QuditModel::new(4, 2, 25.0, 1.0, vec![0.0, 0.0, -0.1, 1.0]).is_err());
        assert!(QuditModel::new(4, 2, 25.0, 1.0, vec![0.0, 0.0, 0.1, 1.0]).is_ok());
    }

    #[test]
    fn transition_frequencies_step_down_by_xi() {
        let model = test_model(5, 3, 1.5);
        assert_eq!(model.transition_frequency(0), 25.0);
        assert_eq!(model.transition_frequency(2), 22.0);
    }

    #[test]
    fn builtin_targets_are_unitary_and_padded() {
        let cnot = TargetGate::cnot(6).unwrap();
        assert_eq!(cnot.levels(), 6);
        assert_eq!(cnot.essential(), 4);
        // Guard rows are identically zero.
        for row in 4..6 {
            for col in 0..4 {
                assert_eq!(cnot.d_u()[[row, col]], 0.0);
                assert_eq!(cnot.d_v()[[row, col]], 0.0);
            }
        }
        // |10> and |11> swap.
        assert_eq!(cnot.d_u()[[3, 2]], 1.0);
        assert_eq!(cnot.d_u()[[2, 3]], 1.0);
        assert_eq!(cnot.d_u()[[2, 2]], 0.0);

        let swap = TargetGate::swap_ends(5, 4).unwrap();
        assert_eq!(swap.d_u()[[3, 0]], 1.0);
        assert_eq!(swap.d_u()[[0, 3]], 1.0);
        assert_eq!(swap.d_u()[[1, 1]], 1.0);
        assert_eq!(swap.d_u()[[2, 2]], 1.0);
        assert_eq!(swap.d_u()[[0, 0]], 0.0);

        let id = TargetGate::identity(4, 2).unwrap();
        assert_eq!(id.d_u()[[0, 0]], 1.0);
        assert_eq!(id.d_u()[[1, 0]], 0.0);
    }

    #[test]
    fn non_unitary_targets_are_rejected() {
        let mut gate = Array2::from_elem((2, 2), Complex64::new(0.0, 0.0));
        gate[[0, 0]] = Complex64::new(1.0, 0.0);
        gate[[1, 1]] = Complex64::new(1.0 + 1e-6, 0.0);
        assert!(matches!(
            TargetGate::from_essential_unitary(&gate, 4),
            Err(Error::InvalidTarget(_))
        ));
        // Complex phases are fine as long as the matrix is unitary.
        gate[[1, 1]] = Complex64::from_polar(1.0, 0.7);
        assert!(TargetGate::from_essential_unitary(&gate, 4).is_ok());
    }

    #[test]
    fn unit_conversions() {
        assert!((ghz_to_angular(1.0) - std::f64::consts::TAU).abs() < 1e-15);
        assert!((mhz_to_angular(1000.0) - ghz_to_angular(1.0)).abs() < 1e-15);
    }
}
