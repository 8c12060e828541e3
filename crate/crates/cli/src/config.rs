//! Run configuration: a JSON file with physical quantities in GHz/MHz/ns,
//! converted to angular units (rad/ns) when the problem is built.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use qoc_core::controls::{
    alpha_bound_for_envelope, amplitude_bound, CarrierSet, ControlParameterization, SplineGrid,
};
use qoc_core::integrator::{estimate_timestep, TimeGrid};
use qoc_core::model::{ghz_to_angular, mhz_to_angular, QuditModel, TargetGate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub controls: ControlsSection,
    pub grid: GridSection,
    pub target: TargetSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub spectrum: SpectrumSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Total levels N, essential levels E; N - E are guarded.
    pub levels: usize,
    pub essential: usize,
    /// Transition frequency omega_a / 2 pi.
    pub frequency_ghz: f64,
    /// Self-Kerr coefficient xi_a / 2 pi; positive lowers upper levels.
    pub anharmonicity_ghz: f64,
    /// Guard occupation weights, one per level.
    pub guard_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsSection {
    /// B-spline count D1 per quadrature and carrier.
    pub splines: usize,
    /// Rotating-frame carrier offsets Omega_k / 2 pi.
    pub carrier_frequencies_ghz: Vec<f64>,
    /// Per-coefficient box half-width alpha_max / 2 pi. Mutually exclusive
    /// with `envelope_bound_mhz`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude_max_mhz: Option<f64>,
    /// Bound c_inf / 2 pi on max(|p|, |q|), mapped conservatively to the
    /// per-coefficient box alpha_max = c_inf / (sqrt(2) N_f).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope_bound_mhz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub duration_ns: f64,
    /// Sample points per shortest Hamiltonian period, C_P.
    #[serde(default = "default_points_per_period")]
    pub points_per_period: f64,
    /// Explicit step count; when absent the step count is estimated from the
    /// spectral radius of the Hamiltonian at the amplitude bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

fn default_points_per_period() -> f64 {
    40.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    /// Built-in gate: "identity", "cnot", or "swap_ends". Mutually exclusive
    /// with `matrix_file`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<String>,
    /// JSON file with `real` and `imag` E x E arrays, resolved relative to
    /// the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub armijo_c1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_backtracks: Option<usize>,
    /// Half-width of the uniform random start, rad/ns. Defaults to a tenth
    /// of the coefficient box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Artifact directory; overridden by --out. Defaults to the working
    /// directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<PathBuf>,
    /// Write per-step population traces during simulate.
    #[serde(default)]
    pub populations: bool,
    /// Write the raw probe column matrix as JSON during probe.
    #[serde(default)]
    pub probe_matrices: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    /// Central-difference steps for the asymmetry sweep.
    #[serde(default = "default_probe_epsilons")]
    pub epsilons: Vec<f64>,
    /// Step used for the eigen-decomposition of the symmetric part.
    #[serde(default = "default_eigen_epsilon")]
    pub eigen_epsilon: f64,
}

fn default_probe_epsilons() -> Vec<f64> {
    vec![1e-4, 1e-5, 1e-6, 1e-7]
}

fn default_eigen_epsilon() -> f64 {
    1e-6
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            epsilons: default_probe_epsilons(),
            eigen_epsilon: default_eigen_epsilon(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSection {
    /// DFT length; power of two.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Peaks must reach this fraction of the strongest line.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Non-maximum suppression window in bins.
    #[serde(default = "default_separation")]
    pub min_separation_bins: usize,
}

fn default_samples() -> usize {
    4096
}

fn default_threshold() -> f64 {
    0.1
}

fn default_separation() -> usize {
    2
}

impl Default for SpectrumSection {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            threshold: default_threshold(),
            min_separation_bins: default_separation(),
        }
    }
}

/// Config compiled into core types, everything in rad/ns.
#[derive(Debug)]
pub struct Problem {
    pub model: QuditModel,
    /// Parameterization with all coefficients zero.
    pub params: ControlParameterization,
    pub grid: TimeGrid,
    pub target: TargetGate,
    /// Per-coefficient box half-width.
    pub alpha_max: f64,
    pub config: RunConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    /// Validates cross-field consistency and converts units. `base_dir`
    /// anchors relative paths (normally the config file's directory).
    pub fn build(&self, base_dir: &Path) -> Result<Problem> {
        let m = &self.model;
        if m.guard_weights.len() != m.levels {
            bail!(
                "model.guard_weights: expected {} entries (one per level), got {}",
                m.levels,
                m.guard_weights.len()
            );
        }
        let model = QuditModel::new(
            m.levels,
            m.essential,
            ghz_to_angular(m.frequency_ghz),
            ghz_to_angular(m.anharmonicity_ghz),
            m.guard_weights.clone(),
        )
        .context("model")?;

        let c = &self.controls;
        if c.carrier_frequencies_ghz.is_empty() {
            bail!("controls.carrier_frequencies_ghz: at least one carrier required");
        }
        let carrier_count = c.carrier_frequencies_ghz.len();
        let alpha_max = match (c.amplitude_max_mhz, c.envelope_bound_mhz) {
            (Some(a), None) => {
                if !(a > 0.0) {
                    bail!("controls.amplitude_max_mhz: must be positive, got {a}");
                }
                mhz_to_angular(a)
            }
            (None, Some(e)) => {
                if !(e > 0.0) {
                    bail!("controls.envelope_bound_mhz: must be positive, got {e}");
                }
                alpha_bound_for_envelope(mhz_to_angular(e), carrier_count)
            }
            (Some(_), Some(_)) => bail!(
                "controls: amplitude_max_mhz and envelope_bound_mhz are mutually exclusive"
            ),
            (None, None) => bail!(
                "controls: one of amplitude_max_mhz or envelope_bound_mhz is required"
            ),
        };
        let spline_grid =
            SplineGrid::new(c.splines, self.grid.duration_ns).context("controls.splines")?;
        let carriers = CarrierSet::new(
            c.carrier_frequencies_ghz
                .iter()
                .map(|&f| ghz_to_angular(f))
                .collect(),
        )
        .context("controls.carrier_frequencies_ghz")?;
        let dim = 2 * carrier_count * c.splines;
        let params = ControlParameterization::new(spline_grid, carriers, Array1::zeros(dim))
            .context("controls")?;

        let g = &self.grid;
        let grid = match g.steps {
            Some(steps) => TimeGrid::new(g.duration_ns, steps).context("grid")?,
            None => {
                // Worst case of a single carrier's envelope; stacking all
                // carriers would overestimate the spectral radius because the
                // optimizer drives them far below their common box.
                let envelope = amplitude_bound(alpha_max, 1);
                estimate_timestep(
                    &model,
                    envelope,
                    envelope,
                    g.points_per_period,
                    g.duration_ns,
                )
                .context("grid")?
            }
        };

        let target = self.build_target(&model, base_dir)?;
        Ok(Problem {
            model,
            params,
            grid,
            target,
            alpha_max,
            config: self.clone(),
        })
    }

    fn build_target(&self, model: &QuditModel, base_dir: &Path) -> Result<TargetGate> {
        let t = &self.target;
        match (&t.gate, &t.matrix_file) {
            (Some(name), None) => match name.as_str() {
                "identity" => TargetGate::identity(model.levels(), model.essential())
                    .context("target.gate"),
                "cnot" => {
                    if model.essential() != 4 {
                        bail!(
                            "target.gate: cnot needs 4 essential levels, model has {}",
                            model.essential()
                        );
                    }
                    TargetGate::cnot(model.levels()).context("target.gate")
                }
                "swap_ends" => TargetGate::swap_ends(model.levels(), model.essential())
                    .context("target.gate"),
                other => bail!(
                    "target.gate: unknown gate {other:?} (expected identity, cnot, or swap_ends)"
                ),
            },
            (None, Some(file)) => {
                let path = base_dir.join(file);
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("target.matrix_file: reading {}", path.display()))?;
                let matrix: TargetMatrixFile = serde_json::from_str(&text)
                    .with_context(|| format!("target.matrix_file: parsing {}", path.display()))?;
                let gate = matrix.into_matrix(model.essential())?;
                TargetGate::from_essential_unitary(&gate, model.levels())
                    .context("target.matrix_file")
            }
            (Some(_), Some(_)) => {
                bail!("target: gate and matrix_file are mutually exclusive")
            }
            (None, None) => bail!("target: one of gate or matrix_file is required"),
        }
    }
}

/// On-disk form of an explicit target unitary.
#[derive(Debug, Serialize, Deserialize)]
pub struct TargetMatrixFile {
    pub real: Vec<Vec<f64>>,
    pub imag: Vec<Vec<f64>>,
}

impl TargetMatrixFile {
    fn into_matrix(self, essential: usize) -> Result<Array2<Complex64>> {
        let e = essential;
        if self.real.len() != e || self.imag.len() != e {
            bail!(
                "target.matrix_file: expected {e} rows, got {} real / {} imag",
                self.real.len(),
                self.imag.len()
            );
        }
        let mut gate = Array2::zeros((e, e));
        for i in 0..e {
            if self.real[i].len() != e || self.imag[i].len() != e {
                bail!("target.matrix_file: row {i} is not length {e}");
            }
            for j in 0..e {
                gate[[i, j]] = Complex64::new(self.real[i][j], self.imag[i][j]);
            }
        }
        Ok(gate)
    }
}

/// Coefficient vector on disk, tagged with its layout so mismatched configs
/// are rejected instead of silently reinterpreted.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaFile {
    pub splines: usize,
    pub carriers: usize,
    /// Index order: 2 (l * splines + k) + c for carrier l, spline k,
    /// quadrature c.
    pub alpha: Vec<f64>,
}

impl AlphaFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading alpha file {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing alpha file {}", path.display()))
    }

    pub fn write(path: &Path, splines: usize, carriers: usize, alpha: &Array1<f64>) -> Result<()> {
        let file = Self {
            splines,
            carriers,
            alpha: alpha.to_vec(),
        };
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text)
            .with_context(|| format!("writing alpha file {}", path.display()))
    }

    /// Checks the layout tags against the problem and returns the vector.
    pub fn into_alpha(self, params: &ControlParameterization) -> Result<Array1<f64>> {
        let splines = params.grid().count();
        let carriers = params.carriers().count();
        if self.splines != splines || self.carriers != carriers {
            bail!(
                "alpha file layout is {} splines x {} carriers, config wants {} x {}",
                self.splines,
                self.carriers,
                splines,
                carriers
            );
        }
        if self.alpha.len() != params.dim() {
            bail!(
                "alpha file has {} coefficients, layout needs {}",
                self.alpha.len(),
                params.dim()
            );
        }
        Ok(Array1::from_vec(self.alpha))
    }
}
