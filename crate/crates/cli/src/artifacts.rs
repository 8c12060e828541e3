//! Artifact writers: arrays as CSV with header rows, scalars and metadata as
//! JSON. Floats are written with full round-trip precision so downstream
//! tooling sees exactly what the run computed.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use ndarray::{Array1, Array2};
use serde::Serialize;

use qoc_core::optimizer::IterationRecord;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_history_csv(path: &Path, history: &[IterationRecord]) -> Result<()> {
    let mut out =
        String::from("iteration,infidelity,guard_penalty,total,gradient_norm,step,evaluations\n");
    for rec in history {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{}",
            rec.iteration,
            rec.infidelity,
            rec.guard_penalty,
            rec.total,
            rec.gradient_norm,
            rec.step,
            rec.evaluations
        )?;
    }
    write_text(path, &out)
}

/// Population traces: one row per recorded time, one column per
/// (initial state, level) pair.
pub fn write_populations_csv(
    path: &Path,
    levels: usize,
    columns: usize,
    trace: &[(f64, Vec<f64>)],
) -> Result<()> {
    let mut out = String::from("time_ns");
    for level in 0..levels {
        for col in 0..columns {
            write!(out, ",pop_l{level}_c{col}")?;
        }
    }
    out.push('\n');
    for (t, pops) in trace {
        write!(out, "{t:e}")?;
        for p in pops {
            write!(out, ",{p:e}")?;
        }
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn write_spectrum_csv(path: &Path, frequencies: &[f64], amplitudes: &[f64]) -> Result<()> {
    let mut out = String::from("frequency_ghz,amplitude\n");
    for (f, a) in frequencies.iter().zip(amplitudes) {
        writeln!(out, "{f:e},{a:e}")?;
    }
    write_text(path, &out)
}

pub struct PeakRow {
    pub frequency_ghz: f64,
    pub amplitude: f64,
    pub nearest_transition_ghz: f64,
    pub bin_offset: f64,
}

pub fn write_peaks_csv(path: &Path, peaks: &[PeakRow]) -> Result<()> {
    let mut out = String::from("frequency_ghz,amplitude,nearest_transition_ghz,bin_offset\n");
    for p in peaks {
        writeln!(
            out,
            "{:e},{:e},{:e},{:e}",
            p.frequency_ghz, p.amplitude, p.nearest_transition_ghz, p.bin_offset
        )?;
    }
    write_text(path, &out)
}

pub struct AsymmetryRow {
    pub epsilon: f64,
    pub symmetric_norm: f64,
    pub antisymmetric_norm: f64,
    pub ratio: f64,
}

pub fn write_asymmetry_csv(path: &Path, rows: &[AsymmetryRow]) -> Result<()> {
    let mut out = String::from("epsilon,symmetric_norm,antisymmetric_norm,ratio\n");
    for r in rows {
        writeln!(
            out,
            "{:e},{:e},{:e},{:e}",
            r.epsilon, r.symmetric_norm, r.antisymmetric_norm, r.ratio
        )?;
    }
    write_text(path, &out)
}

pub fn write_eigenvalues_csv(path: &Path, eigenvalues: &Array1<f64>) -> Result<()> {
    let mut out = String::from("index,eigenvalue\n");
    for (i, v) in eigenvalues.iter().enumerate() {
        writeln!(out, "{i},{v:e}")?;
    }
    write_text(path, &out)
}

/// Raw probe matrix as nested JSON arrays, row-major.
#[derive(Serialize)]
pub struct ProbeMatrixFile {
    pub epsilon: f64,
    pub columns: Vec<Vec<f64>>,
}

impl ProbeMatrixFile {
    pub fn new(epsilon: f64, matrix: &Array2<f64>) -> Self {
        Self {
            epsilon,
            columns: matrix.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }
}
