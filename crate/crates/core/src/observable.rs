//! Hermitian observables parameterized by N^2 real numbers.
//!
//! The flat parameter layout is: the N real diagonal entries, then the
//! N(N-1)/2 real parts of the strict upper triangle (row-major over i < j),
//! then the imaginary parts in the same order. Entry (i, j) with i < j is
//! `a_ij + i*c_ij`; entry (j, i) is its conjugate.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, QmlError, Result};
use crate::qstate::StateVector;

/// Bound on |Im <psi|B|psi>| before the expectation is declared inconsistent.
pub const IMAG_RESIDUE_TOL: f64 = 1e-10;

/// Largest dimension `eigen_bounds` will diagonalize.
pub const EIGEN_MAX_DIM: usize = 64;

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

pub fn param_count(dim: usize) -> usize {
    dim * dim
}

/// Index of the strict-upper-triangle pair (i, j), i < j, in row-major order.
pub fn pair_index(dim: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < dim);
    i * dim - i * (i + 1) / 2 + (j - i - 1)
}

/// What a single flat parameter controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Entry {
    Diag(usize),
    Re(usize, usize),
    Im(usize, usize),
}

/// Calls `f(flat_index, entry)` for every parameter in layout order.
pub fn for_each_entry(dim: usize, mut f: impl FnMut(usize, Entry)) {
    let pairs = dim * (dim - 1) / 2;
    for i in 0..dim {
        f(i, Entry::Diag(i));
    }
    let mut o = dim;
    for i in 0..dim {
        for j in i + 1..dim {
            f(o, Entry::Re(i, j));
            f(o + pairs, Entry::Im(i, j));
            o += 1;
        }
    }
}

impl Entry {
    /// d<psi|B|psi> / d(parameter).
    #[inline]
    pub fn gradient(self, psi: &[Complex64]) -> f64 {
        match self {
            Entry::Diag(i) => psi[i].norm_sqr(),
            Entry::Re(i, j) => 2.0 * (psi[i].conj() * psi[j]).re,
            Entry::Im(i, j) => -2.0 * (psi[i].conj() * psi[j]).im,
        }
    }

    /// Adds `value * (dB/d parameter) * psi` into `out`.
    #[inline]
    pub fn accumulate_apply(self, value: f64, psi: &[Complex64], out: &mut [Complex64]) {
        match self {
            Entry::Diag(i) => out[i] += psi[i] * value,
            Entry::Re(i, j) => {
                out[i] += psi[j] * value;
                out[j] += psi[i] * value;
            }
            Entry::Im(i, j) => {
                out[i] += Complex64::new(0.0, value) * psi[j];
                out[j] += Complex64::new(0.0, -value) * psi[i];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableParams {
    n_qubits: usize,
    values: Vec<f64>,
}

impl ObservableParams {
    pub fn new(n_qubits: usize, values: Vec<f64>) -> Result<Self> {
        let dim = 1usize << n_qubits;
        if values.len() != param_count(dim) {
            return Err(invalid(format!(
                "observable on {n_qubits} qubits needs {} parameters, got {}",
                param_count(dim),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(invalid(format!("observable parameter is not finite: {bad}")));
        }
        Ok(Self { n_qubits, values })
    }

    pub fn zeros(n_qubits: usize) -> Self {
        let dim = 1usize << n_qubits;
        Self {
            n_qubits,
            values: vec![0.0; param_count(dim)],
        }
    }

    /// Pauli-Z on `qubit`, i.e. diagonal +-1 by that qubit's bit.
    pub fn pauli_z(n_qubits: usize, qubit: usize) -> Self {
        let mut p = Self::zeros(n_qubits);
        for (i, d) in p.values.iter_mut().take(1 << n_qubits).enumerate() {
            *d = if i >> qubit & 1 == 0 { 1.0 } else { -1.0 };
        }
        p
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        1 << self.n_qubits
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix {
    dim: usize,
    entries: Vec<Complex64>,
}

impl HermitianMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.entries[row * self.dim + col]
    }

    /// Row-major entries.
    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            entries: self.entries.iter().map(|e| e * factor).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i).re).sum()
    }
}

pub fn hermitian_from_params(p: &ObservableParams) -> HermitianMatrix {
    let dim = p.dim();
    let mut entries = vec![Complex64::new(0.0, 0.0); dim * dim];
    for_each_entry(dim, |o, entry| {
        let v = p.values[o];
        match entry {
            Entry::Diag(i) => entries[i * dim + i] = Complex64::new(v, 0.0),
            Entry::Re(i, j) => {
                entries[i * dim + j].re = v;
                entries[j * dim + i].re = v;
            }
            Entry::Im(i, j) => {
                entries[i * dim + j].im = v;
                entries[j * dim + i].im = -v;
            }
        }
    });
    HermitianMatrix { dim, entries }
}

pub fn params_from_hermitian(b: &HermitianMatrix) -> ObservableParams {
    let dim = b.dim;
    let mut values = vec![0.0; param_count(dim)];
    for_each_entry(dim, |o, entry| {
        values[o] = match entry {
            Entry::Diag(i) => b.get(i, i).re,
            Entry::Re(i, j) => b.get(i, j).re,
            Entry::Im(i, j) => b.get(i, j).im,
        }
    });
    ObservableParams {
        n_qubits: dim.trailing_zeros() as usize,
        values,
    }
}

/// <psi|B|psi>, summed over all N^2 entries.
pub fn expectation(state: &StateVector, b: &HermitianMatrix) -> Result<f64> {
    if state.dim() != b.dim {
        return Err(invalid(format!(
            "state dimension {} does not match observable dimension {}",
            state.dim(),
            b.dim
        )));
    }
    let psi = state.amplitudes();
    let mut total = Complex64::new(0.0, 0.0);
    for (i, row) in b.entries.chunks_exact(b.dim).enumerate() {
        let row_dot: Complex64 = row.iter().zip(psi).map(|(bij, pj)| bij * pj).sum();
        total += psi[i].conj() * row_dot;
    }
    if total.im.abs() >= IMAG_RESIDUE_TOL {
        return Err(QmlError::Internal(format!(
            "expectation has imaginary residue {:e}",
            total.im
        )));
    }
    Ok(total.re)
}

/// <psi|B|psi> straight from the flat parameters, without building B.
pub fn expectation_from_params(psi: &[Complex64], values: &[f64]) -> f64 {
    let mut e = 0.0;
    for_each_entry(psi.len(), |o, entry| e += values[o] * entry.gradient(psi));
    e
}

/// B|psi> straight from the flat parameters.
pub fn apply_params(psi: &[Complex64], values: &[f64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); psi.len()];
    for_each_entry(psi.len(), |o, entry| {
        entry.accumulate_apply(values[o], psi, &mut out)
    });
    out
}

/// <Z_qubit> in O(N).
pub fn pauli_z_expectation(state: &StateVector, qubit: usize) -> Result<f64> {
    if qubit >= state.n_qubits() {
        return Err(invalid(format!(
            "qubit {qubit} out of range for {}-qubit state",
            state.n_qubits()
        )));
    }
    Ok(state
        .amplitudes()
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let sign = if i >> qubit & 1 == 0 { 1.0 } else { -1.0 };
            sign * a.norm_sqr()
        })
        .sum())
}

/// Gradient of <psi|B(b)|psi> with respect to the flat parameters. The
/// expectation is linear in them, so this does not depend on B.
pub fn expectation_grad_params(state: &StateVector) -> Vec<f64> {
    let psi = state.amplitudes();
    let mut grad = vec![0.0; param_count(psi.len())];
    for_each_entry(psi.len(), |o, entry| grad[o] = entry.gradient(psi));
    grad
}

/// All eigenvalues of a Hermitian matrix by cyclic complex Jacobi rotations,
/// in ascending order.
pub fn jacobi_eigenvalues(b: &HermitianMatrix) -> Result<Vec<f64>> {
    let n = b.dim;
    if n > EIGEN_MAX_DIM {
        return Err(invalid(format!(
            "eigen_bounds supports dimension <= {EIGEN_MAX_DIM}, got {n}"
        )));
    }
    let mut a = b.entries.clone();
    let off_max = |a: &[Complex64]| {
        let mut m: f64 = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                m = m.max(a[p * n + q].norm());
            }
        }
        m
    };

    let mut sweeps = 0;
    while off_max(&a) >= JACOBI_TOL {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(QmlError::Numerical(format!(
                "Jacobi eigen solver did not converge after {JACOBI_MAX_SWEEPS} sweeps"
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                let r = apq.norm();
                if r < JACOBI_TOL * 1e-3 {
                    continue;
                }
                let app = a[p * n + p].re;
                let aqq = a[q * n + q].re;
                // G = diag(1, e^{-i phi}) * [[c, s], [-s, c]] zeroes (G^H A G)_pq.
                let phase = apq / r;
                let theta = 0.5 * (2.0 * r).atan2(aqq - app);
                let (s, c) = theta.sin_cos();
                let gpp = Complex64::new(c, 0.0);
                let gpq = Complex64::new(s, 0.0);
                let gqp = -phase.conj() * s;
                let gqq = phase.conj() * c;

                // A <- A G (columns p, q)
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = akp * gpp + akq * gqp;
                    a[k * n + q] = akp * gpq + akq * gqq;
                }
                // A <- G^H A (rows p, q)
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = gpp.conj() * apk + gqp.conj() * aqk;
                    a[q * n + k] = gpq.conj() * apk + gqq.conj() * aqk;
                }
                a[p * n + q] = Complex64::new(0.0, 0.0);
                a[q * n + p] = Complex64::new(0.0, 0.0);
                a[p * n + p].im = 0.0;
                a[q * n + q].im = 0.0;
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i].re).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

/// (lambda_min, lambda_max).
pub fn eigen_bounds(b: &HermitianMatrix) -> Result<(f64, f64)> {
    let eig = jacobi_eigenvalues(b)?;
    Ok((eig[0], eig[eig.len() - 1]))
}
