//! Dense statevector simulation of the angle-encoding circuit and the
//! layered variational ansatz.
//!
//! Amplitudes are indexed little-endian: qubit `q` is bit `q` of the basis
//! index, so qubit 0 is the least-significant bit.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Largest register `zero_state` accepts. Dense observables scale as 4^n, so
/// anything past this is out of reach long before the statevector is.
pub const DEFAULT_MAX_QUBITS: usize = 14;

/// Number of rotation angles per qubit per layer (RZ, RY, RZ).
pub const ANGLES_PER_QUBIT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amplitudes: Vec<Complex64>,
}

impl StateVector {
    /// |0...0> on `n_qubits` qubits.
    pub fn zero_state(n_qubits: usize) -> Result<Self> {
        Self::zero_state_capped(n_qubits, DEFAULT_MAX_QUBITS)
    }

    pub fn zero_state_capped(n_qubits: usize, max_qubits: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > max_qubits {
            return Err(invalid(format!(
                "n_qubits must be in 1..={max_qubits}, got {n_qubits}"
            )));
        }
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
        amplitudes[0] = Complex64::new(1.0, 0.0);
        Ok(Self {
            n_qubits,
            amplitudes,
        })
    }

    /// Wraps raw amplitudes. The caller is responsible for normalization.
    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self> {
        let len = amplitudes.len();
        if len < 2 || !len.is_power_of_two() {
            return Err(invalid(format!(
                "amplitude count must be a power of two >= 2, got {len}"
            )));
        }
        Ok(Self {
            n_qubits: len.trailing_zeros() as usize,
            amplitudes,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub(crate) fn amplitudes_mut(&mut self) -> &mut [Complex64] {
        &mut self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<Complex64> {
        self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// |<self|other>|^2
    pub fn fidelity(&self, other: &StateVector) -> f64 {
        self.inner(other).norm_sqr()
    }

    /// <self|other>
    pub fn inner(&self, other: &StateVector) -> Complex64 {
        self.amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    fn check_qubit(&self, qubit: usize) -> Result<()> {
        if qubit >= self.n_qubits {
            return Err(invalid(format!(
                "qubit {qubit} out of range for {}-qubit state",
                self.n_qubits
            )));
        }
        Ok(())
    }

    /// Applies exp(-i * angle * P / 2) on `qubit`.
    pub fn apply_rotation(&mut self, qubit: usize, axis: Axis, angle: f64) -> Result<()> {
        self.check_qubit(qubit)?;
        if !angle.is_finite() {
            return Err(invalid(format!("rotation angle must be finite, got {angle}")));
        }
        self.apply_single(qubit, rotation_matrix(axis, angle));
        Ok(())
    }

    /// Applies an arbitrary 2x2 matrix `[[m00, m01], [m10, m11]]` on `qubit`.
    pub(crate) fn apply_single(&mut self, qubit: usize, m: [[Complex64; 2]; 2]) {
        let bit = 1usize << qubit;
        let dim = self.amplitudes.len();
        // Walk blocks of size 2*bit; within each, pair i with i | bit.
        let mut base = 0;
        while base < dim {
            for i in base..base + bit {
                let j = i | bit;
                let a0 = self.amplitudes[i];
                let a1 = self.amplitudes[j];
                self.amplitudes[i] = m[0][0] * a0 + m[0][1] * a1;
                self.amplitudes[j] = m[1][0] * a0 + m[1][1] * a1;
            }
            base += bit << 1;
        }
    }

    /// Multiplies by the Pauli matrix `axis` on `qubit` (not a rotation).
    pub(crate) fn apply_pauli(&mut self, qubit: usize, axis: Axis) {
        let zero = Complex64::new(0.0, 0.0);
        let one = Complex64::new(1.0, 0.0);
        let i = Complex64::new(0.0, 1.0);
        let m = match axis {
            Axis::X => [[zero, one], [one, zero]],
            Axis::Y => [[zero, -i], [i, zero]],
            Axis::Z => [[one, zero], [zero, -one]],
        };
        self.apply_single(qubit, m);
    }

    pub fn apply_cnot(&mut self, control: usize, target: usize) -> Result<()> {
        self.check_qubit(control)?;
        self.check_qubit(target)?;
        if control == target {
            return Err(invalid(format!(
                "CNOT control and target must differ (both {control})"
            )));
        }
        let cbit = 1usize << control;
        let tbit = 1usize << target;
        for i in 0..self.amplitudes.len() {
            // Visit each swapped pair once, from the target-bit-0 side.
            if i & cbit != 0 && i & tbit == 0 {
                self.amplitudes.swap(i, i | tbit);
            }
        }
        Ok(())
    }
}

/// Matrix of exp(-i * angle * P / 2) for P in {X, Y, Z}.
pub fn rotation_matrix(axis: Axis, angle: f64) -> [[Complex64; 2]; 2] {
    let (s, c) = (angle / 2.0).sin_cos();
    let zero = Complex64::new(0.0, 0.0);
    match axis {
        Axis::X => [
            [Complex64::new(c, 0.0), Complex64::new(0.0, -s)],
            [Complex64::new(0.0, -s), Complex64::new(c, 0.0)],
        ],
        Axis::Y => [
            [Complex64::new(c, 0.0), Complex64::new(-s, 0.0)],
            [Complex64::new(s, 0.0), Complex64::new(c, 0.0)],
        ],
        Axis::Z => [
            [Complex64::new(c, -s), zero],
            [zero, Complex64::new(c, s)],
        ],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnsatzConfig {
    pub n_qubits: usize,
    pub depth: usize,
}

impl AnsatzConfig {
    pub fn new(n_qubits: usize, depth: usize) -> Result<Self> {
        if n_qubits == 0 || n_qubits > DEFAULT_MAX_QUBITS {
            return Err(invalid(format!(
                "n_qubits must be in 1..={DEFAULT_MAX_QUBITS}, got {n_qubits}"
            )));
        }
        if depth == 0 {
            return Err(invalid("ansatz depth must be at least 1"));
        }
        Ok(Self { n_qubits, depth })
    }

    pub fn param_count(&self) -> usize {
        self.depth * self.n_qubits * ANGLES_PER_QUBIT
    }

    pub fn dim(&self) -> usize {
        1 << self.n_qubits
    }

    /// Flat index of angle `k` (0 = first RZ, 1 = RY, 2 = second RZ) of `qubit` in `layer`.
    pub fn angle_index(&self, layer: usize, qubit: usize, k: usize) -> usize {
        (layer * self.n_qubits + qubit) * ANGLES_PER_QUBIT + k
    }

    /// The ansatz as a flat gate list in application order.
    pub fn gates(&self) -> Vec<Gate> {
        let n = self.n_qubits;
        let mut gates = Vec::with_capacity(self.depth * n * (ANGLES_PER_QUBIT + 1));
        for layer in 0..self.depth {
            for q in 0..n {
                for (k, axis) in [Axis::Z, Axis::Y, Axis::Z].into_iter().enumerate() {
                    gates.push(Gate::Rotation {
                        qubit: q,
                        axis,
                        param: self.angle_index(layer, q, k),
                    });
                }
            }
            if n > 1 {
                for q in 0..n {
                    gates.push(Gate::Cnot {
                        control: q,
                        target: (q + 1) % n,
                    });
                }
            }
        }
        gates
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    /// Rotation whose angle is `params[param]`.
    Rotation { qubit: usize, axis: Axis, param: usize },
    Cnot { control: usize, target: usize },
}

/// Rotation angles of the variational circuit, ordered layer, then qubit,
/// then (RZ, RY, RZ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitParams(Vec<f64>);

impl CircuitParams {
    pub fn new(angles: Vec<f64>, cfg: &AnsatzConfig) -> Result<Self> {
        if angles.len() != cfg.param_count() {
            return Err(invalid(format!(
                "expected {} circuit angles for {} qubits x depth {}, got {}",
                cfg.param_count(),
                cfg.n_qubits,
                cfg.depth,
                angles.len()
            )));
        }
        if let Some(bad) = angles.iter().find(|a| !a.is_finite()) {
            return Err(invalid(format!("circuit angle is not finite: {bad}")));
        }
        Ok(Self(angles))
    }

    pub fn zeros(cfg: &AnsatzConfig) -> Self {
        Self(vec![0.0; cfg.param_count()])
    }

    pub fn angles(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// U(x)|0>: RY(x[i mod d]) on qubit i.
pub fn encode(x: &[f64], n_qubits: usize) -> Result<StateVector> {
    if x.is_empty() {
        return Err(invalid("feature vector is empty"));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(invalid(format!("feature is not finite: {bad}")));
    }
    let mut state = StateVector::zero_state(n_qubits)?;
    for q in 0..n_qubits {
        state.apply_rotation(q, Axis::Y, x[q % x.len()])?;
    }
    Ok(state)
}

/// Applies W(theta) in place.
pub fn apply_variational(
    state: &mut StateVector,
    params: &CircuitParams,
    cfg: &AnsatzConfig,
) -> Result<()> {
    if params.len() != cfg.param_count() {
        return Err(invalid(format!(
            "expected {} circuit angles, got {}",
            cfg.param_count(),
            params.len()
        )));
    }
    if state.n_qubits() != cfg.n_qubits {
        return Err(invalid(format!(
            "state has {} qubits but ansatz expects {}",
            state.n_qubits(),
            cfg.n_qubits
        )));
    }
    apply_gates(state, &cfg.gates(), params.angles());
    Ok(())
}

/// Gate indices are trusted here; callers validate against the config.
pub(crate) fn apply_gates(state: &mut StateVector, gates: &[Gate], angles: &[f64]) {
    for gate in gates {
        match *gate {
            Gate::Rotation { qubit, axis, param } => {
                state.apply_single(qubit, rotation_matrix(axis, angles[param]))
            }
            Gate::Cnot { control, target } => {
                state
                    .apply_cnot(control, target)
                    .expect("ansatz gate indices are in range");
            }
        }
    }
}

/// |psi> = W(theta) U(x) |0>.
pub fn forward_state(x: &[f64], params: &CircuitParams, cfg: &AnsatzConfig) -> Result<StateVector> {
    let mut state = encode(x, cfg.n_qubits)?;
    apply_variational(&mut state, params, cfg)?;
    Ok(state)
}
