//! Circuit-angle gradients and the reference oracles every gradient test
//! leans on.
//!
//! Two exact routes are provided for d<B>/d(theta): the parameter-shift rule,
//! which only re-runs the forward simulation, and an adjoint sweep that
//! back-propagates B|psi> through the gate list in O(gates * N). Training
//! uses the adjoint sweep; tests pin it against parameter shift and finite
//! differences.

use std::f64::consts::FRAC_PI_2;

use num_complex::Complex64;

use crate::error::{invalid, QmlError, Result};
use crate::observable::{
    apply_params, expectation, expectation_from_params, pauli_z_expectation, HermitianMatrix,
    ObservableParams,
};
use crate::qstate::{forward_state, rotation_matrix, AnsatzConfig, Axis, CircuitParams, Gate, StateVector};

/// What is measured at the end of the circuit.
#[derive(Debug, Clone)]
pub enum Measurement {
    Hermitian(HermitianMatrix),
    Params(ObservableParams),
    PauliZ(usize),
}

impl Measurement {
    pub fn expectation(&self, state: &StateVector) -> Result<f64> {
        match self {
            Measurement::Hermitian(b) => expectation(state, b),
            Measurement::Params(p) => {
                check_dim(state.dim(), p.dim())?;
                Ok(expectation_from_params(state.amplitudes(), p.values()))
            }
            Measurement::PauliZ(q) => pauli_z_expectation(state, *q),
        }
    }

    /// B|psi>.
    pub fn apply(&self, state: &StateVector) -> Result<Vec<Complex64>> {
        match self {
            Measurement::Hermitian(b) => {
                check_dim(state.dim(), b.dim())?;
                let psi = state.amplitudes();
                Ok(b.entries()
                    .chunks_exact(b.dim())
                    .map(|row| row.iter().zip(psi).map(|(x, y)| x * y).sum())
                    .collect())
            }
            Measurement::Params(p) => {
                check_dim(state.dim(), p.dim())?;
                Ok(apply_params(state.amplitudes(), p.values()))
            }
            Measurement::PauliZ(q) => {
                if *q >= state.n_qubits() {
                    return Err(invalid(format!("readout qubit {q} out of range")));
                }
                let mut out = state.clone();
                out.apply_pauli(*q, Axis::Z);
                Ok(out.into_amplitudes())
            }
        }
    }
}

fn check_dim(state_dim: usize, obs_dim: usize) -> Result<()> {
    if state_dim != obs_dim {
        return Err(invalid(format!(
            "state dimension {state_dim} does not match observable dimension {obs_dim}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GradientRequest {
    pub x: Vec<f64>,
    pub params: CircuitParams,
    pub cfg: AnsatzConfig,
    pub measurement: Measurement,
}

impl GradientRequest {
    fn evaluate(&self, angles: &[f64]) -> Result<f64> {
        let params = CircuitParams::new(angles.to_vec(), &self.cfg)?;
        let state = forward_state(&self.x, &params, &self.cfg)?;
        self.measurement.expectation(&state)
    }
}

/// g_k = (E(theta_k + pi/2) - E(theta_k - pi/2)) / 2 for every angle.
pub fn grad_expectation_wrt_angles(req: &GradientRequest) -> Result<Vec<f64>> {
    let mut angles = req.params.angles().to_vec();
    let mut grad = Vec::with_capacity(angles.len());
    for k in 0..angles.len() {
        let theta = angles[k];
        angles[k] = theta + FRAC_PI_2;
        let plus = req.evaluate(&angles)?;
        angles[k] = theta - FRAC_PI_2;
        let minus = req.evaluate(&angles)?;
        angles[k] = theta;
        grad.push((plus - minus) / 2.0);
    }
    Ok(grad)
}

/// Same quantity as [`grad_expectation_wrt_angles`] by one adjoint sweep.
pub fn adjoint_grad_wrt_angles(req: &GradientRequest) -> Result<Vec<f64>> {
    let state = forward_state(&req.x, &req.params, &req.cfg)?;
    let lambda = req.measurement.apply(&state)?;
    Ok(adjoint_sweep(state, lambda, &req.cfg.gates(), req.params.angles()))
}

/// Back-propagates `lambda = B|psi>` from the final state `psi` through
/// `gates`, returning d<psi|B|psi>/d(angle) for every angle.
pub(crate) fn adjoint_sweep(
    psi: StateVector,
    lambda: Vec<Complex64>,
    gates: &[Gate],
    angles: &[f64],
) -> Vec<f64> {
    let mut grad = vec![0.0; angles.len()];
    let mut phi = psi;
    let mut lam = StateVector::from_amplitudes(lambda).expect("lambda has the state's dimension");
    let mut scratch = phi.clone();
    for gate in gates.iter().rev() {
        match *gate {
            Gate::Rotation { qubit, axis, param } => {
                // dE/dtheta = Im <lambda| P |phi_after>
                scratch.amplitudes_mut().copy_from_slice(phi.amplitudes());
                scratch.apply_pauli(qubit, axis);
                grad[param] += lam.inner(&scratch).im;
                let undo = rotation_matrix(axis, -angles[param]);
                phi.apply_single(qubit, undo);
                lam.apply_single(qubit, undo);
            }
            Gate::Cnot { control, target } => {
                phi.apply_cnot(control, target).expect("gate in range");
                lam.apply_cnot(control, target).expect("gate in range");
            }
        }
    }
    grad
}

/// Central differences `(f(p + h e_k) - f(p - h e_k)) / 2h` per coordinate.
pub fn finite_difference<F>(f: F, p: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if step.is_nan() || step <= 0.0 {
        return Err(invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for k in 0..p.len() {
        probe[k] = p[k] + step;
        let plus = f(&probe);
        probe[k] = p[k] - step;
        let minus = f(&probe);
        probe[k] = p[k];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(QmlError::Numerical(format!(
                "function is not finite near coordinate {k}"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Relative error with an absolute floor for components near zero.
pub fn within_tolerance(got: f64, want: f64, rel: f64, abs: f64) -> bool {
    let diff = (got - want).abs();
    diff < abs || diff <= rel * want.abs().max(got.abs())
}

/// Largest dimension handled by the dense oracle.
pub const ORACLE_MAX_QUBITS: usize = 4;

/// Square complex matrix used only to build reference results.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    dim: usize,
    data: Vec<Complex64>,
}

impl DenseMatrix {
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![Complex64::new(0.0, 0.0); dim * dim];
        for i in 0..dim {
            data[i * dim + i] = Complex64::new(1.0, 0.0);
        }
        Self { dim, data }
    }

    pub fn from_rows(rows: Vec<Vec<Complex64>>) -> Self {
        let dim = rows.len();
        let data: Vec<Complex64> = rows.into_iter().flatten().collect();
        assert_eq!(data.len(), dim * dim, "rows must form a square matrix");
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.dim + c]
    }

    /// self (x) other, with `self` on the more significant index.
    pub fn kron(&self, other: &DenseMatrix) -> DenseMatrix {
        let dim = self.dim * other.dim;
        let mut data = vec![Complex64::new(0.0, 0.0); dim * dim];
        for r1 in 0..self.dim {
            for c1 in 0..self.dim {
                let a = self.get(r1, c1);
                for r2 in 0..other.dim {
                    for c2 in 0..other.dim {
                        data[(r1 * other.dim + r2) * dim + c1 * other.dim + c2] = a * other.get(r2, c2);
                    }
                }
            }
        }
        DenseMatrix { dim, data }
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        let n = self.dim;
        let mut data = vec![Complex64::new(0.0, 0.0); n * n];
        for r in 0..n {
            for k in 0..n {
                let a = self.get(r, k);
                for c in 0..n {
                    data[r * n + c] += a * other.get(k, c);
                }
            }
        }
        DenseMatrix { dim: n, data }
    }

    pub fn matvec(&self, v: &[Complex64]) -> Vec<Complex64> {
        (0..self.dim)
            .map(|r| (0..self.dim).map(|c| self.get(r, c) * v[c]).sum())
            .collect()
    }
}

fn oracle_rotation(axis: Axis, angle: f64) -> DenseMatrix {
    let c = Complex64::new((angle / 2.0).cos(), 0.0);
    let s = (angle / 2.0).sin();
    let z = Complex64::new(0.0, 0.0);
    let rows = match axis {
        Axis::X => vec![vec![c, Complex64::new(0.0, -s)], vec![Complex64::new(0.0, -s), c]],
        Axis::Y => vec![vec![c, Complex64::new(-s, 0.0)], vec![Complex64::new(s, 0.0), c]],
        Axis::Z => vec![
            vec![Complex64::from_polar(1.0, -angle / 2.0), z],
            vec![z, Complex64::from_polar(1.0, angle / 2.0)],
        ],
    };
    DenseMatrix::from_rows(rows)
}

/// Embeds per-qubit 2x2 factors into the full register; `factors[q]` acts on qubit q.
fn kron_register(factors: &[DenseMatrix]) -> DenseMatrix {
    // Most significant qubit is the leftmost Kronecker factor.
    factors
        .iter()
        .rev()
        .fold(DenseMatrix::identity(1), |acc, f| acc.kron(f))
}

fn oracle_single(n: usize, qubit: usize, gate: DenseMatrix) -> DenseMatrix {
    let factors: Vec<DenseMatrix> = (0..n)
        .map(|q| if q == qubit { gate.clone() } else { DenseMatrix::identity(2) })
        .collect();
    kron_register(&factors)
}

/// CNOT = |0><0|_c (x) I + |1><1|_c (x) X_t.
fn oracle_cnot(n: usize, control: usize, target: usize) -> DenseMatrix {
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    let p0 = DenseMatrix::from_rows(vec![vec![one, zero], vec![zero, zero]]);
    let p1 = DenseMatrix::from_rows(vec![vec![zero, zero], vec![zero, one]]);
    let x = DenseMatrix::from_rows(vec![vec![zero, one], vec![one, zero]]);
    let build = |ctrl: &DenseMatrix, tgt: &DenseMatrix| {
        let factors: Vec<DenseMatrix> = (0..n)
            .map(|q| {
                if q == control {
                    ctrl.clone()
                } else if q == target {
                    tgt.clone()
                } else {
                    DenseMatrix::identity(2)
                }
            })
            .collect();
        kron_register(&factors)
    };
    let a = build(&p0, &DenseMatrix::identity(2));
    let b = build(&p1, &x);
    DenseMatrix {
        dim: a.dim,
        data: a.data.iter().zip(&b.data).map(|(u, v)| u + v).collect(),
    }
}

/// Full circuit unitary W(theta) U(x) built from explicit Kronecker products.
pub fn dense_circuit_unitary(x: &[f64], params: &CircuitParams, cfg: &AnsatzConfig) -> Result<DenseMatrix> {
    let n = cfg.n_qubits;
    if n > ORACLE_MAX_QUBITS {
        return Err(invalid(format!(
            "dense oracle supports at most {ORACLE_MAX_QUBITS} qubits, got {n}"
        )));
    }
    if x.is_empty() {
        return Err(invalid("feature vector is empty"));
    }
    if params.len() != cfg.depth * n * 3 {
        return Err(invalid("circuit parameter count does not match the ansatz"));
    }
    let angles = params.angles();
    let mut u = DenseMatrix::identity(1 << n);
    let mut then = |g: DenseMatrix| u = g.matmul(&u);

    for q in 0..n {
        then(oracle_single(n, q, oracle_rotation(Axis::Y, x[q % x.len()])));
    }
    for layer in 0..cfg.depth {
        for q in 0..n {
            let base = (layer * n + q) * 3;
            // RZ(gamma) RY(beta) RZ(alpha), alpha applied first
            let block = oracle_rotation(Axis::Z, angles[base + 2])
                .matmul(&oracle_rotation(Axis::Y, angles[base + 1]))
                .matmul(&oracle_rotation(Axis::Z, angles[base]));
            then(oracle_single(n, q, block));
        }
        if n > 1 {
            for q in 0..n {
                then(oracle_cnot(n, q, (q + 1) % n));
            }
        }
    }
    Ok(u)
}

/// Reference |psi> from the dense circuit unitary applied to |0...0>.
pub fn dense_circuit_oracle(x: &[f64], params: &CircuitParams, cfg: &AnsatzConfig) -> Result<StateVector> {
    let u = dense_circuit_unitary(x, params, cfg)?;
    let column: Vec<Complex64> = (0..u.dim()).map(|r| u.get(r, 0)).collect();
    StateVector::from_amplitudes(column)
}

/// sum_ij conj(psi_i) B_ij psi_j by a plain dense mat-vec, imaginary part kept.
pub fn dense_expectation(b: &HermitianMatrix, psi: &[Complex64]) -> Complex64 {
    let n = b.dim();
    let rows: Vec<Vec<Complex64>> = (0..n).map(|r| (0..n).map(|c| b.get(r, c)).collect()).collect();
    let bpsi = DenseMatrix::from_rows(rows).matvec(psi);
    psi.iter().zip(&bpsi).map(|(a, v)| a.conj() * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observable::hermitian_from_params;
    use std::f64::consts::PI;

    #[test]
    fn fd_quadratic() {
        let g = finite_difference(|p| p.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn fd_constant_and_sine() {
        let g = finite_difference(|_| 3.5, &[0.1, 0.2, 0.3], 1e-5).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let g = finite_difference(|p| p[0].sin(), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn fd_errors() {
        assert!(finite_difference(|p| p[0], &[0.0], 0.0).is_err());
        assert!(finite_difference(|p| 1.0 / p[0], &[1e-6], 1e-5).is_ok());
        assert!(finite_difference(|_| f64::NAN, &[0.0], 1e-5).is_err());
    }

    #[test]
    fn parameter_shift_single_ry() {
        let cfg = AnsatzConfig::new(1, 1).unwrap();
        for theta in [PI / 2.0, 0.3, -2.1] {
            let req = GradientRequest {
                x: vec![0.0],
                params: CircuitParams::new(vec![0.0, theta, 0.0], &cfg).unwrap(),
                cfg,
                measurement: Measurement::PauliZ(0),
            };
            let g = grad_expectation_wrt_angles(&req).unwrap();
            assert!((g[1] + theta.sin()).abs() < 1e-14, "theta={theta}");
            // RZ angles on |0> or |1> only add phase
            assert!(g[0].abs() < 1e-14 && g[2].abs() < 1e-14);
        }
    }

    #[test]
    fn zero_observable_zero_gradient() {
        let cfg = AnsatzConfig::new(2, 2).unwrap();
        let req = GradientRequest {
            x: vec![0.4, -0.3],
            params: CircuitParams::zeros(&cfg),
            cfg,
            measurement: Measurement::Params(ObservableParams::zeros(2)),
        };
        assert!(grad_expectation_wrt_angles(&req).unwrap().iter().all(|v| *v == 0.0));
        assert!(adjoint_grad_wrt_angles(&req).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adjoint_matches_parameter_shift() {
        let cfg = AnsatzConfig::new(3, 2).unwrap();
        let angles: Vec<f64> = (0..cfg.param_count()).map(|k| (k as f64 * 2.3).sin() * 3.0).collect();
        let obs: Vec<f64> = (0..64).map(|k| (k as f64 * 0.37).cos()).collect();
        for measurement in [
            Measurement::PauliZ(1),
            Measurement::Params(ObservableParams::new(3, obs.clone()).unwrap()),
            Measurement::Hermitian(hermitian_from_params(&ObservableParams::new(3, obs).unwrap())),
        ] {
            let req = GradientRequest {
                x: vec![0.8, -1.4],
                params: CircuitParams::new(angles.clone(), &cfg).unwrap(),
                cfg,
                measurement,
            };
            let ps = grad_expectation_wrt_angles(&req).unwrap();
            let adj = adjoint_grad_wrt_angles(&req).unwrap();
            for (a, b) in ps.iter().zip(&adj) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn oracle_trivial_cases() {
        let cfg = AnsatzConfig::new(2, 1).unwrap();
        let s = dense_circuit_oracle(&[0.0], &CircuitParams::zeros(&cfg), &cfg).unwrap();
        assert!((s.amplitudes()[0] - Complex64::new(1.0, 0.0)).norm() < 1e-15);

        let cfg1 = AnsatzConfig::new(1, 1).unwrap();
        let s = dense_circuit_oracle(&[0.0], &CircuitParams::new(vec![0.0, PI, 0.0], &cfg1).unwrap(), &cfg1).unwrap();
        assert!((s.amplitudes()[1].norm() - 1.0).abs() < 1e-15);

        let cfg5 = AnsatzConfig::new(5, 1).unwrap();
        assert!(dense_circuit_oracle(&[0.0], &CircuitParams::zeros(&cfg5), &cfg5).is_err());
    }

    #[test]
    fn oracle_cnot_little_endian() {
        // control qubit 1 set (index 2) -> target qubit 0 flips -> index 3
        let m = oracle_cnot(2, 1, 0);
        assert_eq!(m.get(3, 2), Complex64::new(1.0, 0.0));
        assert_eq!(m.get(0, 0), Complex64::new(1.0, 0.0));
        assert_eq!(m.get(1, 1), Complex64::new(1.0, 0.0));
    }
}
