//! Fast self-check of gradients and simulator invariants, runnable from the
//! command line on any install.

use std::f64::consts::TAU;

use crate::data::Prng;
use crate::error::Result;
use crate::gradients::{
    adjoint_grad_wrt_angles, dense_circuit_oracle, finite_difference, grad_expectation_wrt_angles,
    within_tolerance, GradientRequest, Measurement,
};
use crate::models::{Model, ModelSpec, VariantKind};
use crate::observable::{
    eigen_bounds, expectation, expectation_from_params, expectation_grad_params, hermitian_from_params,
    param_count, params_from_hermitian, ObservableParams,
};
use crate::qstate::{forward_state, AnsatzConfig, CircuitParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_request(rng: &mut Prng) -> Result<GradientRequest> {
    let n = 1 + rng.below(3) as usize;
    let cfg = AnsatzConfig::new(n, 1 + rng.below(2) as usize)?;
    let angles = (0..cfg.param_count()).map(|_| rng.uniform_range(0.0, TAU)).collect();
    let x = (0..1 + rng.below(3) as usize).map(|_| rng.normal()).collect();
    let values = (0..param_count(cfg.dim())).map(|_| rng.normal()).collect();
    Ok(GradientRequest {
        x,
        params: CircuitParams::new(angles, &cfg)?,
        cfg,
        measurement: Measurement::Params(ObservableParams::new(n, values)?),
    })
}

fn max_violation(got: &[f64], want: &[f64], rel: f64, abs: f64) -> Option<(usize, f64, f64)> {
    got.iter()
        .zip(want)
        .enumerate()
        .find(|(_, (g, w))| !within_tolerance(**g, **w, rel, abs))
        .map(|(i, (g, w))| (i, *g, *w))
}

fn check(name: &'static str, cases: usize, f: impl FnOnce() -> Result<Option<String>>) -> Check {
    match f() {
        Ok(None) => Check {
            name,
            passed: true,
            detail: format!("{cases} cases"),
        },
        Ok(Some(detail)) => Check {
            name,
            passed: false,
            detail,
        },
        Err(e) => Check {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Runs every check with a fixed seed.
pub fn run_selftest() -> Vec<Check> {
    let mut rng = Prng::new(2024, 99);
    let mut out = Vec::new();

    out.push(check("parameter shift vs finite differences", 30, || {
        for _ in 0..30 {
            let req = random_request(&mut rng)?;
            let ps = grad_expectation_wrt_angles(&req)?;
            let fd = finite_difference(
                |a| {
                    let p = CircuitParams::new(a.to_vec(), &req.cfg).expect("valid angles");
                    let s = forward_state(&req.x, &p, &req.cfg).expect("valid circuit");
                    req.measurement.expectation(&s).expect("matching dimension")
                },
                req.params.angles(),
                1e-5,
            )?;
            if let Some((i, g, w)) = max_violation(&ps, &fd, 1e-5, 1e-8) {
                return Ok(Some(format!("angle {i}: shift {g} vs fd {w}")));
            }
        }
        Ok(None)
    }));

    out.push(check("adjoint vs parameter shift", 30, || {
        for _ in 0..30 {
            let req = random_request(&mut rng)?;
            let a = adjoint_grad_wrt_angles(&req)?;
            let ps = grad_expectation_wrt_angles(&req)?;
            if let Some((i, g, w)) = max_violation(&a, &ps, 1e-9, 1e-11) {
                return Ok(Some(format!("angle {i}: adjoint {g} vs shift {w}")));
            }
        }
        Ok(None)
    }));

    out.push(check("observable gradient vs finite differences", 30, || {
        for _ in 0..30 {
            let req = random_request(&mut rng)?;
            let state = forward_state(&req.x, &req.params, &req.cfg)?;
            let analytic = expectation_grad_params(&state);
            let b: Vec<f64> = (0..analytic.len()).map(|_| rng.normal()).collect();
            let fd = finite_difference(|v| expectation_from_params(state.amplitudes(), v), &b, 1e-5)?;
            if let Some((i, g, w)) = max_violation(&analytic, &fd, 1e-5, 1e-8) {
                return Ok(Some(format!("parameter {i}: analytic {g} vs fd {w}")));
            }
        }
        Ok(None)
    }));

    out.push(check("simulator vs dense oracle", 30, || {
        for _ in 0..30 {
            let n = 1 + rng.below(4) as usize;
            let cfg = AnsatzConfig::new(n, 1 + rng.below(3) as usize)?;
            let angles = (0..cfg.param_count()).map(|_| rng.uniform_range(0.0, TAU)).collect();
            let params = CircuitParams::new(angles, &cfg)?;
            let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let fast = forward_state(&x, &params, &cfg)?;
            let dense = dense_circuit_oracle(&x, &params, &cfg)?;
            let err = fast
                .amplitudes()
                .iter()
                .zip(dense.amplitudes())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            if err >= 1e-10 {
                return Ok(Some(format!("n={n}: amplitude error {err:e}")));
            }
        }
        Ok(None)
    }));

    out.push(check("expectation within eigenvalue range", 100, || {
        for _ in 0..100 {
            let req = random_request(&mut rng)?;
            let Measurement::Params(p) = &req.measurement else { unreachable!() };
            let b = hermitian_from_params(p);
            let state = forward_state(&req.x, &req.params, &req.cfg)?;
            let e = expectation(&state, &b)?;
            let (lo, hi) = eigen_bounds(&b)?;
            if e < lo - 1e-8 || e > hi + 1e-8 {
                return Ok(Some(format!("<B> = {e} outside [{lo}, {hi}]")));
            }
            if params_from_hermitian(&b) != *p {
                return Ok(Some("Hermitian round trip changed the parameters".into()));
            }
        }
        Ok(None)
    }));

    out.push(check("model gradients vs finite differences", 7, || {
        for kind in VariantKind::ALL {
            let mut spec = ModelSpec::new(kind, AnsatzConfig::new(2, 2)?, 2);
            spec.latent_dim = 4;
            let model = Model::init(spec, &mut rng)?;
            let x = [rng.normal(), rng.normal()];
            let y = f64::from(rng.below(2));
            let (_, cache) = model.forward(&x)?;
            let analytic = model.backward(&cache, y)?.flatten();
            let fd = finite_difference(
                |p| {
                    let mut m = model.clone();
                    m.set_flat_params(p).expect("same layout");
                    m.loss(&x, y).expect("valid input")
                },
                &model.flat_params(),
                1e-5,
            )?;
            if let Some((i, g, w)) = max_violation(&analytic, &fd, 1e-4, 1e-7) {
                return Ok(Some(format!("{kind} parameter {i}: analytic {g} vs fd {w}")));
            }
        }
        Ok(None)
    }));

    out
}

#[cfg(test)]
mod tests {
    #[test]
    fn selftest_passes() {
        for c in super::run_selftest() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
