//! The seven learning configurations: fixed or trained circuit angles,
//! Pauli-Z or trained Hermitian readout, and controller networks that
//! program angles and/or observable per input.
//!
//! Every variant exposes the same contract: a batched forward pass that
//! returns one [`ForwardCache`] per sample, a backward pass that accumulates
//! into a [`GradientSet`], and a step that applies each tensor's optimizer
//! to the batch-averaged gradient.
//!
//! Controller-emitted observables have N^2 outputs. The observable head is
//! streamed row by row: each emitted parameter is folded into <B> and B|psi>
//! as it is produced, so the full b(x) is never materialized during
//! training.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::Prng;
use crate::error::{invalid, Result};
use crate::gradients::{adjoint_sweep, grad_expectation_wrt_angles, GradientRequest, Measurement};
use crate::neural::{
    bce_loss, init_layer, linear_forward, sigmoid, sigmoid_backward, tanh_backward, EncoderDecoder, LinearLayer,
    OptimizerConfig, OptimizerState, ParamBuf, Precision,
};
use crate::observable::{apply_params, expectation_from_params, param_count, Entry, ObservableParams};
use crate::qstate::{forward_state, AnsatzConfig, CircuitParams, Gate};

/// Std of the Normal initialization for directly trained observables.
pub const OBSERVABLE_INIT_STD: f64 = 0.1;

/// Observable heads above this many qubits trigger a memory warning.
pub const FWP_OBSERVABLE_WARN_QUBITS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariantKind {
    #[serde(rename = "VQC")]
    Vqc,
    #[serde(rename = "VQC_LearnObs")]
    VqcLearnObs,
    #[serde(rename = "VQC_LearnObs_SepOpt")]
    VqcLearnObsSepOpt,
    #[serde(rename = "VQC_LearnObsOnly")]
    VqcLearnObsOnly,
    #[serde(rename = "FWP_CircuitParams")]
    FwpCircuitParams,
    #[serde(rename = "FWP_Observable")]
    FwpObservable,
    #[serde(rename = "FWP_Both")]
    FwpBoth,
}

impl VariantKind {
    pub const ALL: [VariantKind; 7] = [
        VariantKind::Vqc,
        VariantKind::VqcLearnObs,
        VariantKind::VqcLearnObsSepOpt,
        VariantKind::VqcLearnObsOnly,
        VariantKind::FwpCircuitParams,
        VariantKind::FwpObservable,
        VariantKind::FwpBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Vqc => "VQC",
            VariantKind::VqcLearnObs => "VQC_LearnObs",
            VariantKind::VqcLearnObsSepOpt => "VQC_LearnObs_SepOpt",
            VariantKind::VqcLearnObsOnly => "VQC_LearnObsOnly",
            VariantKind::FwpCircuitParams => "FWP_CircuitParams",
            VariantKind::FwpObservable => "FWP_Observable",
            VariantKind::FwpBoth => "FWP_Both",
        }
    }

    /// Whether the readout is a trained or programmed Hermitian matrix.
    pub fn learns_observable(self) -> bool {
        !matches!(self, VariantKind::Vqc | VariantKind::FwpCircuitParams)
    }

    pub fn is_fwp(self) -> bool {
        matches!(
            self,
            VariantKind::FwpCircuitParams | VariantKind::FwpObservable | VariantKind::FwpBoth
        )
    }

    /// Whether the circuit angles stay at their random initialization.
    pub fn freezes_theta(self) -> bool {
        matches!(self, VariantKind::VqcLearnObsOnly | VariantKind::FwpObservable)
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = crate::error::QmlError;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = VariantKind::ALL.iter().map(|k| k.name()).collect();
                invalid(format!("unknown variant '{s}'; valid kinds: {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    /// Directly trained circuit angles.
    pub circuit: f64,
    /// Directly trained observable parameters.
    pub observable: f64,
    /// Every controller network tensor.
    pub controller: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            circuit: 0.01,
            observable: 0.1,
            controller: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: VariantKind,
    pub ansatz: AnsatzConfig,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub readout_qubit: usize,
    pub rates: LearningRates,
    pub precision: Precision,
}

impl ModelSpec {
    pub fn new(kind: VariantKind, ansatz: AnsatzConfig, feature_dim: usize) -> Self {
        Self {
            kind,
            ansatz,
            feature_dim,
            latent_dim: 16,
            readout_qubit: 0,
            rates: LearningRates::default(),
            precision: Precision::Double,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(invalid("feature dimension must be positive"));
        }
        if self.latent_dim == 0 {
            return Err(invalid("latent dimension must be positive"));
        }
        if self.readout_qubit >= self.ansatz.n_qubits {
            return Err(invalid(format!(
                "readout qubit {} out of range for {} qubits",
                self.readout_qubit, self.ansatz.n_qubits
            )));
        }
        Ok(())
    }

    /// Bytes of trainable storage plus optimizer state.
    pub fn estimated_bytes(&self) -> usize {
        let n_obs = param_count(self.ansatz.dim());
        let n_theta = self.ansatz.param_count();
        let d = self.feature_dim;
        let h = self.latent_dim;
        let params = match self.kind {
            VariantKind::Vqc => n_theta,
            VariantKind::VqcLearnObs | VariantKind::VqcLearnObsSepOpt => n_theta + n_obs,
            VariantKind::VqcLearnObsOnly => n_obs,
            VariantKind::FwpCircuitParams => (d + 1) * n_theta,
            VariantKind::FwpObservable => (d + 1) * n_obs,
            VariantKind::FwpBoth => (d + 1) * h + (h + 1) * (n_theta + n_obs),
        };
        // values + gradient + one or two optimizer moments
        params * self.precision.bytes() * 4
    }
}

/// How d<B>/d(theta) is evaluated in the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AngleGradient {
    #[default]
    Adjoint,
    ParameterShift,
}

#[derive(Debug, Clone, PartialEq)]
struct Trainable {
    values: ParamBuf,
    opt: OptimizerState,
}

impl Trainable {
    fn new(values: ParamBuf, cfg: OptimizerConfig) -> Self {
        let opt = OptimizerState::new(cfg, values.len(), values.precision());
        Self { values, opt }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Controller {
    layer: LinearLayer,
    opt_w: OptimizerState,
    opt_b: OptimizerState,
}

impl Controller {
    fn new(layer: LinearLayer, cfg: OptimizerConfig) -> Self {
        let p = layer.precision();
        let opt_w = OptimizerState::new(cfg, layer.weights.len(), p);
        let opt_b = OptimizerState::new(cfg, layer.bias.len(), p);
        Self { layer, opt_w, opt_b }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Program {
    /// VQC, VQC_LearnObs, VQC_LearnObs_SepOpt, VQC_LearnObsOnly.
    Direct {
        theta: Option<Trainable>,
        frozen_theta: Option<CircuitParams>,
        observable: Option<Trainable>,
    },
    FwpCircuit {
        ctrl: Controller,
    },
    FwpObservable {
        theta: CircuitParams,
        ctrl: Controller,
    },
    FwpBoth {
        net: EncoderDecoder,
        opts: Vec<OptimizerState>,
    },
}

/// Per-sample `<B>`, per-sample `B|psi>`, and the emitted parameters.
type HeadOutput<K> = (Vec<f64>, Vec<Vec<Complex64>>, K);

/// Precomputed (i, j) for every strict-upper-triangle pair, row-major.
#[derive(Debug, Clone, PartialEq)]
struct PairTable {
    dim: usize,
    pairs: Vec<(u16, u16)>,
}

impl PairTable {
    fn new(dim: usize) -> Self {
        let mut pairs = Vec::with_capacity(dim * (dim - 1) / 2);
        for i in 0..dim {
            for j in i + 1..dim {
                pairs.push((i as u16, j as u16));
            }
        }
        Self { dim, pairs }
    }

    #[inline(always)]
    fn entry(&self, o: usize) -> Entry {
        if o < self.dim {
            return Entry::Diag(o);
        }
        let k = o - self.dim;
        let p = self.pairs.len();
        if k < p {
            let (i, j) = self.pairs[k];
            Entry::Re(i as usize, j as usize)
        } else {
            let (i, j) = self.pairs[k - p];
            Entry::Im(i as usize, j as usize)
        }
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub x: Vec<f64>,
    /// Encoder output (FWP_Both only).
    pub latent: Option<Vec<f64>>,
    /// Circuit angles actually used.
    pub theta: CircuitParams,
    /// Observable parameters actually used; kept for learnable readouts
    /// when the model runs in parameter-shift mode.
    pub observable: Option<Vec<f64>>,
    pub state: StateVector,
    /// B|psi>.
    pub applied: Vec<Complex64>,
    pub expectation: f64,
    pub probability: f64,
    generation: u64,
}

use crate::qstate::StateVector;

/// One gradient tensor per trainable tensor, in [`Model::tensor_names`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub names: Vec<&'static str>,
    pub tensors: Vec<ParamBuf>,
}

impl GradientSet {
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.to_vec()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&ParamBuf> {
        self.names.iter().position(|n| *n == name).map(|i| &self.tensors[i])
    }

    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        if self.names != other.names {
            return Err(invalid("gradient sets have different layouts"));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.tensors.iter_mut().for_each(ParamBuf::fill_zero);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    gates: Vec<Gate>,
    pairs: PairTable,
    program: Program,
    angle_gradient: AngleGradient,
    generation: u64,
}

impl Model {
    /// Builds the variant with all random state drawn from `rng`.
    pub fn init(spec: ModelSpec, rng: &mut Prng) -> Result<Self> {
        spec.validate()?;
        let cfg = spec.ansatz;
        let p = spec.precision;
        let rates = spec.rates;
        let n_obs = param_count(cfg.dim());
        let n_theta = cfg.param_count();

        let random_theta = |rng: &mut Prng| -> Vec<f64> { (0..n_theta).map(|_| rng.uniform_range(0.0, TAU)).collect() };
        let random_observable = |rng: &mut Prng| -> Vec<f64> {
            (0..n_obs).map(|_| OBSERVABLE_INIT_STD * rng.normal()).collect()
        };

        if spec.kind.learns_observable() && spec.kind.is_fwp() && cfg.n_qubits > FWP_OBSERVABLE_WARN_QUBITS {
            log::warn!(
                "{} on {} qubits programs {} observable parameters per input; expect about {:.1} GB of parameter and optimizer storage",
                spec.kind,
                cfg.n_qubits,
                n_obs,
                spec.estimated_bytes() as f64 / 1e9
            );
        }

        let program = match spec.kind {
            VariantKind::Vqc => Program::Direct {
                theta: Some(Trainable::new(
                    ParamBuf::from_f64(p, &random_theta(rng)),
                    OptimizerConfig::rmsprop(rates.circuit),
                )),
                frozen_theta: None,
                observable: None,
            },
            VariantKind::VqcLearnObs | VariantKind::VqcLearnObsSepOpt => {
                let theta = random_theta(rng);
                let obs = random_observable(rng);
                let obs_opt = if spec.kind == VariantKind::VqcLearnObs {
                    OptimizerConfig::rmsprop(rates.observable)
                } else {
                    OptimizerConfig::adam(rates.observable)
                };
                Program::Direct {
                    theta: Some(Trainable::new(ParamBuf::from_f64(p, &theta), OptimizerConfig::rmsprop(rates.circuit))),
                    frozen_theta: None,
                    observable: Some(Trainable::new(ParamBuf::from_f64(p, &obs), obs_opt)),
                }
            }
            VariantKind::VqcLearnObsOnly => {
                let theta = CircuitParams::new(random_theta(rng), &cfg)?;
                let obs = random_observable(rng);
                Program::Direct {
                    theta: None,
                    frozen_theta: Some(theta),
                    observable: Some(Trainable::new(
                        ParamBuf::from_f64(p, &obs),
                        OptimizerConfig::rmsprop(rates.observable),
                    )),
                }
            }
            VariantKind::FwpCircuitParams => Program::FwpCircuit {
                ctrl: Controller::new(
                    init_layer(spec.feature_dim, n_theta, rng, p)?,
                    OptimizerConfig::rmsprop(rates.controller),
                ),
            },
            VariantKind::FwpObservable => {
                let theta = CircuitParams::new(random_theta(rng), &cfg)?;
                Program::FwpObservable {
                    theta,
                    ctrl: Controller::new(
                        init_layer(spec.feature_dim, n_obs, rng, p)?,
                        OptimizerConfig::rmsprop(rates.controller),
                    ),
                }
            }
            VariantKind::FwpBoth => {
                let net = EncoderDecoder::init(spec.feature_dim, spec.latent_dim, n_theta, n_obs, rng, p)?;
                let cfg_opt = OptimizerConfig::rmsprop(rates.controller);
                let opts = [&net.encoder, &net.head_theta, &net.head_obs]
                    .iter()
                    .flat_map(|l| {
                        [
                            OptimizerState::new(cfg_opt, l.weights.len(), p),
                            OptimizerState::new(cfg_opt, l.bias.len(), p),
                        ]
                    })
                    .collect();
                Program::FwpBoth { net, opts }
            }
        };

        Ok(Self {
            spec,
            gates: cfg.gates(),
            pairs: PairTable::new(cfg.dim()),
            program,
            angle_gradient: AngleGradient::default(),
            generation: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> VariantKind {
        self.spec.kind
    }

    pub fn angle_gradient(&self) -> AngleGradient {
        self.angle_gradient
    }

    pub fn set_angle_gradient(&mut self, mode: AngleGradient) {
        self.angle_gradient = mode;
    }

    pub fn tensor_names(&self) -> Vec<&'static str> {
        match &self.program {
            Program::Direct { theta, observable, .. } => {
                let mut names = Vec::new();
                if theta.is_some() {
                    names.push("theta");
                }
                if observable.is_some() {
                    names.push("observable");
                }
                names
            }
            Program::FwpCircuit { .. } | Program::FwpObservable { .. } => vec!["controller.weight", "controller.bias"],
            Program::FwpBoth { .. } => vec![
                "encoder.weight",
                "encoder.bias",
                "head_theta.weight",
                "head_theta.bias",
                "head_obs.weight",
                "head_obs.bias",
            ],
        }
    }

    /// Mutable views of every trainable tensor with its optimizer, in
    /// [`Model::tensor_names`] order. Invalidates outstanding caches.
    fn slots_mut(&mut self) -> Vec<(&mut ParamBuf, &mut OptimizerState)> {
        self.generation += 1;
        match &mut self.program {
            Program::Direct { theta, observable, .. } => theta
                .iter_mut()
                .chain(observable.iter_mut())
                .map(|t| (&mut t.values, &mut t.opt))
                .collect(),
            Program::FwpCircuit { ctrl } | Program::FwpObservable { ctrl, .. } => vec![
                (&mut ctrl.layer.weights, &mut ctrl.opt_w),
                (&mut ctrl.layer.bias, &mut ctrl.opt_b),
            ],
            Program::FwpBoth { net, opts } => {
                let EncoderDecoder {
                    encoder,
                    head_theta,
                    head_obs,
                } = net;
                let bufs = [
                    &mut encoder.weights,
                    &mut encoder.bias,
                    &mut head_theta.weights,
                    &mut head_theta.bias,
                    &mut head_obs.weights,
                    &mut head_obs.bias,
                ];
                bufs.into_iter().zip(opts.iter_mut()).collect()
            }
        }
    }

    fn tensors(&self) -> Vec<&ParamBuf> {
        match &self.program {
            Program::Direct { theta, observable, .. } => {
                theta.iter().chain(observable.iter()).map(|t| &t.values).collect()
            }
            Program::FwpCircuit { ctrl } | Program::FwpObservable { ctrl, .. } => {
                vec![&ctrl.layer.weights, &ctrl.layer.bias]
            }
            Program::FwpBoth { net, .. } => vec![
                &net.encoder.weights,
                &net.encoder.bias,
                &net.head_theta.weights,
                &net.head_theta.bias,
                &net.head_obs.weights,
                &net.head_obs.bias,
            ],
        }
    }

    pub fn optimizers(&self) -> Vec<&OptimizerState> {
        match &self.program {
            Program::Direct { theta, observable, .. } => theta.iter().chain(observable.iter()).map(|t| &t.opt).collect(),
            Program::FwpCircuit { ctrl } | Program::FwpObservable { ctrl, .. } => vec![&ctrl.opt_w, &ctrl.opt_b],
            Program::FwpBoth { opts, .. } => opts.iter().collect(),
        }
    }

    pub fn zero_gradients(&self) -> GradientSet {
        GradientSet {
            names: self.tensor_names(),
            tensors: self
                .tensors()
                .iter()
                .map(|t| ParamBuf::zeros(t.precision(), t.len()))
                .collect(),
        }
    }

    /// All trainable values concatenated in tensor order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.to_vec()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self.tensors().iter().map(|t| t.len()).sum();
        if values.len() != total {
            return Err(invalid(format!("expected {total} parameters, got {}", values.len())));
        }
        let mut offset = 0;
        for (buf, _) in self.slots_mut() {
            for i in 0..buf.len() {
                buf.set(i, values[offset + i]);
            }
            offset += buf.len();
        }
        Ok(())
    }

    /// Digest of the circuit angles used when they are not input-dependent.
    pub fn theta_checksum(&self) -> Option<u64> {
        match &self.program {
            Program::Direct { theta: Some(t), .. } => Some(t.values.checksum()),
            Program::Direct {
                frozen_theta: Some(t), ..
            }
            | Program::FwpObservable { theta: t, .. } => {
                Some(ParamBuf::from_f64(Precision::Double, t.angles()).checksum())
            }
            _ => None,
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.feature_dim {
            return Err(invalid(format!(
                "expected {} features, got {}",
                self.spec.feature_dim,
                x.len()
            )));
        }
        Ok(())
    }

    fn latent(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        match &self.program {
            Program::FwpBoth { net, .. } => Ok(Some(net.latent(x)?)),
            _ => Ok(None),
        }
    }

    fn effective_theta_with(&self, x: &[f64], latent: Option<&[f64]>) -> Result<CircuitParams> {
        let cfg = &self.spec.ansatz;
        let angles = match &self.program {
            Program::Direct { theta: Some(t), .. } => t.values.to_vec(),
            Program::Direct {
                frozen_theta: Some(t), ..
            }
            | Program::FwpObservable { theta: t, .. } => return Ok(t.clone()),
            Program::Direct { .. } => unreachable!("direct programs always carry angles"),
            Program::FwpCircuit { ctrl } => linear_forward(&ctrl.layer, x)?,
            Program::FwpBoth { net, .. } => {
                let h = latent.expect("FWP_Both forward computes the latent first");
                linear_forward(&net.head_theta, h)?
            }
        };
        CircuitParams::new(angles, cfg)
    }

    /// Circuit angles used for input `x`.
    pub fn effective_theta(&self, x: &[f64]) -> Result<CircuitParams> {
        self.check_input(x)?;
        let latent = self.latent(x)?;
        self.effective_theta_with(x, latent.as_deref())
    }

    /// Observable parameters used for input `x`, or `None` for Pauli-Z readout.
    pub fn emitted_observable(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        self.check_input(x)?;
        Ok(match &self.program {
            Program::Direct {
                observable: Some(t), ..
            } => Some(t.values.to_vec()),
            Program::Direct { .. } | Program::FwpCircuit { .. } => None,
            Program::FwpObservable { ctrl, .. } => Some(linear_forward(&ctrl.layer, x)?),
            Program::FwpBoth { net, .. } => Some(linear_forward(&net.head_obs, &net.latent(x)?)?),
        })
    }

    /// Streams an observable head over the batch, returning `(<B>, B|psi>)`
    /// per sample and optionally the emitted parameters.
    fn stream_observable(
        &self,
        head: &LinearLayer,
        head_inputs: &[&[f64]],
        states: &[StateVector],
        keep: bool,
    ) -> Result<HeadOutput<Option<Vec<Vec<f64>>>>> {
        let batch = states.len();
        let dim = self.spec.ansatz.dim();
        let mut exps = vec![0.0; batch];
        let mut applied = vec![vec![Complex64::new(0.0, 0.0); dim]; batch];
        let mut kept = keep.then(|| vec![vec![0.0; head.out_dim()]; batch]);
        let pairs = &self.pairs;
        head.stream_forward(head_inputs, |o, s, b| {
            let entry = pairs.entry(o);
            let psi = states[s].amplitudes();
            exps[s] += b * entry.gradient(psi);
            entry.accumulate_apply(b, psi, &mut applied[s]);
            if let Some(k) = kept.as_mut() {
                k[s][o] = b;
            }
        })?;
        Ok((exps, applied, kept))
    }

    /// Forward pass for a batch of inputs.
    pub fn forward_batch(&self, xs: &[&[f64]]) -> Result<Vec<ForwardCache>> {
        for x in xs {
            self.check_input(x)?;
        }
        let cfg = &self.spec.ansatz;
        let keep_obs = self.angle_gradient == AngleGradient::ParameterShift;

        let latents: Vec<Option<Vec<f64>>> = xs.iter().map(|x| self.latent(x)).collect::<Result<_>>()?;
        let thetas: Vec<CircuitParams> = xs
            .iter()
            .zip(&latents)
            .map(|(x, h)| self.effective_theta_with(x, h.as_deref()))
            .collect::<Result<_>>()?;
        let states: Vec<StateVector> = xs
            .iter()
            .zip(&thetas)
            .map(|(x, t)| forward_state(x, t, cfg))
            .collect::<Result<_>>()?;

        let (exps, applied, observables): HeadOutput<Vec<Option<Vec<f64>>>> = match &self.program {
            Program::Direct {
                observable: Some(t), ..
            } => {
                let b = t.values.to_vec();
                let exps = states.iter().map(|s| expectation_from_params(s.amplitudes(), &b)).collect();
                let applied = states.iter().map(|s| apply_params(s.amplitudes(), &b)).collect();
                let obs = states.iter().map(|_| keep_obs.then(|| b.clone())).collect();
                (exps, applied, obs)
            }
            Program::Direct { .. } | Program::FwpCircuit { .. } => {
                let m = Measurement::PauliZ(self.spec.readout_qubit);
                let exps = states.iter().map(|s| m.expectation(s)).collect::<Result<_>>()?;
                let applied = states.iter().map(|s| m.apply(s)).collect::<Result<_>>()?;
                (exps, applied, vec![None; xs.len()])
            }
            Program::FwpObservable { ctrl, .. } => {
                let (e, a, k) = self.stream_observable(&ctrl.layer, xs, &states, keep_obs)?;
                (e, a, unzip_kept(k, xs.len()))
            }
            Program::FwpBoth { net, .. } => {
                let hs: Vec<&[f64]> = latents.iter().map(|h| h.as_deref().expect("latent")).collect();
                let (e, a, k) = self.stream_observable(&net.head_obs, &hs, &states, keep_obs)?;
                (e, a, unzip_kept(k, xs.len()))
            }
        };

        let mut caches = Vec::with_capacity(xs.len());
        for (s, ((((x, latent), theta), state), observable)) in xs
            .iter()
            .zip(latents)
            .zip(thetas)
            .zip(states)
            .zip(observables)
            .enumerate()
        {
            let e = exps[s];
            caches.push(ForwardCache {
                x: x.to_vec(),
                latent,
                theta,
                observable,
                state,
                applied: applied[s].clone(),
                expectation: e,
                probability: sigmoid(e),
                generation: self.generation,
            });
        }
        Ok(caches)
    }

    /// `(p, cache)` for a single input.
    pub fn forward(&self, x: &[f64]) -> Result<(f64, ForwardCache)> {
        let cache = self.forward_batch(&[x])?.pop().expect("one cache per input");
        Ok((cache.probability, cache))
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward(x)?.0)
    }

    /// BCE loss of a single labelled sample.
    pub fn loss(&self, x: &[f64], y: f64) -> Result<f64> {
        Ok(bce_loss(self.predict_proba(x)?, y).0)
    }

    fn angle_grad(&self, cache: &ForwardCache) -> Result<Vec<f64>> {
        match self.angle_gradient {
            AngleGradient::Adjoint => Ok(adjoint_sweep(
                cache.state.clone(),
                cache.applied.clone(),
                &self.gates,
                cache.theta.angles(),
            )),
            AngleGradient::ParameterShift => {
                let measurement = match &cache.observable {
                    Some(b) => Measurement::Params(ObservableParams::new(self.spec.ansatz.n_qubits, b.clone())?),
                    None if self.kind().learns_observable() => {
                        return Err(invalid("cache lacks the observable needed for parameter shift"))
                    }
                    None => Measurement::PauliZ(self.spec.readout_qubit),
                };
                grad_expectation_wrt_angles(&GradientRequest {
                    x: cache.x.clone(),
                    params: cache.theta.clone(),
                    cfg: self.spec.ansatz,
                    measurement,
                })
            }
        }
    }

    /// Accumulates the summed (not averaged) gradients of the BCE loss over
    /// the batch into `grads` and returns the summed loss.
    pub fn accumulate_gradients(&self, caches: &[ForwardCache], labels: &[f64], grads: &mut GradientSet) -> Result<f64> {
        if caches.len() != labels.len() {
            return Err(invalid("one label per cache is required"));
        }
        if grads.names != self.tensor_names() {
            return Err(invalid("gradient set does not belong to this model"));
        }
        if let Some(stale) = caches.iter().find(|c| c.generation != self.generation) {
            return Err(invalid(format!(
                "stale forward cache (generation {} vs model {})",
                stale.generation, self.generation
            )));
        }

        let mut loss = 0.0;
        let mut dl_de = Vec::with_capacity(caches.len());
        for (c, &y) in caches.iter().zip(labels) {
            let (l, dl_dp) = bce_loss(c.probability, y);
            loss += l;
            dl_de.push(sigmoid_backward(c.expectation, dl_dp));
        }

        let needs_angles = !self.kind().freezes_theta();
        let angle_grads: Vec<Vec<f64>> = if needs_angles {
            caches.iter().map(|c| self.angle_grad(c)).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let pairs = &self.pairs;
        let psi_of = |s: usize| caches[s].state.amplitudes();
        let xs: Vec<&[f64]> = caches.iter().map(|c| c.x.as_slice()).collect();

        match &self.program {
            Program::Direct { theta, observable, .. } => {
                let mut slot = 0;
                if theta.is_some() {
                    let mut up = vec![0.0; self.spec.ansatz.param_count()];
                    for (g, d) in angle_grads.iter().zip(&dl_de) {
                        up.iter_mut().zip(g).for_each(|(u, gk)| *u += d * gk);
                    }
                    grads.tensors[slot].add_assign(&ParamBuf::from_f64(self.spec.precision, &up))?;
                    slot += 1;
                }
                if observable.is_some() {
                    let n_obs = param_count(self.spec.ansatz.dim());
                    let mut up = vec![0.0; n_obs];
                    for (s, d) in dl_de.iter().enumerate() {
                        let psi = psi_of(s);
                        for (o, u) in up.iter_mut().enumerate() {
                            *u += d * pairs.entry(o).gradient(psi);
                        }
                    }
                    grads.tensors[slot].add_assign(&ParamBuf::from_f64(self.spec.precision, &up))?;
                }
            }
            Program::FwpCircuit { ctrl } => {
                let (gw, gb) = split_pair(&mut grads.tensors, 0);
                let mut gx = vec![vec![0.0; self.spec.feature_dim]; caches.len()];
                ctrl.layer
                    .stream_backward(&xs, |o, s| dl_de[s] * angle_grads[s][o], gw, gb, &mut gx)?;
            }
            Program::FwpObservable { ctrl, .. } => {
                let (gw, gb) = split_pair(&mut grads.tensors, 0);
                let mut gx = vec![vec![0.0; self.spec.feature_dim]; caches.len()];
                ctrl.layer.stream_backward(
                    &xs,
                    |o, s| dl_de[s] * pairs.entry(o).gradient(psi_of(s)),
                    gw,
                    gb,
                    &mut gx,
                )?;
            }
            Program::FwpBoth { net, .. } => {
                let hs: Vec<&[f64]> = caches
                    .iter()
                    .map(|c| c.latent.as_deref().expect("FWP_Both caches carry the latent"))
                    .collect();
                let mut grad_h = vec![vec![0.0; self.spec.latent_dim]; caches.len()];
                {
                    let (gw, gb) = split_pair(&mut grads.tensors, 4);
                    net.head_obs.stream_backward(
                        &hs,
                        |o, s| dl_de[s] * pairs.entry(o).gradient(psi_of(s)),
                        gw,
                        gb,
                        &mut grad_h,
                    )?;
                }
                {
                    let (gw, gb) = split_pair(&mut grads.tensors, 2);
                    net.head_theta
                        .stream_backward(&hs, |o, s| dl_de[s] * angle_grads[s][o], gw, gb, &mut grad_h)?;
                }
                let dz: Vec<Vec<f64>> = hs.iter().zip(&grad_h).map(|(h, g)| tanh_backward(h, g)).collect();
                let (gw, gb) = split_pair(&mut grads.tensors, 0);
                let mut gx = vec![vec![0.0; self.spec.feature_dim]; caches.len()];
                net.encoder.stream_backward(&xs, |o, s| dz[s][o], gw, gb, &mut gx)?;
            }
        }
        Ok(loss)
    }

    /// Gradient of the single-sample loss.
    pub fn backward(&self, cache: &ForwardCache, y: f64) -> Result<GradientSet> {
        let mut grads = self.zero_gradients();
        self.accumulate_gradients(std::slice::from_ref(cache), &[y], &mut grads)?;
        Ok(grads)
    }

    /// Applies each tensor's optimizer once, using `grads / batch_size`.
    pub fn step(&mut self, grads: &GradientSet, batch_size: usize) -> Result<()> {
        if batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if grads.names != self.tensor_names() {
            return Err(invalid("gradient set does not belong to this model"));
        }
        let scale = 1.0 / batch_size as f64;
        for ((buf, opt), g) in self.slots_mut().into_iter().zip(&grads.tensors) {
            opt.step_scaled(buf, g, scale)?;
        }
        Ok(())
    }
}

fn unzip_kept(kept: Option<Vec<Vec<f64>>>, n: usize) -> Vec<Option<Vec<f64>>> {
    match kept {
        Some(k) => k.into_iter().map(Some).collect(),
        None => vec![None; n],
    }
}

fn split_pair(tensors: &mut [ParamBuf], at: usize) -> (&mut ParamBuf, &mut ParamBuf) {
    let (a, b) = tensors[at..].split_at_mut(1);
    (&mut a[0], &mut b[0])
}
