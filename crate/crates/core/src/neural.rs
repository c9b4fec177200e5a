//! Hand-wired dense layers, activations, binary cross-entropy and the
//! RMSProp / Adam optimizers.
//!
//! Parameter tensors live in a [`ParamBuf`] whose storage precision is
//! chosen per run. A 12-qubit observable head holds tens of millions of
//! weights, so single precision halves the footprint; all arithmetic is
//! still carried out in f64.

use serde::{Deserialize, Serialize};

use crate::data::Prng;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Double,
    Single,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::Double => 8,
            Precision::Single => 4,
        }
    }
}

pub trait Real: Copy + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Real for f64 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl Real for f32 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamBuf {
    Double(Vec<f64>),
    Single(Vec<f32>),
}

/// Runs `$body` with `$v` bound to the typed vector inside a [`ParamBuf`].
macro_rules! with_buf {
    ($buf:expr, $v:ident => $body:expr) => {
        match $buf {
            $crate::neural::ParamBuf::Double($v) => $body,
            $crate::neural::ParamBuf::Single($v) => $body,
        }
    };
}

impl ParamBuf {
    pub fn zeros(precision: Precision, len: usize) -> Self {
        match precision {
            Precision::Double => ParamBuf::Double(vec![0.0; len]),
            Precision::Single => ParamBuf::Single(vec![0.0; len]),
        }
    }

    pub fn from_f64(precision: Precision, values: &[f64]) -> Self {
        match precision {
            Precision::Double => ParamBuf::Double(values.to_vec()),
            Precision::Single => ParamBuf::Single(values.iter().map(|v| *v as f32).collect()),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            ParamBuf::Double(_) => Precision::Double,
            ParamBuf::Single(_) => Precision::Single,
        }
    }

    pub fn len(&self) -> usize {
        with_buf!(self, v => v.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        with_buf!(self, v => v[i].to_f64())
    }

    pub fn set(&mut self, i: usize, value: f64) {
        with_buf!(self, v => v[i] = Real::from_f64(value))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        with_buf!(self, v => v.iter().map(|x| x.to_f64()).collect())
    }

    pub fn fill_zero(&mut self) {
        with_buf!(self, v => v.iter_mut().for_each(|x| *x = Real::from_f64(0.0)))
    }

    pub fn scale(&mut self, factor: f64) {
        with_buf!(self, v => v.iter_mut().for_each(|x| *x = Real::from_f64(x.to_f64() * factor)))
    }

    /// Adds `other` elementwise. Both buffers must share length and precision.
    pub fn add_assign(&mut self, other: &ParamBuf) -> Result<()> {
        check_len(self.len(), other.len())?;
        match (self, other) {
            (ParamBuf::Double(a), ParamBuf::Double(b)) => add_kernel(a, b),
            (ParamBuf::Single(a), ParamBuf::Single(b)) => add_kernel(a, b),
            _ => return Err(invalid("parameter buffers differ in precision")),
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        with_buf!(self, v => v.iter().all(|x| x.to_f64().is_finite()))
    }

    /// Order-sensitive digest of the exact stored bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bits: u64| {
            h ^= bits;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        match self {
            ParamBuf::Double(v) => v.iter().for_each(|x| eat(x.to_bits())),
            ParamBuf::Single(v) => v.iter().for_each(|x| eat(x.to_bits() as u64)),
        }
        h
    }
}

fn add_kernel<T: Real>(a: &mut [T], b: &[T]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x = T::from_f64(x.to_f64() + y.to_f64());
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(invalid(format!("dimension mismatch: expected {expected}, got {got}")));
    }
    Ok(())
}

/// `weights * x + bias`, weights stored row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    in_dim: usize,
    out_dim: usize,
    pub weights: ParamBuf,
    pub bias: ParamBuf,
}

impl LinearLayer {
    pub fn new(in_dim: usize, out_dim: usize, weights: ParamBuf, bias: ParamBuf) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(invalid("layer dimensions must be positive"));
        }
        check_len(in_dim * out_dim, weights.len())?;
        check_len(out_dim, bias.len())?;
        if weights.precision() != bias.precision() {
            return Err(invalid("weights and bias must share a precision"));
        }
        if !weights.is_finite() || !bias.is_finite() {
            return Err(invalid("layer parameters must be finite"));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    pub fn from_f64(in_dim: usize, out_dim: usize, weights: &[f64], bias: &[f64]) -> Result<Self> {
        Self::new(
            in_dim,
            out_dim,
            ParamBuf::from_f64(Precision::Double, weights),
            ParamBuf::from_f64(Precision::Double, bias),
        )
    }

    pub fn zeros(in_dim: usize, out_dim: usize, precision: Precision) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: ParamBuf::zeros(precision, in_dim * out_dim),
            bias: ParamBuf::zeros(precision, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn precision(&self) -> Precision {
        self.weights.precision()
    }

    /// Zeroed `(weights, bias)` gradient buffers in the layer's precision.
    pub fn zero_grads(&self) -> (ParamBuf, ParamBuf) {
        (
            ParamBuf::zeros(self.precision(), self.weights.len()),
            ParamBuf::zeros(self.precision(), self.bias.len()),
        )
    }

    fn check_inputs(&self, inputs: &[&[f64]]) -> Result<()> {
        for x in inputs {
            check_len(self.in_dim, x.len())?;
        }
        Ok(())
    }

    /// Evaluates the layer on a batch in a single pass over the weights,
    /// handing each output `(row, sample, value)` to `sink` instead of
    /// materializing it.
    pub fn stream_forward<F>(&self, inputs: &[&[f64]], sink: F) -> Result<()>
    where
        F: FnMut(usize, usize, f64),
    {
        self.check_inputs(inputs)?;
        match (&self.weights, &self.bias) {
            (ParamBuf::Double(w), ParamBuf::Double(b)) => stream_forward_kernel(w, b, self.in_dim, inputs, sink),
            (ParamBuf::Single(w), ParamBuf::Single(b)) => stream_forward_kernel(w, b, self.in_dim, inputs, sink),
            _ => unreachable!("constructor enforces matching precision"),
        }
        Ok(())
    }

    /// Backward pass for a batch in a single pass over the weights.
    /// `upstream(row, sample)` yields dL/d(output). Parameter gradients are
    /// accumulated into `grad_weights` / `grad_bias`; input gradients into
    /// `grad_inputs`.
    pub fn stream_backward<F>(
        &self,
        inputs: &[&[f64]],
        upstream: F,
        grad_weights: &mut ParamBuf,
        grad_bias: &mut ParamBuf,
        grad_inputs: &mut [Vec<f64>],
    ) -> Result<()>
    where
        F: FnMut(usize, usize) -> f64,
    {
        self.check_inputs(inputs)?;
        check_len(inputs.len(), grad_inputs.len())?;
        for g in grad_inputs.iter() {
            check_len(self.in_dim, g.len())?;
        }
        check_len(self.weights.len(), grad_weights.len())?;
        check_len(self.bias.len(), grad_bias.len())?;
        match (&self.weights, grad_weights, grad_bias) {
            (ParamBuf::Double(w), ParamBuf::Double(gw), ParamBuf::Double(gb)) => {
                stream_backward_kernel(w, gw, gb, self.in_dim, inputs, upstream, grad_inputs)
            }
            (ParamBuf::Single(w), ParamBuf::Single(gw), ParamBuf::Single(gb)) => {
                stream_backward_kernel(w, gw, gb, self.in_dim, inputs, upstream, grad_inputs)
            }
            _ => return Err(invalid("gradient buffers differ in precision from the layer")),
        }
        Ok(())
    }
}

#[inline(always)]
fn dot<T: Real>(w: &[T], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a.to_f64() * b).sum()
}

fn stream_forward_kernel<T: Real, F>(w: &[T], b: &[T], in_dim: usize, inputs: &[&[f64]], mut sink: F)
where
    F: FnMut(usize, usize, f64),
{
    for (o, row) in w.chunks_exact(in_dim).enumerate() {
        let bias = b[o].to_f64();
        for (s, x) in inputs.iter().enumerate() {
            sink(o, s, dot(row, x) + bias);
        }
    }
}

fn stream_backward_kernel<T: Real, F>(
    w: &[T],
    gw: &mut [T],
    gb: &mut [T],
    in_dim: usize,
    inputs: &[&[f64]],
    mut upstream: F,
    grad_inputs: &mut [Vec<f64>],
) where
    F: FnMut(usize, usize) -> f64,
{
    for (o, (row, grow)) in w.chunks_exact(in_dim).zip(gw.chunks_exact_mut(in_dim)).enumerate() {
        let mut bias_acc = 0.0;
        for (s, x) in inputs.iter().enumerate() {
            let u = upstream(o, s);
            if u == 0.0 {
                continue;
            }
            bias_acc += u;
            for (g, xi) in grow.iter_mut().zip(x.iter()) {
                *g = T::from_f64(g.to_f64() + u * xi);
            }
            for (gx, wi) in grad_inputs[s].iter_mut().zip(row) {
                *gx += wi.to_f64() * u;
            }
        }
        gb[o] = T::from_f64(gb[o].to_f64() + bias_acc);
    }
}

pub fn linear_forward(layer: &LinearLayer, x: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; layer.out_dim];
    layer.stream_forward(&[x], |o, _, v| out[o] = v)?;
    Ok(out)
}

/// Returns `(grad_weights, grad_bias, grad_x)` for a single sample.
pub fn linear_backward(layer: &LinearLayer, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    check_len(layer.out_dim, upstream.len())?;
    let (mut gw, mut gb) = layer.zero_grads();
    let mut grad_x = vec![vec![0.0; layer.in_dim]];
    layer.stream_backward(&[x], |o, _| upstream[o], &mut gw, &mut gb, &mut grad_x)?;
    Ok((gw.to_vec(), gb.to_vec(), grad_x.pop().unwrap_or_default()))
}

/// Weights and bias i.i.d. Uniform(-1/sqrt(in_dim), 1/sqrt(in_dim)).
pub fn init_layer(in_dim: usize, out_dim: usize, rng: &mut Prng, precision: Precision) -> Result<LinearLayer> {
    if in_dim == 0 || out_dim == 0 {
        return Err(invalid("layer dimensions must be positive"));
    }
    let bound = 1.0 / (in_dim as f64).sqrt();
    let mut draw = |len: usize| {
        let mut buf = ParamBuf::zeros(precision, len);
        for i in 0..len {
            buf.set(i, rng.uniform_range(-bound, bound));
        }
        buf
    };
    let weights = draw(in_dim * out_dim);
    let bias = draw(out_dim);
    LinearLayer::new(in_dim, out_dim, weights, bias)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// upstream * sigma'(z), with sigma' = sigma (1 - sigma).
pub fn sigmoid_backward(z: f64, upstream: f64) -> f64 {
    let s = sigmoid(z);
    upstream * s * (1.0 - s)
}

pub fn tanh_forward(z: &[f64]) -> Vec<f64> {
    z.iter().map(|v| v.tanh()).collect()
}

/// Takes the forward *output* `h = tanh(z)`.
pub fn tanh_backward(h: &[f64], upstream: &[f64]) -> Vec<f64> {
    h.iter().zip(upstream).map(|(h, u)| u * (1.0 - h * h)).collect()
}

pub const PROB_CLAMP: f64 = 1e-7;

/// Binary cross-entropy and its derivative with respect to `p`, both
/// evaluated on `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(p: f64, y: f64) -> (f64, f64) {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let grad = (p - y) / (p * (1.0 - p));
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    RmsProp,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl OptimizerConfig {
    pub fn rmsprop(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::RmsProp,
            learning_rate,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
        }
    }
}

pub const RMSPROP_DECAY: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const OPT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    /// First moment (Adam only).
    m: Option<ParamBuf>,
    /// Second moment.
    v: ParamBuf,
    steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, len: usize, precision: Precision) -> Self {
        let m = match config.kind {
            OptimizerKind::Adam => Some(ParamBuf::zeros(precision, len)),
            OptimizerKind::RmsProp => None,
        };
        Self {
            config,
            m,
            v: ParamBuf::zeros(precision, len),
            steps: 0,
        }
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn second_moment(&self) -> &ParamBuf {
        &self.v
    }

    pub fn first_moment(&self) -> Option<&ParamBuf> {
        self.m.as_ref()
    }

    /// One update of `params` from `grads`.
    pub fn step(&mut self, params: &mut ParamBuf, grads: &ParamBuf) -> Result<()> {
        self.step_scaled(params, grads, 1.0)
    }

    /// One update using `scale * grads` as the gradient (e.g. `1 / batch`).
    pub fn step_scaled(&mut self, params: &mut ParamBuf, grads: &ParamBuf, scale: f64) -> Result<()> {
        check_len(self.v.len(), params.len())?;
        check_len(params.len(), grads.len())?;
        self.steps += 1;
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::RmsProp => match (params, grads, &mut self.v) {
                (ParamBuf::Double(p), ParamBuf::Double(g), ParamBuf::Double(v)) => rmsprop_kernel(p, g, v, lr, scale),
                (ParamBuf::Single(p), ParamBuf::Single(g), ParamBuf::Single(v)) => rmsprop_kernel(p, g, v, lr, scale),
                _ => return Err(invalid("optimizer buffers differ in precision")),
            },
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                let m = self.m.as_mut().expect("Adam state carries a first moment");
                match (params, grads, m, &mut self.v) {
                    (ParamBuf::Double(p), ParamBuf::Double(g), ParamBuf::Double(m), ParamBuf::Double(v)) => {
                        adam_kernel(p, g, m, v, lr, c1, c2, scale)
                    }
                    (ParamBuf::Single(p), ParamBuf::Single(g), ParamBuf::Single(m), ParamBuf::Single(v)) => {
                        adam_kernel(p, g, m, v, lr, c1, c2, scale)
                    }
                    _ => return Err(invalid("optimizer buffers differ in precision")),
                }
            }
        }
        Ok(())
    }
}

fn rmsprop_kernel<T: Real>(p: &mut [T], g: &[T], v: &mut [T], lr: f64, scale: f64) {
    for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        let g = g.to_f64() * scale;
        let vn = RMSPROP_DECAY * v.to_f64() + (1.0 - RMSPROP_DECAY) * g * g;
        *v = T::from_f64(vn);
        *p = T::from_f64(p.to_f64() - lr * g / (vn.sqrt() + OPT_EPSILON));
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_kernel<T: Real>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], lr: f64, c1: f64, c2: f64, scale: f64) {
    for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g.to_f64() * scale;
        let mn = ADAM_BETA1 * m.to_f64() + (1.0 - ADAM_BETA1) * g;
        let vn = ADAM_BETA2 * v.to_f64() + (1.0 - ADAM_BETA2) * g * g;
        *m = T::from_f64(mn);
        *v = T::from_f64(vn);
        let m_hat = mn / c1;
        let v_hat = vn / c2;
        *p = T::from_f64(p.to_f64() - lr * m_hat / (v_hat.sqrt() + OPT_EPSILON));
    }
}

/// Shared tanh encoder feeding two linear heads: one for circuit angles and
/// one for observable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoder {
    pub encoder: LinearLayer,
    pub head_theta: LinearLayer,
    pub head_obs: LinearLayer,
}

impl EncoderDecoder {
    pub fn init(
        feature_dim: usize,
        latent_dim: usize,
        theta_count: usize,
        obs_count: usize,
        rng: &mut Prng,
        precision: Precision,
    ) -> Result<Self> {
        Ok(Self {
            encoder: init_layer(feature_dim, latent_dim, rng, precision)?,
            head_theta: init_layer(latent_dim, theta_count, rng, precision)?,
            head_obs: init_layer(latent_dim, obs_count, rng, precision)?,
        })
    }

    pub fn latent(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(tanh_forward(&linear_forward(&self.encoder, x)?))
    }
}
