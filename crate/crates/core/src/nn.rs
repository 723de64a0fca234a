//! Dense feed-forward networks with hand-written backpropagation and Adam.
//!
//! Everything is batch-first: a batch is an `Array2<f64>` with one item per
//! row. Single-vector wrappers exist for the scalar API.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("an MLP needs at least two layer dimensions, got {0}")]
    TooFewDims(usize),
    #[error("layer dimension {index} is zero")]
    ZeroSizeLayer { index: usize },
    #[error("expected {expected} activations, got {got}")]
    ActivationCount { expected: usize, got: usize },
    #[error("layer {layer}: input dimension {got} does not match previous output {expected}")]
    Chain { layer: usize, expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("tape does not belong to these parameters (stale or mismatched)")]
    StaleTape,
    #[error("gradient shape does not match parameters")]
    ShapeMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln σ(x)`, computed as `-softplus(-x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// One affine layer followed by an elementwise activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[out × in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Parameters of a multilayer perceptron.
///
/// The `version` counter changes on every in-place update so that tapes
/// recorded before an update are rejected by [`MlpParams::backward`].
#[derive(Debug, Clone)]
pub struct MlpParams {
    layers: Vec<Dense>,
    version: u64,
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations cached by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    shape: Vec<(usize, usize)>,
    version: u64,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |a| a.nrows())
    }
}

impl MlpParams {
    /// Builds from explicit layers, checking that dimensions chain and that
    /// every entry is finite.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::TooFewDims(layers.len()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(NnError::DimensionMismatch {
                    expected: l.output_dim(),
                    got: l.bias.len(),
                });
            }
            if l.input_dim() == 0 {
                return Err(NnError::ZeroSizeLayer { index: i });
            }
            if l.output_dim() == 0 {
                return Err(NnError::ZeroSizeLayer { index: i + 1 });
            }
            if i > 0 && layers[i - 1].output_dim() != l.input_dim() {
                return Err(NnError::Chain {
                    layer: i,
                    expected: layers[i - 1].output_dim(),
                    got: l.input_dim(),
                });
            }
            if !l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(NnError::NonFinite("parameters"));
            }
        }
        Ok(Self { layers, version: 0 })
    }

    /// Gaussian initialisation: stddev `sqrt(2/fan_in)` for ReLU layers,
    /// `sqrt(1/fan_in)` otherwise. Biases start at zero.
    pub fn init(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self, NnError> {
        if dims.len() < 2 {
            return Err(NnError::TooFewDims(dims.len()));
        }
        if let Some(index) = dims.iter().position(|&d| d == 0) {
            return Err(NnError::ZeroSizeLayer { index });
        }
        if activations.len() != dims.len() - 1 {
            return Err(NnError::ActivationCount {
                expected: dims.len() - 1,
                got: activations.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = init_stddev(activation, fan_in);
                let normal = Normal::new(0.0, std).expect("positive stddev");
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(&mut rng));
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// `[in, hidden..., out]`
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::output_dim))
            .collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    fn shape(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.output_dim(), l.input_dim())).collect()
    }

    /// All parameters, layer by layer, weights (row-major) then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Inverse of [`MlpParams::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), NnError> {
        if flat.len() != self.num_params() {
            return Err(NnError::DimensionMismatch {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        self.version += 1;
        Ok(())
    }

    /// Copy with every parameter rounded through `f32`.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.weight.mapv_inplace(|w| w as f32 as f64);
            l.bias.mapv_inplace(|b| b as f32 as f64);
        }
        out
    }

    fn check_input(&self, cols: usize) -> Result<(), NnError> {
        if cols != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                got: cols,
            });
        }
        Ok(())
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(x.ncols())?;
        let mut a = x.to_owned();
        for l in &self.layers {
            let mut z = if a.nrows() == 1 {
                l.weight.dot(&a.row(0)).insert_axis(Axis(0))
            } else {
                a.dot(&l.weight.t())
            };
            z += &l.bias;
            let act = l.activation;
            z.mapv_inplace(|v| act.apply(v));
            a = z;
        }
        Ok(a)
    }

    /// Single-precision copy for inference.
    pub fn to_f32(&self) -> MlpF32 {
        MlpF32 {
            layers: self
                .layers
                .iter()
                .map(|l| DenseF32 {
                    weight: l.weight.mapv(|w| w as f32),
                    bias: l.bias.mapv(|b| b as f32),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    /// Forward pass over a batch, returning outputs and the tape needed by
    /// [`MlpParams::backward`].
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Tape), NnError> {
        self.check_input(x.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for l in &self.layers {
            let mut z = a.dot(&l.weight.t());
            z += &l.bias;
            let act = l.activation;
            let next = z.mapv(|v| act.apply(v));
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        let tape = Tape {
            inputs,
            pre,
            shape: self.shape(),
            version: self.version,
        };
        Ok((a, tape))
    }

    /// Single-vector forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape), NnError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        let (out, tape) = self.forward_batch(view)?;
        Ok((out.into_raw_vec_and_offset().0, tape))
    }

    /// Reverse-mode gradients of `Σ output ⊙ grad_output` with respect to
    /// every weight and bias, summed over the batch.
    pub fn backward(&self, tape: &Tape, grad_output: ArrayView2<f64>) -> Result<ParamGrads, NnError> {
        self.backward_impl(tape, grad_output, false).map(|(g, _)| g)
    }

    /// As [`MlpParams::backward`], also returning the gradient with respect
    /// to the network input (one row per batch item).
    pub fn backward_with_input(
        &self,
        tape: &Tape,
        grad_output: ArrayView2<f64>,
    ) -> Result<(ParamGrads, Array2<f64>), NnError> {
        self.backward_impl(tape, grad_output, true)
            .map(|(g, d)| (g, d.expect("input grad requested")))
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        grad_output: ArrayView2<f64>,
        want_input: bool,
    ) -> Result<(ParamGrads, Option<Array2<f64>>), NnError> {
        if tape.version != self.version || tape.shape != self.shape() {
            return Err(NnError::StaleTape);
        }
        let batch = tape.batch_size();
        if grad_output.dim() != (batch, self.output_dim()) {
            return Err(NnError::DimensionMismatch {
                expected: batch * self.output_dim(),
                got: grad_output.len(),
            });
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_output.to_owned();
        let mut input_grad = None;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let act = l.activation;
            let mut delta = std::mem::take(&mut upstream);
            if act != Activation::Identity {
                Zip::from(&mut delta)
                    .and(&tape.pre[i])
                    .for_each(|d, &z| *d *= act.derivative(z));
            }
            let weight = delta.t().dot(&tape.inputs[i]);
            let bias = delta.sum_axis(Axis(0));
            layers.push(LayerGrad { weight, bias });
            if i > 0 {
                upstream = delta.dot(&l.weight);
            } else if want_input {
                input_grad = Some(delta.dot(&l.weight));
            }
        }
        layers.reverse();
        Ok((ParamGrads { layers }, input_grad))
    }
}

fn init_stddev(activation: Activation, fan_in: usize) -> f64 {
    match activation {
        Activation::Relu => (2.0 / fan_in as f64).sqrt(),
        Activation::Sigmoid | Activation::Identity => (1.0 / fan_in as f64).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradient of a scalar with respect to every parameter of an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrad>,
}

impl ParamGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn matches(&self, params: &MlpParams) -> bool {
        self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(g, l)| g.weight.dim() == l.weight.dim() && g.bias.len() == l.bias.len())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &ParamGrads, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(s, &b.weight);
            a.bias.scaled_add(s, &b.bias);
        }
    }

    /// Adds `-coef * W` to every weight gradient, i.e. the ascent gradient
    /// of the penalty `-coef/2 · Σ W²`. Biases are not penalised.
    pub fn add_l2_penalty(&mut self, params: &MlpParams, coef: f64) {
        if coef == 0.0 {
            return;
        }
        for (g, l) in self.layers.iter_mut().zip(&params.layers) {
            g.weight.scaled_add(-coef, &l.weight);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Same ordering as [`MlpParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates for one parameter set. Minimises: callers
/// maximising an objective pass the negated gradient.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: ParamGrads,
    second: ParamGrads,
    step: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        Self {
            config,
            first: ParamGrads::zeros_like(params),
            second: ParamGrads::zeros_like(params),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &ParamGrads) -> Result<(), NnError> {
        if !grads.matches(params) || !self.first.matches(params) {
            return Err(NnError::ShapeMismatch);
        }
        if !grads.is_finite() {
            return Err(NnError::NonFinite("gradients"));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, g), m), v) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first.layers)
            .zip(&mut self.second.layers)
        {
            Zip::from(&mut layer.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .and(&g.weight)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        params.version += 1;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DenseF32 {
    weight: Array2<f32>,
    bias: Array1<f32>,
    activation: Activation,
}

/// Inference-only network in `f32`, built by [`MlpParams::to_f32`].
#[derive(Debug, Clone)]
pub struct MlpF32 {
    layers: Vec<DenseF32>,
}

impl MlpF32 {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    pub fn predict(&self, x: ArrayView2<f32>) -> Result<Array2<f32>, NnError> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut a = x.to_owned();
        for l in &self.layers {
            let mut z = if a.nrows() == 1 {
                l.weight.dot(&a.row(0)).insert_axis(Axis(0))
            } else {
                a.dot(&l.weight.t())
            };
            z += &l.bias;
            let act = l.activation;
            z.mapv_inplace(|v| act.apply(v as f64) as f32);
            a = z;
        }
        Ok(a)
    }
}
