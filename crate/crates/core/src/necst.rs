//! The NECST model: a stochastic binary encoder, a simulated channel and a
//! probabilistic decoder, trained end to end with VIMCO.
//!
//! All gradients returned here are *ascent* directions of the objective
//! `E_{y ~ q_noisy_enc(y|x)} [log p_dec(x|y)]` (or its `K`-sample bound).

use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::channel::{
    corrupt, noisy_enc_distribution, score_wrt_logit, ChannelError, ChannelKind, ChannelModel, Codeword,
    NoisyBitDistribution, NoisySymbols, Symbol,
};
use crate::data::{Dataset, Split};
use crate::eval::{distortion_rows, Metric};
use crate::nn::{sigmoid, softplus, Activation, AdamConfig, AdamState, MlpF32, MlpParams, NnError, ParamGrads, Tape};
use crate::par;

/// Log-weights are clipped from below so that `-inf` sentinels stay finite.
const LOG_WEIGHT_FLOOR: f64 = -1e10;

/// Largest number of sample multisets [`exact_objective_grad`] will visit.
pub const MAX_ENUMERATION: u64 = 50_000_000;

#[derive(Debug, Error)]
pub enum NecstError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("VIMCO needs at least 2 samples per datapoint, got {0}")]
    TooFewSamples(usize),
    #[error("exact enumeration too large: m = {m}, K = {k} ({reason})")]
    TooLarge { m: usize, k: usize, reason: String },
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset split is empty: {0:?}")]
    EmptySplit(Split),
}

pub type Result<T> = std::result::Result<T, NecstError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecoderFamily {
    Bernoulli,
    /// Factorised Gaussian with fixed isotropic variance.
    Gaussian {
        variance: f64,
    },
}

impl DecoderFamily {
    pub fn name(&self) -> &'static str {
        match self {
            DecoderFamily::Bernoulli => "bernoulli",
            DecoderFamily::Gaussian { .. } => "gaussian",
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            DecoderFamily::Bernoulli => 0.0,
            DecoderFamily::Gaussian { variance } => *variance,
        }
    }

    /// Log-likelihood of `x` given raw decoder output `out`, and its
    /// gradient with respect to `out` written into `grad`.
    fn loglik_and_grad(&self, x: ArrayView1<f64>, out: ArrayView1<f64>, mut grad: ndarray::ArrayViewMut1<f64>) -> f64 {
        match *self {
            DecoderFamily::Bernoulli => {
                let mut ll = 0.0;
                Zip::from(&mut grad).and(&x).and(&out).for_each(|g, &x, &o| {
                    ll += x * o - softplus(o);
                    *g = x - sigmoid(o);
                });
                ll
            }
            DecoderFamily::Gaussian { variance } => {
                let mut sq = 0.0;
                Zip::from(&mut grad).and(&x).and(&out).for_each(|g, &x, &o| {
                    let r = x - o;
                    sq += r * r;
                    *g = r / variance;
                });
                let n = x.len() as f64;
                -sq / (2.0 * variance) - 0.5 * n * (2.0 * std::f64::consts::PI * variance).ln()
            }
        }
    }

    fn loglik(&self, x: ArrayView1<f64>, out: ArrayView1<f64>) -> f64 {
        let mut scratch = Array1::zeros(x.len());
        self.loglik_and_grad(x, out, scratch.view_mut())
    }

    /// Decoder output mapped to reconstruction space.
    fn mean(&self, out: f64) -> f64 {
        match self {
            DecoderFamily::Bernoulli => sigmoid(out),
            DecoderFamily::Gaussian { .. } => out,
        }
    }
}

/// Architecture and channel of a model to be built.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub code_len: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub channel: ChannelModel,
    pub family: DecoderFamily,
    pub seed: u64,
}

impl ModelSpec {
    /// One 500-unit ReLU hidden layer in the encoder, two in the decoder.
    pub fn mlp(input_dim: usize, code_len: usize, channel: ChannelModel) -> Self {
        Self {
            input_dim,
            code_len,
            encoder_hidden: vec![500],
            decoder_hidden: vec![500, 500],
            channel,
            family: DecoderFamily::Bernoulli,
            seed: 0,
        }
    }
}

fn mlp_for(input: usize, hidden: &[usize], output: usize, seed: u64) -> std::result::Result<MlpParams, NnError> {
    let dims: Vec<usize> = std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect();
    let mut acts = vec![Activation::Relu; hidden.len()];
    acts.push(Activation::Identity);
    MlpParams::init(&dims, &acts, seed)
}

/// Encoder logits network, decoder network, channel and likelihood family.
#[derive(Debug, Clone, PartialEq)]
pub struct NecstModel {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    channel: ChannelModel,
    family: DecoderFamily,
}

impl NecstModel {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let encoder = mlp_for(spec.input_dim, &spec.encoder_hidden, spec.code_len, spec.seed)?;
        let decoder = mlp_for(
            spec.code_len,
            &spec.decoder_hidden,
            spec.input_dim,
            spec.seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
        )?;
        Self::from_parts(encoder, decoder, spec.channel, spec.family)
    }

    pub fn from_parts(
        encoder: MlpParams,
        decoder: MlpParams,
        channel: ChannelModel,
        family: DecoderFamily,
    ) -> Result<Self> {
        if decoder.input_dim() != encoder.output_dim() {
            return Err(NecstError::Dimension {
                what: "decoder input vs code length",
                expected: encoder.output_dim(),
                got: decoder.input_dim(),
            });
        }
        if decoder.output_dim() != encoder.input_dim() {
            return Err(NecstError::Dimension {
                what: "decoder output vs input dimension",
                expected: encoder.input_dim(),
                got: decoder.output_dim(),
            });
        }
        if let DecoderFamily::Gaussian { variance } = family {
            if !(variance > 0.0 && variance.is_finite()) {
                return Err(NecstError::InvalidConfig(format!(
                    "gaussian variance must be positive, got {variance}"
                )));
            }
        }
        Ok(Self {
            encoder,
            decoder,
            channel,
            family,
        })
    }

    pub fn code_len(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn channel(&self) -> &ChannelModel {
        &self.channel
    }

    pub fn set_channel(&mut self, channel: ChannelModel) {
        self.channel = channel;
    }

    pub fn family(&self) -> DecoderFamily {
        self.family
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(NecstError::Dimension {
                what: "input",
                expected: self.input_dim(),
                got: len,
            });
        }
        Ok(())
    }

    /// Per-bit `P(ŷ_i = 1 | x)`.
    pub fn encode_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous");
        Ok(self.encode_probs_batch(view)?.into_raw_vec_and_offset().0)
    }

    pub fn encode_probs_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        Ok(self.encoder.predict(x)?.mapv(sigmoid))
    }

    /// Distribution of the received word for input `x`.
    pub fn noisy_distribution(&self, x: &[f64]) -> Result<NoisyBitDistribution> {
        Ok(noisy_enc_distribution(&self.encode_probs(x)?, &self.channel))
    }

    fn check_code(&self, y: &NoisySymbols) -> Result<()> {
        if y.len() != self.code_len() {
            return Err(NecstError::Dimension {
                what: "received code",
                expected: self.code_len(),
                got: y.len(),
            });
        }
        if self.channel.kind() == ChannelKind::Bsc {
            if let Some(i) = y.symbols().iter().position(|&s| s == Symbol::Erased) {
                return Err(ChannelError::ErasureOnBsc(i).into());
            }
        }
        Ok(())
    }

    /// `ln p_dec(x | y)`.
    pub fn decoder_loglik(&self, y: &NoisySymbols, x: &[f64]) -> Result<f64> {
        self.check_code(y)?;
        self.check_input(x.len())?;
        let input = Array2::from_shape_vec((1, y.len()), y.embed()).expect("shape");
        let out = self.decoder.predict(input.view())?;
        Ok(self.family.loglik(ArrayView1::from(x), out.row(0)))
    }

    /// Decoder mean (gaussian) or per-pixel probability (bernoulli) for a
    /// batch of embedded received words.
    pub fn decode_batch(&self, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        if y.ncols() != self.code_len() {
            return Err(NecstError::Dimension {
                what: "received code",
                expected: self.code_len(),
                got: y.ncols(),
            });
        }
        let family = self.family;
        Ok(self.decoder.predict(y)?.mapv(|o| family.mean(o)))
    }

    pub fn decode(&self, y: &NoisySymbols) -> Result<Vec<f64>> {
        self.check_code(y)?;
        let input = Array2::from_shape_vec((1, y.len()), y.embed()).expect("shape");
        Ok(self.decode_batch(input.view())?.into_raw_vec_and_offset().0)
    }

    /// Single-precision copy of the decoder for fast inference.
    pub fn inference_decoder(&self) -> InferenceDecoder {
        InferenceDecoder {
            net: self.decoder.to_f32(),
            family: self.family,
        }
    }

    /// Draws `x ~ p_dec(· | y)`.
    pub fn sample_decoder<R: Rng + ?Sized>(&self, y: &NoisySymbols, rng: &mut R) -> Result<Vec<f64>> {
        let mean = self.decode(y)?;
        Ok(match self.family {
            DecoderFamily::Bernoulli => mean
                .into_iter()
                .map(|p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
                .collect(),
            DecoderFamily::Gaussian { variance } => {
                let sd = variance.sqrt();
                mean.into_iter()
                    .map(|mu| {
                        let z: f64 = StandardNormal.sample(rng);
                        mu + sd * z
                    })
                    .collect()
            }
        })
    }
}

/// Decoder mean in `f32`, built by [`NecstModel::inference_decoder`].
#[derive(Debug, Clone)]
pub struct InferenceDecoder {
    net: MlpF32,
    family: DecoderFamily,
}

impl InferenceDecoder {
    pub fn code_len(&self) -> usize {
        self.net.input_dim()
    }

    pub fn decode_batch(&self, y: ArrayView2<f32>) -> Result<Array2<f32>> {
        if y.ncols() != self.code_len() {
            return Err(NecstError::Dimension {
                what: "received code",
                expected: self.code_len(),
                got: y.ncols(),
            });
        }
        let family = self.family;
        Ok(self.net.predict(y)?.mapv(|o| family.mean(o as f64) as f32))
    }

    pub fn decode(&self, y: &NoisySymbols) -> Result<Vec<f32>> {
        let row: Vec<f32> = y.embed().into_iter().map(|v| v as f32).collect();
        let input = Array2::from_shape_vec((1, row.len()), row).expect("shape");
        Ok(self.decode_batch(input.view())?.into_raw_vec_and_offset().0)
    }
}

/// Draws `k` received words i.i.d. from the per-bit marginal.
pub fn sample_noisy_codes<R: Rng + ?Sized>(dist: &NoisyBitDistribution, k: usize, rng: &mut R) -> Vec<NoisySymbols> {
    (0..k).map(|_| dist.sample(rng)).collect()
}

/// Objective value and gradients for both networks.
#[derive(Debug, Clone)]
pub struct GradEstimate {
    pub objective: f64,
    pub encoder: ParamGrads,
    pub decoder: ParamGrads,
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Leave-one-out learning signals `L̂ − L̂₋ⱼ` for one datapoint, where
/// `L̂₋ⱼ` replaces `log w_j` by the mean of the other log-weights.
/// Returns `(L̂, signals, softmax weights)`.
fn vimco_signals(log_w: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let k = log_w.len();
    let ln_k = (k as f64).ln();
    let total = logsumexp(log_w);
    let objective = total - ln_k;
    let weights: Vec<f64> = log_w.iter().map(|&l| (l - total).exp()).collect();
    let sum: f64 = log_w.iter().sum();
    let mut scratch = log_w.to_vec();
    let signals = (0..k)
        .map(|j| {
            let imputed = (sum - log_w[j]) / (k - 1) as f64;
            scratch[j] = imputed;
            let loo = logsumexp(&scratch) - ln_k;
            scratch[j] = log_w[j];
            objective - loo
        })
        .collect();
    (objective, signals, weights)
}

/// VIMCO gradient estimate on a batch (one item per row), averaged over the
/// batch. `l2_encoder` adds the ascent gradient of `-λ/2 · Σ W²` over
/// encoder weights.
pub fn vimco_step<R: Rng + ?Sized>(
    model: &NecstModel,
    batch: ArrayView2<f64>,
    k: usize,
    l2_encoder: f64,
    rng: &mut R,
) -> Result<GradEstimate> {
    if k < 2 {
        return Err(NecstError::TooFewSamples(k));
    }
    model.check_input(batch.ncols())?;
    let (logits, tape) = model.encoder.forward_batch(batch)?;
    let seed = rng.random::<u64>();
    let channel = *model.channel();
    let samples = par::map_range(batch.nrows(), |b| {
        let probs: Vec<f64> = logits.row(b).iter().map(|&l| sigmoid(l)).collect();
        let dist = noisy_enc_distribution(&probs, &channel);
        let mut r = par::stream_rng(seed, b as u64);
        sample_noisy_codes(&dist, k, &mut r)
    });
    vimco_from_samples(model, batch, &logits, &tape, &samples, l2_encoder)
}

/// VIMCO estimate with the received words fixed in advance
/// (`samples[b]` holds the `K` words for row `b`).
pub fn vimco_gradients(
    model: &NecstModel,
    batch: ArrayView2<f64>,
    samples: &[Vec<NoisySymbols>],
    l2_encoder: f64,
) -> Result<GradEstimate> {
    model.check_input(batch.ncols())?;
    let k = samples.first().map_or(0, Vec::len);
    if k < 2 {
        return Err(NecstError::TooFewSamples(k));
    }
    if samples.len() != batch.nrows() || samples.iter().any(|s| s.len() != k) {
        return Err(NecstError::Dimension {
            what: "sample sets",
            expected: batch.nrows(),
            got: samples.len(),
        });
    }
    for y in samples.iter().flatten() {
        model.check_code(y)?;
    }
    let (logits, tape) = model.encoder.forward_batch(batch)?;
    vimco_from_samples(model, batch, &logits, &tape, samples, l2_encoder)
}

fn vimco_from_samples(
    model: &NecstModel,
    batch: ArrayView2<f64>,
    logits: &Array2<f64>,
    enc_tape: &Tape,
    samples: &[Vec<NoisySymbols>],
    l2_encoder: f64,
) -> Result<GradEstimate> {
    let b_size = batch.nrows();
    let k = samples[0].len();
    let m = model.code_len();
    let n = model.input_dim();
    let inv_b = 1.0 / b_size as f64;
    let family = model.family;
    let channel = *model.channel();

    let mut y = Array2::<f64>::zeros((b_size * k, m));
    for (b, set) in samples.iter().enumerate() {
        for (j, word) in set.iter().enumerate() {
            word.embed_into(y.row_mut(b * k + j).as_slice_mut().expect("row-major"));
        }
    }
    let (out, dec_tape) = model.decoder.forward_batch(y.view())?;

    // Per datapoint: log-weights, decoder upstream gradient rows and the
    // encoder logit gradient row.
    let mut dec_up = Array2::<f64>::zeros((b_size * k, n));
    let mut enc_up = Array2::<f64>::zeros((b_size, m));
    let per_item = par::map_range(b_size, |b| {
        let x = batch.row(b);
        let mut grad = Array2::<f64>::zeros((k, n));
        let log_w: Vec<f64> = (0..k)
            .map(|j| {
                family
                    .loglik_and_grad(x, out.row(b * k + j), grad.row_mut(j))
                    .max(LOG_WEIGHT_FLOOR)
            })
            .collect();
        let (objective, signals, weights) = vimco_signals(&log_w);
        for (j, w) in weights.iter().enumerate() {
            grad.row_mut(j).mapv_inplace(|g| g * w * inv_b);
        }
        let mut enc_row = Array1::<f64>::zeros(m);
        for (j, word) in samples[b].iter().enumerate() {
            for (i, &s) in word.symbols().iter().enumerate() {
                enc_row[i] += signals[j] * score_wrt_logit(s, logits[[b, i]], &channel);
            }
        }
        enc_row *= inv_b;
        (objective, grad, enc_row)
    });
    let mut objective = 0.0;
    for (b, (obj, grad, enc_row)) in per_item.into_iter().enumerate() {
        objective += obj;
        dec_up.slice_mut(s![b * k..(b + 1) * k, ..]).assign(&grad);
        enc_up.row_mut(b).assign(&enc_row);
    }
    objective *= inv_b;

    let decoder = model.decoder.backward(&dec_tape, dec_up.view())?;
    let mut encoder = model.encoder.backward(enc_tape, enc_up.view())?;
    encoder.add_l2_penalty(&model.encoder, l2_encoder);
    Ok(GradEstimate {
        objective,
        encoder,
        decoder,
    })
}

/// Every received word of length `m` over the channel's alphabet, in
/// lexicographic order (last bit fastest).
pub fn enumerate_words(m: usize, channel: &ChannelModel) -> Vec<NoisySymbols> {
    let a = channel.alphabet_size();
    let total = a.pow(m as u32);
    (0..total)
        .map(|mut idx| {
            let mut symbols = vec![Symbol::Zero; m];
            for i in (0..m).rev() {
                symbols[i] = Symbol::from_index(idx % a);
                idx /= a;
            }
            NoisySymbols::new(symbols)
        })
        .collect()
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Visits every multiset of size `k` drawn from `0..n` as a count vector.
fn for_each_multiset(n: usize, k: usize, first: usize, counts: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    if k == 0 {
        f(counts);
        return;
    }
    for i in first..n {
        counts[i] += 1;
        for_each_multiset(n, k - 1, i, counts, f);
        counts[i] -= 1;
    }
}

/// Exact `K`-sample objective `E_{y¹..yᴷ ~ q}[log (1/K) Σ p_dec(x|yʲ)]` and
/// its gradients, by enumerating every received word (and, for `K ≥ 2`,
/// every multiset of `K` words). With `K = 1` this is the plain
/// single-sample objective `Σ_y q(y|x) log p_dec(x|y)`.
///
/// Intended as a test oracle for small codes.
pub fn exact_objective_grad(model: &NecstModel, x: &[f64], k: usize) -> Result<GradEstimate> {
    model.check_input(x.len())?;
    let m = model.code_len();
    let channel = *model.channel();
    let max_m = match channel.kind() {
        ChannelKind::Bsc => 12,
        ChannelKind::Bec => 8,
    };
    if k == 0 {
        return Err(NecstError::TooFewSamples(0));
    }
    if m > max_m {
        return Err(NecstError::TooLarge {
            m,
            k,
            reason: format!("code length above {max_m} for {}", channel.kind().name()),
        });
    }
    let words = enumerate_words(m, &channel);
    let multisets = binomial((words.len() + k - 1) as u64, k as u64);
    if multisets > MAX_ENUMERATION {
        return Err(NecstError::TooLarge {
            m,
            k,
            reason: format!("{multisets} sample multisets"),
        });
    }

    let xv = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("shape");
    let (logits, enc_tape) = model.encoder.forward_batch(xv.view())?;
    let probs: Vec<f64> = logits.row(0).iter().map(|&l| sigmoid(l)).collect();
    let dist = noisy_enc_distribution(&probs, &channel);

    // Only words with nonzero probability contribute.
    let live: Vec<(NoisySymbols, f64)> = words
        .into_iter()
        .map(|w| {
            let q: f64 = w.symbols().iter().enumerate().map(|(i, &s)| dist.prob(i, s)).product();
            (w, q)
        })
        .filter(|(_, q)| *q > 0.0)
        .collect();
    let nw = live.len();
    let n = model.input_dim();

    let mut y = Array2::<f64>::zeros((nw, m));
    for (r, (w, _)) in live.iter().enumerate() {
        w.embed_into(y.row_mut(r).as_slice_mut().expect("row-major"));
    }
    let (out, dec_tape) = model.decoder.forward_batch(y.view())?;
    let mut dll = Array2::<f64>::zeros((nw, n));
    let ll: Vec<f64> = (0..nw)
        .map(|r| {
            model
                .family
                .loglik_and_grad(xv.row(0), out.row(r), dll.row_mut(r))
                .max(LOG_WEIGHT_FLOOR)
        })
        .collect();
    let q: Vec<f64> = live.iter().map(|(_, q)| *q).collect();

    // dec_coef[y]: multiplier of ∇θ log p(x|y); enc_coef[y]: multiplier of
    // ∇φ log q(y|x).
    let (objective, dec_coef, enc_coef) = if k == 1 {
        let obj = q.iter().zip(&ll).map(|(q, l)| q * l).sum();
        let enc = q.iter().zip(&ll).map(|(q, l)| q * l).collect();
        (obj, q.clone(), enc)
    } else {
        let ln_q: Vec<f64> = q.iter().map(|q| q.ln()).collect();
        let ln_fact: Vec<f64> = (0..=k)
            .scan(0.0, |acc, i| {
                if i > 0 {
                    *acc += (i as f64).ln();
                }
                Some(*acc)
            })
            .collect();
        let ln_k = (k as f64).ln();
        // Split the enumeration on the smallest word index for parallelism.
        let parts = par::map_range(nw, |first| {
            let mut obj = 0.0;
            let mut dec = vec![0.0; nw];
            let mut enc = vec![0.0; nw];
            let mut counts = vec![0usize; nw];
            counts[first] = 1;
            let mut visit = |c: &[usize]| {
                let mut ln_p = ln_fact[k];
                let mut mx = f64::NEG_INFINITY;
                for (i, &ci) in c.iter().enumerate() {
                    if ci > 0 {
                        ln_p += ci as f64 * ln_q[i] - ln_fact[ci];
                        mx = mx.max(ll[i]);
                    }
                }
                let p = ln_p.exp();
                let mut z = 0.0;
                for (i, &ci) in c.iter().enumerate() {
                    if ci > 0 {
                        z += ci as f64 * (ll[i] - mx).exp();
                    }
                }
                let f = mx + z.ln() - ln_k;
                obj += p * f;
                for (i, &ci) in c.iter().enumerate() {
                    if ci > 0 {
                        let cf = ci as f64;
                        dec[i] += p * cf * (ll[i] - mx).exp() / z;
                        enc[i] += p * f * cf;
                    }
                }
            };
            for_each_multiset(nw, k - 1, first, &mut counts, &mut visit);
            (obj, dec, enc)
        });
        let mut obj = 0.0;
        let mut dec = vec![0.0; nw];
        let mut enc = vec![0.0; nw];
        for (o, d, e) in parts {
            obj += o;
            dec.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            enc.iter_mut().zip(&e).for_each(|(a, b)| *a += b);
        }
        (obj, dec, enc)
    };

    for (r, c) in dec_coef.iter().enumerate() {
        dll.row_mut(r).mapv_inplace(|g| g * c);
    }
    let decoder = model.decoder.backward(&dec_tape, dll.view())?;
    let mut enc_up = Array2::<f64>::zeros((1, m));
    for ((w, _), c) in live.iter().zip(&enc_coef) {
        for (i, &s) in w.symbols().iter().enumerate() {
            enc_up[[0, i]] += c * score_wrt_logit(s, logits[[0, i]], &channel);
        }
    }
    let encoder = model.encoder.backward(&enc_tape, enc_up.view())?;
    Ok(GradEstimate {
        objective,
        encoder,
        decoder,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Samples per datapoint in the VIMCO objective.
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2_encoder: f64,
    pub seed: u64,
    /// Validation distortion is computed every this many epochs (0: never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 5,
            epochs: 200,
            batch_size: 100,
            lr: 1e-3,
            l2_encoder: 1e-3,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(NecstError::InvalidConfig(format!("k must be >= 2, got {}", self.k)));
        }
        if self.batch_size == 0 {
            return Err(NecstError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.l2_encoder.is_nan() || self.l2_encoder < 0.0 {
            return Err(NecstError::InvalidConfig(format!(
                "l2_encoder must be >= 0, got {}",
                self.l2_encoder
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(NecstError::InvalidConfig(format!("lr must be >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Per-epoch training trace.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean VIMCO objective over the epoch's minibatches.
    pub objective: Vec<f64>,
    /// Mean L1 validation distortion, where evaluated.
    pub validation_distortion: Vec<Option<f64>>,
    /// Seconds spent in each epoch.
    pub wall_clock: Vec<f64>,
}

/// Trains both networks with minibatch VIMCO and Adam. Deterministic given
/// `config.seed`.
pub fn train(mut model: NecstModel, data: &Dataset, config: &TrainConfig) -> Result<(NecstModel, TrainReport)> {
    let report = train_with(&mut model, data, config, |_, _| {})?;
    Ok((model, report))
}

/// As [`train`], training `model` in place and calling `on_epoch` after each
/// epoch with the epoch index and the report so far.
pub fn train_with(
    model: &mut NecstModel,
    data: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &TrainReport),
) -> Result<TrainReport> {
    config.validate()?;
    model.check_input(data.dim())?;
    let train_idx = data.indices(Split::Train).to_vec();
    if train_idx.is_empty() {
        return Err(NecstError::EmptySplit(Split::Train));
    }
    let valid = data.split(Split::Valid);
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut enc_opt = AdamState::new(&model.encoder, adam);
    let mut dec_opt = AdamState::new(&model.decoder, adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport::default();
    let items = data.items();

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = items.select(Axis(0), chunk);
            let mut est = vimco_step(model, batch.view(), config.k, config.l2_encoder, &mut rng)?;
            if !est.objective.is_finite() {
                return Err(NecstError::NonFinite {
                    what: "objective",
                    epoch,
                    batch: bi,
                });
            }
            if !est.encoder.is_finite() || !est.decoder.is_finite() {
                return Err(NecstError::NonFinite {
                    what: "gradient",
                    epoch,
                    batch: bi,
                });
            }
            total += est.objective * chunk.len() as f64;
            est.encoder.scale(-1.0);
            est.decoder.scale(-1.0);
            enc_opt.step(&mut model.encoder, &est.encoder)?;
            dec_opt.step(&mut model.decoder, &est.decoder)?;
        }
        report.objective.push(total / train_idx.len() as f64);
        let eval_now = config.eval_every > 0
            && valid.nrows() > 0
            && ((epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs);
        let vd = if eval_now {
            let seed = config.seed ^ (epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
            let t = transmit_batch(model, valid.view(), model.channel, seed, true)?;
            let d = distortion_rows(valid.view(), t.reconstruction.view(), Metric::L1);
            Some(d.iter().sum::<f64>() / d.len() as f64)
        } else {
            None
        };
        report.validation_distortion.push(vd);
        report.wall_clock.push(start.elapsed().as_secs_f64());
        on_epoch(epoch, &report);
    }
    Ok(report)
}

/// One input's trip through the system.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub sent: Codeword,
    pub received: NoisySymbols,
    pub reconstruction: Vec<f64>,
}

/// Batched transmissions; row `r` of `reconstruction` belongs to `sent[r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTransmission {
    pub sent: Vec<Codeword>,
    pub received: Vec<NoisySymbols>,
    pub reconstruction: Array2<f64>,
}

/// Encodes, corrupts and decodes one input. With `deterministic`, the code
/// is the encoder probabilities thresholded at 0.5; otherwise it is sampled.
pub fn transmit_reconstruct<R: Rng + ?Sized>(
    model: &NecstModel,
    x: &[f64],
    rng: &mut R,
    deterministic: bool,
) -> Result<Transmission> {
    let probs = model.encode_probs(x)?;
    let sent = if deterministic {
        Codeword::from_probs(&probs)
    } else {
        Codeword::new(probs.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect())?
    };
    let received = corrupt(&sent, model.channel(), rng);
    let reconstruction = model.decode(&received)?;
    Ok(Transmission {
        sent,
        received,
        reconstruction,
    })
}

/// [`transmit_reconstruct`] over a batch through `channel`, with row `r`
/// drawing its randomness from stream `r` of `seed`.
pub fn transmit_batch(
    model: &NecstModel,
    x: ArrayView2<f64>,
    channel: ChannelModel,
    seed: u64,
    deterministic: bool,
) -> Result<BatchTransmission> {
    let probs = model.encode_probs_batch(x)?;
    let words: Vec<(Codeword, NoisySymbols)> = par::map_range(x.nrows(), |r| {
        let mut rng = par::stream_rng(seed, r as u64);
        let row = probs.row(r);
        let bits: Vec<u8> = if deterministic {
            row.iter().map(|&p| u8::from(p >= 0.5)).collect()
        } else {
            row.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect()
        };
        let sent = Codeword::new(bits).expect("binary code of length >= 1");
        let received = corrupt(&sent, &channel, &mut rng);
        (sent, received)
    });
    let m = model.code_len();
    let mut y = Array2::<f64>::zeros((x.nrows(), m));
    for (r, (_, recv)) in words.iter().enumerate() {
        recv.embed_into(y.row_mut(r).as_slice_mut().expect("row-major"));
    }
    let reconstruction = model.decode_batch(y.view())?;
    let (sent, received) = words.into_iter().unzip();
    Ok(BatchTransmission {
        sent,
        received,
        reconstruction,
    })
}
