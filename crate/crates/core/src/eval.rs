//! Post-training measurement: distortion tables, ideal-code rate
//! arithmetic, decode timing, latent interpolation, Markov-chain sampling
//! and feature extraction.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::channel::{bsc_capacity, corrupt, ChannelError, ChannelModel, Codeword, NoisySymbols};
use crate::ldpc::{ldpc_encode, BpDecoder, LdpcCode};
use crate::necst::{transmit_batch, NecstError, NecstModel};
use crate::par;
use crate::report::Report;

/// Channel draws per item in [`evaluate_distortion`].
pub const DEFAULT_DRAWS: usize = 10;

/// Minimum number of timed trials.
pub const MIN_TRIALS: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("channel capacity is zero at epsilon = {0}")]
    ZeroCapacity(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Necst(#[from] NecstError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    L1,
    L2,
}

impl Metric {
    fn term(self, d: f64) -> f64 {
        match self {
            Metric::L1 => d.abs(),
            Metric::L2 => d * d,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::L1 => "L1",
            Metric::L2 => "L2",
        })
    }
}

impl FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Metric::L1),
            "l2" => Ok(Metric::L2),
            _ => Err(EvalError::InvalidArgument(format!("unknown metric {s:?}"))),
        }
    }
}

/// Mean per-dimension error between `x` and `x_hat`.
pub fn distortion(x: &[f64], x_hat: &[f64], metric: Metric) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(EvalError::LengthMismatch(x.len(), x_hat.len()));
    }
    if x.is_empty() {
        return Err(EvalError::InvalidArgument("empty input".into()));
    }
    Ok(x.iter().zip(x_hat).map(|(a, b)| metric.term(a - b)).sum::<f64>() / x.len() as f64)
}

/// Per-row [`distortion`]. Panics on shape mismatch.
pub fn distortion_rows(x: ArrayView2<f64>, x_hat: ArrayView2<f64>, metric: Metric) -> Vec<f64> {
    assert_eq!(x.dim(), x_hat.dim(), "distortion_rows shape");
    let n = x.ncols().max(1) as f64;
    x.outer_iter()
        .zip(x_hat.outer_iter())
        .map(|(a, b)| a.iter().zip(b).map(|(a, b)| metric.term(a - b)).sum::<f64>() / n)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionRow {
    pub noise: f64,
    pub metric: Metric,
    /// Mean over items and channel draws.
    pub value: f64,
    /// Standard deviation of the per-draw means.
    pub stddev: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionReport {
    pub rows: Vec<DistortionRow>,
    pub draws: usize,
    pub threads: usize,
}

impl DistortionReport {
    pub fn to_report(&self) -> Report {
        let mut r = Report::new(["noise", "metric", "value", "stddev", "n"])
            .meta("draws", self.draws)
            .meta("threads", self.threads);
        for row in &self.rows {
            r.push_row(vec![
                row.noise.to_string(),
                row.metric.to_string(),
                format!("{:.6}", row.value),
                format!("{:.6}", row.stddev),
                row.n.to_string(),
            ]);
        }
        r
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Distortion of `items` at each noise level, with the model's channel kind
/// and `epsilon` replaced by each entry of `noises`. Codes are the encoder
/// probabilities thresholded at 0.5; each item is sent `draws` times.
pub fn evaluate_distortion(
    model: &NecstModel,
    items: ArrayView2<f64>,
    noises: &[f64],
    metric: Metric,
    draws: usize,
    seed: u64,
) -> Result<DistortionReport> {
    if noises.is_empty() {
        return Err(EvalError::InvalidArgument("empty noise list".into()));
    }
    if draws == 0 || items.nrows() == 0 {
        return Err(EvalError::InvalidArgument("need at least one item and one draw".into()));
    }
    let mut rows = Vec::with_capacity(noises.len());
    for (ni, &eps) in noises.iter().enumerate() {
        let channel = model.channel().with_epsilon(eps)?;
        let mut per_draw = Vec::with_capacity(draws);
        for d in 0..draws {
            let draw_seed = seed
                .wrapping_add((ni as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
                .wrapping_add((d as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
            let t = transmit_batch(model, items, channel, draw_seed, true)?;
            let per_item = distortion_rows(items, t.reconstruction.view(), metric);
            per_draw.push(per_item.iter().sum::<f64>() / per_item.len() as f64);
        }
        let (value, stddev) = mean_std(&per_draw);
        rows.push(DistortionRow {
            noise: eps,
            metric,
            value,
            stddev,
            n: items.nrows(),
        });
    }
    Ok(DistortionReport {
        rows,
        draws,
        threads: par::current_threads(),
    })
}

/// Bits an ideal channel code needs to carry `compressed_bits` over a BSC.
pub fn ideal_code_bits(compressed_bits: f64, epsilon: f64) -> Result<f64> {
    if compressed_bits.is_nan() || compressed_bits < 0.0 {
        return Err(EvalError::InvalidArgument(format!(
            "compressed_bits must be >= 0, got {compressed_bits}"
        )));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(EvalError::InvalidArgument(format!("epsilon out of range: {epsilon}")));
    }
    let c = bsc_capacity(epsilon);
    if c <= 0.0 {
        return Err(EvalError::ZeroCapacity(epsilon));
    }
    Ok(compressed_bits / c)
}

/// Path from `a` to `b` flipping one differing bit at a time, lowest index
/// first. Includes both endpoints.
pub fn bit_flip_path(a: &Codeword, b: &Codeword) -> Result<Vec<Codeword>> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let mut cur = a.bits().to_vec();
    let mut path = vec![a.clone()];
    for i in 0..cur.len() {
        if cur[i] != b.bits()[i] {
            cur[i] = b.bits()[i];
            path.push(Codeword::new(cur.clone())?);
        }
    }
    Ok(path)
}

/// Decodes every code on [`bit_flip_path`] as if received noiselessly.
pub fn interpolate(model: &NecstModel, a: &Codeword, b: &Codeword) -> Result<Vec<(Codeword, Vec<f64>)>> {
    bit_flip_path(a, b)?
        .into_iter()
        .map(|c| {
            let x = model.decode(&c.to_noisy())?;
            Ok((c, x))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainMode {
    /// `x ~ p_dec(· | y)`; the chain targets the model's joint.
    Sample,
    /// `x = E[x | y]`; for visualisation only.
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub x: Vec<f64>,
    pub y: NoisySymbols,
}

/// Alternates `y ~ q_noisy_enc(· | x)` and an `x` update from `y`, starting
/// at `x0`. Returns the `steps` states after `x0`.
pub fn markov_chain_sample<R: Rng + ?Sized>(
    model: &NecstModel,
    x0: &[f64],
    steps: usize,
    mode: ChainMode,
    rng: &mut R,
) -> Result<Vec<ChainState>> {
    if steps == 0 {
        return Err(EvalError::InvalidArgument("steps must be >= 1".into()));
    }
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let y = model.noisy_distribution(&x)?.sample(rng);
        x = match mode {
            ChainMode::Sample => model.sample_decoder(&y, rng)?,
            ChainMode::Mean => model.decode(&y)?,
        };
        out.push(ChainState { x: x.clone(), y });
    }
    Ok(out)
}

/// Encoder probabilities thresholded at 0.5, one row per item.
pub fn extract_features(model: &NecstModel, items: ArrayView2<f64>) -> Result<Array2<u8>> {
    let probs = model.encode_probs_batch(items)?;
    Ok(probs.mapv(|p| u8::from(p >= 0.5)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub method: String,
    /// Received words decoded per trial.
    pub batch_size: usize,
    pub trials: usize,
    /// Seconds per trial.
    pub mean_secs: f64,
    pub stddev_secs: f64,
    pub threads: usize,
}

impl TimingReport {
    fn from_samples(method: &str, batch_size: usize, samples: &[f64]) -> Self {
        let (mean_secs, stddev_secs) = mean_std(samples);
        Self {
            method: method.to_string(),
            batch_size,
            trials: samples.len(),
            mean_secs,
            stddev_secs,
            threads: 1,
        }
    }

    /// Standard error of `mean_secs`.
    pub fn sem(&self) -> f64 {
        self.stddev_secs / (self.trials as f64).sqrt()
    }

    pub fn per_word_secs(&self) -> f64 {
        self.mean_secs / self.batch_size as f64
    }
}

/// Renders timings as one row per method.
pub fn timing_report(reports: &[TimingReport]) -> Report {
    let threads = reports.first().map_or(1, |r| r.threads);
    let mut r = Report::new(["method", "batch", "trials", "mean_s", "stddev_s", "per_word_s"]).meta("threads", threads);
    for t in reports {
        r.push_row(vec![
            t.method.clone(),
            t.batch_size.to_string(),
            t.trials.to_string(),
            format!("{:.6e}", t.mean_secs),
            format!("{:.6e}", t.stddev_secs),
            format!("{:.6e}", t.per_word_secs()),
        ]);
    }
    r
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Received words decoded per trial.
    pub batch_size: usize,
    pub trials: usize,
    pub warmup: usize,
    /// Crossover probability used to corrupt both methods' inputs.
    pub epsilon: f64,
    pub bp_iters: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            trials: MIN_TRIALS,
            warmup: 2,
            epsilon: 0.1,
            bp_iters: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeBench {
    pub neural_batched: TimingReport,
    pub neural_unbatched: TimingReport,
    pub bp: TimingReport,
}

impl DecodeBench {
    /// BP time over batched neural time, per word.
    pub fn speedup_batched(&self) -> f64 {
        self.bp.per_word_secs() / self.neural_batched.per_word_secs()
    }

    /// BP time over unbatched neural time, per word.
    pub fn speedup_unbatched(&self) -> f64 {
        self.bp.per_word_secs() / self.neural_unbatched.per_word_secs()
    }

    pub fn to_report(&self) -> Report {
        timing_report(&[
            self.neural_batched.clone(),
            self.neural_unbatched.clone(),
            self.bp.clone(),
        ])
        .meta("speedup_batched", format!("{:.3}", self.speedup_batched()))
        .meta("speedup_unbatched", format!("{:.3}", self.speedup_unbatched()))
    }
}

fn time_trials(warmup: usize, trials: usize, mut f: impl FnMut()) -> Vec<f64> {
    for _ in 0..warmup {
        f();
    }
    (0..trials)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect()
}

/// Times the neural decoder against BP on the same number of transmitted
/// bits (`model.code_len() == code.h.n()`), single-threaded.
///
/// Inputs are generated up front: random codes through the model's channel
/// for the neural side, random LDPC codewords through a BSC for BP. Each
/// trial decodes `batch_size` words with the batched forward pass, a loop
/// of single-word forward passes, and a loop of BP decodes. The neural side
/// runs the single-precision decoder.
pub fn bench_decode(model: &NecstModel, code: &LdpcCode, config: &BenchConfig) -> Result<DecodeBench> {
    let m = model.code_len();
    if code.h.n() != m {
        return Err(EvalError::LengthMismatch(m, code.h.n()));
    }
    if config.trials < MIN_TRIALS {
        return Err(EvalError::InvalidArgument(format!(
            "trials must be >= {MIN_TRIALS}, got {}",
            config.trials
        )));
    }
    if config.batch_size == 0 {
        return Err(EvalError::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut rng = par::stream_rng(config.seed, 0);
    let bsc = ChannelModel::bsc(config.epsilon)?;
    let neural_inputs: Vec<NoisySymbols> = (0..config.batch_size)
        .map(|_| {
            let c = Codeword::new((0..m).map(|_| rng.random_range(0..2u8)).collect())?;
            Ok(corrupt(&c, &bsc, &mut rng))
        })
        .collect::<Result<_>>()?;
    let mut y = Array2::<f64>::zeros((config.batch_size, m));
    for (row, w) in y.axis_iter_mut(Axis(0)).zip(&neural_inputs) {
        let mut row = row;
        w.embed_into(row.as_slice_mut().expect("row-major"));
    }
    let bp_inputs: Vec<Vec<u8>> = (0..config.batch_size)
        .map(|_| {
            let msg: Vec<u8> = (0..code.g.k()).map(|_| rng.random_range(0..2u8)).collect();
            let cw = ldpc_encode(&code.g, &msg).expect("message length");
            cw.into_iter()
                .map(|b| b ^ u8::from(rng.random::<f64>() < config.epsilon))
                .collect()
        })
        .collect();
    let decoder = BpDecoder::new(&code.h);
    let neural = model.inference_decoder();
    let y = y.mapv(|v| v as f32);

    par::sequential(|| {
        let mut err = None;
        let batched = time_trials(config.warmup, config.trials, || match neural.decode_batch(y.view()) {
            Ok(x) => {
                std::hint::black_box(x);
            }
            Err(e) => err = Some(e),
        });
        let unbatched = time_trials(config.warmup, config.trials, || {
            for w in &neural_inputs {
                match neural.decode(w) {
                    Ok(x) => {
                        std::hint::black_box(x);
                    }
                    Err(e) => err = Some(e),
                }
            }
        });
        let bp = time_trials(config.warmup, config.trials, || {
            for rx in &bp_inputs {
                std::hint::black_box(decoder.decode(rx, config.epsilon, config.bp_iters));
            }
        });
        if let Some(e) = err {
            return Err(e.into());
        }
        Ok(DecodeBench {
            neural_batched: TimingReport::from_samples("neural_batched", config.batch_size, &batched),
            neural_unbatched: TimingReport::from_samples("neural_unbatched", config.batch_size, &unbatched),
            bp: TimingReport::from_samples(&format!("bp_{}", config.bp_iters), config.batch_size, &bp),
        })
    })
}
