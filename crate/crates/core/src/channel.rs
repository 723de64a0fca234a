//! Binary symmetric and binary erasure channels.
//!
//! Besides simulating corruption, this module computes the per-bit marginal
//! of "sample a code from the encoder, then send it through the channel",
//! which is what the training objective samples from and differentiates.

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::nn::sigmoid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("noise level {0} is outside [0, 1]")]
    InvalidNoise(f64),
    #[error("bit value {value} at position {index} is not 0 or 1")]
    InvalidBit { index: usize, value: u8 },
    #[error("a codeword needs at least one bit")]
    EmptyCode,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("erasure at position {0} received over a binary symmetric channel")]
    ErasureOnBsc(usize),
    #[error("unrecognised channel {0:?}")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelKind {
    /// Flips each bit independently.
    Bsc,
    /// Erases each bit independently.
    Bec,
}

impl ChannelKind {
    pub fn name(self) -> &'static str {
        match self {
            ChannelKind::Bsc => "bsc",
            ChannelKind::Bec => "bec",
        }
    }
}

impl std::str::FromStr for ChannelKind {
    type Err = ChannelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bsc" => Ok(ChannelKind::Bsc),
            "bec" => Ok(ChannelKind::Bec),
            _ => Err(ChannelError::UnknownKind(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModel {
    kind: ChannelKind,
    epsilon: f64,
}

impl ChannelModel {
    pub fn new(kind: ChannelKind, epsilon: f64) -> Result<Self, ChannelError> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(ChannelError::InvalidNoise(epsilon));
        }
        Ok(Self { kind, epsilon })
    }

    pub fn bsc(epsilon: f64) -> Result<Self, ChannelError> {
        Self::new(ChannelKind::Bsc, epsilon)
    }

    pub fn bec(epsilon: f64) -> Result<Self, ChannelError> {
        Self::new(ChannelKind::Bec, epsilon)
    }

    pub fn kind(&self) -> ChannelKind {
        self.kind
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Same channel kind at a different noise level.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self, ChannelError> {
        Self::new(self.kind, epsilon)
    }

    /// Number of distinct received symbols per bit.
    pub fn alphabet_size(&self) -> usize {
        match self.kind {
            ChannelKind::Bsc => 2,
            ChannelKind::Bec => 3,
        }
    }

    /// `ln p(received | sent)` for a single bit; `-inf` for impossible
    /// transitions.
    pub fn bit_loglik(&self, received: Symbol, sent: u8) -> Result<f64, ChannelError> {
        let eps = self.epsilon;
        let p = match (self.kind, received) {
            (ChannelKind::Bsc, Symbol::Erased) => return Err(ChannelError::ErasureOnBsc(0)),
            (ChannelKind::Bsc, s) => {
                if s.bit() == Some(sent) {
                    1.0 - eps
                } else {
                    eps
                }
            }
            (ChannelKind::Bec, Symbol::Erased) => eps,
            (ChannelKind::Bec, s) => {
                if s.bit() == Some(sent) {
                    1.0 - eps
                } else {
                    0.0
                }
            }
        };
        Ok(p.ln())
    }
}

impl fmt::Display for ChannelModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.kind.name(), self.epsilon)
    }
}

/// A length-`m` binary code.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Codeword(Vec<u8>);

impl Codeword {
    pub fn new(bits: Vec<u8>) -> Result<Self, ChannelError> {
        if bits.is_empty() {
            return Err(ChannelError::EmptyCode);
        }
        if let Some((index, &value)) = bits.iter().enumerate().find(|(_, &b)| b > 1) {
            return Err(ChannelError::InvalidBit { index, value });
        }
        Ok(Self(bits))
    }

    /// Thresholds probabilities: `p >= 0.5` becomes 1.
    pub fn from_probs(probs: &[f64]) -> Self {
        Self(probs.iter().map(|&p| u8::from(p >= 0.5)).collect())
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bits(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn hamming(&self, other: &Codeword) -> Result<usize, ChannelError> {
        if self.len() != other.len() {
            return Err(ChannelError::LengthMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count())
    }

    pub fn to_noisy(&self) -> NoisySymbols {
        NoisySymbols(self.0.iter().map(|&b| Symbol::from_bit(b)).collect())
    }
}

impl fmt::Display for Codeword {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b == 1 { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Zero,
    One,
    Erased,
}

impl Symbol {
    pub fn from_bit(b: u8) -> Self {
        if b == 0 {
            Symbol::Zero
        } else {
            Symbol::One
        }
    }

    pub fn bit(self) -> Option<u8> {
        match self {
            Symbol::Zero => Some(0),
            Symbol::One => Some(1),
            Symbol::Erased => None,
        }
    }

    /// Real-valued decoder input: 0, 1, or 0.5 for an erasure.
    pub fn embed(self) -> f64 {
        match self {
            Symbol::Zero => 0.0,
            Symbol::One => 1.0,
            Symbol::Erased => 0.5,
        }
    }

    /// Index into a per-bit categorical `(P0, P1, P?)`.
    pub fn index(self) -> usize {
        match self {
            Symbol::Zero => 0,
            Symbol::One => 1,
            Symbol::Erased => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => Symbol::Zero,
            1 => Symbol::One,
            _ => Symbol::Erased,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Symbol::Zero => '0',
            Symbol::One => '1',
            Symbol::Erased => '?',
        }
    }
}

/// What comes out of the channel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NoisySymbols(Vec<Symbol>);

impl NoisySymbols {
    pub fn new(symbols: Vec<Symbol>) -> Self {
        Self(symbols)
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn has_erasures(&self) -> bool {
        self.0.contains(&Symbol::Erased)
    }

    pub fn embed(&self) -> Vec<f64> {
        self.0.iter().map(|s| s.embed()).collect()
    }

    pub fn embed_into(&self, out: &mut [f64]) {
        for (o, s) in out.iter_mut().zip(&self.0) {
            *o = s.embed();
        }
    }

    /// Hard bits, or `None` if anything was erased.
    pub fn to_codeword(&self) -> Option<Codeword> {
        let bits: Option<Vec<u8>> = self.0.iter().map(|s| s.bit()).collect();
        bits.and_then(|b| Codeword::new(b).ok())
    }

    /// Parses `0`, `1` and `?` characters.
    pub fn parse(s: &str) -> Option<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Some(Symbol::Zero),
                '1' => Some(Symbol::One),
                '?' => Some(Symbol::Erased),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(Self)
    }
}

impl fmt::Display for NoisySymbols {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.0 {
            write!(f, "{}", s.as_char())?;
        }
        Ok(())
    }
}

/// Passes `code` through `channel`, corrupting each bit independently.
pub fn corrupt<R: Rng + ?Sized>(code: &Codeword, channel: &ChannelModel, rng: &mut R) -> NoisySymbols {
    let eps = channel.epsilon();
    let symbols = code
        .bits()
        .iter()
        .map(|&b| {
            let hit = rng.random::<f64>() < eps;
            match (channel.kind(), hit) {
                (_, false) => Symbol::from_bit(b),
                (ChannelKind::Bsc, true) => Symbol::from_bit(b ^ 1),
                (ChannelKind::Bec, true) => Symbol::Erased,
            }
        })
        .collect();
    NoisySymbols(symbols)
}

/// `ln p(received | sent)`; `-inf` when the transition is impossible.
pub fn channel_loglik(received: &NoisySymbols, sent: &Codeword, channel: &ChannelModel) -> Result<f64, ChannelError> {
    if received.len() != sent.len() {
        return Err(ChannelError::LengthMismatch {
            expected: sent.len(),
            got: received.len(),
        });
    }
    let mut total = 0.0;
    for (i, (&r, &s)) in received.symbols().iter().zip(sent.bits()).enumerate() {
        total += channel.bit_loglik(r, s).map_err(|_| ChannelError::ErasureOnBsc(i))?;
    }
    Ok(total)
}

/// Per-bit distribution of the received symbol.
#[derive(Debug, Clone, PartialEq)]
pub enum NoisyBitDistribution {
    /// `P(y = 1)` per bit.
    Bsc(Vec<f64>),
    /// `(P0, P1, P?)` per bit.
    Bec(Vec<[f64; 3]>),
}

impl NoisyBitDistribution {
    pub fn len(&self) -> usize {
        match self {
            NoisyBitDistribution::Bsc(p) => p.len(),
            NoisyBitDistribution::Bec(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Probability of receiving `s` at bit `i`.
    pub fn prob(&self, i: usize, s: Symbol) -> f64 {
        match self {
            NoisyBitDistribution::Bsc(p) => match s {
                Symbol::One => p[i],
                Symbol::Zero => 1.0 - p[i],
                Symbol::Erased => 0.0,
            },
            NoisyBitDistribution::Bec(p) => p[i][s.index()],
        }
    }

    /// `ln q(y)` of a full received word.
    pub fn log_prob(&self, y: &NoisySymbols) -> f64 {
        y.symbols().iter().enumerate().map(|(i, &s)| self.prob(i, s).ln()).sum()
    }

    /// Draws one received word.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> NoisySymbols {
        let symbols = match self {
            NoisyBitDistribution::Bsc(p) => p
                .iter()
                .map(|&p1| Symbol::from_bit(u8::from(rng.random::<f64>() < p1)))
                .collect(),
            NoisyBitDistribution::Bec(p) => p
                .iter()
                .map(|&[p0, p1, _]| {
                    let u = rng.random::<f64>();
                    if u < p0 {
                        Symbol::Zero
                    } else if u < p0 + p1 {
                        Symbol::One
                    } else {
                        Symbol::Erased
                    }
                })
                .collect(),
        };
        NoisySymbols(symbols)
    }
}

/// Marginal distribution of the received word when each bit is first drawn
/// from `Bern(bit_probs[i])` and then sent through `channel`.
///
/// BSC: `P(y=1) = p − 2pε + ε`. BEC: `(P0, P1, P?) = ((1−p)(1−ε), p(1−ε), ε)`.
pub fn noisy_enc_distribution(bit_probs: &[f64], channel: &ChannelModel) -> NoisyBitDistribution {
    let eps = channel.epsilon();
    match channel.kind() {
        ChannelKind::Bsc => NoisyBitDistribution::Bsc(bit_probs.iter().map(|&p| p - 2.0 * p * eps + eps).collect()),
        ChannelKind::Bec => NoisyBitDistribution::Bec(
            bit_probs
                .iter()
                .map(|&p| [(1.0 - p) * (1.0 - eps), p * (1.0 - eps), eps])
                .collect(),
        ),
    }
}

/// `d/dℓ ln q(s)` where `q` is the noisy marginal of one bit whose encoder
/// probability is `σ(ℓ)`.
///
/// Returns 0 for symbols that have zero probability under the marginal.
pub fn score_wrt_logit(s: Symbol, logit: f64, channel: &ChannelModel) -> f64 {
    let p = sigmoid(logit);
    let not_p = sigmoid(-logit);
    match channel.kind() {
        // q(0), q(1) are proportional to (1−p), p, so the logit score is
        // that of a plain Bernoulli; erasures carry no dependence.
        ChannelKind::Bec => match s {
            Symbol::One => not_p,
            Symbol::Zero => -p,
            Symbol::Erased => 0.0,
        },
        ChannelKind::Bsc => {
            let eps = channel.epsilon();
            let dq1 = (1.0 - 2.0 * eps) * p * not_p;
            match s {
                Symbol::One => {
                    let q1 = p * (1.0 - eps) + not_p * eps;
                    if q1 > 0.0 {
                        dq1 / q1
                    } else {
                        0.0
                    }
                }
                Symbol::Zero => {
                    let q0 = not_p * (1.0 - eps) + p * eps;
                    if q0 > 0.0 {
                        -dq1 / q0
                    } else {
                        0.0
                    }
                }
                Symbol::Erased => 0.0,
            }
        }
    }
}

/// Binary entropy in bits, with `0·log 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    term(p) + term(1.0 - p)
}

/// Capacity of the binary symmetric channel, `1 − H_b(ε)` bits per use.
pub fn bsc_capacity(epsilon: f64) -> f64 {
    1.0 - binary_entropy(epsilon)
}
