#![allow(dead_code)]

use ndarray::Array2;
use necst::channel::{ChannelKind, ChannelModel, NoisySymbols, Symbol};
use necst::necst::{exact_objective_grad, vimco_step, DecoderFamily, ModelSpec, NecstModel};
use necst::nn::MlpParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small model with nonzero biases, so that no ReLU unit sits exactly on its
/// kink for the all-zero received word.
pub fn tiny_model(
    input_dim: usize,
    code_len: usize,
    channel: ChannelModel,
    family: DecoderFamily,
    seed: u64,
) -> NecstModel {
    let mut model = NecstModel::new(&ModelSpec {
        input_dim,
        code_len,
        encoder_hidden: vec![3],
        decoder_hidden: vec![3],
        channel,
        family,
        seed,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for net in [&mut model.encoder, &mut model.decoder] {
        let mut layers = net.layers().to_vec();
        for l in &mut layers {
            l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        *net = MlpParams::from_layers(layers).unwrap();
    }
    model
}

pub fn random_bits(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect()
}

/// Central finite difference of `f` at `x` along coordinate `i`.
pub fn central_diff(x: &[f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let up = f(&p);
    p[i] = x[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// Returns the number of coordinates further than 3 standard errors from
/// the exact gradient, and the number of coordinates checked.
pub fn unbiasedness_violations(model: &NecstModel, x: &[f64], k: usize, draws: usize, seed: u64) -> (usize, usize) {
    let exact = exact_objective_grad(model, x, k).unwrap();
    let target: Vec<f64> = exact
        .encoder
        .to_flat()
        .into_iter()
        .chain(exact.decoder.to_flat())
        .collect();
    let batch = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; target.len()];
    let mut sum_sq = vec![0.0; target.len()];
    for _ in 0..draws {
        let g = vimco_step(model, batch.view(), k, 0.0, &mut rng).unwrap();
        for (i, v) in g.encoder.to_flat().into_iter().chain(g.decoder.to_flat()).enumerate() {
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }
    let n = draws as f64;
    let mut bad = 0;
    for i in 0..target.len() {
        let mean = sum[i] / n;
        let var = ((sum_sq[i] / n) - mean * mean).max(0.0) * n / (n - 1.0);
        let se = (var / n).sqrt();
        if (mean - target[i]).abs() > 3.0 * se + 1e-12 {
            bad += 1;
        }
    }
    (bad, target.len())
}

/// `P(y) = Σ_ŷ Π q(ŷᵢ) Π P(yᵢ | ŷᵢ)` over every sent word `ŷ`, with the
/// per-bit transition table written out by hand.
pub fn brute_force_marginal(probs: &[f64], y: &NoisySymbols, kind: ChannelKind, eps: f64) -> f64 {
    let m = probs.len();
    let mut total = 0.0;
    for code in 0..(1usize << m) {
        let mut p = 1.0;
        for (i, s) in y.symbols().iter().enumerate() {
            let sent = (code >> i) & 1;
            p *= if sent == 1 { probs[i] } else { 1.0 - probs[i] };
            p *= match (kind, s) {
                (ChannelKind::Bsc, Symbol::Erased) => 0.0,
                (ChannelKind::Bsc, s) => {
                    if s.bit() == Some(sent as u8) {
                        1.0 - eps
                    } else {
                        eps
                    }
                }
                (ChannelKind::Bec, Symbol::Erased) => eps,
                (ChannelKind::Bec, s) => {
                    if s.bit() == Some(sent as u8) {
                        1.0 - eps
                    } else {
                        0.0
                    }
                }
            };
        }
        total += p;
    }
    total
}
