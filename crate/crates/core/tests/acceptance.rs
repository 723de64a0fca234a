//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Positional arguments filter criteria by id substring.

mod common;

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use common::{brute_force_marginal, central_diff, random_bits, tiny_model, unbiasedness_violations};
use ndarray::Array2;
use necst::channel::{
    binary_entropy, bsc_capacity, channel_loglik, noisy_enc_distribution, ChannelKind, ChannelModel, Codeword,
};
use necst::checkpoint::{self, Checkpoint, CheckpointError};
use necst::cli::load_dataset;
use necst::config::RunConfig;
use necst::data::{parse_idx, write_idx, DataError, IdxArray, Split};
use necst::eval::{
    bench_decode, bit_flip_path, evaluate_distortion, ideal_code_bits, BenchConfig, Metric, DEFAULT_DRAWS,
};
use necst::ldpc::{ldpc_encode, simulate_ber, BpDecoder, LdpcCode};
use necst::necst::{
    enumerate_words, exact_objective_grad, sample_noisy_codes, train_with, vimco_gradients, DecoderFamily, ModelSpec,
    NecstModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-10k")
}

/// Trains from a config text and returns the test distortion at the
/// training noise level.
fn train_and_test(config: &str) -> f64 {
    let cfg = RunConfig::from_text(config).unwrap();
    cfg.validate().unwrap();
    let data = load_dataset(&cfg).unwrap();
    let mut model = NecstModel::new(&cfg.model_spec(data.dim()).unwrap()).unwrap();
    let tc = cfg.train_config();
    let tag = config.replace('\n', " ");
    train_with(&mut model, &data, &tc, |e, r| {
        if (e + 1) % 10 == 0 {
            eprintln!("  [{tag}] epoch {} objective {:.4}", e + 1, r.objective[e]);
        }
    })
    .unwrap();
    let test = data.split(Split::Test);
    let rep = evaluate_distortion(&model, test.view(), &[cfg.noise], Metric::L1, DEFAULT_DRAWS, cfg.seed).unwrap();
    rep.rows[0].value
}

fn random_bits_config(noise: f64) -> String {
    format!("dataset = random_bits\nn_bits = 50\nn_epochs = 200\nnoise = {noise}\neval_every = 0\n")
}

fn mnist_config(noise: f64, epochs: usize, n_train: usize) -> String {
    format!(
        "dataset = mnist\ndata_path = {}\nn_bits = 100\nn_epochs = {epochs}\nnoise = {noise}\n\
         n_train = {n_train}\nn_valid = 1000\nn_test = 2000\neval_every = 0\n",
        mnist_dir().display()
    )
}

/// Reduced MNIST run at ε = 0, shared by criteria 3 and 4.
fn mnist_reduced_clean() -> f64 {
    static D: OnceLock<f64> = OnceLock::new();
    *D.get_or_init(|| train_and_test(&mnist_config(0.0, 30, 5000)))
}

fn c1_null_channel() -> Outcome {
    let d = train_and_test(&random_bits_config(0.5));
    check(
        (0.45..=0.55).contains(&d),
        format!("random bits, eps=0.5: distortion {d:.4} in [0.45, 0.55]"),
    )
}

fn c2_noiseless_random_bits() -> Outcome {
    let d = train_and_test(&random_bits_config(0.0));
    check(d <= 0.35, format!("random bits, eps=0: distortion {d:.4} <= 0.35"))
}

fn c3_mnist_full() -> Outcome {
    let d = train_and_test(&mnist_config(0.0, 200, 7000));
    check(d <= 0.055, format!("mnist 200 epochs: distortion {d:.4} <= 0.055"))
}

fn c3_mnist_reduced() -> Outcome {
    let d = mnist_reduced_clean();
    check(d <= 0.09, format!("mnist 5k/30 epochs: distortion {d:.4} <= 0.09"))
}

fn c4_monotone_in_noise() -> Outcome {
    let d0 = mnist_reduced_clean();
    let d2 = train_and_test(&mnist_config(0.2, 30, 5000));
    let d4 = train_and_test(&mnist_config(0.4, 30, 5000));
    check(
        d2 - d0 > 0.005 && d4 - d2 > 0.005,
        format!("d(0)={d0:.4} d(0.2)={d2:.4} d(0.4)={d4:.4}, gaps > 0.005"),
    )
}

fn c5_vimco() -> Outcome {
    let cases = [
        (3, 2, ChannelModel::bsc(0.1).unwrap(), DecoderFamily::Bernoulli),
        (4, 3, ChannelModel::bec(0.2).unwrap(), DecoderFamily::Bernoulli),
        (
            2,
            2,
            ChannelModel::bsc(0.3).unwrap(),
            DecoderFamily::Gaussian { variance: 1.0 },
        ),
    ];
    let (mut bad, mut total) = (0, 0);
    for (ci, (n, m, ch, family)) in cases.into_iter().enumerate() {
        let model = tiny_model(n, m, ch, family, 30 + ci as u64);
        let x = random_bits(n, 40 + ci as u64);
        let (b, t) = unbiasedness_violations(&model, &x, 5, 10_000, 99);
        bad += b;
        total += t;
    }

    let model = tiny_model(4, 3, ChannelModel::bsc(0.2).unwrap(), DecoderFamily::Bernoulli, 60);
    let batch = Array2::from_shape_vec((2, 4), vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let samples: Vec<_> = (0..2)
        .map(|r| {
            let dist = model.noisy_distribution(&batch.row(r).to_vec()).unwrap();
            sample_noisy_codes(&dist, 5, &mut rng)
        })
        .collect();
    let g = vimco_gradients(&model, batch.view(), &samples, 0.0)
        .unwrap()
        .decoder
        .to_flat();
    let dec = model.decoder.to_flat();
    let (mut worst, mut worst_abs) = (0.0f64, 0.0f64);
    for i in 0..dec.len() {
        let fd = central_diff(&dec, i, 1e-5, |p| {
            let mut m = model.clone();
            m.decoder.set_flat(p).unwrap();
            vimco_gradients(&m, batch.view(), &samples, 0.0).unwrap().objective
        });
        let err = (fd - g[i]).abs();
        worst_abs = worst_abs.max(err);
        if err >= 1e-10 {
            worst = worst.max(err / fd.abs().max(g[i].abs()));
        }
    }
    check(
        bad == 0 && worst <= 1e-4,
        format!(
            "{bad}/{total} coordinates outside 3 SE (1e4 draws); decoder fd over {} params: \
             max rel err {worst:.2e}, max abs err {worst_abs:.2e}",
            dec.len()
        ),
    )
}

fn c6_null_channel_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut count = 0;
    for trial in 0..40u64 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(1..=4);
        let family = if trial % 2 == 0 {
            DecoderFamily::Bernoulli
        } else {
            DecoderFamily::Gaussian { variance: 1.0 }
        };
        let model = tiny_model(n, m, ChannelModel::bsc(0.5).unwrap(), family, 600 + trial);
        let x = random_bits(n, 700 + trial);
        for k in [1, 5] {
            let g = exact_objective_grad(&model, &x, k).unwrap();
            for v in g.encoder.to_flat() {
                worst = worst.max(v.abs());
            }
            count += 1;
        }
    }
    check(
        worst <= 1e-12,
        format!("{count} exact gradients, max |encoder grad| {worst:.1e} <= 1e-12"),
    )
}

fn c7_marginals() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_marg = 0.0f64;
    for case in 0..1000 {
        let kind = if case % 2 == 0 {
            ChannelKind::Bsc
        } else {
            ChannelKind::Bec
        };
        let m = rng.random_range(1..=4);
        let probs: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let eps = rng.random::<f64>();
        let ch = ChannelModel::new(kind, eps).unwrap();
        let dist = noisy_enc_distribution(&probs, &ch);
        for y in enumerate_words(m, &ch) {
            let direct: f64 = (0..m).map(|i| dist.prob(i, y.symbols()[i])).product();
            worst_marg = worst_marg.max((direct - brute_force_marginal(&probs, &y, kind, eps)).abs());
        }
    }
    let mut worst_norm = 0.0f64;
    for m in 1..=8 {
        for kind in [ChannelKind::Bsc, ChannelKind::Bec] {
            let ch = ChannelModel::new(kind, rng.random::<f64>()).unwrap();
            let code = Codeword::new((0..m).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
            let total: f64 = enumerate_words(m, &ch)
                .iter()
                .map(|y| channel_loglik(y, &code, &ch).unwrap().exp())
                .sum();
            worst_norm = worst_norm.max((total - 1.0).abs());
        }
    }
    check(
        worst_marg <= 1e-12 && worst_norm <= 1e-10,
        format!("1000 cases: marginal err {worst_marg:.1e} <= 1e-12; m<=8 normalisation err {worst_norm:.1e} <= 1e-10"),
    )
}

fn c8_ldpc() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let code = LdpcCode::new(200, 100, &mut rng).unwrap();
    let h = &code.h;
    let weights_ok = h.column_weights().iter().all(|&w| w == 3);
    let mut girth_ok = true;
    for a in 0..h.n() {
        let ra: HashSet<_> = h.column(a).iter().collect();
        for b in a + 1..h.n() {
            if h.column(b).iter().filter(|r| ra.contains(r)).count() > 1 {
                girth_ok = false;
            }
        }
    }
    let null_ok = code.g.rows().iter().all(|row| h.syndrome(row).iter().all(|&s| s == 0));
    let decoder = BpDecoder::new(h);
    let mut fixed_ok = true;
    for _ in 0..20 {
        let msg: Vec<u8> = (0..code.g.k()).map(|_| rng.random_range(0..2u8)).collect();
        let cw = ldpc_encode(&code.g, &msg).unwrap();
        let r = decoder.decode(&cw, 0.05, 50);
        fixed_ok &= r.converged && r.iterations == 1 && r.decoded == cw;
    }
    let trials = 400;
    let ber: Vec<f64> = [0.02, 0.05, 0.08]
        .iter()
        .map(|&e| simulate_ber(&code, e, 50, trials, 80).decoded_ber)
        .collect();
    let ok = weights_ok
        && girth_ok
        && null_ok
        && fixed_ok
        && ber[1] < 0.02
        && ber[1] < 0.05
        && ber[0] <= ber[1]
        && ber[1] <= ber[2];
    check(
        ok,
        format!(
            "weight3 {weights_ok}, girth>=6 {girth_ok}, GH^T=0 {null_ok}, clean fixed point {fixed_ok}; \
             BER over {trials} trials at eps 0.02/0.05/0.08: {:.5}/{:.5}/{:.5}",
            ber[0], ber[1], ber[2]
        ),
    )
}

fn c9_decode_speed() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let code = LdpcCode::new(200, 100, &mut rng).unwrap();
    let model = NecstModel::new(&ModelSpec::mlp(784, 200, ChannelModel::bsc(0.1).unwrap())).unwrap();
    let cfg = BenchConfig {
        trials: 20,
        ..BenchConfig::default()
    };
    let b = bench_decode(&model, &code, &cfg).unwrap();
    let s = b.speedup_batched();
    check(
        s >= 5.0,
        format!(
            "200 bits, eps={}, {} trials: batched speedup {s:.1}x >= 5 (unbatched {:.1}x)",
            cfg.epsilon,
            cfg.trials,
            b.speedup_unbatched()
        ),
    )
}

fn c10_entropy() -> Outcome {
    let h = binary_entropy(0.1);
    let c = bsc_capacity(0.1);
    let bits = ideal_code_bits(500.0, 0.1).unwrap();
    let ok = binary_entropy(0.5) == 1.0
        && binary_entropy(0.0) == 0.0
        && (h - 0.46900).abs() <= 1e-5
        && (c - 0.53100).abs() <= 1e-5
        && (bits - 941.6).abs() <= 0.2;
    check(
        ok,
        format!("H_b(0.1)={h:.6} C(0.1)={c:.6} ideal_code_bits(500,0.1)={bits:.2}"),
    )
}

fn c11_structural() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let a = Codeword::new((0..n).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
        let b = Codeword::new((0..n).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
        let path = bit_flip_path(&a, &b).unwrap();
        assert_eq!(path.first(), Some(&a));
        assert_eq!(path.last(), Some(&b));
        assert_eq!(path.len(), a.hamming(&b).unwrap() + 1);
        assert!(path.windows(2).all(|w| w[0].hamming(&w[1]).unwrap() == 1));
    }

    let model = tiny_model(6, 4, ChannelModel::bsc(0.1).unwrap(), DecoderFamily::Bernoulli, 11);
    let ck = Checkpoint {
        model: model.clone(),
        seed: 11,
        meta: Default::default(),
    };
    let bytes = checkpoint::encode(&ck);
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.model.encoder, model.encoder.rounded_to_f32());
    let mut bad = bytes.clone();
    bad[bytes.len() / 2] ^= 1;
    assert!(matches!(
        checkpoint::decode(&bad),
        Err(CheckpointError::Checksum { .. })
    ));

    let idx = IdxArray {
        magic: 0x0803,
        dims: vec![3, 2, 2],
        data: (0..12).collect(),
    };
    let mut raw = Vec::new();
    write_idx(&mut raw, &idx).unwrap();
    assert_eq!(parse_idx(&raw).unwrap(), idx);
    assert!(matches!(
        parse_idx(&raw[..raw.len() - 1]),
        Err(DataError::Truncated { .. })
    ));

    let cfg = RunConfig::from_text(
        "dataset = random_bits\nn_items = 70\nitem_len = 8\nn_bits = 4\nenc_hidden = 8\ndec_hidden = 8\n\
         n_epochs = 2\nbatch_size = 10\nseed = 3\n",
    )
    .unwrap();
    let data = load_dataset(&cfg).unwrap();
    let run = || {
        let mut m = NecstModel::new(&cfg.model_spec(data.dim()).unwrap()).unwrap();
        let r = train_with(&mut m, &data, &cfg.train_config(), |_, _| {}).unwrap();
        let d = evaluate_distortion(&m, data.split(Split::Test).view(), &[0.0, 0.2], Metric::L1, 3, 5).unwrap();
        (
            r.objective,
            m.decoder.to_flat(),
            d.rows.iter().map(|r| r.value).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());

    let secs = start.elapsed().as_secs_f64();
    check(
        secs < 60.0,
        format!("flip path, checkpoint, IDX, determinism: {secs:.2}s < 60s"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("1", c1_null_channel),
        ("2", c2_noiseless_random_bits),
        ("3-full", c3_mnist_full),
        ("3-reduced", c3_mnist_reduced),
        ("4", c4_monotone_in_noise),
        ("5", c5_vimco),
        ("6", c6_null_channel_gradient),
        ("7", c7_marginals),
        ("8", c8_ldpc),
        ("9", c9_decode_speed),
        ("10", c10_entropy),
        ("11", c11_structural),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| id.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS criterion {id}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {id}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
