mod common;

use std::io::Write;
use std::path::Path;
use std::process::Command;

use common::tiny_model;
use flate2::write::GzEncoder;
use ndarray::Array2;
use necst::channel::{ChannelModel, Codeword};
use necst::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use necst::data::{load_binarized_idx, load_idx, parse_idx, write_idx, DataError, DataKind, Dataset, IdxArray};
use necst::eval::{bit_flip_path, evaluate_distortion, Metric};
use necst::necst::{train, DecoderFamily, TrainConfig};
use proptest::prelude::*;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_necst"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

proptest! {
    #[test]
    fn flip_path_properties(pair in (1usize..40).prop_flat_map(|n| (
        prop::collection::vec(0u8..2, n),
        prop::collection::vec(0u8..2, n),
    ))) {
        let a = Codeword::new(pair.0).unwrap();
        let b = Codeword::new(pair.1).unwrap();
        let path = bit_flip_path(&a, &b).unwrap();
        prop_assert_eq!(path.first().unwrap(), &a);
        prop_assert_eq!(path.last().unwrap(), &b);
        prop_assert_eq!(path.len(), a.hamming(&b).unwrap() + 1);
        for w in path.windows(2) {
            prop_assert_eq!(w[0].hamming(&w[1]).unwrap(), 1);
            // Flips happen in ascending index order.
            let i = (0..a.len()).find(|&i| w[0].bits()[i] != w[1].bits()[i]).unwrap();
            prop_assert!(w[0].bits()[..i] == b.bits()[..i]);
        }
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = tiny_model(5, 3, ChannelModel::bsc(0.1).unwrap(), DecoderFamily::Bernoulli, 1);
    let ck = Checkpoint {
        model: model.clone(),
        seed: 1,
        meta: Default::default(),
    };
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let rounded = {
        let mut m = model.clone();
        m.encoder = m.encoder.rounded_to_f32();
        m.decoder = m.decoder.rounded_to_f32();
        m
    };
    let x = Array2::from_shape_fn((4, 5), |(i, j)| ((i + j) % 2) as f64);
    assert_eq!(
        back.model.encode_probs_batch(x.view()).unwrap(),
        rounded.encode_probs_batch(x.view()).unwrap()
    );
    let y = Array2::from_shape_fn((4, 3), |(i, j)| ((i * j) % 2) as f64);
    assert_eq!(
        back.model.decode_batch(y.view()).unwrap(),
        rounded.decode_batch(y.view()).unwrap()
    );

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Checksum { .. })));
}

fn idx_bytes(magic: u32, dims: &[u32], data: &[u8]) -> Vec<u8> {
    let mut v = magic.to_be_bytes().to_vec();
    for d in dims {
        v.extend_from_slice(&d.to_be_bytes());
    }
    v.extend_from_slice(data);
    v
}

#[test]
fn idx_parsing() {
    let data: Vec<u8> = (0..2 * 2 * 3).map(|i| (i * 20) as u8).collect();
    let bytes = idx_bytes(0x0803, &[2, 2, 3], &data);
    let arr = parse_idx(&bytes).unwrap();
    assert_eq!(arr.dims, vec![2, 2, 3]);
    assert_eq!(arr.count(), 2);
    assert_eq!(arr.item_len(), 6);
    assert_eq!(arr.to_scaled()[[1, 0]], 120.0 / 255.0);

    let mut written = Vec::new();
    write_idx(&mut written, &arr).unwrap();
    assert_eq!(written, bytes);

    assert!(matches!(
        parse_idx(&bytes[..bytes.len() - 2]),
        Err(DataError::Truncated { missing: 2, .. })
    ));
    assert!(matches!(
        parse_idx(&idx_bytes(0x0d03, &[1, 1, 1], &[0, 0, 0, 0])),
        Err(DataError::BadMagic(_))
    ));

    let labels = parse_idx(&idx_bytes(0x0801, &[3], &[7, 1, 4])).unwrap();
    assert_eq!(labels.data, vec![7, 1, 4]);
}

#[test]
fn gzipped_idx_loads_and_binarizes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("images-idx3-ubyte.gz");
    let data: Vec<u8> = (0..7 * 4).map(|i| if i % 3 == 0 { 200 } else { 10 }).collect();
    let arr = IdxArray {
        magic: 0x0803,
        dims: vec![7, 2, 2],
        data,
    };
    let mut gz = GzEncoder::new(Vec::new(), flate2::Compression::default());
    write_idx(&mut gz, &arr).unwrap();
    std::fs::File::create(&path)
        .unwrap()
        .write_all(&gz.finish().unwrap())
        .unwrap();
    assert_eq!(load_idx(&path).unwrap(), arr);
    let ds = load_binarized_idx(&path, 0.5, (5, 1, 1)).unwrap();
    assert_eq!(ds.len(), 7);
    assert_eq!(ds.dim(), 4);
    assert!(ds.items().iter().all(|&v| v == 0.0 || v == 1.0));
    assert_eq!(ds.items()[[0, 0]], 1.0);
    assert_eq!(ds.items()[[0, 1]], 0.0);
}

fn toy_dataset() -> Dataset {
    let items = Array2::from_shape_fn((40, 6), |(i, j)| ((i >> (j % 3)) & 1) as f64);
    Dataset::with_split_sizes(items, DataKind::Binary, 28, 6, 6).unwrap()
}

#[test]
fn training_and_evaluation_are_deterministic() {
    let data = toy_dataset();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let run = || {
        let model = tiny_model(6, 4, ChannelModel::bsc(0.1).unwrap(), DecoderFamily::Bernoulli, 2);
        let (m, r) = train(model, &data, &cfg).unwrap();
        let test = data.split(necst::data::Split::Test);
        let e = evaluate_distortion(&m, test.view(), &[0.0, 0.2], Metric::L1, 4, 3).unwrap();
        (m, r.objective, r.validation_distortion, e)
    };
    let a = run();
    let b = run();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_eq!(a.3, b.3);
    let seq = necst::par::sequential(run);
    assert_eq!(a.1, seq.1);
    assert_eq!(a.3, seq.3);
}

const TINY: &str = "dataset = random_bits\nn_items = 70\nitem_len = 8\nn_bits = 4\nenc_hidden = 8\ndec_hidden = 8\nn_epochs = 2\nbatch_size = 10\nseed = 3\n";

fn train_tiny(dir: &Path, name: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let ck = dir.join(format!("{name}.ckpt"));
    let rep = dir.join(format!("{name}.txt"));
    run_ok(
        bin()
            .args(["--threads", "1", "train", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(&ck)
            .arg("--report")
            .arg(&rep),
    );
    (ck, rep)
}

fn objective_column(report: &Path) -> Vec<String> {
    lines(report)
        .into_iter()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split_whitespace().nth(1).unwrap().to_string())
        .collect()
}

#[test]
fn cli_train_is_deterministic_and_records_threads() {
    let dir = tempfile::tempdir().unwrap();
    let (_, r1) = train_tiny(dir.path(), "a");
    let (_, r2) = train_tiny(dir.path(), "b");
    let c1 = objective_column(&r1);
    assert_eq!(c1.len(), 2);
    assert_eq!(c1, objective_column(&r2));
    let text = std::fs::read_to_string(&r1).unwrap();
    assert!(text.contains("# threads: 1"));
    assert!(text.contains("# n_bits: 4"));
}

#[test]
fn cli_train_validation_failure_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    let rep = dir.path().join("r.txt");
    let out = bin()
        .args(["train", "--dataset", "mnist", "--noise", "2"])
        .arg("--checkpoint")
        .arg(&ck)
        .arg("--report")
        .arg(&rep)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("data_path"), "{err}");
    assert!(err.contains("noise"), "{err}");
    assert!(!ck.exists() && !rep.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn cli_appendix_style_config_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("a3.cfg");
    std::fs::write(
        &cfg,
        "n_bits = 50\nn_epochs = 200\nbatch_size = 100\nlr = 0.001\nl2_enc = 0.001\n",
    )
    .unwrap();
    let parsed = necst::config::RunConfig::from_file(&cfg).unwrap();
    parsed.validate().unwrap();
    assert_eq!((parsed.n_bits, parsed.n_epochs, parsed.batch_size), (50, 200, 100));
    assert_eq!((parsed.lr, parsed.l2_enc), (0.001, 0.001));
}

#[test]
fn cli_evaluate_sample_interpolate_features() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, _) = train_tiny(dir.path(), "m");
    let cfg = dir.path().join("tiny.cfg");

    let table = run_ok(
        bin()
            .arg("evaluate")
            .arg("--checkpoint")
            .arg(&ck)
            .arg("--config")
            .arg(&cfg)
            .args(["--noises", "0,0.1,0.5"]),
    );
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(
        rows[0].split_whitespace().collect::<Vec<_>>(),
        ["noise", "metric", "value", "stddev", "n"]
    );
    assert_eq!(rows.len(), 4);

    let kv = run_ok(
        bin()
            .arg("evaluate")
            .arg("--checkpoint")
            .arg(&ck)
            .arg("--config")
            .arg(&cfg)
            .args(["--noises", "0.2", "--format", "kv"]),
    );
    let map = necst::report::parse_kv(&kv).unwrap();
    assert_eq!(map["row0.noise"], "0.2");
    assert_eq!(map["row0.n"], "10");

    let out = bin()
        .arg("evaluate")
        .arg("--checkpoint")
        .arg(&ck)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());

    let wrong = dir.path().join("wrong.cfg");
    std::fs::write(&wrong, TINY.replace("item_len = 8", "item_len = 9")).unwrap();
    let out = bin()
        .arg("evaluate")
        .arg("--checkpoint")
        .arg(&ck)
        .arg("--config")
        .arg(&wrong)
        .args(["--noises", "0"])
        .output()
        .unwrap();
    assert!(!out.status.success());

    let samples = dir.path().join("chain.txt");
    run_ok(
        bin()
            .arg("sample")
            .arg("--checkpoint")
            .arg(&ck)
            .args(["--steps", "12"])
            .arg("--out")
            .arg(&samples),
    );
    let chain = lines(&samples);
    assert_eq!(chain.len(), 12);
    for l in &chain {
        let (y, x) = l.split_once(' ').unwrap();
        assert_eq!(y.len(), 4);
        assert!(x.chars().all(|c| c == '0' || c == '1') && x.len() == 8);
    }

    let interp = dir.path().join("interp.txt");
    run_ok(
        bin()
            .arg("interpolate")
            .arg("--checkpoint")
            .arg(&ck)
            .args(["--from", "0110", "--to", "0110"])
            .arg("--out")
            .arg(&interp),
    );
    assert_eq!(lines(&interp).len(), 1);
    run_ok(
        bin()
            .arg("interpolate")
            .arg("--checkpoint")
            .arg(&ck)
            .args(["--from", "0000", "--to", "1011"])
            .arg("--out")
            .arg(&interp),
    );
    let frames = lines(&interp);
    assert_eq!(frames.len(), 4);
    assert!(frames[0].starts_with("0000 ") && frames[3].starts_with("1011 "));

    let feats = dir.path().join("features.txt");
    run_ok(
        bin()
            .arg("features")
            .arg("--checkpoint")
            .arg(&ck)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&feats),
    );
    let f = lines(&feats);
    assert_eq!(f.len(), 70);
    assert!(f.iter().all(|l| l.len() == 4));
}

#[test]
fn cli_ldpc_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    run_ok(
        bin()
            .args(["ldpc", "make", "--n", "200", "--checks", "100", "--seed", "1", "--out"])
            .arg(p("H.txt")),
    );
    let h = lines(&p("H.txt"));
    assert_eq!(h[0], "200 100 600");
    assert_eq!(h.len(), 601);

    let hm =
        necst::ldpc::ParityCheckMatrix::read_text(std::io::BufReader::new(std::fs::File::open(p("H.txt")).unwrap()))
            .unwrap();
    let k = necst::ldpc::make_generator(&hm).unwrap().k();
    let msgs: Vec<String> = (0..100)
        .map(|i| {
            (0..k)
                .map(|j| if (i * 7 + j * 13) % 5 < 2 { '1' } else { '0' })
                .collect()
        })
        .collect();
    std::fs::write(p("msg.txt"), msgs.join("\n") + "\n").unwrap();
    run_ok(
        bin()
            .args(["ldpc", "encode", "--pchk"])
            .arg(p("H.txt"))
            .arg("--input")
            .arg(p("msg.txt"))
            .arg("--out")
            .arg(p("cw.txt")),
    );

    // Noiseless round trip.
    run_ok(
        bin()
            .args(["ldpc", "transmit", "--noise", "0", "--input"])
            .arg(p("cw.txt"))
            .arg("--out")
            .arg(p("rx0.txt")),
    );
    run_ok(
        bin()
            .args(["ldpc", "decode", "--noise", "0", "--pchk"])
            .arg(p("H.txt"))
            .arg("--input")
            .arg(p("rx0.txt"))
            .arg("--out")
            .arg(p("dec0.txt")),
    );
    assert_eq!(lines(&p("dec0.txt")), msgs);

    run_ok(
        bin()
            .args(["ldpc", "transmit", "--noise", "0.05", "--seed", "4", "--input"])
            .arg(p("cw.txt"))
            .arg("--out")
            .arg(p("rx.txt")),
    );
    run_ok(
        bin()
            .args(["ldpc", "decode", "--noise", "0.05", "--iters", "50", "--pchk"])
            .arg(p("H.txt"))
            .arg("--input")
            .arg(p("rx.txt"))
            .arg("--out")
            .arg(p("dec.txt"))
            .arg("--report")
            .arg(p("dec_report.txt")),
    );
    let g = necst::ldpc::make_generator(&hm).unwrap();
    let errors = |file: &str, extract: bool| -> usize {
        lines(&p(file))
            .iter()
            .zip(&msgs)
            .map(|(got, want)| {
                let got: Vec<u8> = got.bytes().map(|b| b - b'0').collect();
                let got = if extract { g.extract(&got) } else { got };
                got.iter().zip(want.bytes()).filter(|(a, b)| **a != *b - b'0').count()
            })
            .sum()
    };
    let raw = errors("rx.txt", true);
    let decoded = errors("dec.txt", false);
    assert!(decoded < raw, "decoded {decoded} vs raw {raw}");
    assert_eq!(lines(&p("dec_report.txt")).len(), 101);
}

#[test]
fn cli_bench_reports_both_modes() {
    let out = run_ok(bin().args([
        "--threads",
        "1",
        "bench",
        "--bits",
        "40",
        "--batch",
        "4",
        "--trials",
        "10",
    ]));
    for method in ["neural_batched", "neural_unbatched", "bp_50"] {
        assert!(out.contains(method), "{out}");
    }
    assert!(out.contains("# threads: 1"));
    assert!(out.contains("speedup_unbatched"));
    let bad = bin().args(["bench", "--bits", "40", "--trials", "3"]).output().unwrap();
    assert!(!bad.status.success());
}
