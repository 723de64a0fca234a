//! Command-line front end. `main` parses [`Cli`] and calls [`run`].

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Axis;
use rand::Rng;

use crate::channel::Codeword;
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{DatasetKind, RunConfig};
use crate::data::{
    default_split_sizes, gen_random_bits, load_binarized_idx, read_bit_corpus, DataKind, Dataset, Split,
};
use crate::eval::{
    bench_decode, evaluate_distortion, extract_features, interpolate, markov_chain_sample, BenchConfig, ChainMode,
    Metric,
};
use crate::ldpc::{ldpc_encode, make_generator, make_parity_check, BpDecoder, LdpcCode, ParityCheckMatrix};
use crate::necst::{train_with, ModelSpec, NecstModel};
use crate::report::{write_atomic, Report};
use crate::{par, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "necst", version, about = "Learned joint source-channel coding")]
pub struct Cli {
    /// Worker threads for data-parallel loops (recorded in reports).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint and a per-epoch report.
    Train(TrainArgs),
    /// Distortion table of a checkpoint at one or more noise levels.
    Evaluate(EvaluateArgs),
    /// Classical LDPC pipeline.
    #[command(subcommand)]
    Ldpc(LdpcCommand),
    /// Markov chain over (input, received code) pairs.
    Sample(SampleArgs),
    /// Decode every code on a one-bit-at-a-time path between two codes.
    Interpolate(InterpolateArgs),
    /// Thresholded encoder outputs, one bitstring per item.
    Features(FeaturesArgs),
    /// Neural decoder vs. belief propagation decode timing.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum Format {
    #[default]
    Table,
    Kv,
}

fn render(report: &Report, format: Format) -> String {
    match format {
        Format::Table => report.to_table(),
        Format::Kv => report.to_kv(),
    }
}

/// Config file plus overrides. Flags win over the file.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub data_path: Option<PathBuf>,
    #[arg(long)]
    pub n_bits: Option<usize>,
    #[arg(long)]
    pub n_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2_enc: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub channel: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let named: [(&str, Option<String>); 10] = [
            ("dataset", self.dataset.clone()),
            ("data_path", self.data_path.as_ref().map(|p| p.display().to_string())),
            ("n_bits", self.n_bits.map(|v| v.to_string())),
            ("n_epochs", self.n_epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("l2_enc", self.l2_enc.map(|v| v.to_string())),
            ("noise", self.noise.map(|v| v.to_string())),
            ("channel", self.channel.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        for (k, v) in named {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated noise levels.
    #[arg(long = "noises", value_delimiter = ',', required = true)]
    pub noises: Vec<f64>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = "l1")]
    pub metric: String,
    #[arg(long, default_value_t = crate::eval::DEFAULT_DRAWS)]
    pub draws: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Subcommand)]
pub enum LdpcCommand {
    /// Build a parity-check matrix.
    Make {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        checks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode messages (one bitstring per line) into codewords.
    Encode {
        #[arg(long)]
        pchk: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pass codewords through a binary symmetric channel.
    Transmit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Belief-propagation decode, writing recovered messages.
    Decode {
        #[arg(long)]
        pchk: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        noise: f64,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
        /// Per-word convergence report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Start from this test item; all zeros if absent.
    #[arg(long)]
    pub start_item: Option<usize>,
    /// Use decoder means instead of samples.
    #[arg(long)]
    pub mean: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Start code as a bitstring.
    #[arg(long)]
    pub from: String,
    /// End code as a bitstring.
    #[arg(long)]
    pub to: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Neural model; a fresh 784-dimensional model is used if absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Parity-check matrix; built at rate 1/2 with the model's code length if absent.
    #[arg(long)]
    pub pchk: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub bits: usize,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

/// Builds the dataset a config describes.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let sizes = |count: usize| {
        if cfg.n_train + cfg.n_valid + cfg.n_test == 0 {
            default_split_sizes(count)
        } else {
            (cfg.n_train, cfg.n_valid, cfg.n_test)
        }
    };
    let path = || {
        cfg.data_path
            .clone()
            .ok_or_else(|| Error::Usage("data_path: required for this dataset".into()))
    };
    Ok(match cfg.dataset {
        DatasetKind::RandomBits => {
            let ds = gen_random_bits(cfg.n_items, cfg.item_len, cfg.bit_p, cfg.seed)?;
            if cfg.n_train + cfg.n_valid + cfg.n_test == 0 {
                ds
            } else {
                let (a, b, c) = sizes(cfg.n_items);
                Dataset::with_split_sizes(ds.items().to_owned(), DataKind::Binary, a, b, c)?
            }
        }
        DatasetKind::Mnist => {
            let p = path()?;
            let file = if p.is_dir() { idx_images_in(&p)? } else { p };
            let count = crate::data::load_idx(&file)?.count();
            load_binarized_idx(&file, cfg.binarize_threshold, sizes(count))?
        }
        DatasetKind::BitCorpus => {
            let items = read_bit_corpus(std::fs::File::open(path()?)?)?;
            let (a, b, c) = sizes(items.nrows());
            Dataset::with_split_sizes(items, DataKind::Binary, a, b, c)?
        }
    })
}

fn idx_images_in(dir: &Path) -> Result<PathBuf> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.contains("images-idx3-ubyte"))
        })
        .collect();
    found.sort();
    found
        .into_iter()
        .next()
        .ok_or_else(|| Error::Usage(format!("data_path: no *images-idx3-ubyte* file in {}", dir.display())))
}

fn check_dims(model: &NecstModel, data: &Dataset) -> Result<()> {
    if model.input_dim() != data.dim() {
        return Err(Error::Usage(format!(
            "checkpoint expects {}-dimensional inputs, dataset has {}",
            model.input_dim(),
            data.dim()
        )));
    }
    Ok(())
}

fn bits_to_string(row: impl IntoIterator<Item = u8>) -> String {
    row.into_iter().map(|b| if b == 1 { '1' } else { '0' }).collect()
}

fn read_bit_lines(path: &Path) -> Result<Vec<Vec<u8>>> {
    let items = read_bit_corpus(std::fs::File::open(path)?)?;
    Ok(items
        .axis_iter(Axis(0))
        .map(|r| r.iter().map(|&v| u8::from(v >= 0.5)).collect())
        .collect())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn parse_code(s: &str) -> Result<Codeword> {
    let bits = s
        .trim()
        .chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            _ => Err(Error::Usage(format!("not a bitstring: {s:?}"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(Codeword::new(bits)?)
}

fn format_values(x: &[f64]) -> String {
    if x.iter().all(|&v| v == 0.0 || v == 1.0) {
        x.iter().map(|&v| if v == 1.0 { '1' } else { '0' }).collect()
    } else {
        x.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(",")
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Usage("--threads must be >= 1".into()));
        }
        par::init_threads(t);
    }
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ldpc(c) => cmd_ldpc(c),
        Command::Sample(a) => cmd_sample(a),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::Features(a) => cmd_features(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    if let Some(p) = &args.checkpoint {
        cfg.checkpoint = p.clone();
    }
    if let Some(p) = &args.report {
        cfg.report = p.clone();
    }
    cfg.validate()?;
    let data = load_dataset(&cfg)?;
    let mut model = NecstModel::new(&cfg.model_spec(data.dim())?)?;
    let tc = cfg.train_config();
    let trace = train_with(&mut model, &data, &tc, |epoch, r| {
        let vd = r.validation_distortion[epoch].map_or("-".to_string(), |d| format!("{d:.6}"));
        eprintln!(
            "epoch {:>4}  objective {:>12.6}  valid_l1 {vd}  {:.1}s",
            epoch + 1,
            r.objective[epoch],
            r.wall_clock[epoch]
        );
    })?;

    let mut report = Report::new(["epoch", "objective", "valid_l1", "seconds"]).meta("threads", par::current_threads());
    for (k, v) in cfg.to_pairs() {
        report.push_meta(k, v);
    }
    for e in 0..trace.objective.len() {
        report.push_row(vec![
            (e + 1).to_string(),
            format!("{:.9}", trace.objective[e]),
            trace.validation_distortion[e].map_or("-".into(), |d| format!("{d:.6}")),
            format!("{:.3}", trace.wall_clock[e]),
        ]);
    }
    let meta = cfg.to_pairs().into_iter().collect();
    save_checkpoint(
        &Checkpoint {
            model,
            seed: cfg.seed,
            meta,
        },
        &cfg.checkpoint,
    )?;
    write_atomic(&cfg.report, render(&report, args.format).as_bytes())?;
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    if args.noises.is_empty() {
        return Err(Error::Usage("--noises: at least one noise level required".into()));
    }
    let ck = load_checkpoint(&args.checkpoint)?;
    let cfg = args.config.resolve()?;
    let data = load_dataset(&cfg)?;
    check_dims(&ck.model, &data)?;
    let split = match args.split.as_str() {
        "train" => data.split(Split::Train),
        "valid" => data.split(Split::Valid),
        "test" => data.split(Split::Test),
        "all" => data.items().to_owned(),
        s => {
            return Err(Error::Usage(format!(
                "--split: expected train, valid, test or all, got {s:?}"
            )))
        }
    };
    if split.nrows() == 0 {
        return Err(Error::Usage(format!("--split: {} split is empty", args.split)));
    }
    let metric: Metric = args.metric.parse()?;
    let rep = evaluate_distortion(&ck.model, split.view(), &args.noises, metric, args.draws, cfg.seed)?;
    let text = render(&rep.to_report().meta("split", &args.split), args.format);
    match &args.out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn read_pchk(path: &Path) -> Result<ParityCheckMatrix> {
    Ok(ParityCheckMatrix::read_text(std::io::BufReader::new(
        std::fs::File::open(path)?,
    ))?)
}

fn cmd_ldpc(cmd: LdpcCommand) -> Result<()> {
    match cmd {
        LdpcCommand::Make { n, checks, seed, out } => {
            let h = make_parity_check(n, checks, &mut par::stream_rng(seed, 0))?;
            write_atomic(&out, h.to_text().as_bytes())?;
        }
        LdpcCommand::Encode { pchk, input, out } => {
            let g = make_generator(&read_pchk(&pchk)?)?;
            let lines = read_bit_lines(&input)?
                .iter()
                .map(|m| Ok(bits_to_string(ldpc_encode(&g, m)?)))
                .collect::<Result<Vec<_>>>()?;
            write_lines(&out, &lines)?;
        }
        LdpcCommand::Transmit {
            input,
            noise,
            seed,
            out,
        } => {
            if !(0.0..=1.0).contains(&noise) {
                return Err(Error::Usage(format!("--noise must be in [0, 1], got {noise}")));
            }
            let mut rng = par::stream_rng(seed, 0);
            let lines: Vec<String> = read_bit_lines(&input)?
                .into_iter()
                .map(|cw| bits_to_string(cw.into_iter().map(|b| b ^ u8::from(rng.random::<f64>() < noise))))
                .collect();
            write_lines(&out, &lines)?;
        }
        LdpcCommand::Decode {
            pchk,
            input,
            noise,
            iters,
            out,
            report,
        } => {
            if !(0.0..=1.0).contains(&noise) {
                return Err(Error::Usage(format!("--noise must be in [0, 1], got {noise}")));
            }
            let h = read_pchk(&pchk)?;
            let g = make_generator(&h)?;
            let dec = BpDecoder::new(&h);
            let words = read_bit_lines(&input)?;
            let mut rep = Report::new(["word", "converged", "iterations"]);
            let mut lines = Vec::with_capacity(words.len());
            for (i, w) in words.iter().enumerate() {
                if w.len() != h.n() {
                    return Err(Error::Usage(format!(
                        "word {} has length {}, code length is {}",
                        i + 1,
                        w.len(),
                        h.n()
                    )));
                }
                let r = dec.decode(w, noise, iters);
                rep.push_row(vec![i.to_string(), r.converged.to_string(), r.iterations.to_string()]);
                lines.push(bits_to_string(g.extract(&r.decoded)));
            }
            write_lines(&out, &lines)?;
            if let Some(p) = report {
                write_atomic(p, rep.to_table().as_bytes())?;
            }
        }
    }
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let cfg = args.config.resolve()?;
    let x0 = match args.start_item {
        Some(i) => {
            let data = load_dataset(&cfg)?;
            check_dims(&ck.model, &data)?;
            let test = data.split(Split::Test);
            if i >= test.nrows() {
                return Err(Error::Usage(format!(
                    "--start-item {i} out of range ({} test items)",
                    test.nrows()
                )));
            }
            test.row(i).to_vec()
        }
        None => vec![0.0; ck.model.input_dim()],
    };
    let mode = if args.mean { ChainMode::Mean } else { ChainMode::Sample };
    let mut rng = par::stream_rng(cfg.seed, 0);
    let states = markov_chain_sample(&ck.model, &x0, args.steps, mode, &mut rng)?;
    let lines: Vec<String> = states
        .iter()
        .map(|s| format!("{} {}", s.y, format_values(&s.x)))
        .collect();
    write_lines(&args.out, &lines)
}

fn cmd_interpolate(args: InterpolateArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let (a, b) = (parse_code(&args.from)?, parse_code(&args.to)?);
    let frames = interpolate(&ck.model, &a, &b)?;
    let lines: Vec<String> = frames
        .iter()
        .map(|(c, x)| format!("{c} {}", format_values(x)))
        .collect();
    write_lines(&args.out, &lines)
}

fn cmd_features(args: FeaturesArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let cfg = args.config.resolve()?;
    let data = load_dataset(&cfg)?;
    check_dims(&ck.model, &data)?;
    let f = extract_features(&ck.model, data.items())?;
    let lines: Vec<String> = f
        .axis_iter(Axis(0))
        .map(|r| bits_to_string(r.iter().copied()))
        .collect();
    write_lines(&args.out, &lines)
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let model = match &args.checkpoint {
        Some(p) => load_checkpoint(p)?.model,
        None => NecstModel::new(&ModelSpec::mlp(
            784,
            args.bits,
            crate::channel::ChannelModel::bsc(args.noise)?,
        ))?,
    };
    let m = model.code_len();
    let h = match &args.pchk {
        Some(p) => read_pchk(p)?,
        None => make_parity_check(m, m / 2, &mut par::stream_rng(args.seed, 0))?,
    };
    let g = make_generator(&h)?;
    let code = LdpcCode { h, g };
    let res = bench_decode(
        &model,
        &code,
        &BenchConfig {
            batch_size: args.batch,
            trials: args.trials,
            epsilon: args.noise,
            bp_iters: args.iters,
            seed: args.seed,
            ..BenchConfig::default()
        },
    )?;
    let text = render(&res.to_report().meta("bits", m), args.format);
    match &args.out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}
