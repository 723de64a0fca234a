//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "NECSTCKP"
//! version      u32
//! channel      u8       0 = BSC, 1 = BEC
//! family       u8       0 = bernoulli, 1 = gaussian
//! epsilon      f64
//! variance     f64      0 for bernoulli
//! seed         u64
//! meta_len     u32      then meta_len bytes of UTF-8 `key=value` lines
//! for encoder, decoder:
//!   n_layers   u32
//!   dims       (n_layers + 1) x u32
//!   acts       n_layers x u8   0 = relu, 1 = sigmoid, 2 = identity
//! weights      f32 per parameter; encoder then decoder, each layer's
//!              weight matrix row-major ([out x in]) then its bias
//! checksum     u64      first 8 bytes of SHA-256 over everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::{ChannelKind, ChannelModel};
use crate::necst::{DecoderFamily, NecstModel};
use crate::nn::{Activation, Dense, MlpParams};
use crate::report::write_atomic;

pub const MAGIC: &[u8; 8] = b"NECSTCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on any single layer width accepted when loading.
const MAX_DIM: u32 = 1 << 24;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// A model plus free-form string metadata (training config echo, seeds).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: NecstModel,
    pub seed: u64,
    pub meta: BTreeMap<String, String>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn act_code(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Sigmoid => 1,
        Activation::Identity => 2,
    }
}

fn act_from_code(c: u8) -> Result<Activation> {
    match c {
        0 => Ok(Activation::Relu),
        1 => Ok(Activation::Sigmoid),
        2 => Ok(Activation::Identity),
        _ => Err(CheckpointError::Malformed(format!("unknown activation code {c}"))),
    }
}

/// Serialises `checkpoint` to bytes.
pub fn encode(checkpoint: &Checkpoint) -> Vec<u8> {
    let model = &checkpoint.model;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(match model.channel().kind() {
        ChannelKind::Bsc => 0,
        ChannelKind::Bec => 1,
    });
    let (family, variance) = match model.family() {
        DecoderFamily::Bernoulli => (0u8, 0.0),
        DecoderFamily::Gaussian { variance } => (1u8, variance),
    };
    out.push(family);
    out.extend_from_slice(&model.channel().epsilon().to_le_bytes());
    out.extend_from_slice(&variance.to_le_bytes());
    out.extend_from_slice(&checkpoint.seed.to_le_bytes());
    let meta: String = checkpoint.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    for net in [&model.encoder, &model.decoder] {
        out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
        for d in net.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend(net.activations().into_iter().map(act_code));
    }
    for net in [&model.encoder, &model.decoder] {
        for layer in net.layers() {
            for &w in layer.weight.iter().chain(layer.bias.iter()) {
                out.extend_from_slice(&(w as f32).to_le_bytes());
            }
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8")))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8")))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4")))
    }
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    if bytes.len() < r.pos + 8 {
        return Err(CheckpointError::Truncated("checksum"));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8"));
    let computed = checksum(payload);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let mut r = Reader {
        bytes: payload,
        pos: r.pos,
    };

    let kind = match r.u8("channel")? {
        0 => ChannelKind::Bsc,
        1 => ChannelKind::Bec,
        c => return Err(CheckpointError::Malformed(format!("unknown channel code {c}"))),
    };
    let family_code = r.u8("family")?;
    let epsilon = r.f64("epsilon")?;
    let variance = r.f64("variance")?;
    let family = match family_code {
        0 => DecoderFamily::Bernoulli,
        1 => DecoderFamily::Gaussian { variance },
        c => return Err(CheckpointError::Malformed(format!("unknown family code {c}"))),
    };
    let channel = ChannelModel::new(kind, epsilon).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let seed = r.u64("seed")?;
    let meta_len = r.u32("meta length")? as usize;
    let meta_text = std::str::from_utf8(r.take(meta_len, "meta")?)
        .map_err(|_| CheckpointError::Malformed("meta is not UTF-8".into()))?;
    let mut meta = BTreeMap::new();
    for line in meta_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Malformed(format!("bad meta line {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    }

    let mut shapes = Vec::with_capacity(2);
    for _ in 0..2 {
        let n_layers = r.u32("layer count")? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(CheckpointError::Malformed(format!("layer count {n_layers}")));
        }
        let dims = (0..=n_layers)
            .map(|_| {
                let d = r.u32("dims")?;
                if d == 0 || d > MAX_DIM {
                    return Err(CheckpointError::Malformed(format!("layer width {d}")));
                }
                Ok(d as usize)
            })
            .collect::<Result<Vec<_>>>()?;
        let acts = (0..n_layers)
            .map(|_| act_from_code(r.u8("activations")?))
            .collect::<Result<Vec<_>>>()?;
        shapes.push((dims, acts));
    }
    let mut nets = Vec::with_capacity(2);
    for (dims, acts) in shapes {
        let mut layers = Vec::with_capacity(acts.len());
        for (i, act) in acts.into_iter().enumerate() {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let mut read = |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| Ok(r.f32("weights")? as f64)).collect() };
            let weight = Array2::from_shape_vec((fan_out, fan_in), read(fan_in * fan_out)?).expect("shape");
            let bias = Array1::from_vec(read(fan_out)?);
            layers.push(Dense {
                weight,
                bias,
                activation: act,
            });
        }
        nets.push(MlpParams::from_layers(layers).map_err(|e| CheckpointError::Malformed(e.to_string()))?);
    }
    if r.pos != payload.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            payload.len() - r.pos
        )));
    }
    let decoder = nets.pop().expect("two nets");
    let encoder = nets.pop().expect("two nets");
    let model = NecstModel::from_parts(encoder, decoder, channel, family)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok(Checkpoint { model, seed, meta })
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode(checkpoint))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
