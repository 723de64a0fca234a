//! Datasets: IDX image files, static binarisation and Bernoulli bit corpora.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::par::stream_rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic {0:#010x} (expected unsigned-byte data, 0x00000801 or 0x00000803 style)")]
    BadMagic(u32),
    #[error("truncated IDX data: need {expected} bytes, found {found} ({missing} missing)")]
    Truncated {
        expected: usize,
        found: usize,
        missing: usize,
    },
    #[error("split sizes {train}+{valid}+{test} exceed dataset size {len}")]
    SplitTooLarge {
        train: usize,
        valid: usize,
        test: usize,
        len: usize,
    },
    #[error("split index {index} out of range for {len} items")]
    SplitOutOfRange { index: usize, len: usize },
    #[error("item {index} appears in more than one split")]
    SplitOverlap { index: usize },
    #[error("binary dataset contains non-binary value {value} in item {item}")]
    NotBinary { item: usize, value: f64 },
    #[error("dataset value {value} in item {item} is not finite or not in [0, 1]")]
    OutOfRange { item: usize, value: f64 },
    #[error("probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("bit corpus line {line}: {reason}")]
    Corpus { line: usize, reason: String },
    #[error("dataset is empty")]
    Empty,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A parsed IDX file of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn count(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    /// Elements per item (product of the trailing dimensions).
    pub fn item_len(&self) -> usize {
        self.dims[1..].iter().product()
    }

    /// One row per item, pixels scaled from `0..=255` to `[0, 1]`.
    pub fn to_scaled(&self) -> Array2<f64> {
        let rows = self.count();
        let cols = self.item_len();
        Array2::from_shape_fn((rows, cols), |(r, c)| self.data[r * cols + c] as f64 / 255.0)
    }

    /// Keeps only the first `n` items.
    pub fn truncate(&mut self, n: usize) {
        if n < self.count() {
            let len = n * self.item_len();
            self.data.truncate(len);
            self.dims[0] = n;
        }
    }
}

/// Parses big-endian IDX bytes. Only the unsigned-byte element type (0x08)
/// is accepted.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, DataError> {
    let need = |expected: usize| -> Result<(), DataError> {
        if bytes.len() < expected {
            Err(DataError::Truncated {
                expected,
                found: bytes.len(),
                missing: expected - bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(4)?;
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let ndims = (magic & 0xff) as usize;
    if magic >> 16 != 0 || (magic >> 8) & 0xff != 0x08 || ndims == 0 {
        return Err(DataError::BadMagic(magic));
    }
    let header = 4 + 4 * ndims;
    need(header)?;
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        })
        .collect();
    let total = header + dims.iter().product::<usize>();
    need(total)?;
    Ok(IdxArray {
        magic,
        dims,
        data: bytes[header..total].to_vec(),
    })
}

/// Reads an IDX file, transparently gunzipping `.gz` content.
pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxArray, DataError> {
    let path = path.as_ref();
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io_err(path))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io_err(path))?;
        raw = out;
    }
    parse_idx(&raw)
}

/// Writes an uncompressed IDX file of unsigned bytes.
pub fn write_idx(mut w: impl Write, array: &IdxArray) -> std::io::Result<()> {
    let magic = 0x0800u32 | array.dims.len() as u32;
    w.write_all(&magic.to_be_bytes())?;
    for &d in &array.dims {
        w.write_all(&(d as u32).to_be_bytes())?;
    }
    w.write_all(&array.data)
}

/// `1` where `value >= threshold`, else `0`. Ties go to 1.
pub fn binarize(images: ArrayView2<f64>, threshold: f64) -> Array2<f64> {
    images.mapv(|v| if v >= threshold { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Binary,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    items: Array2<f64>,
    train: Vec<usize>,
    valid: Vec<usize>,
    test: Vec<usize>,
    kind: DataKind,
}

impl Dataset {
    pub fn new(
        items: Array2<f64>,
        kind: DataKind,
        train: Vec<usize>,
        valid: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self, DataError> {
        if items.nrows() == 0 {
            return Err(DataError::Empty);
        }
        let len = items.nrows();
        let mut seen = vec![false; len];
        for &index in train.iter().chain(&valid).chain(&test) {
            if index >= len {
                return Err(DataError::SplitOutOfRange { index, len });
            }
            if std::mem::replace(&mut seen[index], true) {
                return Err(DataError::SplitOverlap { index });
            }
        }
        for (item, row) in items.axis_iter(Axis(0)).enumerate() {
            for &value in row {
                match kind {
                    DataKind::Binary if value != 0.0 && value != 1.0 => {
                        return Err(DataError::NotBinary { item, value })
                    }
                    DataKind::Real if !(0.0..=1.0).contains(&value) => {
                        return Err(DataError::OutOfRange { item, value })
                    }
                    _ => {}
                }
            }
        }
        Ok(Self {
            items,
            train,
            valid,
            test,
            kind,
        })
    }

    /// Carves consecutive train/valid/test blocks from the front of `items`
    /// in file order. Items past the last block are left unused.
    pub fn with_split_sizes(
        items: Array2<f64>,
        kind: DataKind,
        train: usize,
        valid: usize,
        test: usize,
    ) -> Result<Self, DataError> {
        let len = items.nrows();
        if train + valid + test > len {
            return Err(DataError::SplitTooLarge {
                train,
                valid,
                test,
                len,
            });
        }
        Self::new(
            items,
            kind,
            (0..train).collect(),
            (train..train + valid).collect(),
            (train + valid..train + valid + test).collect(),
        )
    }

    pub fn items(&self) -> ArrayView2<'_, f64> {
        self.items.view()
    }

    pub fn len(&self) -> usize {
        self.items.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.items.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.items.ncols()
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Rows of one split, in split order.
    pub fn split(&self, split: Split) -> Array2<f64> {
        self.items.select(Axis(0), self.indices(split))
    }
}

/// Loads an IDX image file, binarises it at `threshold` and carves splits.
pub fn load_binarized_idx(
    path: impl AsRef<Path>,
    threshold: f64,
    sizes: (usize, usize, usize),
) -> Result<Dataset, DataError> {
    let mut raw = load_idx(path)?;
    raw.truncate(sizes.0 + sizes.1 + sizes.2);
    let items = binarize(raw.to_scaled().view(), threshold);
    Dataset::with_split_sizes(items, DataKind::Binary, sizes.0, sizes.1, sizes.2)
}

/// Default 5:1:1 split of `count` items.
pub fn default_split_sizes(count: usize) -> (usize, usize, usize) {
    let valid = count / 7;
    let test = count / 7;
    (count - valid - test, valid, test)
}

/// `count` strings of `length` i.i.d. `Bern(p)` bits, split 5:1:1.
pub fn gen_random_bits(count: usize, length: usize, p: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DataError::InvalidProbability(p));
    }
    if count == 0 || length == 0 {
        return Err(DataError::Empty);
    }
    let mut rng = stream_rng(seed, 0);
    let items = Array2::from_shape_simple_fn((count, length), || if rng.random::<f64>() < p { 1.0 } else { 0.0 });
    let (train, valid, test) = default_split_sizes(count);
    Dataset::with_split_sizes(items, DataKind::Binary, train, valid, test)
}

/// One ASCII bitstring per line.
pub fn write_bit_corpus(mut w: impl Write, items: ArrayView2<f64>) -> std::io::Result<()> {
    for row in items.axis_iter(Axis(0)) {
        let line: String = row.iter().map(|&v| if v >= 0.5 { '1' } else { '0' }).collect();
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads a corpus written by [`write_bit_corpus`]. Blank lines are skipped.
pub fn read_bit_corpus(r: impl Read) -> Result<Array2<f64>, DataError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line.map_err(|e| DataError::Corpus {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .chars()
            .map(|c| match c {
                '0' => Ok(0.0),
                '1' => Ok(1.0),
                other => Err(DataError::Corpus {
                    line: i + 1,
                    reason: format!("unexpected character {other:?}"),
                }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(DataError::Corpus {
                    line: i + 1,
                    reason: format!("length {} differs from {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    let Some(first) = rows.first() else {
        return Err(DataError::Empty);
    };
    let cols = first.len();
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect()).map_err(|e| DataError::Corpus {
        line: 0,
        reason: e.to_string(),
    })
}
